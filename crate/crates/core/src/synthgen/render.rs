//! Drawing entity texts onto a background with the glyph atlas.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::glyphs::GlyphAtlas;
use super::{LayoutKind, ScenarioSpec};
use crate::domain::GrayImage;
use crate::error::{Error, Result};

/// Per-template background rules and slot offsets, fixed by the layout seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub offsets: Vec<(isize, isize)>,
}

pub(crate) fn build_templates(spec: &ScenarioSpec) -> Vec<Template> {
    if spec.layout != LayoutKind::TemplateSet {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.layout_seed);
    let j = spec.template_jitter as isize;
    (0..spec.templates)
        .map(|_| Template {
            rows: (0..2).map(|_| rng.gen_range(0..spec.height)).collect(),
            cols: vec![rng.gen_range(0..spec.width)],
            offsets: spec
                .slots
                .iter()
                .map(|_| (rng.gen_range(-j..=j), rng.gen_range(-j..=j)))
                .collect(),
        })
        .collect()
}

pub(crate) struct Canvas<'a> {
    pub image: GrayImage,
    pub ink: f64,
    pub atlas: &'a GlyphAtlas,
    pub scale: usize,
    pub pitch: usize,
}

impl Canvas<'_> {
    fn glyph(&mut self, c: char, x: usize, y: usize) -> Result<()> {
        let (gw, gh, s) = (self.atlas.width(), self.atlas.height(), self.scale);
        let bits = self
            .atlas
            .glyph(c)
            .ok_or_else(|| Error::Layout(format!("no glyph for {c:?}")))?;
        if x + gw * s > self.image.width || y + gh * s > self.image.height {
            return Err(Error::Layout(format!(
                "glyph {c:?} at ({x}, {y}) overflows the {}×{} image",
                self.image.width, self.image.height
            )));
        }
        for gy in 0..gh {
            for gx in 0..gw {
                if bits[gy * gw + gx] {
                    for dy in 0..s {
                        for dx in 0..s {
                            self.image.set(x + gx * s + dx, y + gy * s + dy, self.ink);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Draws `text` left to right starting at `(x, y)`.
    pub fn text(&mut self, text: &str, x: usize, y: usize) -> Result<()> {
        for (i, c) in text.chars().enumerate() {
            self.glyph(c, x + i * self.pitch, y)?;
        }
        Ok(())
    }
}

fn shift(v: usize, by: isize) -> Result<usize> {
    v.checked_add_signed(by)
        .ok_or_else(|| Error::Layout("slot offset moves text off the image".into()))
}

/// Renders the clean document. Absent entities (empty strings) draw nothing,
/// including their label. Returns the image and a background description.
pub fn render<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    atlas: &GlyphAtlas,
    templates: &[Template],
    texts: &BTreeMap<String, String>,
    rng: &mut R,
) -> Result<(GrayImage, String)> {
    let paper = rng.gen_range(spec.paper[0]..=spec.paper[1]);
    let ink = rng.gen_range(spec.ink[0]..=spec.ink[1]);
    let mut canvas = Canvas {
        image: GrayImage::filled(spec.width, spec.height, paper),
        ink,
        atlas,
        scale: spec.glyph.scale,
        pitch: spec.glyph.pitch(),
    };
    let label_gap = 2 * canvas.pitch;
    let draw = |canvas: &mut Canvas<'_>, i: usize, x: usize, y: usize| -> Result<()> {
        let slot = &spec.slots[i];
        let text = texts.get(&slot.entity).map_or("", String::as_str);
        if text.is_empty() {
            return Ok(());
        }
        if text.chars().count() > slot.max_len()? {
            return Err(Error::Layout(format!(
                "text {text:?} for {} exceeds the slot's {} characters",
                slot.entity,
                slot.max_len()?
            )));
        }
        match slot.label {
            Some(l) => {
                canvas.glyph(l, x, y)?;
                canvas.text(text, x + label_gap, y)
            }
            None => canvas.text(text, x, y),
        }
    };
    let background = match spec.layout {
        LayoutKind::Fixed => {
            for (i, slot) in spec.slots.iter().enumerate() {
                draw(&mut canvas, i, slot.x, slot.y)?;
            }
            "blank".to_string()
        }
        LayoutKind::TemplateSet => {
            let k = rng.gen_range(0..templates.len());
            let t = &templates[k];
            let rule = paper * 0.8;
            for &y in &t.rows {
                (0..spec.width).for_each(|x| canvas.image.set(x, y, rule));
            }
            for &x in &t.cols {
                (0..spec.height).for_each(|y| canvas.image.set(x, y, rule));
            }
            for (i, slot) in spec.slots.iter().enumerate() {
                let (dx, dy) = t.offsets[i];
                draw(&mut canvas, i, shift(slot.x, dx)?, shift(slot.y, dy)?)?;
            }
            format!("template{k}")
        }
        LayoutKind::Flexible => {
            let mut rows = spec.rows.clone();
            if spec.shuffle_rows {
                rows.shuffle(rng);
            }
            // Present entities take the next free row, so an entity moves up
            // when earlier ones are missing.
            let mut free = rows.into_iter();
            for (i, slot) in spec.slots.iter().enumerate() {
                let x = slot.x + rng.gen_range(0..=spec.x_jitter);
                if texts.get(&slot.entity).is_some_and(|t| !t.is_empty()) {
                    let y = free.next().expect("validated: one row per slot");
                    draw(&mut canvas, i, x, y)?;
                }
            }
            "card".to_string()
        }
    };
    Ok((canvas.image, background))
}
