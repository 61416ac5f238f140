//! Synthetic document engine: corpus sampling, procedural glyph rendering on
//! a layout, geometric transformation and noise.

pub mod corpus;
pub mod glyphs;
pub mod render;
pub mod transform;

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{Corpus, Pattern};
pub use glyphs::GlyphAtlas;
pub use render::{render, Template};
pub use transform::{transform_and_noise, Elastic, NoiseOp, TransformSpec};

use crate::domain::{Sample, SampleMeta};
use crate::error::{Error, Result};
use crate::parallel::Executor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    /// Every entity at a constant position on a blank page.
    Fixed,
    /// One of a few templates, each with its own rule lines and slot offsets.
    TemplateSet,
    /// Optional entities stacked on rows in slot order; absent ones leave no gap.
    Flexible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlyphSpec {
    pub width: usize,
    pub height: usize,
    /// Pixels per glyph cell along each axis.
    pub scale: usize,
    /// Empty cells between neighbouring glyphs.
    pub spacing: usize,
    pub min_distance: usize,
    pub seed: u64,
}

impl Default for GlyphSpec {
    fn default() -> Self {
        Self {
            width: 3,
            height: 5,
            scale: 1,
            spacing: 1,
            min_distance: 3,
            seed: 0,
        }
    }
}

impl GlyphSpec {
    /// Horizontal advance per character in pixels.
    pub fn pitch(&self) -> usize {
        (self.width + self.spacing) * self.scale
    }
}

/// Copies the first `len` characters of an earlier entity to the front of
/// this one, so the two share a substring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedPrefix {
    pub from: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub entity: String,
    #[serde(default)]
    pub pattern: String,
    /// Draw from this list instead of the pattern when non-empty.
    #[serde(default)]
    pub words: Vec<String>,
    /// Top-left anchor. Flexible layouts use only `x` (as the left margin).
    #[serde(default)]
    pub x: usize,
    #[serde(default)]
    pub y: usize,
    #[serde(default = "one")]
    pub presence: f64,
    /// Marker glyph drawn two advances before the text.
    #[serde(default)]
    pub label: Option<char>,
    #[serde(default)]
    pub shared_prefix: Option<SharedPrefix>,
}

fn one() -> f64 {
    1.0
}

impl SlotSpec {
    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::new(&self.pattern, &self.words)
            .map_err(|e| Error::Config(format!("slot {}: {e}", self.entity)))
    }

    /// Longest string this slot can hold.
    pub fn max_len(&self) -> Result<usize> {
        let shared = self.shared_prefix.as_ref().map_or(0, |s| s.len);
        Ok(self.corpus()?.max_len() + shared)
    }

    fn label_width(&self, pitch: usize) -> usize {
        if self.label.is_some() {
            2 * pitch
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub layout: LayoutKind,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub glyph: GlyphSpec,
    pub slots: Vec<SlotSpec>,
    /// Paper and ink gray levels are drawn per sample from these ranges.
    #[serde(default = "default_paper")]
    pub paper: [f64; 2],
    #[serde(default = "default_ink")]
    pub ink: [f64; 2],
    /// Seeds the template set.
    #[serde(default)]
    pub layout_seed: u64,
    #[serde(default = "default_templates")]
    pub templates: usize,
    /// Largest per-template slot offset in pixels.
    #[serde(default)]
    pub template_jitter: usize,
    /// Row positions for flexible layouts; needs one per slot at least.
    #[serde(default)]
    pub rows: Vec<usize>,
    /// Largest random shift of a flexible row's left edge.
    #[serde(default)]
    pub x_jitter: usize,
    /// Permute the flexible rows per sample before stacking.
    #[serde(default)]
    pub shuffle_rows: bool,
}

fn default_paper() -> [f64; 2] {
    [0.85, 1.0]
}

fn default_ink() -> [f64; 2] {
    [0.0, 0.2]
}

fn default_templates() -> usize {
    1
}

impl ScenarioSpec {
    /// Every character the atlas must draw: text charsets plus labels.
    pub fn glyph_chars(&self) -> Result<Vec<char>> {
        let mut chars = std::collections::BTreeSet::new();
        for s in &self.slots {
            chars.extend(s.corpus()?.charset());
            chars.extend(s.label);
        }
        Ok(chars.into_iter().collect())
    }

    pub fn atlas(&self) -> Result<GlyphAtlas> {
        let g = &self.glyph;
        GlyphAtlas::build(&self.glyph_chars()?, g.width, g.height, g.min_distance, g.seed)
    }

    pub fn entity_names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.entity.as_str()).collect()
    }

    /// Structural checks, plus a check that every slot's largest text stays
    /// inside the image under any rotation and scale `t` admits.
    pub fn validate(&self, t: &TransformSpec) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return cfg("scenario image extent must be positive".into());
        }
        if self.slots.is_empty() {
            return cfg("scenario has no slots".into());
        }
        if self.glyph.width == 0 || self.glyph.height == 0 || self.glyph.scale == 0 {
            return cfg("glyph dimensions must be positive".into());
        }
        for r in [self.paper, self.ink] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return cfg("paper and ink ranges must be ordered within [0, 1]".into());
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in self.slots.iter().enumerate() {
            if !seen.insert(s.entity.as_str()) {
                return cfg(format!("slot entity {:?} appears twice", s.entity));
            }
            s.corpus()?;
            if !(0.0..=1.0).contains(&s.presence) {
                return cfg(format!("slot {}: presence must lie in [0, 1]", s.entity));
            }
            if self.layout == LayoutKind::Fixed && s.presence != 1.0 {
                return cfg(format!("slot {}: fixed layouts need presence 1", s.entity));
            }
            if let Some(sp) = &s.shared_prefix {
                if !self.slots[..i].iter().any(|o| o.entity == sp.from) {
                    return cfg(format!(
                        "slot {}: shared_prefix source {:?} must be an earlier slot",
                        s.entity, sp.from
                    ));
                }
            }
        }
        match self.layout {
            LayoutKind::TemplateSet if self.templates == 0 => {
                return cfg("template_set layouts need at least one template".into())
            }
            LayoutKind::Flexible if self.rows.len() < self.slots.len() => {
                return cfg(format!(
                    "flexible layout has {} rows for {} slots",
                    self.rows.len(),
                    self.slots.len()
                ))
            }
            _ => {}
        }
        for s in &self.slots {
            for (x0, x1, y0, y1) in self.slot_extents(s)? {
                if !self.fits(x0, x1, y0, y1, t) {
                    return Err(Error::Layout(format!(
                        "slot {} ({x0}..{x1}, {y0}..{y1}) can leave the {}×{} image under the configured transform",
                        s.entity, self.width, self.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// Worst-case boxes `(x0, x1, y0, y1)` (exclusive ends, may be negative)
    /// covering every position the slot's longest text can take.
    fn slot_extents(&self, s: &SlotSpec) -> Result<Vec<(f64, f64, f64, f64)>> {
        let pitch = self.glyph.pitch();
        let text_w = s.max_len()? * pitch - self.glyph.spacing * self.glyph.scale;
        let w = (s.label_width(pitch) + text_w) as f64;
        let h = (self.glyph.height * self.glyph.scale) as f64;
        let (x, y) = (s.x as f64, s.y as f64);
        Ok(match self.layout {
            LayoutKind::Fixed => vec![(x, x + w, y, y + h)],
            LayoutKind::TemplateSet => {
                let j = self.template_jitter as f64;
                vec![(x - j, x + w + j, y - j, y + h + j)]
            }
            LayoutKind::Flexible => self
                .rows
                .iter()
                .map(|&r| (x, x + w + self.x_jitter as f64, r as f64, r as f64 + h))
                .collect(),
        })
    }

    fn fits(&self, x0: f64, x1: f64, y0: f64, y1: f64, t: &TransformSpec) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let s = t.scale[1];
        for deg in [-t.rotation_deg, 0.0, t.rotation_deg] {
            let (sin, cos) = deg.to_radians().sin_cos();
            for (px, py) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                // Forward map of the inverse sampling used by rotate_scale.
                let (dx, dy) = (px - cx, py - cy);
                let qx = s * (cos * dx - sin * dy) + cx;
                let qy = s * (sin * dx + cos * dy) + cy;
                if qx < 0.0 || qy < 0.0 || qx > w || qy > h {
                    return false;
                }
            }
        }
        x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// SplitMix64 finaliser, used to derive independent per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix(mix(seed) ^ mix(((index as u64) << 1) | (split == Split::Test) as u64))
}

/// Draws one text per slot. Shared prefixes are resolved against entities
/// drawn earlier in slot order; an absent source contributes nothing.
pub fn sample_texts<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    corpora: &[Corpus],
    rng: &mut R,
) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for (slot, corpus) in spec.slots.iter().zip(corpora) {
        let present = slot.presence >= 1.0 || rng.gen_bool(slot.presence);
        let mut text = corpus.sample(rng);
        if let Some(sp) = &slot.shared_prefix {
            let src: &String = &out[&sp.from];
            let prefix: String = src.chars().take(sp.len).collect();
            text = prefix + &text;
        }
        out.insert(slot.entity.clone(), if present { text } else { String::new() });
    }
    out
}

const MAX_REJECTIONS: usize = 1000;

struct Engine<'a> {
    spec: &'a ScenarioSpec,
    transform: &'a TransformSpec,
    corpora: Vec<Corpus>,
    atlas: GlyphAtlas,
    templates: Vec<Template>,
}

impl Engine<'_> {
    fn sample(
        &self,
        split: Split,
        index: usize,
        seed: u64,
        forbidden: Option<&BTreeMap<String, HashSet<String>>>,
    ) -> Result<Sample> {
        let sseed = sample_seed(seed, split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(sseed);
        let mut texts = sample_texts(self.spec, &self.corpora, &mut rng);
        if let Some(forbidden) = forbidden {
            let mut tries = 0;
            while let Some((entity, _)) = texts
                .iter()
                .find(|(e, t)| !t.is_empty() && forbidden[*e].contains(*t))
            {
                tries += 1;
                if tries > MAX_REJECTIONS {
                    return Err(Error::Generation(format!(
                        "cannot draw a test string for {entity} that is absent from the training set; \
                         widen its pattern or word list"
                    )));
                }
                texts = sample_texts(self.spec, &self.corpora, &mut rng);
            }
        }
        let (clean, background) = render(self.spec, &self.atlas, &self.templates, &texts, &mut rng)?;
        let (mut image, transform) = transform_and_noise(&clean, self.transform, &mut rng);
        // Stored as 8-bit, so in-memory and reloaded samples agree exactly.
        crate::io::quantize(&mut image);
        Ok(Sample {
            id: format!("{}-{index:06}", split.name()),
            image,
            targets: texts,
            meta: SampleMeta {
                seed: sseed,
                background,
                transform,
            },
        })
    }
}

/// Generates `n_train` training and `n_test` test samples. No non-empty test
/// string of an entity occurs among that entity's training strings.
pub fn generate_dataset(
    spec: &ScenarioSpec,
    t: &TransformSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
    exec: &Executor,
) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must both be at least 1".into()));
    }
    spec.validate(t)?;
    t.validate()?;
    let engine = Engine {
        spec,
        transform: t,
        corpora: spec.slots.iter().map(SlotSpec::corpus).collect::<Result<_>>()?,
        atlas: spec.atlas()?,
        templates: render::build_templates(spec),
    };
    let idx: Vec<usize> = (0..n_train).collect();
    let train: Vec<Sample> = exec
        .map(&idx, |_, &i| engine.sample(Split::Train, i, seed, None))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut seen: BTreeMap<String, HashSet<String>> =
        spec.slots.iter().map(|s| (s.entity.clone(), HashSet::new())).collect();
    for s in &train {
        for (e, text) in &s.targets {
            if !text.is_empty() {
                seen.get_mut(e).expect("slot entity").insert(text.clone());
            }
        }
    }
    let idx: Vec<usize> = (0..n_test).collect();
    let test: Vec<Sample> = exec
        .map(&idx, |_, &i| engine.sample(Split::Test, i, seed, Some(&seen)))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(Dataset { seed, train, test })
}
