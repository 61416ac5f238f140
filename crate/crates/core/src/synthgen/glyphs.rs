//! Seeded procedural glyphs: one fixed binary bitmap per character.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphAtlas {
    width: usize,
    height: usize,
    bitmaps: BTreeMap<char, Vec<bool>>,
}

fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl GlyphAtlas {
    /// Builds bitmaps for `chars` in order. Every bitmap has between a quarter
    /// and three quarters of its cells set and differs from every other one
    /// in at least `min_distance` cells.
    pub fn build(chars: &[char], width: usize, height: usize, min_distance: usize, seed: u64) -> Result<Self> {
        let cells = width * height;
        if cells == 0 {
            return Err(Error::Config("glyph cells must be at least 1×1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bitmaps: BTreeMap<char, Vec<bool>> = BTreeMap::new();
        for &c in chars {
            if bitmaps.contains_key(&c) {
                continue;
            }
            let mut found = None;
            for _ in 0..100_000 {
                let bits: Vec<bool> = (0..cells).map(|_| rng.gen_bool(0.5)).collect();
                let ink = bits.iter().filter(|&&b| b).count();
                if 4 * ink < cells || 4 * ink > 3 * cells {
                    continue;
                }
                if bitmaps.values().all(|b| hamming(b, &bits) >= min_distance.max(1)) {
                    found = Some(bits);
                    break;
                }
            }
            let bits = found.ok_or_else(|| {
                Error::Config(format!(
                    "cannot fit {} distinct {width}×{height} glyphs at distance {min_distance}",
                    chars.len()
                ))
            })?;
            bitmaps.insert(c, bits);
        }
        Ok(Self { width, height, bitmaps })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn glyph(&self, c: char) -> Option<&[bool]> {
        self.bitmaps.get(&c).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.bitmaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bitmaps.is_empty()
    }
}
