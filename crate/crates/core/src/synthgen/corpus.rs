//! Text sampling from small pattern grammars or word lists.
//!
//! Pattern syntax: a sequence of atoms, each optionally followed by `{n}` or
//! `{m,n}`. Atoms are `D` (digit), `L` (uppercase letter), `A` (digit or
//! uppercase letter), `[...]` (any listed character), `\c` (literal `c`) or
//! any other literal character. `L{3,6}D{2}` draws 3-6 letters then 2 digits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

const DIGITS: &str = "0123456789";
const LETTERS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Clone, Debug, PartialEq)]
struct Item {
    choices: Vec<char>,
    min: usize,
    max: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pattern {
    source: String,
    items: Vec<Item>,
}

impl Pattern {
    pub fn parse(source: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("pattern {source:?}: {why}"));
        let chars: Vec<char> = source.chars().collect();
        let mut items = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let choices: Vec<char> = match chars[i] {
                'D' => DIGITS.chars().collect(),
                'L' => LETTERS.chars().collect(),
                'A' => DIGITS.chars().chain(LETTERS.chars()).collect(),
                '\\' => {
                    i += 1;
                    vec![*chars.get(i).ok_or_else(|| bad("dangling escape"))?]
                }
                '[' => {
                    let end = chars[i..]
                        .iter()
                        .position(|&c| c == ']')
                        .ok_or_else(|| bad("unclosed '['"))?;
                    let set: BTreeSet<char> = chars[i + 1..i + end].iter().copied().collect();
                    if set.is_empty() {
                        return Err(bad("empty character set"));
                    }
                    i += end;
                    set.into_iter().collect()
                }
                '{' | '}' | ']' => return Err(bad("unexpected bracket")),
                c => vec![c],
            };
            i += 1;
            let (mut min, mut max) = (1, 1);
            if chars.get(i) == Some(&'{') {
                let end = chars[i..]
                    .iter()
                    .position(|&c| c == '}')
                    .ok_or_else(|| bad("unclosed '{'"))?;
                let body: String = chars[i + 1..i + end].iter().collect();
                let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad repetition count"));
                (min, max) = match body.split_once(',') {
                    Some((a, b)) => (parse(a)?, parse(b)?),
                    None => {
                        let n = parse(&body)?;
                        (n, n)
                    }
                };
                if min > max {
                    return Err(bad("repetition minimum exceeds maximum"));
                }
                i += end + 1;
            }
            items.push(Item { choices, min, max });
        }
        let p = Self {
            source: source.to_string(),
            items,
        };
        if p.max_len() == 0 {
            return Err(bad("pattern can only produce the empty string"));
        }
        Ok(p)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn min_len(&self) -> usize {
        self.items.iter().map(|it| it.min).sum()
    }

    pub fn max_len(&self) -> usize {
        self.items.iter().map(|it| it.max).sum()
    }

    /// Every character the pattern can emit.
    pub fn charset(&self) -> BTreeSet<char> {
        self.items.iter().flat_map(|it| it.choices.iter().copied()).collect()
    }

    /// Draws one string; resamples until it is non-empty.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        loop {
            let mut s = String::new();
            for it in &self.items {
                let n = rng.gen_range(it.min..=it.max);
                for _ in 0..n {
                    s.push(*it.choices.choose(rng).expect("non-empty choices"));
                }
            }
            if !s.is_empty() {
                return s;
            }
        }
    }
}

/// Where an entity's text comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Pattern(Pattern),
    Words(Vec<String>),
}

impl Corpus {
    pub fn new(pattern: &str, words: &[String]) -> Result<Self> {
        if words.is_empty() {
            return Ok(Self::Pattern(Pattern::parse(pattern)?));
        }
        if let Some(w) = words.iter().find(|w| w.is_empty()) {
            return Err(Error::Config(format!("word list contains an empty entry {w:?}")));
        }
        Ok(Self::Words(words.to_vec()))
    }

    pub fn max_len(&self) -> usize {
        match self {
            Self::Pattern(p) => p.max_len(),
            Self::Words(w) => w.iter().map(|s| s.chars().count()).max().unwrap_or(0),
        }
    }

    pub fn charset(&self) -> BTreeSet<char> {
        match self {
            Self::Pattern(p) => p.charset(),
            Self::Words(w) => w.iter().flat_map(|s| s.chars()).collect(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self {
            Self::Pattern(p) => p.sample(rng),
            Self::Words(w) => w.choose(rng).expect("non-empty word list").clone(),
        }
    }
}
