//! Vocabulary, entity schema and sample types shared across the pipeline.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character ↔ index map. Printable characters occupy `0..chars.len()`; the
/// two reserved tokens follow them and have no character form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn new(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Vocabulary("alphabet is empty".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c.is_control() {
                return Err(Error::Vocabulary(format!("control character {c:?} in alphabet")));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate character {c:?} in alphabet")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn alphabet(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn eos_id(&self) -> usize {
        self.chars.len()
    }

    pub fn warmup_id(&self) -> usize {
        self.chars.len() + 1
    }

    /// Number of output classes, reserved tokens included.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id == self.eos_id() || id == self.warmup_id()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Vocabulary(format!("character {c:?} is not in the alphabet")))
            })
            .collect()
    }

    /// Decodes printable ids; reserved or out-of-range ids are an error.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&i| {
                self.char_of(i)
                    .ok_or_else(|| Error::Vocabulary(format!("id {i} has no character form")))
            })
            .collect()
    }

    pub fn token_name(&self, id: usize) -> String {
        match self.char_of(id) {
            Some(c) => c.to_string(),
            None if id == self.eos_id() => "<EOS>".into(),
            None if id == self.warmup_id() => "<WARMUP>".into(),
            None => format!("<{id}?>"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub entities: Vec<String>,
    pub max_steps: usize,
}

/// Assignment of entities to decoders and their decoding budgets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DecoderSpec>", into = "Vec<DecoderSpec>")]
pub struct EntitySchema {
    decoders: Vec<DecoderSpec>,
}

impl TryFrom<Vec<DecoderSpec>> for EntitySchema {
    type Error = Error;

    fn try_from(decoders: Vec<DecoderSpec>) -> Result<Self> {
        Self::new(decoders)
    }
}

impl From<EntitySchema> for Vec<DecoderSpec> {
    fn from(s: EntitySchema) -> Self {
        s.decoders
    }
}

impl EntitySchema {
    pub fn new(decoders: Vec<DecoderSpec>) -> Result<Self> {
        if decoders.is_empty() {
            return Err(Error::Schema("schema needs at least one decoder".into()));
        }
        let mut seen = HashSet::new();
        for (m, d) in decoders.iter().enumerate() {
            if d.entities.is_empty() {
                return Err(Error::Schema(format!("decoder {m} owns no entities")));
            }
            if d.max_steps == 0 {
                return Err(Error::Schema(format!("decoder {m} has max_steps = 0")));
            }
            for e in &d.entities {
                if e.is_empty() {
                    return Err(Error::Schema(format!("decoder {m} has an empty entity name")));
                }
                if !seen.insert(e.clone()) {
                    return Err(Error::Schema(format!("entity {e:?} appears more than once")));
                }
            }
        }
        Ok(Self { decoders })
    }

    pub fn decoders(&self) -> &[DecoderSpec] {
        &self.decoders
    }

    /// M, the number of decoders.
    pub fn num_decoders(&self) -> usize {
        self.decoders.len()
    }

    /// I, the total number of entities.
    pub fn num_entities(&self) -> usize {
        self.decoders.iter().map(|d| d.entities.len()).sum()
    }

    pub fn entity_names(&self) -> impl Iterator<Item = &str> {
        self.decoders
            .iter()
            .flat_map(|d| d.entities.iter().map(String::as_str))
    }

    pub fn contains(&self, entity: &str) -> bool {
        self.entity_names().any(|e| e == entity)
    }

    pub fn max_steps(&self) -> Vec<usize> {
        self.decoders.iter().map(|d| d.max_steps).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.decoders.iter().map(|d| d.max_steps).sum()
    }

    /// The desk-scale train-ticket grouping: TCN, (SS, TAN, DS), DT, (TR, SC), NM.
    pub fn train_ticket(max_steps: [usize; 5]) -> Self {
        let groups: [&[&str]; 5] = [&["TCN"], &["SS", "TAN", "DS"], &["DT"], &["TR", "SC"], &["NM"]];
        let decoders = groups
            .iter()
            .zip(max_steps)
            .map(|(g, t)| DecoderSpec {
                entities: g.iter().map(|s| s.to_string()).collect(),
                max_steps: t,
            })
            .collect();
        Self::new(decoders).expect("static schema is valid")
    }
}

/// Grayscale raster with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Parameters actually applied by the transform and noise stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation_deg: f64,
    pub scale: f64,
    pub elastic: bool,
    pub gaussian_sigma: Option<f64>,
    pub blur: Option<String>,
    pub sharpen: Option<f64>,
    pub brightness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub background: String,
    pub transform: TransformRecord,
}

/// One document image and its per-entity ground truth. An empty string marks
/// an absent entity.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub targets: BTreeMap<String, String>,
    pub meta: SampleMeta,
}

/// LSTM `(carry, hidden)` pair; the unit handed from one decoder to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub carry: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl DecoderState {
    pub fn zeros(n_h: usize) -> Self {
        Self {
            carry: vec![0.0; n_h],
            hidden: vec![0.0; n_h],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.carry.iter().chain(&self.hidden).all(|v| v.is_finite())
    }
}

/// Builds each decoder's target: its entities joined by EOS, each terminated
/// by EOS, then EOS-padded to exactly `max_steps`.
pub fn encode_targets(
    targets: &BTreeMap<String, String>,
    schema: &EntitySchema,
    vocab: &CharVocab,
) -> Result<Vec<Vec<usize>>> {
    if let Some(unknown) = targets.keys().find(|k| !schema.contains(k)) {
        return Err(Error::Schema(format!("target entity {unknown:?} is not in the schema")));
    }
    let eos = vocab.eos_id();
    schema
        .decoders()
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let mut seq = Vec::with_capacity(d.max_steps);
            for name in &d.entities {
                let text = targets.get(name).map(String::as_str).unwrap_or("");
                seq.extend(vocab.encode(text)?);
                seq.push(eos);
            }
            if seq.len() > d.max_steps {
                return Err(Error::Capacity {
                    decoder: m,
                    needed: seq.len(),
                    max_steps: d.max_steps,
                });
            }
            seq.resize(d.max_steps, eos);
            Ok(seq)
        })
        .collect()
}

/// Splits a decoded index sequence into `n_entities` strings at EOS tokens.
/// Missing segments are empty; anything after the last wanted EOS is ignored,
/// as are WARMUP tokens.
pub fn split_on_eos(indices: &[usize], n_entities: usize, vocab: &CharVocab) -> Vec<String> {
    let mut out = Vec::with_capacity(n_entities);
    let mut current = String::new();
    for &i in indices {
        if out.len() == n_entities {
            break;
        }
        if i == vocab.eos_id() {
            out.push(std::mem::take(&mut current));
        } else if let Some(c) = vocab.char_of(i) {
            current.push(c);
        }
    }
    if out.len() < n_entities && !current.is_empty() {
        out.push(current);
    }
    out.resize(n_entities, String::new());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> CharVocab {
        CharVocab::new("ABCXhix0123").unwrap()
    }

    fn schema(groups: &[(&[&str], usize)]) -> EntitySchema {
        EntitySchema::new(
            groups
                .iter()
                .map(|(e, t)| DecoderSpec {
                    entities: e.iter().map(|s| s.to_string()).collect(),
                    max_steps: *t,
                })
                .collect(),
        )
        .unwrap()
    }

    fn targets(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(CharVocab::new("abca").is_err());
        assert!(CharVocab::new("").is_err());
        let v = vocab();
        assert_ne!(v.eos_id(), v.warmup_id());
        assert!(v.char_of(v.eos_id()).is_none());
        assert!(v.char_of(v.warmup_id()).is_none());
    }

    #[test]
    fn single_entity_padding() {
        let v = vocab();
        let s = schema(&[(&["A"], 4)]);
        let enc = encode_targets(&targets(&[("A", "hi")]), &s, &v).unwrap();
        let (h, i, e) = (v.id('h').unwrap(), v.id('i').unwrap(), v.eos_id());
        assert_eq!(enc, vec![vec![h, i, e, e]]);
    }

    #[test]
    fn empty_entity_contributes_only_eos() {
        let v = vocab();
        let s = schema(&[(&["A", "B"], 5)]);
        let enc = encode_targets(&targets(&[("A", "x"), ("B", "")]), &s, &v).unwrap();
        let (x, e) = (v.id('x').unwrap(), v.eos_id());
        assert_eq!(enc, vec![vec![x, e, e, e, e]]);
    }

    #[test]
    fn capacity_overflow_names_decoder() {
        let v = vocab();
        let s = schema(&[(&["A"], 3), (&["B"], 2)]);
        let err = encode_targets(&targets(&[("A", "hi"), ("B", "xx")]), &s, &v).unwrap_err();
        match err {
            Error::Capacity {
                decoder,
                needed,
                max_steps,
            } => assert_eq!((decoder, needed, max_steps), (1, 3, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_target_key_is_schema_error() {
        let s = schema(&[(&["A"], 3)]);
        let res = encode_targets(&targets(&[("Z", "1")]), &s, &vocab());
        assert!(matches!(res, Err(Error::Schema(_))));
    }

    #[test]
    fn ticket_schema_shape() {
        let s = EntitySchema::train_ticket([14, 20, 14, 12, 6]);
        assert_eq!(s.num_decoders(), 5);
        assert_eq!(s.num_entities(), 8);
        assert_eq!(s.max_steps(), vec![14, 20, 14, 12, 6]);
        let names: Vec<_> = s.entity_names().collect();
        assert_eq!(names, ["TCN", "SS", "TAN", "DS", "DT", "TR", "SC", "NM"]);
    }

    #[test]
    fn schema_validation() {
        assert!(EntitySchema::new(vec![]).is_err());
        let dup = vec![
            DecoderSpec { entities: vec!["A".into()], max_steps: 2 },
            DecoderSpec { entities: vec!["A".into()], max_steps: 2 },
        ];
        assert!(EntitySchema::new(dup).is_err());
        let empty = vec![DecoderSpec { entities: vec![], max_steps: 2 }];
        assert!(EntitySchema::new(empty).is_err());
    }

    #[test]
    fn split_examples() {
        let v = vocab();
        let (a, b, c, e) = (
            v.id('A').unwrap(),
            v.id('B').unwrap(),
            v.id('C').unwrap(),
            v.eos_id(),
        );
        assert_eq!(split_on_eos(&[a, b, e, c, e], 2, &v), ["AB", "C"]);
        assert_eq!(split_on_eos(&[e, e, e], 2, &v), ["", ""]);
        assert_eq!(split_on_eos(&[a, e], 3, &v), ["A", "", ""]);
        // warm-up tokens never surface in decoded text
        assert_eq!(split_on_eos(&[v.warmup_id(), a, e], 1, &v), ["A"]);
    }

    proptest! {
        #[test]
        fn vocab_round_trip(s in "[ABCXhix0123]{0,12}") {
            let v = vocab();
            prop_assert_eq!(v.decode(&v.encode(&s).unwrap()).unwrap(), s);
        }

        #[test]
        fn encode_split_round_trip(
            a in "[ABC0123]{0,4}",
            b in "[hix]{0,3}",
            c in "[0-3]{0,5}",
            slack in 0usize..4,
        ) {
            let v = vocab();
            let t0 = a.len() + b.len() + 2 + slack;
            let t1 = c.len() + 1 + slack;
            let s = schema(&[(&["A", "B"], t0), (&["C"], t1)]);
            let tg = targets(&[("A", &a), ("B", &b), ("C", &c)]);
            let enc = encode_targets(&tg, &s, &v).unwrap();
            prop_assert_eq!(enc[0].len(), t0);
            prop_assert_eq!(split_on_eos(&enc[0], 2, &v), vec![a.clone(), b.clone()]);
            prop_assert_eq!(split_on_eos(&enc[1], 1, &v), vec![c.clone()]);
        }
    }
}
