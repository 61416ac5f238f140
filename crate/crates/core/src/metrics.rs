//! Entity-level exact-match metrics. An empty string is a null entity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::EntitySchema;
use crate::error::{Error, Result};

pub type EntityMap = BTreeMap<String, String>;

/// Exact whole-string matches over the `n_entities` schema entities, divided
/// by `n_entities`. Both maps must cover the same keys.
pub fn mea(preds: &EntityMap, golds: &EntityMap, n_entities: usize) -> Result<f64> {
    if golds.len() != n_entities || preds.len() != n_entities {
        return Err(Error::Schema(format!(
            "expected {n_entities} entities, got {} predictions and {} targets",
            preds.len(),
            golds.len()
        )));
    }
    let mut hits = 0usize;
    for (k, g) in golds {
        let p = preds
            .get(k)
            .ok_or_else(|| Error::Schema(format!("prediction missing entity {k:?}")))?;
        hits += usize::from(p == g);
    }
    Ok(hits as f64 / n_entities as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Entity pairs compared.
    pub total: usize,
    /// Pairs where prediction equals target, nulls included.
    pub exact: usize,
    /// Non-null matches, the numerator of both precision and recall.
    pub matched: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PairCounts {
    fn add_pair(&mut self, pred: &str, gold: &str) {
        self.total += 1;
        self.exact += usize::from(pred == gold);
        self.predicted += usize::from(!pred.is_empty());
        self.gold += usize::from(!gold.is_empty());
        self.matched += usize::from(!gold.is_empty() && pred == gold);
    }

    fn merge(&mut self, o: &PairCounts) {
        self.total += o.total;
        self.exact += o.exact;
        self.matched += o.matched;
        self.predicted += o.predicted;
        self.gold += o.gold;
    }

    fn ratio(n: usize, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            n as f64 / d as f64
        }
    }

    pub fn mea(&self) -> f64 {
        Self::ratio(self.exact, self.total)
    }

    pub fn mep(&self) -> f64 {
        Self::ratio(self.matched, self.predicted)
    }

    pub fn mer(&self) -> f64 {
        Self::ratio(self.matched, self.gold)
    }

    pub fn mef(&self) -> f64 {
        harmonic(self.mep(), self.mer())
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn pair_counts(preds: &EntityMap, golds: &EntityMap) -> PairCounts {
    let keys: BTreeSet<&String> = preds.keys().chain(golds.keys()).collect();
    let mut c = PairCounts::default();
    for k in keys {
        let p = preds.get(k).map_or("", String::as_str);
        let g = golds.get(k).map_or("", String::as_str);
        c.add_pair(p, g);
    }
    c
}

/// `(mEP, mER, mEF)` for one prediction/target pair of maps. Pairs where both
/// sides are null count toward neither numerator nor denominators.
pub fn mep_mer_mef(preds: &EntityMap, golds: &EntityMap) -> (f64, f64, f64) {
    let c = pair_counts(preds, golds);
    (c.mep(), c.mer(), c.mef())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRow {
    pub entity: String,
    pub accuracy: f64,
    pub counts: PairCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Micro-averaged over every (sample, entity) pair.
    pub mea: f64,
    pub mep: f64,
    pub mer: f64,
    pub mef: f64,
    /// Per-sample scores averaged over samples.
    pub macro_mea: f64,
    pub macro_mep: f64,
    pub macro_mer: f64,
    pub macro_mef: f64,
    /// `I`, `I_p`, `I_g` and match counts over the whole set.
    pub counts: PairCounts,
    pub per_entity: Vec<EntityRow>,
}

/// Dataset-level report. Every map must carry exactly the schema's entities.
pub fn evaluate(preds: &[EntityMap], golds: &[EntityMap], schema: &EntitySchema) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(Error::Schema(format!(
            "{} predictions for {} targets",
            preds.len(),
            golds.len()
        )));
    }
    let names: Vec<&str> = schema.entity_names().collect();
    let n = names.len();
    let mut total = PairCounts::default();
    let mut per_entity = vec![PairCounts::default(); n];
    let (mut s_mea, mut s_mep, mut s_mer, mut s_mef) = (0.0, 0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        for map in [p, g] {
            if let Some(k) = map.keys().find(|k| !schema.contains(k)) {
                return Err(Error::Schema(format!("entity {k:?} is not in the schema")));
            }
        }
        let mut sample = PairCounts::default();
        for (i, name) in names.iter().enumerate() {
            let pv = p.get(*name).map_or("", String::as_str);
            let gv = g.get(*name).map_or("", String::as_str);
            sample.add_pair(pv, gv);
            per_entity[i].add_pair(pv, gv);
        }
        s_mea += sample.mea();
        s_mep += sample.mep();
        s_mer += sample.mer();
        s_mef += sample.mef();
        total.merge(&sample);
    }
    let count = preds.len().max(1) as f64;
    Ok(EvalReport {
        samples: preds.len(),
        mea: total.mea(),
        mep: total.mep(),
        mer: total.mer(),
        mef: total.mef(),
        macro_mea: s_mea / count,
        macro_mep: s_mep / count,
        macro_mer: s_mer / count,
        macro_mef: s_mef / count,
        counts: total,
        per_entity: names
            .iter()
            .zip(per_entity)
            .map(|(name, counts)| EntityRow {
                entity: name.to_string(),
                accuracy: counts.mea(),
                counts,
            })
            .collect(),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples {}", self.samples)?;
        writeln!(f, "{:<8} {:>8} {:>8}", "metric", "micro", "macro")?;
        for (name, micro, mac) in [
            ("mEA", self.mea, self.macro_mea),
            ("mEP", self.mep, self.macro_mep),
            ("mER", self.mer, self.macro_mer),
            ("mEF", self.mef, self.macro_mef),
        ] {
            writeln!(f, "{name:<8} {micro:>8.4} {mac:>8.4}")?;
        }
        writeln!(f, "I={} I_p={} I_g={}", self.counts.total, self.counts.predicted, self.counts.gold)?;
        writeln!(f, "{:<12} {:>8} {:>6} {:>6}", "entity", "acc", "pred", "gold")?;
        for row in &self.per_entity {
            writeln!(
                f,
                "{:<12} {:>8.4} {:>6} {:>6}",
                row.entity, row.accuracy, row.counts.predicted, row.counts.gold
            )?;
        }
        Ok(())
    }
}
