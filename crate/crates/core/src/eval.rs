//! Majority voting, entity-level scoring, and correlation.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, LabelSet};
use crate::error::{Error, Result};
use crate::model::SparseChmm;

/// Per-token plurality over LF observations; ties are broken uniformly at
/// random. `O` votes are ignored unless `count_o` is set, and a token nobody
/// labels becomes `O`.
pub fn majority_vote<R: Rng + ?Sized>(obs: ArrayView2<'_, usize>, num_labels: usize, count_o: bool, rng: &mut R) -> Vec<usize> {
    let mut counts = vec![0usize; num_labels];
    let mut tied = Vec::with_capacity(num_labels);
    (0..obs.ncols())
        .map(|t| {
            counts.iter_mut().for_each(|c| *c = 0);
            for &l in obs.column(t) {
                counts[l] += 1;
            }
            if !count_o {
                counts[LabelSet::O] = 0;
            }
            let best = *counts.iter().max().expect("non-empty label set");
            if best == 0 {
                return LabelSet::O;
            }
            tied.clear();
            tied.extend((0..num_labels).filter(|&l| counts[l] == best));
            if tied.len() == 1 {
                tied[0]
            } else {
                *tied.choose(rng).expect("non-empty")
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub entity: usize,
}

/// Maximal chunks under the conll convention: a chunk opens at `B-e`, or at
/// `I-e` whose predecessor is not `B-e`/`I-e` of the same type.
pub fn decode_entities(seq: &[usize]) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (t, &label) in seq.iter().enumerate() {
        let entity = LabelSet::entity_of(label);
        let continues = matches!((open, entity), (Some((_, e)), Some(cur)) if e == cur && LabelSet::is_inside(label));
        if continues {
            continue;
        }
        if let Some((start, e)) = open.take() {
            spans.push(EntitySpan { start, end: t, entity: e });
        }
        if let Some(e) = entity {
            open = Some((t, e));
        }
    }
    if let Some((start, e)) = open {
        spans.push(EntitySpan {
            start,
            end: seq.len(),
            entity: e,
        });
    }
    spans
}

/// Inverse of [`decode_entities`] for non-overlapping spans.
pub fn encode_entities(spans: &[EntitySpan], len: usize) -> Vec<usize> {
    let mut seq = vec![LabelSet::O; len];
    for sp in spans {
        seq[sp.start] = LabelSet::begin(sp.entity);
        for v in &mut seq[sp.start + 1..sp.end] {
            *v = LabelSet::inside(sp.entity);
        }
    }
    seq
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.gold)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
    pub per_entity: BTreeMap<String, EntityScore>,
}

/// Micro-averaged exact-match span P/R/F1 over a corpus.
pub fn entity_prf<G, P>(gold: &[G], pred: &[P], label_set: &LabelSet) -> Result<MetricReport>
where
    G: AsRef<[usize]>,
    P: AsRef<[usize]>,
{
    if gold.len() != pred.len() {
        return Err(Error::Dimension {
            context: "sentence count",
            expected: gold.len(),
            actual: pred.len(),
        });
    }
    let mut total = Counts::default();
    let mut per = vec![Counts::default(); label_set.num_entities()];
    for (g, p) in gold.iter().zip(pred) {
        let (g, p) = (g.as_ref(), p.as_ref());
        if g.len() != p.len() {
            return Err(Error::Dimension {
                context: "sentence length",
                expected: g.len(),
                actual: p.len(),
            });
        }
        let gs = decode_entities(g);
        let ps = decode_entities(p);
        for sp in &gs {
            per[sp.entity].gold += 1;
        }
        for sp in &ps {
            per[sp.entity].predicted += 1;
            if gs.binary_search(sp).is_ok() {
                per[sp.entity].true_positive += 1;
            }
        }
    }
    for c in &per {
        total.true_positive += c.true_positive;
        total.predicted += c.predicted;
        total.gold += c.gold;
    }
    let per_entity = label_set
        .entities()
        .iter()
        .zip(&per)
        .map(|(name, c)| {
            (
                name.clone(),
                EntityScore {
                    precision: c.precision(),
                    recall: c.recall(),
                    f1: c.f1(),
                    counts: *c,
                },
            )
        })
        .collect();
    Ok(MetricReport {
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        true_positive: total.true_positive,
        predicted: total.predicted,
        gold: total.gold,
        per_entity,
    })
}

/// Pearson correlation coefficient.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "pearson inputs",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LfReliability {
    pub name: String,
    /// Corpus-mean `Ã` averaged over entities.
    pub reliability: f64,
    pub reliability_per_entity: BTreeMap<String, f64>,
    /// The LF's own entity F1 against gold.
    pub f1: f64,
    pub f1_per_entity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub lfs: Vec<LfReliability>,
    /// Pearson r between reliability and F1 across LFs; absent when either
    /// vector is constant.
    pub pearson: Option<f64>,
    /// `W̃`, K×L×L.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wxor_normalized: Option<Vec<Vec<Vec<f64>>>>,
    /// `Ŵ`, K×L×L.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wxor_aggregated: Option<Vec<Vec<Vec<f64>>>>,
}

/// Per-LF corpus-mean predicted reliability next to the LF's entity F1 on a
/// gold-labeled split. Only inference LFs are reported.
pub fn reliability_report(model: &SparseChmm, instances: &[Instance], label_set: &LabelSet) -> Result<ReliabilityReport> {
    let k = model.spec.num_infer_lfs();
    if k < 2 {
        return Err(Error::UndefinedCorrelation("reliability report needs at least two LFs"));
    }
    let gold: Vec<&[usize]> = instances
        .iter()
        .map(|i| {
            i.sentence.gold.as_deref().ok_or_else(|| Error::Schema {
                id: i.sentence.id.clone(),
                message: "reliability report needs gold labels".into(),
            })
        })
        .collect::<Result<_>>()?;
    let mean = model.mean_reliability(instances)?;
    let entities = label_set.entities();
    let mut lfs = Vec::with_capacity(k);
    for lf in 0..k {
        let pred: Vec<Vec<usize>> = instances.iter().map(|i| i.weak.lf_sequence(lf)).collect();
        let prf = entity_prf(&gold, &pred, label_set)?;
        let rel: BTreeMap<String, f64> = entities
            .iter()
            .enumerate()
            .map(|(e, name)| {
                let v = 0.5 * (mean[[lf, LabelSet::begin(e)]] + mean[[lf, LabelSet::inside(e)]]);
                (name.clone(), v)
            })
            .collect();
        lfs.push(LfReliability {
            name: model.spec.lf_names[lf].clone(),
            reliability: rel.values().sum::<f64>() / entities.len() as f64,
            reliability_per_entity: rel,
            f1: prf.f1,
            f1_per_entity: prf.per_entity.iter().map(|(n, s)| (n.clone(), s.f1)).collect(),
        });
    }
    let a: Vec<f64> = lfs.iter().map(|l| l.reliability).collect();
    let b: Vec<f64> = lfs.iter().map(|l| l.f1).collect();
    let pearson = match pearson(&a, &b) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let wxor_normalized = model.wxor.as_ref().map(|w| {
        w.outer_iter()
            .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
            .collect()
    });
    Ok(ReliabilityReport {
        lfs,
        pearson,
        wxor_normalized,
        wxor_aggregated: None,
    })
}

impl ReliabilityReport {
    pub fn to_csv(&self) -> String {
        let entities: Vec<&String> = self.lfs.first().map(|l| l.reliability_per_entity.keys().collect()).unwrap_or_default();
        let mut out = String::from("lf,reliability,f1");
        for e in &entities {
            out.push_str(&format!(",reliability_{e},f1_{e}"));
        }
        out.push('\n');
        for lf in &self.lfs {
            out.push_str(&format!("{},{},{}", lf.name, lf.reliability, lf.f1));
            for e in &entities {
                out.push_str(&format!(",{},{}", lf.reliability_per_entity[*e], lf.f1_per_entity.get(*e).copied().unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, json: &std::path::Path, csv: Option<&std::path::Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(json, text).map_err(|e| Error::io(json, e))?;
        if let Some(csv) = csv {
            std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        }
        Ok(())
    }
}
