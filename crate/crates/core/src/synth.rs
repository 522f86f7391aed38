//! Synthetic weak-supervision corpora: a BIO-consistent Markov chain for gold
//! labels, LFs that observe through known emission matrices, and embeddings
//! anchored on the gold labels.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_embeddings, write_jsonl, Dataset, EmbeddingSequence, Instance, LabelSet, Sentence, WeakAnnotationMatrix};
use crate::error::{Error, Result};
use crate::nn::snap;
use crate::trainer::nested;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub lf: usize,
    /// Entity whose labels are confused.
    pub from: usize,
    /// Entity receiving the confused mass (same B/I position).
    pub to: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub entities: Vec<String>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of opening an entity after `O`.
    pub entity_density: f64,
    /// Probability of continuing an entity with `I-`.
    pub continue_prob: f64,
    /// Per-LF probability of reporting the true entity label.
    pub reliabilities: Vec<f64>,
    /// Share of an LF's error mass on entity rows that goes to `O`.
    pub miss_share: f64,
    /// `O`-row false-positive rate as a multiple of `1 − reliability`.
    pub false_positive_scale: f64,
    pub confusions: Vec<Confusion>,
    pub emb_dim: usize,
    pub noise: f64,
    /// Explicit L×L chain; overrides the density parameters.
    pub transition: Option<Vec<Vec<f64>>>,
    /// Explicit K×L×L emission matrices; override the reliabilities.
    pub phi_gen: Option<Vec<Vec<Vec<f64>>>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            entities: vec!["PER".into(), "LOC".into()],
            train_size: 2000,
            valid_size: 300,
            test_size: 300,
            min_len: 8,
            max_len: 16,
            entity_density: 0.15,
            continue_prob: 0.45,
            reliabilities: vec![0.9, 0.8, 0.65, 0.5, 0.35, 0.2],
            miss_share: 0.7,
            false_positive_scale: 0.15,
            confusions: vec![Confusion {
                lf: 3,
                from: 0,
                to: 1,
                mass: 0.25,
            }],
            emb_dim: 32,
            noise: 0.5,
            transition: None,
            phi_gen: None,
        }
    }
}

const TOL: f64 = 1e-9;

impl SynthConfig {
    pub fn num_labels(&self) -> usize {
        2 * self.entities.len() + 1
    }

    pub fn lf_names(&self) -> Vec<String> {
        (0..self.num_lfs()).map(|k| format!("lf{k:02}")).collect()
    }

    pub fn num_lfs(&self) -> usize {
        self.phi_gen.as_ref().map_or(self.reliabilities.len(), Vec::len)
    }

    /// Ground-truth chain; row `O` also serves as the start distribution.
    pub fn transition_matrix(&self) -> Result<Array2<f64>> {
        let l = self.num_labels();
        if let Some(rows) = &self.transition {
            return to_array2(rows, l);
        }
        let e = self.entities.len();
        let (rho, c) = (self.entity_density, self.continue_prob);
        if !(0.0..=1.0).contains(&rho) || !(0.0..1.0).contains(&c) {
            return Err(Error::Config("entity_density and continue_prob must be probabilities".into()));
        }
        let mut m = Array2::zeros((l, l));
        m[[LabelSet::O, LabelSet::O]] = 1.0 - rho;
        for ent in 0..e {
            m[[LabelSet::O, LabelSet::begin(ent)]] = rho / e as f64;
        }
        for ent in 0..e {
            for row in [LabelSet::begin(ent), LabelSet::inside(ent)] {
                m[[row, LabelSet::inside(ent)]] = c;
                m[[row, LabelSet::O]] = (1.0 - c) * (1.0 - rho);
                for other in 0..e {
                    m[[row, LabelSet::begin(other)]] = (1.0 - c) * rho / e as f64;
                }
            }
        }
        Ok(m)
    }

    /// K×L×L generator emissions.
    pub fn emission_matrices(&self) -> Result<Array3<f64>> {
        let l = self.num_labels();
        if let Some(phi) = &self.phi_gen {
            let k = phi.len();
            let mut out = Array3::zeros((k, l, l));
            for (i, m) in phi.iter().enumerate() {
                out.slice_mut(ndarray::s![i, .., ..]).assign(&to_array2(m, l)?);
            }
            return Ok(out);
        }
        let k = self.reliabilities.len();
        let mut out = Array3::zeros((k, l, l));
        for (lf, &d) in self.reliabilities.iter().enumerate() {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("reliability {d} of LF {lf} is not a probability")));
            }
            let err = 1.0 - d;
            let fp = (err * self.false_positive_scale).min(1.0);
            out[[lf, LabelSet::O, LabelSet::O]] = 1.0 - fp;
            for j in 1..l {
                out[[lf, LabelSet::O, j]] = fp / (l - 1) as f64;
            }
            for i in 1..l {
                let mut rest = err;
                for cf in self.confusions.iter().filter(|cf| cf.lf == lf) {
                    if LabelSet::entity_of(i) == Some(cf.from) {
                        let target = if LabelSet::is_begin(i) {
                            LabelSet::begin(cf.to)
                        } else {
                            LabelSet::inside(cf.to)
                        };
                        out[[lf, i, target]] += cf.mass;
                        rest -= cf.mass;
                    }
                }
                if rest < -TOL {
                    return Err(Error::Config(format!("confusion mass exceeds error budget of LF {lf}")));
                }
                let rest = rest.max(0.0);
                out[[lf, i, i]] += d;
                out[[lf, i, LabelSet::O]] += rest * self.miss_share;
                let others: Vec<usize> = (1..l).filter(|&j| j != i).collect();
                for &j in &others {
                    out[[lf, i, j]] += rest * (1.0 - self.miss_share) / others.len() as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(Array2<f64>, Array3<f64>)> {
        if self.entities.is_empty() {
            return Err(Error::Config("synth needs at least one entity".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("sentence lengths need 1 <= min_len <= max_len".into()));
        }
        if self.emb_dim == 0 || !(self.noise >= 0.0) {
            return Err(Error::Config("emb_dim must be positive and noise nonnegative".into()));
        }
        let psi = self.transition_matrix()?;
        check_stochastic(psi.rows().into_iter().map(|r| r.to_vec()), "transition")?;
        for i in 0..psi.nrows() {
            for j in 0..psi.ncols() {
                if LabelSet::is_inside(j) && psi[[i, j]] > 0.0 {
                    let e = LabelSet::entity_of(j);
                    if i == LabelSet::O || LabelSet::entity_of(i) != e {
                        return Err(Error::Config(format!("transition {i}->{j} enters I- from outside its entity")));
                    }
                }
            }
        }
        let phi = self.emission_matrices()?;
        if phi.dim().0 == 0 {
            return Err(Error::Config("synth needs at least one LF".into()));
        }
        for k in 0..phi.dim().0 {
            check_stochastic(
                phi.outer_iter().nth(k).expect("k").rows().into_iter().map(|r| r.to_vec()),
                "emission",
            )?;
        }
        Ok((psi, phi))
    }
}

fn to_array2(rows: &[Vec<f64>], l: usize) -> Result<Array2<f64>> {
    if rows.len() != l || rows.iter().any(|r| r.len() != l) {
        return Err(Error::Config(format!("matrix must be {l}x{l}")));
    }
    Ok(Array2::from_shape_fn((l, l), |(i, j)| rows[i][j]))
}

fn check_stochastic(rows: impl Iterator<Item = Vec<f64>>, what: &str) -> Result<()> {
    for (i, r) in rows.enumerate() {
        let s: f64 = r.iter().sum();
        if r.iter().any(|&v| !(v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("{what} row {i} is not stochastic (sum {s})")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    pub transition: Array2<f64>,
    pub phi_gen: Array3<f64>,
}

fn sample_row<R: Rng + ?Sized>(row: ndarray::ArrayView1<'_, f64>, rng: &mut R) -> usize {
    WeightedIndex::new(row.iter().copied())
        .expect("validated stochastic row")
        .sample(rng)
}

/// Generates train/valid/test splits with gold labels and embeddings.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let (psi, phi) = cfg.validate()?;
    let label_set = LabelSet::new(&cfg.entities)?;
    let l = label_set.num_labels();
    let k = phi.dim().0;
    let d = cfg.emb_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // one anchor per (label, position parity)
    let anchors = Array3::from_shape_fn((l, 2, d), |_| rng.sample::<f64, _>(StandardNormal));
    let names = cfg.lf_names();
    let mut dataset = Dataset::new(label_set, names.clone());
    let lf_names = dataset.lf_names.clone();
    for (split, size) in [("train", cfg.train_size), ("valid", cfg.valid_size), ("test", cfg.test_size)] {
        let mut instances = Vec::with_capacity(size);
        for m in 0..size {
            let t_len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut gold = Vec::with_capacity(t_len);
            let mut prev = LabelSet::O;
            for _ in 0..t_len {
                prev = sample_row(psi.row(prev), &mut rng);
                gold.push(prev);
            }
            let mut obs = Array2::zeros((k, t_len));
            for (t, &y) in gold.iter().enumerate() {
                for lf in 0..k {
                    obs[[lf, t]] = sample_row(phi.slice(ndarray::s![lf, y, ..]), &mut rng);
                }
            }
            let mut vectors = Array2::zeros((t_len + 1, d));
            for (t, &y) in gold.iter().enumerate() {
                for j in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    vectors[[t + 1, j]] = snap(anchors[[y, t % 2, j]] + cfg.noise * noise);
                }
            }
            for j in 0..d {
                let mean = (1..=t_len).map(|t| vectors[[t, j]]).sum::<f64>() / t_len as f64;
                vectors[[0, j]] = snap(mean);
            }
            let tokens = gold
                .iter()
                .map(|&y| format!("tok{}_{}", y, rng.random_range(0..1000u32)))
                .collect();
            instances.push(Instance {
                sentence: Sentence {
                    id: format!("{split}-{m:05}"),
                    tokens,
                    gold: Some(gold),
                },
                weak: WeakAnnotationMatrix {
                    lf_names: lf_names.clone(),
                    obs,
                },
                embedding: Some(EmbeddingSequence::new(vectors)?),
            });
        }
        dataset.splits.insert(split.to_string(), instances);
    }
    Ok(SynthCorpus {
        dataset,
        transition: psi,
        phi_gen: phi,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GeneratorTruth {
    pub labels: Vec<String>,
    pub lf_names: Vec<String>,
    pub transition: Vec<Vec<f64>>,
    pub phi_gen: Vec<Vec<Vec<f64>>>,
}

/// Writes `<split>.jsonl`, `<split>.emb` and `phi_gen.json` under `out`.
pub fn write_corpus(corpus: &SynthCorpus, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ds = &corpus.dataset;
    for (name, instances) in &ds.splits {
        write_jsonl(&out.join(format!("{name}.jsonl")), instances, &ds.label_set)?;
        let blocks: Vec<&Array2<f64>> = instances
            .iter()
            .map(|i| i.embedding().map(|e| &e.vectors))
            .collect::<Result<_>>()?;
        write_embeddings(&out.join(format!("{name}.emb")), blocks)?;
    }
    let truth = GeneratorTruth {
        labels: ds.label_set.labels().to_vec(),
        lf_names: ds.lf_names.to_vec(),
        transition: corpus.transition.rows().into_iter().map(|r| r.to_vec()).collect(),
        phi_gen: nested(&corpus.phi_gen),
    };
    let path = out.join("phi_gen.json");
    std::fs::write(&path, serde_json::to_string_pretty(&truth).expect("serializable")).map_err(|e| Error::io(&path, e))
}
