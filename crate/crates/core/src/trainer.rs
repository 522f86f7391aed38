//! Pretraining, the three-stage generalized EM pipeline, early stopping and
//! checkpoints.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, EmissionDraw, TrainConfig, WxorScope};
use crate::data::{Dataset, Instance, LabelSet, WeakAnnotationMatrix};
use crate::emission::{wxor_aggregate, EmissionMode, WxorTable};
use crate::error::{Error, Result};
use crate::eval::{entity_prf, majority_vote, reliability_report, ReliabilityReport};
use crate::hmm;
use crate::model::{ModelSpec, SparseChmm};
use crate::nn::{DenseLayer, Gradients, Head, OptimizerState, TensorFile};

/// Name given to the majority-vote pseudo-LF.
pub const MV_LF_NAME: &str = "__majority_vote__";

#[derive(Debug, Clone, PartialEq)]
pub struct InitStats {
    /// `Ψ*`, L×L.
    pub psi_star: Array2<f64>,
    /// `Φ*`, K×L×L.
    pub phi_star: Array3<f64>,
    /// Stage-2 pretraining target, set after stage 1.
    pub phi_prime: Option<Array3<f64>>,
    /// Gold-conditioned statistics, diagnostics only.
    pub phi_true: Option<Array3<f64>>,
}

/// Majority-vote pseudo-labels over the first `vote_lfs` LFs of each instance.
pub fn mv_pseudo_labels<R: Rng + ?Sized>(
    instances: &[Instance],
    vote_lfs: usize,
    num_labels: usize,
    count_o: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    instances
        .iter()
        .map(|inst| {
            let k = vote_lfs.min(inst.weak.num_lfs());
            majority_vote(inst.weak.obs.slice(s![..k, ..]), num_labels, count_o, rng)
        })
        .collect()
}

/// `Ψ*` and `Φ*` from add-one-smoothed counts against MV pseudo-labels.
pub fn compute_init_stats<R: Rng + ?Sized>(
    instances: &[Instance],
    num_labels: usize,
    vote_lfs: usize,
    count_o: bool,
    rng: &mut R,
) -> Result<InitStats> {
    if instances.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let pseudo = mv_pseudo_labels(instances, vote_lfs, num_labels, count_o, rng);
    Ok(stats_from_labels(instances, &pseudo, num_labels))
}

pub fn stats_from_labels(instances: &[Instance], labels: &[Vec<usize>], num_labels: usize) -> InitStats {
    let num_lfs = instances[0].weak.num_lfs();
    let mut psi = Array2::<f64>::ones((num_labels, num_labels));
    let mut phi = Array3::<f64>::ones((num_lfs, num_labels, num_labels));
    for (inst, y) in instances.iter().zip(labels) {
        for w in y.windows(2) {
            psi[[w[0], w[1]]] += 1.0;
        }
        for k in 0..num_lfs {
            for (t, &yt) in y.iter().enumerate() {
                phi[[k, yt, inst.weak.obs[[k, t]]]] += 1.0;
            }
        }
    }
    normalize_rows2(&mut psi);
    normalize_rows3(&mut phi);
    InitStats {
        psi_star: psi,
        phi_star: phi,
        phi_prime: None,
        phi_true: None,
    }
}

fn normalize_rows2(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let s = row.sum();
        row /= s;
    }
}

fn normalize_rows3(m: &mut Array3<f64>) {
    for mut lane in m.lanes_mut(Axis(2)) {
        let s = lane.sum();
        lane /= s;
    }
}

/// `Φ_true[k,i,j] = count(x=j, y=i) / count(y=i)`; empty rows become delta-on-O.
pub fn true_emission_stats(instances: &[Instance], num_labels: usize) -> Result<Array3<f64>> {
    let first = instances.first().ok_or(Error::Empty("split"))?;
    let num_lfs = first.weak.num_lfs();
    let mut counts = Array3::<f64>::zeros((num_lfs, num_labels, num_labels));
    for inst in instances {
        let gold = inst.sentence.gold.as_ref().ok_or_else(|| Error::Schema {
            id: inst.sentence.id.clone(),
            message: "gold labels required".into(),
        })?;
        for k in 0..num_lfs {
            for (t, &y) in gold.iter().enumerate() {
                counts[[k, y, inst.weak.obs[[k, t]]]] += 1.0;
            }
        }
    }
    for mut lane in counts.lanes_mut(Axis(2)) {
        let s = lane.sum();
        if s > 0.0 {
            lane /= s;
        } else {
            lane[LabelSet::O] = 1.0;
        }
    }
    Ok(counts)
}

/// Copies `instances` with a majority-vote pseudo-LF appended as the last row.
pub fn append_mv_lf<R: Rng + ?Sized>(instances: &[Instance], num_labels: usize, count_o: bool, rng: &mut R) -> Vec<Instance> {
    let Some(first) = instances.first() else {
        return Vec::new();
    };
    let mut names: Vec<String> = first.weak.lf_names.to_vec();
    names.push(MV_LF_NAME.to_string());
    let names: Arc<[String]> = names.into();
    instances
        .iter()
        .map(|inst| {
            let k = inst.weak.num_lfs();
            let mv = majority_vote(inst.weak.obs.view(), num_labels, count_o, rng);
            let mut obs = Array2::zeros((k + 1, inst.len()));
            obs.slice_mut(s![..k, ..]).assign(&inst.weak.obs);
            for (t, v) in mv.into_iter().enumerate() {
                obs[[k, t]] = v;
            }
            Instance {
                sentence: inst.sentence.clone(),
                weak: WeakAnnotationMatrix {
                    lf_names: names.clone(),
                    obs,
                },
                embedding: inst.embedding.clone(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Pre1,
    S1,
    Pre2,
    S2,
    S3,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Pre1 => "pre1",
            StageTag::S1 => "s1",
            StageTag::Pre2 => "pre2",
            StageTag::S2 => "s2",
            StageTag::S3 => "s3",
        }
    }

    pub fn em(stage: u8) -> Self {
        match stage {
            1 => StageTag::S1,
            2 => StageTag::S2,
            _ => StageTag::S3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    stage: StageTag,
    spec: ModelSpec,
    use_addon: bool,
    best_valid_f1: f64,
    epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: StageTag,
    pub model: SparseChmm,
    pub optimizer: Option<OptimizerState>,
    pub best_valid_f1: f64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let meta = CheckpointMeta {
            stage: self.stage,
            spec: self.model.spec.clone(),
            use_addon: self.model.use_addon,
            best_valid_f1: self.best_valid_f1,
            epoch: self.epoch,
        };
        let json = serde_json::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut file = self.model.to_tensor_file(json);
        if let Some(opt) = &self.optimizer {
            opt.to_tensors(&mut file);
        }
        Ok(file)
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&file.metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let model = SparseChmm::from_tensor_file(meta.spec, meta.use_addon, file)?;
        let optimizer = match file.get("adam.hyper") {
            Some(_) => Some(OptimizerState::from_tensors(file)?),
            None => None,
        };
        Ok(Self {
            stage: meta.stage,
            model,
            optimizer,
            best_valid_f1: meta.best_valid_f1,
            epoch: meta.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    /// Mean per-sentence `Q`; absent for the entry evaluation (epoch 0).
    pub q_mean: Option<f64>,
    pub valid_p: f64,
    pub valid_r: f64,
    pub valid_f1: f64,
    pub seconds: f64,
}

/// Independent stream for one sentence of one epoch, so results do not depend
/// on worker scheduling.
fn sentence_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index as u64);
    rng
}

fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn sum_gradients(model: &SparseChmm, parts: Vec<Gradients>, factor: f64) -> Gradients {
    let mut total = Gradients::for_registry(&model.params);
    for g in &parts {
        total.add_assign(g);
    }
    total.scale(factor);
    total
}

pub fn predict_all(model: &SparseChmm, instances: &[Instance]) -> Result<Vec<Vec<usize>>> {
    instances.par_iter().map(|inst| model.predict(inst)).collect()
}

/// Entity P/R/F1 of mean-mode Viterbi decoding against gold.
pub fn evaluate_split(model: &SparseChmm, instances: &[Instance], label_set: &LabelSet) -> Result<(f64, f64, f64)> {
    let gold: Vec<&[usize]> = instances
        .iter()
        .map(|i| {
            i.sentence.gold.as_deref().ok_or_else(|| Error::Schema {
                id: i.sentence.id.clone(),
                message: "evaluation split needs gold labels".into(),
            })
        })
        .collect::<Result<_>>()?;
    let pred = predict_all(model, instances)?;
    let r = entity_prf(&gold, &pred, label_set)?;
    Ok((r.precision, r.recall, r.f1))
}

/// Heads updated by each stage.
pub fn stage_heads(stage: u8) -> &'static [Head] {
    match stage {
        1 => &[Head::Transition, Head::Reliability],
        2 => &[Head::Scaling],
        _ => &[Head::Transition],
    }
}

/// MSE pretraining in mean mode. Stage 1 fits `Φ*` and `Ψ*` through the
/// transition and reliability heads; stage 2 fits `phi_target` through the
/// scaling head only. Returns the mean loss of each epoch.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut SparseChmm,
    stage: u8,
    instances: &[Instance],
    phi_target: &Array3<f64>,
    psi_target: Option<&Array2<f64>>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::Empty("pretraining split"));
    }
    let psi_target = if stage == 1 { psi_target } else { None };
    model.params.set_trainable(if stage == 1 {
        &[Head::Transition, Head::Reliability]
    } else {
        &[Head::Scaling]
    });
    let mut opt = OptimizerState::new(cfg.lr_pretrain);
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        let mut total = 0.0;
        for batch in shuffled_batches(instances.len(), cfg.batch_size, rng) {
            let m: &SparseChmm = model;
            let parts: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&i| m.mse_loss_and_grad(&instances[i], phi_target, psi_target, &mut sentence_rng(0, 0, i)))
                .collect::<Result<_>>()?;
            let loss: f64 = parts.iter().map(|p| p.0).sum();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("pretraining loss at stage {stage}")));
            }
            total += loss;
            let grads = sum_gradients(model, parts.into_iter().map(|p| p.1).collect(), 1.0 / batch.len() as f64);
            opt.step(&mut model.params, &grads)?;
        }
        losses.push(total / instances.len() as f64);
    }
    Ok(losses)
}

fn stage_mode(cfg: &TrainConfig, stage: u8) -> EmissionMode {
    match cfg.stage(stage).emission {
        EmissionDraw::Mean => EmissionMode::Mean,
        EmissionDraw::Sample => EmissionMode::Sample(cfg.gradient),
    }
}

/// E-step and one M-step on a batch. Returns the summed `Q`.
pub fn em_step(
    model: &mut SparseChmm,
    opt: &mut OptimizerState,
    instances: &[Instance],
    batch: &[usize],
    mode: EmissionMode,
    seed: u64,
    stream: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let m: &SparseChmm = model;
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|&i| {
            let inst = &instances[i];
            let mut rng = sentence_rng(seed, stream, i);
            let fwd = m.forward(inst, mode, &mut rng)?;
            let stats = hmm::forward_backward(&fwd.transition, &fwd.log_evidence)?;
            let grads = m.q_gradients(inst, &fwd, &stats)?;
            Ok((stats.q, grads))
        })
        .collect::<Result<_>>()?;
    let q: f64 = parts.iter().map(|p| p.0).sum();
    if !q.is_finite() {
        return Err(Error::NonFinite("expected complete-data log likelihood".into()));
    }
    // the optimizer minimizes, so ascend on Q by descending on −Q
    let grads = sum_gradients(model, parts.into_iter().map(|p| p.1).collect(), -1.0 / batch.len() as f64);
    opt.step(&mut model.params, &grads)?;
    Ok(q)
}

/// Runs one EM stage with early stopping on validation F1 and leaves `model`
/// at the best epoch. The incoming model is scored as epoch 0 and competes
/// for selection.
#[allow(clippy::too_many_arguments)]
pub fn em_stage<R: Rng + ?Sized>(
    model: &mut SparseChmm,
    stage: u8,
    train: &[Instance],
    valid: &[Instance],
    label_set: &LabelSet,
    cfg: &TrainConfig,
    seed: u64,
    rng: &mut R,
    log: &mut Vec<EpochMetrics>,
) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let sc = cfg.stage(stage);
    let tag = StageTag::em(stage);
    model.params.set_trainable(stage_heads(stage));
    model.use_addon = stage >= 2;
    model.spec.hyper.g_r = sc.g_r(model.num_labels());
    model.spec.hyper.validate(model.num_labels())?;
    let mode = stage_mode(cfg, stage);
    let mut opt = OptimizerState::new(sc.lr);

    let start = Instant::now();
    let (p, r, f1) = evaluate_split(model, valid, label_set)?;
    log.push(EpochMetrics {
        stage: tag.name().into(),
        epoch: 0,
        q_mean: None,
        valid_p: p,
        valid_r: r,
        valid_f1: f1,
        seconds: start.elapsed().as_secs_f64(),
    });
    let mut best = Checkpoint {
        stage: tag,
        model: model.clone(),
        optimizer: Some(opt.clone()),
        best_valid_f1: f1,
        epoch: 0,
    };
    let mut stale = 0;
    for epoch in 1..=sc.max_epochs {
        let start = Instant::now();
        let stream = (stage as u64) << 32 | epoch as u64;
        let mut q_total = 0.0;
        for batch in shuffled_batches(train.len(), cfg.batch_size, rng) {
            q_total += em_step(model, &mut opt, train, &batch, mode, seed, stream)?;
        }
        let (p, r, f1) = evaluate_split(model, valid, label_set)?;
        log.push(EpochMetrics {
            stage: tag.name().into(),
            epoch,
            q_mean: Some(q_total / train.len() as f64),
            valid_p: p,
            valid_r: r,
            valid_f1: f1,
            seconds: start.elapsed().as_secs_f64(),
        });
        if f1 > best.best_valid_f1 {
            best = Checkpoint {
                stage: tag,
                model: model.clone(),
                optimizer: Some(opt.clone()),
                best_valid_f1: f1,
                epoch,
            };
            stale = 0;
        } else {
            stale += 1;
            if stale >= sc.patience {
                break;
            }
        }
    }
    *model = best.model.clone();
    Ok(best)
}

/// Corpus mean of the mean-mode emission.
pub fn mean_emission(model: &SparseChmm, instances: &[Instance]) -> Result<Array3<f64>> {
    if instances.is_empty() {
        return Err(Error::Empty("split"));
    }
    let parts: Vec<Array3<f64>> = instances
        .par_iter()
        .map(|i| model.mean_emission(i.embedding()?.sentence()))
        .collect::<Result<_>>()?;
    let mut acc = Array3::zeros(parts[0].dim());
    for p in &parts {
        acc += p;
    }
    Ok(acc / instances.len() as f64)
}

/// `W̃` statistics from the current reliability head.
pub fn build_wxor(model: &SparseChmm, instances: &[&Instance]) -> Result<WxorTable> {
    let scaled: Vec<Array2<f64>> = instances
        .par_iter()
        .map(|i| Ok(model.reliability(i.embedding()?.sentence())?.scaled))
        .collect::<Result<_>>()?;
    wxor_aggregate(instances.iter().zip(&scaled).map(|(i, a)| (i.weak.obs.view(), a)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SparseChmm,
    pub label_set: LabelSet,
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<EpochMetrics>,
    pub pretrain_losses: [Vec<f64>; 2],
    pub init: InitStats,
    pub wxor: WxorTable,
    pub report: Option<ReliabilityReport>,
}

impl TrainOutcome {
    pub fn stage_best_f1(&self, tag: StageTag) -> Option<f64> {
        self.checkpoints.iter().find(|c| c.stage == tag).map(|c| c.best_valid_f1)
    }
}

/// The full pipeline: statistics, pretraining, three EM stages with WXOR
/// aggregation and addon pretraining in between.
pub fn train(dataset: &Dataset, cfg: &Config) -> Result<TrainOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    let label_set = dataset.label_set.clone();
    let l = label_set.num_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let raw_train = dataset.split("train")?;
    let raw_valid = dataset.split(&tc.eval_split)?;
    if raw_train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if raw_valid.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let base_lfs = dataset.num_lfs();
    let (train, valid) = if tc.use_mv {
        (
            append_mv_lf(raw_train, l, tc.mv_count_o, &mut rng),
            append_mv_lf(raw_valid, l, tc.mv_count_o, &mut rng),
        )
    } else {
        (raw_train.to_vec(), raw_valid.to_vec())
    };
    let emb_dim = dataset
        .embedding_dim()
        .ok_or_else(|| Error::Embedding("dataset has no embeddings attached".into()))?;

    let mut init = compute_init_stats(&train, l, base_lfs, tc.mv_count_o, &mut rng)?;
    if raw_valid.iter().all(|i| i.sentence.gold.is_some()) {
        init.phi_true = Some(true_emission_stats(raw_valid, l)?);
    }

    let mut lf_names: Vec<String> = dataset.lf_names.to_vec();
    if tc.use_mv {
        lf_names.push(MV_LF_NAME.to_string());
    }
    let k = lf_names.len();
    let spec = ModelSpec {
        entities: label_set.entities().to_vec(),
        lf_names,
        train_only_lfs: usize::from(tc.use_mv),
        emb_dim,
        hyper: cfg.model.hyper(k, tc.stage1.g_r(l)),
        initial: cfg.model.initial,
        evidence_floor: cfg.model.evidence_floor,
    };
    let mut model = SparseChmm::new(spec, &mut rng)?;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();

    let loss1 = pretrain(&mut model, 1, &train, &init.phi_star, Some(&init.psi_star), tc, &mut rng)?;
    let s1 = em_stage(&mut model, 1, &train, &valid, &label_set, tc, cfg.seed, &mut rng, &mut metrics)?;
    checkpoints.push(s1);

    let scope: Vec<&Instance> = match tc.wxor_scope {
        WxorScope::TrainValid => train.iter().chain(valid.iter()).collect(),
        WxorScope::Valid => valid.iter().collect(),
    };
    let wxor = build_wxor(&model, &scope)?;
    model.set_wxor(&wxor.normalized);

    let phi_i = mean_emission(&model, &train)?;
    let phi_prime = &init.phi_star * tc.lambda + &phi_i * (1.0 - tc.lambda);
    model
        .params
        .replace(Head::Scaling, DenseLayer::init(emb_dim, k * l, &mut rng));
    model.use_addon = true;
    model.spec.hyper.g_r = tc.stage2.g_r(l);
    let loss2 = pretrain(&mut model, 2, &train, &phi_prime, None, tc, &mut rng)?;
    init.phi_prime = Some(phi_prime);

    for stage in [2u8, 3] {
        let ck = em_stage(&mut model, stage, &train, &valid, &label_set, tc, cfg.seed, &mut rng, &mut metrics)?;
        checkpoints.push(ck);
    }
    model.params.set_trainable(&[]);

    let report = if raw_valid.iter().all(|i| i.sentence.gold.is_some()) && base_lfs >= 2 {
        let mut r = reliability_report(&model, raw_valid, &label_set)?;
        r.wxor_aggregated = Some(nested(&wxor.aggregated));
        Some(r)
    } else {
        None
    };
    Ok(TrainOutcome {
        model,
        label_set,
        checkpoints,
        metrics,
        pretrain_losses: [loss1, loss2],
        init,
        wxor,
        report,
    })
}

pub fn nested(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter()
        .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

/// Writes checkpoints, the final model, the metrics log, and the reliability
/// report under `out`.
pub fn write_outputs(outcome: &TrainOutcome, out: &Path) -> Result<()> {
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    for ck in &outcome.checkpoints {
        ck.save(&ck_dir.join(format!("{}.scmp", ck.stage.name())))?;
    }
    if let Some(last) = outcome.checkpoints.last() {
        let final_ck = Checkpoint {
            model: outcome.model.clone(),
            ..last.clone()
        };
        final_ck.save(&out.join("model.scmp"))?;
    }
    let mut log = String::new();
    for m in &outcome.metrics {
        log.push_str(&serde_json::to_string(m).expect("serializable"));
        log.push('\n');
    }
    let path = out.join("metrics.jsonl");
    std::fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
    if let Some(report) = &outcome.report {
        report.write(&out.join("reliability_report.json"), Some(&out.join("reliability_report.csv")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn inst(id: &str, obs: Array2<usize>, gold: Option<Vec<usize>>) -> Instance {
        let t = obs.ncols();
        let k = obs.nrows();
        Instance {
            sentence: crate::data::Sentence {
                id: id.into(),
                tokens: (0..t).map(|i| format!("w{i}")).collect(),
                gold,
            },
            weak: WeakAnnotationMatrix {
                lf_names: (0..k).map(|i| format!("lf{i}")).collect::<Vec<_>>().into(),
                obs,
            },
            embedding: None,
        }
    }

    #[test]
    fn all_o_corpus_stats() {
        let data = vec![inst("a", Array2::zeros((2, 30)), None)];
        let st = compute_init_stats(&data, 3, 2, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((st.psi_star[[0, 0]] - 30.0 / 32.0).abs() < 1e-12);
        assert!((st.phi_star[[0, 0, 0]] - 31.0 / 33.0).abs() < 1e-12);
        // never-seen latent rows are uniform, not zero
        assert!(st.phi_star.slice(s![.., 1, ..]).iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
        assert!(st.psi_star.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hand_tally() {
        // L = 3; two LFs, two sentences
        let a = inst("a", array![[1, 2, 0], [1, 0, 0]], None);
        let b = inst("b", array![[0, 1], [0, 1]], None);
        let labels = vec![vec![1, 2, 0], vec![0, 1]];
        let st = stats_from_labels(&[a, b], &labels, 3);
        // bigrams: (1,2), (2,0), (0,1); each row gets +1 smoothing over 3 cells
        let expect_psi = array![[1.0, 2.0, 1.0], [1.0, 1.0, 2.0], [2.0, 1.0, 1.0]] / 4.0;
        assert!((&st.psi_star - &expect_psi).iter().all(|d| d.abs() < 1e-15));
        // LF1 given y=2 observed 0 once: (1,1,2)+ (0→+1) = [2,1,1]/4
        assert!((st.phi_star[[1, 2, 0]] - 0.5).abs() < 1e-15);
        // LF0 given y=1 observed 1 twice: [1,3,1]/5
        assert!((st.phi_star[[0, 1, 1]] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn true_stats_cases() {
        let gold = vec![1, 2, 0, 0];
        let copy = inst("a", array![[1, 2, 0, 0], [0, 0, 0, 0]], Some(gold));
        let phi = true_emission_stats(&[copy], 5).unwrap();
        for i in 0..3 {
            assert_eq!(phi[[0, i, i]], 1.0);
            assert_eq!(phi[[1, i, 0]], 1.0);
        }
        // unseen rows fall back to delta-on-O
        assert_eq!(phi[[0, 3, 0]], 1.0);
        let nogold = inst("b", array![[0]], None);
        assert!(true_emission_stats(&[nogold], 3).is_err());
    }

    #[test]
    fn mv_lf_is_appended() {
        let a = inst("a", array![[1, 0], [1, 0], [3, 0]], None);
        let out = append_mv_lf(&[a], 5, false, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out[0].weak.num_lfs(), 4);
        assert_eq!(out[0].weak.lf_sequence(3), vec![1, 0]);
        assert_eq!(out[0].weak.lf_names[3], MV_LF_NAME);
    }
}
