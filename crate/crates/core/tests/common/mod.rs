//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code under test to compute an expected
//! value; it only calls it to obtain the value being checked.

#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scmm_core::data::{EmbeddingSequence, Instance, LabelSet, Sentence, WeakAnnotationMatrix};
use scmm_core::emission::{
    addon_from_scale, build_concentration, expand_base_prior, expand_g, g_split_bound, normalize_wxor, sample_emission,
    scale_h, wxor_aggregate, wxor_token, EmissionHyper, EmissionMode, GradientPath, ReliabilityLevel,
};
use scmm_core::hmm;
use scmm_core::model::{ModelSpec, SparseChmm};
use scmm_core::nn::Head;
use scmm_core::synth::SynthConfig;
use scmm_core::transition::{InitialState, TransitionTensor};

pub type Check = std::result::Result<(), String>;

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// Random HMM instances
// ---------------------------------------------------------------------------

fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub struct HmmCase {
    pub psi: TransitionTensor,
    pub log_evidence: Array2<f64>,
}

/// Random Ψ, random K LFs with random emission matrices and random
/// observations, turned into log evidence by the engine's evidence function.
pub fn random_hmm_case<R: Rng>(l: usize, t: usize, k: usize, uniform_start: bool, rng: &mut R) -> HmmCase {
    let mut matrices = Array3::zeros((t, l, l));
    for step in 0..t {
        for i in 0..l {
            for (j, v) in random_simplex(l, rng).into_iter().enumerate() {
                matrices[[step, i, j]] = v;
            }
        }
    }
    let initial = if uniform_start {
        Array1::from(random_simplex(l, rng))
    } else {
        let mut p = Array1::zeros(l);
        p[0] = 1.0;
        p
    };
    let mut phi = Array3::zeros((k, l, l));
    for lf in 0..k {
        for i in 0..l {
            for (j, v) in random_simplex(l, rng).into_iter().enumerate() {
                phi[[lf, i, j]] = v;
            }
        }
    }
    let obs = Array2::from_shape_fn((k, t), |_| rng.random_range(0..l));
    let log_evidence = hmm::emission_evidence(&phi, obs.view(), 1e-30).expect("shapes agree");
    HmmCase {
        psi: TransitionTensor { matrices, initial },
        log_evidence,
    }
}

pub struct BruteForce {
    pub log_z: f64,
    /// (T+1)×L, row 0 = z0.
    pub gamma: Array2<f64>,
    pub xi: Array3<f64>,
    pub best_score: f64,
    pub best_path: Vec<usize>,
}

/// Enumerates every (z0, z1..zT) assignment.
pub fn brute_force(case: &HmmCase) -> BruteForce {
    let psi = &case.psi;
    let (t, l, _) = psi.matrices.dim();
    let total = l.pow(t as u32 + 1);
    let mut path = vec![0usize; t + 1];
    let mut weights = Vec::with_capacity(total);
    let mut paths = Vec::with_capacity(total);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_path = Vec::new();
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut().rev() {
            *slot = c % l;
            c /= l;
        }
        let mut score = psi.initial[path[0]].ln();
        for step in 1..=t {
            score += psi.matrices[[step - 1, path[step - 1], path[step]]].ln();
            score += case.log_evidence[[step - 1, path[step]]];
        }
        if score > best_score {
            best_score = score;
            best_path = path[1..].to_vec();
        }
        weights.push(score);
        paths.push(path.clone());
    }
    let m = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = weights.iter().map(|w| (w - m).exp()).sum();
    let log_z = m + z.ln();
    let mut gamma = Array2::zeros((t + 1, l));
    let mut xi = Array3::zeros((t, l, l));
    for (w, p) in weights.iter().zip(&paths) {
        let prob = (w - log_z).exp();
        for step in 0..=t {
            gamma[[step, p[step]]] += prob;
        }
        for step in 1..=t {
            xi[[step - 1, p[step - 1], p[step]]] += prob;
        }
    }
    BruteForce {
        log_z,
        gamma,
        xi,
        best_score,
        best_path,
    }
}

fn path_score(case: &HmmCase, path: &[usize]) -> f64 {
    let mut best_start = f64::NEG_INFINITY;
    for z0 in 0..case.psi.num_labels() {
        let mut score = case.psi.initial[z0].ln();
        let mut prev = z0;
        for (step, &z) in path.iter().enumerate() {
            score += case.psi.matrices[[step, prev, z]].ln() + case.log_evidence[[step, z]];
            prev = z;
        }
        best_start = best_start.max(score);
    }
    best_start
}

/// Forward-backward, logZ and Viterbi against enumeration on one case.
pub fn check_inference(case: &HmmCase, tol: f64) -> Check {
    let bf = brute_force(case);
    let stats = hmm::forward_backward(&case.psi, &case.log_evidence).map_err(|e| e.to_string())?;
    if !close(stats.log_z, bf.log_z, tol) {
        return Err(format!("logZ {} vs enumerated {}", stats.log_z, bf.log_z));
    }
    let ll = hmm::log_likelihood(&case.psi, &case.log_evidence).map_err(|e| e.to_string())?;
    if !close(ll, bf.log_z, tol) {
        return Err(format!("forward-only logZ {ll} vs enumerated {}", bf.log_z));
    }
    for (a, b) in stats.gamma.iter().zip(bf.gamma.iter()) {
        if !close(*a, *b, tol) {
            return Err(format!("gamma {a} vs enumerated {b}"));
        }
    }
    for (a, b) in stats.xi.iter().zip(bf.xi.iter()) {
        if !close(*a, *b, tol) {
            return Err(format!("xi {a} vs enumerated {b}"));
        }
    }
    let (path, score) = hmm::viterbi(&case.psi, &case.log_evidence).map_err(|e| e.to_string())?;
    if !close(score, bf.best_score, tol) {
        return Err(format!("viterbi score {score} vs enumerated max {}", bf.best_score));
    }
    let own = path_score(case, &path);
    if !close(own, bf.best_score, tol) {
        return Err(format!("viterbi path {path:?} scores {own}, max is {} at {:?}", bf.best_score, bf.best_path));
    }
    Ok(())
}

/// The inference suite: L ∈ {3,4}, T ≤ 6, K ≤ 3, both start distributions.
pub fn inference_suite(cases: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in 0..cases {
        let l = 3 + n % 2;
        let t = 1 + n % 6;
        let k = 1 + (n / 2) % 3;
        let case = random_hmm_case(l, t, k, n % 3 == 0, &mut rng);
        check_inference(&case, 1e-8).map_err(|e| format!("case {n} (L={l}, T={t}, K={k}): {e}"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Passes when the absolute error is negligible or the relative error is
/// within `rel`.
pub fn grad_agrees(analytic: f64, numeric: f64, rel: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs <= 1e-8 || abs / analytic.abs().max(numeric.abs()) <= rel
}

pub fn random_instance<R: Rng>(t: usize, k: usize, l: usize, d: usize, rng: &mut R) -> Instance {
    let names: Arc<[String]> = (0..k).map(|i| format!("lf{i}")).collect::<Vec<_>>().into();
    let vectors = Array2::from_shape_fn((t + 1, d), |_| rng.random_range(-1.0..1.0));
    Instance {
        sentence: Sentence {
            id: "fd".into(),
            tokens: (0..t).map(|i| format!("w{i}")).collect(),
            gold: None,
        },
        weak: WeakAnnotationMatrix {
            lf_names: names,
            obs: Array2::from_shape_fn((k, t), |_| rng.random_range(0..l)),
        },
        embedding: Some(EmbeddingSequence::new(vectors).expect("finite")),
    }
}

fn small_spec(entities: usize, k: usize, d: usize, level: ReliabilityLevel) -> ModelSpec {
    let names: Vec<String> = (0..entities).map(|e| format!("E{e}")).collect();
    let l = 2 * entities + 1;
    let mut hyper = EmissionHyper::conll(k, l);
    hyper.level = level;
    // small concentrations keep the Dirichlet mean sensitive to the prior
    hyper.nu_base = 0.5;
    hyper.nu_expan = 3.0;
    ModelSpec {
        entities: names,
        lf_names: (0..k).map(|i| format!("lf{i}")).collect(),
        train_only_lfs: 0,
        emb_dim: d,
        hyper,
        initial: InitialState::O,
        evidence_floor: 1e-30,
    }
}

/// A model with random weights (and biases) on all heads, and a random `W̃`.
pub fn fd_model<R: Rng>(entities: usize, k: usize, d: usize, level: ReliabilityLevel, rng: &mut R) -> SparseChmm {
    let spec = small_spec(entities, k, d, level);
    let l = spec.num_labels();
    let mut model = SparseChmm::new(spec, rng).expect("valid spec");
    for head in [Head::Transition, Head::Reliability, Head::Scaling] {
        let layer = model.params.layer_mut(head);
        layer.weights.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        layer.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    let raw = Array3::from_shape_fn((k, l, l), |_| rng.random_range(-1.0..1.0));
    model.set_wxor(&normalize_wxor(&raw));
    model
}

fn param(model: &SparseChmm, head: Head, bias: bool, i: usize, j: usize) -> f64 {
    let layer = model.params.layer(head);
    if bias {
        layer.bias[j]
    } else {
        layer.weights[[i, j]]
    }
}

fn param_mut(model: &mut SparseChmm, head: Head, bias: bool, i: usize, j: usize) -> &mut f64 {
    let layer = model.params.layer_mut(head);
    if bias {
        &mut layer.bias[j]
    } else {
        &mut layer.weights[[i, j]]
    }
}

/// Central differences of `f` over every parameter of `head`, compared to
/// `analytic`. Returns the largest relative error over entries whose
/// gradient exceeds 1e-6.
fn fd_head<F>(model: &mut SparseChmm, head: Head, analytic: &scmm_core::nn::LayerGrad, step: f64, f: F) -> std::result::Result<f64, String>
where
    F: Fn(&SparseChmm) -> f64,
{
    let (rows, cols) = model.params.layer(head).weights.dim();
    let mut worst: f64 = 0.0;
    let mut largest: f64 = 0.0;
    let mut probe = |model: &mut SparseChmm, bias: bool, i: usize, j: usize, a: f64| -> Check {
        let orig = param(model, head, bias, i, j);
        *param_mut(model, head, bias, i, j) = orig + step;
        let up = f(model);
        *param_mut(model, head, bias, i, j) = orig - step;
        let down = f(model);
        *param_mut(model, head, bias, i, j) = orig;
        let numeric = (up - down) / (2.0 * step);
        if !grad_agrees(a, numeric, 1e-4) {
            return Err(format!(
                "{} {}[{i},{j}]: analytic {a:e} vs numeric {numeric:e}",
                head.name(),
                if bias { "bias" } else { "weight" }
            ));
        }
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-6 {
            worst = worst.max((a - numeric).abs() / scale);
        }
        largest = largest.max(a.abs());
        Ok(())
    };
    for i in 0..rows {
        for j in 0..cols {
            probe(model, false, i, j, analytic.weights[[i, j]])?;
        }
    }
    for j in 0..cols {
        probe(model, true, 0, j, analytic.bias[j])?;
    }
    if largest < 1e-4 {
        return Err(format!("{} gradient is negligible (max {largest:e})", head.name()));
    }
    Ok(worst)
}

/// `Q` with the E-step posteriors held fixed, in mean mode.
fn q_fixed(model: &SparseChmm, inst: &Instance, stats: &hmm::PosteriorStats) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(inst, EmissionMode::Mean, &mut rng).expect("forward");
    hmm::expected_ll(stats, &fwd.transition, &fwd.log_evidence)
}

pub struct GradReport {
    pub label: String,
    pub worst_rel: f64,
}

/// Checks `∂Q/∂θ` for the given trainable heads against finite differences.
pub fn check_q_gradients(model: &mut SparseChmm, inst: &Instance, heads: &[Head], use_addon: bool, label: &str) -> std::result::Result<GradReport, String> {
    model.params.set_trainable(heads);
    model.use_addon = use_addon;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(inst, EmissionMode::Mean, &mut rng).map_err(|e| e.to_string())?;
    let stats = hmm::forward_backward(&fwd.transition, &fwd.log_evidence).map_err(|e| e.to_string())?;
    let grads = model.q_gradients(inst, &fwd, &stats).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for &head in heads {
        let g = grads.get(head).ok_or_else(|| format!("no gradient for {}", head.name()))?.clone();
        let w = fd_head(model, head, &g, 1e-5, |m| q_fixed(m, inst, &stats)).map_err(|e| format!("{label}: {e}"))?;
        worst = worst.max(w);
    }
    Ok(GradReport {
        label: label.into(),
        worst_rel: worst,
    })
}

/// Checks the pretraining loss gradient for the given heads.
pub fn check_mse_gradients(
    model: &mut SparseChmm,
    inst: &Instance,
    heads: &[Head],
    use_addon: bool,
    with_psi: bool,
    label: &str,
) -> std::result::Result<GradReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = model.spec.num_lfs();
    let l = model.num_labels();
    let mut phi_target = Array3::zeros((k, l, l));
    for lf in 0..k {
        for i in 0..l {
            for (j, v) in random_simplex(l, &mut rng).into_iter().enumerate() {
                phi_target[[lf, i, j]] = v;
            }
        }
    }
    let mut psi_target = Array2::zeros((l, l));
    for i in 0..l {
        for (j, v) in random_simplex(l, &mut rng).into_iter().enumerate() {
            psi_target[[i, j]] = v;
        }
    }
    let psi = with_psi.then_some(&psi_target);
    model.params.set_trainable(heads);
    model.use_addon = use_addon;
    let (_, grads) = model
        .mse_loss_and_grad(inst, &phi_target, psi, &mut rng)
        .map_err(|e| e.to_string())?;
    let loss = |m: &SparseChmm| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        m.mse_loss_and_grad(inst, &phi_target, psi, &mut r).expect("loss").0
    };
    let mut worst: f64 = 0.0;
    for &head in heads {
        let g = grads.get(head).ok_or_else(|| format!("no gradient for {}", head.name()))?.clone();
        worst = worst.max(fd_head(model, head, &g, 1e-5, loss).map_err(|e| format!("{label}: {e}"))?);
    }
    Ok(GradReport {
        label: label.into(),
        worst_rel: worst,
    })
}

/// Every trainable path on small random instances (dims ≤ 8).
pub fn gradient_suite(seed: u64) -> std::result::Result<Vec<GradReport>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (entities, k, d, t) in [(1usize, 2usize, 4usize, 4usize), (2, 3, 5, 6)] {
        for level in [ReliabilityLevel::Entity, ReliabilityLevel::Label] {
            let l = 2 * entities + 1;
            let inst = random_instance(t, k, l, d, &mut rng);
            let mut model = fd_model(entities, k, d, level, &mut rng);
            let tag = format!("L={l} K={k} d={d} {level:?}");
            out.push(check_q_gradients(&mut model, &inst, &[Head::Transition], false, &format!("Q transition {tag}"))?);
            out.push(check_q_gradients(&mut model, &inst, &[Head::Reliability], false, &format!("Q reliability {tag}"))?);
            out.push(check_q_gradients(
                &mut model,
                &inst,
                &[Head::Reliability, Head::Scaling],
                true,
                &format!("Q reliability+scaling with addon {tag}"),
            )?);
            out.push(check_mse_gradients(
                &mut model,
                &inst,
                &[Head::Transition, Head::Reliability],
                false,
                true,
                &format!("MSE stage-1 {tag}"),
            )?);
            out.push(check_mse_gradients(&mut model, &inst, &[Head::Scaling], true, false, &format!("MSE stage-2 {tag}"))?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Emission algebra
// ---------------------------------------------------------------------------

pub fn hyper_for(l: usize, g_n: f64, g_r: f64) -> EmissionHyper {
    let mut h = EmissionHyper::conll(4, l);
    h.g_n = g_n;
    h.g_r = g_r;
    h
}

/// Λ rows are nonnegative and sum to one.
pub fn check_lambda_simplex(scaled: &Array2<f64>, hyper: &EmissionHyper) -> Check {
    let lambda = expand_base_prior(scaled, hyper).map_err(|e| e.to_string())?;
    let (k, l, _) = lambda.dim();
    for lf in 0..k {
        for i in 0..l {
            let row = lambda.slice(s![lf, i, ..]);
            if let Some(v) = row.iter().find(|v| **v < 0.0) {
                return Err(format!("negative entry {v} in row ({lf},{i}), a={}", scaled[[lf, i]]));
            }
            let sum = row.sum();
            if !close(sum, 1.0, 1e-12) {
                return Err(format!("row ({lf},{i}) sums to {sum}, a={}", scaled[[lf, i]]));
            }
        }
    }
    Ok(())
}

/// `h` maps [0,1] onto [0,1], is nondecreasing along `grid`, and continuous at `a = r^s`.
pub fn check_h(n: f64, s: f64, r: f64, grid: usize) -> Check {
    let h = |a: f64| scale_h(a, n, s, r).map_err(|e| e.to_string());
    if h(0.0)? != 0.0 || !close(h(1.0)?, 1.0, 1e-12) {
        return Err(format!("h endpoints {} {} for n={n} s={s} r={r}", h(0.0)?, h(1.0)?));
    }
    let mut prev = 0.0;
    for i in 0..=grid {
        let a = i as f64 / grid as f64;
        let v = h(a)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("h({a}) = {v} outside [0,1]"));
        }
        if v < prev - 1e-15 {
            return Err(format!("h decreases at a={a}: {prev} -> {v} (n={n} s={s} r={r})"));
        }
        prev = v;
    }
    let split = r.powf(s);
    // step across the split in u = a^(1/s), where the branches meet
    let below = h((r * (1.0 - 1e-9)).powf(s))?;
    let above = h((r * (1.0 + 1e-9)).powf(s).min(1.0))?;
    if !close(below, r, 1e-6) || !close(above, r, 1e-6) || !close(h(split)?, r, 1e-12) {
        return Err(format!("h discontinuous at split {split}: {below} / {} / {above}", h(split)?));
    }
    Ok(())
}

/// `g(0) = 1`, `g(1) = 0`, both branches agree at `r`, and `g ≥ 0` when `r`
/// is within the admissible bound.
pub fn check_g(l: usize, n: f64, r: f64) -> Check {
    let g = |a: f64| expand_g(a, l, n, r);
    if !close(g(0.0), 1.0, 1e-12) || !close(g(1.0), 0.0, 1e-12) {
        return Err(format!("g endpoints {} {} (L={l} n={n} r={r})", g(0.0), g(1.0)));
    }
    let c = (2.0 - l as f64) / ((n - 1.0) * r.powf(n) - n * r.powf(n - 1.0));
    let poly = c * r.powf(n) + (1.0 - l as f64) * r + 1.0;
    let eps = 1e-9;
    if !close(g(r), poly, 1e-12) || !close(g(r - eps), poly, 1e-6) || !close(g(r + eps), poly, 1e-6) {
        return Err(format!("g discontinuous at r={r}: {} {} {} vs {poly}", g(r - eps), g(r), g(r + eps)));
    }
    if r <= g_split_bound(l, n) {
        for i in 0..=200 {
            let a = i as f64 / 200.0;
            if g(a) < -1e-12 {
                return Err(format!("g({a}) = {} negative with r={r} within bound", g(a)));
            }
        }
    }
    Ok(())
}

fn invalid_pair(q: usize, g: usize) -> bool {
    q == 0 || g == 0 || q == g
}

/// Zero structure of `W`, `Ŵ`, `W̃` and `Δ` for a corpus and per-sentence `Ã`.
pub fn check_wxor_zeros(corpus: &[(Array2<usize>, Array2<f64>)], c: &Array2<f64>) -> Check {
    for (obs, scaled) in corpus {
        for t in 0..obs.ncols() {
            let col: Vec<usize> = obs.column(t).to_vec();
            let w = wxor_token(&col, scaled);
            for ((k, q, g), v) in w.indexed_iter() {
                if (invalid_pair(q, g) || col[k] != q) && *v != 0.0 {
                    return Err(format!("W[{k},{q},{g}] = {v}, expected 0"));
                }
            }
        }
    }
    let table = wxor_aggregate(corpus.iter().map(|(o, a)| (o.view(), a))).map_err(|e| e.to_string())?;
    for ((k, q, g), v) in table.aggregated.indexed_iter() {
        if (invalid_pair(q, g) || table.counts[[k, q]] == 0.0) && *v != 0.0 {
            return Err(format!("aggregated[{k},{q},{g}] = {v}, expected 0"));
        }
    }
    for ((k, q, g), v) in table.normalized.indexed_iter() {
        if invalid_pair(q, g) && *v != 0.0 {
            return Err(format!("normalized[{k},{q},{g}] = {v}, expected 0"));
        }
    }
    let delta = addon_from_scale(c, &table.normalized);
    for ((k, g, q), v) in delta.indexed_iter() {
        if invalid_pair(q, g) && *v != 0.0 {
            return Err(format!("delta[{k},{g},{q}] = {v}, expected 0"));
        }
    }
    Ok(())
}

pub fn random_wxor_corpus<R: Rng>(k: usize, l: usize, sentences: usize, rng: &mut R) -> Vec<(Array2<usize>, Array2<f64>)> {
    (0..sentences)
        .map(|_| {
            let t = rng.random_range(1..6);
            // bias toward O so some (k, q) pairs never occur
            let obs = Array2::from_shape_fn((k, t), |_| if rng.random_bool(0.5) { 0 } else { rng.random_range(0..l) });
            let scaled = Array2::from_shape_fn((k, l), |_| rng.random_range(0.0..=1.0));
            (obs, scaled)
        })
        .collect()
}

/// Emission algebra over deterministic parameter grids.
pub fn emission_algebra_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for l in [3usize, 5, 7, 9] {
        for g_n in [1.5, 2.0, 4.0, 8.0] {
            let bound = g_split_bound(l, g_n);
            for frac in [0.05, 0.25, 0.5, 0.9, 1.0] {
                let g_r = (bound * frac).min(0.999);
                check_g(l, g_n, g_r)?;
                let hyper = hyper_for(l, g_n, g_r);
                let mut scaled = Array2::from_shape_fn((4, l), |_| rng.random_range(0.0..=1.0));
                scaled[[0, 0]] = 0.0;
                scaled[[1, 1]] = 1.0;
                scaled[[2, l - 1]] = g_r;
                check_lambda_simplex(&scaled, &hyper)?;
            }
        }
    }
    for n in [0.5, 1.0, 1.2, 2.0, 4.0] {
        for s in [0.5, 1.0, 1.5, 3.0] {
            for r in [0.05, 1.0 / 6.0, 0.25, 0.5, 0.9] {
                check_h(n, s, r, 400)?;
            }
        }
    }
    for (k, l) in [(2usize, 5usize), (3, 5), (4, 7)] {
        let corpus = random_wxor_corpus(k, l, 12, &mut rng);
        let c = Array2::from_shape_fn((k, l), |_| rng.random_range(0.0..1.0));
        check_wxor_zeros(&corpus, &c)?;
    }
    Ok(())
}

/// Plain double-loop WXOR accumulation, written against the definition.
pub fn wxor_oracle(corpus: &[(Array2<usize>, Array2<f64>)]) -> Array3<f64> {
    let (k, l) = corpus[0].1.dim();
    let mut num = Array3::<f64>::zeros((k, l, l));
    let mut den = Array2::<f64>::zeros((k, l));
    for (obs, a) in corpus {
        for t in 0..obs.ncols() {
            for kk in 0..k {
                for q in 0..l {
                    let x_kq = if obs[[kk, t]] == q { 1.0 } else { 0.0 };
                    den[[kk, q]] += x_kq;
                    for g in 0..l {
                        if q == 0 || g == 0 || q == g {
                            continue;
                        }
                        let mut conf = 0.0;
                        for k2 in 0..k {
                            let x = if obs[[k2, t]] == g { 1.0 } else { 0.0 };
                            conf += a[[k2, g]] * x;
                        }
                        num[[kk, q, g]] += (1.0 - a[[kk, q]]) * x_kq * conf;
                    }
                }
            }
        }
    }
    Array3::from_shape_fn((k, l, l), |(kk, q, g)| {
        if den[[kk, q]] == 0.0 {
            0.0
        } else {
            num[[kk, q, g]] / den[[kk, q]]
        }
    })
}

/// Three hand-built sentences, K = 2, L = 5. LF 1 never emits label 4.
pub fn hand_wxor_corpus() -> Vec<(Array2<usize>, Array2<f64>)> {
    let a1 = ndarray::array![[0.9, 0.3, 0.6, 0.2, 0.5], [0.8, 0.7, 0.4, 0.9, 0.1]];
    let a2 = ndarray::array![[0.5, 0.5, 0.5, 0.5, 0.5], [0.6, 0.2, 0.8, 0.3, 0.7]];
    let a3 = ndarray::array![[0.1, 0.9, 0.1, 0.8, 0.4], [0.3, 0.4, 0.6, 0.5, 0.2]];
    vec![
        (ndarray::array![[1, 0, 3, 2], [3, 0, 3, 1]], a1),
        (ndarray::array![[1, 1, 0], [2, 4, 0]], a2),
        (ndarray::array![[3, 2, 1, 0, 2], [1, 2, 4, 3, 3]], a3),
    ]
}

// ---------------------------------------------------------------------------
// Dirichlet moments
// ---------------------------------------------------------------------------

/// Empirical mean and variance of `draws` Dirichlet samples per row of `omega`
/// (1×L×L) against closed-form moments, within `z` standard errors. The
/// variance's standard error uses the empirical fourth central moment.
pub fn check_dirichlet(omega_rows: &[Vec<f64>], draws: usize, z: f64, seed: u64) -> Check {
    let l = omega_rows.len();
    let omega = Array3::from_shape_fn((1, l, l), |(_, i, j)| omega_rows[i][j]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![Vec::with_capacity(draws); l * l];
    for _ in 0..draws {
        let phi = sample_emission(&omega, EmissionMode::Sample(GradientPath::MeanPath), &mut rng)
            .map_err(|e| e.to_string())?
            .phi;
        for i in 0..l {
            let row_sum: f64 = (0..l).map(|j| phi[[0, i, j]]).sum();
            if !close(row_sum, 1.0, 1e-6) {
                return Err(format!("sample row sums to {row_sum}"));
            }
            for j in 0..l {
                samples[i * l + j].push(phi[[0, i, j]]);
            }
        }
    }
    let n = draws as f64;
    for i in 0..l {
        let a0: f64 = omega_rows[i].iter().sum();
        for j in 0..l {
            let a = omega_rows[i][j];
            let mean = a / a0;
            let var = a * (a0 - a) / (a0 * a0 * (a0 + 1.0));
            let xs = &samples[i * l + j];
            let m = xs.iter().sum::<f64>() / n;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
            let se_mean = (var / n).sqrt();
            let se_var = ((m4 - v * v) / n).sqrt();
            if (m - mean).abs() > z * se_mean {
                return Err(format!("row {i} col {j}: mean {m} vs {mean} (se {se_mean:e})"));
            }
            if (v - var).abs() > z * se_var {
                return Err(format!("row {i} col {j}: variance {v:e} vs {var:e} (se {se_var:e})"));
            }
        }
    }
    let mean_phi = sample_emission(&omega, EmissionMode::Mean, &mut rng).map_err(|e| e.to_string())?.phi;
    for i in 0..l {
        let a0: f64 = omega_rows[i].iter().sum();
        for j in 0..l {
            let expected = omega_rows[i][j] / a0;
            if mean_phi[[0, i, j]] != expected {
                return Err(format!("mean mode ({i},{j}) = {} vs {expected}", mean_phi[[0, i, j]]));
            }
        }
    }
    Ok(())
}

/// Rows covering shapes below one, the textbook (3,1,1), and the magnitudes
/// the default concentrations produce.
pub fn dirichlet_rows() -> Vec<Vec<f64>> {
    vec![vec![3.0, 1.0, 1.0], vec![0.5, 0.3, 2.0], vec![910.0, 10.0, 260.0]]
}

/// Ω for a Λ with a zero entry: its minimum equals `ν_base`.
pub fn omega_floor(lambda: &Array3<f64>, hyper: &EmissionHyper) -> f64 {
    build_concentration(lambda, None, hyper)
        .expect("positive scales")
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

/// A small synthetic configuration for pipeline smoke tests.
pub fn smoke_synth(seed: u64, train: usize) -> SynthConfig {
    SynthConfig {
        seed,
        train_size: train,
        valid_size: 20,
        test_size: 20,
        min_len: 4,
        max_len: 8,
        emb_dim: 8,
        reliabilities: vec![0.9, 0.7, 0.5],
        confusions: vec![],
        ..SynthConfig::default()
    }
}

pub fn label_set_pl() -> LabelSet {
    LabelSet::new(&["PER", "LOC"]).expect("valid entities")
}

/// Training configuration for smoke runs: short stages, small batches.
pub fn smoke_config(seed: u64, max_epochs: usize) -> scmm_core::config::Config {
    let mut cfg = scmm_core::config::Config {
        seed,
        ..Default::default()
    };
    cfg.data.entities = vec!["PER".into(), "LOC".into()];
    cfg.train.batch_size = 16;
    cfg.train.pretrain_epochs = 2;
    for stage in [&mut cfg.train.stage1, &mut cfg.train.stage2, &mut cfg.train.stage3] {
        stage.max_epochs = max_epochs;
        stage.patience = 2;
    }
    cfg
}
