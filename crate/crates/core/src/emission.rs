//! Sentence-level emission construction.
//!
//! A dense head maps the sentence embedding to reliability logits `A` (K×L).
//! Column `O` goes through a sigmoid, entity columns through a softmax across
//! LFs, and the piecewise scaling function `h` decorrelates the result into
//! `Ã`. The expansion functions `f`/`g` place `Ã` on the diagonal of the base
//! prior `Λ` and fill the rest of each row. WXOR statistics, aggregated once
//! over a corpus and rescaled by a second head `C`, form the addon prior `Δ`.
//! Emission rows are Dirichlet draws with concentration
//! `Ω = ν_expan·(Λ + Δ) + ν_base`, or their mean in evaluation.
//!
//! Every forward step has a matching backward function; the model module
//! chains them.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softmax_in_place, softmax_vjp, DenseLayer, LayerGrad};

// ---------------------------------------------------------------------------
// Hyperparameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReliabilityLevel {
    /// One score per label.
    Label,
    /// One score per entity, shared by its `B-` and `I-` labels.
    #[default]
    Entity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionHyper {
    pub h_n: f64,
    pub h_s: f64,
    pub h_r: f64,
    pub g_n: f64,
    pub g_r: f64,
    pub nu_base: f64,
    pub nu_expan: f64,
    pub level: ReliabilityLevel,
}

impl EmissionHyper {
    /// Stage-1 defaults of the CoNLL 2003 setting.
    pub fn conll(num_lfs: usize, num_labels: usize) -> Self {
        Self {
            h_n: 1.2,
            h_s: 1.5,
            h_r: 1.0 / num_lfs as f64,
            g_n: 4.0,
            g_r: 1.0 / (2.0 * num_labels as f64),
            nu_base: 10.0,
            nu_expan: 1000.0,
            level: ReliabilityLevel::Entity,
        }
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        if num_labels < 3 {
            return Err(Error::Domain(format!(
                "expansion needs at least 3 labels, got {num_labels}"
            )));
        }
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        if !(self.h_n > 0.0 && self.h_s > 0.0 && open01(self.h_r)) {
            return Err(Error::Domain(format!(
                "h requires n, s > 0 and r in (0,1); got n={}, s={}, r={}",
                self.h_n, self.h_s, self.h_r
            )));
        }
        if !(self.g_n > 1.0 && open01(self.g_r)) {
            return Err(Error::Domain(format!(
                "g requires n > 1 and r in (0,1); got n={}, r={}",
                self.g_n, self.g_r
            )));
        }
        let r_max = g_split_bound(num_labels, self.g_n);
        if self.g_r > r_max {
            return Err(Error::Domain(format!(
                "g split {} exceeds {r_max:.6}; emit-to-O prior would go negative for L={num_labels}, n={}",
                self.g_r, self.g_n
            )));
        }
        if !(self.nu_base > 0.0 && self.nu_expan > 0.0) {
            return Err(Error::Domain("concentration scales must be positive".into()));
        }
        Ok(())
    }

    /// Width of the reliability head output.
    pub fn reliability_width(&self, num_lfs: usize, num_labels: usize) -> usize {
        match self.level {
            ReliabilityLevel::Label => num_lfs * num_labels,
            ReliabilityLevel::Entity => num_lfs * ((num_labels - 1) / 2 + 1),
        }
    }
}

/// Largest split point for which `g` stays nonnegative: `g(r) = 0` exactly at
/// `r = n / ((L − 1)(n − 1))`, and `g` is decreasing on `[0, r]` below it.
pub fn g_split_bound(num_labels: usize, n: f64) -> f64 {
    (n / ((num_labels as f64 - 1.0) * (n - 1.0))).min(1.0)
}

// ---------------------------------------------------------------------------
// Scalar functions
// ---------------------------------------------------------------------------

/// Reliability scaling `h_{n,s,r}` and its derivative.
///
/// With `u = a^(1/s)`: `u^n / r^(n−1)` below the split, `1 − (1−u)^n / (1−r)^(n−1)`
/// above it. Both branches equal `r` at `u = r` with slope `n` in `u`.
pub fn h_value_grad(a: f64, n: f64, s: f64, r: f64) -> (f64, f64) {
    if a <= 0.0 {
        let slope = if n > s { 0.0 } else if n == s { 1.0 / r.powf(n - 1.0) } else { f64::INFINITY };
        return (0.0, slope);
    }
    let u = a.powf(1.0 / s);
    if u < r {
        let denom = r.powf(n - 1.0);
        let value = a.powf(n / s) / denom;
        let grad = (n / s) * a.powf(n / s - 1.0) / denom;
        (value, grad)
    } else {
        let denom = (1.0 - r).powf(n - 1.0);
        let one_minus = (1.0 - u).max(0.0);
        let value = 1.0 - one_minus.powf(n) / denom;
        let grad = n * one_minus.powf(n - 1.0) / denom * u / (s * a);
        (value, grad)
    }
}

pub fn scale_h(a: f64, n: f64, s: f64, r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a) || !(r > 0.0 && r < 1.0) || n <= 0.0 || s <= 0.0 {
        return Err(Error::Domain(format!(
            "h({a}; n={n}, s={s}, r={r}) outside a∈[0,1], r∈(0,1), n,s>0"
        )));
    }
    Ok(h_value_grad(a, n, s, r).0)
}

fn g_coefficient(num_labels: usize, n: f64, r: f64) -> f64 {
    (2.0 - num_labels as f64) / ((n - 1.0) * r.powf(n) - n * r.powf(n - 1.0))
}

/// Emit-to-O expansion `g_{n,r}` and its derivative.
///
/// Polynomial `c·a^n − (L−1)·a + 1` up to the split, then the straight line
/// from `(r, g(r))` to `(1, 0)`.
pub fn g_value_grad(a: f64, num_labels: usize, n: f64, r: f64) -> (f64, f64) {
    let l = num_labels as f64;
    let c = g_coefficient(num_labels, n, r);
    if a <= r {
        let value = c * a.powf(n) + (1.0 - l) * a + 1.0;
        let grad = if a > 0.0 { n * c * a.powf(n - 1.0) } else { 0.0 } + (1.0 - l);
        (value, grad)
    } else {
        let gr = c * r.powf(n) + (1.0 - l) * r + 1.0;
        let slope = gr / (r - 1.0);
        (slope * (a - 1.0), slope)
    }
}

pub fn expand_g(a: f64, num_labels: usize, n: f64, r: f64) -> f64 {
    g_value_grad(a, num_labels, n, r).0
}

/// Expansion `f_{i,j}(a)` and its derivative for latent `i`, observed `j`.
pub fn expansion_value_grad(i: usize, j: usize, a: f64, num_labels: usize, n: f64, r: f64) -> (f64, f64) {
    let l = num_labels as f64;
    if i == j {
        (a, 1.0)
    } else if i == LabelSet::O {
        ((1.0 - a) / (l - 1.0), -1.0 / (l - 1.0))
    } else {
        let (g, dg) = g_value_grad(a, num_labels, n, r);
        if j == LabelSet::O {
            (g, dg)
        } else {
            ((1.0 - a - g) / (l - 2.0), (-1.0 - dg) / (l - 2.0))
        }
    }
}

// ---------------------------------------------------------------------------
// Reliability head
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBundle {
    /// `A`, K×L (entity-tied when the level is per entity).
    pub logits: Array2<f64>,
    /// `Â`, K×L.
    pub normalized: Array2<f64>,
    /// `Ã = h(Â)`, K×L.
    pub scaled: Array2<f64>,
}

/// Maps the head's flat output to K×L logits, tying `B-e`/`I-e` per entity.
fn unfold_logits(raw: ArrayView1<'_, f64>, level: ReliabilityLevel, num_lfs: usize, num_labels: usize) -> Array2<f64> {
    match level {
        ReliabilityLevel::Label => raw
            .to_owned()
            .into_shape_with_order((num_lfs, num_labels))
            .expect("width checked by caller"),
        ReliabilityLevel::Entity => {
            let width = (num_labels - 1) / 2 + 1;
            Array2::from_shape_fn((num_lfs, num_labels), |(k, l)| {
                let col = match LabelSet::entity_of(l) {
                    None => 0,
                    Some(e) => e + 1,
                };
                raw[k * width + col]
            })
        }
    }
}

fn fold_logit_grad(grad: &Array2<f64>, level: ReliabilityLevel) -> Vec<f64> {
    match level {
        ReliabilityLevel::Label => grad.iter().copied().collect(),
        ReliabilityLevel::Entity => {
            let (num_lfs, num_labels) = grad.dim();
            let width = (num_labels - 1) / 2 + 1;
            let mut out = vec![0.0; num_lfs * width];
            for k in 0..num_lfs {
                for l in 0..num_labels {
                    let col = LabelSet::entity_of(l).map_or(0, |e| e + 1);
                    out[k * width + col] += grad[[k, l]];
                }
            }
            out
        }
    }
}

/// Normalizes logits: sigmoid on the `O` column, softmax across LFs elsewhere.
pub fn normalize_reliability(logits: &Array2<f64>) -> Array2<f64> {
    let (num_lfs, num_labels) = logits.dim();
    let mut out = Array2::zeros((num_lfs, num_labels));
    for k in 0..num_lfs {
        out[[k, 0]] = sigmoid(logits[[k, 0]]);
    }
    let mut col = vec![0.0; num_lfs];
    for l in 1..num_labels {
        for k in 0..num_lfs {
            col[k] = logits[[k, l]];
        }
        softmax_in_place(&mut col);
        for k in 0..num_lfs {
            out[[k, l]] = col[k];
        }
    }
    out
}

pub fn predict_reliability(
    e0: ArrayView1<'_, f64>,
    layer: &DenseLayer,
    hyper: &EmissionHyper,
    num_lfs: usize,
    num_labels: usize,
) -> Result<ReliabilityBundle> {
    let width = hyper.reliability_width(num_lfs, num_labels);
    if layer.d_out() != width {
        return Err(Error::Dimension {
            context: "reliability head output",
            expected: width,
            actual: layer.d_out(),
        });
    }
    let raw = layer.apply(e0)?;
    let logits = unfold_logits(raw.view(), hyper.level, num_lfs, num_labels);
    let normalized = normalize_reliability(&logits);
    let scaled = normalized.mapv(|a| h_value_grad(a, hyper.h_n, hyper.h_s, hyper.h_r).0);
    Ok(ReliabilityBundle {
        logits,
        normalized,
        scaled,
    })
}

/// Backpropagates `∂L/∂Ã` into the reliability head.
pub fn reliability_backward(
    bundle: &ReliabilityBundle,
    grad_scaled: &Array2<f64>,
    hyper: &EmissionHyper,
    e0: ArrayView1<'_, f64>,
    layer: &DenseLayer,
    grad: &mut LayerGrad,
) {
    let (num_lfs, num_labels) = bundle.normalized.dim();
    let grad_norm = Array2::from_shape_fn((num_lfs, num_labels), |(k, l)| {
        let a = bundle.normalized[[k, l]];
        grad_scaled[[k, l]] * h_value_grad(a, hyper.h_n, hyper.h_s, hyper.h_r).1
    });
    let mut grad_logits = Array2::zeros((num_lfs, num_labels));
    for k in 0..num_lfs {
        let p = bundle.normalized[[k, 0]];
        grad_logits[[k, 0]] = grad_norm[[k, 0]] * p * (1.0 - p);
    }
    for l in 1..num_labels {
        let y: Vec<f64> = bundle.normalized.column(l).to_vec();
        let g: Vec<f64> = grad_norm.column(l).to_vec();
        for (k, v) in softmax_vjp(&y, &g).into_iter().enumerate() {
            grad_logits[[k, l]] = v;
        }
    }
    let flat = ndarray::Array1::from(fold_logit_grad(&grad_logits, hyper.level));
    layer.accumulate_grad(e0, flat.view(), grad);
}

// ---------------------------------------------------------------------------
// Base prior
// ---------------------------------------------------------------------------

/// `Λ[k,i,j] = f_{i,j}(Ã[k,i])`, each row clamped at zero against rounding.
pub fn expand_base_prior(scaled: &Array2<f64>, hyper: &EmissionHyper) -> Result<Array3<f64>> {
    let (num_lfs, num_labels) = scaled.dim();
    if num_labels < 3 {
        return Err(Error::Domain(format!(
            "expansion needs at least 3 labels, got {num_labels}"
        )));
    }
    if let Some(a) = scaled.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Domain(format!("reliability {a} outside [0,1]")));
    }
    Ok(Array3::from_shape_fn((num_lfs, num_labels, num_labels), |(k, i, j)| {
        expansion_value_grad(i, j, scaled[[k, i]], num_labels, hyper.g_n, hyper.g_r)
            .0
            .max(0.0)
    }))
}

/// `∂L/∂Ã` from `∂L/∂Λ`.
pub fn base_prior_backward(scaled: &Array2<f64>, grad_lambda: &Array3<f64>, hyper: &EmissionHyper) -> Array2<f64> {
    let (num_lfs, num_labels) = scaled.dim();
    Array2::from_shape_fn((num_lfs, num_labels), |(k, i)| {
        let a = scaled[[k, i]];
        (0..num_labels)
            .map(|j| grad_lambda[[k, i, j]] * expansion_value_grad(i, j, a, num_labels, hyper.g_n, hyper.g_r).1)
            .sum()
    })
}

// ---------------------------------------------------------------------------
// WXOR
// ---------------------------------------------------------------------------

/// Per-token WXOR logits for one column of observations (`obs[k]` = label of LF k).
///
/// `W[k,q,g] = (1 − Ã[k,q])·x[k,q]·Σ_k' Ã[k',g]·x[k',g]` for `q, g ≠ O`, `q ≠ g`.
pub fn wxor_token(obs: &[usize], scaled: &Array2<f64>) -> Array3<f64> {
    let (num_lfs, num_labels) = scaled.dim();
    let mut w = Array3::zeros((num_lfs, num_labels, num_labels));
    let mut confidence = vec![0.0; num_labels];
    for (k, &g) in obs.iter().enumerate() {
        confidence[g] += scaled[[k, g]];
    }
    for (k, &q) in obs.iter().enumerate() {
        if q == LabelSet::O {
            continue;
        }
        let doubt = 1.0 - scaled[[k, q]];
        for g in 1..num_labels {
            if g != q {
                w[[k, q, g]] = doubt * confidence[g];
            }
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct WxorTable {
    /// `Σ_{m,t} W^(t)`, K×L×L.
    pub numerator: Array3<f64>,
    /// `Σ_{m,t} x[m,k,t,q]`, K×L.
    pub counts: Array2<f64>,
    /// `Ŵ`, K×L×L.
    pub aggregated: Array3<f64>,
    /// `W̃`, K×L×L.
    pub normalized: Array3<f64>,
}

/// Sums per-token WXOR logits over a corpus of `(obs K×T, Ã K×L)` pairs and
/// normalizes them.
pub fn wxor_aggregate<'a, I>(corpus: I) -> Result<WxorTable>
where
    I: IntoIterator<Item = (ArrayView2<'a, usize>, &'a Array2<f64>)>,
{
    let mut numerator: Option<Array3<f64>> = None;
    let mut counts: Option<Array2<f64>> = None;
    let mut col = Vec::new();
    for (obs, scaled) in corpus {
        let (num_lfs, num_labels) = scaled.dim();
        let num = numerator.get_or_insert_with(|| Array3::zeros((num_lfs, num_labels, num_labels)));
        let cnt = counts.get_or_insert_with(|| Array2::zeros((num_lfs, num_labels)));
        if num.dim() != (num_lfs, num_labels, num_labels) || obs.nrows() != num_lfs {
            return Err(Error::Dimension {
                context: "wxor corpus entry",
                expected: num.dim().0,
                actual: obs.nrows(),
            });
        }
        for t in 0..obs.ncols() {
            col.clear();
            col.extend(obs.column(t).iter().copied());
            *num += &wxor_token(&col, scaled);
            for (k, &q) in col.iter().enumerate() {
                cnt[[k, q]] += 1.0;
            }
        }
    }
    let (numerator, counts) = match (numerator, counts) {
        (Some(n), Some(c)) => (n, c),
        _ => return Err(Error::Empty("wxor corpus")),
    };
    let aggregated = Array3::from_shape_fn(numerator.dim(), |(k, q, g)| {
        let c = counts[[k, q]];
        if c > 0.0 {
            numerator[[k, q, g]] / c
        } else {
            0.0
        }
    });
    let normalized = normalize_wxor(&aggregated);
    Ok(WxorTable {
        numerator,
        counts,
        aggregated,
        normalized,
    })
}

/// Softmax of each `Ŵ[k,:,g]` over valid queries (`q ≠ O`, `q ≠ g`).
/// Columns with no evidence at all stay zero.
pub fn normalize_wxor(aggregated: &Array3<f64>) -> Array3<f64> {
    let (num_lfs, num_labels, _) = aggregated.dim();
    let mut out = Array3::zeros(aggregated.dim());
    let mut vals = Vec::with_capacity(num_labels);
    for k in 0..num_lfs {
        for g in 1..num_labels {
            let queries: Vec<usize> = (1..num_labels).filter(|&q| q != g).collect();
            vals.clear();
            vals.extend(queries.iter().map(|&q| aggregated[[k, q, g]]));
            if vals.iter().all(|&v| v == 0.0) {
                continue;
            }
            softmax_in_place(&mut vals);
            for (&q, &v) in queries.iter().zip(&vals) {
                out[[k, q, g]] = v;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Addon prior
// ---------------------------------------------------------------------------

/// Scaling factors `C = σ(dense(e0))` and addon prior `Δ[k,g,q] = C[k,q]·W̃[k,q,g]`.
pub fn build_addon(
    e0: ArrayView1<'_, f64>,
    scale_layer: &DenseLayer,
    w_tilde: &Array3<f64>,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (num_lfs, num_labels, _) = w_tilde.dim();
    if scale_layer.d_out() != num_lfs * num_labels {
        return Err(Error::Dimension {
            context: "scaling head output",
            expected: num_lfs * num_labels,
            actual: scale_layer.d_out(),
        });
    }
    let raw = scale_layer.apply(e0)?;
    let c = Array2::from_shape_fn((num_lfs, num_labels), |(k, l)| sigmoid(raw[k * num_labels + l]));
    let delta = addon_from_scale(&c, w_tilde);
    Ok((c, delta))
}

pub fn addon_from_scale(c: &Array2<f64>, w_tilde: &Array3<f64>) -> Array3<f64> {
    Array3::from_shape_fn(w_tilde.dim(), |(k, g, q)| c[[k, q]] * w_tilde[[k, q, g]])
}

/// Backpropagates `∂L/∂Δ` into the scaling head.
pub fn addon_backward(
    c: &Array2<f64>,
    w_tilde: &Array3<f64>,
    grad_delta: &Array3<f64>,
    e0: ArrayView1<'_, f64>,
    scale_layer: &DenseLayer,
    grad: &mut LayerGrad,
) {
    let (num_lfs, num_labels) = c.dim();
    let mut flat = ndarray::Array1::zeros(num_lfs * num_labels);
    for k in 0..num_lfs {
        for q in 0..num_labels {
            let gc: f64 = (0..num_labels)
                .map(|g| grad_delta[[k, g, q]] * w_tilde[[k, q, g]])
                .sum();
            let cv = c[[k, q]];
            flat[k * num_labels + q] = gc * cv * (1.0 - cv);
        }
    }
    scale_layer.accumulate_grad(e0, flat.view(), grad);
}

// ---------------------------------------------------------------------------
// Concentration and sampling
// ---------------------------------------------------------------------------

/// `Ω = ν_expan·(Λ + Δ) + ν_base`; `Δ = None` means a zero addon prior.
pub fn build_concentration(lambda: &Array3<f64>, delta: Option<&Array3<f64>>, hyper: &EmissionHyper) -> Result<Array3<f64>> {
    if !(hyper.nu_base > 0.0 && hyper.nu_expan > 0.0) {
        return Err(Error::Domain(format!(
            "concentration scales must be positive, got base={}, expan={}",
            hyper.nu_base, hyper.nu_expan
        )));
    }
    let mut omega = lambda.clone();
    if let Some(d) = delta {
        if d.dim() != lambda.dim() {
            return Err(Error::Dimension {
                context: "addon prior",
                expected: lambda.len(),
                actual: d.len(),
            });
        }
        omega += d;
    }
    omega.mapv_inplace(|v| hyper.nu_expan * v + hyper.nu_base);
    Ok(omega)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Forward value is the sample; backward differentiates the Dirichlet mean.
    #[default]
    MeanPath,
    /// Implicit reparameterization of the normalized Gamma draws.
    Implicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionMode {
    Mean,
    Sample(GradientPath),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionSample {
    pub phi: Array3<f64>,
    /// Raw Gamma draws, kept for the implicit gradient path.
    pub gamma_draws: Option<Array3<f64>>,
}

/// Draws (or averages) one emission matrix per LF, row-wise from `Dir(Ω row)`.
pub fn sample_emission<R: Rng + ?Sized>(omega: &Array3<f64>, mode: EmissionMode, rng: &mut R) -> Result<EmissionSample> {
    if let Some(v) = omega.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(Error::NonFinite(format!("concentration value {v}")));
    }
    let (num_lfs, num_labels, _) = omega.dim();
    let mut phi = Array3::zeros(omega.dim());
    match mode {
        EmissionMode::Mean => {
            for k in 0..num_lfs {
                for i in 0..num_labels {
                    let s: f64 = (0..num_labels).map(|j| omega[[k, i, j]]).sum();
                    for j in 0..num_labels {
                        phi[[k, i, j]] = omega[[k, i, j]] / s;
                    }
                }
            }
            Ok(EmissionSample { phi, gamma_draws: None })
        }
        EmissionMode::Sample(path) => {
            let mut draws = Array3::zeros(omega.dim());
            for k in 0..num_lfs {
                for i in 0..num_labels {
                    let mut s = 0.0;
                    for j in 0..num_labels {
                        let dist = Gamma::new(omega[[k, i, j]], 1.0)
                            .map_err(|e| Error::Domain(format!("gamma shape: {e}")))?;
                        let x: f64 = dist.sample(rng);
                        draws[[k, i, j]] = x;
                        s += x;
                    }
                    if s > 0.0 {
                        for j in 0..num_labels {
                            phi[[k, i, j]] = draws[[k, i, j]] / s;
                        }
                    } else {
                        let so: f64 = (0..num_labels).map(|j| omega[[k, i, j]]).sum();
                        for j in 0..num_labels {
                            phi[[k, i, j]] = omega[[k, i, j]] / so;
                        }
                    }
                }
            }
            let gamma_draws = (path == GradientPath::Implicit).then_some(draws);
            Ok(EmissionSample { phi, gamma_draws })
        }
    }
}

/// `∂x/∂α` for `x ~ Gamma(α, 1)` at fixed CDF level: `−(∂F/∂α) / p(x; α)`.
pub fn gamma_implicit_grad(x: f64, alpha: f64) -> f64 {
    let step = 1e-5 * alpha.max(1.0);
    let lo = (alpha - step).max(alpha * 0.5);
    let hi = alpha + step;
    let dcdf = (gamma_lr(hi, x) - gamma_lr(lo, x)) / (hi - lo);
    let log_pdf = (alpha - 1.0) * x.ln() - x - ln_gamma(alpha);
    let pdf = log_pdf.exp();
    if pdf > 0.0 && dcdf.is_finite() {
        -dcdf / pdf
    } else {
        // far tail: fall back to the mean's sensitivity
        x / alpha
    }
}

/// `∂L/∂Ω` from `∂L/∂Φ` for the given emission mode.
pub fn concentration_backward(omega: &Array3<f64>, sample: &EmissionSample, grad_phi: &Array3<f64>, mode: EmissionMode) -> Array3<f64> {
    let (num_lfs, num_labels, _) = omega.dim();
    let mut out = Array3::zeros(omega.dim());
    for k in 0..num_lfs {
        for i in 0..num_labels {
            match (mode, sample.gamma_draws.as_ref()) {
                (EmissionMode::Sample(GradientPath::Implicit), Some(draws)) => {
                    let total: f64 = (0..num_labels).map(|j| draws[[k, i, j]]).sum();
                    let dot: f64 = (0..num_labels)
                        .map(|j| grad_phi[[k, i, j]] * sample.phi[[k, i, j]])
                        .sum();
                    for j in 0..num_labels {
                        let dx = gamma_implicit_grad(draws[[k, i, j]], omega[[k, i, j]]);
                        out[[k, i, j]] = dx * (grad_phi[[k, i, j]] - dot) / total;
                    }
                }
                _ => {
                    let total: f64 = (0..num_labels).map(|j| omega[[k, i, j]]).sum();
                    let dot: f64 = (0..num_labels)
                        .map(|j| grad_phi[[k, i, j]] * omega[[k, i, j]] / total)
                        .sum();
                    for j in 0..num_labels {
                        out[[k, i, j]] = (grad_phi[[k, i, j]] - dot) / total;
                    }
                }
            }
        }
    }
    out
}
