//! Exact inference over the label chain: emission evidence, scaled
//! forward-backward, the EM surrogate `Q`, and Viterbi decoding.
//!
//! Evidence is kept in the log domain and shifted by its per-token maximum
//! before entering the normalized recursions, so products over many LFs do
//! not underflow.

use ndarray::{s, Array1, Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::transition::TransitionTensor;

/// Floor applied to emission probabilities before taking logs.
pub const EVIDENCE_FLOOR: f64 = 1e-30;

/// `log φ[t-1, l] = Σ_k log Φ[k, l, obs(k, t)]` for the first `obs.nrows()` LFs.
pub fn emission_evidence(phi: &Array3<f64>, obs: ArrayView2<'_, usize>, floor: f64) -> Result<Array2<f64>> {
    let (num_lfs, num_labels, _) = phi.dim();
    if obs.nrows() > num_lfs {
        return Err(Error::Dimension {
            context: "emission evidence LF count",
            expected: num_lfs,
            actual: obs.nrows(),
        });
    }
    let t_len = obs.ncols();
    let mut out = Array2::zeros((t_len, num_labels));
    for t in 0..t_len {
        for (k, &j) in obs.column(t).iter().enumerate() {
            for l in 0..num_labels {
                out[[t, l]] += phi[[k, l, j]].max(floor).ln();
            }
        }
    }
    Ok(out)
}

/// `∂/∂Φ` of `Σ_t Σ_l γ[t,l] log φ[t,l]`; zero where the floor was active.
pub fn evidence_backward(phi: &Array3<f64>, obs: ArrayView2<'_, usize>, gamma: ArrayView2<'_, f64>, floor: f64) -> Array3<f64> {
    let (_, num_labels, _) = phi.dim();
    let mut out = Array3::zeros(phi.dim());
    for t in 0..obs.ncols() {
        for (k, &j) in obs.column(t).iter().enumerate() {
            for l in 0..num_labels {
                let p = phi[[k, l, j]];
                if p > floor {
                    out[[k, l, j]] += gamma[[t, l]] / p;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStats {
    /// Filtered marginals, (T+1)×L, row 0 = initial distribution.
    pub alpha: Array2<f64>,
    /// Scaled backward messages, (T+1)×L.
    pub beta: Array2<f64>,
    /// Smoothed marginals, (T+1)×L.
    pub gamma: Array2<f64>,
    /// Expected transitions, T×L×L; `xi[t-1]` pairs tokens `t−1` and `t`.
    pub xi: Array3<f64>,
    /// Per-step normalizers, `scale[0] = 1`.
    pub scale: Array1<f64>,
    /// `Q` evaluated at the parameters that produced these posteriors.
    pub q: f64,
    pub log_z: f64,
}

impl PosteriorStats {
    /// Smoothed marginals of tokens 1..=T.
    pub fn token_marginals(&self) -> ArrayView2<'_, f64> {
        self.gamma.slice(s![1.., ..])
    }
}

fn check_shapes(psi: &TransitionTensor, log_evidence: &Array2<f64>) -> Result<()> {
    if psi.len() != log_evidence.nrows() || psi.num_labels() != log_evidence.ncols() {
        return Err(Error::Dimension {
            context: "transition vs evidence",
            expected: psi.len() * psi.num_labels(),
            actual: log_evidence.len(),
        });
    }
    if psi.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    Ok(())
}

/// Shifted evidence `exp(log φ − max)` plus the shift per token.
fn shifted_evidence(log_evidence: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut shifts = Vec::with_capacity(log_evidence.nrows());
    let mut out = Array2::zeros(log_evidence.dim());
    for (t, row) in log_evidence.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let m = if m.is_finite() { m } else { 0.0 };
        for (l, &v) in row.iter().enumerate() {
            out[[t, l]] = (v - m).exp();
        }
        shifts.push(m);
    }
    (out, shifts)
}

pub fn forward_backward(psi: &TransitionTensor, log_evidence: &Array2<f64>) -> Result<PosteriorStats> {
    check_shapes(psi, log_evidence)?;
    let t_len = psi.len();
    let l = psi.num_labels();
    let (phi, shifts) = shifted_evidence(log_evidence);

    let mut alpha = Array2::zeros((t_len + 1, l));
    let mut scale = Array1::ones(t_len + 1);
    alpha.row_mut(0).assign(&psi.initial);
    for t in 1..=t_len {
        let trans = psi.matrices.slice(s![t - 1, .., ..]);
        let pred = alpha.row(t - 1).dot(&trans);
        let mut c = 0.0;
        for j in 0..l {
            let v = pred[j] * phi[[t - 1, j]];
            alpha[[t, j]] = v;
            c += v;
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::DegenerateEvidence { token: t });
        }
        alpha.row_mut(t).mapv_inplace(|v| v / c);
        scale[t] = c;
    }

    let mut beta = Array2::zeros((t_len + 1, l));
    beta.row_mut(t_len).fill(1.0);
    for t in (1..=t_len).rev() {
        let trans = psi.matrices.slice(s![t - 1, .., ..]);
        let weighted: Array1<f64> = (0..l).map(|j| phi[[t - 1, j]] * beta[[t, j]]).collect();
        let prev = trans.dot(&weighted) / scale[t];
        beta.row_mut(t - 1).assign(&prev);
    }

    let mut gamma = &alpha * &beta;
    for mut row in gamma.rows_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        }
    }

    let mut xi = Array3::zeros((t_len, l, l));
    for t in 1..=t_len {
        let mut total = 0.0;
        for i in 0..l {
            let a = alpha[[t - 1, i]];
            for j in 0..l {
                let v = a * psi.matrices[[t - 1, i, j]] * phi[[t - 1, j]] * beta[[t, j]] / scale[t];
                xi[[t - 1, i, j]] = v;
                total += v;
            }
        }
        if total > 0.0 {
            xi.slice_mut(s![t - 1, .., ..]).mapv_inplace(|v| v / total);
        }
    }

    let log_z: f64 = (1..=t_len).map(|t| scale[t].ln() + shifts[t - 1]).sum();
    let mut stats = PosteriorStats {
        alpha,
        beta,
        gamma,
        xi,
        scale,
        q: 0.0,
        log_z,
    };
    stats.q = expected_ll(&stats, psi, log_evidence);
    Ok(stats)
}

/// Observation log likelihood from the forward pass alone.
pub fn log_likelihood(psi: &TransitionTensor, log_evidence: &Array2<f64>) -> Result<f64> {
    check_shapes(psi, log_evidence)?;
    let (phi, shifts) = shifted_evidence(log_evidence);
    let mut alpha = psi.initial.clone();
    let mut log_z = 0.0;
    for t in 1..=psi.len() {
        let pred = alpha.dot(&psi.matrices.slice(s![t - 1, .., ..]));
        let next: Array1<f64> = pred.iter().zip(phi.row(t - 1)).map(|(p, f)| p * f).collect();
        let c = next.sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::DegenerateEvidence { token: t });
        }
        alpha = next / c;
        log_z += c.ln() + shifts[t - 1];
    }
    Ok(log_z)
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// `Q = Σ γ⁰ log p(z⁰) + Σ_t Σ ξ log Ψ + Σ_t Σ γ log φ` with the posteriors
/// held fixed.
pub fn expected_ll(stats: &PosteriorStats, psi: &TransitionTensor, log_evidence: &Array2<f64>) -> f64 {
    let initial: f64 = stats
        .gamma
        .row(0)
        .iter()
        .zip(psi.initial.iter())
        .map(|(&g, &p)| xlogy(g, p))
        .sum();
    let transition: f64 = stats
        .xi
        .iter()
        .zip(psi.matrices.iter())
        .map(|(&x, &p)| xlogy(x, p))
        .sum();
    let emission: f64 = stats
        .token_marginals()
        .iter()
        .zip(log_evidence.iter())
        .map(|(&g, &e)| if g == 0.0 { 0.0 } else { g * e })
        .sum();
    initial + transition + emission
}

/// Most probable label path and its joint log score. Ties go to the lowest
/// label index.
pub fn viterbi(psi: &TransitionTensor, log_evidence: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    check_shapes(psi, log_evidence)?;
    let t_len = psi.len();
    let l = psi.num_labels();
    let log_psi = psi.matrices.mapv(f64::ln);
    let mut delta: Vec<f64> = psi.initial.iter().map(|p| p.ln()).collect();
    let mut back = Array2::<usize>::zeros((t_len, l));
    let mut next = vec![0.0; l];
    for t in 0..t_len {
        for j in 0..l {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..l {
                let v = delta[i] + log_psi[[t, i, j]];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[j] = best + log_evidence[[t, j]];
            back[[t, j]] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, &v) in delta.iter().enumerate() {
        if v > best {
            best = v;
            last = j;
        }
    }
    if !best.is_finite() {
        return Err(Error::DegenerateEvidence { token: t_len });
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[[t, path[t]]];
    }
    Ok((path, best))
}
