//! Token-wise transition matrices predicted from token embeddings.

use ndarray::{s, Array1, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::LabelSet;
use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, softmax_vjp, DenseLayer, LayerGrad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// All mass on `O`.
    #[default]
    O,
    Uniform,
}

pub fn initial_distribution(kind: InitialState, num_labels: usize) -> Array1<f64> {
    match kind {
        InitialState::O => {
            let mut p = Array1::zeros(num_labels);
            p[LabelSet::O] = 1.0;
            p
        }
        InitialState::Uniform => Array1::from_elem(num_labels, 1.0 / num_labels as f64),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTensor {
    /// `Ψ`, T×L×L; `matrices[t-1]` moves from token `t−1` to token `t`.
    pub matrices: Array3<f64>,
    pub initial: Array1<f64>,
}

impl TransitionTensor {
    pub fn len(&self) -> usize {
        self.matrices.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.initial.len()
    }
}

/// Applies the transition head to each token embedding (rows of `tokens`, T×d)
/// and softmaxes every row of the reshaped L×L output.
pub fn predict_transition(
    tokens: ArrayView2<'_, f64>,
    layer: &DenseLayer,
    num_labels: usize,
    initial: InitialState,
) -> Result<TransitionTensor> {
    if layer.d_out() != num_labels * num_labels {
        return Err(Error::Dimension {
            context: "transition head output",
            expected: num_labels * num_labels,
            actual: layer.d_out(),
        });
    }
    let t_len = tokens.nrows();
    let mut matrices = Array3::zeros((t_len, num_labels, num_labels));
    for t in 0..t_len {
        let out = layer.apply(tokens.row(t))?;
        let mut out = out.into_raw_vec_and_offset().0;
        for row in out.chunks_mut(num_labels) {
            softmax_in_place(row);
        }
        let view = ndarray::ArrayView2::from_shape((num_labels, num_labels), &out).expect("square");
        matrices.slice_mut(s![t, .., ..]).assign(&view);
    }
    Ok(TransitionTensor {
        matrices,
        initial: initial_distribution(initial, num_labels),
    })
}

/// Gradient of `Σ_t Σ_ij ξ_ij log Ψ_ij` w.r.t. the pre-softmax logits:
/// `ξ_ij − Ψ_ij Σ_j' ξ_ij'`.
pub fn expected_transition_logit_grad(psi: &Array3<f64>, xi: &Array3<f64>) -> Array3<f64> {
    let (t_len, l, _) = psi.dim();
    let mut out = Array3::zeros(psi.dim());
    for t in 0..t_len {
        for i in 0..l {
            let row_mass: f64 = (0..l).map(|j| xi[[t, i, j]]).sum();
            for j in 0..l {
                out[[t, i, j]] = xi[[t, i, j]] - psi[[t, i, j]] * row_mass;
            }
        }
    }
    out
}

/// Logit gradient from an arbitrary `∂L/∂Ψ` through the row softmax.
pub fn transition_logit_grad(psi: &Array3<f64>, grad_psi: &Array3<f64>) -> Array3<f64> {
    let (t_len, l, _) = psi.dim();
    let mut out = Array3::zeros(psi.dim());
    for t in 0..t_len {
        for i in 0..l {
            let y: Vec<f64> = (0..l).map(|j| psi[[t, i, j]]).collect();
            let g: Vec<f64> = (0..l).map(|j| grad_psi[[t, i, j]]).collect();
            for (j, v) in softmax_vjp(&y, &g).into_iter().enumerate() {
                out[[t, i, j]] = v;
            }
        }
    }
    out
}

/// Accumulates the head's parameter gradient given per-token logit gradients.
pub fn transition_backward(
    tokens: ArrayView2<'_, f64>,
    grad_logits: &Array3<f64>,
    layer: &DenseLayer,
    grad: &mut LayerGrad,
) {
    let (t_len, l, _) = grad_logits.dim();
    for t in 0..t_len {
        let flat = grad_logits
            .slice(s![t, .., ..])
            .to_shape(l * l)
            .expect("contiguous")
            .to_owned();
        layer.accumulate_grad(tokens.row(t), flat.view(), grad);
    }
}
