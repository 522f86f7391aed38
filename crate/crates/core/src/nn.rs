//! Dense layers, activations, the adaptive-moment optimizer and the
//! checkpoint tensor table.
//!
//! Gradients are hand-derived per op; there is no tape. Parameters are kept
//! at single precision (every value is exactly representable as `f32`) while
//! arithmetic runs in `f64`, so a checkpoint written with `f32` payloads
//! reloads to bit-identical parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCMP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Rounds to the nearest single-precision value.
#[inline]
pub fn snap(x: f64) -> f64 {
    x as f32 as f64
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Vector-Jacobian product of softmax: given outputs `y` and upstream `g`,
/// returns `y ⊙ (g − ⟨g, y⟩)`.
pub fn softmax_vjp(y: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect()
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `d_in × d_out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weights: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl DenseLayer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weights: Array2::zeros((d_in, d_out)),
            bias: Array1::zeros(d_out),
            trainable: true,
        }
    }

    /// Fan-based uniform init in ±sqrt(6 / (d_in + d_out)), zero bias.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((d_in, d_out), || snap(rng.random_range(-bound..bound)));
        Self {
            weights,
            bias: Array1::zeros(d_out),
            trainable: true,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.ncols()
    }

    /// `inputᵀ · weights + bias`
    pub fn apply(&self, input: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if input.len() != self.d_in() {
            return Err(Error::Dimension {
                context: "dense layer input",
                expected: self.d_in(),
                actual: input.len(),
            });
        }
        Ok(input.dot(&self.weights) + &self.bias)
    }

    /// Adds the parameter gradient of one application to `grad`.
    pub fn accumulate_grad(
        &self,
        input: ArrayView1<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
        grad: &mut LayerGrad,
    ) {
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                grad.weights
                    .row_mut(i)
                    .scaled_add(x, &grad_out);
            }
        }
        grad.bias += &grad_out;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn snap_all(&mut self) {
        self.weights.mapv_inplace(snap);
        self.bias.mapv_inplace(snap);
    }
}

// ---------------------------------------------------------------------------
// Parameter registry
// ---------------------------------------------------------------------------

/// The three trainable heads of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Transition,
    Reliability,
    Scaling,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Transition, Head::Reliability, Head::Scaling];

    pub fn name(self) -> &'static str {
        match self {
            Head::Transition => "transition",
            Head::Reliability => "reliability",
            Head::Scaling => "scaling",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry {
    layers: [DenseLayer; 3],
}

impl ParamRegistry {
    pub fn new(transition: DenseLayer, reliability: DenseLayer, scaling: DenseLayer) -> Self {
        let mut reg = Self {
            layers: [transition, reliability, scaling],
        };
        for l in &mut reg.layers {
            l.snap_all();
        }
        reg
    }

    pub fn layer(&self, head: Head) -> &DenseLayer {
        &self.layers[head.slot()]
    }

    pub fn layer_mut(&mut self, head: Head) -> &mut DenseLayer {
        &mut self.layers[head.slot()]
    }

    /// Replaces a head's parameters, keeping its freeze flag.
    pub fn replace(&mut self, head: Head, mut layer: DenseLayer) {
        layer.snap_all();
        layer.trainable = self.layers[head.slot()].trainable;
        self.layers[head.slot()] = layer;
    }

    /// Marks exactly the listed heads as trainable.
    pub fn set_trainable(&mut self, heads: &[Head]) {
        for h in Head::ALL {
            self.layers[h.slot()].trainable = heads.contains(&h);
        }
    }

    pub fn trainable_heads(&self) -> Vec<Head> {
        Head::ALL
            .into_iter()
            .filter(|h| self.layers[h.slot()].trainable)
            .collect()
    }
}

/// Gradient map over the registry; frozen heads carry no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: [Option<LayerGrad>; 3],
}

impl Gradients {
    pub fn for_registry(reg: &ParamRegistry) -> Self {
        let make = |h: Head| {
            let l = reg.layer(h);
            l.trainable.then(|| LayerGrad::zeros(l.d_in(), l.d_out()))
        };
        Self {
            grads: [
                make(Head::Transition),
                make(Head::Reliability),
                make(Head::Scaling),
            ],
        }
    }

    pub fn get(&self, head: Head) -> Option<&LayerGrad> {
        self.grads[head.slot()].as_ref()
    }

    pub fn get_mut(&mut self, head: Head) -> Option<&mut LayerGrad> {
        self.grads[head.slot()].as_mut()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.weights += &b.weights;
                a.bias += &b.bias;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.weights *= factor;
            g.bias *= factor;
        }
    }

    /// Fails with the name of the first head holding a non-finite coordinate.
    pub fn check_finite(&self) -> Result<()> {
        for h in Head::ALL {
            if let Some(g) = self.get(h) {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of head '{}'", h.name())));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m_weights: Array2<f64>,
    pub v_weights: Array2<f64>,
    pub m_bias: Array1<f64>,
    pub v_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: [Option<Moments>; 3],
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: [None, None, None],
        }
    }

    /// One bias-corrected adaptive-moment update of every unfrozen head.
    pub fn step(&mut self, reg: &mut ParamRegistry, grads: &Gradients) -> Result<()> {
        grads.check_finite()?;
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for head in Head::ALL {
            let layer = &mut reg.layers[head.slot()];
            if !layer.trainable {
                continue;
            }
            let Some(g) = grads.get(head) else { continue };
            if g.weights.dim() != layer.weights.dim() || g.bias.len() != layer.bias.len() {
                return Err(Error::Dimension {
                    context: "optimizer gradient",
                    expected: layer.weights.len() + layer.bias.len(),
                    actual: g.weights.len() + g.bias.len(),
                });
            }
            let mom = self.moments[head.slot()].get_or_insert_with(|| Moments {
                m_weights: Array2::zeros(layer.weights.dim()),
                v_weights: Array2::zeros(layer.weights.dim()),
                m_bias: Array1::zeros(layer.bias.len()),
                v_bias: Array1::zeros(layer.bias.len()),
            });
            let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = snap(*p - adam_delta(*m, *v, bc1, bc2, lr, eps));
            };
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut mom.m_weights)
                .and(&mut mom.v_weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut mom.m_bias)
                .and(&mut mom.v_bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

/// Size of one adaptive-moment step given raw moments and bias corrections.
#[inline]
pub fn adam_delta(m: f64, v: f64, bc1: f64, bc2: f64, lr: f64, eps: f64) -> f64 {
    lr * (m / bc1) / ((v / bc2).sqrt() + eps)
}

// ---------------------------------------------------------------------------
// Checkpoint tensor table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_f64(name: impl Into<String>, dims: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: data.into_iter().map(|v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Versioned tensor file: metadata JSON plus named `f32` tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn push_layer(&mut self, prefix: &str, layer: &DenseLayer) {
        self.tensors.push(NamedTensor::from_f64(
            format!("{prefix}.weight"),
            vec![layer.d_in(), layer.d_out()],
            layer.weights.iter().copied(),
        ));
        self.tensors.push(NamedTensor::from_f64(
            format!("{prefix}.bias"),
            vec![layer.d_out()],
            layer.bias.iter().copied(),
        ));
    }

    pub fn read_layer(&self, prefix: &str) -> Result<DenseLayer> {
        let w = self.require(&format!("{prefix}.weight"))?;
        let b = self.require(&format!("{prefix}.bias"))?;
        if w.dims.len() != 2 || b.dims.len() != 1 || b.dims[0] != w.dims[1] {
            return Err(Error::Checkpoint(format!("bad dims for layer '{prefix}'")));
        }
        Ok(DenseLayer {
            weights: Array2::from_shape_vec((w.dims[0], w.dims[1]), w.to_f64())
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            bias: Array1::from(b.to_f64()),
            trainable: true,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(self.metadata.len() as u32).map_err(io)?;
        w.write_all(self.metadata.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32).map_err(io)?;
        for t in &self.tensors {
            w.write_u32::<LittleEndian>(t.name.len() as u32).map_err(io)?;
            w.write_all(t.name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(t.dims.len() as u32).map_err(io)?;
            for &d in &t.dims {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let read_string = |r: &mut BufReader<File>| -> Result<String> {
            let n = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(bad)?;
            String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let metadata = read_string(&mut r)?;
        let n = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>().map_err(bad)? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(bad)?;
            tensors.push(NamedTensor { name, dims, data });
        }
        Ok(Self { metadata, tensors })
    }
}

impl OptimizerState {
    pub fn to_tensors(&self, file: &mut TensorFile) {
        file.tensors.push(NamedTensor::from_f64(
            "adam.hyper",
            vec![5],
            [self.lr, self.beta1, self.beta2, self.eps, self.step as f64],
        ));
        for h in Head::ALL {
            if let Some(m) = &self.moments[h.slot()] {
                let p = format!("adam.{}", h.name());
                let wd = vec![m.m_weights.nrows(), m.m_weights.ncols()];
                let bd = vec![m.m_bias.len()];
                file.tensors.push(NamedTensor::from_f64(format!("{p}.m_weight"), wd.clone(), m.m_weights.iter().copied()));
                file.tensors.push(NamedTensor::from_f64(format!("{p}.v_weight"), wd, m.v_weights.iter().copied()));
                file.tensors.push(NamedTensor::from_f64(format!("{p}.m_bias"), bd.clone(), m.m_bias.iter().copied()));
                file.tensors.push(NamedTensor::from_f64(format!("{p}.v_bias"), bd, m.v_bias.iter().copied()));
            }
        }
    }

    pub fn from_tensors(file: &TensorFile) -> Result<Self> {
        let hyper = file.require("adam.hyper")?.to_f64();
        if hyper.len() != 5 {
            return Err(Error::Checkpoint("bad adam.hyper".into()));
        }
        let mut state = OptimizerState {
            lr: hyper[0],
            beta1: hyper[1],
            beta2: hyper[2],
            eps: hyper[3],
            step: hyper[4] as u64,
            moments: [None, None, None],
        };
        for h in Head::ALL {
            let p = format!("adam.{}", h.name());
            let Some(mw) = file.get(&format!("{p}.m_weight")) else { continue };
            let vw = file.require(&format!("{p}.v_weight"))?;
            let mb = file.require(&format!("{p}.m_bias"))?;
            let vb = file.require(&format!("{p}.v_bias"))?;
            let shape = (mw.dims[0], mw.dims[1]);
            let arr2 = |t: &NamedTensor| {
                Array2::from_shape_vec(shape, t.to_f64()).map_err(|e| Error::Checkpoint(e.to_string()))
            };
            state.moments[h.slot()] = Some(Moments {
                m_weights: arr2(mw)?,
                v_weights: arr2(vw)?,
                m_bias: Array1::from(mb.to_f64()),
                v_bias: Array1::from(vb.to_f64()),
            });
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_dense(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
        (0..layer.d_out())
            .map(|j| {
                let mut acc = layer.bias[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * layer.weights[[i, j]];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn dense_zero_input_gives_bias() {
        let mut l = DenseLayer::zeros(3, 2);
        l.bias = array![0.5, -1.0];
        let y = l.apply(array![0.0, 0.0, 0.0].view()).unwrap();
        assert_eq!(y, array![0.5, -1.0]);
    }

    #[test]
    fn dense_identity() {
        let mut l = DenseLayer::zeros(3, 3);
        l.weights = Array2::eye(3);
        let x = array![0.1, -2.0, 3.5];
        assert_eq!(l.apply(x.view()).unwrap(), x);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut l = DenseLayer::init(3, 2, &mut rng);
        l.bias = array![0.25, -0.75];
        let x = [0.3, -1.2, 2.0];
        let y = l.apply(ArrayView1::from(&x)).unwrap();
        let oracle = naive_dense(&l, &x);
        for (a, b) in y.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(l.apply(array![1.0].view()).is_err());
    }

    #[test]
    fn dense_init_bounds_and_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = DenseLayer::init(10, 6, &mut rng);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(l.weights.iter().all(|w| w.abs() <= bound && snap(*w) == *w));
        assert!(l.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn sum_loss_gradient_is_linear() {
        let l = DenseLayer::zeros(3, 2);
        let x = array![1.0, 2.0, -0.5];
        let mut g = LayerGrad::zeros(3, 2);
        l.accumulate_grad(x.view(), array![1.0, 1.0].view(), &mut g);
        assert_eq!(g.bias, array![1.0, 1.0]);
        let outer = Array2::from_shape_fn((3, 2), |(i, _)| x[i]);
        assert_eq!(g.weights, outer);
    }

    #[test]
    fn softmax_and_sigmoid_ranges() {
        let mut v = vec![1.0, -3.0, 700.0, 2.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&p| p >= 0.0));
        for x in [-50.0, -1.0, 0.0, 3.0, 30.0] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_vjp_matches_finite_difference() {
        let x = [0.3, -0.2, 1.1, 0.0];
        let w = [0.7, -1.3, 0.2, 2.0];
        let f = |x: &[f64]| {
            let mut y = x.to_vec();
            softmax_in_place(&mut y);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut y = x.to_vec();
        softmax_in_place(&mut y);
        let g = softmax_vjp(&y, &w);
        for i in 0..4 {
            let h = 1e-5;
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "{i}: {fd} vs {}", g[i]);
        }
    }

    fn scalar_registry(b: f64) -> ParamRegistry {
        let mut t = DenseLayer::zeros(1, 1);
        t.bias[0] = b;
        let mut r = ParamRegistry::new(t, DenseLayer::zeros(1, 1), DenseLayer::zeros(1, 1));
        r.set_trainable(&[Head::Transition]);
        r
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut reg = scalar_registry(1.5);
        reg.set_trainable(&Head::ALL);
        let before = reg.clone();
        let grads = Gradients::for_registry(&reg);
        let mut opt = OptimizerState::new(0.1);
        for _ in 0..10 {
            opt.step(&mut reg, &grads).unwrap();
        }
        assert_eq!(reg, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut reg = scalar_registry(0.0);
        let mut opt = OptimizerState::new(0.1);
        for _ in 0..500 {
            let x = reg.layer(Head::Transition).bias[0];
            let mut grads = Gradients::for_registry(&reg);
            grads.get_mut(Head::Transition).unwrap().bias[0] = 2.0 * (x - 3.0);
            opt.step(&mut reg, &grads).unwrap();
        }
        let x = reg.layer(Head::Transition).bias[0];
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    }

    #[test]
    fn adam_second_identical_step_not_larger() {
        // Closed form: with constant g both bias-corrected steps equal lr·g/(|g|+eps).
        let (b1, b2, lr, eps, g) = (0.9, 0.999, 0.01, 1e-8, 0.37);
        let (m1, v1) = ((1.0 - b1) * g, (1.0 - b2) * g * g);
        let d1 = adam_delta(m1, v1, 1.0 - b1, 1.0 - b2, lr, eps);
        let (m2, v2) = (b1 * m1 + (1.0 - b1) * g, b2 * v1 + (1.0 - b2) * g * g);
        let d2 = adam_delta(m2, v2, 1.0 - b1 * b1, 1.0 - b2 * b2, lr, eps);
        assert!(d2.abs() <= d1.abs() * (1.0 + 1e-12));
        assert!((d1 - lr * g / (g.abs() + eps)).abs() < 1e-15);

        let mut reg = scalar_registry(0.0);
        let mut opt = OptimizerState::new(lr);
        let mut grads = Gradients::for_registry(&reg);
        grads.get_mut(Head::Transition).unwrap().bias[0] = g;
        opt.step(&mut reg, &grads).unwrap();
        let x1 = reg.layer(Head::Transition).bias[0];
        opt.step(&mut reg, &grads).unwrap();
        let x2 = reg.layer(Head::Transition).bias[0];
        assert!(((x2 - x1).abs() - x1.abs()).abs() < 1e-7);
    }

    #[test]
    fn frozen_heads_get_no_gradient_or_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reg = ParamRegistry::new(
            DenseLayer::init(2, 2, &mut rng),
            DenseLayer::init(2, 2, &mut rng),
            DenseLayer::init(2, 2, &mut rng),
        );
        reg.set_trainable(&[Head::Scaling]);
        let grads = Gradients::for_registry(&reg);
        assert!(grads.get(Head::Reliability).is_none());
        assert!(grads.get(Head::Transition).is_none());
        assert!(grads.get(Head::Scaling).is_some());
    }

    #[test]
    fn non_finite_gradient_names_head() {
        let reg = scalar_registry(0.0);
        let mut grads = Gradients::for_registry(&reg);
        grads.get_mut(Head::Transition).unwrap().bias[0] = f64::NAN;
        let err = grads.check_finite().unwrap_err();
        assert!(err.to_string().contains("transition"));
    }

    #[test]
    fn tensor_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = DenseLayer::init(4, 3, &mut rng);
        let mut reg = ParamRegistry::new(layer.clone(), layer.clone(), layer);
        let mut opt = OptimizerState::new(0.01);
        let mut grads = Gradients::for_registry(&reg);
        grads.get_mut(Head::Scaling).unwrap().weights.fill(0.5);
        opt.step(&mut reg, &grads).unwrap();

        let mut file = TensorFile {
            metadata: "{\"stage\":\"s1\"}".into(),
            ..Default::default()
        };
        for h in Head::ALL {
            file.push_layer(h.name(), reg.layer(h));
        }
        opt.to_tensors(&mut file);
        let p = dir.path().join("ckpt.bin");
        file.write(&p).unwrap();
        let back = TensorFile::read(&p).unwrap();
        assert_eq!(back, file);
        for h in Head::ALL {
            assert_eq!(&back.read_layer(h.name()).unwrap(), reg.layer(h));
        }
        let opt2 = OptimizerState::from_tensors(&back).unwrap();
        assert_eq!(opt2.step, 1);

        std::fs::write(&p, b"XXXX").unwrap();
        assert!(TensorFile::read(&p).is_err());
    }
}
