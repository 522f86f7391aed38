//! The assembled label model: three dense heads, the frozen WXOR table, and
//! the per-sentence forward/backward passes that the trainer drives.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSequence, Instance};
use crate::emission::{
    addon_backward, base_prior_backward, build_addon, build_concentration, concentration_backward,
    expand_base_prior, predict_reliability, reliability_backward, sample_emission, EmissionHyper, EmissionMode,
    EmissionSample, ReliabilityBundle,
};
use crate::error::{Error, Result};
use crate::hmm::{self, emission_evidence, evidence_backward, PosteriorStats};
use crate::nn::{snap, DenseLayer, Gradients, Head, NamedTensor, ParamRegistry, TensorFile};
use crate::transition::{
    expected_transition_logit_grad, predict_transition, transition_backward, transition_logit_grad, InitialState,
    TransitionTensor,
};

/// Static shape and hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub entities: Vec<String>,
    pub lf_names: Vec<String>,
    /// LFs present only during training (the majority-vote pseudo-LF), appended last.
    pub train_only_lfs: usize,
    pub emb_dim: usize,
    pub hyper: EmissionHyper,
    pub initial: InitialState,
    pub evidence_floor: f64,
}

impl ModelSpec {
    pub fn num_labels(&self) -> usize {
        2 * self.entities.len() + 1
    }

    /// LFs the emission heads cover (training count).
    pub fn num_lfs(&self) -> usize {
        self.lf_names.len()
    }

    /// LFs used at prediction time.
    pub fn num_infer_lfs(&self) -> usize {
        self.lf_names.len() - self.train_only_lfs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseChmm {
    pub spec: ModelSpec,
    pub params: ParamRegistry,
    /// `W̃`, set once after stage 1.
    pub wxor: Option<Array3<f64>>,
    /// Whether `Δ` enters the concentration (off during stage 1).
    pub use_addon: bool,
}

#[derive(Debug, Clone)]
pub struct EmissionForward {
    pub reliability: ReliabilityBundle,
    pub lambda: Array3<f64>,
    pub addon: Option<(Array2<f64>, Array3<f64>)>,
    pub omega: Array3<f64>,
    pub sample: EmissionSample,
    pub mode: EmissionMode,
}

impl EmissionForward {
    pub fn phi(&self) -> &Array3<f64> {
        &self.sample.phi
    }
}

#[derive(Debug, Clone)]
pub struct SentenceForward {
    pub transition: TransitionTensor,
    pub emission: EmissionForward,
    pub log_evidence: Array2<f64>,
}

fn tokens_of(emb: &EmbeddingSequence) -> ArrayView2<'_, f64> {
    emb.vectors.slice(s![1.., ..])
}

impl SparseChmm {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let l = spec.num_labels();
        let k = spec.num_lfs();
        spec.hyper.validate(l)?;
        if k == 0 || spec.emb_dim == 0 {
            return Err(Error::Config("model needs at least one LF and a positive embedding dim".into()));
        }
        let d = spec.emb_dim;
        let transition = DenseLayer::init(d, l * l, rng);
        let reliability = DenseLayer::init(d, spec.hyper.reliability_width(k, l), rng);
        let scaling = DenseLayer::init(d, k * l, rng);
        Ok(Self {
            spec,
            params: ParamRegistry::new(transition, reliability, scaling),
            wxor: None,
            use_addon: false,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.spec.num_labels()
    }

    /// Installs `W̃` at single precision so checkpoints reload it exactly.
    pub fn set_wxor(&mut self, normalized: &Array3<f64>) {
        self.wxor = Some(normalized.mapv(snap));
    }

    pub fn reliability(&self, e0: ArrayView1<'_, f64>) -> Result<ReliabilityBundle> {
        predict_reliability(
            e0,
            self.params.layer(Head::Reliability),
            &self.spec.hyper,
            self.spec.num_lfs(),
            self.num_labels(),
        )
    }

    pub fn emission_forward<R: Rng + ?Sized>(
        &self,
        e0: ArrayView1<'_, f64>,
        mode: EmissionMode,
        rng: &mut R,
    ) -> Result<EmissionForward> {
        let reliability = self.reliability(e0)?;
        let lambda = expand_base_prior(&reliability.scaled, &self.spec.hyper)?;
        let addon = match (&self.wxor, self.use_addon) {
            (Some(w), true) => Some(build_addon(e0, self.params.layer(Head::Scaling), w)?),
            (None, true) => return Err(Error::Config("addon prior requested before WXOR aggregation".into())),
            _ => None,
        };
        let omega = build_concentration(&lambda, addon.as_ref().map(|(_, d)| d), &self.spec.hyper)?;
        let sample = sample_emission(&omega, mode, rng)?;
        Ok(EmissionForward {
            reliability,
            lambda,
            addon,
            omega,
            sample,
            mode,
        })
    }

    /// Chains `∂L/∂Φ` back into whichever emission heads are trainable.
    pub fn emission_backward(
        &self,
        fwd: &EmissionForward,
        e0: ArrayView1<'_, f64>,
        grad_phi: &Array3<f64>,
        grads: &mut Gradients,
    ) {
        let rel_on = grads.get(Head::Reliability).is_some();
        let scale_on = grads.get(Head::Scaling).is_some() && fwd.addon.is_some();
        if !rel_on && !scale_on {
            return;
        }
        let grad_omega = concentration_backward(&fwd.omega, &fwd.sample, grad_phi, fwd.mode);
        let grad_prior = grad_omega * self.spec.hyper.nu_expan;
        if rel_on {
            let grad_scaled = base_prior_backward(&fwd.reliability.scaled, &grad_prior, &self.spec.hyper);
            let layer = self.params.layer(Head::Reliability);
            let g = grads.get_mut(Head::Reliability).expect("checked");
            reliability_backward(&fwd.reliability, &grad_scaled, &self.spec.hyper, e0, layer, g);
        }
        if scale_on {
            let (c, _) = fwd.addon.as_ref().expect("checked");
            let w = self.wxor.as_ref().expect("addon implies wxor");
            let layer = self.params.layer(Head::Scaling);
            let g = grads.get_mut(Head::Scaling).expect("checked");
            addon_backward(c, w, &grad_prior, e0, layer, g);
        }
    }

    pub fn transition(&self, emb: &EmbeddingSequence) -> Result<TransitionTensor> {
        predict_transition(
            tokens_of(emb),
            self.params.layer(Head::Transition),
            self.num_labels(),
            self.spec.initial,
        )
    }

    /// Forward pass over one sentence. Evidence uses as many LFs as `inst` carries.
    pub fn forward<R: Rng + ?Sized>(&self, inst: &Instance, mode: EmissionMode, rng: &mut R) -> Result<SentenceForward> {
        let emb = inst.embedding()?;
        if emb.num_tokens() != inst.len() {
            return Err(Error::Schema {
                id: inst.sentence.id.clone(),
                message: "embedding rows do not match token count".into(),
            });
        }
        if emb.dim() != self.spec.emb_dim {
            return Err(Error::Dimension {
                context: "embedding dim",
                expected: self.spec.emb_dim,
                actual: emb.dim(),
            });
        }
        let transition = self.transition(emb)?;
        let emission = self.emission_forward(emb.sentence(), mode, rng)?;
        let log_evidence = emission_evidence(emission.phi(), inst.weak.obs.view(), self.spec.evidence_floor)?;
        Ok(SentenceForward {
            transition,
            emission,
            log_evidence,
        })
    }

    /// Gradient of `Q` (to be maximized) with the posteriors in `stats` held fixed.
    pub fn q_gradients(&self, inst: &Instance, fwd: &SentenceForward, stats: &PosteriorStats) -> Result<Gradients> {
        let emb = inst.embedding()?;
        let mut grads = Gradients::for_registry(&self.params);
        if grads.get(Head::Transition).is_some() {
            let gl = expected_transition_logit_grad(&fwd.transition.matrices, &stats.xi);
            let layer = self.params.layer(Head::Transition);
            transition_backward(tokens_of(emb), &gl, layer, grads.get_mut(Head::Transition).expect("checked"));
        }
        if grads.get(Head::Reliability).is_some() || grads.get(Head::Scaling).is_some() {
            let grad_phi = evidence_backward(
                fwd.emission.phi(),
                inst.weak.obs.view(),
                stats.token_marginals(),
                self.spec.evidence_floor,
            );
            self.emission_backward(&fwd.emission, emb.sentence(), &grad_phi, &mut grads);
        }
        Ok(grads)
    }

    /// Pretraining loss `(1/K)Σ_k‖Φ_k − Φ*_k‖² [+ (1/T)Σ_t‖Ψ_t − Ψ*‖²]` and its gradient.
    pub fn mse_loss_and_grad<R: Rng + ?Sized>(
        &self,
        inst: &Instance,
        phi_target: &Array3<f64>,
        psi_target: Option<&Array2<f64>>,
        rng: &mut R,
    ) -> Result<(f64, Gradients)> {
        let emb = inst.embedding()?;
        let mut grads = Gradients::for_registry(&self.params);
        let k = self.spec.num_lfs() as f64;
        let emission = self.emission_forward(emb.sentence(), EmissionMode::Mean, rng)?;
        let diff = emission.phi() - phi_target;
        let mut loss = diff.iter().map(|d| d * d).sum::<f64>() / k;
        let grad_phi = diff.mapv(|d| 2.0 * d / k);
        self.emission_backward(&emission, emb.sentence(), &grad_phi, &mut grads);
        if let Some(target) = psi_target {
            let psi = self.transition(emb)?;
            let t_len = psi.len() as f64;
            let mut grad_psi = Array3::zeros(psi.matrices.dim());
            for t in 0..psi.len() {
                let d = &psi.matrices.slice(s![t, .., ..]) - target;
                loss += d.iter().map(|v| v * v).sum::<f64>() / t_len;
                grad_psi.slice_mut(s![t, .., ..]).assign(&d.mapv(|v| 2.0 * v / t_len));
            }
            if let Some(g) = grads.get_mut(Head::Transition) {
                let gl = transition_logit_grad(&psi.matrices, &grad_psi);
                transition_backward(tokens_of(emb), &gl, self.params.layer(Head::Transition), g);
            }
        }
        Ok((loss, grads))
    }

    /// Mean-mode emission `Φ` for a sentence embedding.
    pub fn mean_emission(&self, e0: ArrayView1<'_, f64>) -> Result<Array3<f64>> {
        // mean mode never draws
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        Ok(self.emission_forward(e0, EmissionMode::Mean, &mut rng)?.sample.phi)
    }

    /// Viterbi decode in mean mode over the inference LFs.
    pub fn predict(&self, inst: &Instance) -> Result<Vec<usize>> {
        let k = self.spec.num_infer_lfs();
        let obs = inst.weak.obs.slice(s![..k.min(inst.weak.num_lfs()), ..]);
        let emb = inst.embedding()?;
        let transition = self.transition(emb)?;
        let phi = self.mean_emission(emb.sentence())?;
        let log_evidence = emission_evidence(&phi, obs, self.spec.evidence_floor)?;
        Ok(hmm::viterbi(&transition, &log_evidence)?.0)
    }

    /// Corpus-mean `Ã` over a set of sentences (K×L).
    pub fn mean_reliability(&self, instances: &[Instance]) -> Result<Array2<f64>> {
        let mut acc = Array2::zeros((self.spec.num_lfs(), self.num_labels()));
        if instances.is_empty() {
            return Err(Error::Empty("split"));
        }
        for inst in instances {
            acc += &self.reliability(inst.embedding()?.sentence())?.scaled;
        }
        Ok(acc / instances.len() as f64)
    }

    pub fn to_tensor_file(&self, metadata: String) -> TensorFile {
        let mut file = TensorFile {
            metadata,
            tensors: Vec::new(),
        };
        for h in Head::ALL {
            file.push_layer(h.name(), self.params.layer(h));
        }
        if let Some(w) = &self.wxor {
            let (a, b, c) = w.dim();
            file.tensors.push(NamedTensor::from_f64("wxor.normalized", vec![a, b, c], w.iter().copied()));
        }
        file
    }

    pub fn from_tensor_file(spec: ModelSpec, use_addon: bool, file: &TensorFile) -> Result<Self> {
        let params = ParamRegistry::new(
            file.read_layer(Head::Transition.name())?,
            file.read_layer(Head::Reliability.name())?,
            file.read_layer(Head::Scaling.name())?,
        );
        let wxor = match file.get("wxor.normalized") {
            Some(t) if t.dims.len() == 3 => Some(
                Array3::from_shape_vec((t.dims[0], t.dims[1], t.dims[2]), t.to_f64())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
            Some(_) => return Err(Error::Checkpoint("bad wxor dims".into())),
            None => None,
        };
        let model = Self {
            spec,
            params,
            wxor,
            use_addon,
        };
        let l = model.num_labels();
        let k = model.spec.num_lfs();
        let d = model.spec.emb_dim;
        let check = |h: Head, d_out: usize| -> Result<()> {
            let layer = model.params.layer(h);
            if layer.d_in() != d || layer.d_out() != d_out {
                return Err(Error::Checkpoint(format!(
                    "head '{}' has shape {}x{}, expected {d}x{d_out}",
                    h.name(),
                    layer.d_in(),
                    layer.d_out()
                )));
            }
            Ok(())
        };
        check(Head::Transition, l * l)?;
        check(Head::Reliability, model.spec.hyper.reliability_width(k, l))?;
        check(Head::Scaling, k * l)?;
        Ok(model)
    }
}
