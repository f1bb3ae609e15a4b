//! Variational recurrent network: per-step conditional prior, approximate
//! posterior, decoder, and LSTM recurrence, with a sequence evidence bound
//! and a last-step classifier head.
//!
//! Sampling uses the reparameterization `z = mu + sigma * eps` so gradients
//! flow through both distribution parameters. Noise is drawn per sequence
//! from a stable key, which makes losses invariant to batch order and lets
//! composite losses be recomputed term by term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::{join, Activation, DenseLayer, Initializer, LstmCellParams, Mlp, Module};
use crate::tensor::{Tape, Tensor};

/// Additive floor keeping every predicted standard deviation positive.
pub const SIGMA_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Diagonal Gaussian over a batch: `mu` and `sigma` are `[batch, dim]` with
/// strictly positive `sigma`.
#[derive(Debug, Clone)]
pub struct LatentDist {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl LatentDist {
    fn check(&self, op: &'static str) -> Result<()> {
        if self.mu.shape() != self.sigma.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.mu.shape().to_vec(),
                right: self.sigma.shape().to_vec(),
            });
        }
        if self.sigma.values().iter().any(|&s| s <= 0.0) {
            return Err(Error::Domain { op, detail: "non-positive sigma".into() });
        }
        Ok(())
    }
}

/// Shared tanh trunk with a linear mean head and a softplus-floored sigma head.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub trunk: Mlp,
    pub mu_head: DenseLayer,
    pub sigma_head: DenseLayer,
}

impl GaussianHead {
    pub fn new(init: &mut Initializer, in_size: usize, trunk_width: usize, out_size: usize) -> Result<Self> {
        Ok(Self {
            trunk: init.mlp(&[in_size, trunk_width], Activation::Tanh)?,
            mu_head: init.dense(trunk_width, out_size, Activation::Linear)?,
            sigma_head: init.dense(trunk_width, out_size, Activation::Linear)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<LatentDist> {
        let h = self.trunk.forward(x)?;
        let mu = self.mu_head.forward(&h)?;
        let sigma = self.sigma_head.forward(&h)?.softplus()?.add_scalar(SIGMA_FLOOR)?;
        Ok(LatentDist { mu, sigma })
    }
}

impl Module for GaussianHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.mu_head.visit(&join(prefix, "mu"), f);
        self.sigma_head.visit(&join(prefix, "sigma"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.mu_head.visit_mut(&join(prefix, "mu"), f);
        self.sigma_head.visit_mut(&join(prefix, "sigma"), f);
    }

    fn watch(&self, tape: &Tape) -> Self {
        Self {
            trunk: self.trunk.watch(tape),
            mu_head: self.mu_head.watch(tape),
            sigma_head: self.sigma_head.watch(tape),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VrnnConfig {
    /// Model input width: value channels plus indicator channels.
    pub input_dim: usize,
    /// Reconstructed channels (the leading `value_dim` inputs).
    pub value_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    /// Width of the embedding networks and Gaussian trunks.
    pub phi_width: usize,
}

impl VrnnConfig {
    pub fn new(value_dim: usize) -> Self {
        Self {
            input_dim: 2 * value_dim,
            value_dim,
            hidden: 30,
            latent: 50,
            phi_width: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("value_dim", self.value_dim),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("phi_width", self.phi_width),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.value_dim > self.input_dim {
            return Err(Error::InvalidConfig("value_dim exceeds input_dim".into()));
        }
        Ok(())
    }
}

/// Recurrent state: LSTM hidden and cell, zero-initialized at t = 0.
#[derive(Debug, Clone)]
pub struct VrnnStepState {
    pub h: Tensor,
    pub c: Tensor,
}

impl VrnnStepState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { h: Tensor::zeros(&[batch, hidden]), c: Tensor::zeros(&[batch, hidden]) }
    }
}

/// All sub-networks of one VRNN. The encoder side covers the input/latent
/// embeddings, prior, posterior, and recurrence; the decoder side is the
/// generating head; the classifier head reads the last-step latent.
#[derive(Debug, Clone)]
pub struct VrnnParams {
    pub phi_x: Mlp,
    pub phi_z: Mlp,
    pub phi_prior: GaussianHead,
    pub phi_enc: GaussianHead,
    pub phi_dec: GaussianHead,
    pub rec: LstmCellParams,
    pub clf_head: DenseLayer,
    pub config: VrnnConfig,
}

/// Parameter subsets used by the alternating optimizers and the freezing
/// contracts of the adaptation frameworks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    Encoder,
    Decoder,
    Classifier,
    All,
}

impl VrnnParams {
    pub fn new(config: VrnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::xavier(seed);
        let w = config.phi_width;
        Ok(Self {
            phi_x: init.mlp(&[config.input_dim, w], Activation::Tanh)?,
            phi_z: init.mlp(&[config.latent, w], Activation::Tanh)?,
            phi_prior: GaussianHead::new(&mut init, config.hidden, w, config.latent)?,
            phi_enc: GaussianHead::new(&mut init, w + config.hidden, w, config.latent)?,
            phi_dec: GaussianHead::new(&mut init, w + config.hidden, w, config.value_dim)?,
            rec: init.lstm(2 * w, config.hidden)?,
            clf_head: init.dense(config.latent, 1, Activation::Linear)?,
            config,
        })
    }

    /// Conditional prior parameters from the previous hidden state.
    pub fn prior_step(&self, state: &VrnnStepState) -> Result<LatentDist> {
        self.phi_prior.forward(&state.h)
    }

    /// Approximate posterior from the embedded input and previous hidden state.
    pub fn infer_step(&self, x_t: &Tensor, state: &VrnnStepState) -> Result<LatentDist> {
        let fx = self.phi_x.forward(x_t)?;
        self.phi_enc.forward(&Tensor::concat_cols(&[&fx, &state.h])?)
    }

    /// Generating distribution from the embedded latent and previous hidden state.
    pub fn decode_step(&self, z_t: &Tensor, state: &VrnnStepState) -> Result<LatentDist> {
        let fz = self.phi_z.forward(z_t)?;
        self.phi_dec.forward(&Tensor::concat_cols(&[&fz, &state.h])?)
    }

    /// Hidden-state update from the embedded input and latent.
    pub fn recurrence_step(&self, x_t: &Tensor, z_t: &Tensor, state: &VrnnStepState) -> Result<VrnnStepState> {
        let fx = self.phi_x.forward(x_t)?;
        let fz = self.phi_z.forward(z_t)?;
        let rec_in = Tensor::concat_cols(&[&fx, &fz])?;
        let (h, c) = self.rec.step(&rec_in, &state.h, &state.c)?;
        Ok(VrnnStepState { h, c })
    }

    pub fn visit_scope(&self, scope: ParamScope, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        if matches!(scope, ParamScope::Encoder | ParamScope::All) {
            self.phi_x.visit(&join(prefix, "phi_x"), f);
            self.phi_z.visit(&join(prefix, "phi_z"), f);
            self.phi_prior.visit(&join(prefix, "phi_prior"), f);
            self.phi_enc.visit(&join(prefix, "phi_enc"), f);
            self.rec.visit(&join(prefix, "rec"), f);
        }
        if matches!(scope, ParamScope::Decoder | ParamScope::All) {
            self.phi_dec.visit(&join(prefix, "phi_dec"), f);
        }
        if matches!(scope, ParamScope::Classifier | ParamScope::All) {
            self.clf_head.visit(&join(prefix, "clf"), f);
        }
    }

    pub fn visit_scope_mut(
        &mut self,
        scope: ParamScope,
        prefix: &str,
        f: &mut dyn FnMut(&str, &mut Tensor),
    ) {
        if matches!(scope, ParamScope::Encoder | ParamScope::All) {
            self.phi_x.visit_mut(&join(prefix, "phi_x"), f);
            self.phi_z.visit_mut(&join(prefix, "phi_z"), f);
            self.phi_prior.visit_mut(&join(prefix, "phi_prior"), f);
            self.phi_enc.visit_mut(&join(prefix, "phi_enc"), f);
            self.rec.visit_mut(&join(prefix, "rec"), f);
        }
        if matches!(scope, ParamScope::Decoder | ParamScope::All) {
            self.phi_dec.visit_mut(&join(prefix, "phi_dec"), f);
        }
        if matches!(scope, ParamScope::Classifier | ParamScope::All) {
            self.clf_head.visit_mut(&join(prefix, "clf"), f);
        }
    }

    pub fn scope_tensors(&self, scope: ParamScope) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_scope(scope, "", &mut |_, t| out.push(t.clone()));
        out
    }
}

impl Module for VrnnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_scope(ParamScope::All, prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_scope_mut(ParamScope::All, prefix, f);
    }

    fn watch(&self, tape: &Tape) -> Self {
        Self {
            phi_x: self.phi_x.watch(tape),
            phi_z: self.phi_z.watch(tape),
            phi_prior: self.phi_prior.watch(tape),
            phi_enc: self.phi_enc.watch(tape),
            phi_dec: self.phi_dec.watch(tape),
            rec: self.rec.watch(tape),
            clf_head: self.clf_head.watch(tape),
            config: self.config,
        }
    }
}

/// Reparameterized sample `mu + sigma * noise`.
pub fn reparam_sample(d: &LatentDist, noise: &Tensor) -> Result<Tensor> {
    d.check("reparam_sample")?;
    if noise.shape() != d.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            left: d.mu.shape().to_vec(),
            right: noise.shape().to_vec(),
        });
    }
    d.mu.add(&d.sigma.mul(noise)?)
}

/// Closed-form KL between diagonal Gaussians, summed over the latent axis.
/// Returns one value per batch row.
pub fn kl_diag_gaussian(q: &LatentDist, p: &LatentDist) -> Result<Tensor> {
    q.check("kl_diag_gaussian")?;
    p.check("kl_diag_gaussian")?;
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_diag_gaussian",
            left: q.mu.shape().to_vec(),
            right: p.mu.shape().to_vec(),
        });
    }
    let p_var = p.sigma.square()?;
    let var_ratio = q.sigma.square()?.div(&p_var)?;
    let mean_term = q.mu.sub(&p.mu)?.square()?.div(&p_var)?;
    let log_ratio = p.sigma.log()?.sub(&q.sigma.log()?)?;
    let per_elem = log_ratio
        .add(&var_ratio.add(&mean_term)?.mul_scalar(0.5)?)?
        .sub_scalar(0.5)?;
    per_elem.sum_axes(&[1])
}

/// Negative log-likelihood of `x` under the diagonal Gaussian, counting only
/// features with `feature_mask == 1`. Returns one value per batch row.
pub fn gaussian_nll(x: &Tensor, d: &LatentDist, feature_mask: &Tensor) -> Result<Tensor> {
    d.check("gaussian_nll")?;
    if x.shape() != d.mu.shape() || feature_mask.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_nll",
            left: x.shape().to_vec(),
            right: d.mu.shape().to_vec(),
        });
    }
    let resid = x.sub(&d.mu)?.square()?.div(&d.sigma.square()?.mul_scalar(2.0)?)?;
    let per_elem = d.sigma.log()?.add_scalar(HALF_LN_2PI)?.add(&resid)?;
    per_elem.mul(feature_mask)?.sum_axes(&[1])
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic per-sequence sampling noise: the draw for a sequence depends
/// only on `(plan seed, sequence key, step)`, never on batch position.
#[derive(Debug, Clone, Copy)]
pub struct NoisePlan {
    pub seed: u64,
}

impl NoisePlan {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn noise_row(&self, key: u64, t: usize, dim: usize) -> Vec<f64> {
        let s = splitmix64(self.seed ^ splitmix64(key ^ splitmix64(t as u64 ^ 0xA5A5_5A5A)));
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn noise_tensor(&self, keys: &[u64], t: usize, dim: usize) -> Result<Tensor> {
        let mut v = Vec::with_capacity(keys.len() * dim);
        for &k in keys {
            v.extend(self.noise_row(k, t, dim));
        }
        Tensor::new(&[keys.len(), dim], v)
    }
}

/// Whether the per-step latent is sampled (training) or the posterior mean
/// (deterministic evaluation).
#[derive(Debug, Clone, Copy)]
pub enum LatentMode {
    Sample(NoisePlan),
    Mean,
}

/// Everything one forward pass over a batch produces.
pub struct SeqRun {
    /// Per-sequence sum over valid steps of KL + reconstruction NLL.
    pub per_seq_loss: Tensor,
    /// `[batch, T, latent]` posterior latents, zeroed on padded steps.
    pub z_seq: Tensor,
    /// `[batch, latent]` latent at each sequence's true last step.
    pub z_last: Tensor,
}

impl VrnnParams {
    /// Runs the recurrence over a padded batch. Padded steps contribute no
    /// loss and do not advance the state.
    pub fn run_sequence(&self, batch: &SequenceBatch, mode: &LatentMode) -> Result<SeqRun> {
        if batch.input_dim() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "run_sequence",
                left: vec![batch.input_dim()],
                right: vec![self.config.input_dim],
            });
        }
        if batch.lengths.is_empty() || batch.lengths.iter().any(|&l| l == 0) {
            return Err(Error::InvalidData("sequence with no valid steps".into()));
        }
        let b = batch.batch_size();
        let tmax = batch.max_len();
        let latent = self.config.latent;
        let vd = self.config.value_dim;
        let mut state = VrnnStepState::zeros(b, self.config.hidden);
        let mut loss = Tensor::zeros(&[b]);
        let mut z_last = Tensor::zeros(&[b, latent]);
        let mut z_parts: Vec<Tensor> = Vec::with_capacity(tmax);
        let ones_feat = Tensor::ones(&[b, vd]);
        for t in 0..tmax {
            let x_t = batch.values.slice_step(t)?;
            let m = batch.mask_at(t)?;
            let fx = self.phi_x.forward(&x_t)?;
            let prior = self.phi_prior.forward(&state.h)?;
            let q = self.phi_enc.forward(&Tensor::concat_cols(&[&fx, &state.h])?)?;
            let z_t = match mode {
                LatentMode::Sample(plan) => {
                    let noise = plan.noise_tensor(&batch.seq_keys, t, latent)?;
                    reparam_sample(&q, &noise)?
                }
                LatentMode::Mean => q.mu.clone(),
            };
            let kl = kl_diag_gaussian(&q, &prior)?;
            let fz = self.phi_z.forward(&z_t)?;
            let dec = self.phi_dec.forward(&Tensor::concat_cols(&[&fz, &state.h])?)?;
            let x_vals = x_t.narrow_cols(0, vd)?;
            let feature_mask = ones_feat.sub(&x_t.narrow_cols(vd, vd)?)?;
            let nll = gaussian_nll(&x_vals, &dec, &feature_mask)?;
            let m_flat = m.reshape(&[b])?;
            loss = loss.add(&kl.add(&nll)?.mul(&m_flat)?)?;

            let rec_in = Tensor::concat_cols(&[&fx, &fz])?;
            let (h2, c2) = self.rec.step(&rec_in, &state.h, &state.c)?;
            let keep = m.neg()?.add_scalar(1.0)?;
            state.h = h2.mul(&m)?.add(&state.h.mul(&keep)?)?;
            state.c = c2.mul(&m)?.add(&state.c.mul(&keep)?)?;

            z_parts.push(z_t.mul(&m)?);
            let last_mask: Vec<f64> = batch
                .lengths
                .iter()
                .map(|&l| if l == t + 1 { 1.0 } else { 0.0 })
                .collect();
            if last_mask.iter().any(|&v| v != 0.0) {
                let lm = Tensor::new(&[b, 1], last_mask)?;
                z_last = z_last.add(&z_t.mul(&lm)?)?;
            }
        }
        let refs: Vec<&Tensor> = z_parts.iter().collect();
        Ok(SeqRun {
            per_seq_loss: loss,
            z_seq: Tensor::stack_steps(&refs)?,
            z_last,
        })
    }

    /// Mean over sequences of the per-step KL + NLL sum.
    pub fn elbo_loss(&self, batch: &SequenceBatch, mode: &LatentMode) -> Result<Tensor> {
        self.run_sequence(batch, mode)?.per_seq_loss.mean_all()
    }

    /// Posterior latents per step and at the true last step.
    pub fn encode_sequence(&self, batch: &SequenceBatch, mode: &LatentMode) -> Result<(Tensor, Tensor)> {
        let run = self.run_sequence(batch, mode)?;
        Ok((run.z_seq, run.z_last))
    }

    /// Probability of the positive class, strictly inside (0, 1).
    pub fn classify(&self, z_last: &Tensor) -> Result<Tensor> {
        let b = z_last.shape()[0];
        self.clf_head
            .forward(z_last)?
            .sigmoid()?
            .reshape(&[b])?
            .clamp(1e-12, 1.0 - 1e-12)
    }

    /// Mean binary cross-entropy of the last-step classifier on the batch.
    pub fn clf_loss(&self, batch: &SequenceBatch, mode: &LatentMode) -> Result<Tensor> {
        let run = self.run_sequence(batch, mode)?;
        let probs = self.classify(&run.z_last)?;
        bce_loss(&probs, &batch.labels)
    }
}

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(probs: &Tensor, labels: &[f64]) -> Result<Tensor> {
    if probs.shape() != [labels.len()] {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            left: probs.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    for &y in labels {
        if y != 0.0 && y != 1.0 {
            return Err(Error::BadLabel(y));
        }
    }
    let y = Tensor::new(&[labels.len()], labels.to_vec())?;
    let p = probs.clamp(1e-12, 1.0 - 1e-12)?;
    let one_minus_y = y.neg()?.add_scalar(1.0)?;
    let one_minus_p = p.neg()?.add_scalar(1.0)?;
    let ll = y.mul(&p.log()?)?.add(&one_minus_y.mul(&one_minus_p.log()?)?)?;
    ll.mean_all()?.neg()
}
