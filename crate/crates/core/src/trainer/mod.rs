//! Optimization machinery: the NAdam optimizer, the rotating three-group
//! update order, early stopping on periodic validation losses, gradient
//! clipping, and stratified fold/validation splits for cross-validation.
//!
//! NAdam update, with `m`/`v` the exponential moving averages of the
//! gradient and squared gradient and `t` the step count:
//!
//! ```text
//! m <- b1 m + (1 - b1) g            mhat = m / (1 - b1^t)
//! v <- b2 v + (1 - b2) g^2          vhat = v / (1 - b2^t)
//! theta <- theta - lr * (b1 mhat + (1 - b1) g / (1 - b1^t)) / (sqrt(vhat) + eps)
//! ```

use serde::{Deserialize, Serialize};

use crate::adversarial::CriticReg;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

mod cv;

pub use cv::{cross_validate, evaluate_model, CvOutcome, CvPlan, FoldResult};

/// Mixes a base seed with a purpose tag and an index into an independent
/// substream seed. Every stochastic choice in training derives from this, so
/// runs are reproducible and resumable mid-way.
pub fn substream(seed: u64, tag: u64, k: u64) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(seed ^ mix(tag.wrapping_mul(0x517C_C1B7_2722_0A95) ^ mix(k)))
}

/// Seed tags for the training substreams.
pub mod seeds {
    pub const SHUFFLE_D1: u64 = 1;
    pub const SHUFFLE_D2: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const EPS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const FOLDS: u64 = 6;
    pub const VAL_SPLIT: u64 = 7;
    pub const CRITIC_INIT: u64 = 8;
    pub const CLF_INIT: u64 = 9;
    pub const GLOBAL_INIT: u64 = 10;
}

struct MomentState {
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Nesterov-accelerated adaptive moment estimation. Moment state is keyed by
/// parameter name, so one optimizer can serve a parameter through different
/// loss paths (the encoder, for instance, receives gradients from both the
/// reconstruction and the classification objectives).
pub struct NAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: std::collections::BTreeMap<String, MomentState>,
}

impl NAdam {
    pub fn new(lr: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: Default::default(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// One update over a parameter group. `visit` must walk the parameters in
    /// the same order as `grads`; NaN gradients fail fast.
    pub fn step_visit(
        &mut self,
        grads: &[Tensor],
        visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
    ) -> Result<()> {
        for g in grads {
            if g.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "nadam_step" });
            }
        }
        self.steps += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        let moments = &mut self.moments;
        visit(&mut |name, p| {
            if err.is_some() {
                return;
            }
            if idx >= grads.len() {
                err = Some(Error::ShapeMismatch {
                    op: "nadam_step",
                    left: vec![idx + 1],
                    right: vec![grads.len()],
                });
                return;
            }
            let g = &grads[idx];
            if g.shape() != p.shape() {
                err = Some(Error::ShapeMismatch {
                    op: "nadam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
                return;
            }
            let state = moments.entry(name.to_string()).or_insert_with(|| MomentState {
                t: 0,
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            state.t += 1;
            let bc1 = 1.0 - b1.powi(state.t as i32);
            let bc2 = 1.0 - b2.powi(state.t as i32);
            let mut updated = p.values().to_vec();
            for (((pv, mv), vv), gv) in updated
                .iter_mut()
                .zip(state.m.iter_mut())
                .zip(state.v.iter_mut())
                .zip(g.values())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let nesterov = b1 * mhat + (1.0 - b1) * gv / bc1;
                *pv -= lr * nesterov / (vhat.sqrt() + eps);
            }
            if let Err(e) = p.set_values(updated) {
                err = Some(e);
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != grads.len() {
            return Err(Error::ShapeMismatch {
                op: "nadam_step",
                left: vec![idx],
                right: vec![grads.len()],
            });
        }
        Ok(())
    }

    /// Serializes moments and step counters as named tensors.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(
            format!("{prefix}.steps"),
            Tensor::new(&[1], vec![self.steps as f64]).expect("finite"),
        )];
        for (name, st) in &self.moments {
            out.push((
                format!("{prefix}.t.{name}"),
                Tensor::new(&[1], vec![st.t as f64]).expect("finite"),
            ));
            out.push((
                format!("{prefix}.m.{name}"),
                Tensor::new(&[st.m.len()], st.m.clone()).expect("finite"),
            ));
            out.push((
                format!("{prefix}.v.{name}"),
                Tensor::new(&[st.v.len()], st.v.clone()).expect("finite"),
            ));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, entries: &[(String, Tensor)]) -> Result<()> {
        let steps_key = format!("{prefix}.steps");
        let steps = entries
            .iter()
            .find(|(n, _)| *n == steps_key)
            .ok_or_else(|| Error::Checkpoint(format!("missing {steps_key}")))?;
        self.steps = steps.1.values()[0] as u64;
        self.moments.clear();
        let t_prefix = format!("{prefix}.t.");
        for (n, t) in entries {
            if let Some(name) = n.strip_prefix(&t_prefix) {
                let m_key = format!("{prefix}.m.{name}");
                let v_key = format!("{prefix}.v.{name}");
                let m = entries
                    .iter()
                    .find(|(k, _)| *k == m_key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {m_key}")))?;
                let v = entries
                    .iter()
                    .find(|(k, _)| *k == v_key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {v_key}")))?;
                self.moments.insert(
                    name.to_string(),
                    MomentState {
                        t: t.values()[0] as u64,
                        m: m.1.values().to_vec(),
                        v: v.1.values().to_vec(),
                    },
                );
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their joint Euclidean norm is at most `max_norm`.
/// Returns the (possibly rescaled) gradients and the pre-clip norm.
pub fn clip_global_norm(grads: &[Tensor], max_norm: f64) -> Result<(Vec<Tensor>, f64)> {
    let mut ss = 0.0;
    for g in grads {
        for &v in g.values() {
            ss += v * v;
        }
    }
    let norm = ss.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return Ok((grads.to_vec(), norm));
    }
    let scale = max_norm / norm;
    let mut out = Vec::with_capacity(grads.len());
    for g in grads {
        let v: Vec<f64> = g.values().iter().map(|x| x * scale).collect();
        out.push(Tensor::new(g.shape(), v)?);
    }
    Ok((out, norm))
}

/// The three independently optimized parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Critic,
    VrnnSide,
    Classifier,
}

const ORDERS_3: [[Group; 3]; 6] = [
    [Group::Critic, Group::VrnnSide, Group::Classifier],
    [Group::Critic, Group::Classifier, Group::VrnnSide],
    [Group::VrnnSide, Group::Critic, Group::Classifier],
    [Group::VrnnSide, Group::Classifier, Group::Critic],
    [Group::Classifier, Group::Critic, Group::VrnnSide],
    [Group::Classifier, Group::VrnnSide, Group::Critic],
];

/// Update order for the epoch. With rotation on, the order cycles through
/// every permutation of the active groups so no sub-network always trains
/// last within a batch.
pub fn update_order(has_critic: bool, epoch: usize, rotate: bool) -> Vec<Group> {
    if has_critic {
        let idx = if rotate { epoch % 6 } else { 0 };
        ORDERS_3[idx].to_vec()
    } else {
        let flip = rotate && epoch % 2 == 1;
        if flip {
            vec![Group::Classifier, Group::VrnnSide]
        } else {
            vec![Group::VrnnSide, Group::Classifier]
        }
    }
}

/// One periodic evaluation: epoch, validation loss, and the checkpoint taken
/// at that point.
pub struct EvalPoint<T> {
    pub epoch: usize,
    pub val_loss: f64,
    pub checkpoint: T,
}

/// Picks the checkpoint with minimal validation loss; ties go to the
/// earliest epoch.
pub fn early_stop_select<T>(history: &[EvalPoint<T>]) -> Result<&EvalPoint<T>> {
    let mut best: Option<&EvalPoint<T>> = None;
    for p in history {
        let better = match best {
            None => true,
            Some(b) => p.val_loss < b.val_loss,
        };
        if better {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::InvalidData("empty evaluation history".into()))
}

/// Per-run training configuration. Defaults follow the reference setup:
/// batch 32, 160 epochs, validation every 10 epochs, NAdam learning rates
/// 1e-5 (critic), 0.006 (classifier), 0.003 (recurrent nets).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_dis: f64,
    pub lr_clf: f64,
    pub lr_vrnn: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub critic_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gp_lambda: f64,
    pub critic_reg: CriticReg,
    pub rotate_order: bool,
    pub grad_clip: f64,
    /// Number of evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_dis: 1e-5,
            lr_clf: 0.006,
            lr_vrnn: 0.003,
            batch_size: 32,
            epochs: 160,
            eval_every: 10,
            seed: 0,
            critic_steps: 1,
            alpha: 1.0,
            beta: 0.1,
            gp_lambda: 10.0,
            critic_reg: CriticReg::GradientPenalty,
            rotate_order: true,
            grad_clip: 5.0,
            patience: 3,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_dis", self.lr_dis),
            ("lr_clf", self.lr_clf),
            ("lr_vrnn", self.lr_vrnn),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.critic_steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, eval_every, critic_steps must be positive".into(),
            ));
        }
        if self.gp_lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn gp(&self) -> crate::adversarial::GpConfig {
        crate::adversarial::GpConfig { lambda: self.gp_lambda, mode: self.critic_reg }
    }
}

/// Assigns a fold id to every index, stratified by `(domain, label)`:
/// each stratum is shuffled and dealt round-robin, so folds partition the
/// data and preserve class/domain balance.
pub fn stratified_folds(labels: &[f64], domains: &[u8], folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    assert!(folds >= 2, "need at least two folds");
    assert_eq!(labels.len(), domains.len());
    let mut strata: std::collections::BTreeMap<(u8, u8), Vec<usize>> = Default::default();
    for i in 0..labels.len() {
        strata.entry((domains[i], labels[i] as u8)).or_default().push(i);
    }
    let mut assignment = vec![0usize; labels.len()];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for (_, mut idx) in strata {
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            assignment[i] = j % folds;
        }
    }
    assignment
}

/// Carves a stratified validation subset out of `indices`.
pub fn stratified_val_split(
    labels: &[f64],
    domains: &[u8],
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut strata: std::collections::BTreeMap<(u8, u8), Vec<usize>> = Default::default();
    for &i in indices {
        strata.entry((domains[i], labels[i] as u8)).or_default().push(i);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut idx) in strata {
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend(idx.drain(..n_val));
        train.extend(idx);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
