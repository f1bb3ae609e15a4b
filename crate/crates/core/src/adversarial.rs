//! LSTM sequence critic and Wasserstein losses with gradient penalty.
//!
//! The critic scores a latent sequence by its last valid hidden state. Its
//! loss drives `D(real)` up and `D(fake)` down; the penalty keeps the input
//! gradient norm near one on points interpolated between the two batches.
//! Because the penalty contains an inner gradient, minimizing it relies on
//! the tape's support for differentiating emitted gradient nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Activation, DenseLayer, Initializer, LstmCellParams, Module};
use crate::tensor::{grad, Tape, Tensor};

/// Sequence critic: one LSTM layer plus a scalar output head on the last
/// valid hidden state.
#[derive(Debug, Clone)]
pub struct CriticParams {
    pub lstm: LstmCellParams,
    pub out_head: DenseLayer,
}

impl CriticParams {
    pub fn new(latent_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut init = Initializer::xavier(seed);
        Ok(Self {
            lstm: init.lstm(latent_dim, hidden)?,
            out_head: init.dense(hidden, 1, Activation::Linear)?,
        })
    }

    /// Scalar score per sequence from the hidden state at each sequence's
    /// last valid step. Masked steps do not advance the recurrence.
    pub fn score(&self, z_seq: &Tensor, mask: &Tensor) -> Result<Tensor> {
        if z_seq.shape().len() != 3
            || mask.shape().len() != 2
            || mask.shape()[0] != z_seq.shape()[0]
            || mask.shape()[1] != z_seq.shape()[1]
        {
            return Err(Error::ShapeMismatch {
                op: "critic_score",
                left: z_seq.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let (b, tmax) = (z_seq.shape()[0], z_seq.shape()[1]);
        for i in 0..b {
            let row = &mask.values()[i * tmax..(i + 1) * tmax];
            if row.iter().all(|&m| m == 0.0) {
                return Err(Error::InvalidData("critic input has an empty sequence".into()));
            }
        }
        let hidden = self.lstm.hidden;
        let mut h = Tensor::zeros(&[b, hidden]);
        let mut c = Tensor::zeros(&[b, hidden]);
        for t in 0..tmax {
            let x_t = z_seq.slice_step(t)?;
            let m = mask.narrow_cols(t, 1)?;
            let (h2, c2) = self.lstm.step(&x_t, &h, &c)?;
            let keep = m.neg()?.add_scalar(1.0)?;
            h = h2.mul(&m)?.add(&h.mul(&keep)?)?;
            c = c2.mul(&m)?.add(&c.mul(&keep)?)?;
        }
        let b_dim = h.shape()[0];
        self.out_head.forward(&h)?.reshape(&[b_dim])
    }
}

impl Module for CriticParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.lstm.visit(&join(prefix, "lstm"), f);
        self.out_head.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.lstm.visit_mut(&join(prefix, "lstm"), f);
        self.out_head.visit_mut(&join(prefix, "out"), f);
    }

    fn watch(&self, tape: &Tape) -> Self {
        Self { lstm: self.lstm.watch(tape), out_head: self.out_head.watch(tape) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticReg {
    GradientPenalty,
    WeightClip,
}

/// Critic regularization: gradient penalty by default, with weight clipping
/// to `[-0.01, 0.01]` as the fallback mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpConfig {
    pub lambda: f64,
    pub mode: CriticReg,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self { lambda: 10.0, mode: CriticReg::GradientPenalty }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

pub const WEIGHT_CLIP_BOUND: f64 = 0.01;

/// Clamps every critic parameter into `[-bound, bound]`.
pub fn clip_weights(critic: &mut CriticParams, bound: f64) -> Result<()> {
    let mut err = None;
    critic.visit_mut("", &mut |_, t| {
        if err.is_some() {
            return;
        }
        let clipped: Vec<f64> = t.values().iter().map(|v| v.clamp(-bound, bound)).collect();
        if let Err(e) = t.set_values(clipped) {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Per-sequence convex combination `eps * real + (1 - eps) * fake`, one
/// epsilon per sequence broadcast over the step and latent axes.
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if real.shape() != fake.shape() || real.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            left: real.shape().to_vec(),
            right: fake.shape().to_vec(),
        });
    }
    let b = real.shape()[0];
    if eps.shape() != [b] {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            left: eps.shape().to_vec(),
            right: vec![b],
        });
    }
    if eps.values().iter().any(|&e| !(0.0..=1.0).contains(&e)) {
        return Err(Error::Domain {
            op: "interpolate",
            detail: "eps must lie in [0, 1]".into(),
        });
    }
    let e3 = eps.reshape(&[b, 1, 1])?;
    let one_minus = e3.neg()?.add_scalar(1.0)?;
    real.mul(&e3)?.add(&fake.mul(&one_minus)?)
}

fn tape_for(critic: &CriticParams, x_hat: &Tensor) -> Tape {
    x_hat
        .tape()
        .or_else(|| critic.lstm.w_ih.tape())
        .unwrap_or_default()
}

/// `lambda * mean_b (||∇_{x̂} D(x̂)||_2 - 1)^2`, the norm taken over each
/// sequence's valid `(step, latent)` entries. The result remains a function
/// of the critic parameters, so it can be minimized by the critic optimizer.
pub fn gradient_penalty(
    critic: &CriticParams,
    x_hat: &Tensor,
    mask: &Tensor,
    gp: &GpConfig,
) -> Result<Tensor> {
    gp.validate()?;
    let tape = tape_for(critic, x_hat);
    let x_w = match x_hat.tape() {
        Some(_) => x_hat.clone(),
        None => tape.watch(x_hat),
    };
    let scores = critic.score(&x_w, mask)?;
    let total = scores.sum_all()?;
    let g = grad(&total, &[&x_w])?.remove(0);
    let b = mask.shape()[0];
    let tmax = mask.shape()[1];
    let mask3 = mask.reshape(&[b, tmax, 1])?;
    let norms = g.mul(&mask3)?.l2_norm_axes(&[1, 2])?;
    norms.sub_scalar(1.0)?.square()?.mean_all()?.mul_scalar(gp.lambda)
}

/// Critic objective: `mean D(fake) - mean D(real)`, plus the gradient
/// penalty on the interpolate when the config says so. Minimized by the
/// critic; the penalty mask is the union of the two batch masks.
pub fn critic_loss(
    critic: &CriticParams,
    z_real: &Tensor,
    mask_real: &Tensor,
    z_fake: &Tensor,
    mask_fake: &Tensor,
    eps: &Tensor,
    gp: &GpConfig,
) -> Result<Tensor> {
    gp.validate()?;
    let d_real = critic.score(z_real, mask_real)?.mean_all()?;
    let d_fake = critic.score(z_fake, mask_fake)?.mean_all()?;
    let base = d_fake.sub(&d_real)?;
    match gp.mode {
        CriticReg::WeightClip => Ok(base),
        CriticReg::GradientPenalty => {
            let x_hat = interpolate(z_real, z_fake, eps)?;
            let union = mask_real
                .add(mask_fake)?
                .sub(&mask_real.mul(mask_fake)?)?;
            let penalty = gradient_penalty(critic, &x_hat, &union, gp)?;
            base.add(&penalty)
        }
    }
}

/// Diagnostic surrogate of the earth-mover distance: difference of the mean
/// critic scores of the two batches.
pub fn wasserstein_gap(
    critic: &CriticParams,
    z_a: &Tensor,
    mask_a: &Tensor,
    z_b: &Tensor,
    mask_b: &Tensor,
) -> Result<Tensor> {
    let a = critic.score(z_a, mask_a)?.mean_all()?;
    let b = critic.score(z_b, mask_b)?.mean_all()?;
    a.sub(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_critic(latent: usize, hidden: usize) -> CriticParams {
        CriticParams {
            lstm: LstmCellParams {
                w_ih: Tensor::zeros(&[4 * hidden, latent]),
                w_hh: Tensor::zeros(&[4 * hidden, hidden]),
                bias: Tensor::zeros(&[4 * hidden]),
                hidden,
            },
            out_head: DenseLayer {
                weight: Tensor::zeros(&[1, hidden]),
                bias: Tensor::zeros(&[1]),
                activation: Activation::Linear,
            },
        }
    }

    fn seq(b: usize, t: usize, d: usize, scale: f64) -> Tensor {
        let v: Vec<f64> = (0..b * t * d).map(|i| ((i as f64) * 0.13).sin() * scale).collect();
        Tensor::new(&[b, t, d], v).unwrap()
    }

    #[test]
    fn zero_critic_scores_zero() {
        let c = zero_critic(3, 4);
        let z = seq(2, 5, 3, 1.0);
        let mask = Tensor::ones(&[2, 5]);
        let s = c.score(&z, &mask).unwrap();
        assert_eq!(s.values(), &[0.0, 0.0]);
    }

    #[test]
    fn identical_inputs_same_score() {
        let c = CriticParams::new(3, 4, 11).unwrap();
        let z = seq(1, 5, 3, 1.0);
        let two = Tensor::new(&[2, 5, 3], [z.values(), z.values()].concat()).unwrap();
        let mask = Tensor::ones(&[2, 5]);
        let s = c.score(&two, &mask).unwrap();
        assert!((s.values()[0] - s.values()[1]).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_rejected() {
        let c = CriticParams::new(3, 4, 0).unwrap();
        let z = seq(1, 4, 3, 1.0);
        let mask = Tensor::zeros(&[1, 4]);
        assert!(c.score(&z, &mask).is_err());
    }

    #[test]
    fn score_ignores_masked_tail() {
        let c = CriticParams::new(2, 3, 5).unwrap();
        let z_short = seq(1, 3, 2, 1.0);
        let mut padded = z_short.values().to_vec();
        padded.extend([9.0, -9.0, 3.0, 3.0]); // garbage in padded steps
        let z_pad = Tensor::new(&[1, 5, 2], padded).unwrap();
        let m_short = Tensor::ones(&[1, 3]);
        let m_pad = Tensor::new(&[1, 5], vec![1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let a = c.score(&z_short, &m_short).unwrap();
        let b = c.score(&z_pad, &m_pad).unwrap();
        assert!((a.values()[0] - b.values()[0]).abs() < 1e-12);
    }

    #[test]
    fn interpolate_endpoints_and_symmetry() {
        let a = seq(2, 3, 2, 1.0);
        let b = seq(2, 3, 2, -0.5);
        let ones = Tensor::ones(&[2]);
        let zeros = Tensor::zeros(&[2]);
        assert_eq!(interpolate(&a, &b, &ones).unwrap().values(), a.values());
        assert_eq!(interpolate(&a, &b, &zeros).unwrap().values(), b.values());

        let neg = a.neg().unwrap();
        let half = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let mid = interpolate(&a, &neg, &half).unwrap();
        assert!(mid.values().iter().all(|&v| v.abs() < 1e-12));

        let bad = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
        assert!(interpolate(&a, &b, &bad).is_err());
    }

    #[test]
    fn constant_critic_penalty_is_lambda() {
        let c = zero_critic(2, 3);
        let x = seq(2, 4, 2, 1.0);
        let mask = Tensor::ones(&[2, 4]);
        let gp = GpConfig::default();
        let p = gradient_penalty(&c, &x, &mask, &gp).unwrap();
        assert!((p.item().unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn penalty_matches_two_pass_oracle() {
        let c = CriticParams::new(2, 3, 21).unwrap();
        let x = seq(3, 4, 2, 0.7);
        let mask = Tensor::new(&[3, 4], vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let gp = GpConfig::default();
        let p = gradient_penalty(&c, &x, &mask, &gp).unwrap().item().unwrap();

        // oracle: explicit grad, then the norm arithmetic on raw values
        let tape = Tape::new();
        let xw = tape.watch(&x);
        let s = c.score(&xw, &mask).unwrap().sum_all().unwrap();
        let g = grad(&s, &[&xw]).unwrap().remove(0);
        let mut expect = 0.0;
        for i in 0..3 {
            let mut ss = 0.0;
            for t in 0..4 {
                if mask.values()[i * 4 + t] == 0.0 {
                    continue;
                }
                for j in 0..2 {
                    let v = g.values()[i * 8 + t * 2 + j];
                    ss += v * v;
                }
            }
            let norm = (ss + 1e-18).sqrt();
            expect += (norm - 1.0) * (norm - 1.0);
        }
        expect = expect / 3.0 * 10.0;
        assert!((p - expect).abs() < 1e-9, "{p} vs {expect}");
    }

    #[test]
    fn penalty_is_nonnegative() {
        for seed in 0..5 {
            let c = CriticParams::new(2, 3, seed).unwrap();
            let x = seq(2, 3, 2, seed as f64 * 0.3 + 0.1);
            let mask = Tensor::ones(&[2, 3]);
            let p = gradient_penalty(&c, &x, &mask, &GpConfig::default()).unwrap();
            assert!(p.item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn critic_loss_known_values() {
        let c = zero_critic(2, 3);
        let z = seq(2, 3, 2, 0.5);
        let mask = Tensor::ones(&[2, 3]);
        let eps = Tensor::new(&[2], vec![0.3, 0.8]).unwrap();
        let gp = GpConfig::default();
        let loss = critic_loss(&c, &z, &mask, &z, &mask, &eps, &gp).unwrap();
        assert!((loss.item().unwrap() - 10.0).abs() < 1e-6);

        let no_pen = GpConfig { lambda: 0.0, ..GpConfig::default() };
        let loss = critic_loss(&c, &z, &mask, &z, &mask, &eps, &no_pen).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn critic_loss_antisymmetric_without_penalty() {
        let c = CriticParams::new(2, 4, 3).unwrap();
        let a = seq(2, 3, 2, 1.0);
        let b = seq(2, 3, 2, -0.7);
        let mask = Tensor::ones(&[2, 3]);
        let eps = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let cfg = GpConfig { lambda: 0.0, ..GpConfig::default() };
        let ab = critic_loss(&c, &a, &mask, &b, &mask, &eps, &cfg).unwrap().item().unwrap();
        let ba = critic_loss(&c, &b, &mask, &a, &mask, &eps, &cfg).unwrap().item().unwrap();
        assert!((ab + ba).abs() < 1e-12);
    }

    #[test]
    fn gap_identities() {
        let c = CriticParams::new(2, 3, 9).unwrap();
        let a = seq(2, 3, 2, 1.0);
        let b = seq(2, 3, 2, 0.2);
        let mask = Tensor::ones(&[2, 3]);
        let same = wasserstein_gap(&c, &a, &mask, &a, &mask).unwrap();
        assert!(same.item().unwrap().abs() < 1e-12);
        let ab = wasserstein_gap(&c, &a, &mask, &b, &mask).unwrap().item().unwrap();
        let ba = wasserstein_gap(&c, &b, &mask, &a, &mask).unwrap().item().unwrap();
        assert!((ab + ba).abs() < 1e-12);

        let sa = c.score(&a, &mask).unwrap();
        let sb = c.score(&b, &mask).unwrap();
        let manual = sa.values().iter().sum::<f64>() / 2.0 - sb.values().iter().sum::<f64>() / 2.0;
        assert!((ab - manual).abs() < 1e-12);
    }

    #[test]
    fn one_sgd_step_decreases_critic_loss() {
        let mut c = CriticParams::new(2, 3, 17).unwrap();
        let a = seq(3, 4, 2, 1.2);
        let b = seq(3, 4, 2, -0.4);
        let mask = Tensor::ones(&[3, 4]);
        let eps = Tensor::new(&[3], vec![0.2, 0.5, 0.9]).unwrap();
        let gp = GpConfig::default();

        let tape = Tape::new();
        let cw = c.watch(&tape);
        let loss = critic_loss(&cw, &a, &mask, &b, &mask, &eps, &gp).unwrap();
        let before = loss.item().unwrap();
        let params = crate::nn::param_tensors(&cw);
        let refs: Vec<&Tensor> = params.iter().collect();
        let grads = grad(&loss, &refs).unwrap();

        let mut gi = 0;
        c.visit_mut("", &mut |_, t| {
            let updated: Vec<f64> = t
                .values()
                .iter()
                .zip(grads[gi].values())
                .map(|(p, g)| p - 1e-6 * g)
                .collect();
            t.set_values(updated).unwrap();
            gi += 1;
        });
        let after = critic_loss(&c, &a, &mask, &b, &mask, &eps, &gp).unwrap().item().unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn weight_clip_bounds_all_params() {
        let mut c = CriticParams::new(2, 3, 1).unwrap();
        clip_weights(&mut c, WEIGHT_CLIP_BOUND).unwrap();
        c.visit("", &mut |_, t| {
            assert!(t.values().iter().all(|v| v.abs() <= WEIGHT_CLIP_BOUND));
        });
    }
}
