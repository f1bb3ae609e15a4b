use super::{AduState, VradaState, VradsState, VradsVariant};
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::DenseLayer;
use crate::tensor::Tensor;
use crate::vrnn::{bce_loss, LatentMode};

/// Positive-class probability from a linear head, strictly inside (0, 1).
pub fn classify_with(head: &DenseLayer, z_last: &Tensor) -> Result<Tensor> {
    let b = z_last.shape()[0];
    head.forward(z_last)?.sigmoid()?.reshape(&[b])?.clamp(1e-12, 1.0 - 1e-12)
}

/// Target-side unification objective: the target reconstruction bound plus
/// the generator-side adversarial term. The critic scores the target latent
/// sequence; the encoder opposes the critic, so the adversarial term is the
/// negated mean score.
pub fn adu_unification_loss(
    s: &AduState,
    target_batch: &SequenceBatch,
    mode: &LatentMode,
) -> Result<Tensor> {
    let run = s.target.run_sequence(target_batch, mode)?;
    let elbo = run.per_seq_loss.mean_all()?;
    let adv = s
        .critic
        .score(&run.z_seq, &target_batch.step_mask)?
        .mean_all()?
        .neg()?;
    elbo.add(&adv.mul_scalar(s.alpha)?)
}

/// Cross-entropy of the shared classifier on both domains: frozen source
/// latents for the source batch, current target latents for the target batch.
pub fn adu_classifier_loss(
    s: &AduState,
    source_batch: &SequenceBatch,
    target_batch: &SequenceBatch,
    mode: &LatentMode,
) -> Result<Tensor> {
    let (_, z_src) = s.source.encode_sequence(source_batch, mode)?;
    let (_, z_tgt) = s.target.encode_sequence(target_batch, mode)?;
    let loss_src = bce_loss(&classify_with(&s.classifier, &z_src)?, &source_batch.labels)?;
    let loss_tgt = bce_loss(&classify_with(&s.classifier, &z_tgt)?, &target_batch.labels)?;
    loss_src.add(&loss_tgt)
}

/// Squared-Frobenius orthogonality penalty between global and local last-step
/// latents: `||Z1g^T Z1l||_F^2 + ||Z2g^T Z2l||_F^2`.
pub fn diff_loss(zg1: &Tensor, zl1: &Tensor, zg2: &Tensor, zl2: &Tensor) -> Result<Tensor> {
    fn term(zg: &Tensor, zl: &Tensor) -> Result<Tensor> {
        if zg.shape().len() != 2 || zg.shape() != zl.shape() {
            return Err(Error::ShapeMismatch {
                op: "diff_loss",
                left: zg.shape().to_vec(),
                right: zl.shape().to_vec(),
            });
        }
        zg.t()?.matmul(zl)?.square()?.sum_all()
    }
    term(zg1, zl1)?.add(&term(zg2, zl2)?)
}

/// The separation objective: local reconstruction bounds (released variant
/// only), global reconstruction bounds on both domains, the generator-side
/// adversarial term, and the weighted difference loss.
pub fn vrads_separation_loss(
    s: &VradsState,
    batch_1: &SequenceBatch,
    batch_2: &SequenceBatch,
    mode: &LatentMode,
) -> Result<Tensor> {
    let g1 = s.global.run_sequence(batch_1, mode)?;
    let g2 = s.global.run_sequence(batch_2, mode)?;
    let l1 = s.local_1.run_sequence(batch_1, mode)?;
    let l2 = s.local_2.run_sequence(batch_2, mode)?;

    let mut loss = g1.per_seq_loss.mean_all()?.add(&g2.per_seq_loss.mean_all()?)?;
    if s.variant == VradsVariant::Released {
        let locals = l1.per_seq_loss.mean_all()?.add(&l2.per_seq_loss.mean_all()?)?;
        loss = loss.add(&locals)?;
    }
    let adv = s
        .critic
        .score(&g1.z_seq, &batch_1.step_mask)?
        .mean_all()?
        .sub(&s.critic.score(&g2.z_seq, &batch_2.step_mask)?.mean_all()?)?;
    loss = loss.add(&adv.mul_scalar(s.alpha)?)?;
    let diff = diff_loss(&g1.z_last, &l1.z_last, &g2.z_last, &l2.z_last)?;
    loss.add(&diff.mul_scalar(s.beta)?)
}

/// Cross-entropy of the shared classifier on the global last-step latents of
/// both domains.
pub fn vrads_classifier_loss(
    s: &VradsState,
    batch_1: &SequenceBatch,
    batch_2: &SequenceBatch,
    mode: &LatentMode,
) -> Result<Tensor> {
    let (_, z1) = s.global.encode_sequence(batch_1, mode)?;
    let (_, z2) = s.global.encode_sequence(batch_2, mode)?;
    let l1 = bce_loss(&classify_with(&s.classifier, &z1)?, &batch_1.labels)?;
    let l2 = bce_loss(&classify_with(&s.classifier, &z2)?, &batch_2.labels)?;
    l1.add(&l2)
}

/// Shared-VRNN objective: global reconstruction bounds plus the adversarial
/// term (the separation objective with no locals and no difference loss).
pub fn vrada_loss(
    s: &VradaState,
    batch_1: &SequenceBatch,
    batch_2: &SequenceBatch,
    mode: &LatentMode,
) -> Result<Tensor> {
    let g1 = s.global.run_sequence(batch_1, mode)?;
    let g2 = s.global.run_sequence(batch_2, mode)?;
    let loss = g1.per_seq_loss.mean_all()?.add(&g2.per_seq_loss.mean_all()?)?;
    let adv = s
        .critic
        .score(&g1.z_seq, &batch_1.step_mask)?
        .mean_all()?
        .sub(&s.critic.score(&g2.z_seq, &batch_2.step_mask)?.mean_all()?)?;
    loss.add(&adv.mul_scalar(s.alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::CriticParams;
    use crate::data::{Cell, PreparedVisit};
    use crate::nn::{Activation, Initializer};
    use crate::vrnn::{NoisePlan, VrnnConfig, VrnnParams};

    fn small_cfg() -> VrnnConfig {
        VrnnConfig { input_dim: 4, value_dim: 2, hidden: 3, latent: 3, phi_width: 3 }
    }

    fn visit(id: u64, domain: u8, len: usize, label: f64) -> PreparedVisit {
        PreparedVisit {
            visit_id: id,
            domain,
            label,
            subgroup: 0,
            cells: (0..len)
                .map(|t| {
                    vec![
                        Cell::Observed((t as f64 + id as f64 * 0.3).cos()),
                        Cell::Observed((t as f64 * 0.5).sin()),
                    ]
                })
                .collect(),
        }
    }

    fn batch(domain: u8, n: usize, len: usize) -> SequenceBatch {
        let visits: Vec<PreparedVisit> =
            (0..n).map(|i| visit(i as u64, domain, len, (i % 2) as f64)).collect();
        let refs: Vec<&PreparedVisit> = visits.iter().collect();
        crate::data::make_batch(&refs).unwrap()
    }

    fn adu_state(seed: u64, alpha: f64) -> AduState {
        let source = VrnnParams::new(small_cfg(), seed).unwrap();
        let mut target = source.clone();
        target.phi_dec = source.phi_dec.clone();
        AduState {
            source: source.clone(),
            target,
            critic: CriticParams::new(3, 4, seed + 1).unwrap(),
            classifier: Initializer::xavier(seed + 2).dense(3, 1, Activation::Linear).unwrap(),
            alpha,
            source_domain: 0,
        }
    }

    fn vrads_state(seed: u64, alpha: f64, beta: f64, variant: VradsVariant) -> VradsState {
        VradsState {
            local_1: VrnnParams::new(small_cfg(), seed).unwrap(),
            local_2: VrnnParams::new(small_cfg(), seed + 1).unwrap(),
            global: VrnnParams::new(small_cfg(), seed + 2).unwrap(),
            critic: CriticParams::new(3, 4, seed + 3).unwrap(),
            classifier: Initializer::xavier(seed + 4).dense(3, 1, Activation::Linear).unwrap(),
            alpha,
            beta,
            variant,
        }
    }

    #[test]
    fn unification_reduces_to_elbo_at_alpha_zero() {
        let s = adu_state(3, 0.0);
        let b = batch(1, 3, 4);
        let mode = LatentMode::Sample(NoisePlan::new(9));
        let unif = adu_unification_loss(&s, &b, &mode).unwrap().item().unwrap();
        let elbo = s.target.elbo_loss(&b, &mode).unwrap().item().unwrap();
        assert_eq!(unif, elbo);
    }

    #[test]
    fn unification_with_zero_critic_drops_adversarial_term() {
        let mut s = adu_state(5, 2.5);
        crate::nn::Module::visit_mut(&mut s.critic, "", &mut |_, t| {
            let n = t.numel();
            t.set_values(vec![0.0; n]).unwrap();
        });
        let b = batch(1, 2, 3);
        let mode = LatentMode::Mean;
        let unif = adu_unification_loss(&s, &b, &mode).unwrap().item().unwrap();
        let elbo = s.target.elbo_loss(&b, &mode).unwrap().item().unwrap();
        assert!((unif - elbo).abs() < 1e-12);
    }

    #[test]
    fn unification_matches_recomposition_oracle() {
        let s = adu_state(11, 0.7);
        let b = batch(1, 3, 4);
        let mode = LatentMode::Sample(NoisePlan::new(4));
        let unif = adu_unification_loss(&s, &b, &mode).unwrap().item().unwrap();

        let elbo = s.target.elbo_loss(&b, &mode).unwrap().item().unwrap();
        let (z_seq, _) = s.target.encode_sequence(&b, &mode).unwrap();
        let adv = -s
            .critic
            .score(&z_seq, &b.step_mask)
            .unwrap()
            .mean_all()
            .unwrap()
            .item()
            .unwrap();
        assert!((unif - (elbo + 0.7 * adv)).abs() < 1e-10);
    }

    #[test]
    fn adu_classifier_loss_cases() {
        let s = adu_state(2, 1.0);
        let bs = batch(0, 4, 3);
        let bt = batch(1, 4, 3);
        let mode = LatentMode::Mean;
        let loss = adu_classifier_loss(&s, &bs, &bt, &mode).unwrap().item().unwrap();

        // recomposition oracle
        let (_, zs) = s.source.encode_sequence(&bs, &mode).unwrap();
        let (_, zt) = s.target.encode_sequence(&bt, &mode).unwrap();
        let a = bce_loss(&classify_with(&s.classifier, &zs).unwrap(), &bs.labels)
            .unwrap()
            .item()
            .unwrap();
        let b = bce_loss(&classify_with(&s.classifier, &zt).unwrap(), &bt.labels)
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - (a + b)).abs() < 1e-12);

        // uniform 0.5 predictions on both domains -> 2 ln 2
        let mut z = s.clone();
        z.classifier.weight.set_values(vec![0.0; 3]).unwrap();
        z.classifier.bias.set_values(vec![0.0]).unwrap();
        let loss = adu_classifier_loss(&z, &bs, &bt, &mode).unwrap().item().unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn diff_loss_orthogonal_and_identity() {
        // rows of zg live on e1, rows of zl on e2: exactly orthogonal
        let zg = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let zl = Tensor::new(&[2, 3], vec![0.0, 3.0, 0.0, 0.0, -1.0, 0.0]).unwrap();
        let zero = diff_loss(&zg, &zl, &zg, &zl).unwrap().item().unwrap();
        assert!(zero.abs() < 1e-12);

        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::zeros(&[3, 3]);
        let d = diff_loss(&eye, &eye, &z, &z).unwrap().item().unwrap();
        assert!((d - 3.0).abs() < 1e-12);
    }

    #[test]
    fn diff_loss_matches_double_loop_oracle_and_scales() {
        let zg = Tensor::new(&[2, 3], vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4]).unwrap();
        let zl = Tensor::new(&[2, 3], vec![1.3, 0.4, -0.2, -0.8, 0.6, 0.5]).unwrap();
        let got = diff_loss(&zg, &zl, &zg, &zl).unwrap().item().unwrap();
        // explicit double loop over the 3x3 product matrix
        let mut one = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for r in 0..2 {
                    s += zg.values()[r * 3 + a] * zl.values()[r * 3 + b];
                }
                one += s * s;
            }
        }
        assert!((got - 2.0 * one).abs() < 1e-10);

        // Frobenius homogeneity: scaling zg by c scales the loss by c^2
        let c = 1.7;
        let zg_scaled = zg.mul_scalar(c).unwrap();
        let scaled = diff_loss(&zg_scaled, &zl, &zg_scaled, &zl).unwrap().item().unwrap();
        assert!((scaled - c * c * got).abs() < 1e-9);
    }

    #[test]
    fn separation_reduces_to_global_elbo() {
        let s = vrads_state(7, 0.0, 0.0, VradsVariant::Fixed);
        let b1 = batch(0, 2, 3);
        let b2 = batch(1, 2, 4);
        let mode = LatentMode::Mean;
        let sep = vrads_separation_loss(&s, &b1, &b2, &mode).unwrap().item().unwrap();
        let g = s.global.elbo_loss(&b1, &mode).unwrap().item().unwrap()
            + s.global.elbo_loss(&b2, &mode).unwrap().item().unwrap();
        assert!((sep - g).abs() < 1e-12);
    }

    #[test]
    fn fixed_vs_released_differ_by_local_terms() {
        let fixed = vrads_state(9, 0.4, 0.2, VradsVariant::Fixed);
        let mut released = fixed.clone();
        released.variant = VradsVariant::Released;
        let b1 = batch(0, 3, 4);
        let b2 = batch(1, 3, 4);
        let mode = LatentMode::Sample(NoisePlan::new(1));
        let lf = vrads_separation_loss(&fixed, &b1, &b2, &mode).unwrap().item().unwrap();
        let lr = vrads_separation_loss(&released, &b1, &b2, &mode).unwrap().item().unwrap();
        let locals = fixed.local_1.elbo_loss(&b1, &mode).unwrap().item().unwrap()
            + fixed.local_2.elbo_loss(&b2, &mode).unwrap().item().unwrap();
        assert!((lr - lf - locals).abs() < 1e-10);
    }

    #[test]
    fn separation_matches_four_term_oracle() {
        let s = vrads_state(13, 0.6, 0.25, VradsVariant::Released);
        let b1 = batch(0, 2, 3);
        let b2 = batch(1, 2, 3);
        let mode = LatentMode::Sample(NoisePlan::new(8));
        let got = vrads_separation_loss(&s, &b1, &b2, &mode).unwrap().item().unwrap();

        let locals = s.local_1.elbo_loss(&b1, &mode).unwrap().item().unwrap()
            + s.local_2.elbo_loss(&b2, &mode).unwrap().item().unwrap();
        let global = s.global.elbo_loss(&b1, &mode).unwrap().item().unwrap()
            + s.global.elbo_loss(&b2, &mode).unwrap().item().unwrap();
        let (zg1_seq, zg1) = s.global.encode_sequence(&b1, &mode).unwrap();
        let (zg2_seq, zg2) = s.global.encode_sequence(&b2, &mode).unwrap();
        let adv = s.critic.score(&zg1_seq, &b1.step_mask).unwrap().mean_all().unwrap().item().unwrap()
            - s.critic.score(&zg2_seq, &b2.step_mask).unwrap().mean_all().unwrap().item().unwrap();
        let (_, zl1) = s.local_1.encode_sequence(&b1, &mode).unwrap();
        let (_, zl2) = s.local_2.encode_sequence(&b2, &mode).unwrap();
        let diff = diff_loss(&zg1, &zl1, &zg2, &zl2).unwrap().item().unwrap();
        let expect = locals + global + 0.6 * adv + 0.25 * diff;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn vrada_equals_locals_free_separation() {
        let s = vrads_state(15, 0.8, 0.0, VradsVariant::Fixed);
        let vrada = VradaState {
            global: s.global.clone(),
            critic: s.critic.clone(),
            classifier: s.classifier.clone(),
            alpha: s.alpha,
        };
        let b1 = batch(0, 2, 4);
        let b2 = batch(1, 2, 4);
        let mode = LatentMode::Mean;
        let a = vrada_loss(&vrada, &b1, &b2, &mode).unwrap().item().unwrap();
        let b = vrads_separation_loss(&s, &b1, &b2, &mode).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn vrads_classifier_matches_two_term_oracle() {
        let s = vrads_state(17, 1.0, 0.1, VradsVariant::Released);
        let b1 = batch(0, 4, 3);
        let b2 = batch(1, 4, 3);
        let mode = LatentMode::Mean;
        let got = vrads_classifier_loss(&s, &b1, &b2, &mode).unwrap().item().unwrap();
        let (_, z1) = s.global.encode_sequence(&b1, &mode).unwrap();
        let (_, z2) = s.global.encode_sequence(&b2, &mode).unwrap();
        let e1 = bce_loss(&classify_with(&s.classifier, &z1).unwrap(), &b1.labels)
            .unwrap()
            .item()
            .unwrap();
        let e2 = bce_loss(&classify_with(&s.classifier, &z2).unwrap(), &b2.labels)
            .unwrap()
            .item()
            .unwrap();
        assert!((got - (e1 + e2)).abs() < 1e-12);
    }
}
