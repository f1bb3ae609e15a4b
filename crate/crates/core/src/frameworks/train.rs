use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::*;
use super::{AduState, TrainVariant, TrainedModel, VradaState, VradsState, VradsVariant, CRITIC_HIDDEN};
use crate::adversarial::{clip_weights, critic_loss, CriticParams, CriticReg, WEIGHT_CLIP_BOUND};
use crate::data::{batch_all, PreparedVisit, SequenceBatch};
use crate::error::{Error, Result};
use crate::nn::{Activation, Initializer, Module};
use crate::tensor::{grad, Tape, Tensor};
use crate::trainer::{
    clip_global_norm, seeds, substream, update_order, Group, NAdam, TrainConfig,
};
use crate::vrnn::{LatentMode, NoisePlan, ParamScope, VrnnConfig, VrnnParams};

/// The three optimizers of the alternating schedule.
struct Opts {
    dis: NAdam,
    vrnn: NAdam,
    clf: NAdam,
}

impl Opts {
    fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            dis: NAdam::new(cfg.lr_dis)?,
            vrnn: NAdam::new(cfg.lr_vrnn)?,
            clf: NAdam::new(cfg.lr_clf)?,
        })
    }
}

/// Training/validation visits for one job. Single-domain jobs leave the
/// second slots empty; for unification jobs slot 1 is the source domain and
/// slot 2 the target.
pub struct JobData<'a> {
    pub train_1: Vec<&'a PreparedVisit>,
    pub train_2: Vec<&'a PreparedVisit>,
    pub val_1: Vec<&'a PreparedVisit>,
    pub val_2: Vec<&'a PreparedVisit>,
}

impl<'a> JobData<'a> {
    pub fn single(train: Vec<&'a PreparedVisit>, val: Vec<&'a PreparedVisit>) -> Self {
        Self { train_1: train, train_2: Vec::new(), val_1: val, val_2: Vec::new() }
    }
}

/// A trainable system together with its update rules.
pub enum JobModel {
    Single(VrnnParams),
    Adu(AduState),
    Vrada(VradaState),
    Vrads(VradsState),
}

/// Summary of a finished training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainRecord {
    pub val_history: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainRecord {
    fn empty() -> Self {
        Self {
            val_history: Vec::new(),
            best_epoch: 0,
            best_val_loss: f64::NAN,
            epochs_run: 0,
            stopped_early: false,
        }
    }
}

struct Best {
    epoch: usize,
    val_loss: f64,
    snapshot: Vec<(String, Tensor)>,
}

/// Epoch-level training driver with periodic evaluation, best-checkpoint
/// tracking, patience-based stopping, and serializable state for resuming.
pub struct TrainJob {
    pub model: JobModel,
    pub cfg: TrainConfig,
    opts: Opts,
    pub next_epoch: usize,
    pub history: Vec<(usize, f64)>,
    best: Option<Best>,
    stale_evals: usize,
    pub stopped_early: bool,
}

impl TrainJob {
    pub fn new(model: JobModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opts = Opts::new(&cfg)?;
        Ok(Self {
            model,
            cfg,
            opts,
            next_epoch: 0,
            history: Vec::new(),
            best: None,
            stale_evals: 0,
            stopped_early: false,
        })
    }

    pub fn run_epoch(&mut self, data: &JobData) -> Result<()> {
        let e = self.next_epoch;
        let cfg = &self.cfg;
        let plan = NoisePlan::new(substream(cfg.seed, seeds::NOISE, e as u64));
        match &mut self.model {
            JobModel::Single(m) => {
                let batches = batch_all(
                    &data.train_1,
                    cfg.batch_size,
                    substream(cfg.seed, seeds::SHUFFLE_D1, e as u64),
                )?;
                let order = update_order(false, e, cfg.rotate_order);
                for b in &batches {
                    for g in &order {
                        update_single(m, &mut self.opts, cfg, *g, b, &plan)?;
                    }
                }
            }
            model => {
                let b1s = batch_all(
                    &data.train_1,
                    cfg.batch_size,
                    substream(cfg.seed, seeds::SHUFFLE_D1, e as u64),
                )?;
                let b2s = batch_all(
                    &data.train_2,
                    cfg.batch_size,
                    substream(cfg.seed, seeds::SHUFFLE_D2, e as u64),
                )?;
                let n = b1s.len().min(b2s.len());
                let order = update_order(true, e, cfg.rotate_order);
                let epoch_eps = substream(cfg.seed, seeds::EPS, e as u64);
                for i in 0..n {
                    let eps_seed = substream(epoch_eps, seeds::EPS, i as u64);
                    for g in &order {
                        match model {
                            JobModel::Adu(s) => {
                                update_adu(s, &mut self.opts, cfg, *g, &b1s[i], &b2s[i], &plan, eps_seed)?
                            }
                            JobModel::Vrada(s) => {
                                update_vrada(s, &mut self.opts, cfg, *g, &b1s[i], &b2s[i], &plan, eps_seed)?
                            }
                            JobModel::Vrads(s) => {
                                update_vrads(s, &mut self.opts, cfg, *g, &b1s[i], &b2s[i], &plan, eps_seed)?
                            }
                            JobModel::Single(_) => unreachable!(),
                        }
                    }
                }
            }
        }
        self.next_epoch += 1;
        Ok(())
    }

    /// Evaluates validation loss, records it, and keeps the best checkpoint.
    pub fn eval_now(&mut self, data: &JobData) -> Result<f64> {
        let loss = self.model.val_loss(data, &self.cfg)?;
        self.history.push((self.next_epoch, loss));
        let improved = self.best.as_ref().map(|b| loss < b.val_loss).unwrap_or(true);
        if improved {
            self.best = Some(Best {
                epoch: self.next_epoch,
                val_loss: loss,
                snapshot: self.model.snapshot(),
            });
            self.stale_evals = 0;
        } else {
            self.stale_evals += 1;
        }
        Ok(loss)
    }

    pub fn should_stop(&self) -> bool {
        self.cfg.patience > 0 && self.stale_evals >= self.cfg.patience
    }

    /// Runs epochs until the budget is exhausted or patience runs out,
    /// evaluating every `eval_every` epochs and at the end.
    pub fn train(&mut self, data: &JobData) -> Result<()> {
        while self.next_epoch < self.cfg.epochs {
            self.run_epoch(data)?;
            if self.next_epoch % self.cfg.eval_every == 0 || self.next_epoch == self.cfg.epochs {
                self.eval_now(data)?;
                if self.should_stop() {
                    self.stopped_early = true;
                    break;
                }
            }
        }
        Ok(())
    }

    /// Restores the best checkpoint and returns the trained model.
    pub fn finish(mut self) -> Result<(TrainedModel, TrainRecord)> {
        let record = match &self.best {
            Some(b) => TrainRecord {
                val_history: self.history.clone(),
                best_epoch: b.epoch,
                best_val_loss: b.val_loss,
                epochs_run: self.next_epoch,
                stopped_early: self.stopped_early,
            },
            None => TrainRecord { epochs_run: self.next_epoch, ..TrainRecord::empty() },
        };
        if let Some(b) = self.best.take() {
            self.model.restore(&b.snapshot)?;
        }
        Ok((self.model.into_trained(), record))
    }

    /// Serializes everything needed to resume: parameters, optimizer
    /// moments, epoch counter, history, and the best checkpoint so far.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.model.visit_all(&mut |n, t| out.push((format!("model.{n}"), t.clone())));
        out.extend(self.opts.dis.state_tensors("opt.dis"));
        out.extend(self.opts.vrnn.state_tensors("opt.vrnn"));
        out.extend(self.opts.clf.state_tensors("opt.clf"));
        let meta = vec![
            self.next_epoch as f64,
            self.stale_evals as f64,
            if self.stopped_early { 1.0 } else { 0.0 },
        ];
        out.push(("meta.counters".into(), Tensor::new(&[3], meta).expect("finite")));
        let mut hist = Vec::with_capacity(self.history.len() * 2);
        for &(e, l) in &self.history {
            hist.push(e as f64);
            hist.push(l);
        }
        out.push((
            "meta.history".into(),
            Tensor::new(&[self.history.len(), 2], hist).expect("finite"),
        ));
        if let Some(b) = &self.best {
            out.push((
                "meta.best".into(),
                Tensor::new(&[2], vec![b.epoch as f64, b.val_loss]).expect("finite"),
            ));
            for (n, t) in &b.snapshot {
                out.push((format!("best.{n}"), t.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let model_entries: Vec<(String, Tensor)> = entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("model.").map(|s| (s.to_string(), t.clone())))
            .collect();
        self.model.restore_all(&model_entries)?;
        self.opts.dis.load_state("opt.dis", entries)?;
        self.opts.vrnn.load_state("opt.vrnn", entries)?;
        self.opts.clf.load_state("opt.clf", entries)?;
        let counters = entries
            .iter()
            .find(|(n, _)| n == "meta.counters")
            .ok_or_else(|| Error::Checkpoint("missing meta.counters".into()))?;
        self.next_epoch = counters.1.values()[0] as usize;
        self.stale_evals = counters.1.values()[1] as usize;
        self.stopped_early = counters.1.values()[2] != 0.0;
        if let Some((_, h)) = entries.iter().find(|(n, _)| n == "meta.history") {
            self.history = h
                .values()
                .chunks(2)
                .map(|c| (c[0] as usize, c[1]))
                .collect();
        }
        if let Some((_, b)) = entries.iter().find(|(n, _)| n == "meta.best") {
            let snapshot: Vec<(String, Tensor)> = entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix("best.").map(|s| (s.to_string(), t.clone())))
                .collect();
            self.best = Some(Best {
                epoch: b.values()[0] as usize,
                val_loss: b.values()[1],
                snapshot,
            });
        }
        Ok(())
    }
}

impl JobModel {
    pub fn into_trained(self) -> TrainedModel {
        match self {
            JobModel::Single(m) => TrainedModel::Single(m),
            JobModel::Adu(s) => TrainedModel::Adu(s),
            JobModel::Vrada(s) => TrainedModel::Vrada(s),
            JobModel::Vrads(s) => TrainedModel::Vrads(s),
        }
    }

    /// Trainable components only; what best-checkpoints capture.
    fn visit_trainable(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            JobModel::Single(m) => m.visit("vrnn", f),
            JobModel::Adu(s) => {
                s.target.visit_scope(ParamScope::Encoder, "target", f);
                s.critic.visit("critic", f);
                s.classifier.visit("clf", f);
            }
            JobModel::Vrada(s) => {
                s.global.visit("global", f);
                s.critic.visit("critic", f);
                s.classifier.visit("clf", f);
            }
            JobModel::Vrads(s) => {
                s.global.visit("global", f);
                if s.variant == VradsVariant::Released {
                    s.local_1.visit_scope(ParamScope::Encoder, "local1", f);
                    s.local_1.visit_scope(ParamScope::Decoder, "local1", f);
                    s.local_2.visit_scope(ParamScope::Encoder, "local2", f);
                    s.local_2.visit_scope(ParamScope::Decoder, "local2", f);
                }
                s.critic.visit("critic", f);
                s.classifier.visit("clf", f);
            }
        }
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            JobModel::Single(m) => m.visit_mut("vrnn", f),
            JobModel::Adu(s) => {
                s.target.visit_scope_mut(ParamScope::Encoder, "target", f);
                s.critic.visit_mut("critic", f);
                s.classifier.visit_mut("clf", f);
            }
            JobModel::Vrada(s) => {
                s.global.visit_mut("global", f);
                s.critic.visit_mut("critic", f);
                s.classifier.visit_mut("clf", f);
            }
            JobModel::Vrads(s) => {
                s.global.visit_mut("global", f);
                if s.variant == VradsVariant::Released {
                    s.local_1.visit_scope_mut(ParamScope::Encoder, "local1", f);
                    s.local_1.visit_scope_mut(ParamScope::Decoder, "local1", f);
                    s.local_2.visit_scope_mut(ParamScope::Encoder, "local2", f);
                    s.local_2.visit_scope_mut(ParamScope::Decoder, "local2", f);
                }
                s.critic.visit_mut("critic", f);
                s.classifier.visit_mut("clf", f);
            }
        }
    }

    /// Every component including frozen ones; what resume state captures.
    fn visit_all(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            JobModel::Single(m) => m.visit("vrnn", f),
            JobModel::Adu(s) => {
                s.source.visit("source", f);
                s.target.visit("target", f);
                s.critic.visit("critic", f);
                s.classifier.visit("clf", f);
            }
            JobModel::Vrada(s) => {
                s.global.visit("global", f);
                s.critic.visit("critic", f);
                s.classifier.visit("clf", f);
            }
            JobModel::Vrads(s) => {
                s.local_1.visit("local1", f);
                s.local_2.visit("local2", f);
                s.global.visit("global", f);
                s.critic.visit("critic", f);
                s.classifier.visit("clf", f);
            }
        }
    }

    fn visit_all_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            JobModel::Single(m) => m.visit_mut("vrnn", f),
            JobModel::Adu(s) => {
                s.source.visit_mut("source", f);
                s.target.visit_mut("target", f);
                s.critic.visit_mut("critic", f);
                s.classifier.visit_mut("clf", f);
            }
            JobModel::Vrada(s) => {
                s.global.visit_mut("global", f);
                s.critic.visit_mut("critic", f);
                s.classifier.visit_mut("clf", f);
            }
            JobModel::Vrads(s) => {
                s.local_1.visit_mut("local1", f);
                s.local_2.visit_mut("local2", f);
                s.global.visit_mut("global", f);
                s.critic.visit_mut("critic", f);
                s.classifier.visit_mut("clf", f);
            }
        }
    }

    fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_trainable(&mut |n, t| out.push((n.to_string(), t.detached())));
        out
    }

    fn restore(&mut self, snapshot: &[(String, Tensor)]) -> Result<()> {
        restore_by_name(snapshot, |f| self.visit_trainable_mut(f))
    }

    fn restore_all(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        restore_by_name(entries, |f| self.visit_all_mut(f))
    }

    fn val_loss(&self, data: &JobData, cfg: &TrainConfig) -> Result<f64> {
        let mode = LatentMode::Mean;
        match self {
            JobModel::Single(m) => eval_batched(&data.val_1, cfg.batch_size, |b| {
                let run = m.run_sequence(b, &mode)?;
                let elbo = run.per_seq_loss.mean_all()?.item()?;
                let probs = m.classify(&run.z_last)?;
                let clf = crate::vrnn::bce_loss(&probs, &b.labels)?.item()?;
                Ok(elbo + clf)
            }),
            JobModel::Adu(s) => {
                let recon = eval_batched(&data.val_2, cfg.batch_size, |b| {
                    s.target.elbo_loss(b, &mode)?.item()
                })?;
                let clf_src = eval_batched(&data.val_1, cfg.batch_size, |b| {
                    let (_, z) = s.source.encode_sequence(b, &mode)?;
                    crate::vrnn::bce_loss(&classify_with(&s.classifier, &z)?, &b.labels)?.item()
                })?;
                let clf_tgt = eval_batched(&data.val_2, cfg.batch_size, |b| {
                    let (_, z) = s.target.encode_sequence(b, &mode)?;
                    crate::vrnn::bce_loss(&classify_with(&s.classifier, &z)?, &b.labels)?.item()
                })?;
                Ok(recon + clf_src + clf_tgt)
            }
            JobModel::Vrada(s) => global_val_loss(&s.global, &s.classifier, data, cfg),
            JobModel::Vrads(s) => global_val_loss(&s.global, &s.classifier, data, cfg),
        }
    }
}

fn global_val_loss(
    global: &VrnnParams,
    classifier: &crate::nn::DenseLayer,
    data: &JobData,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mode = LatentMode::Mean;
    let mut total = 0.0;
    for val in [&data.val_1, &data.val_2] {
        total += eval_batched(val, cfg.batch_size, |b| {
            let run = global.run_sequence(b, &mode)?;
            let elbo = run.per_seq_loss.mean_all()?.item()?;
            let probs = classify_with(classifier, &run.z_last)?;
            let clf = crate::vrnn::bce_loss(&probs, &b.labels)?.item()?;
            Ok(elbo + clf)
        })?;
    }
    Ok(total)
}

/// Weighted mean of a per-batch loss over a fixed batching of `visits`.
fn eval_batched(
    visits: &[&PreparedVisit],
    batch_size: usize,
    f: impl Fn(&SequenceBatch) -> Result<f64>,
) -> Result<f64> {
    if visits.is_empty() {
        return Ok(0.0);
    }
    let batches = batch_all(visits, batch_size, 0)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for b in &batches {
        total += f(b)? * b.batch_size() as f64;
        n += b.batch_size();
    }
    Ok(total / n as f64)
}

fn restore_by_name(
    entries: &[(String, Tensor)],
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let map: std::collections::BTreeMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut err = None;
    visit(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            Some(src) if src.shape() == t.shape() => {
                if let Err(e) = t.set_values(src.values().to_vec()) {
                    err = Some(e);
                }
            }
            Some(_) => err = Some(Error::Checkpoint(format!("shape mismatch for {name}"))),
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---- per-model update rules --------------------------------------------

fn update_single(
    model: &mut VrnnParams,
    opts: &mut Opts,
    cfg: &TrainConfig,
    group: Group,
    batch: &SequenceBatch,
    plan: &NoisePlan,
) -> Result<()> {
    let mode = LatentMode::Sample(*plan);
    match group {
        Group::Critic => Ok(()),
        Group::VrnnSide => {
            let tape = Tape::new();
            let w = model.watch(&tape);
            let loss = w.elbo_loss(batch, &mode)?;
            let mut wrt = w.scope_tensors(ParamScope::Encoder);
            wrt.extend(w.scope_tensors(ParamScope::Decoder));
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            let (clipped, _) = clip_global_norm(&grads, cfg.grad_clip)?;
            opts.vrnn.step_visit(&clipped, |f| {
                model.visit_scope_mut(ParamScope::Encoder, "vrnn", f);
                model.visit_scope_mut(ParamScope::Decoder, "vrnn", f);
            })
        }
        Group::Classifier => {
            let tape = Tape::new();
            let w = model.watch(&tape);
            let loss = w.clf_loss(batch, &mode)?;
            let clf_t = w.scope_tensors(ParamScope::Classifier);
            let enc_t = w.scope_tensors(ParamScope::Encoder);
            let mut refs: Vec<&Tensor> = clf_t.iter().collect();
            refs.extend(enc_t.iter());
            let grads = grad(&loss, &refs)?;
            let (clf_g, enc_g) = grads.split_at(clf_t.len());
            opts.clf.step_visit(clf_g, |f| {
                model.visit_scope_mut(ParamScope::Classifier, "vrnn", f)
            })?;
            let (enc_clip, _) = clip_global_norm(enc_g, cfg.grad_clip)?;
            opts.vrnn.step_visit(&enc_clip, |f| {
                model.visit_scope_mut(ParamScope::Encoder, "vrnn", f)
            })
        }
    }
}

/// One (or `critic_steps`) critic updates on constant latent batches.
/// Skipped when the paired batches have unequal batch sizes (tail batches).
fn critic_update(
    critic: &mut CriticParams,
    opts: &mut Opts,
    cfg: &TrainConfig,
    z_real: &Tensor,
    mask_real: &Tensor,
    z_fake: &Tensor,
    mask_fake: &Tensor,
    eps_seed: u64,
) -> Result<()> {
    if z_real.shape()[0] != z_fake.shape()[0] {
        return Ok(());
    }
    let b = z_real.shape()[0];
    let t_max = z_real.shape()[1].max(z_fake.shape()[1]);
    let (zr, mr) = pad_const_seq(z_real, mask_real, t_max)?;
    let (zf, mf) = pad_const_seq(z_fake, mask_fake, t_max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(eps_seed);
    for _ in 0..cfg.critic_steps {
        let eps: Vec<f64> = (0..b).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let eps = Tensor::new(&[b], eps)?;
        let tape = Tape::new();
        let cw = critic.watch(&tape);
        let loss = critic_loss(&cw, &zr, &mr, &zf, &mf, &eps, &cfg.gp())?;
        let wrt = crate::nn::param_tensors(&cw);
        let refs: Vec<&Tensor> = wrt.iter().collect();
        let grads = grad(&loss, &refs)?;
        opts.dis.step_visit(&grads, |f| critic.visit_mut("critic", f))?;
        if cfg.critic_reg == CriticReg::WeightClip {
            clip_weights(critic, WEIGHT_CLIP_BOUND)?;
        }
    }
    Ok(())
}

/// Pads a constant `[b, T, d]` sequence and its mask with zero steps.
fn pad_const_seq(z: &Tensor, mask: &Tensor, t_target: usize) -> Result<(Tensor, Tensor)> {
    let (b, t, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    if t == t_target {
        return Ok((z.detached(), mask.detached()));
    }
    let mut v = vec![0.0; b * t_target * d];
    let mut m = vec![0.0; b * t_target];
    for i in 0..b {
        v[i * t_target * d..i * t_target * d + t * d]
            .copy_from_slice(&z.values()[i * t * d..(i + 1) * t * d]);
        m[i * t_target..i * t_target + t].copy_from_slice(&mask.values()[i * t..(i + 1) * t]);
    }
    Ok((Tensor::new(&[b, t_target, d], v)?, Tensor::new(&[b, t_target], m)?))
}

fn step_clf_and_encoder(
    opts: &mut Opts,
    cfg: &TrainConfig,
    grads: Vec<Tensor>,
    n_clf: usize,
    clf_visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
    enc_visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let (clf_g, enc_g) = grads.split_at(n_clf);
    opts.clf.step_visit(clf_g, clf_visit)?;
    let (enc_clip, _) = clip_global_norm(enc_g, cfg.grad_clip)?;
    opts.vrnn.step_visit(&enc_clip, enc_visit)
}

#[allow(clippy::too_many_arguments)]
fn update_adu(
    s: &mut AduState,
    opts: &mut Opts,
    cfg: &TrainConfig,
    group: Group,
    b_src: &SequenceBatch,
    b_tgt: &SequenceBatch,
    plan: &NoisePlan,
    eps_seed: u64,
) -> Result<()> {
    let mode = LatentMode::Sample(*plan);
    match group {
        Group::Critic => {
            let (z_s, _) = s.source.encode_sequence(b_src, &mode)?;
            let (z_t, _) = s.target.encode_sequence(b_tgt, &mode)?;
            critic_update(
                &mut s.critic,
                opts,
                cfg,
                &z_s,
                &b_src.step_mask,
                &z_t,
                &b_tgt.step_mask,
                eps_seed,
            )
        }
        Group::VrnnSide => {
            let tape = Tape::new();
            let watched = AduState { target: s.target.watch(&tape), ..s.clone() };
            let loss = adu_unification_loss(&watched, b_tgt, &mode)?;
            let wrt = watched.target.scope_tensors(ParamScope::Encoder);
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            let (clipped, _) = clip_global_norm(&grads, cfg.grad_clip)?;
            opts.vrnn.step_visit(&clipped, |f| {
                s.target.visit_scope_mut(ParamScope::Encoder, "target", f)
            })
        }
        Group::Classifier => {
            let tape = Tape::new();
            let watched = AduState {
                target: s.target.watch(&tape),
                classifier: s.classifier.watch(&tape),
                ..s.clone()
            };
            let loss = adu_classifier_loss(&watched, b_src, b_tgt, &mode)?;
            let mut wrt = Vec::new();
            watched.classifier.visit("", &mut |_, t| wrt.push(t.clone()));
            let n_clf = wrt.len();
            wrt.extend(watched.target.scope_tensors(ParamScope::Encoder));
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            step_clf_and_encoder(
                opts,
                cfg,
                grads,
                n_clf,
                |f| s.classifier.visit_mut("clf", f),
                |f| s.target.visit_scope_mut(ParamScope::Encoder, "target", f),
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_vrada(
    s: &mut VradaState,
    opts: &mut Opts,
    cfg: &TrainConfig,
    group: Group,
    b1: &SequenceBatch,
    b2: &SequenceBatch,
    plan: &NoisePlan,
    eps_seed: u64,
) -> Result<()> {
    let mode = LatentMode::Sample(*plan);
    match group {
        Group::Critic => {
            let (z1, _) = s.global.encode_sequence(b1, &mode)?;
            let (z2, _) = s.global.encode_sequence(b2, &mode)?;
            critic_update(&mut s.critic, opts, cfg, &z1, &b1.step_mask, &z2, &b2.step_mask, eps_seed)
        }
        Group::VrnnSide => {
            let tape = Tape::new();
            let watched = VradaState { global: s.global.watch(&tape), ..s.clone() };
            let loss = vrada_loss(&watched, b1, b2, &mode)?;
            let mut wrt = watched.global.scope_tensors(ParamScope::Encoder);
            wrt.extend(watched.global.scope_tensors(ParamScope::Decoder));
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            let (clipped, _) = clip_global_norm(&grads, cfg.grad_clip)?;
            opts.vrnn.step_visit(&clipped, |f| {
                s.global.visit_scope_mut(ParamScope::Encoder, "global", f);
                s.global.visit_scope_mut(ParamScope::Decoder, "global", f);
            })
        }
        Group::Classifier => {
            let tape = Tape::new();
            let gw = s.global.watch(&tape);
            let cw = s.classifier.watch(&tape);
            let (_, z1) = gw.encode_sequence(b1, &mode)?;
            let (_, z2) = gw.encode_sequence(b2, &mode)?;
            let loss = crate::vrnn::bce_loss(&classify_with(&cw, &z1)?, &b1.labels)?
                .add(&crate::vrnn::bce_loss(&classify_with(&cw, &z2)?, &b2.labels)?)?;
            let mut wrt = Vec::new();
            cw.visit("", &mut |_, t| wrt.push(t.clone()));
            let n_clf = wrt.len();
            wrt.extend(gw.scope_tensors(ParamScope::Encoder));
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            step_clf_and_encoder(
                opts,
                cfg,
                grads,
                n_clf,
                |f| s.classifier.visit_mut("clf", f),
                |f| s.global.visit_scope_mut(ParamScope::Encoder, "global", f),
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_vrads(
    s: &mut VradsState,
    opts: &mut Opts,
    cfg: &TrainConfig,
    group: Group,
    b1: &SequenceBatch,
    b2: &SequenceBatch,
    plan: &NoisePlan,
    eps_seed: u64,
) -> Result<()> {
    let mode = LatentMode::Sample(*plan);
    match group {
        Group::Critic => {
            let (z1, _) = s.global.encode_sequence(b1, &mode)?;
            let (z2, _) = s.global.encode_sequence(b2, &mode)?;
            critic_update(&mut s.critic, opts, cfg, &z1, &b1.step_mask, &z2, &b2.step_mask, eps_seed)
        }
        Group::VrnnSide => {
            let tape = Tape::new();
            let released = s.variant == VradsVariant::Released;
            let watched = VradsState {
                global: s.global.watch(&tape),
                local_1: if released { s.local_1.watch(&tape) } else { s.local_1.clone() },
                local_2: if released { s.local_2.watch(&tape) } else { s.local_2.clone() },
                ..s.clone()
            };
            let loss = vrads_separation_loss(&watched, b1, b2, &mode)?;
            let mut wrt = watched.global.scope_tensors(ParamScope::Encoder);
            wrt.extend(watched.global.scope_tensors(ParamScope::Decoder));
            if released {
                for local in [&watched.local_1, &watched.local_2] {
                    wrt.extend(local.scope_tensors(ParamScope::Encoder));
                    wrt.extend(local.scope_tensors(ParamScope::Decoder));
                }
            }
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            let (clipped, _) = clip_global_norm(&grads, cfg.grad_clip)?;
            opts.vrnn.step_visit(&clipped, |f| {
                s.global.visit_scope_mut(ParamScope::Encoder, "global", f);
                s.global.visit_scope_mut(ParamScope::Decoder, "global", f);
                if released {
                    s.local_1.visit_scope_mut(ParamScope::Encoder, "local1", f);
                    s.local_1.visit_scope_mut(ParamScope::Decoder, "local1", f);
                    s.local_2.visit_scope_mut(ParamScope::Encoder, "local2", f);
                    s.local_2.visit_scope_mut(ParamScope::Decoder, "local2", f);
                }
            })
        }
        Group::Classifier => {
            let tape = Tape::new();
            let watched = VradsState {
                global: s.global.watch(&tape),
                classifier: s.classifier.watch(&tape),
                ..s.clone()
            };
            let loss = vrads_classifier_loss(&watched, b1, b2, &mode)?;
            let mut wrt = Vec::new();
            watched.classifier.visit("", &mut |_, t| wrt.push(t.clone()));
            let n_clf = wrt.len();
            wrt.extend(watched.global.scope_tensors(ParamScope::Encoder));
            let refs: Vec<&Tensor> = wrt.iter().collect();
            let grads = grad(&loss, &refs)?;
            step_clf_and_encoder(
                opts,
                cfg,
                grads,
                n_clf,
                |f| s.classifier.visit_mut("clf", f),
                |f| s.global.visit_scope_mut(ParamScope::Encoder, "global", f),
            )
        }
    }
}

// ---- high-level entry points --------------------------------------------

fn check_classes(train: &[&PreparedVisit]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pos = train.iter().any(|v| v.label == 1.0);
    let neg = train.iter().any(|v| v.label == 0.0);
    if !(pos && neg) {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Trains a plain VRNN classifier on one dataset, returning the best
/// checkpoint by validation loss. With a zero epoch budget the (possibly
/// provided) initialization is returned unchanged.
pub fn pretrain_vrnn(
    train: &[&PreparedVisit],
    val: &[&PreparedVisit],
    vrnn_cfg: VrnnConfig,
    cfg: &TrainConfig,
    init: Option<VrnnParams>,
) -> Result<(VrnnParams, TrainRecord)> {
    check_classes(train)?;
    let model = match init {
        Some(m) => m,
        None => VrnnParams::new(vrnn_cfg, substream(cfg.seed, seeds::INIT, 0))?,
    };
    if cfg.epochs == 0 {
        return Ok((model, TrainRecord::empty()));
    }
    let mut job = TrainJob::new(JobModel::Single(model), cfg.clone())?;
    let val = if val.is_empty() { train.to_vec() } else { val.to_vec() };
    let data = JobData::single(train.to_vec(), val);
    job.train(&data)?;
    let (trained, record) = job.finish()?;
    match trained {
        TrainedModel::Single(m) => Ok((m, record)),
        _ => unreachable!(),
    }
}

/// Continues training every parameter of a pretrained VRNN on the target
/// domain only.
pub fn fine_tune(
    pretrained: VrnnParams,
    target_train: &[&PreparedVisit],
    target_val: &[&PreparedVisit],
    cfg: &TrainConfig,
) -> Result<(VrnnParams, TrainRecord)> {
    if let Some(v) = target_train.first() {
        if 2 * v.n_channels() != pretrained.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "fine_tune",
                left: vec![2 * v.n_channels()],
                right: vec![pretrained.config.input_dim],
            });
        }
    }
    let vrnn_cfg = pretrained.config;
    pretrain_vrnn(target_train, target_val, vrnn_cfg, cfg, Some(pretrained))
}

/// Builds and adapts a unification model from a pretrained source network:
/// the critic aligns target latents with frozen source latents, the target
/// encoder opposes it, and the shared classifier trains on both domains.
pub fn train_adu(
    source: VrnnParams,
    source_domain: u8,
    src: (&[&PreparedVisit], &[&PreparedVisit]),
    tgt: (&[&PreparedVisit], &[&PreparedVisit]),
    cfg: &TrainConfig,
) -> Result<(AduState, TrainRecord)> {
    check_classes(src.0)?;
    check_classes(tgt.0)?;
    let latent = source.config.latent;
    let target = source.clone();
    let state = AduState {
        source,
        target,
        critic: CriticParams::new(latent, CRITIC_HIDDEN, substream(cfg.seed, seeds::CRITIC_INIT, 0))?,
        classifier: Initializer::xavier(substream(cfg.seed, seeds::CLF_INIT, 0))
            .dense(latent, 1, Activation::Linear)?,
        alpha: cfg.alpha,
        source_domain,
    };
    if cfg.epochs == 0 {
        return Ok((state, TrainRecord::empty()));
    }
    let mut job = TrainJob::new(JobModel::Adu(state), cfg.clone())?;
    let data = JobData {
        train_1: src.0.to_vec(),
        train_2: tgt.0.to_vec(),
        val_1: if src.1.is_empty() { src.0.to_vec() } else { src.1.to_vec() },
        val_2: if tgt.1.is_empty() { tgt.0.to_vec() } else { tgt.1.to_vec() },
    };
    job.train(&data)?;
    let (trained, record) = job.finish()?;
    match trained {
        TrainedModel::Adu(s) => Ok((s, record)),
        _ => unreachable!(),
    }
}

/// Shared VRNN over both domains with adversarial latent alignment.
pub fn train_vrada(
    vrnn_cfg: VrnnConfig,
    d1: (&[&PreparedVisit], &[&PreparedVisit]),
    d2: (&[&PreparedVisit], &[&PreparedVisit]),
    cfg: &TrainConfig,
) -> Result<(VradaState, TrainRecord)> {
    check_classes(d1.0)?;
    check_classes(d2.0)?;
    let latent = vrnn_cfg.latent;
    let state = VradaState {
        global: VrnnParams::new(vrnn_cfg, substream(cfg.seed, seeds::GLOBAL_INIT, 0))?,
        critic: CriticParams::new(latent, CRITIC_HIDDEN, substream(cfg.seed, seeds::CRITIC_INIT, 0))?,
        classifier: Initializer::xavier(substream(cfg.seed, seeds::CLF_INIT, 0))
            .dense(latent, 1, Activation::Linear)?,
        alpha: cfg.alpha,
    };
    if cfg.epochs == 0 {
        return Ok((state, TrainRecord::empty()));
    }
    let mut job = TrainJob::new(JobModel::Vrada(state), cfg.clone())?;
    let data = JobData {
        train_1: d1.0.to_vec(),
        train_2: d2.0.to_vec(),
        val_1: if d1.1.is_empty() { d1.0.to_vec() } else { d1.1.to_vec() },
        val_2: if d2.1.is_empty() { d2.0.to_vec() } else { d2.1.to_vec() },
    };
    job.train(&data)?;
    let (trained, record) = job.finish()?;
    match trained {
        TrainedModel::Vrada(s) => Ok((s, record)),
        _ => unreachable!(),
    }
}

/// Domain separation from two pretrained local networks. The fixed variant
/// keeps the locals at their pretrained parameters; the released variant
/// keeps optimizing them.
pub fn train_vrads(
    local_1: VrnnParams,
    local_2: VrnnParams,
    d1: (&[&PreparedVisit], &[&PreparedVisit]),
    d2: (&[&PreparedVisit], &[&PreparedVisit]),
    cfg: &TrainConfig,
    variant: VradsVariant,
) -> Result<(VradsState, TrainRecord)> {
    check_classes(d1.0)?;
    check_classes(d2.0)?;
    let vrnn_cfg = local_1.config;
    let latent = vrnn_cfg.latent;
    let state = VradsState {
        local_1,
        local_2,
        global: VrnnParams::new(vrnn_cfg, substream(cfg.seed, seeds::GLOBAL_INIT, 0))?,
        critic: CriticParams::new(latent, CRITIC_HIDDEN, substream(cfg.seed, seeds::CRITIC_INIT, 0))?,
        classifier: Initializer::xavier(substream(cfg.seed, seeds::CLF_INIT, 0))
            .dense(latent, 1, Activation::Linear)?,
        alpha: cfg.alpha,
        beta: cfg.beta,
        variant,
    };
    if cfg.epochs == 0 {
        return Ok((state, TrainRecord::empty()));
    }
    let mut job = TrainJob::new(JobModel::Vrads(state), cfg.clone())?;
    let data = JobData {
        train_1: d1.0.to_vec(),
        train_2: d2.0.to_vec(),
        val_1: if d1.1.is_empty() { d1.0.to_vec() } else { d1.1.to_vec() },
        val_2: if d2.1.is_empty() { d2.0.to_vec() } else { d2.1.to_vec() },
    };
    job.train(&data)?;
    let (trained, record) = job.finish()?;
    match trained {
        TrainedModel::Vrads(s) => Ok((s, record)),
        _ => unreachable!(),
    }
}

/// Pretrained per-domain networks reused across variants of one (seed, fold)
/// cell: the single-domain baselines are exactly these models, and the
/// unification/separation variants start from them.
#[derive(Default)]
pub struct PretrainCache {
    pub d1: Option<(VrnnParams, TrainRecord)>,
    pub d2: Option<(VrnnParams, TrainRecord)>,
}

fn pretrain_domain(
    cache: &mut PretrainCache,
    which: u8,
    data: (&[&PreparedVisit], &[&PreparedVisit]),
    vrnn_cfg: VrnnConfig,
    cfg: &TrainConfig,
) -> Result<(VrnnParams, TrainRecord)> {
    let slot = if which == 1 { &mut cache.d1 } else { &mut cache.d2 };
    if slot.is_none() {
        let mut pre_cfg = cfg.clone();
        pre_cfg.seed = substream(cfg.seed, seeds::INIT, which as u64 + 100);
        let trained = pretrain_vrnn(data.0, data.1, vrnn_cfg, &pre_cfg, None)?;
        *slot = Some(trained);
    }
    Ok(slot.clone().unwrap())
}

/// Trains one of the ten systems on the given splits. `data` slots 1 and 2
/// are the two domains; unification variants pick their source internally.
pub fn train_variant(
    variant: TrainVariant,
    d1: (&[&PreparedVisit], &[&PreparedVisit]),
    d2: (&[&PreparedVisit], &[&PreparedVisit]),
    vrnn_cfg: VrnnConfig,
    cfg: &TrainConfig,
    cache: &mut PretrainCache,
) -> Result<(TrainedModel, TrainRecord)> {
    let d1_tag = d1.0.first().map(|v| v.domain).unwrap_or(0);
    let d2_tag = d2.0.first().map(|v| v.domain).unwrap_or(1);
    match variant {
        TrainVariant::VrnnD1 => {
            let (m, r) = pretrain_domain(cache, 1, d1, vrnn_cfg, cfg)?;
            Ok((TrainedModel::Single(m), r))
        }
        TrainVariant::VrnnD2 => {
            let (m, r) = pretrain_domain(cache, 2, d2, vrnn_cfg, cfg)?;
            Ok((TrainedModel::Single(m), r))
        }
        TrainVariant::VrnnBoth => {
            let train: Vec<&PreparedVisit> = d1.0.iter().chain(d2.0.iter()).copied().collect();
            let val: Vec<&PreparedVisit> = d1.1.iter().chain(d2.1.iter()).copied().collect();
            let (m, r) = pretrain_vrnn(&train, &val, vrnn_cfg, cfg, None)?;
            Ok((TrainedModel::Single(m), r))
        }
        TrainVariant::Ft12 => {
            let (m, _) = pretrain_domain(cache, 1, d1, vrnn_cfg, cfg)?;
            let (m, r) = fine_tune(m, d2.0, d2.1, cfg)?;
            Ok((TrainedModel::Single(m), r))
        }
        TrainVariant::Ft21 => {
            let (m, _) = pretrain_domain(cache, 2, d2, vrnn_cfg, cfg)?;
            let (m, r) = fine_tune(m, d1.0, d1.1, cfg)?;
            Ok((TrainedModel::Single(m), r))
        }
        TrainVariant::Vrada => {
            let (s, r) = train_vrada(vrnn_cfg, d1, d2, cfg)?;
            Ok((TrainedModel::Vrada(s), r))
        }
        TrainVariant::Adu12 => {
            let (src, _) = pretrain_domain(cache, 1, d1, vrnn_cfg, cfg)?;
            let (s, r) = train_adu(src, d1_tag, d1, d2, cfg)?;
            Ok((TrainedModel::Adu(s), r))
        }
        TrainVariant::Adu21 => {
            let (src, _) = pretrain_domain(cache, 2, d2, vrnn_cfg, cfg)?;
            let (s, r) = train_adu(src, d2_tag, d2, d1, cfg)?;
            Ok((TrainedModel::Adu(s), r))
        }
        TrainVariant::VradsFixed | TrainVariant::VradsReleased => {
            let (l1, _) = pretrain_domain(cache, 1, d1, vrnn_cfg, cfg)?;
            let (l2, _) = pretrain_domain(cache, 2, d2, vrnn_cfg, cfg)?;
            let v = if variant == TrainVariant::VradsFixed {
                VradsVariant::Fixed
            } else {
                VradsVariant::Released
            };
            let (s, r) = train_vrads(l1, l2, d1, d2, cfg, v)?;
            Ok((TrainedModel::Vrads(s), r))
        }
    }
}
