//! The ten trainable systems: plain per-domain and pooled VRNN classifiers,
//! fine-tuning, the shared-adversarial model, adversarial domain unification
//! in both directions, and adversarial domain separation with fixed or
//! released local networks.

mod losses;
mod train;

pub use losses::{
    adu_classifier_loss, adu_unification_loss, classify_with, diff_loss, vrada_loss,
    vrads_classifier_loss, vrads_separation_loss,
};
pub use train::{
    fine_tune, pretrain_vrnn, train_adu, train_variant, train_vrada, train_vrads, JobData,
    JobModel, PretrainCache, TrainJob, TrainRecord,
};

use serde::{Deserialize, Serialize};

use crate::adversarial::CriticParams;
use crate::data::SequenceBatch;
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, Module};
use crate::tensor::Tensor;
use crate::vrnn::{LatentMode, VrnnParams};

/// Hidden width of the sequence critic.
pub const CRITIC_HIDDEN: usize = 60;

/// The ten experimental systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    VrnnD1,
    VrnnD2,
    VrnnBoth,
    Ft12,
    Ft21,
    Vrada,
    Adu12,
    Adu21,
    VradsFixed,
    VradsReleased,
}

impl TrainVariant {
    pub fn all() -> [TrainVariant; 10] {
        use TrainVariant::*;
        [VrnnD1, VrnnD2, VrnnBoth, Ft12, Ft21, Vrada, Adu12, Adu21, VradsFixed, VradsReleased]
    }

    pub fn name(&self) -> &'static str {
        use TrainVariant::*;
        match self {
            VrnnD1 => "vrnn-d1",
            VrnnD2 => "vrnn-d2",
            VrnnBoth => "vrnn-both",
            Ft12 => "ft-12",
            Ft21 => "ft-21",
            Vrada => "vrada",
            Adu12 => "adu-12",
            Adu21 => "adu-21",
            VradsFixed => "vrads-fixed",
            VradsReleased => "vrads-released",
        }
    }

    pub fn parse(s: &str) -> Result<TrainVariant> {
        Self::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Domain-unification state: the source network and its decoder stay frozen
/// while the target encoder learns to map into the source latent space.
#[derive(Clone)]
pub struct AduState {
    pub source: VrnnParams,
    /// Same architecture as the source; its decoder holds the frozen source
    /// decoder parameters and is never updated.
    pub target: VrnnParams,
    pub critic: CriticParams,
    pub classifier: DenseLayer,
    pub alpha: f64,
    /// Domain tag routed through the frozen source encoder at prediction time.
    pub source_domain: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VradsVariant {
    Fixed,
    Released,
}

/// Domain-separation state: two per-domain local networks, one global
/// network, critic, and classifier. In the fixed variant the locals stay at
/// their pretrained parameters.
#[derive(Clone)]
pub struct VradsState {
    pub local_1: VrnnParams,
    pub local_2: VrnnParams,
    pub global: VrnnParams,
    pub critic: CriticParams,
    pub classifier: DenseLayer,
    pub alpha: f64,
    pub beta: f64,
    pub variant: VradsVariant,
}

/// Shared VRNN trained on both domains with an adversarial critic aligning
/// the latents (no local networks, no difference loss).
#[derive(Clone)]
pub struct VradaState {
    pub global: VrnnParams,
    pub critic: CriticParams,
    pub classifier: DenseLayer,
    pub alpha: f64,
}

/// A trained system ready for prediction.
#[derive(Clone)]
pub enum TrainedModel {
    Single(VrnnParams),
    Adu(AduState),
    Vrada(VradaState),
    Vrads(VradsState),
}

impl TrainedModel {
    /// Positive-class probability per sequence, deterministic (posterior
    /// means, no sampling).
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Vec<f64>> {
        let mode = LatentMode::Mean;
        match self {
            TrainedModel::Single(vrnn) => {
                let (_, z_last) = vrnn.encode_sequence(batch, &mode)?;
                Ok(vrnn.classify(&z_last)?.values().to_vec())
            }
            TrainedModel::Adu(s) => {
                let (_, z_src) = s.source.encode_sequence(batch, &mode)?;
                let (_, z_tgt) = s.target.encode_sequence(batch, &mode)?;
                let p_src = classify_with(&s.classifier, &z_src)?;
                let p_tgt = classify_with(&s.classifier, &z_tgt)?;
                Ok(batch
                    .domains
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| {
                        if d == s.source_domain {
                            p_src.values()[i]
                        } else {
                            p_tgt.values()[i]
                        }
                    })
                    .collect())
            }
            TrainedModel::Vrada(s) => {
                let (_, z_last) = s.global.encode_sequence(batch, &mode)?;
                Ok(classify_with(&s.classifier, &z_last)?.values().to_vec())
            }
            TrainedModel::Vrads(s) => {
                let (_, z_last) = s.global.encode_sequence(batch, &mode)?;
                Ok(classify_with(&s.classifier, &z_last)?.values().to_vec())
            }
        }
    }

    /// Named tensors of every component, prefixed by component name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match self {
            TrainedModel::Single(v) => v.visit("vrnn", &mut |n, t| out.push((n.to_string(), t.clone()))),
            TrainedModel::Adu(s) => {
                s.source.visit("source", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.target.visit("target", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.critic.visit("critic", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.classifier.visit("clf", &mut |n, t| out.push((n.to_string(), t.clone())));
            }
            TrainedModel::Vrada(s) => {
                s.global.visit("global", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.critic.visit("critic", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.classifier.visit("clf", &mut |n, t| out.push((n.to_string(), t.clone())));
            }
            TrainedModel::Vrads(s) => {
                s.local_1.visit("local1", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.local_2.visit("local2", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.global.visit("global", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.critic.visit("critic", &mut |n, t| out.push((n.to_string(), t.clone())));
                s.classifier.visit("clf", &mut |n, t| out.push((n.to_string(), t.clone())));
            }
        }
        out
    }
}

