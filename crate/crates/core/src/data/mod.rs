//! Synthetic two-domain benchmark generation and the preprocessing pipeline:
//! window aggregation, bounded carry-forward, mean imputation with missing
//! indicators, endpoint alignment, and batching.
//!
//! The generator injects two kinds of cross-domain discrepancy on purpose:
//! population mixture differences (covariate shift) and measurement-procedure
//! differences such as sampling intervals and per-channel offsets (systematic
//! bias).

mod batch;
mod generate;
mod jsonl;
mod preprocess;

pub use batch::{batch_all, make_batch, SequenceBatch};
pub use generate::{generate_domain, ChannelEvents, GeneratorTruth, RawEventStream};
pub use jsonl::{read_jsonl, write_jsonl, VisitRecord};
pub use preprocess::{
    aggregate, align_truncate, carry_forward, compute_impute_stats, impute_mean,
    match_negative_lengths, stratified_sample, AggregatedSequence, Cell, ImputeStats,
    PipelineReport, WINDOW_MINUTES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Vital,
    Oxygen,
    Lab,
}

/// One population subgroup of a domain's mixture. Mean shifts and variance
/// scales are per raw channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Subgroup {
    pub weight: f64,
    pub mean_shift: Vec<f64>,
    pub var_scale: Vec<f64>,
}

/// Parameters of the synthetic outcome process. Positives ramp a latent
/// severity toward the endpoint; negatives get a small distractor drift so
/// the clean-latent oracle is strong but not perfect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelProcess {
    pub prevalence: f64,
    pub ramp_hours: f64,
    pub ramp_magnitude_mean: f64,
    pub ramp_magnitude_sd: f64,
    pub negative_drift_sd: f64,
    /// Per raw channel: how strongly the severity expresses in that channel.
    pub signal_loading: Vec<f64>,
}

/// Everything needed to synthesize one domain reproducibly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    pub n_vitals: usize,
    pub n_oxygen: usize,
    pub n_labs: usize,
    pub subgroups: Vec<Subgroup>,
    /// Mean minutes between measurements, per channel kind (systematic bias).
    pub vital_interval_min: f64,
    pub oxygen_interval_min: f64,
    pub lab_interval_min: f64,
    /// Additive measurement offset per raw channel (systematic bias).
    pub channel_offset: Vec<f64>,
    /// Multiplicative measurement scale per raw channel.
    pub channel_scale: Vec<f64>,
    pub channel_baseline: Vec<f64>,
    pub obs_noise_sd: f64,
    pub label: LabelProcess,
    pub visit_hours_min: f64,
    pub visit_hours_max: f64,
}

impl DomainSpec {
    pub fn n_raw_channels(&self) -> usize {
        self.n_vitals + self.n_oxygen + self.n_labs
    }

    /// Aggregated channel count: vitals expand to (min, max, mean).
    pub fn n_agg_channels(&self) -> usize {
        3 * self.n_vitals + self.n_oxygen + self.n_labs
    }

    pub fn kind_of(&self, raw_channel: usize) -> ChannelKind {
        if raw_channel < self.n_vitals {
            ChannelKind::Vital
        } else if raw_channel < self.n_vitals + self.n_oxygen {
            ChannelKind::Oxygen
        } else {
            ChannelKind::Lab
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_raw_channels();
        if c == 0 {
            return Err(Error::InvalidConfig("domain has no channels".into()));
        }
        if self.subgroups.is_empty() {
            return Err(Error::InvalidConfig("domain has no subgroups".into()));
        }
        let wsum: f64 = self.subgroups.iter().map(|s| s.weight).sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("subgroup weights sum to {wsum}, expected 1")));
        }
        for s in &self.subgroups {
            if s.weight < 0.0 || s.mean_shift.len() != c || s.var_scale.len() != c {
                return Err(Error::InvalidConfig("bad subgroup".into()));
            }
        }
        for (name, v) in [
            ("vital_interval_min", self.vital_interval_min),
            ("oxygen_interval_min", self.oxygen_interval_min),
            ("lab_interval_min", self.lab_interval_min),
        ] {
            if v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.channel_offset.len() != c
            || self.channel_scale.len() != c
            || self.channel_baseline.len() != c
            || self.label.signal_loading.len() != c
        {
            return Err(Error::InvalidConfig("per-channel vectors must match channel count".into()));
        }
        if !(0.0 < self.label.prevalence && self.label.prevalence < 1.0) {
            return Err(Error::InvalidConfig("prevalence must be in (0, 1)".into()));
        }
        if self.visit_hours_min <= 0.0 || self.visit_hours_max < self.visit_hours_min {
            return Err(Error::InvalidConfig("bad visit length range".into()));
        }
        Ok(())
    }

    /// Desk-scale default: 6 raw channels aggregating to 12 value channels.
    pub fn desk_default(name: &str, seed: u64) -> DomainSpec {
        let c = 6; // 3 vitals, 1 oxygen, 2 labs -> 3*3 + 1 + 2 = 12 aggregated
        DomainSpec {
            name: name.to_string(),
            seed,
            n_vitals: 3,
            n_oxygen: 1,
            n_labs: 2,
            subgroups: vec![Subgroup {
                weight: 1.0,
                mean_shift: vec![0.0; c],
                var_scale: vec![1.0; c],
            }],
            vital_interval_min: 44.0,
            oxygen_interval_min: 60.0,
            lab_interval_min: 360.0,
            channel_offset: vec![0.0; c],
            channel_scale: vec![1.0; c],
            channel_baseline: vec![0.0; c],
            obs_noise_sd: 0.3,
            label: LabelProcess {
                prevalence: 0.5,
                ramp_hours: 96.0,
                ramp_magnitude_mean: 1.6,
                ramp_magnitude_sd: 0.35,
                negative_drift_sd: 0.25,
                signal_loading: vec![1.0, 0.8, -0.6, 0.5, 0.7, -0.4],
            },
            visit_hours_min: 84.0,
            visit_hours_max: 150.0,
        }
    }

    /// Full-scale channel family matching the clinical layout: 7 vitals,
    /// 2 oxygen channels, 10 labs (33 aggregated value channels).
    pub fn full_scale(name: &str, seed: u64) -> DomainSpec {
        let c = 19;
        let mut loading = vec![0.0; c];
        for (i, l) in loading.iter_mut().enumerate() {
            *l = match i % 4 {
                0 => 1.0,
                1 => -0.7,
                2 => 0.5,
                _ => 0.0,
            };
        }
        DomainSpec {
            n_vitals: 7,
            n_oxygen: 2,
            n_labs: 10,
            subgroups: vec![Subgroup {
                weight: 1.0,
                mean_shift: vec![0.0; c],
                var_scale: vec![1.0; c],
            }],
            channel_offset: vec![0.0; c],
            channel_scale: vec![1.0; c],
            channel_baseline: vec![0.0; c],
            label: LabelProcess {
                prevalence: 0.5,
                ramp_hours: 96.0,
                ramp_magnitude_mean: 1.6,
                ramp_magnitude_sd: 0.35,
                negative_drift_sd: 0.25,
                signal_loading: loading,
            },
            visit_hours_min: 130.0,
            visit_hours_max: 200.0,
            ..DomainSpec::desk_default(name, seed)
        }
    }
}

/// One visit after preprocessing, ready for imputation and batching.
#[derive(Debug, Clone)]
pub struct PreparedVisit {
    pub visit_id: u64,
    pub domain: u8,
    pub label: f64,
    pub subgroup: usize,
    /// `[T][C]` cells, endpoint-aligned (last row is the cut point).
    pub cells: Vec<Vec<Cell>>,
}

impl PreparedVisit {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.cells.first().map(|r| r.len()).unwrap_or(0)
    }
}
