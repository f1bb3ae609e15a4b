use serde::{Deserialize, Serialize};

use super::{stratified_folds, stratified_val_split, substream, TrainConfig};
use crate::data::{batch_all, compute_impute_stats, impute_mean, PreparedVisit};
use crate::error::{Error, Result};
use crate::frameworks::{train_variant, PretrainCache, TrainRecord, TrainVariant, TrainedModel};
use crate::report::{aggregate, evaluate, MetricValues, MetricsRow};
use crate::vrnn::VrnnConfig;

/// Cross-validation plan: `folds` disjoint stratified folds, `runs`
/// independently seeded trainings. The fold assignment depends only on
/// `fold_seed`, so every variant and run of one experiment sees the same
/// folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvPlan {
    pub folds: usize,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub fold_seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { folds: 2, runs: 3, seeds: vec![1, 2, 3], fold_seed: 97 }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidConfig("cross-validation needs >= 2 folds".into()));
        }
        if self.runs == 0 || self.seeds.len() != self.runs {
            return Err(Error::InvalidConfig(format!(
                "need one seed per run: {} seeds for {} runs",
                self.seeds.len(),
                self.runs
            )));
        }
        Ok(())
    }
}

/// Metrics of one trained cell of the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub variant: String,
    pub run: usize,
    pub fold: usize,
    pub seed: u64,
    pub metrics: MetricValues,
    pub record: TrainRecord,
}

/// Everything a cross-validated experiment produced for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutcome {
    pub row: MetricsRow,
    pub cells: Vec<FoldResult>,
    /// Fold id per visit, ordered as domain-1 visits then domain-2 visits.
    pub fold_assignment: Vec<usize>,
}

/// Deterministic prediction of a trained model over a visit list.
/// Returns `(labels, probabilities)` aligned by visit.
pub fn evaluate_model(
    model: &TrainedModel,
    visits: &[&PreparedVisit],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let batches = batch_all(visits, batch_size, 0)?;
    let mut labels = Vec::with_capacity(visits.len());
    let mut probs = Vec::with_capacity(visits.len());
    for b in &batches {
        let p = model.predict(&b)?;
        labels.extend_from_slice(&b.labels);
        probs.extend(p);
    }
    Ok((labels, probs))
}

struct FoldSplit {
    train_1: Vec<PreparedVisit>,
    val_1: Vec<PreparedVisit>,
    test_1: Vec<PreparedVisit>,
    train_2: Vec<PreparedVisit>,
    val_2: Vec<PreparedVisit>,
    test_2: Vec<PreparedVisit>,
}

/// Builds the imputed per-fold split. Imputation statistics come from the
/// training complement of the fold, per domain, never from the test fold.
fn build_fold(
    d1: &[PreparedVisit],
    d2: &[PreparedVisit],
    assignment: &[usize],
    fold: usize,
    run_seed: u64,
    val_fraction: f64,
) -> Result<FoldSplit> {
    let n1 = d1.len();
    let all: Vec<&PreparedVisit> = d1.iter().chain(d2.iter()).collect();
    let labels: Vec<f64> = all.iter().map(|v| v.label).collect();
    let domains: Vec<u8> = all.iter().map(|v| v.domain).collect();

    let test_idx: Vec<usize> = (0..all.len()).filter(|&i| assignment[i] == fold).collect();
    let pool_idx: Vec<usize> = (0..all.len()).filter(|&i| assignment[i] != fold).collect();
    for i in &test_idx {
        assert!(!pool_idx.contains(i), "train/test folds overlap");
    }
    let (train_idx, val_idx) = stratified_val_split(
        &labels,
        &domains,
        &pool_idx,
        val_fraction,
        substream(run_seed, super::seeds::VAL_SPLIT, fold as u64),
    );

    // per-domain imputation statistics from the training complement
    let stats_for = |domain_first: bool| -> Result<crate::data::ImputeStats> {
        let picked: Vec<&PreparedVisit> = pool_idx
            .iter()
            .filter(|&&i| (i < n1) == domain_first)
            .map(|&i| all[i])
            .collect();
        if picked.is_empty() {
            return Err(Error::EmptyDataset);
        }
        compute_impute_stats(&picked, &format!("fold{fold}-train"))
    };
    let s1 = stats_for(true)?;
    let s2 = stats_for(false)?;

    let fill = |idx: &[usize], domain_first: bool| -> Vec<PreparedVisit> {
        idx.iter()
            .filter(|&&i| (i < n1) == domain_first)
            .map(|&i| impute_mean(all[i], if domain_first { &s1 } else { &s2 }))
            .collect()
    };
    Ok(FoldSplit {
        train_1: fill(&train_idx, true),
        val_1: fill(&val_idx, true),
        test_1: fill(&test_idx, true),
        train_2: fill(&train_idx, false),
        val_2: fill(&val_idx, false),
        test_2: fill(&test_idx, false),
    })
}

/// Cross-validates several variants under one plan. Variants trained in the
/// same (run, fold) cell share the pretrained per-domain networks, and every
/// variant sees identical folds. Returns one outcome per variant, in input
/// order.
pub fn cross_validate_many(
    variants: &[TrainVariant],
    d1: &[PreparedVisit],
    d2: &[PreparedVisit],
    vrnn_cfg: VrnnConfig,
    cfg: &TrainConfig,
    plan: &CvPlan,
    mut on_cell: Option<&mut dyn FnMut(&FoldResult)>,
) -> Result<Vec<CvOutcome>> {
    plan.validate()?;
    cfg.validate()?;
    if d1.is_empty() || d2.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let all_labels: Vec<f64> = d1.iter().chain(d2.iter()).map(|v| v.label).collect();
    let all_domains: Vec<u8> = d1.iter().chain(d2.iter()).map(|v| v.domain).collect();
    let assignment = stratified_folds(&all_labels, &all_domains, plan.folds, plan.fold_seed);

    let mut cells: Vec<Vec<FoldResult>> = vec![Vec::new(); variants.len()];
    for (run, &run_seed) in plan.seeds.iter().enumerate() {
        for fold in 0..plan.folds {
            let split = build_fold(d1, d2, &assignment, fold, run_seed, cfg.val_fraction)?;
            let t1: Vec<&PreparedVisit> = split.train_1.iter().collect();
            let v1: Vec<&PreparedVisit> = split.val_1.iter().collect();
            let t2: Vec<&PreparedVisit> = split.train_2.iter().collect();
            let v2: Vec<&PreparedVisit> = split.val_2.iter().collect();
            let test: Vec<&PreparedVisit> =
                split.test_1.iter().chain(split.test_2.iter()).collect();
            let mut cell_cfg = cfg.clone();
            cell_cfg.seed = substream(run_seed, 20, fold as u64);
            let mut cache = PretrainCache::default();
            for (vi, &variant) in variants.iter().enumerate() {
                let (model, record) = train_variant(
                    variant,
                    (&t1, &v1),
                    (&t2, &v2),
                    vrnn_cfg,
                    &cell_cfg,
                    &mut cache,
                )?;
                let (labels, probs) = evaluate_model(&model, &test, cfg.batch_size)?;
                let metrics = evaluate(&labels, &probs)?;
                let result = FoldResult {
                    variant: variant.name().to_string(),
                    run,
                    fold,
                    seed: run_seed,
                    metrics,
                    record,
                };
                if let Some(cb) = on_cell.as_deref_mut() {
                    cb(&result);
                }
                cells[vi].push(result);
            }
        }
    }

    let mut outcomes = Vec::with_capacity(variants.len());
    for (vi, variant) in variants.iter().enumerate() {
        // a run's value is the mean over its folds; mean/std are over runs
        let mut per_run = Vec::with_capacity(plan.runs);
        for run in 0..plan.runs {
            let fold_vals: Vec<MetricValues> = cells[vi]
                .iter()
                .filter(|c| c.run == run)
                .map(|c| c.metrics)
                .collect();
            let m = aggregate(variant.name(), &fold_vals)?;
            per_run.push(m.mean);
        }
        let row = aggregate(variant.name(), &per_run)?;
        outcomes.push(CvOutcome {
            row,
            cells: cells[vi].clone(),
            fold_assignment: assignment.clone(),
        });
    }
    Ok(outcomes)
}

/// Cross-validates a single variant.
pub fn cross_validate(
    variant: TrainVariant,
    d1: &[PreparedVisit],
    d2: &[PreparedVisit],
    vrnn_cfg: VrnnConfig,
    cfg: &TrainConfig,
    plan: &CvPlan,
) -> Result<CvOutcome> {
    let mut out = cross_validate_many(&[variant], d1, d2, vrnn_cfg, cfg, plan, None)?;
    Ok(out.remove(0))
}
