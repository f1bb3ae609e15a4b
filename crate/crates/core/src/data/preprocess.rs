use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ChannelKind, PreparedVisit, RawEventStream};
use crate::error::{Error, Result};

pub const WINDOW_MINUTES: f64 = 30.0;

/// Carry-forward horizons in windows: 8 h for vitals and oxygen, 24 h for labs.
fn carry_horizon(kind: ChannelKind) -> usize {
    match kind {
        ChannelKind::Vital | ChannelKind::Oxygen => 16,
        ChannelKind::Lab => 48,
    }
}

/// One aggregated-channel cell. Carried values count as observed for
/// indicator purposes; only imputed cells are flagged missing downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Observed(f64),
    Carried(f64),
    Imputed(f64),
    Missing,
}

impl Cell {
    pub fn value(&self) -> Option<f64> {
        match self {
            Cell::Observed(v) | Cell::Carried(v) | Cell::Imputed(v) => Some(*v),
            Cell::Missing => None,
        }
    }

    /// True when no post-carry-forward measurement exists for this cell.
    pub fn needs_indicator(&self) -> bool {
        matches!(self, Cell::Missing | Cell::Imputed(_))
    }
}

/// A visit on the regular 30-minute grid. Vitals occupy three aggregated
/// channels each (min, max, mean); oxygen and lab channels keep the mean.
#[derive(Debug, Clone)]
pub struct AggregatedSequence {
    pub visit_id: u64,
    pub label: bool,
    pub subgroup: usize,
    /// `[T][C]` with the window grid starting at minute 0.
    pub cells: Vec<Vec<Cell>>,
    pub channel_kinds: Vec<ChannelKind>,
    /// Minutes from the start of the grid to the endpoint.
    pub endpoint_minutes: f64,
}

impl AggregatedSequence {
    pub fn n_windows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_kinds.len()
    }
}

/// Summarizes each channel within consecutive 30-minute windows. Vital
/// channels keep (min, max, mean); other kinds keep the mean. Windows with
/// no measurement are fully missing.
pub fn aggregate(stream: &RawEventStream) -> Result<AggregatedSequence> {
    let n_windows = (stream.endpoint_minutes / WINDOW_MINUTES).ceil() as usize;
    let mut channel_kinds = Vec::new();
    for ch in &stream.channels {
        match ch.kind {
            ChannelKind::Vital => channel_kinds.extend([ChannelKind::Vital; 3]),
            k => channel_kinds.push(k),
        }
    }
    let n_cols = channel_kinds.len();
    let mut cells = vec![vec![Cell::Missing; n_cols]; n_windows];
    let mut col = 0usize;
    for ch in &stream.channels {
        // per-window accumulators
        let mut acc: Vec<(f64, f64, f64, usize)> = vec![(f64::INFINITY, f64::NEG_INFINITY, 0.0, 0); n_windows];
        let mut prev = f64::NEG_INFINITY;
        for &(t, v) in &ch.events {
            if t < prev {
                return Err(Error::InvalidData(format!(
                    "unsorted events in visit {}: {t} after {prev}",
                    stream.visit_id
                )));
            }
            prev = t;
            if t < 0.0 || t > stream.endpoint_minutes {
                return Err(Error::InvalidData(format!(
                    "event at {t} outside visit {}",
                    stream.visit_id
                )));
            }
            let w = ((t / WINDOW_MINUTES) as usize).min(n_windows.saturating_sub(1));
            let a = &mut acc[w];
            a.0 = a.0.min(v);
            a.1 = a.1.max(v);
            a.2 += v;
            a.3 += 1;
        }
        for (w, &(mn, mx, sum, count)) in acc.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let mean = sum / count as f64;
            match ch.kind {
                ChannelKind::Vital => {
                    cells[w][col] = Cell::Observed(mn);
                    cells[w][col + 1] = Cell::Observed(mx);
                    cells[w][col + 2] = Cell::Observed(mean);
                }
                _ => cells[w][col] = Cell::Observed(mean),
            }
        }
        col += match ch.kind {
            ChannelKind::Vital => 3,
            _ => 1,
        };
    }
    Ok(AggregatedSequence {
        visit_id: stream.visit_id,
        label: stream.label,
        subgroup: stream.subgroup,
        cells,
        channel_kinds,
        endpoint_minutes: stream.endpoint_minutes,
    })
}

/// Fills missing windows from the most recent *observed* window when it lies
/// within the channel kind's horizon. Applying it twice changes nothing,
/// because carried cells are never used as a source.
pub fn carry_forward(seq: &AggregatedSequence) -> AggregatedSequence {
    let mut out = seq.clone();
    let t = seq.n_windows();
    for c in 0..seq.n_channels() {
        let horizon = carry_horizon(seq.channel_kinds[c]);
        let mut last_obs: Option<(usize, f64)> = None;
        for w in 0..t {
            match seq.cells[w][c] {
                Cell::Observed(v) => last_obs = Some((w, v)),
                Cell::Missing | Cell::Carried(_) => {
                    if let Some((w0, v)) = last_obs {
                        if w - w0 <= horizon {
                            out.cells[w][c] = Cell::Carried(v);
                        } else {
                            out.cells[w][c] = Cell::Missing;
                        }
                    }
                }
                Cell::Imputed(_) => {}
            }
        }
    }
    out
}

/// End-aligns the observation window: it closes `horizon_hours` before the
/// endpoint and keeps at most `visible_windows` windows. Returns `None` when
/// the visit is shorter than the prediction horizon.
pub fn align_truncate(
    seq: &AggregatedSequence,
    horizon_hours: f64,
    visible_windows: usize,
) -> Option<AggregatedSequence> {
    let horizon_windows = (horizon_hours * 60.0 / WINDOW_MINUTES).round() as usize;
    let t = seq.n_windows();
    if t <= horizon_windows {
        return None;
    }
    let cut = t - horizon_windows;
    let start = cut.saturating_sub(visible_windows);
    let mut out = seq.clone();
    out.cells = seq.cells[start..cut].to_vec();
    Some(out)
}

/// Truncates negatives so their length distribution matches the positives'
/// via quantile matching (a negative at rank q keeps min(current, positive
/// q-quantile) trailing windows).
pub fn match_negative_lengths(seqs: &mut [AggregatedSequence]) {
    let mut pos_lens: Vec<usize> = seqs.iter().filter(|s| s.label).map(|s| s.n_windows()).collect();
    if pos_lens.is_empty() {
        return;
    }
    pos_lens.sort_unstable();
    let mut neg_idx: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].label).collect();
    if neg_idx.is_empty() {
        return;
    }
    neg_idx.sort_by_key(|&i| seqs[i].n_windows());
    let n = neg_idx.len();
    for (rank, &i) in neg_idx.iter().enumerate() {
        let q = if n == 1 { 0.5 } else { rank as f64 / (n - 1) as f64 };
        let target = pos_lens[((q * (pos_lens.len() - 1) as f64).round() as usize).min(pos_lens.len() - 1)];
        let cur = seqs[i].n_windows();
        if target < cur {
            let start = cur - target;
            seqs[i].cells.drain(..start);
        }
    }
}

/// Channel means over a training split, tagged with where they came from so
/// leakage checks can assert on provenance.
#[derive(Debug, Clone)]
pub struct ImputeStats {
    pub channel_mean: Vec<f64>,
    pub provenance: String,
}

/// Means over observed and carried cells of the given visits.
pub fn compute_impute_stats(visits: &[&PreparedVisit], provenance: &str) -> Result<ImputeStats> {
    let first = visits.first().ok_or(Error::EmptyDataset)?;
    let c = first.n_channels();
    let mut sums = vec![0.0; c];
    let mut counts = vec![0usize; c];
    for v in visits {
        for row in &v.cells {
            for (j, cell) in row.iter().enumerate() {
                if let Cell::Observed(x) | Cell::Carried(x) = cell {
                    sums[j] += x;
                    counts[j] += 1;
                }
            }
        }
    }
    let mut channel_mean = vec![0.0; c];
    for j in 0..c {
        if counts[j] == 0 {
            return Err(Error::InvalidData(format!(
                "channel {j} never observed in training split"
            )));
        }
        channel_mean[j] = sums[j] / counts[j] as f64;
    }
    Ok(ImputeStats { channel_mean, provenance: provenance.to_string() })
}

/// Replaces remaining missing cells with the training-split channel mean.
pub fn impute_mean(visit: &PreparedVisit, stats: &ImputeStats) -> PreparedVisit {
    let mut out = visit.clone();
    for row in &mut out.cells {
        for (j, cell) in row.iter_mut().enumerate() {
            if matches!(cell, Cell::Missing) {
                *cell = Cell::Imputed(stats.channel_mean[j]);
            }
        }
    }
    out
}

/// Draws a subset of `pool` whose per-stratum counts equal `reference`'s.
/// Strata are keyed by `key`. Fails when a stratum cannot be filled.
pub fn stratified_sample<T, K: Ord + Clone + std::fmt::Debug>(
    pool: &[T],
    reference: &[T],
    key: impl Fn(&T) -> K,
    seed: u64,
) -> Result<Vec<usize>>
where
    T: Clone,
{
    let mut wanted: BTreeMap<K, usize> = BTreeMap::new();
    for r in reference {
        *wanted.entry(key(r)).or_insert(0) += 1;
    }
    let mut by_stratum: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, p) in pool.iter().enumerate() {
        by_stratum.entry(key(p)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for (k, count) in wanted {
        let Some(candidates) = by_stratum.get_mut(&k) else {
            return Err(Error::InvalidData(format!("stratum {k:?} exhausted (absent from pool)")));
        };
        if candidates.len() < count {
            return Err(Error::InvalidData(format!(
                "stratum {k:?} exhausted: need {count}, pool has {}",
                candidates.len()
            )));
        }
        candidates.shuffle(&mut rng);
        picked.extend(candidates[..count].iter().copied());
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Counts reported by the end-to-end preprocessing pipeline.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct PipelineReport {
    pub generated: usize,
    pub excluded_short: usize,
    pub kept: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChannelEvents;

    fn one_channel_stream(kind: ChannelKind, events: Vec<(f64, f64)>, end: f64) -> RawEventStream {
        RawEventStream {
            visit_id: 1,
            channels: vec![ChannelEvents { kind, events }],
            label: false,
            endpoint_minutes: end,
            subgroup: 0,
        }
    }

    #[test]
    fn vital_window_min_max_mean() {
        let s = one_channel_stream(
            ChannelKind::Vital,
            vec![(0.0, 1.0), (10.0, 2.0), (20.0, 3.0)],
            30.0,
        );
        let agg = aggregate(&s).unwrap();
        assert_eq!(agg.n_windows(), 1);
        assert_eq!(agg.cells[0][0], Cell::Observed(1.0));
        assert_eq!(agg.cells[0][1], Cell::Observed(3.0));
        assert_eq!(agg.cells[0][2], Cell::Observed(2.0));
    }

    #[test]
    fn empty_window_is_fully_missing() {
        let s = one_channel_stream(ChannelKind::Lab, vec![(5.0, 1.0)], 90.0);
        let agg = aggregate(&s).unwrap();
        assert_eq!(agg.n_windows(), 3);
        assert_eq!(agg.cells[0][0], Cell::Observed(1.0));
        assert_eq!(agg.cells[1][0], Cell::Missing);
        assert_eq!(agg.cells[2][0], Cell::Missing);
    }

    #[test]
    fn aggregate_matches_scan_oracle() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let end = 600.0;
        let mut events = Vec::new();
        let mut t = 0.0;
        loop {
            t += rng.gen_range(3.0..80.0);
            if t >= end {
                break;
            }
            events.push((t, rng.gen_range(-2.0..2.0)));
        }
        let s = one_channel_stream(ChannelKind::Vital, events.clone(), end);
        let agg = aggregate(&s).unwrap();
        for w in 0..agg.n_windows() {
            let lo = w as f64 * WINDOW_MINUTES;
            let hi = lo + WINDOW_MINUTES;
            let in_win: Vec<f64> = events
                .iter()
                .filter(|(t, _)| *t >= lo && *t < hi)
                .map(|&(_, v)| v)
                .collect();
            if in_win.is_empty() {
                assert_eq!(agg.cells[w][0], Cell::Missing);
            } else {
                let mn = in_win.iter().cloned().fold(f64::INFINITY, f64::min);
                let mx = in_win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mean = in_win.iter().sum::<f64>() / in_win.len() as f64;
                assert_eq!(agg.cells[w][0], Cell::Observed(mn));
                assert_eq!(agg.cells[w][1], Cell::Observed(mx));
                assert!((agg.cells[w][2].value().unwrap() - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsorted_events_rejected() {
        let s = one_channel_stream(ChannelKind::Lab, vec![(40.0, 1.0), (10.0, 2.0)], 60.0);
        assert!(aggregate(&s).is_err());
    }

    fn missing_run(kind: ChannelKind, observed_at: usize, total: usize) -> AggregatedSequence {
        let mut cells = vec![vec![Cell::Missing]; total];
        cells[observed_at][0] = Cell::Observed(7.5);
        AggregatedSequence {
            visit_id: 0,
            label: false,
            subgroup: 0,
            cells,
            channel_kinds: vec![kind],
            endpoint_minutes: total as f64 * WINDOW_MINUTES,
        }
    }

    #[test]
    fn vital_carries_up_to_8_hours() {
        let seq = missing_run(ChannelKind::Vital, 0, 20);
        let cf = carry_forward(&seq);
        // windows 1..=14 (7 h) are within the horizon
        for w in 1..=14 {
            assert_eq!(cf.cells[w][0], Cell::Carried(7.5), "window {w}");
        }
        assert_eq!(cf.cells[16][0], Cell::Carried(7.5)); // 8 h exactly
        assert_eq!(cf.cells[17][0], Cell::Missing); // 8.5 h: beyond horizon
    }

    #[test]
    fn lab_carries_up_to_24_hours() {
        let seq = missing_run(ChannelKind::Lab, 0, 52);
        let cf = carry_forward(&seq);
        assert_eq!(cf.cells[47][0], Cell::Carried(7.5)); // 23.5 h
        assert_eq!(cf.cells[48][0], Cell::Carried(7.5)); // 24 h exactly
        assert_eq!(cf.cells[49][0], Cell::Missing);
    }

    #[test]
    fn carry_forward_is_idempotent() {
        let seq = missing_run(ChannelKind::Vital, 2, 40);
        let once = carry_forward(&seq);
        let twice = carry_forward(&once);
        for (a, b) in once.cells.iter().zip(&twice.cells) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn align_cut_arithmetic() {
        // onset at hour 100, horizon 48 h -> observation ends at hour 52
        let total = 200; // 100 h of windows
        let seq = missing_run(ChannelKind::Vital, 0, total);
        let out = align_truncate(&seq, 48.0, 240).unwrap();
        assert_eq!(out.n_windows(), 104); // 52 h

        // 30 h visit with a 48 h horizon is excluded
        let short = missing_run(ChannelKind::Vital, 0, 60);
        assert!(align_truncate(&short, 48.0, 240).is_none());
    }

    #[test]
    fn align_respects_visible_window() {
        let seq = missing_run(ChannelKind::Vital, 0, 400);
        let out = align_truncate(&seq, 24.0, 240).unwrap();
        assert_eq!(out.n_windows(), 240);
    }

    #[test]
    fn impute_fills_only_missing() {
        let visit = PreparedVisit {
            visit_id: 0,
            domain: 0,
            label: 0.0,
            subgroup: 0,
            cells: vec![
                vec![Cell::Observed(2.0), Cell::Missing],
                vec![Cell::Carried(2.0), Cell::Missing],
            ],
        };
        let stats = compute_impute_stats(&[&visit], "test").unwrap_err();
        // channel 1 never observed
        assert!(matches!(stats, Error::InvalidData(_)));

        let visit2 = PreparedVisit {
            cells: vec![
                vec![Cell::Observed(2.0), Cell::Observed(4.0)],
                vec![Cell::Carried(6.0), Cell::Missing],
            ],
            ..visit
        };
        let stats = compute_impute_stats(&[&visit2], "test").unwrap();
        assert_eq!(stats.channel_mean, vec![4.0, 4.0]);
        let filled = impute_mean(&visit2, &stats);
        assert_eq!(filled.cells[1][1], Cell::Imputed(4.0));
        assert_eq!(filled.cells[0][0], Cell::Observed(2.0));
        let indicators: usize = filled
            .cells
            .iter()
            .flat_map(|r| r.iter())
            .filter(|c| c.needs_indicator())
            .count();
        assert_eq!(indicators, 1);
    }

    #[test]
    fn stratified_sample_matches_reference_exactly() {
        let pool: Vec<(usize, u32)> = (0..100).map(|i| (i % 4, i as u32)).collect();
        let reference: Vec<(usize, u32)> =
            vec![(0, 0), (0, 0), (1, 0), (2, 0), (2, 0), (2, 0)];
        let picked = stratified_sample(&pool, &reference, |x| x.0, 9).unwrap();
        assert_eq!(picked.len(), reference.len());
        let mut counts = [0usize; 4];
        for &i in &picked {
            counts[pool[i].0] += 1;
        }
        assert_eq!(counts, [2, 1, 3, 0]);
    }

    #[test]
    fn stratified_sample_exhausted_stratum_errors() {
        let pool = vec![(0usize, 0u32)];
        let reference = vec![(0usize, 0u32), (0, 0)];
        assert!(stratified_sample(&pool, &reference, |x| x.0, 1).is_err());
    }

    #[test]
    fn negative_length_matching_truncates() {
        let mut seqs = Vec::new();
        for len in [10usize, 12, 14] {
            let mut s = missing_run(ChannelKind::Vital, 0, len);
            s.label = true;
            seqs.push(s);
        }
        for len in [30usize, 40, 50] {
            seqs.push(missing_run(ChannelKind::Vital, 0, len));
        }
        match_negative_lengths(&mut seqs);
        let mut neg_lens: Vec<usize> =
            seqs.iter().filter(|s| !s.label).map(|s| s.n_windows()).collect();
        neg_lens.sort_unstable();
        assert_eq!(neg_lens, vec![10, 12, 14]);
    }
}
