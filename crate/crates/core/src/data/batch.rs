use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PreparedVisit;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A padded batch of sequences. The model input concatenates value channels
/// and their missing-indicator channels along the feature axis, so
/// `values` is `[batch, T, 2 * value_dim]`. Padded steps are all zero and
/// masked out.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub values: Tensor,
    pub step_mask: Tensor,
    pub labels: Vec<f64>,
    pub domains: Vec<u8>,
    pub lengths: Vec<usize>,
    /// Stable per-sequence keys driving the per-sequence sampling noise.
    pub seq_keys: Vec<u64>,
    pub value_dim: usize,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn max_len(&self) -> usize {
        self.step_mask.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        2 * self.value_dim
    }

    /// Mask column for step `t` as `[batch, 1]`.
    pub fn mask_at(&self, t: usize) -> Result<Tensor> {
        self.step_mask.narrow_cols(t, 1)
    }
}

fn seq_key(domain: u8, visit_id: u64) -> u64 {
    ((domain as u64) << 56) ^ visit_id
}

/// Pads the given visits to the longest length among them.
pub fn make_batch(visits: &[&PreparedVisit]) -> Result<SequenceBatch> {
    if visits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = visits[0].n_channels();
    let max_len = visits.iter().map(|v| v.len()).max().unwrap();
    if max_len == 0 {
        return Err(Error::InvalidData("batch contains only empty sequences".into()));
    }
    let b = visits.len();
    let d = 2 * c;
    let mut values = vec![0.0; b * max_len * d];
    let mut mask = vec![0.0; b * max_len];
    let mut labels = Vec::with_capacity(b);
    let mut domains = Vec::with_capacity(b);
    let mut lengths = Vec::with_capacity(b);
    let mut keys = Vec::with_capacity(b);
    for (i, v) in visits.iter().enumerate() {
        if v.n_channels() != c {
            return Err(Error::InvalidData("inconsistent channel counts in batch".into()));
        }
        if v.label != 0.0 && v.label != 1.0 {
            return Err(Error::BadLabel(v.label));
        }
        for (t, row) in v.cells.iter().enumerate() {
            mask[i * max_len + t] = 1.0;
            let base = i * max_len * d + t * d;
            for (j, cell) in row.iter().enumerate() {
                match cell.value() {
                    Some(x) => values[base + j] = x,
                    None => {
                        return Err(Error::InvalidData(
                            "batching requires imputed visits (missing cell found)".into(),
                        ))
                    }
                }
                values[base + c + j] = cell.needs_indicator() as u8 as f64;
            }
        }
        labels.push(v.label);
        domains.push(v.domain);
        lengths.push(v.len());
        keys.push(seq_key(v.domain, v.visit_id));
    }
    Ok(SequenceBatch {
        values: Tensor::new(&[b, max_len, d], values)?,
        step_mask: Tensor::new(&[b, max_len], mask)?,
        labels,
        domains,
        lengths,
        seq_keys: keys,
        value_dim: c,
    })
}

/// Shuffles by the epoch seed and chunks into batches of at most
/// `batch_size`, padding each batch to its own longest sequence.
pub fn batch_all(
    visits: &[&PreparedVisit],
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<SequenceBatch>> {
    if visits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..visits.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let slice: Vec<&PreparedVisit> = chunk.iter().map(|&i| visits[i]).collect();
        out.push(make_batch(&slice)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cell;

    fn visit(id: u64, len: usize, label: f64) -> PreparedVisit {
        PreparedVisit {
            visit_id: id,
            domain: 0,
            label,
            subgroup: 0,
            cells: vec![vec![Cell::Observed(id as f64 + 0.5), Cell::Imputed(0.0)]; len],
        }
    }

    #[test]
    fn single_sequence_mask() {
        let v = visit(1, 3, 0.0);
        let b = make_batch(&[&v]).unwrap();
        assert_eq!(b.step_mask.values(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.value_dim, 2);
        assert_eq!(b.input_dim(), 4);
    }

    #[test]
    fn two_lengths_pad_to_longest() {
        let v3 = visit(1, 3, 0.0);
        let v5 = visit(2, 5, 1.0);
        let b = make_batch(&[&v3, &v5]).unwrap();
        assert_eq!(b.max_len(), 5);
        assert_eq!(&b.step_mask.values()[..5], &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(&b.step_mask.values()[5..], &[1.0; 5]);
        // padded steps are all-zero
        let d = b.input_dim();
        let base = 0 * 5 * d + 3 * d;
        assert!(b.values.values()[base..base + 2 * d].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unbatch_recovers_values() {
        let visits: Vec<PreparedVisit> = (0..5).map(|i| visit(i, 2 + i as usize, 0.0)).collect();
        let refs: Vec<&PreparedVisit> = visits.iter().collect();
        let batches = batch_all(&refs, 2, 99).unwrap();
        let mut seen = 0;
        for b in &batches {
            let d = b.input_dim();
            for (i, &key) in b.seq_keys.iter().enumerate() {
                let orig = visits.iter().find(|v| v.visit_id == key).unwrap();
                for t in 0..b.lengths[i] {
                    let got = b.values.values()[i * b.max_len() * d + t * d];
                    assert_eq!(got, orig.cells[t][0].value().unwrap());
                }
                seen += 1;
            }
        }
        assert_eq!(seen, 5);
    }

    #[test]
    fn indicator_channels_present() {
        let mut v = visit(0, 2, 1.0);
        v.cells[1][0] = Cell::Imputed(9.0);
        let b = make_batch(&[&v]).unwrap();
        let d = b.input_dim();
        // indicator of channel 0 at t=1
        assert_eq!(b.values.values()[d + 2], 1.0);
        assert_eq!(b.values.values()[2], 0.0);
    }

    #[test]
    fn bad_label_rejected() {
        let v = visit(0, 2, 0.5);
        assert!(matches!(make_batch(&[&v]), Err(Error::BadLabel(_))));
    }
}
