//! Layers used as the building blocks of the sequence models: dense layers,
//! an LSTM cell, seeded initialization, and the named-tensor checkpoint
//! format shared by every model component.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Linear => Ok(x.clone()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Walks a model's parameters in a stable order. The same order is used for
/// optimizer state, gradients, checkpoints, and hashing.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
    /// Clone of `self` whose tensors are leaves on `tape`.
    fn watch(&self, tape: &Tape) -> Self
    where
        Self: Sized;
}

pub fn named_tensors<M: Module>(m: &M) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

pub fn param_tensors<M: Module>(m: &M) -> Vec<Tensor> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.push(t.clone()));
    out
}

/// SHA-256 over names, shapes, and little-endian values in visit order.
pub fn params_hash<M: Module>(m: &M) -> String {
    let mut hasher = Sha256::new();
    m.visit("", &mut |name, t| {
        hasher.update(name.as_bytes());
        for &d in t.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.values() {
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Restores parameter values from `(name -> tensor)` pairs produced by
/// [`named_tensors`] or a checkpoint file.
pub fn load_named<M: Module>(m: &mut M, entries: &[(String, Tensor)]) -> Result<()> {
    let map: BTreeMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut err = None;
    m.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match map.get(name) {
            Some(src) if src.shape() == t.shape() => {
                if let Err(e) = t.set_values(src.values().to_vec()) {
                    err = Some(e);
                }
            }
            Some(src) => {
                err = Some(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer computing `activation(x W^T + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_size() {
            return Err(Error::ShapeMismatch {
                op: "dense_forward",
                left: x.shape().to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let pre = x.matmul(&self.weight.t()?)?.add(&self.bias)?;
        self.activation.apply(&pre)
    }
}

impl Module for DenseLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn watch(&self, tape: &Tape) -> Self {
        Self {
            weight: tape.watch(&self.weight),
            bias: tape.watch(&self.bias),
            activation: self.activation,
        }
    }
}

/// Stack of dense layers. An empty stack is the identity.
#[derive(Debug, Clone, Default)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        for layer in &self.layers {
            out = layer.forward(&out)?;
        }
        Ok(out)
    }

    pub fn out_size(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_size())
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }

    fn watch(&self, tape: &Tape) -> Self {
        Self { layers: self.layers.iter().map(|l| l.watch(tape)).collect() }
    }
}

/// LSTM cell parameters. Gate blocks are packed in `i, f, g, o` order along
/// the first axis of the weight matrices.
#[derive(Debug, Clone)]
pub struct LstmCellParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    pub hidden: usize,
}

impl LstmCellParams {
    pub fn in_size(&self) -> usize {
        self.w_ih.shape()[1]
    }

    /// One step of the standard LSTM gate equations.
    pub fn step(&self, x: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let hd = self.hidden;
        if x.shape().len() != 2 || x.shape()[1] != self.in_size() || h.shape() != c.shape() {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                left: x.shape().to_vec(),
                right: self.w_ih.shape().to_vec(),
            });
        }
        let gates = x
            .matmul(&self.w_ih.t()?)?
            .add(&h.matmul(&self.w_hh.t()?)?)?
            .add(&self.bias)?;
        let i = gates.narrow_cols(0, hd)?.sigmoid()?;
        let f = gates.narrow_cols(hd, hd)?.sigmoid()?;
        let g = gates.narrow_cols(2 * hd, hd)?.tanh()?;
        let o = gates.narrow_cols(3 * hd, hd)?.sigmoid()?;
        let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_next = o.mul(&c_next.tanh()?)?;
        Ok((h_next, c_next))
    }
}

impl Module for LstmCellParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "w_ih"), &self.w_ih);
        f(&join(prefix, "w_hh"), &self.w_hh);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "w_ih"), &mut self.w_ih);
        f(&join(prefix, "w_hh"), &mut self.w_hh);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn watch(&self, tape: &Tape) -> Self {
        Self {
            w_ih: tape.watch(&self.w_ih),
            w_hh: tape.watch(&self.w_hh),
            bias: tape.watch(&self.bias),
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    XavierUniform,
    Normal { std: f64 },
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Deterministic parameter initializer: the same seed always produces the
/// same sequence of tensors.
pub struct Initializer {
    scheme: InitScheme,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        Self { scheme, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn xavier(seed: u64) -> Self {
        Self::new(InitScheme::XavierUniform, seed)
    }

    fn draw(&mut self, n: usize, fan_in: usize, fan_out: usize) -> Result<Vec<f64>> {
        match self.scheme {
            InitScheme::XavierUniform => {
                let b = xavier_bound(fan_in, fan_out);
                Ok((0..n).map(|_| self.rng.gen_range(-b..=b)).collect())
            }
            InitScheme::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidConfig(format!("normal init: {e}")))?;
                Ok((0..n).map(|_| dist.sample(&mut self.rng)).collect())
            }
        }
    }

    pub fn weight(&mut self, out_size: usize, in_size: usize) -> Result<Tensor> {
        if out_size == 0 || in_size == 0 {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        let v = self.draw(out_size * in_size, in_size, out_size)?;
        Tensor::new(&[out_size, in_size], v)
    }

    pub fn dense(&mut self, in_size: usize, out_size: usize, activation: Activation) -> Result<DenseLayer> {
        Ok(DenseLayer {
            weight: self.weight(out_size, in_size)?,
            bias: Tensor::zeros(&[out_size]),
            activation,
        })
    }

    pub fn mlp(&mut self, sizes: &[usize], hidden_act: Activation) -> Result<Mlp> {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            layers.push(self.dense(w[0], w[1], hidden_act)?);
        }
        Ok(Mlp { layers })
    }

    pub fn lstm(&mut self, in_size: usize, hidden: usize) -> Result<LstmCellParams> {
        if in_size == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("lstm sizes must be positive".into()));
        }
        Ok(LstmCellParams {
            w_ih: self.weight(4 * hidden, in_size)?,
            w_hh: self.weight(4 * hidden, hidden)?,
            bias: Tensor::zeros(&[4 * hidden]),
            hidden,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NTCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a flat list of named tensors: magic, version, count, then per
/// tensor a length-prefixed UTF-8 name, rank, extents, and raw little-endian
/// f64 values.
pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid name".into()))?;
        let rank = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::new(&shape, values)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity() {
        let layer = DenseLayer {
            weight: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
            activation: Activation::Linear,
        };
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_zero_weight_sigmoid_bias() {
        let layer = DenseLayer {
            weight: Tensor::zeros(&[1, 3]),
            bias: Tensor::new(&[1], vec![0.5]).unwrap(),
            activation: Activation::Sigmoid,
        };
        for x in [[0.0, 0.0, 0.0], [1.0, -2.0, 7.0]] {
            let out = layer.forward(&Tensor::new(&[1, 3], x.to_vec()).unwrap()).unwrap();
            assert!((out.values()[0] - 0.6224593312018546).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let mut init = Initializer::xavier(11);
        let layer = init.dense(4, 3, Activation::Tanh).unwrap();
        let x = Tensor::new(&[2, 4], (0..8).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let out = layer.forward(&x).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut s = layer.bias.values()[o];
                for i in 0..4 {
                    s += x.values()[r * 4 + i] * layer.weight.values()[o * 4 + i];
                }
                assert!((out.values()[r * 3 + o] - s.tanh()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_shape_error() {
        let mut init = Initializer::xavier(0);
        let layer = init.dense(4, 3, Activation::Linear).unwrap();
        let x = Tensor::new(&[2, 5], vec![0.0; 10]).unwrap();
        assert!(layer.forward(&x).is_err());
    }

    #[test]
    fn lstm_all_zero() {
        let cell = LstmCellParams {
            w_ih: Tensor::zeros(&[8, 3]),
            w_hh: Tensor::zeros(&[8, 2]),
            bias: Tensor::zeros(&[8]),
            hidden: 2,
        };
        let x = Tensor::zeros(&[1, 3]);
        let h = Tensor::zeros(&[1, 2]);
        let c = Tensor::zeros(&[1, 2]);
        let (h2, c2) = cell.step(&x, &h, &c).unwrap();
        assert_eq!(h2.values(), &[0.0, 0.0]);
        assert_eq!(c2.values(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_saturated_forget_gate_keeps_cell() {
        // forget-gate bias at 20 saturates sigmoid to ~1
        let hd = 2;
        let mut bias = vec![0.0; 4 * hd];
        for b in bias.iter_mut().take(2 * hd).skip(hd) {
            *b = 20.0;
        }
        let cell = LstmCellParams {
            w_ih: Tensor::zeros(&[4 * hd, 1]),
            w_hh: Tensor::zeros(&[4 * hd, hd]),
            bias: Tensor::new(&[4 * hd], bias).unwrap(),
            hidden: hd,
        };
        let x = Tensor::zeros(&[1, 1]);
        let h = Tensor::zeros(&[1, hd]);
        let c = Tensor::new(&[1, hd], vec![0.7, -0.4]).unwrap();
        let (_, c2) = cell.step(&x, &h, &c).unwrap();
        assert!((c2.values()[0] - 0.7).abs() < 1e-8);
        assert!((c2.values()[1] + 0.4).abs() < 1e-8);
    }

    #[test]
    fn lstm_hidden_is_bounded() {
        let mut init = Initializer::xavier(5);
        let cell = init.lstm(3, 4).unwrap();
        let x = Tensor::new(&[2, 3], vec![5.0, -3.0, 2.0, 0.1, 9.0, -9.0]).unwrap();
        let h = Tensor::new(&[2, 4], vec![0.9; 8]).unwrap();
        let c = Tensor::new(&[2, 4], vec![30.0; 8]).unwrap();
        let (h2, _) = cell.step(&x, &h, &c).unwrap();
        assert!(h2.values().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Initializer::xavier(7).dense(3, 3, Activation::Tanh).unwrap();
        let b = Initializer::xavier(7).dense(3, 3, Activation::Tanh).unwrap();
        for (x, y) in a.weight.values().iter().zip(b.weight.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.bias.values().iter().all(|&v| v == 0.0));
        assert_eq!(xavier_bound(3, 3), 1.0);
        assert!(a.weight.values().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn init_rejects_zero_size() {
        assert!(Initializer::xavier(0).dense(0, 3, Activation::Linear).is_err());
        assert!(Initializer::xavier(0).lstm(3, 0).is_err());
    }

    #[test]
    fn empty_mlp_is_identity() {
        let mlp = Mlp::default();
        let x = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(mlp.forward(&x).unwrap().values(), x.values());
    }

    #[test]
    fn mlp_matches_sequential_application() {
        let mut init = Initializer::xavier(3);
        let mlp = init.mlp(&[4, 5, 2], Activation::Tanh).unwrap();
        let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let direct = mlp.forward(&x).unwrap();
        let staged = mlp.layers[1].forward(&mlp.layers[0].forward(&x).unwrap()).unwrap();
        assert_eq!(direct.values(), staged.values());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ntck");
        let entries = vec![
            ("a.weight".to_string(), Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap()),
            ("a.bias".to_string(), Tensor::new(&[2], vec![0.5, 0.25]).unwrap()),
        ];
        save_checkpoint(&path, &entries).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in entries.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.values(), t2.values());
        }
    }

    #[test]
    fn hash_tracks_values() {
        let mut init = Initializer::xavier(9);
        let mut layer = init.dense(2, 2, Activation::Linear).unwrap();
        let h1 = params_hash(&layer);
        assert_eq!(h1, params_hash(&layer));
        let mut vals = layer.weight.values().to_vec();
        vals[0] += 1.0;
        layer.weight.set_values(vals).unwrap();
        assert_ne!(h1, params_hash(&layer));
    }
}
