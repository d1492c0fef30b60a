//! Flat parameter storage.
//!
//! Every trainable tensor in the model lives in one contiguous `f64` vector,
//! addressed by `ParamId` ranges registered at construction time. Gradient
//! descent, finite-difference checking and serialization then all operate on
//! the flat vector, and the weight file is a direct dump of the registry.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{normal, ChaCha8Rng};

/// Range of one named parameter tensor inside the flat store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub offset: usize,
    pub len: usize,
}

impl ParamId {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    id: ParamId,
}

/// How a parameter tensor is filled at registration.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// `scale * N(0, 1)` per element.
    Normal(f64),
}

/// Registry plus flat value vector for all trainable parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    metas: Vec<ParamMeta>,
    by_name: HashMap<String, usize>,
    data: Vec<f64>,
}

/// Magic prefix of the weight file format.
pub const WEIGHT_MAGIC: &[u8; 8] = b"SFUSEW01";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "parameter {name} registered twice"
        );
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        match init {
            Init::Zeros => self.data.extend(std::iter::repeat(0.0).take(len)),
            Init::Ones => self.data.extend(std::iter::repeat(1.0).take(len)),
            Init::Normal(scale) => self.data.extend((0..len).map(|_| scale * normal(rng))),
        }
        let id = ParamId { offset, len };
        self.by_name.insert(name.to_string(), self.metas.len());
        self.metas.push(ParamMeta {
            name: name.to_string(),
            shape: shape.to_vec(),
            id,
        });
        id
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        &self.data[id.range()]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.range()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn total_len(&self) -> usize {
        self.data.len()
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| self.metas[i].id)
    }

    /// Applies one fixed-step gradient descent update: `p -= step * g`.
    pub fn sgd_step(&mut self, grads: &Grads, step: f64) {
        assert_eq!(self.data.len(), grads.data.len());
        for (p, g) in self.data.iter_mut().zip(&grads.data) {
            *p -= step * g;
        }
    }

    /// Writes the registry to the flat binary weight format: the magic
    /// string, a tensor count, then per tensor its name, dimension header and
    /// row-major 64-bit little-endian payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::with_capacity(16 + self.data.len() * 8);
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(self.metas.len() as u32).to_le_bytes());
        for meta in &self.metas {
            let name = meta.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(meta.shape.len() as u8);
            for &d in &meta.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in self.slice(meta.id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads values from a weight file into an already-registered store.
    /// Names, shapes and ordering must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut cur = &bytes[..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::WeightFormat("unexpected end of file".to_string()));
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != WEIGHT_MAGIC {
            return Err(Error::WeightFormat("bad magic string".to_string()));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count != self.metas.len() {
            return Err(Error::WeightFormat(format!(
                "tensor count mismatch: file has {count}, model has {}",
                self.metas.len()
            )));
        }
        for i in 0..count {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| Error::WeightFormat("non-utf8 tensor name".to_string()))?
                .to_string();
            let meta = &self.metas[i];
            if meta.name != name {
                return Err(Error::WeightFormat(format!(
                    "tensor {i} name mismatch: file {name}, model {}",
                    meta.name
                )));
            }
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            if shape != meta.shape {
                return Err(Error::WeightFormat(format!(
                    "tensor {name} shape mismatch: file {shape:?}, model {:?}",
                    meta.shape
                )));
            }
            let id = meta.id;
            let payload = take(id.len * 8)?;
            for (j, chunk) in payload.chunks_exact(8).enumerate() {
                self.data[id.offset + j] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if !cur.is_empty() {
            return Err(Error::WeightFormat("trailing bytes".to_string()));
        }
        Ok(())
    }

    /// Writes to a `Vec` rather than disk; used by byte-equality tests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(self.metas.len() as u32).to_le_bytes());
        for meta in &self.metas {
            let name = meta.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(meta.shape.len() as u8);
            for &d in &meta.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in self.slice(meta.id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Gradient vector parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    data: Vec<f64>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            data: vec![0.0; store.total_len()],
        }
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.range()]
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        &self.data[id.range()]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.l2_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            self.data.iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Pair of weight/bias ids plus dimensions; forwards and backwards through
/// the shared linear kernels.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LinearIds {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        zero_init: bool,
    ) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Normal(1.0 / (in_dim as f64).sqrt())
        };
        let w = store.register(&format!("{name}.weight"), &[out_dim, in_dim], init, rng);
        let b = store.register(&format!("{name}.bias"), &[out_dim], Init::Zeros, rng);
        LinearIds { w, b, out_dim, in_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], y: &mut [f64]) {
        crate::numerics::nn::linear_forward(
            store.slice(self.w),
            store.slice(self.b),
            x,
            self.out_dim,
            self.in_dim,
            y,
        );
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &[f64],
        gy: &[f64],
        gx: Option<&mut [f64]>,
    ) {
        // split-borrow the two gradient slices out of the flat vector
        let (w_range, b_range) = (self.w.range(), self.b.range());
        let data = &mut grads.data;
        let (gw, gb): (&mut [f64], &mut [f64]) = if w_range.end <= b_range.start {
            let (head, tail) = data.split_at_mut(b_range.start);
            (&mut head[w_range], &mut tail[..self.b.len])
        } else {
            let (head, tail) = data.split_at_mut(w_range.start);
            (&mut tail[..self.w.len], &mut head[b_range])
        };
        crate::numerics::nn::linear_backward(
            store.slice(self.w),
            x,
            gy,
            self.out_dim,
            self.in_dim,
            gw,
            gb,
            gx,
        );
    }
}

/// Layer-norm gamma/beta ids.
#[derive(Debug, Clone, Copy)]
pub struct LayerNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNormIds {
    pub fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let gamma = store.register(&format!("{name}.gamma"), &[dim], Init::Ones, rng);
        let beta = store.register(&format!("{name}.beta"), &[dim], Init::Zeros, rng);
        LayerNormIds { gamma, beta, dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64], y: &mut [f64]) -> (f64, f64) {
        crate::numerics::nn::layer_norm_forward(store.slice(self.gamma), store.slice(self.beta), x, y)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        x: &[f64],
        stats: (f64, f64),
        gy: &[f64],
        gx: &mut [f64],
    ) {
        let (g_range, b_range) = (self.gamma.range(), self.beta.range());
        let data = &mut grads.data;
        let (gg, gb): (&mut [f64], &mut [f64]) = if g_range.end <= b_range.start {
            let (head, tail) = data.split_at_mut(b_range.start);
            (&mut head[g_range], &mut tail[..self.beta.len])
        } else {
            let (head, tail) = data.split_at_mut(g_range.start);
            (&mut tail[..self.gamma.len], &mut head[b_range])
        };
        crate::numerics::nn::layer_norm_backward(
            store.slice(self.gamma),
            x,
            stats.0,
            stats.1,
            gy,
            gg,
            gb,
            gx,
        );
    }
}
