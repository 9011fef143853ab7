//! Trainable parameters, Glorot initialization, Adam and the `DSGW` checkpoint format.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    /// Frozen parameters keep their gradient but are skipped by the optimizer.
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        let grad = Tensor2::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad, frozen: false }
    }
}

/// Ordered collection of parameters. Order is creation order and is what checkpoints record.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` weight.
    pub fn add_glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        self.add_glorot_block(name, fan_in, fan_out, fan_in, fan_out, rng)
    }

    /// A `rows × cols` block of a larger `fan_in × fan_out` Glorot-initialized weight.
    pub fn add_glorot_block(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit));
        self.add(name, w)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale · grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (i, g) in grads.iter() {
            let p = &mut self.params[i.0];
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    slots: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub(crate) fn add(&mut self, id: ParamId, g: &Tensor2) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor2> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |p: &Parameter| Tensor2::zeros(p.value.rows(), p.value.cols());
        Self {
            config,
            step: 0,
            m: store.params.iter().map(zeros).collect(),
            v: store.params.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every non-frozen parameter.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for (k, &g) in p.grad.data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DSGW";
const CHECKPOINT_VERSION: u16 = 1;

/// Named tensors in the `DSGW` layout: magic, u16 version, u32 count, then per entry a
/// u32 name length, UTF-8 name, u32 rows, u32 cols and a row-major f32 payload, all little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor2)>,
}

impl Checkpoint {
    /// Parameters in store order, followed by `adam.m.*`, `adam.v.*` and `adam.step` when given.
    pub fn capture(store: &ParamStore, adam: Option<&Adam>) -> Self {
        let mut entries: Vec<(String, Tensor2)> =
            store.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        if let Some(adam) = adam {
            for (p, m) in store.params.iter().zip(&adam.m) {
                entries.push((format!("adam.m.{}", p.name), m.clone()));
            }
            for (p, v) in store.params.iter().zip(&adam.v) {
                entries.push((format!("adam.v.{}", p.name), v.clone()));
            }
            entries.push(("adam.step".into(), Tensor2::scalar(adam.step as f64)));
        }
        Self { entries }
    }

    fn lookup(&self, name: &str) -> Option<&Tensor2> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `store`; every parameter must be present with a matching shape.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        for p in &mut store.params {
            let t = self
                .lookup(&p.name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{} stored as {:?}, model expects {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn restore_adam(&self, store: &ParamStore, adam: &mut Adam) -> Result<()> {
        for (i, p) in store.params.iter().enumerate() {
            if let Some(m) = self.lookup(&format!("adam.m.{}", p.name)) {
                adam.m[i] = m.clone();
            }
            if let Some(v) = self.lookup(&format!("adam.v.{}", p.name)) {
                adam.v[i] = v.clone();
            }
        }
        if let Some(s) = self.lookup("adam.step") {
            adam.step = s.item() as u64;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected DSGW"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let payload = r.take(rows * cols * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            entries.push((name, Tensor2::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
