//! Named weight tensors, parameter layouts, seeded initialization and the
//! `SATW` weight file.
//!
//! # File format
//!
//! All integers little-endian:
//!
//! ```text
//! magic   "SATW"         4 bytes
//! version u32 = 1
//! count   u32
//! count x {
//!     name_len u16, name (UTF-8, name_len bytes)
//!     rank u8, dims u32 x rank
//!     data f32 x prod(dims)
//! }
//! crc32   u32            CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Tensors appear in lexicographic name order. Trailing unit extents are
//! dropped on write (a bias is rank 1, a pointwise kernel rank 2) and padded
//! back on read, so every tensor round-trips to its in-memory rank-4 shape.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, FormatError, Result};
use crate::ops::{BatchNorm, ConvSpec, BN_EPS};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"SATW";
pub const VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { fan_in: usize },
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    /// Running statistics are stored but not learned.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Ordered list of every tensor a model expects.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, dims: [usize; 4], kind: ParamKind) {
        self.specs.push(ParamSpec { name, dims, kind });
    }

    pub fn conv(&mut self, prefix: &str, spec: &ConvSpec, c_in: usize, c_out: usize) {
        let dims = spec.weight_dims(c_in, c_out);
        let fan_in = dims[1] * dims[2] * dims[3];
        self.push(format!("{prefix}.weight"), dims, ParamKind::Weight { fan_in });
        if spec.bias {
            self.push(format!("{prefix}.bias"), [c_out, 1, 1, 1], ParamKind::Bias);
        }
    }

    pub fn fc(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.push(format!("{prefix}.weight"), [c_out, c_in, 1, 1], ParamKind::Weight { fan_in: c_in });
        self.push(format!("{prefix}.bias"), [c_out, 1, 1, 1], ParamKind::Bias);
    }

    pub fn bn(&mut self, prefix: &str, c: usize) {
        for (suffix, kind) in [
            ("gamma", ParamKind::BnGamma),
            ("beta", ParamKind::BnBeta),
            ("running_mean", ParamKind::BnMean),
            ("running_var", ParamKind::BnVar),
        ] {
            self.push(format!("{prefix}.{suffix}"), [c, 1, 1, 1], kind);
        }
    }

    pub fn extend(&mut self, other: Layout) {
        self.specs.extend(other.specs);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn learnable_count(&self) -> u64 {
        self.specs
            .iter()
            .filter(|s| s.kind.is_learnable())
            .map(|s| s.numel() as u64)
            .sum()
    }

    /// Learnable scalars under a name prefix.
    pub fn learnable_count_under(&self, prefix: &str) -> u64 {
        self.specs
            .iter()
            .filter(|s| s.kind.is_learnable() && s.name.starts_with(prefix))
            .map(|s| s.numel() as u64)
            .sum()
    }

    /// Kaiming-uniform weights with unit gain (`U(-b, b)`,
    /// `b = sqrt(3 / fan_in)`), zero
    /// biases, `gamma = 1`, `beta = 0`, `mean = 0`, `var = 1`.
    ///
    /// Each tensor draws from its own ChaCha8 stream selected by the FNV-1a
    /// hash of its name, so a tensor's values depend only on `(seed, name)`.
    pub fn init(&self, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for s in &self.specs {
            let shape = Shape::derived(s.dims);
            let t = match s.kind {
                ParamKind::Weight { fan_in } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(fnv1a(&s.name));
                    let bound = (3.0 / fan_in as f64).sqrt() as f32;
                    let dist = Uniform::new_inclusive(-bound, bound);
                    let data = (0..s.numel()).map(|_| dist.sample(&mut rng)).collect();
                    Tensor::from_parts(shape, data)
                }
                ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnMean => Tensor::zeros(shape),
                ParamKind::BnGamma | ParamKind::BnVar => Tensor::ones(shape),
            };
            store.tensors.insert(s.name.clone(), t);
        }
        store
    }

    /// Every learnable tensor zero and batch norm the exact identity
    /// (`gamma = 1`, `beta = 0`, `mean = 0`, `var = 1 - eps`).
    pub fn zero_init(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for s in &self.specs {
            let shape = Shape::derived(s.dims);
            let t = match s.kind {
                ParamKind::BnGamma => Tensor::ones(shape),
                ParamKind::BnVar => Tensor::full(shape, (1.0 - BN_EPS) as f32),
                _ => Tensor::zeros(shape),
            };
            store.tensors.insert(s.name.clone(), t);
        }
        store
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Lexicographically ordered map from dotted names to tensors.
#[derive(Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.tensors.iter()).finish()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    /// Adds `t` to the tensor stored under `name`, inserting it if absent.
    pub fn accumulate(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(existing) => {
                *existing = crate::tensor::add(existing, &t)?;
            }
            None => {
                self.tensors.insert(name.to_string(), t);
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Every stored scalar, running statistics included.
    pub fn scalar_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    /// Scalars excluding batch-norm running statistics.
    pub fn learnable_count(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_buffer_name(n))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the store holds exactly the tensors of `layout`.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        for s in layout.specs() {
            let t = self.get(&s.name)?;
            if t.dims() != s.dims {
                return Err(Error::ParamShape {
                    name: s.name.clone(),
                    expected: s.dims,
                    got: t.dims(),
                });
            }
        }
        if self.len() != layout.specs().len() {
            let known: std::collections::HashSet<&str> = layout.specs().iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !known.contains(n.as_str())) {
                return Err(Error::UnexpectedParam(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn view(&self, prefix: &str) -> ParamView<'_, T> {
        ParamView {
            store: self,
            prefix: prefix.to_string(),
        }
    }

    pub fn root(&self) -> ParamView<'_, T> {
        self.view("")
    }
}

/// Read access to a store below a dotted prefix.
#[derive(Clone)]
pub struct ParamView<'a, T> {
    store: &'a ParamStore<T>,
    prefix: String,
}

impl<'a, T: Scalar> ParamView<'a, T> {
    pub fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn sub(&self, part: &str) -> ParamView<'a, T> {
        ParamView {
            store: self.store,
            prefix: self.name(part),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn tensor(&self, leaf: &str) -> Result<&'a Tensor<T>> {
        self.store.get(&self.name(leaf))
    }

    pub fn weight(&self) -> Result<&'a Tensor<T>> {
        self.tensor("weight")
    }

    pub fn bias(&self) -> Result<&'a [T]> {
        Ok(self.tensor("bias")?.data())
    }

    pub fn bn(&self) -> Result<BatchNorm<'a, T>> {
        Ok(BatchNorm {
            gamma: self.tensor("gamma")?.data(),
            beta: self.tensor("beta")?.data(),
            mean: self.tensor("running_mean")?.data(),
            var: self.tensor("running_var")?.data(),
            eps: T::of(BN_EPS),
        })
    }
}

/// Gradient sink keyed like the parameter store.
pub type Grads<T> = ParamStore<T>;

impl ParamStore<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + 4 * self.scalar_count() as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.len()).map_err(|_| Error::InvalidArgument("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
            out.push(rank as u8);
            for &d in &dims[..rank] {
                let d = u32::try_from(d).map_err(|_| FormatError::ShapeOverflow(name.clone()))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic).into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| FormatError::InvalidName(at))?
                .to_string();
            if let Some(prev) = &last {
                if *prev == name {
                    return Err(FormatError::DuplicateName(name).into());
                }
                if *prev > name {
                    return Err(FormatError::Unordered(name).into());
                }
            }
            let rank = r.u8()? as usize;
            if rank > 4 {
                return Err(FormatError::ShapeOverflow(name).into());
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().take(rank) {
                *d = r.u32()? as usize;
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some())
                .ok_or_else(|| FormatError::ShapeOverflow(name.clone()))?;
            let shape = Shape::new(dims)?;
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.tensors.insert(name.clone(), Tensor::from_parts(shape, data));
            last = Some(name);
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(FormatError::CrcMismatch { stored, computed }.into());
        }
        if r.pos != bytes.len() {
            return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - (self.bytes.len() - self.pos),
            }),
        }
    }
    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
