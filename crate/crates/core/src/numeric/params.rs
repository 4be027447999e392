use std::collections::HashMap;
use std::path::Path;

use super::graph::{Gradients, Graph, Var};
use super::scalar::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Loads every parameter into `g`; trainable entries become gradient leaves.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Gradients aligned with the entries; zero where nothing was reached.
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(&binding.vars)
            .map(|(e, &v)| match grads.get(v) {
                Some(t) if e.trainable => t.clone(),
                _ => Tensor::zeros(e.value.shape()),
            })
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| Tensor::zeros(e.value.shape())).collect()
    }
}

/// Graph handles for every entry of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Adds `src` into `dst` elementwise, entry by entry.
pub fn accumulate<T: Real>(dst: &mut [Tensor<T>], src: &[Tensor<T>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (a, &b) in d.data_mut().iter_mut().zip(s.data()) {
            *a += b;
        }
    }
}

pub fn write_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    buf.push(DTYPE_F32);
    buf.push(t.shape().len() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Little-endian cursor over a byte buffer.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.bytes(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn tensor(&mut self) -> Result<Tensor<f32>> {
        let dtype = self.u8("tensor dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unknown dtype {dtype}")));
        }
        let rank = self.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
        let bytes = self.bytes(
            n.checked_mul(4).ok_or(Error::Truncated("tensor payload"))?,
            "tensor payload",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn params_to_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.iter() {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        write_tensor(&mut buf, &e.value);
    }
    buf
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let t = r.tensor()?;
        store.insert(name, t, true)?;
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after last entry".into()));
    }
    Ok(store)
}

pub fn save_params(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params_to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_matrix(2, 3, vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap(), true)
            .unwrap();
        s.insert("b/bias", Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = sample();
        let back = params_from_bytes(&params_to_bytes(&s)).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in s.iter().zip(back.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.shape(), y.value.shape());
            let xb: Vec<u32> = x.value.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn layout_matches_format() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true).unwrap();
        let b = params_to_bytes(&s);
        let mut expect = b"AFCK".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'w');
        expect.push(0);
        expect.push(1);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn errors_are_distinct() {
        let good = params_to_bytes(&sample());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(params_from_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(params_from_bytes(&bad), Err(Error::BadVersion(9))));
        assert!(matches!(
            params_from_bytes(&good[..good.len() - 3]),
            Err(Error::Truncated(_))
        ));
        let mut s = ParamStore::<f32>::new();
        s.insert("x", Tensor::scalar(1.0), true).unwrap();
        let mut dup = params_to_bytes(&s);
        dup[8..12].copy_from_slice(&2u32.to_le_bytes());
        let entry = dup[12..].to_vec();
        dup.extend_from_slice(&entry);
        assert!(matches!(params_from_bytes(&dup), Err(Error::DuplicateName(n)) if n == "x"));
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let s = sample();
        let mut g = Graph::<f32>::new();
        let b = s.bind(&mut g);
        let a = b.var(s.id("a").unwrap());
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        let all = s.collect_grads(&b, &grads);
        assert!(all[0].data().iter().all(|&x| x == 1.0));
        assert!(all[1].data().iter().all(|&x| x == 0.0));
    }
}
