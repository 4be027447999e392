//! Parameter-handle helpers shared by the codec and the vector-field model.

use crate::error::{Error, Result};
use crate::masking::{AttentionMask, TemporalRule};
use crate::numeric::{Binding, Graph, ParamId, ParamStore, Real, SeededRng, Tensor, Var};

pub(crate) fn uniform_init(rng: &mut SeededRng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let d = (0..rows * cols).map(|_| rng.uniform_range(-a, a) as f32).collect();
    Tensor::from_matrix(rows, cols, d).unwrap()
}

/// Affine layer `x W + b` with a row-major `in x out` weight.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lin {
    w: ParamId,
    b: Option<ParamId>,
}

impl Lin {
    pub fn create(store: &mut ParamStore, rng: &mut SeededRng, name: &str, i: usize, o: usize, bias: bool) -> Result<Lin> {
        Self::create_with(store, name, uniform_init(rng, i, i, o), bias)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, i: usize, o: usize) -> Result<Lin> {
        Self::create_with(store, name, Tensor::zeros(&[i, o]), true)
    }

    fn create_with(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Result<Lin> {
        let o = w.cols();
        let w = store.insert(format!("{name}.w"), w, true)?;
        let b = if bias {
            Some(store.insert(format!("{name}.b"), Tensor::zeros(&[1, o]), true)?)
        } else {
            None
        };
        Ok(Lin { w, b })
    }

    pub fn find<T: Real>(store: &ParamStore<T>, name: &str, i: usize, o: usize, bias: bool) -> Result<Lin> {
        Ok(Lin {
            w: find_param(store, &format!("{name}.w"), &[i, o])?,
            b: if bias {
                Some(find_param(store, &format!("{name}.b"), &[1, o])?)
            } else {
                None
            },
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.w), self.b.map(|p| b.var(p)))
    }
}

pub(crate) fn find_param<T: Real>(store: &ParamStore<T>, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
    if store.get(id).shape() != shape {
        return Err(Error::Format(format!(
            "`{name}` has shape {:?}, expected {shape:?}",
            store.get(id).shape()
        )));
    }
    Ok(id)
}

/// Keys and values already computed for earlier frames.
#[derive(Clone, Debug, PartialEq)]
pub struct KvPrefix<T = f32> {
    pub frames: Vec<usize>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> KvPrefix<T> {
    pub fn empty(width: usize) -> Self {
        Self {
            frames: Vec::new(),
            k: Tensor::zeros(&[0, width]),
            v: Tensor::zeros(&[0, width]),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Concatenation of several prefixes, in order.
    pub fn join<'a>(parts: impl IntoIterator<Item = &'a KvPrefix<T>>, width: usize) -> Self {
        let parts: Vec<&KvPrefix<T>> = parts.into_iter().collect();
        if parts.is_empty() {
            return Self::empty(width);
        }
        let frames = parts.iter().flat_map(|p| p.frames.iter().copied()).collect();
        let k = Tensor::concat_rows(&parts.iter().map(|p| &p.k).collect::<Vec<_>>()).unwrap();
        let v = Tensor::concat_rows(&parts.iter().map(|p| &p.v).collect::<Vec<_>>()).unwrap();
        Self { frames, k, v }
    }

    pub fn bytes(&self) -> usize {
        (self.k.len() + self.v.len()) * std::mem::size_of::<T>() + self.frames.len() * std::mem::size_of::<usize>()
    }
}

/// Multi-head attention block with rotary queries and keys.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

/// Output of an attention site plus the keys and values of the new frames.
pub(crate) struct AttnOut {
    pub out: Var,
    pub k: Var,
    pub v: Var,
}

impl Attn {
    pub fn create(store: &mut ParamStore, rng: &mut SeededRng, name: &str, h: usize) -> Result<Attn> {
        Ok(Attn {
            q: Lin::create(store, rng, &format!("{name}.q"), h, h, false)?,
            k: Lin::create(store, rng, &format!("{name}.k"), h, h, false)?,
            v: Lin::create(store, rng, &format!("{name}.v"), h, h, false)?,
            o: Lin::create(store, rng, &format!("{name}.o"), h, h, true)?,
        })
    }

    pub fn find<T: Real>(store: &ParamStore<T>, name: &str, h: usize) -> Result<Attn> {
        Ok(Attn {
            q: Lin::find(store, &format!("{name}.q"), h, h, false)?,
            k: Lin::find(store, &format!("{name}.k"), h, h, false)?,
            v: Lin::find(store, &format!("{name}.v"), h, h, false)?,
            o: Lin::find(store, &format!("{name}.o"), h, h, true)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        xq: Var,
        xkv: Var,
        q_frames: &[usize],
        kv_frames: &[usize],
        prefix: Option<&KvPrefix<T>>,
        rule: &TemporalRule,
        heads: usize,
    ) -> Result<AttnOut> {
        let q = self.q.apply(g, b, xq)?;
        let q = g.rope(q, q_frames, heads)?;
        let k = self.k.apply(g, b, xkv)?;
        let k = g.rope(k, kv_frames, heads)?;
        let v = self.v.apply(g, b, xkv)?;
        let (k_all, v_all, frames) = match prefix {
            Some(p) if !p.is_empty() => {
                let pk = g.constant(p.k.clone());
                let pv = g.constant(p.v.clone());
                let k_all = g.concat_rows(&[pk, k])?;
                let v_all = g.concat_rows(&[pv, v])?;
                let mut frames = p.frames.clone();
                frames.extend_from_slice(kv_frames);
                (k_all, v_all, frames)
            }
            _ => (k, v, kv_frames.to_vec()),
        };
        let mask = AttentionMask::from_rule(q_frames, &frames, rule);
        let a = g.attention(q, k_all, v_all, &mask, heads)?;
        let out = self.o.apply(g, b, a)?;
        Ok(AttnOut { out, k, v })
    }
}

/// Two-layer SiLU feed-forward block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ffn {
    up: Lin,
    down: Lin,
}

impl Ffn {
    pub fn create(store: &mut ParamStore, rng: &mut SeededRng, name: &str, h: usize, inner: usize) -> Result<Ffn> {
        Ok(Ffn {
            up: Lin::create(store, rng, &format!("{name}.up"), h, inner, true)?,
            down: Lin::create(store, rng, &format!("{name}.down"), inner, h, true)?,
        })
    }

    pub fn find<T: Real>(store: &ParamStore<T>, name: &str, h: usize, inner: usize) -> Result<Ffn> {
        Ok(Ffn {
            up: Lin::find(store, &format!("{name}.up"), h, inner, true)?,
            down: Lin::find(store, &format!("{name}.down"), inner, h, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.up.apply(g, b, x)?;
        let h = g.silu(h);
        self.down.apply(g, b, h)
    }
}
