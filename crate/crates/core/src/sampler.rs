//! Blockwise streaming generation with rolling key/value caches, Euler
//! integration of the guided vector field and per-block latency records.

use std::collections::VecDeque;
use std::sync::mpsc::Receiver;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::model::{ConditionTriplet, DenoiserPrefix, EncoderPrefix, Rules, VectorField};
use crate::nn::KvPrefix;
use crate::numeric::{write_tensor, Graph, ParamStore, Reader, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    /// One block at a time, no future context.
    Strict,
    /// Co-denoise `l + 1` blocks and emit the oldest; output lags `l` blocks.
    Delayed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Rolling cache capacity `M` in blocks.
    pub cache_blocks: usize,
    pub mode: StreamMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance: 2.0,
            cache_blocks: 8,
            mode: StreamMode::Strict,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0) || !self.guidance.is_finite() {
            return Err(Error::Config(format!("guidance scale {} must be finite and >= 0", self.guidance)));
        }
        if self.cache_blocks == 0 {
            return Err(Error::Config("cache_blocks must be at least 1".into()));
        }
        Ok(())
    }
}

/// `v_null + s (v_cond - v_null)`.
pub fn guide(v_null: &Tensor, v_cond: &Tensor, s: f64) -> Result<Tensor> {
    v_null.expect_same_shape(v_cond, "guidance branches")?;
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_null.clone());
    }
    let s = s as f32;
    v_null.zip_map(v_cond, |n, c| n + s * (c - n))
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `1` on a uniform grid.
pub fn euler(x0: &Tensor, steps: usize, mut field: impl FnMut(&Tensor, f64) -> Result<Tensor>) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Invalid("euler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let v = field(&x, i as f64 * dt)?;
        let h = dt as f32;
        x = x.zip_map(&v, |a, b| a + h * b)?;
    }
    Ok(x)
}

/// Keys and values that one finished block contributes to every attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockKv {
    pub encoder: Option<(KvPrefix, KvPrefix)>,
    pub self_attn: Vec<KvPrefix>,
    pub cross: Vec<KvPrefix>,
}

impl BlockKv {
    pub fn bytes(&self) -> usize {
        let enc = self.encoder.as_ref().map_or(0, |(a, b)| a.bytes() + b.bytes());
        enc + self.self_attn.iter().chain(&self.cross).map(KvPrefix::bytes).sum::<usize>()
    }
}

/// Rolling per-layer caches for frame tokens (KV) and condition tokens (cKV).
#[derive(Clone, Debug)]
pub struct KVCacheSet {
    capacity: usize,
    depth: usize,
    width: usize,
    blocks: VecDeque<BlockKv>,
}

impl KVCacheSet {
    pub fn new(capacity: usize, depth: usize, width: usize) -> Self {
        Self {
            capacity,
            depth,
            width,
            blocks: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Cached blocks of frame keys and values.
    pub fn kv_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Cached blocks of condition keys and values.
    pub fn ckv_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.cross.len() == self.depth).count()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Frame indices held by the oldest-to-newest cached blocks.
    pub fn frames(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .flat_map(|b| b.self_attn.first().map(|p| p.frames.clone()).unwrap_or_default())
            .collect()
    }

    /// Appends a block, evicting and returning the oldest one when full.
    pub fn push(&mut self, block: BlockKv) -> Result<Option<BlockKv>> {
        if block.self_attn.len() != self.depth || block.cross.len() != self.depth {
            return Err(Error::Invalid(format!(
                "block carries {}/{} layers, cache depth is {}",
                block.self_attn.len(),
                block.cross.len(),
                self.depth
            )));
        }
        let evicted = if self.blocks.len() == self.capacity {
            self.blocks.pop_front()
        } else {
            None
        };
        self.blocks.push_back(block);
        Ok(evicted)
    }

    pub fn bytes(&self) -> usize {
        self.blocks.iter().map(BlockKv::bytes).sum()
    }

    pub fn encoder_prefix(&self) -> EncoderPrefix {
        let pick = |f: fn(&(KvPrefix, KvPrefix)) -> &KvPrefix| {
            KvPrefix::join(self.blocks.iter().filter_map(|b| b.encoder.as_ref().map(f)), self.width)
        };
        EncoderPrefix {
            ca1: pick(|e| &e.0),
            ca2: pick(|e| &e.1),
        }
    }

    pub fn denoiser_prefix(&self) -> DenoiserPrefix {
        let layer = |l: usize, cross: bool| {
            KvPrefix::join(
                self.blocks
                    .iter()
                    .map(|b| if cross { &b.cross[l] } else { &b.self_attn[l] }),
                self.width,
            )
        };
        DenoiserPrefix {
            self_attn: (0..self.depth).map(|l| layer(l, false)).collect(),
            cross: (0..self.depth).map(|l| layer(l, true)).collect(),
        }
    }
}

/// Per-block wall-clock times of a session.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub per_block_ms: Vec<f64>,
    pub first_block_ms: f64,
}

impl LatencyReport {
    /// Max over min per-block time, ignoring the first `warmup` blocks.
    pub fn max_min_ratio(&self, warmup: usize) -> f64 {
        let t = &self.per_block_ms[warmup.min(self.per_block_ms.len() - 1)..];
        let max = t.iter().cloned().fold(f64::MIN, f64::max);
        let min = t.iter().cloned().fold(f64::MAX, f64::min);
        max / min
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,ms\n");
        for (i, ms) in self.per_block_ms.iter().enumerate() {
            s.push_str(&format!("{i},{ms:.6}\n"));
        }
        s
    }
}

/// One emitted block of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamRecord {
    pub index: u32,
    pub wall_ns: u64,
    pub motion: Tensor,
}

pub fn stream_dump_to_bytes(records: &[StreamRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        out.extend_from_slice(&r.index.to_le_bytes());
        out.extend_from_slice(&r.wall_ns.to_le_bytes());
        write_tensor(&mut out, &r.motion);
    }
    out
}

pub fn stream_dump_from_bytes(bytes: &[u8]) -> Result<Vec<StreamRecord>> {
    let mut r = Reader::new(bytes);
    let mut out = Vec::new();
    while !r.is_done() {
        let index = r.u32("block index")?;
        let wall_ns = r.u64("wall time")?;
        let motion = r.tensor()?;
        out.push(StreamRecord { index, wall_ns, motion });
    }
    Ok(out)
}

struct Eval {
    field: Tensor,
    self_kv: Vec<KvPrefix>,
    cross_kv: Vec<KvPrefix>,
}

/// A live generation stream for one avatar.
pub struct StreamSession<'a> {
    model: &'a VectorField,
    params: &'a ParamStore,
    config: SamplerConfig,
    m_s: Tensor,
    z_s: Tensor,
    rules: Rules,
    cond_cache: KVCacheSet,
    null_cache: KVCacheSet,
    rng: SeededRng,
    pending: VecDeque<ConditionTriplet>,
    consumed: usize,
    emitted: usize,
    latency_ns: Vec<u64>,
    closed: bool,
}

/// Starts a session with empty caches and a seeded noise stream.
pub fn open_session<'a>(
    model: &'a VectorField,
    params: &'a ParamStore,
    z_s: &Tensor,
    m_s: &Tensor,
    config: SamplerConfig,
) -> Result<StreamSession<'a>> {
    config.validate()?;
    let c = &model.config;
    if m_s.shape() != [1, c.latent_dim] || z_s.shape() != [1, c.latent_dim] {
        return Err(Error::Mismatch(format!(
            "reference latents {:?} / {:?}, model latent dim {}",
            m_s.shape(),
            z_s.shape(),
            c.latent_dim
        )));
    }
    VectorField::from_params(c.clone(), params).map_err(|e| Error::Mismatch(e.to_string()))?;
    let rules = match config.mode {
        StreamMode::Strict => c.strict_rules(),
        StreamMode::Delayed => c.training_rules(),
    }
    .with_history(Some(config.cache_blocks));
    Ok(StreamSession {
        model,
        params,
        m_s: m_s.clone(),
        z_s: z_s.clone(),
        rules,
        cond_cache: KVCacheSet::new(config.cache_blocks, c.depth, c.width),
        null_cache: KVCacheSet::new(config.cache_blocks, c.depth, c.width),
        rng: SeededRng::new(config.seed).derive(31),
        pending: VecDeque::new(),
        consumed: 0,
        emitted: 0,
        latency_ns: Vec::new(),
        closed: false,
        config,
    })
}

impl<'a> StreamSession<'a> {
    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn cached_blocks(&self) -> usize {
        self.cond_cache.len()
    }

    pub fn cache(&self) -> &KVCacheSet {
        &self.cond_cache
    }

    /// Bytes held by both guidance branches' caches.
    pub fn cache_bytes(&self) -> usize {
        self.cond_cache.bytes() + self.null_cache.bytes()
    }

    pub fn blocks_emitted(&self) -> usize {
        self.emitted
    }

    pub fn blocks_consumed(&self) -> usize {
        self.consumed
    }

    fn use_cond(&self) -> bool {
        self.config.guidance != 0.0
    }

    fn use_null(&self) -> bool {
        self.config.guidance != 1.0
    }

    fn encode(&self, cond: &ConditionTriplet, frames: &[usize]) -> Result<(Tensor, KvPrefix, KvPrefix)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let prefix = self.cond_cache.encoder_prefix();
        let e = self
            .model
            .encode_condition(&mut g, &b, cond, frames, &self.rules.encoder, Some(&prefix))?;
        let kv = |(k, v): (Var, Var)| KvPrefix {
            frames: frames.to_vec(),
            k: g.value(k).clone(),
            v: g.value(v).clone(),
        };
        Ok((g.value(e.cond).clone(), kv(e.ca1), kv(e.ca2)))
    }

    #[allow(clippy::too_many_arguments)]
    fn eval(
        &self,
        x: &Tensor,
        times: &[f64],
        cond: Option<&Tensor>,
        frames: &[usize],
        rules: &Rules,
        prefix: &DenoiserPrefix,
    ) -> Result<Eval> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let c = match cond {
            Some(c) => g.constant(c.clone()),
            None => self.model.null_condition(&mut g, &b, x.rows()),
        };
        let xv = g.constant(x.clone());
        let ms = g.constant(self.m_s.clone());
        let out = self
            .model
            .predict(&mut g, &b, xv, times, c, ms, frames, rules, Some(prefix))?;
        let kv = |(k, v): (Var, Var)| KvPrefix {
            frames: frames.to_vec(),
            k: g.value(k).clone(),
            v: g.value(v).clone(),
        };
        Ok(Eval {
            field: g.value(out.field).clone(),
            self_kv: out.self_kv.into_iter().map(kv).collect(),
            cross_kv: out.cross_kv.into_iter().map(kv).collect(),
        })
    }

    fn check_block(&self, cond: &ConditionTriplet) -> Result<()> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        cond.validate(&self.model.config)?;
        if cond.len() != self.model.config.block_size {
            return Err(Error::Shape(format!(
                "condition block has {} frames, block size is {}",
                cond.len(),
                self.model.config.block_size
            )));
        }
        Ok(())
    }

    /// Consumes one block of conditions. Strict mode returns the generated
    /// block at once; delayed mode returns `None` until `l` blocks of future
    /// conditions are buffered.
    pub fn push_block(&mut self, cond: &ConditionTriplet) -> Result<Option<Tensor>> {
        self.check_block(cond)?;
        let start = Instant::now();
        self.consumed += 1;
        self.pending.push_back(cond.clone());
        let need = match self.config.mode {
            StreamMode::Strict => 1,
            StreamMode::Delayed => self.model.config.look_ahead + 1,
        };
        if self.pending.len() < need {
            return Ok(None);
        }
        let out = self.emit()?;
        self.latency_ns.push((start.elapsed().as_nanos() as u64).max(1));
        Ok(Some(out))
    }

    /// Emits every buffered block, with a shrinking look-ahead window.
    pub fn flush(&mut self) -> Result<Vec<Tensor>> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        let mut out = Vec::new();
        while !self.pending.is_empty() {
            let start = Instant::now();
            out.push(self.emit()?);
            self.latency_ns.push((start.elapsed().as_nanos() as u64).max(1));
        }
        Ok(out)
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Pulls condition blocks from a bounded hand-off until the sender hangs
    /// up, then flushes.
    pub fn drain(&mut self, rx: &Receiver<ConditionTriplet>) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        for cond in rx.iter() {
            out.extend(self.push_block(&cond)?);
        }
        out.extend(self.flush()?);
        Ok(out)
    }

    fn emit(&mut self) -> Result<Tensor> {
        let bs = self.model.config.block_size;
        let d = self.model.config.latent_dim;
        let k = self.emitted;
        let w = self.pending.len();
        let parts: Vec<&ConditionTriplet> = self.pending.iter().collect();
        let cond = ConditionTriplet::concat(&parts)?;
        let frames: Vec<usize> = (k * bs..(k + w) * bs).collect();
        let (c, ca1, ca2) = self.encode(&cond, &frames)?;
        let pc = self.cond_cache.denoiser_prefix();
        let pn = self.null_cache.denoiser_prefix();
        let noise = self.rng.gaussian(&[w * bs, d]);
        let s = self.config.guidance;
        let rules = self.rules.clone();
        let x = euler(&noise, self.config.steps, |x, t| {
            let times = vec![t; x.rows()];
            let vc = if self.use_cond() {
                Some(self.eval(x, &times, Some(&c), &frames, &rules, &pc)?.field)
            } else {
                None
            };
            let vn = if self.use_null() {
                Some(self.eval(x, &times, None, &frames, &rules, &pn)?.field)
            } else {
                None
            };
            match (vn, vc) {
                (Some(n), Some(c)) => guide(&n, &c, s),
                (Some(n), None) => Ok(n),
                (None, Some(c)) => Ok(c),
                (None, None) => unreachable!(),
            }
        })?;
        let block = x.slice_rows(0, bs);
        let own: Vec<usize> = frames[..bs].to_vec();
        let c0 = c.slice_rows(0, bs);
        let ones = vec![1.0; bs];
        let first = |p: KvPrefix| KvPrefix {
            frames: own.clone(),
            k: p.k.slice_rows(0, bs),
            v: p.v.slice_rows(0, bs),
        };
        let enc = Some((first(ca1), first(ca2)));
        let update = |e: Eval, enc: Option<(KvPrefix, KvPrefix)>| BlockKv {
            encoder: enc,
            self_attn: e.self_kv,
            cross: e.cross_kv,
        };
        let ec = self.eval(&block, &ones, Some(&c0), &own, &rules, &pc)?;
        let en = if self.use_null() {
            Some(self.eval(&block, &ones, None, &own, &rules, &pn)?)
        } else {
            None
        };
        self.cond_cache.push(update(ec, enc))?;
        if let Some(en) = en {
            self.null_cache.push(update(en, None))?;
        }
        self.pending.pop_front();
        self.emitted += 1;
        Ok(block)
    }

    /// Decodes `z_S + m` for every frame of a generated block.
    pub fn decode_block(&self, codec: &Codec, motion: &Tensor) -> Result<Tensor> {
        codec.decode_with_identity(&self.z_s, motion)
    }

    pub fn latency_report(&self) -> Result<LatencyReport> {
        if self.latency_ns.len() < 2 {
            return Err(Error::Invalid(format!(
                "latency report needs two blocks, have {}",
                self.latency_ns.len()
            )));
        }
        let per_block_ms: Vec<f64> = self.latency_ns.iter().map(|&n| n as f64 / 1e6).collect();
        Ok(LatencyReport {
            first_block_ms: per_block_ms[0],
            per_block_ms,
        })
    }

    pub fn latency_ns(&self) -> &[u64] {
        &self.latency_ns
    }
}

fn pad_to_blocks(cond: &ConditionTriplet, bs: usize) -> Result<ConditionTriplet> {
    let n = cond.len();
    if n == 0 {
        return Err(Error::Invalid("empty condition stream".into()));
    }
    let total = n.div_ceil(bs) * bs;
    if total == n {
        return Ok(cond.clone());
    }
    let last = cond.slice(n - 1, 1);
    let mut parts = vec![cond];
    let tail: Vec<ConditionTriplet> = (n..total).map(|_| last.clone()).collect();
    parts.extend(tail.iter());
    ConditionTriplet::concat(&parts)
}

/// Streams a whole condition sequence and returns the `N x d` motion latents.
/// The final partial block is padded by repeating the last condition frame.
pub fn generate(
    model: &VectorField,
    params: &ParamStore,
    cond: &ConditionTriplet,
    z_s: &Tensor,
    m_s: &Tensor,
    config: &SamplerConfig,
) -> Result<Tensor> {
    let bs = model.config.block_size;
    let padded = pad_to_blocks(cond, bs)?;
    let mut session = open_session(model, params, z_s, m_s, config.clone())?;
    let mut blocks = Vec::new();
    for k in 0..padded.len() / bs {
        blocks.extend(session.push_block(&padded.slice(k * bs, bs))?);
    }
    blocks.extend(session.flush()?);
    let all = Tensor::concat_rows(&blocks.iter().collect::<Vec<_>>())?;
    Ok(all.slice_rows(0, cond.len()))
}

/// Strict-mode generation without caches: every field evaluation runs over
/// the whole history, with keys older than `cache_blocks` blocks masked out.
pub fn generate_reference(
    model: &VectorField,
    params: &ParamStore,
    cond: &ConditionTriplet,
    m_s: &Tensor,
    config: &SamplerConfig,
    blocks: usize,
) -> Result<Tensor> {
    config.validate()?;
    let c = &model.config;
    let bs = c.block_size;
    if cond.len() < blocks * bs {
        return Err(Error::Shape(format!("{} condition frames for {blocks} blocks", cond.len())));
    }
    let rules = c.strict_rules().with_history(Some(config.cache_blocks));
    let mut rng = SeededRng::new(config.seed).derive(31);
    let s = config.guidance;
    let mut history = Tensor::zeros(&[0, c.latent_dim]);
    for k in 0..blocks {
        let n = (k + 1) * bs;
        let frames: Vec<usize> = (0..n).collect();
        let cw = cond.slice(0, n);
        let field = |x: &Tensor, t: f64, with_cond: bool| -> Result<Tensor> {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let full = Tensor::concat_rows(&[&history, x])?;
            let mut times = vec![1.0; k * bs];
            times.extend(std::iter::repeat_n(t, bs));
            let xv = g.constant(full);
            let ms = g.constant(m_s.clone());
            let v = model.forward_window(&mut g, &b, xv, &times, with_cond.then_some(&cw), ms, &frames, &rules)?;
            Ok(g.value(v).slice_rows(k * bs, bs))
        };
        let noise = rng.gaussian(&[bs, c.latent_dim]);
        let x = euler(&noise, config.steps, |x, t| {
            let vc = if s != 0.0 { Some(field(x, t, true)?) } else { None };
            let vn = if s != 1.0 { Some(field(x, t, false)?) } else { None };
            match (vn, vc) {
                (Some(n), Some(c)) => guide(&n, &c, s),
                (Some(n), None) => Ok(n),
                (None, Some(c)) => Ok(c),
                (None, None) => unreachable!(),
            }
        })?;
        history = Tensor::concat_rows(&[&history, &x])?;
    }
    Ok(history)
}
