//! The vector field `v(m_t, t | c, m_S)`: a condition encoder that fuses
//! user audio, user motion and avatar audio, followed by a stack of
//! time-modulated transformer layers over noisy motion latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{CausalKind, LookaheadUnit, TemporalRule};
use crate::nn::{find_param, uniform_init, Attn, Ffn, KvPrefix, Lin};
use crate::numeric::{Binding, Graph, ParamId, ParamStore, Real, SeededRng, Tensor, Var};

/// Which layers use the look-ahead mask during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LookaheadLayers {
    /// Only the last layer looks ahead, so the whole stack sees exactly
    /// `look_ahead` future blocks.
    Last,
    /// Every layer looks ahead; the reach compounds with depth.
    All,
}

/// Which condition streams the model is allowed to see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CondMode {
    Full,
    /// User motion replaced by zeros.
    NoUserMotion,
    /// User audio and user motion replaced by zeros.
    TalkingOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub latent_dim: usize,
    pub audio_dim: usize,
    pub block_size: usize,
    pub look_ahead: usize,
    pub mask: CausalKind,
    pub lookahead_unit: LookaheadUnit,
    pub lookahead_layers: LookaheadLayers,
    /// Half-width `w` of the `[i - w, i + w)` condition window.
    pub cond_window: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
    pub cond_mode: CondMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            depth: 8,
            latent_dim: 16,
            audio_dim: 4,
            block_size: 10,
            look_ahead: 2,
            mask: CausalKind::BlockwiseLookahead,
            lookahead_unit: LookaheadUnit::Blocks,
            lookahead_layers: LookaheadLayers::Last,
            cond_window: 2,
            ffn_mult: 4,
            time_dim: 32,
            cond_mode: CondMode::Full,
        }
    }
}

/// Temporal admission rules for every attention site of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Rules {
    pub encoder: TemporalRule,
    pub self_attn: Vec<TemporalRule>,
    pub cross: Vec<TemporalRule>,
}

impl Rules {
    pub fn with_history(mut self, blocks: Option<usize>) -> Self {
        self.encoder = self.encoder.with_history(blocks);
        for r in self.self_attn.iter_mut().chain(self.cross.iter_mut()) {
            *r = r.with_history(blocks);
        }
        self
    }

    /// Largest number of future blocks any frame can reach through the stack.
    pub fn reach_blocks(&self) -> usize {
        let s: Vec<usize> = self.self_attn.iter().map(|r| r.lookahead_blocks()).collect();
        let through_input: usize = s.iter().sum();
        let through_cross = self
            .cross
            .iter()
            .enumerate()
            .map(|(l, r)| r.lookahead_blocks() + s[l + 1..].iter().sum::<usize>())
            .max()
            .unwrap_or(0);
        through_input.max(through_cross)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if (self.width / self.heads) % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary embedding", self.width / self.heads));
        }
        if self.depth == 0 || self.block_size == 0 || self.latent_dim == 0 || self.audio_dim == 0 {
            return bad("depth, block_size, latent_dim and audio_dim must be positive".into());
        }
        if self.cond_window == 0 {
            return bad("cond_window must be at least 1".into());
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and at least 2".into());
        }
        Ok(())
    }

    fn layer_rule(&self, look: bool) -> TemporalRule {
        let r = TemporalRule::new(self.mask, self.block_size, self.look_ahead, self.lookahead_unit);
        if look {
            r
        } else {
            r.strict()
        }
    }

    /// Masks used in training and in delayed streaming.
    pub fn training_rules(&self) -> Rules {
        let looks = |l: usize| match self.lookahead_layers {
            LookaheadLayers::Last => l + 1 == self.depth,
            LookaheadLayers::All => true,
        };
        let self_attn: Vec<_> = (0..self.depth).map(|l| self.layer_rule(looks(l))).collect();
        let cross = self_attn
            .iter()
            .map(|r| r.with_window(Some(self.cond_window)))
            .collect();
        Rules {
            encoder: TemporalRule::blockwise(self.block_size),
            self_attn,
            cross,
        }
    }

    /// Masks with every look-ahead removed.
    pub fn strict_rules(&self) -> Rules {
        let self_attn: Vec<_> = (0..self.depth).map(|_| self.layer_rule(false)).collect();
        let cross = self_attn
            .iter()
            .map(|r| r.with_window(Some(self.cond_window)))
            .collect();
        Rules {
            encoder: TemporalRule::blockwise(self.block_size),
            self_attn,
            cross,
        }
    }
}

/// Per-frame user audio, user motion latent and avatar audio.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTriplet<T = f32> {
    pub user_audio: Tensor<T>,
    pub user_motion: Tensor<T>,
    pub avatar_audio: Tensor<T>,
}

impl<T: Real> ConditionTriplet<T> {
    pub fn len(&self) -> usize {
        self.avatar_audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let n = self.len();
        let ok = self.user_audio.rows() == n
            && self.user_motion.rows() == n
            && self.user_audio.cols() == cfg.audio_dim
            && self.avatar_audio.cols() == cfg.audio_dim
            && self.user_motion.cols() == cfg.latent_dim;
        if !ok {
            return Err(Error::Shape(format!(
                "condition streams {:?} / {:?} / {:?}",
                self.user_audio.shape(),
                self.user_motion.shape(),
                self.avatar_audio.shape()
            )));
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            user_audio: self.user_audio.slice_rows(start, len),
            user_motion: self.user_motion.slice_rows(start, len),
            avatar_audio: self.avatar_audio.slice_rows(start, len),
        }
    }

    pub fn concat(parts: &[&Self]) -> Result<Self> {
        let cat = |f: fn(&Self) -> &Tensor<T>| Tensor::concat_rows(&parts.iter().map(|p| f(p)).collect::<Vec<_>>());
        Ok(Self {
            user_audio: cat(|p| &p.user_audio)?,
            user_motion: cat(|p| &p.user_motion)?,
            avatar_audio: cat(|p| &p.avatar_audio)?,
        })
    }

    pub fn cast<U: Real>(&self) -> ConditionTriplet<U> {
        ConditionTriplet {
            user_audio: self.user_audio.cast(),
            user_motion: self.user_motion.cast(),
            avatar_audio: self.avatar_audio.cast(),
        }
    }

    /// The streams visible under `mode`.
    pub fn masked(&self, mode: CondMode) -> Self {
        let mut out = self.clone();
        if matches!(mode, CondMode::NoUserMotion | CondMode::TalkingOnly) {
            out.user_motion = Tensor::zeros(self.user_motion.shape());
        }
        if mode == CondMode::TalkingOnly {
            out.user_audio = Tensor::zeros(self.user_audio.shape());
        }
        out
    }
}

impl crate::codec::EmbeddedClip {
    /// The clip's condition triplet `(a_u, m_u, a)`.
    pub fn condition(&self) -> ConditionTriplet {
        ConditionTriplet {
            user_audio: self.user_audio.clone(),
            user_motion: self.user_latent.clone(),
            avatar_audio: self.avatar_audio.clone(),
        }
    }
}

/// Cached keys and values for the two encoder attention sites.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPrefix<T = f32> {
    pub ca1: KvPrefix<T>,
    pub ca2: KvPrefix<T>,
}

/// Cached keys and values for every layer of the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserPrefix<T = f32> {
    pub self_attn: Vec<KvPrefix<T>>,
    pub cross: Vec<KvPrefix<T>>,
}

pub struct EncoderOut {
    pub cond: Var,
    pub ca1: (Var, Var),
    pub ca2: (Var, Var),
}

pub struct DenoiserOut {
    pub field: Var,
    pub self_kv: Vec<(Var, Var)>,
    pub cross_kv: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
struct EncoderIds {
    user_motion: Lin,
    user_audio: Lin,
    avatar_audio: Lin,
    ca1: Attn,
    ca2: Attn,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct LayerIds {
    self_attn: Attn,
    cross: Attn,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct VectorField {
    pub config: ModelConfig,
    enc: EncoderIds,
    time1: Lin,
    time2: Lin,
    modulation: Lin,
    input: Lin,
    layers: Vec<LayerIds>,
    head: Lin,
    null: ParamId,
}

impl VectorField {
    /// Fresh parameters; the output head starts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let c = &config;
        let (h, d, da) = (c.width, c.latent_dim, c.audio_dim);
        let inner = c.ffn_mult * h;
        let mut rng = SeededRng::new(seed).derive(9);
        let mut s = ParamStore::new();
        Lin::create(&mut s, &mut rng, "enc.user_motion", d, h, true)?;
        Lin::create(&mut s, &mut rng, "enc.user_audio", da, h, true)?;
        Lin::create(&mut s, &mut rng, "enc.avatar_audio", da, h, true)?;
        Attn::create(&mut s, &mut rng, "enc.ca1", h)?;
        Attn::create(&mut s, &mut rng, "enc.ca2", h)?;
        Ffn::create(&mut s, &mut rng, "enc.ffn", h, inner)?;
        Lin::create(&mut s, &mut rng, "time.mlp1", c.time_dim, h, true)?;
        Lin::create(&mut s, &mut rng, "time.mlp2", h, h, true)?;
        Lin::create(&mut s, &mut rng, "time.modulation", h, 6 * h, true)?;
        Lin::create(&mut s, &mut rng, "dfot.input", 2 * d, h, true)?;
        for l in 0..c.depth {
            Attn::create(&mut s, &mut rng, &format!("dfot.{l}.self"), h)?;
            Attn::create(&mut s, &mut rng, &format!("dfot.{l}.cross"), h)?;
            Ffn::create(&mut s, &mut rng, &format!("dfot.{l}.ffn"), h, inner)?;
        }
        Lin::zeros(&mut s, "head", h, d)?;
        let null = uniform_init(&mut rng, h, 1, h);
        s.insert("null_cond", null, true)?;
        let m = Self::from_params(config, &s)?;
        Ok((m, s))
    }

    /// Resolves parameter handles by name, checking every shape.
    pub fn from_params<T: Real>(config: ModelConfig, s: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (h, d, da) = (c.width, c.latent_dim, c.audio_dim);
        let inner = c.ffn_mult * h;
        let enc = EncoderIds {
            user_motion: Lin::find(s, "enc.user_motion", d, h, true)?,
            user_audio: Lin::find(s, "enc.user_audio", da, h, true)?,
            avatar_audio: Lin::find(s, "enc.avatar_audio", da, h, true)?,
            ca1: Attn::find(s, "enc.ca1", h)?,
            ca2: Attn::find(s, "enc.ca2", h)?,
            ffn: Ffn::find(s, "enc.ffn", h, inner)?,
        };
        let layers = (0..c.depth)
            .map(|l| {
                Ok(LayerIds {
                    self_attn: Attn::find(s, &format!("dfot.{l}.self"), h)?,
                    cross: Attn::find(s, &format!("dfot.{l}.cross"), h)?,
                    ffn: Ffn::find(s, &format!("dfot.{l}.ffn"), h, inner)?,
                })
            })
            .collect::<Result<_>>()?;
        if s.id(&format!("dfot.{}.self.q.w", c.depth)).is_some() {
            return Err(Error::Format(format!("checkpoint has more than {} layers", c.depth)));
        }
        Ok(Self {
            enc,
            time1: Lin::find(s, "time.mlp1", c.time_dim, h, true)?,
            time2: Lin::find(s, "time.mlp2", h, h, true)?,
            modulation: Lin::find(s, "time.modulation", h, 6 * h, true)?,
            input: Lin::find(s, "dfot.input", 2 * d, h, true)?,
            layers,
            head: Lin::find(s, "head", h, d, true)?,
            null: find_param(s, "null_cond", &[1, h])?,
            config,
        })
    }

    pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
        Ok(Self::init(config.clone(), 0)?.1.num_scalars())
    }

    /// Fuses the condition streams into one `N x width` sequence.
    pub fn encode_condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        cond: &ConditionTriplet<T>,
        frames: &[usize],
        rule: &TemporalRule,
        prefix: Option<&EncoderPrefix<T>>,
    ) -> Result<EncoderOut> {
        cond.validate(&self.config)?;
        if frames.len() != cond.len() {
            return Err(Error::Shape(format!("{} frames for {} condition rows", frames.len(), cond.len())));
        }
        let cond = cond.masked(self.config.cond_mode);
        let heads = self.config.heads;
        let e = &self.enc;
        let mu = g.constant(cond.user_motion);
        let au = g.constant(cond.user_audio);
        let aa = g.constant(cond.avatar_audio);
        let u = e.user_motion.apply(g, b, mu)?;
        let au = e.user_audio.apply(g, b, au)?;
        let av = e.avatar_audio.apply(g, b, aa)?;
        let r1 = e.ca1.forward(g, b, u, au, frames, frames, prefix.map(|p| &p.ca1), rule, heads)?;
        let c1 = g.add(u, r1.out)?;
        let c1n = g.layer_norm(c1);
        let r2 = e.ca2.forward(g, b, av, c1n, frames, frames, prefix.map(|p| &p.ca2), rule, heads)?;
        let c2 = g.add(av, r2.out)?;
        let c2n = g.layer_norm(c2);
        let f = e.ffn.forward(g, b, c2n)?;
        let c3 = g.add(c2, f)?;
        let out = g.layer_norm(c3);
        Ok(EncoderOut {
            cond: out,
            ca1: (r1.k, r1.v),
            ca2: (r2.k, r2.v),
        })
    }

    /// The learned null condition repeated over `n` frames.
    pub fn null_condition<T: Real>(&self, g: &mut Graph<T>, b: &Binding, n: usize) -> Var {
        g.broadcast_rows(b.var(self.null), n)
    }

    fn time_features<T: Real>(&self, times: &[f64]) -> Tensor<T> {
        let half = self.config.time_dim / 2;
        let mut data = Vec::with_capacity(times.len() * 2 * half);
        for &t in times {
            let x = t * 1000.0;
            for k in 0..half {
                let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
                data.push(T::real((x * f).sin()));
            }
            for k in 0..half {
                let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
                data.push(T::real((x * f).cos()));
            }
        }
        Tensor::from_matrix(times.len(), 2 * half, data).unwrap()
    }

    /// Vector field for `noisy` frames at per-frame times `times`.
    ///
    /// `cond` must have one row per frame. With a prefix, the frames are the
    /// newest ones and attend to the cached keys and values as history.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        noisy: Var,
        times: &[f64],
        cond: Var,
        m_s: Var,
        frames: &[usize],
        rules: &Rules,
        prefix: Option<&DenoiserPrefix<T>>,
    ) -> Result<DenoiserOut> {
        let c = &self.config;
        let (n, d) = g.shape(noisy);
        if d != c.latent_dim || times.len() != n || frames.len() != n || g.shape(cond) != (n, c.width) {
            return Err(Error::Shape(format!(
                "predict: noisy {n}x{d}, {} times, {} frames, cond {:?}",
                times.len(),
                frames.len(),
                g.shape(cond)
            )));
        }
        if let Some(t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Invalid(format!("flow time {t} outside [0, 1]")));
        }
        if let Some(p) = prefix {
            if p.self_attn.len() != c.depth || p.cross.len() != c.depth {
                return Err(Error::Invalid(format!(
                    "cache has {}/{} layers, model depth is {}",
                    p.self_attn.len(),
                    p.cross.len(),
                    c.depth
                )));
            }
        }
        if rules.self_attn.len() != c.depth || rules.cross.len() != c.depth {
            return Err(Error::Invalid("rule count does not match depth".into()));
        }
        let h = c.width;
        let heads = c.heads;
        let tf = g.constant(self.time_features(times));
        let te = self.time1.apply(g, b, tf)?;
        let te = g.silu(te);
        let te = self.time2.apply(g, b, te)?;
        let te = g.silu(te);
        let mods = self.modulation.apply(g, b, te)?;
        let mut m = Vec::with_capacity(6);
        for k in 0..6 {
            m.push(g.slice_cols(mods, k * h, h)?);
        }
        let (shift1, scale1, gate1, shift2, scale2, gate2) = (m[0], m[1], m[2], m[3], m[4], m[5]);
        let scale1 = g.add_scalar(scale1, 1.0);
        let scale2 = g.add_scalar(scale2, 1.0);

        let ms = g.broadcast_rows(m_s, n);
        let inp = g.concat_cols(&[noisy, ms])?;
        let mut x = self.input.apply(g, b, inp)?;
        let mut self_kv = Vec::with_capacity(c.depth);
        let mut cross_kv = Vec::with_capacity(c.depth);
        for (l, layer) in self.layers.iter().enumerate() {
            let hn = g.layer_norm(x);
            let hn = g.mul(hn, scale1)?;
            let hn = g.add(hn, shift1)?;
            let sa = layer.self_attn.forward(
                g,
                b,
                hn,
                hn,
                frames,
                frames,
                prefix.map(|p| &p.self_attn[l]),
                &rules.self_attn[l],
                heads,
            )?;
            let upd = g.mul(gate1, sa.out)?;
            x = g.add(x, upd)?;
            let hc = g.layer_norm(x);
            let ca = layer.cross.forward(
                g,
                b,
                hc,
                cond,
                frames,
                frames,
                prefix.map(|p| &p.cross[l]),
                &rules.cross[l],
                heads,
            )?;
            x = g.add(x, ca.out)?;
            let hf = g.layer_norm(x);
            let hf = g.mul(hf, scale2)?;
            let hf = g.add(hf, shift2)?;
            let f = layer.ffn.forward(g, b, hf)?;
            let upd = g.mul(gate2, f)?;
            x = g.add(x, upd)?;
            self_kv.push((sa.k, sa.v));
            cross_kv.push((ca.k, ca.v));
        }
        let xo = g.layer_norm(x);
        let field = self.head.apply(g, b, xo)?;
        Ok(DenoiserOut {
            field,
            self_kv,
            cross_kv,
        })
    }

    /// Cache-free forward over a whole window with one rule set.
    ///
    /// `cond = None` uses the null condition.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_window<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        noisy: Var,
        times: &[f64],
        cond: Option<&ConditionTriplet<T>>,
        m_s: Var,
        frames: &[usize],
        rules: &Rules,
    ) -> Result<Var> {
        let c = match cond {
            Some(cond) => self.encode_condition(g, b, cond, frames, &rules.encoder, None)?.cond,
            None => self.null_condition(g, b, frames.len()),
        };
        Ok(self.predict(g, b, noisy, times, c, m_s, frames, rules, None)?.field)
    }
}
