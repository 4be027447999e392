//! Toy motion-latent auto-encoder over a linear observation world.
//!
//! Observations are `W_id id + W_mo motion + b` with orthonormal mixing
//! columns, so the true identity and motion content of any observation can
//! be read back exactly by projection. The codec learns an identity latent
//! `z_S` and a motion latent `m` whose sum is decoded back to an observation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Lin;
use crate::numeric::{AdamConfig, AdamState, Binding, Graph, ParamId, ParamStore, SeededRng, Tensor, Var};
use crate::world::{Dataset, DyadicClip, MOTION_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub obs_dim: usize,
    pub identity_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Size of the identity pool shared by all clips.
    pub identities: usize,
    pub steps: usize,
    pub batch_identities: usize,
    pub frames_per_identity: usize,
    pub lr: f64,
    /// Weight of the per-identity zero-mean penalty on motion latents.
    pub gauge_weight: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            obs_dim: 32,
            identity_dim: 8,
            latent_dim: 16,
            hidden: 64,
            identities: 8,
            steps: 8000,
            batch_identities: 4,
            frames_per_identity: 8,
            lr: 2e-3,
            gauge_weight: 1.0,
        }
    }
}

/// The fixed affine map from (identity, motion) parameters to observations.
#[derive(Clone, Debug)]
pub struct LinearWorld {
    w_id: Tensor<f64>,
    w_mo: Tensor<f64>,
    bias: Vec<f64>,
    identities: Vec<Vec<f64>>,
}

impl LinearWorld {
    pub fn new(seed: u64, cfg: &CodecConfig) -> Result<Self> {
        let (d, ni, nm) = (cfg.obs_dim, cfg.identity_dim, MOTION_DIM);
        if ni + nm > d {
            return Err(Error::Config(format!(
                "observation dim {d} cannot hold {ni} identity + {nm} motion directions"
            )));
        }
        let mut rng = SeededRng::new(seed).derive(77);
        let g = DMatrix::from_fn(d, ni + nm, |_, _| rng.normal());
        let q = g.qr().q();
        let col = |c: usize| -> Vec<f64> { (0..d).map(|r| q[(r, c)]).collect() };
        let mut w_id = Tensor::zeros(&[d, ni]);
        let mut w_mo = Tensor::zeros(&[d, nm]);
        for c in 0..ni + nm {
            let v = col(c);
            for (r, &x) in v.iter().enumerate() {
                if c < ni {
                    w_id.set(r, c, x);
                } else {
                    w_mo.set(r, c - ni, x);
                }
            }
        }
        let bias = (0..d).map(|_| 0.3 * rng.normal()).collect();
        let identities = (0..cfg.identities)
            .map(|_| (0..ni).map(|_| rng.normal()).collect())
            .collect();
        Ok(Self {
            w_id,
            w_mo,
            bias,
            identities,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn identity_dim(&self) -> usize {
        self.w_id.cols()
    }

    pub fn identity(&self, k: usize) -> &[f64] {
        &self.identities[k % self.identities.len()]
    }

    pub fn identity_count(&self) -> usize {
        self.identities.len()
    }

    /// Identity index of the avatar in clip `k`.
    pub fn avatar_identity(&self, clip: usize) -> usize {
        (2 * clip) % self.identities.len()
    }

    pub fn user_identity(&self, clip: usize) -> usize {
        (2 * clip + 1) % self.identities.len()
    }

    pub fn mixing(&self) -> (&Tensor<f64>, &Tensor<f64>) {
        (&self.w_id, &self.w_mo)
    }

    pub fn synth_observation(&self, id: &[f64], motion: &[f64]) -> Vec<f64> {
        let d = self.obs_dim();
        (0..d)
            .map(|r| {
                let mut x = self.bias[r];
                for (c, &v) in id.iter().enumerate() {
                    x += self.w_id.get(r, c) * v;
                }
                for (c, &v) in motion.iter().enumerate() {
                    x += self.w_mo.get(r, c) * v;
                }
                x
            })
            .collect()
    }

    /// One observation per row of `motion` (`N x 6`).
    pub fn synth_frames(&self, id: &[f64], motion: &Tensor) -> Tensor {
        let n = motion.rows();
        let mut out = Vec::with_capacity(n * self.obs_dim());
        for i in 0..n {
            let m: Vec<f64> = motion.row(i).iter().map(|&x| x as f64).collect();
            out.extend(self.synth_observation(id, &m).into_iter().map(|x| x as f32));
        }
        Tensor::from_matrix(n, self.obs_dim(), out).unwrap()
    }

    fn project(&self, obs: &Tensor, w: &Tensor<f64>) -> Tensor {
        let n = obs.rows();
        let k = w.cols();
        let mut out = Tensor::zeros(&[n, k]);
        for i in 0..n {
            let o = obs.row(i);
            for c in 0..k {
                let mut s = 0.0;
                for r in 0..self.obs_dim() {
                    s += w.get(r, c) * (o[r] as f64 - self.bias[r]);
                }
                out.set(i, c, s as f32);
            }
        }
        out
    }

    /// Exact motion parameters of observations from this world.
    pub fn motion_oracle(&self, obs: &Tensor) -> Tensor {
        self.project(obs, &self.w_mo)
    }

    pub fn identity_oracle(&self, obs: &Tensor) -> Tensor {
        self.project(obs, &self.w_id)
    }
}

#[derive(Clone, Debug)]
struct CodecIds {
    enc1: Lin,
    enc_id: Lin,
    enc_id_skip: Lin,
    enc_mo: Lin,
    enc_mo_skip: Lin,
    dec1: Lin,
    dec2: Lin,
    dec_skip: Lin,
    trained: ParamId,
}

/// Identity and motion latents of a batch of observations.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub identity: Tensor,
    pub motion: Tensor,
    /// Set when the codec has not been trained.
    pub warning: Option<&'static str>,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamStore,
    ids: CodecIds,
}

impl Codec {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::new(seed).derive(5);
        let mut s = ParamStore::new();
        let (o, h, d) = (config.obs_dim, config.hidden, config.latent_dim);
        Lin::create(&mut s, &mut rng, "codec/enc.hidden", o, h, true)?;
        Lin::create(&mut s, &mut rng, "codec/enc.identity", h, d, true)?;
        Lin::create(&mut s, &mut rng, "codec/enc.identity_skip", o, d, false)?;
        Lin::create(&mut s, &mut rng, "codec/enc.motion", h, d, true)?;
        Lin::create(&mut s, &mut rng, "codec/enc.motion_skip", o, d, false)?;
        Lin::create(&mut s, &mut rng, "codec/dec.hidden", d, h, true)?;
        Lin::create(&mut s, &mut rng, "codec/dec.out", h, o, true)?;
        Lin::create(&mut s, &mut rng, "codec/dec.skip", d, o, false)?;
        s.insert("codec/trained", Tensor::scalar(0.0), false)?;
        Self::from_params(config, s)
    }

    pub fn from_params(config: CodecConfig, mut params: ParamStore) -> Result<Self> {
        let (o, h, d) = (config.obs_dim, config.hidden, config.latent_dim);
        let ids = CodecIds {
            enc1: Lin::find(&params, "codec/enc.hidden", o, h, true)?,
            enc_id: Lin::find(&params, "codec/enc.identity", h, d, true)?,
            enc_id_skip: Lin::find(&params, "codec/enc.identity_skip", o, d, false)?,
            enc_mo: Lin::find(&params, "codec/enc.motion", h, d, true)?,
            enc_mo_skip: Lin::find(&params, "codec/enc.motion_skip", o, d, false)?,
            dec1: Lin::find(&params, "codec/dec.hidden", d, h, true)?,
            dec2: Lin::find(&params, "codec/dec.out", h, o, true)?,
            dec_skip: Lin::find(&params, "codec/dec.skip", d, o, false)?,
            trained: params
                .id("codec/trained")
                .ok_or_else(|| Error::Format("missing parameter `codec/trained`".into()))?,
        };
        params.set_trainable(ids.trained, false);
        Ok(Self { config, params, ids })
    }

    pub fn is_trained(&self) -> bool {
        self.params.get(self.ids.trained).item() != 0.0
    }

    fn encode_graph(&self, g: &mut Graph<f32>, b: &Binding, x: Var) -> Result<(Var, Var)> {
        let i = &self.ids;
        let h = i.enc1.apply(g, b, x)?;
        let h = g.silu(h);
        let zs = i.enc_id.apply(g, b, h)?;
        let zs_skip = i.enc_id_skip.apply(g, b, x)?;
        let zs = g.add(zs, zs_skip)?;
        let m = i.enc_mo.apply(g, b, h)?;
        let m_skip = i.enc_mo_skip.apply(g, b, x)?;
        let m = g.add(m, m_skip)?;
        Ok((zs, m))
    }

    fn decode_graph(&self, g: &mut Graph<f32>, b: &Binding, z: Var) -> Result<Var> {
        let i = &self.ids;
        let h = i.dec1.apply(g, b, z)?;
        let h = g.silu(h);
        let y = i.dec2.apply(g, b, h)?;
        let skip = i.dec_skip.apply(g, b, z)?;
        g.add(y, skip)
    }

    pub fn encode(&self, obs: &Tensor) -> Result<Encoding> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let x = g.constant(obs.clone());
        let (zs, m) = self.encode_graph(&mut g, &b, x)?;
        Ok(Encoding {
            identity: g.value(zs).clone(),
            motion: g.value(m).clone(),
            warning: (!self.is_trained()).then_some("codec is untrained"),
        })
    }

    /// The undivided latent `z = z_S + m`.
    pub fn encode_full(&self, obs: &Tensor) -> Result<Tensor> {
        let e = self.encode(obs)?;
        e.identity.zip_map(&e.motion, |a, b| a + b)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let z = g.constant(z.clone());
        let y = self.decode_graph(&mut g, &b, z)?;
        Ok(g.value(y).clone())
    }

    /// Decodes `z_S + m` for every row of `motion`, with one shared identity row.
    pub fn decode_with_identity(&self, identity: &Tensor, motion: &Tensor) -> Result<Tensor> {
        let mut z = motion.clone();
        let id = identity.row(0).to_vec();
        for i in 0..z.rows() {
            for (x, &s) in z.row_mut(i).iter_mut().zip(&id) {
                *x += s;
            }
        }
        self.decode(&z)
    }

    fn require_trained(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::UntrainedCodec)
        }
    }

    /// Motion and identity latents of both parties of clip `index`.
    pub fn embed_clip(&self, world: &LinearWorld, clip: &DyadicClip, index: usize) -> Result<EmbeddedClip> {
        self.require_trained()?;
        let ua = world.synth_frames(world.identity(world.user_identity(index)), &clip.user_motion);
        let av = world.synth_frames(world.identity(world.avatar_identity(index)), &clip.avatar_motion);
        let u = self.encode(&ua)?;
        let a = self.encode(&av)?;
        Ok(EmbeddedClip {
            user_latent: u.motion,
            avatar_latent: a.motion.clone(),
            avatar_identity: a.identity.slice_rows(0, 1),
            reference: a.motion.slice_rows(0, 1),
            user_audio: clip.user_audio.clone(),
            avatar_audio: clip.avatar_audio.clone(),
        })
    }

    /// Motion latents back to motion parameters through decode and the world oracle.
    pub fn latents_to_params(&self, world: &LinearWorld, identity: &Tensor, motion: &Tensor) -> Result<Tensor> {
        let obs = self.decode_with_identity(identity, motion)?;
        Ok(world.motion_oracle(&obs))
    }
}

/// A clip lifted into latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedClip {
    pub user_latent: Tensor,
    pub avatar_latent: Tensor,
    /// `z_S` of the avatar, from frame 0.
    pub avatar_identity: Tensor,
    /// `m_S`, the avatar's motion latent at frame 0.
    pub reference: Tensor,
    pub user_audio: Tensor,
    pub avatar_audio: Tensor,
}

impl EmbeddedClip {
    pub fn len(&self) -> usize {
        self.avatar_latent.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct CodecReport {
    pub losses: Vec<f32>,
    /// Motion frames drawn from clips with fewer than two frames are skipped.
    pub skipped_clips: usize,
}

/// Cross-reconstruction training: each frame is decoded from the identity
/// latent of another frame of the same identity plus its own motion latent.
pub fn train_codec(world: &LinearWorld, data: &Dataset, cfg: &CodecConfig, seed: u64) -> Result<(Codec, CodecReport)> {
    let mut pool: Vec<Vec<f32>> = Vec::new();
    let mut skipped = 0;
    for c in &data.clips {
        if c.len() < 2 {
            skipped += 1;
            continue;
        }
        for t in [&c.user_motion, &c.avatar_motion] {
            for i in 0..t.rows() {
                pool.push(t.row(i).to_vec());
            }
        }
    }
    if pool.len() < 2 {
        return Err(Error::Invalid("codec training needs at least two motion frames".into()));
    }
    let mut codec = Codec::new(cfg.clone(), seed)?;
    let mut adam = AdamState::new(
        &codec.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = SeededRng::new(seed).derive(6);
    let (gi, f) = (cfg.batch_identities, cfg.frames_per_identity.max(2));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        adam.config.lr = cfg.lr * (1.0 - 0.95 * step as f64 / cfg.steps as f64);
        let mut rows = Vec::with_capacity(gi * f);
        for _ in 0..gi {
            let id = world.identity(rng.below(world.identity_count())).to_vec();
            for _ in 0..f {
                let m: Vec<f64> = pool[rng.below(pool.len())].iter().map(|&x| x as f64).collect();
                rows.push(world.synth_observation(&id, &m).into_iter().map(|x| x as f32).collect());
            }
        }
        let obs = Tensor::from_rows(&rows)?;
        let mut g = Graph::new();
        let b = codec.params.bind(&mut g);
        let x = g.constant(obs);
        let (zs, m) = codec.encode_graph(&mut g, &b, x)?;
        let mut swapped = Vec::with_capacity(gi);
        let mut gauge = Vec::with_capacity(gi);
        for k in 0..gi {
            let head = g.slice_rows(zs, k * f, 1)?;
            let tail = g.slice_rows(zs, k * f + 1, f - 1)?;
            swapped.push(g.concat_rows(&[tail, head])?);
            let mk = g.slice_rows(m, k * f, f)?;
            let mean = g.mean_rows(mk);
            let sq = g.mul(mean, mean)?;
            gauge.push(g.sum(sq));
        }
        let zs_other = g.concat_rows(&swapped)?;
        let z = g.add(zs_other, m)?;
        let rec = codec.decode_graph(&mut g, &b, z)?;
        let rec_loss = g.mse(rec, x)?;
        let gauge = g.concat_rows(&gauge)?;
        let gauge = g.mean(gauge);
        let gauge = g.scale(gauge, cfg.gauge_weight);
        let loss = g.add(rec_loss, gauge)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NumericAbort {
                step,
                batch_seed: seed,
                detail: "codec loss".into(),
            });
        }
        losses.push(g.value(rec_loss).item());
        let grads = g.backward(loss)?;
        let grads = codec.params.collect_grads(&b, &grads);
        adam.step(&mut codec.params, &grads)?;
    }
    let t = codec.ids.trained;
    *codec.params.get_mut(t) = Tensor::scalar(1.0);
    Ok((
        codec,
        CodecReport {
            losses,
            skipped_clips: skipped,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> LinearWorld {
        LinearWorld::new(4, &CodecConfig::default()).unwrap()
    }

    #[test]
    fn zero_inputs_give_bias() {
        let w = world();
        let o = w.synth_observation(&[0.0; 8], &[0.0; 6]);
        assert_eq!(o, w.bias);
    }

    #[test]
    fn mixing_is_affine_and_orthonormal() {
        let w = world();
        let a: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let a2: Vec<f64> = (0..8).map(|i| 1.0 - i as f64 * 0.2).collect();
        let m = [0.3, -0.2, 0.5, 0.0, 1.0, -1.0];
        let m2 = [-0.1, 0.4, 0.0, 0.2, -0.5, 0.3];
        let sum: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let msum: Vec<f64> = m.iter().zip(&m2).map(|(x, y)| x + y).collect();
        let lhs = w.synth_observation(&sum, &msum);
        let p = w.synth_observation(&a, &m);
        let q = w.synth_observation(&a2, &m2);
        for r in 0..lhs.len() {
            assert!((lhs[r] - (p[r] + q[r] - w.bias[r])).abs() < 1e-12);
        }
        // identity part alone, motion held at zero
        let z = [0.0; 6];
        let lhs = w.synth_observation(&sum, &z);
        let p = w.synth_observation(&a, &z);
        let q = w.synth_observation(&a2, &z);
        for r in 0..lhs.len() {
            assert!((lhs[r] - (p[r] + q[r] - w.bias[r])).abs() < 1e-12);
        }
        let (wi, wm) = w.mixing();
        let full = Tensor::concat_cols(&[wi, wm]).unwrap();
        let gram = full.transpose().matmul(&full).unwrap();
        for i in 0..14 {
            for j in 0..14 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oracle_recovers_motion() {
        let w = world();
        let m = Tensor::from_matrix(2, 6, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 1.0, -1.0, 0.0, 2.0, 0.0, 0.5]).unwrap();
        let obs = w.synth_frames(w.identity(3), &m);
        assert!(w.motion_oracle(&obs).max_abs_diff(&m) < 1e-5);
    }

    #[test]
    fn untrained_codec_rejects_embedding() {
        let w = world();
        let d = Dataset::generate(1, 1, 60, &Default::default()).unwrap();
        let c = Codec::new(CodecConfig::default(), 1).unwrap();
        assert!(matches!(c.embed_clip(&w, &d.clips[0], 0), Err(Error::UntrainedCodec)));
        assert!(c.encode(&w.synth_frames(w.identity(0), &d.clips[0].user_motion)).unwrap().warning.is_some());
    }

    #[test]
    fn split_heads_sum_to_full_latent() {
        let w = world();
        let c = Codec::new(CodecConfig::default(), 2).unwrap();
        let m = Tensor::from_matrix(1, 6, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let obs = w.synth_frames(w.identity(0), &m);
        let e = c.encode(&obs).unwrap();
        let a = c.decode_with_identity(&e.identity, &e.motion).unwrap();
        let b = c.decode(&c.encode_full(&obs).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
