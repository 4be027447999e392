//! Preference fine-tuning: ground-truth winners against losers generated by
//! a model that only hears the avatar's own audio.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, EmbeddedClip, LinearWorld};
use crate::error::{Error, Result};
use crate::model::{CondMode, ConditionTriplet, ModelConfig, Rules, VectorField};
use crate::numeric::{
    accumulate, write_tensor, AdamConfig, AdamState, Binding, Graph, ParamStore, Reader, Real, SeededRng, Tensor, Var,
};
use crate::sampler::{generate, SamplerConfig};
use crate::trainer::{
    df_batch_grads, draw_noise, flow_target, noise_interpolate, train, DfBatcher, NoiseDraw, TimeScheme, TrainConfig,
    TrainReport,
};
use crate::world::{read_clip, write_clip, Dataset};

pub const PAIRS_MAGIC: [u8; 4] = *b"AFPP";
pub const PAIRS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub lambda: f64,
    pub steps: usize,
    /// Fine-tuning learning rate.
    pub lr: f64,
    /// Preference windows per step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1000.0,
            lambda: 0.1,
            steps: 500,
            lr: 1e-4,
            batch: 8,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be positive", self.beta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("dpo lr {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("dpo batch must be positive".into()));
        }
        Ok(())
    }
}

/// Trains the variant whose user audio and user motion are always zero.
pub fn train_talking_only(
    config: &ModelConfig,
    clips: &[EmbeddedClip],
    train_cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(VectorField, ParamStore, TrainReport)> {
    let cfg = ModelConfig {
        cond_mode: CondMode::TalkingOnly,
        ..config.clone()
    };
    let (m, mut p) = VectorField::init(cfg, init_seed)?;
    let rep = train(&m, &mut p, clips, train_cfg, None)?;
    Ok((m, p, rep))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    /// Index of the source clip in its dataset.
    pub clip: usize,
    pub winner: Tensor,
    pub loser: Tensor,
    pub cond: ConditionTriplet,
    pub reference: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<PreferencePair>,
    pub skipped: usize,
}

/// Winner: the embedded ground-truth avatar motion. Loser: the talking-only
/// model's generation under the same conditions.
pub fn build_pairs(
    data: &Dataset,
    codec: &Codec,
    world: &LinearWorld,
    talking: &VectorField,
    talking_params: &ParamStore,
    sampler: &SamplerConfig,
) -> Result<PairSet> {
    let mut out = PairSet::default();
    for (k, clip) in data.clips.iter().enumerate() {
        let e = codec.embed_clip(world, clip, k)?;
        let cfg = SamplerConfig {
            seed: sampler.seed.wrapping_add(k as u64),
            ..sampler.clone()
        };
        let cond = e.condition();
        match generate(talking, talking_params, &cond, &e.avatar_identity, &e.reference, &cfg) {
            Ok(loser) if loser != e.avatar_latent && loser.all_finite() => out.pairs.push(PreferencePair {
                clip: k,
                winner: e.avatar_latent,
                loser,
                cond,
                reference: e.reference,
            }),
            _ => out.skipped += 1,
        }
    }
    Ok(out)
}

/// `AFPP` file: the dataset container with a clip index before and a loser
/// tensor after every clip.
pub fn pairs_to_bytes(data: &Dataset, pairs: &PairSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&PAIRS_MAGIC);
    buf.extend_from_slice(&PAIRS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(pairs.pairs.len() as u32).to_le_bytes());
    for p in &pairs.pairs {
        let clip = data
            .clips
            .get(p.clip)
            .ok_or_else(|| Error::Mismatch(format!("pair refers to clip {} of {}", p.clip, data.clips.len())))?;
        buf.extend_from_slice(&(p.clip as u32).to_le_bytes());
        write_clip(&mut buf, clip);
        write_tensor(&mut buf, &p.loser);
    }
    Ok(buf)
}

/// Reads an `AFPP` file, re-embedding winners and conditions through the codec.
pub fn pairs_from_bytes(bytes: &[u8], codec: &Codec, world: &LinearWorld) -> Result<PairSet> {
    let mut r = Reader::new(bytes);
    r.magic(PAIRS_MAGIC)?;
    let v = r.u32("version")?;
    if v != PAIRS_VERSION {
        return Err(Error::BadVersion(v));
    }
    let n = r.u32("pair count")?;
    let mut out = PairSet::default();
    for _ in 0..n {
        let k = r.u32("clip index")? as usize;
        let clip = read_clip(&mut r)?;
        let loser = r.tensor()?;
        let e = codec.embed_clip(world, &clip, k)?;
        if loser.shape() != e.avatar_latent.shape() {
            return Err(Error::Format(format!(
                "loser {:?} does not match winner {:?}",
                loser.shape(),
                e.avatar_latent.shape()
            )));
        }
        out.pairs.push(PreferencePair {
            clip: k,
            cond: e.condition(),
            winner: e.avatar_latent,
            loser,
            reference: e.reference,
        });
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after pairs".into()));
    }
    Ok(out)
}

pub fn save_pairs(data: &Dataset, pairs: &PairSet, path: impl AsRef<Path>) -> Result<()> {
    let p = path.as_ref();
    std::fs::write(p, pairs_to_bytes(data, pairs)?).map_err(|e| Error::io(p, e))
}

pub fn load_pairs(path: impl AsRef<Path>, codec: &Codec, world: &LinearWorld) -> Result<PairSet> {
    let p = path.as_ref();
    let b = std::fs::read(p).map_err(|e| Error::io(p, e))?;
    pairs_from_bytes(&b, codec, world)
}

/// `(e_w - e_ref_w) - (e_l - e_ref_l)`.
pub fn dpo_margin(e_w: f64, e_ref_w: f64, e_l: f64, e_ref_l: f64) -> f64 {
    (e_w - e_ref_w) - (e_l - e_ref_l)
}

/// `-log sigmoid(-beta * margin)`.
pub fn dpo_objective(margin: f64, beta: f64) -> f64 {
    let x = beta * margin;
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// A preference window: winner and loser cut at the same frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PairWindow<T = f32> {
    pub winner: Tensor<T>,
    pub loser: Tensor<T>,
    pub cond: ConditionTriplet<T>,
    pub reference: Tensor<T>,
}

impl<T: Real> PairWindow<T> {
    pub fn cast<U: Real>(&self) -> PairWindow<U> {
        PairWindow {
            winner: self.winner.cast(),
            loser: self.loser.cast(),
            cond: self.cond.cast(),
            reference: self.reference.cast(),
        }
    }
}

pub fn sample_pair_window(pairs: &[PreferencePair], n: usize, rng: &mut SeededRng) -> Result<PairWindow> {
    let usable: Vec<&PreferencePair> = pairs.iter().filter(|p| p.winner.rows() >= n).collect();
    if usable.is_empty() {
        return Err(Error::Invalid(format!("no preference pair has {n} frames")));
    }
    let p = usable[rng.below(usable.len())];
    let s = rng.below(p.winner.rows() - n + 1);
    Ok(PairWindow {
        winner: p.winner.slice_rows(s, n),
        loser: p.loser.slice_rows(s, n),
        cond: p.cond.slice(s, n),
        reference: p.reference.clone(),
    })
}

/// Mean L1 error of the field for one sequence under shared noise and times.
fn flow_error<T: Real>(
    model: &VectorField,
    g: &mut Graph<T>,
    b: &Binding,
    motion: &Tensor<T>,
    w: &PairWindow<T>,
    draw: &NoiseDraw<T>,
    rules: &Rules,
) -> Result<Var> {
    let xt = noise_interpolate(motion, &draw.m0, &draw.times)?;
    let target = flow_target(motion, &draw.m0)?;
    let frames: Vec<usize> = (0..motion.rows()).collect();
    let x = g.constant(xt);
    let ms = g.constant(w.reference.clone());
    let v = model.forward_window(g, b, x, &draw.times, Some(&w.cond), ms, &frames, rules)?;
    let t = g.constant(target);
    g.l1_mean(v, t)
}

/// Reference-model errors `(e_ref_w, e_ref_l)`, computed without gradients.
pub fn reference_errors<T: Real>(
    model: &VectorField,
    ref_params: &ParamStore<T>,
    w: &PairWindow<T>,
    draw: &NoiseDraw<T>,
) -> Result<(f64, f64)> {
    let rules = model.config.training_rules();
    let mut g = Graph::new();
    let b = ref_params.bind(&mut g);
    let ew = flow_error(model, &mut g, &b, &w.winner, w, draw, &rules)?;
    let el = flow_error(model, &mut g, &b, &w.loser, w, draw, &rules)?;
    Ok((g.value(ew).item().as_f64(), g.value(el).item().as_f64()))
}

/// Graph of the preference loss for one window; returns `(loss, margin)`.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss_graph<T: Real>(
    model: &VectorField,
    g: &mut Graph<T>,
    b: &Binding,
    w: &PairWindow<T>,
    draw: &NoiseDraw<T>,
    reference: (f64, f64),
    beta: f64,
    rules: &Rules,
) -> Result<(Var, Var)> {
    let ew = flow_error(model, g, b, &w.winner, w, draw, rules)?;
    let el = flow_error(model, g, b, &w.loser, w, draw, rules)?;
    let d = g.sub(ew, el)?;
    let margin = g.add_scalar(d, reference.1 - reference.0);
    let z = g.scale(margin, -beta);
    let ls = g.log_sigmoid(z);
    Ok((g.scale(ls, -1.0), margin))
}

fn check_architecture(model: &VectorField, ref_params: &ParamStore) -> Result<()> {
    VectorField::from_params(model.config.clone(), ref_params)
        .map(|_| ())
        .map_err(|e| Error::Mismatch(format!("reference model: {e}")))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoEval {
    pub loss: f64,
    pub margin: f64,
}

/// Preference loss on one window of `pair` with fresh shared noise.
pub fn dpo_loss(
    model: &VectorField,
    params: &ParamStore,
    ref_params: &ParamStore,
    pair: &PairWindow,
    rng: &mut SeededRng,
    beta: f64,
) -> Result<DpoEval> {
    check_architecture(model, ref_params)?;
    let c = &model.config;
    let draw = draw_noise(rng, pair.winner.rows(), c.latent_dim, c.block_size, TimeScheme::Independent, 0.0);
    let reference = reference_errors(model, ref_params, pair, &draw)?;
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let (l, m) = dpo_loss_graph(model, &mut g, &b, pair, &draw, reference, beta, &c.training_rules())?;
    Ok(DpoEval {
        loss: g.value(l).item() as f64,
        margin: g.value(m).item() as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneLog {
    pub step: usize,
    pub df_loss: f64,
    pub dpo_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub trace: Vec<FinetuneLog>,
}

impl FinetuneReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_df,l_dpo\n");
        for r in &self.trace {
            s.push_str(&format!("{},{:.9},{:.9}\n", r.step, r.df_loss, r.dpo_loss));
        }
        s
    }

    pub fn df_losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.df_loss).collect()
    }
}

/// Minimises `L_DF + lambda L_DPO` against the frozen `ref_params`.
///
/// The diffusion-forcing batches come from the same stream as [`train`], so
/// with `lambda = 0` and `dpo.lr == train_cfg.lr` the update sequence is
/// that of continued training.
pub fn finetune(
    model: &VectorField,
    params: &mut ParamStore,
    ref_params: &ParamStore,
    pairs: &[PreferencePair],
    clips: &[EmbeddedClip],
    train_cfg: &TrainConfig,
    dpo: &DpoConfig,
) -> Result<FinetuneReport> {
    dpo.validate()?;
    train_cfg.validate(&model.config)?;
    check_architecture(model, ref_params)?;
    if pairs.is_empty() {
        return Err(Error::Invalid("no preference pairs".into()));
    }
    let c = &model.config;
    let rules = c.training_rules();
    let mut adam = AdamState::new(
        params,
        AdamConfig {
            lr: dpo.lr,
            ..AdamConfig::default()
        },
    );
    let mut batcher = DfBatcher::new(train_cfg, 2);
    let mut prng = SeededRng::new(dpo.seed).derive(3);
    let mut report = FinetuneReport::default();
    for step in 0..dpo.steps {
        let batch = batcher.next(clips, c)?;
        let (df, mut grads) = df_batch_grads(model, params, &batch)?;
        let pseed = prng.next_u64();
        let mut r = SeededRng::new(pseed);
        let mut dl = 0.0;
        let scale = dpo.lambda / dpo.batch as f64;
        for _ in 0..dpo.batch {
            let w = sample_pair_window(pairs, train_cfg.window, &mut r)?;
            let draw = draw_noise(&mut r, train_cfg.window, c.latent_dim, c.block_size, train_cfg.time_scheme, 0.0);
            let reference = reference_errors(model, ref_params, &w, &draw)?;
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let (l, _) = dpo_loss_graph(model, &mut g, &b, &w, &draw, reference, dpo.beta, &rules)?;
            dl += g.value(l).item() as f64 / dpo.batch as f64;
            if dpo.lambda > 0.0 {
                let l = g.scale(l, scale);
                let gr = g.backward(l)?;
                accumulate(&mut grads, &params.collect_grads(&b, &gr));
            }
        }
        if !df.is_finite() || !dl.is_finite() {
            return Err(Error::NumericAbort {
                step,
                batch_seed: if df.is_finite() { pseed } else { batch.seed },
                detail: format!("L_DF {df}, L_DPO {dl}"),
            });
        }
        adam.step(params, &grads)?;
        report.trace.push(FinetuneLog {
            step,
            df_loss: df,
            dpo_loss: dl,
        });
    }
    Ok(report)
}

/// Cuts a pair window for tests and examples.
pub fn pair_window(p: &PreferencePair, start: usize, n: usize) -> PairWindow {
    PairWindow {
        winner: p.winner.slice_rows(start, n),
        loser: p.loser.slice_rows(start, n),
        cond: p.cond.slice(start, n),
        reference: p.reference.clone(),
    }
}
