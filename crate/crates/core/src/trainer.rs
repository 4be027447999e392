//! Diffusion-forcing training: per-frame noise levels, linear noising and an
//! L1 regression onto the flow target `m1 - m0`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::EmbeddedClip;
use crate::error::{Error, Result};
use crate::model::{ConditionTriplet, ModelConfig, Rules, VectorField};
use crate::numeric::{accumulate, AdamConfig, AdamState, Binding, Graph, ParamStore, Real, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    Independent,
    BlockwiseShared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub window: usize,
    pub p_drop: f64,
    pub time_scheme: TimeScheme,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-4,
            window: 50,
            p_drop: 0.1,
            time_scheme: TimeScheme::Independent,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::Config(format!("p_drop {} outside [0, 1)", self.p_drop)));
        }
        if self.window == 0 || self.window % model.block_size != 0 {
            return Err(Error::Config(format!(
                "window {} is not a multiple of block size {}",
                self.window, model.block_size
            )));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch and lr must be positive".into()));
        }
        Ok(())
    }
}

pub fn sample_flow_times(n: usize, block_size: usize, rng: &mut SeededRng, scheme: TimeScheme) -> Vec<f64> {
    match scheme {
        TimeScheme::Independent => (0..n).map(|_| rng.uniform()).collect(),
        TimeScheme::BlockwiseShared => {
            let mut t = Vec::with_capacity(n);
            while t.len() < n {
                let u = rng.uniform();
                let k = block_size.max(1).min(n - t.len());
                t.extend(std::iter::repeat_n(u, k));
            }
            t
        }
    }
}

/// `t_n m1 + (1 - t_n) m0` row by row.
pub fn noise_interpolate<T: Real>(m1: &Tensor<T>, m0: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    m1.expect_same_shape(m0, "noise_interpolate")?;
    if t.len() != m1.rows() {
        return Err(Error::Shape(format!("{} flow times for {} frames", t.len(), m1.rows())));
    }
    let mut out = m1.clone();
    for (i, &ti) in t.iter().enumerate() {
        let (a, b) = (T::real(ti), T::real(1.0 - ti));
        for (o, &z) in out.row_mut(i).iter_mut().zip(m0.row(i)) {
            *o = a * *o + b * z;
        }
    }
    Ok(out)
}

/// The regression target `m1 - m0`; it does not depend on the flow times.
pub fn flow_target<T: Real>(m1: &Tensor<T>, m0: &Tensor<T>) -> Result<Tensor<T>> {
    m1.zip_map(m0, |a, b| a - b)
}

/// A training window cut from an embedded clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T = f32> {
    pub motion: Tensor<T>,
    pub cond: ConditionTriplet<T>,
    pub reference: Tensor<T>,
}

impl<T: Real> Window<T> {
    pub fn cast<U: Real>(&self) -> Window<U> {
        Window {
            motion: self.motion.cast(),
            cond: self.cond.cast(),
            reference: self.reference.cast(),
        }
    }
}

/// Noise, flow times and the dropout decision for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T = f32> {
    pub m0: Tensor<T>,
    pub times: Vec<f64>,
    pub drop_condition: bool,
}

pub fn sample_window(clips: &[EmbeddedClip], n: usize, rng: &mut SeededRng) -> Result<Window> {
    let usable: Vec<&EmbeddedClip> = clips.iter().filter(|c| c.len() >= n).collect();
    if usable.is_empty() {
        return Err(Error::Invalid(format!("no clip has {n} frames")));
    }
    let clip = usable[rng.below(usable.len())];
    let start = rng.below(clip.len() - n + 1);
    Ok(Window {
        motion: clip.avatar_latent.slice_rows(start, n),
        cond: clip.condition().slice(start, n),
        reference: clip.reference.clone(),
    })
}

pub fn draw_noise(
    rng: &mut SeededRng,
    n: usize,
    d: usize,
    block_size: usize,
    scheme: TimeScheme,
    p_drop: f64,
) -> NoiseDraw {
    let m0 = rng.gaussian(&[n, d]);
    let times = sample_flow_times(n, block_size, rng, scheme);
    let drop_condition = rng.bernoulli(p_drop);
    NoiseDraw {
        m0,
        times,
        drop_condition,
    }
}

/// Mean absolute error between the predicted field and `m1 - m0`.
pub fn df_loss_graph<T: Real>(
    model: &VectorField,
    g: &mut Graph<T>,
    b: &Binding,
    window: &Window<T>,
    draw: &NoiseDraw<T>,
    rules: &Rules,
) -> Result<Var> {
    let n = window.motion.rows();
    let xt = noise_interpolate(&window.motion, &draw.m0, &draw.times)?;
    let target = flow_target(&window.motion, &draw.m0)?;
    let frames: Vec<usize> = (0..n).collect();
    let x = g.constant(xt);
    let ms = g.constant(window.reference.clone());
    let cond = (!draw.drop_condition).then_some(&window.cond);
    let v = model.forward_window(g, b, x, &draw.times, cond, ms, &frames, rules)?;
    let target = g.constant(target);
    g.l1_mean(v, target)
}

/// Evaluates the diffusion-forcing loss on one window with fresh noise.
pub fn df_loss(
    model: &VectorField,
    params: &ParamStore,
    window: &Window,
    rng: &mut SeededRng,
    p_drop: f64,
    scheme: TimeScheme,
) -> Result<f64> {
    let c = &model.config;
    let draw = draw_noise(rng, window.motion.rows(), c.latent_dim, c.block_size, scheme, p_drop);
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let l = df_loss_graph(model, &mut g, &b, window, &draw, &c.training_rules())?;
    Ok(g.value(l).item() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<StepLog>,
    /// Windows trained with the null condition.
    pub null_windows: usize,
    pub windows: usize,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|s| s.loss).collect()
    }

    /// Wall times are left out so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.trace {
            s.push_str(&format!("{},{:.9},{:e}\n", r.step, r.loss, r.lr));
        }
        s
    }

    /// Mean loss of `count` steps starting at `start`.
    pub fn mean_loss(&self, start: usize, count: usize) -> f64 {
        let s = &self.trace[start.min(self.trace.len())..(start + count).min(self.trace.len())];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len().max(1) as f64
    }
}

/// Draws the windows and noise of diffusion-forcing batches.
pub struct DfBatcher {
    master: SeededRng,
    window: usize,
    batch: usize,
    p_drop: f64,
    scheme: TimeScheme,
}

/// One training batch plus the seed it was drawn from.
pub struct DfBatch {
    pub seed: u64,
    pub items: Vec<(Window, NoiseDraw)>,
}

impl DfBatcher {
    pub fn new(cfg: &TrainConfig, stream: u64) -> Self {
        Self {
            master: SeededRng::new(cfg.seed).derive(stream),
            window: cfg.window,
            batch: cfg.batch,
            p_drop: cfg.p_drop,
            scheme: cfg.time_scheme,
        }
    }

    pub fn next(&mut self, clips: &[EmbeddedClip], model: &ModelConfig) -> Result<DfBatch> {
        let seed = self.master.next_u64();
        let mut r = SeededRng::new(seed);
        let items = (0..self.batch)
            .map(|_| {
                let w = sample_window(clips, self.window, &mut r)?;
                let d = draw_noise(&mut r, self.window, model.latent_dim, model.block_size, self.scheme, self.p_drop);
                Ok((w, d))
            })
            .collect::<Result<_>>()?;
        Ok(DfBatch { seed, items })
    }
}

/// Mean loss and accumulated mean gradients of a diffusion-forcing batch.
pub fn df_batch_grads(model: &VectorField, params: &ParamStore, batch: &DfBatch) -> Result<(f64, Vec<Tensor>)> {
    let rules = model.config.training_rules();
    let mut grads = params.zero_grads();
    let mut total = 0.0;
    let scale = 1.0 / batch.items.len() as f64;
    for (w, d) in &batch.items {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let l = df_loss_graph(model, &mut g, &b, w, d, &rules)?;
        let l = g.scale(l, scale);
        total += g.value(l).item() as f64;
        let gr = g.backward(l)?;
        accumulate(&mut grads, &params.collect_grads(&b, &gr));
    }
    Ok((total, grads))
}

pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &ParamStore) -> Result<()>;

/// Adam loop over sampled windows.
pub fn train(
    model: &VectorField,
    params: &mut ParamStore,
    clips: &[EmbeddedClip],
    cfg: &TrainConfig,
    mut hook: Option<CheckpointHook>,
) -> Result<TrainReport> {
    cfg.validate(&model.config)?;
    if clips.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut adam = AdamState::new(
        params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut batcher = DfBatcher::new(cfg, 2);
    let mut report = TrainReport::default();
    let start = Instant::now();
    for step in 0..cfg.steps {
        let batch = batcher.next(clips, &model.config)?;
        report.windows += batch.items.len();
        report.null_windows += batch.items.iter().filter(|(_, d)| d.drop_condition).count();
        let (loss, grads) = df_batch_grads(model, params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                step,
                batch_seed: batch.seed,
                detail: format!("diffusion-forcing loss {loss}"),
            });
        }
        adam.step(params, &grads)?;
        report.trace.push(StepLog {
            step,
            loss,
            lr: cfg.lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(h) = hook.as_mut() {
                h(step + 1, params)?;
            }
        }
    }
    Ok(report)
}
