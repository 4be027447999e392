//! Gradient checks over the whole stack: every graph op, the vector field
//! and both training losses, all in 64-bit arithmetic.

use crate::error::Result;
use crate::model::{ConditionTriplet, ModelConfig, VectorField};
use crate::numeric::{check_gradients, op_checks, GradCheck, ParamStore, SeededRng, Tensor};
use crate::preference::{dpo_loss_graph, reference_errors, PairWindow};
use crate::trainer::{df_loss_graph, draw_noise, NoiseDraw, TimeScheme, Window};

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        depth: 2,
        latent_dim: 3,
        audio_dim: 2,
        block_size: 2,
        look_ahead: 1,
        time_dim: 4,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

/// Random initialisation plus a perturbation, so the zero head does not
/// hide the gradient through the body.
fn perturbed(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f64>> {
    let (_, mut p) = VectorField::init(cfg.clone(), seed)?;
    let mut r = SeededRng::new(seed).derive(1);
    for id in p.ids().collect::<Vec<_>>() {
        for x in p.get_mut(id).data_mut() {
            *x += 0.3 * r.normal() as f32;
        }
    }
    Ok(p.cast())
}

fn triplet(r: &mut SeededRng, n: usize, cfg: &ModelConfig) -> ConditionTriplet<f64> {
    ConditionTriplet {
        user_audio: r.gaussian(&[n, cfg.audio_dim]).cast(),
        user_motion: r.gaussian(&[n, cfg.latent_dim]).cast(),
        avatar_audio: r.gaussian(&[n, cfg.audio_dim]).cast(),
    }
}

fn draw(seed: u64, n: usize, cfg: &ModelConfig) -> NoiseDraw<f64> {
    let d = draw_noise(&mut SeededRng::new(seed), n, cfg.latent_dim, cfg.block_size, TimeScheme::Independent, 0.0);
    NoiseDraw {
        m0: d.m0.cast(),
        times: d.times,
        drop_condition: false,
    }
}

/// Vector field, flow-matching loss and preference loss.
pub fn model_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = toy_config();
    let n = 4;
    let frames: Vec<usize> = (0..n).collect();
    let rules = cfg.training_rules();
    let p = perturbed(&cfg, seed)?;
    let m = VectorField::from_params(cfg.clone(), &p)?;
    let mut r = SeededRng::new(seed).derive(2);
    let mut out = Vec::new();

    let cond = triplet(&mut r, n, &cfg);
    let noisy: Tensor<f64> = r.gaussian(&[n, cfg.latent_dim]).cast();
    let ms: Tensor<f64> = r.gaussian(&[1, cfg.latent_dim]).cast();
    let target: Tensor<f64> = r.gaussian(&[n, cfg.latent_dim]).cast();
    let times = [0.1, 0.4, 0.7, 0.95];
    out.push(check_gradients("vector_field", &p, |g, b, _| {
        let x = g.constant(noisy.clone());
        let s = g.constant(ms.clone());
        let t = g.constant(target.clone());
        let v = m.forward_window(g, b, x, &times, Some(&cond), s, &frames, &rules)?;
        let u = m.forward_window(g, b, x, &times, None, s, &frames, &rules)?;
        let a = g.mse(v, t)?;
        let c = g.mse(u, t)?;
        g.add(a, c)
    })?);

    let w = Window {
        motion: r.gaussian(&[n, cfg.latent_dim]).cast(),
        cond: triplet(&mut r, n, &cfg),
        reference: r.gaussian(&[1, cfg.latent_dim]).cast(),
    };
    let d = draw(seed.wrapping_add(3), n, &cfg);
    out.push(check_gradients("df_loss", &p, |g, b, _| df_loss_graph(&m, g, b, &w, &d, &rules))?);

    let q = perturbed(&cfg, seed.wrapping_add(1))?;
    let pw = PairWindow {
        winner: r.gaussian(&[n, cfg.latent_dim]).cast(),
        loser: r.gaussian(&[n, cfg.latent_dim]).cast(),
        cond: triplet(&mut r, n, &cfg),
        reference: r.gaussian(&[1, cfg.latent_dim]).cast(),
    };
    let d = draw(seed.wrapping_add(4), n, &cfg);
    let reference = reference_errors(&m, &q, &pw, &d)?;
    out.push(check_gradients("dpo_loss", &p, |g, b, _| {
        Ok(dpo_loss_graph(&m, g, b, &pw, &d, reference, 5.0, &rules)?.0)
    })?);
    Ok(out)
}

/// Every registered check: graph ops first, then the model-level ones.
pub fn all_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut v = op_checks(seed)?;
    v.extend(model_checks(seed)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_level_checks_pass() {
        for c in model_checks(11).unwrap() {
            assert!(c.passed(GRAD_TOLERANCE), "{} {}", c.name, c.rel_err);
        }
    }
}
