//! Diffusion-forcing training of the vector field on embedded clips.
//!
//! cargo run --release --example df_training -- 500

use dyadic_motion::codec::{train_codec, CodecConfig, LinearWorld};
use dyadic_motion::model::{ModelConfig, VectorField};
use dyadic_motion::numeric::ParamStore;
use dyadic_motion::trainer::{train, TrainConfig};
use dyadic_motion::world::{Dataset, WorldParams};

fn main() -> dyadic_motion::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let data = Dataset::generate(1, 16, 300, &WorldParams::default())?;
    let ccfg = CodecConfig::default();
    let world = LinearWorld::new(3, &ccfg)?;
    let (codec, _) = train_codec(&world, &data, &ccfg, 4)?;
    let clips: Vec<_> = data
        .clips
        .iter()
        .enumerate()
        .map(|(k, c)| codec.embed_clip(&world, c, k))
        .collect::<Result<_, _>>()?;

    let mc = ModelConfig {
        width: 32,
        heads: 4,
        depth: 2,
        ..ModelConfig::default()
    };
    let (model, mut params) = VectorField::init(mc, 7)?;
    println!("{} parameters", VectorField::parameter_count(&model.config)?);
    let tc = TrainConfig {
        steps,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut hook = |step: usize, p: &ParamStore| {
        println!("checkpoint at step {step}: {} tensors", p.len());
        Ok(())
    };
    let report = train(
        &model,
        &mut params,
        &clips,
        &TrainConfig {
            checkpoint_every: steps / 2,
            ..tc
        },
        Some(&mut hook),
    )?;
    let k = (steps / 10).max(1);
    println!("L1 flow loss {:.4} -> {:.4}", report.mean_loss(0, k), report.mean_loss(steps - k, k));
    println!("{} of {} windows had the condition dropped", report.null_windows, report.windows);
    Ok(())
}
