//! Talking-only model, preference pairs and DPO fine-tuning against a frozen
//! reference, with a continued-training control.
//!
//! cargo run --release --example preference_tuning -- 1500 200

use dyadic_motion::codec::{train_codec, CodecConfig, LinearWorld};
use dyadic_motion::metrics::{evaluate, format_table, var_metric, MetricConfig};
use dyadic_motion::model::{ModelConfig, VectorField};
use dyadic_motion::preference::{build_pairs, finetune, train_talking_only, DpoConfig};
use dyadic_motion::sampler::SamplerConfig;
use dyadic_motion::trainer::{train, TrainConfig};
use dyadic_motion::world::{Dataset, WorldParams};

fn main() -> dyadic_motion::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(1000);
    let dpo_steps = args.get(1).copied().unwrap_or(100);
    let wp = WorldParams::default();
    let data = Dataset::generate(1, 16, 300, &wp)?;
    let test = Dataset::generate(2, 8, 300, &wp)?;
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
    let tc = TrainConfig {
        steps,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let (model, mut params) = VectorField::init(mc.clone(), 7)?;
    train(&model, &mut params, &clips, &tc, None)?;
    let (talking, talking_params, _) = train_talking_only(&mc, &clips, &tc, 8)?;

    let sampler = SamplerConfig {
        seed: 5,
        ..SamplerConfig::default()
    };
    let pairs = build_pairs(&data, &codec, &world, &talking, &talking_params, &sampler)?;
    let winners: Vec<_> = pairs.pairs.iter().map(|p| p.winner.clone()).collect();
    let losers: Vec<_> = pairs.pairs.iter().map(|p| p.loser.clone()).collect();
    println!(
        "{} pairs; latent variance winners {:.4}, losers {:.4}",
        pairs.pairs.len(),
        var_metric(&winners, &[0, 1, 2, 3])?,
        var_metric(&losers, &[0, 1, 2, 3])?
    );

    let dpo = DpoConfig {
        steps: dpo_steps,
        ..DpoConfig::default()
    };
    let ft = TrainConfig { seed: 99, ..tc.clone() };
    let reference = params.clone();
    let mut tuned = params.clone();
    let rep = finetune(&model, &mut tuned, &reference, &pairs.pairs, &clips, &ft, &dpo)?;
    let first = &rep.trace[0];
    let last = rep.trace.last().unwrap();
    println!("L_DPO {:.4} -> {:.4}, L_DF {:.4} -> {:.4}", first.dpo_loss, last.dpo_loss, first.df_loss, last.df_loss);
    let mut control = params.clone();
    finetune(&model, &mut control, &reference, &pairs.pairs, &clips, &ft, &DpoConfig { lambda: 0.0, ..dpo })?;

    let mcfg = MetricConfig::default();
    let eval = |p| evaluate(&model, p, &sampler, &codec, &world, &test, &mcfg);
    let rows = vec![
        ("talking-only".to_string(), Some(evaluate(&talking, &talking_params, &sampler, &codec, &world, &test, &mcfg)?)),
        ("pre-DPO".to_string(), Some(eval(&params)?)),
        ("continued DF".to_string(), Some(eval(&control)?)),
        ("DPO".to_string(), Some(eval(&tuned)?)),
    ];
    print!("{}", format_table(&rows));
    Ok(())
}
