//! Trains the identity/motion codec on rendered observations and checks
//! reconstruction on held-out clips.

use dyadic_motion::codec::{train_codec, CodecConfig, LinearWorld};
use dyadic_motion::world::{Dataset, WorldParams};

fn main() -> dyadic_motion::Result<()> {
    let wp = WorldParams::default();
    let train = Dataset::generate(1, 16, 300, &wp)?;
    let test = Dataset::generate(2, 4, 300, &wp)?;
    let cfg = CodecConfig::default();
    let world = LinearWorld::new(3, &cfg)?;
    let (codec, report) = train_codec(&world, &train, &cfg, 4)?;
    println!(
        "codec loss {:.5} -> {:.5} over {} steps",
        report.losses[0],
        report.losses.last().unwrap(),
        report.losses.len()
    );
    let mut mse = 0.0;
    for (k, clip) in test.clips.iter().enumerate() {
        let id = world.identity(world.avatar_identity(k));
        let obs = world.synth_frames(id, &clip.avatar_motion);
        let rec = codec.decode(&codec.encode_full(&obs)?)?;
        let d = rec.zip_map(&obs, |a, b| (a - b) * (a - b))?;
        mse += d.data().iter().map(|&x| x as f64).sum::<f64>() / d.data().len() as f64;
    }
    println!("held-out self-reconstruction MSE {:.2e}", mse / test.len() as f64);
    Ok(())
}
