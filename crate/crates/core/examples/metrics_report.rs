//! Interaction metrics on ground truth, on a time-shuffled avatar and on a
//! frozen avatar.

use dyadic_motion::metrics::{evaluate_sequences, format_table, pcc, MetricConfig};
use dyadic_motion::numeric::Tensor;
use dyadic_motion::world::{Dataset, WorldParams};

fn main() -> dyadic_motion::Result<()> {
    let data = Dataset::generate(2, 16, 300, &WorldParams::default())?;
    let gt: Vec<Tensor> = data.clips.iter().map(|c| c.avatar_motion.clone()).collect();
    let user: Vec<Tensor> = data.clips.iter().map(|c| c.user_motion.clone()).collect();
    // Another clip's avatar: plausible motion, wrong partner.
    let swapped: Vec<Tensor> = (0..gt.len()).map(|k| gt[(k + 1) % gt.len()].clone()).collect();
    let still: Vec<Tensor> = gt.iter().map(|t| t.map(|_| 0.0)).collect();
    let cfg = MetricConfig::default();
    let rows = vec![
        ("ground truth".to_string(), Some(evaluate_sequences(&gt, &gt, &user, &cfg)?)),
        ("swapped partner".to_string(), Some(evaluate_sequences(&swapped, &gt, &user, &cfg)?)),
        ("frozen avatar".to_string(), evaluate_sequences(&still, &gt, &user, &cfg).ok()),
    ];
    print!("{}", format_table(&rows));
    let r = pcc(&gt[0], &user[0])?;
    println!("clip 0 per-channel PCC(avatar, user): {r:.3?}");
    Ok(())
}
