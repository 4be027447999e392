//! Generates dyadic clips and measures the planted user-to-avatar reaction.

use dyadic_motion::world::{channel, lagged_correlation, Dataset, WorldParams, EXPRESSION};

fn main() -> dyadic_motion::Result<()> {
    let params = WorldParams::default();
    let data = Dataset::generate(1, 8, 300, &params)?;
    let path = std::env::temp_dir().join("example.afds");
    data.save(&path)?;
    let back = Dataset::load(&path)?;
    assert_eq!(back, data);
    println!("{} clips round-tripped through {}", back.len(), path.display());

    println!("lag  corr(user smile, avatar smile)");
    for lag in [0, params.react_lag / 2, params.react_lag, params.react_lag * 2] {
        let mut sum = 0.0;
        let mut n = 0;
        for c in &data.clips {
            let u = channel(&c.user_motion, EXPRESSION[0]);
            let a = channel(&c.avatar_motion, EXPRESSION[0]);
            if let Some(r) = lagged_correlation(&u, &a, lag) {
                sum += r;
                n += 1;
            }
        }
        println!("{lag:>3}  {:.3}", sum / n.max(1) as f64);
    }
    Ok(())
}
