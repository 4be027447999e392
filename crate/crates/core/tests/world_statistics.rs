use dyadic_motion::metrics::rpcc;
use dyadic_motion::numeric::Tensor;
use dyadic_motion::world::{Dataset, Speaker, WorldParams, EXPRESSION, LIP, MOTION_DIM};

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

#[test]
fn avatar_expression_varies_more_while_speaking() {
    let data = Dataset::generate(21, 100, 300, &WorldParams::default()).unwrap();
    let (mut listen, mut speak) = (0.0, 0.0);
    for c in &data.clips {
        for (who, acc) in [(Speaker::User, &mut listen), (Speaker::Avatar, &mut speak)] {
            let frames = c.frames_where(who);
            for &ch in &EXPRESSION {
                let v: Vec<f64> = frames.iter().map(|&i| c.avatar_motion.get(i, ch) as f64).collect();
                *acc += variance(&v) / (EXPRESSION.len() * data.len()) as f64;
            }
        }
    }
    assert!(listen < speak, "listening {listen:.4} vs speaking {speak:.4}");
}

/// Lagged mirror of the user's expression versus a predictor that only sees
/// the avatar's own audio.
#[test]
fn user_aware_predictor_has_better_rpcc() {
    let p = WorldParams::default();
    let data = Dataset::generate(22, 100, 300, &p).unwrap();
    let (mut mirror, mut audio) = (0.0, 0.0);
    for c in &data.clips {
        let n = c.len();
        let mut m = Tensor::zeros(&[n, MOTION_DIM]);
        let mut a = Tensor::zeros(&[n, MOTION_DIM]);
        for i in 0..n {
            let env = c.avatar_audio.get(i, 0);
            for &ch in &EXPRESSION {
                let lagged = if i >= p.react_lag { c.user_motion.get(i - p.react_lag, ch) } else { 0.0 };
                m.set(i, ch, p.react_gain as f32 * lagged);
                a.set(i, ch, env);
            }
            m.set(i, LIP, env);
            a.set(i, LIP, env);
        }
        mirror += rpcc(&c.avatar_motion, &m, &c.user_motion, &EXPRESSION).unwrap().value;
        audio += rpcc(&c.avatar_motion, &a, &c.user_motion, &EXPRESSION).unwrap().value;
    }
    let (mirror, audio) = (mirror / 100.0, audio / 100.0);
    assert!(mirror < audio, "mirror {mirror:.4} vs audio-only {audio:.4}");
}
