use dyadic_motion::metrics::{
    entropy, evaluate_sequences, frechet_distance, kmeans, pcc, rpcc, sid, var_metric, MetricConfig,
};
use dyadic_motion::numeric::{SeededRng, Tensor};
use dyadic_motion::world::{Dataset, WorldParams, EXPRESSION, POSE};
use proptest::prelude::*;

/// Textbook two-pass Pearson coefficient.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

fn col(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, c) as f64).collect()
}

fn sample_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn data() -> Dataset {
    Dataset::generate(5, 6, 200, &WorldParams::default()).unwrap()
}

#[test]
fn pcc_matches_direct_formula() {
    let d = data();
    for c in &d.clips {
        let r = pcc(&c.avatar_motion, &c.user_motion).unwrap();
        for (ch, v) in r.iter().enumerate() {
            let want = pearson(&col(&c.avatar_motion, ch), &col(&c.user_motion, ch));
            assert!((v.unwrap() - want).abs() < 1e-10, "channel {ch}: {v:?} vs {want}");
        }
    }
}

#[test]
fn rpcc_of_ground_truth_with_itself_is_zero() {
    let d = data();
    let gt: Vec<Tensor> = d.clips.iter().map(|c| c.avatar_motion.clone()).collect();
    let user: Vec<Tensor> = d.clips.iter().map(|c| c.user_motion.clone()).collect();
    let r = evaluate_sequences(&gt, &gt, &user, &MetricConfig::default()).unwrap();
    assert_eq!(r.rpcc_exp, 0.0);
    assert_eq!(r.rpcc_pose, 0.0);
    assert_eq!(format!("{:.3}", r.rpcc_exp), "0.000");
    assert!(r.fd_exp.abs() < 1e-8 && r.fd_pose.abs() < 1e-8);
}

#[test]
fn frechet_mean_shift_is_squared_norm() {
    let d = data();
    let gt: Vec<Tensor> = d.clips.iter().map(|c| c.avatar_motion.clone()).collect();
    let delta = [0.5f32, -0.25];
    let shifted: Vec<Tensor> = gt
        .iter()
        .map(|t| {
            let mut s = t.clone();
            for i in 0..s.rows() {
                for (k, &c) in EXPRESSION.iter().enumerate() {
                    s.set(i, c, t.get(i, c) + delta[k]);
                }
            }
            s
        })
        .collect();
    // shift measured on the stored f32 values
    let mut want = 0.0;
    for &c in &EXPRESSION {
        let a: f64 = gt.iter().flat_map(|t| col(t, c)).sum::<f64>();
        let b: f64 = shifted.iter().flat_map(|t| col(t, c)).sum::<f64>();
        let n = (gt.len() * gt[0].rows()) as f64;
        want += ((b - a) / n).powi(2);
    }
    let fd = frechet_distance(&shifted, &gt, &EXPRESSION).unwrap();
    assert!((fd - want).abs() < 1e-8, "{fd} vs {want}");
}

#[test]
fn frechet_one_dimensional_scale() {
    let mut r = SeededRng::new(3);
    let x: Vec<f32> = (0..400).map(|_| r.normal() as f32).collect();
    let a = Tensor::from_matrix(400, 1, x.clone()).unwrap();
    let b = Tensor::from_matrix(400, 1, x.iter().map(|v| 2.5 * v + 0.75).collect()).unwrap();
    let (ma, sa) = sample_std(&col(&a, 0));
    let (mb, sb) = sample_std(&col(&b, 0));
    let want = (ma - mb).powi(2) + (sa - sb).powi(2);
    let fd = frechet_distance(&[b], &[a], &[0]).unwrap();
    assert!((fd - want).abs() < 1e-8, "{fd} vs {want}");
}

#[test]
fn entropy_closed_forms() {
    assert_eq!(entropy(&[10]), 0.0);
    assert!((entropy(&[5, 5]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((entropy(&[3, 3, 3, 3]) - 4f64.ln()).abs() < 1e-15);
    let want = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
    assert!((entropy(&[70, 30]) - want).abs() < 1e-15);
    assert!((want - 0.6109).abs() < 1e-4);
}

#[test]
fn sid_on_separated_clusters() {
    // 70 frames near (0,0) and 30 near (10,10): every restart finds the split.
    let mut rows = Vec::new();
    let mut r = SeededRng::new(1);
    for i in 0..100 {
        let base = if i < 70 { 0.0 } else { 10.0 };
        rows.push(vec![base + 0.01 * r.normal() as f32, base + 0.01 * r.normal() as f32]);
    }
    let t = Tensor::from_rows(&rows).unwrap();
    let s = sid(&[t], &[0, 1], 2, 0, 3).unwrap();
    let want = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
    assert_eq!(s, want);
}

#[test]
fn kmeans_is_deterministic_per_seed() {
    let mut r = SeededRng::new(9);
    let pts: Vec<Vec<f64>> = (0..200).map(|_| vec![r.normal(), r.normal()]).collect();
    let a = kmeans(&pts, 4, 7, 3, 50).unwrap();
    let b = kmeans(&pts, 4, 7, 3, 50).unwrap();
    assert_eq!(a, b);
}

fn seqs(seed: u64, n: usize) -> Vec<Tensor> {
    let mut r = SeededRng::new(seed);
    (0..n).map(|_| r.gaussian(&[40, 6])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rpcc_invariant_under_increasing_affine_maps(
        seed in 0u64..1000,
        scales in prop::collection::vec(0.1f32..5.0, 6),
        shifts in prop::collection::vec(-3.0f32..3.0, 6),
    ) {
        let s = seqs(seed, 3);
        let (gt, gen, user) = (&s[0], &s[1], &s[2]);
        let f = |t: &Tensor| {
            let mut o = t.clone();
            for i in 0..o.rows() {
                for c in 0..6 {
                    o.set(i, c, scales[c] * t.get(i, c) + shifts[c]);
                }
            }
            o
        };
        let a = rpcc(gt, gen, user, &EXPRESSION).unwrap().value;
        let b = rpcc(&f(gt), &f(gen), user, &EXPRESSION).unwrap().value;
        prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn metrics_ignore_clip_order(seed in 0u64..1000, rot in 1usize..5) {
        let gen = seqs(seed, 5);
        let gt = seqs(seed + 1, 5);
        let user = seqs(seed + 2, 5);
        let p = |v: &[Tensor]| { let mut w = v.to_vec(); w.rotate_left(rot); w };
        let cfg = MetricConfig { restarts: 2, ..MetricConfig::default() };
        let a = evaluate_sequences(&gen, &gt, &user, &cfg).unwrap();
        let b = evaluate_sequences(&p(&gen), &p(&gt), &p(&user), &cfg).unwrap();
        prop_assert!((a.rpcc_exp - b.rpcc_exp).abs() < 1e-12);
        prop_assert!((a.rpcc_pose - b.rpcc_pose).abs() < 1e-12);
        prop_assert!((a.var_exp - b.var_exp).abs() < 1e-12);
        prop_assert!((a.fd_exp - b.fd_exp).abs() < 1e-9);
        prop_assert!((a.fd_pose - b.fd_pose).abs() < 1e-9);
        prop_assert!((a.jerk - b.jerk).abs() < 1e-12);
        prop_assert!((a.sid_exp - b.sid_exp).abs() < 1e-12, "{} {}", a.sid_exp, b.sid_exp);
        prop_assert!((a.sid_pose - b.sid_pose).abs() < 1e-12);
    }

    #[test]
    fn variance_scales_quadratically(seed in 0u64..1000, k in 0.1f32..4.0) {
        let s = seqs(seed, 3);
        let scaled: Vec<Tensor> = s.iter().map(|t| t.map(|v| k * v)).collect();
        let a = var_metric(&s, &POSE).unwrap();
        let b = var_metric(&scaled, &POSE).unwrap();
        prop_assert!((b - (k as f64).powi(2) * a).abs() < 1e-4 * b.max(1.0));
    }
}
