use dyadic_motion::config::RunConfig;
use dyadic_motion::masking::{
    build_blockwise_causal_mask, build_lookahead_mask, build_sliding_window_mask, AttentionMask,
};
use dyadic_motion::model::{ConditionTriplet, ModelConfig, VectorField};
use dyadic_motion::numeric::{params_from_bytes, params_to_bytes, Graph, ParamStore, SeededRng, Tensor};
use dyadic_motion::preference::{dpo_margin, dpo_objective};
use dyadic_motion::sampler::guide;
use dyadic_motion::world::{generate_clip, WorldParams};
use proptest::prelude::*;

fn toy_model(seed: u64) -> (VectorField, ParamStore) {
    let cfg = ModelConfig {
        width: 16,
        heads: 2,
        depth: 2,
        latent_dim: 4,
        block_size: 2,
        look_ahead: 1,
        time_dim: 8,
        ..ModelConfig::default()
    };
    let (m, mut p) = VectorField::init(cfg, seed).unwrap();
    let mut r = SeededRng::new(seed + 1);
    for id in p.ids().collect::<Vec<_>>() {
        for x in p.get_mut(id).data_mut() {
            *x += 0.2 * r.normal() as f32;
        }
    }
    (m, p)
}

fn field(m: &VectorField, p: &ParamStore, noisy: &Tensor, times: &[f64], cond: &ConditionTriplet) -> Tensor {
    let n = noisy.rows();
    let frames: Vec<usize> = (0..n).collect();
    let rules = m.config.training_rules();
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let x = g.constant(noisy.clone());
    let s = g.constant(Tensor::zeros(&[1, m.config.latent_dim]));
    let v = m.forward_window(&mut g, &b, x, times, Some(cond), s, &frames, &rules).unwrap();
    g.value(v).clone()
}

fn cond(r: &mut SeededRng, n: usize, c: &ModelConfig) -> ConditionTriplet {
    ConditionTriplet {
        user_audio: r.gaussian(&[n, c.audio_dim]),
        user_motion: r.gaussian(&[n, c.latent_dim]),
        avatar_audio: r.gaussian(&[n, c.audio_dim]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lookahead_mask_is_the_block_inequality(n in 1usize..=64, b in 1usize..=16, l in 0usize..=4) {
        let m = build_lookahead_mask(n, b, l);
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(m.admits(i, j), j / b <= i / b + l);
            }
        }
    }

    #[test]
    fn raising_lookahead_never_removes_entries(n in 1usize..=48, b in 1usize..=12, l in 0usize..4) {
        let lo = build_lookahead_mask(n, b, l);
        let hi = build_lookahead_mask(n, b, l + 1);
        for i in 0..n {
            for j in 0..n {
                prop_assert!(!lo.admits(i, j) || hi.admits(i, j));
            }
        }
        let causal = build_blockwise_causal_mask(n, b);
        let both = causal.intersect(&lo).unwrap();
        for i in 0..n {
            prop_assert_eq!(both.row(i), causal.row(i));
        }
    }

    #[test]
    fn sliding_window_rows_shift(n in 8usize..=64, w in 1usize..=4) {
        let m = build_sliding_window_mask(n, w);
        for i in w..n.saturating_sub(w + 1) {
            for j in 0..n - 1 {
                prop_assert_eq!(m.admits(i + 1, j + 1), m.admits(i, j));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        shapes in prop::collection::vec((1usize..6, 1usize..6), 1..6),
        seed in any::<u64>(),
    ) {
        let mut r = SeededRng::new(seed);
        let mut s = ParamStore::new();
        for (k, (a, b)) in shapes.iter().enumerate() {
            s.insert(format!("p{k}.w"), r.gaussian(&[*a, *b]), true).unwrap();
        }
        let back = params_from_bytes(&params_to_bytes(&s)).unwrap();
        prop_assert_eq!(back.len(), s.len());
        for (x, y) in s.iter().zip(back.iter()) {
            prop_assert_eq!(&x.name, &y.name);
            prop_assert_eq!(x.value.shape(), y.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&x.value), bits(&y.value));
        }
    }

    #[test]
    fn world_is_deterministic_per_seed(seed in any::<u64>()) {
        let p = WorldParams::default();
        prop_assert_eq!(generate_clip(seed, 80, &p).unwrap(), generate_clip(seed, 80, &p).unwrap());
    }

    #[test]
    fn swapping_winner_and_loser_negates_the_margin(
        e in prop::collection::vec(0.0f64..2.0, 4),
        beta in 1.0f64..2000.0,
    ) {
        let m = dpo_margin(e[0], e[1], e[2], e[3]);
        let s = dpo_margin(e[2], e[3], e[0], e[1]);
        prop_assert_eq!(s, -m);
        // the objective of the swapped pair is -log sigmoid(+beta m)
        let x = -beta * m;
        let want = x.max(0.0) + (-x.abs()).exp().ln_1p();
        prop_assert!((dpo_objective(s, beta) - want).abs() < 1e-9 * want.max(1.0));
    }

    #[test]
    fn larger_beta_moves_loss_away_from_ln2(m in -0.01f64..0.01, b in 1.0f64..500.0, k in 1.01f64..4.0) {
        prop_assume!(m.abs() > 1e-6);
        let d = |beta: f64| (dpo_objective(m, beta) - std::f64::consts::LN_2).abs();
        prop_assert!(d(b * k) > d(b));
    }

    #[test]
    fn guidance_endpoints_and_linearity(seed in any::<u64>(), s in -2.0f64..4.0) {
        let mut r = SeededRng::new(seed);
        let n = r.gaussian(&[3, 4]);
        let c = r.gaussian(&[3, 4]);
        prop_assert_eq!(guide(&n, &c, 0.0).unwrap(), n.clone());
        prop_assert_eq!(guide(&n, &c, 1.0).unwrap(), c.clone());
        let g = guide(&n, &c, s).unwrap();
        for i in 0..g.len() {
            let want = n.data()[i] as f64 + s * (c.data()[i] - n.data()[i]) as f64;
            prop_assert!((g.data()[i] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn config_text_round_trips(width in 1usize..8, depth in 1usize..6, guidance in 0.0f64..5.0, seed in 0..=i64::MAX as u64) {
        let mut c = RunConfig::default();
        c.model.width = width * 8;
        c.model.heads = 2;
        c.model.depth = depth;
        c.sampler.guidance = guidance;
        c.seed = seed;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        prop_assert_eq!(back.digest(), c.digest());
        prop_assert_eq!(back, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn field_is_finite_for_any_flow_time(
        times in prop::collection::vec(0.0f64..=1.0, 6),
        scale in 0.0f32..3.0,
        seed in 0u64..50,
    ) {
        let (m, p) = toy_model(seed);
        let mut r = SeededRng::new(seed + 7);
        let noisy = r.gaussian(&[6, 4]).map(|x| scale * x);
        let c = cond(&mut r, 6, &m.config);
        prop_assert!(field(&m, &p, &noisy, &times, &c).all_finite());
        let edges = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        prop_assert!(field(&m, &p, &noisy, &edges, &c).all_finite());
    }

    #[test]
    fn flow_time_of_a_hidden_block_does_not_leak(seed in 0u64..50, block in 0usize..4, t in 0.0f64..=1.0) {
        let (m, p) = toy_model(seed);
        let (n, bs, l) = (8, m.config.block_size, m.config.look_ahead);
        let mut r = SeededRng::new(seed + 3);
        let noisy = r.gaussian(&[n, 4]);
        let c = cond(&mut r, n, &m.config);
        let times: Vec<f64> = (0..n).map(|_| r.uniform()).collect();
        let base = field(&m, &p, &noisy, &times, &c);
        let mut moved = times.clone();
        for x in &mut moved[block * bs..(block + 1) * bs] {
            *x = t;
        }
        let out = field(&m, &p, &noisy, &moved, &c);
        for i in 0..n {
            if block > i / bs + l {
                prop_assert_eq!(out.row(i), base.row(i), "row {} saw block {}", i, block);
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = SeededRng::new(4);
    let n = 12;
    let mask: AttentionMask = build_lookahead_mask(n, 3, 1);
    let mut g = Graph::<f64>::new();
    let q = g.constant(r.gaussian(&[n, n]).cast());
    let k = g.constant(r.gaussian(&[n, n]).cast());
    let mut eye = Tensor::<f64>::zeros(&[n, n]);
    for i in 0..n {
        eye.set(i, i, 1.0);
    }
    let v = g.constant(eye);
    let a = g.attention(q, k, v, &mask, 1).unwrap();
    let probs = g.value(a);
    for i in 0..n {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
        for (j, &pij) in row.iter().enumerate() {
            assert!(pij >= 0.0);
            if !mask.admits(i, j) {
                assert_eq!(pij, 0.0);
            }
        }
    }
}

#[test]
fn seeds_beyond_the_integer_range_of_the_config_format_are_rejected() {
    let mut c = RunConfig::default();
    c.seed = u64::MAX;
    assert!(matches!(c.validate(), Err(dyadic_motion::Error::Config(_))));
}
