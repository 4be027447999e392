use super::graph::{Graph, Var};
use super::params::{Binding, ParamStore};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::masking::build_lookahead_mask;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every trainable entry.
///
/// Frozen entries get zeros, matching what backprop reports for them.
pub fn finite_diff_grad<F>(store: &ParamStore<f64>, h: f64, mut f: F) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {h}")));
    }
    let mut work = store.clone();
    let mut out = store.zero_grads();
    for (i, e) in store.iter().enumerate() {
        if !e.trainable {
            continue;
        }
        let id = store.id(&e.name).unwrap();
        for k in 0..e.value.len() {
            let x0 = e.value.data()[k];
            work.get_mut(id).data_mut()[k] = x0 + h;
            let fp = f(&work)?;
            work.get_mut(id).data_mut()[k] = x0 - h;
            let fm = f(&work)?;
            work.get_mut(id).data_mut()[k] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!("f around `{}`[{k}]", e.name)));
            }
            out[i].data_mut()[k] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` over the concatenation of all tensors.
///
/// Zero when both are exactly zero.
pub fn relative_error(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let den = na.max(nb).sqrt();
    if den == 0.0 {
        0.0
    } else {
        diff.sqrt() / den
    }
}

/// Outcome of one backprop-vs-finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Runs `loss` once under backprop and repeatedly under central differences.
pub fn check_gradients<F>(name: &str, store: &ParamStore<f64>, loss: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &Binding, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let l = loss(&mut g, &b, store)?;
    let grads = g.backward(l)?;
    let analytic = store.collect_grads(&b, &grads);
    let numeric = finite_diff_grad(store, FD_STEP, |p| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let l = loss(&mut g, &b, p)?;
        Ok(g.value(l).item())
    })?;
    Ok(GradCheck {
        name: name.to_string(),
        rel_err: relative_error(&analytic, &numeric),
    })
}

fn rand_t(rng: &mut SeededRng, r: usize, c: usize) -> Tensor<f64> {
    let d = (0..r * c).map(|_| rng.normal() * 0.7).collect();
    Tensor::from_matrix(r, c, d).unwrap()
}

fn away_from_zero(rng: &mut SeededRng, r: usize, c: usize) -> Tensor<f64> {
    let d = (0..r * c)
        .map(|_| {
            let m = 0.2 + rng.uniform();
            if rng.bernoulli(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_matrix(r, c, d).unwrap()
}

/// Dot product of `out` with a fixed random projection, so that every
/// output element contributes a distinct weight to the scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let w = rand_t(&mut SeededRng::new(seed), r, c);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Gradient checks for every differentiable graph operation.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SeededRng::new(seed);
    let (n, h) = (6usize, 8usize);
    let cases: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
        ("matmul", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, h, 3)], |g, v| g.matmul(v[0], v[1])),
        ("add", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)], |g, v| g.add(v[0], v[1])),
        ("sub", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, 1, h)], |g, v| g.add_row(v[0], v[1])),
        ("scale", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        ("silu", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.silu(v[0]))),
        ("tanh", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.tanh(v[0]))),
        ("abs", vec![away_from_zero(&mut rng, n, h)], |g, v| Ok(g.abs(v[0]))),
        ("log_sigmoid", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.log_sigmoid(v[0]))),
        ("layer_norm", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.layer_norm(v[0]))),
        ("rope", vec![rand_t(&mut rng, n, h)], |g, v| {
            g.rope(v[0], &[0, 1, 2, 3, 7, 11], 2)
        }),
        (
            "masked_attention",
            vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)],
            |g, v| {
                let mask = build_lookahead_mask(6, 2, 1);
                g.attention(v[0], v[1], v[2], &mask, 2)
            },
        ),
        (
            "masked_attention_rotary",
            vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)],
            |g, v| {
                let pos = [0, 1, 2, 3, 4, 5];
                let q = g.rope(v[0], &pos, 2)?;
                let k = g.rope(v[1], &pos, 2)?;
                let mask = build_lookahead_mask(6, 2, 0);
                g.attention(q, k, v[2], &mask, 2)
            },
        ),
        ("concat_cols", vec![rand_t(&mut rng, n, 3), rand_t(&mut rng, n, 5)], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("slice_cols", vec![rand_t(&mut rng, n, h)], |g, v| g.slice_cols(v[0], 2, 4)),
        ("concat_rows", vec![rand_t(&mut rng, 2, h), rand_t(&mut rng, 4, h)], |g, v| {
            g.concat_rows(&[v[0], v[1]])
        }),
        ("slice_rows", vec![rand_t(&mut rng, n, h)], |g, v| g.slice_rows(v[0], 1, 3)),
        ("broadcast_rows", vec![rand_t(&mut rng, 1, h)], |g, v| Ok(g.broadcast_rows(v[0], 5))),
        ("mean_rows", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.mean_rows(v[0]))),
        ("mean", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.mean(v[0]))),
        ("sum", vec![rand_t(&mut rng, n, h)], |g, v| Ok(g.sum(v[0]))),
        ("l1_mean", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)], |g, v| g.l1_mean(v[0], v[1])),
        ("mse", vec![rand_t(&mut rng, n, h), rand_t(&mut rng, n, h)], |g, v| g.mse(v[0], v[1])),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, inputs, op)) in cases.into_iter().enumerate() {
        let mut store = ParamStore::new();
        for (k, t) in inputs.into_iter().enumerate() {
            store.insert(format!("x{k}"), t, true)?;
        }
        let ids: Vec<_> = (0..store.len()).map(|k| store.id(&format!("x{k}")).unwrap()).collect();
        let proj_seed = seed ^ (0x9e37_79b9 + i as u64);
        out.push(check_gradients(name, &store, |g, b, _| {
            let vars: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
            let y = op(g, &vars)?;
            project(g, y, proj_seed)
        })?);
    }
    Ok(out)
}
