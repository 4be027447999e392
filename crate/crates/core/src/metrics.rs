//! Reactiveness and richness metrics over motion-parameter sequences.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, LinearWorld};
use crate::error::{Error, Result};
use crate::model::VectorField;
use crate::numeric::{ParamStore, SeededRng, Tensor};
use crate::sampler::{generate, SamplerConfig};
use crate::world::{Dataset, EXPRESSION, POSE};

/// Pearson correlation per channel; `None` where either side is constant.
pub fn pcc(z: &Tensor, x: &Tensor) -> Result<Vec<Option<f64>>> {
    if z.shape() != x.shape() {
        return Err(Error::Shape(format!("pcc: {:?} vs {:?}", z.shape(), x.shape())));
    }
    if z.rows() < 2 {
        return Err(Error::Invalid("pcc needs at least two frames".into()));
    }
    Ok((0..z.cols()).map(|c| pearson(&column(z, c), &column(x, c))).collect())
}

pub fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.get(i, c) as f64).collect()
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Mean over `channels` of `|PCC(y|x) - PCC(y_hat|x)|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rpcc {
    pub value: f64,
    /// Channels excluded because a correlation was undefined.
    pub undefined: usize,
}

pub fn rpcc(y_gt: &Tensor, y_gen: &Tensor, x_user: &Tensor, channels: &[usize]) -> Result<Rpcc> {
    let a = pcc(y_gt, x_user)?;
    let b = pcc(y_gen, x_user)?;
    let mut sum = 0.0;
    let mut used = 0;
    for &c in channels {
        if let (Some(p), Some(q)) = (a[c], b[c]) {
            sum += (p - q).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Invalid("every rPCC channel is undefined".into()));
    }
    Ok(Rpcc {
        value: sum / used as f64,
        undefined: channels.len() - used,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm from `restarts` random initialisations; lowest inertia wins.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, restarts: usize, max_iter: usize) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Invalid(format!("k = {k} for {} points", points.len())));
    }
    let mut rng = SeededRng::new(seed).derive(41);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        for i in 0..k {
            let j = i + rng.below(points.len() - i);
            idx.swap(i, j);
        }
        let mut centroids: Vec<Vec<f64>> = idx[..k].iter().map(|&i| points[i].clone()).collect();
        let mut assignments = vec![usize::MAX; points.len()];
        for _ in 0..max_iter.max(1) {
            let mut changed = false;
            for (a, p) in assignments.iter_mut().zip(points) {
                let j = nearest(p, &centroids).0;
                if *a != j {
                    *a = j;
                    changed = true;
                }
            }
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (&a, p) in assignments.iter().zip(points) {
                counts[a] += 1;
                for (s, &x) in sums[a].iter_mut().zip(p) {
                    *s += x;
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                }
            }
            if !changed {
                break;
            }
        }
        let inertia = points.iter().map(|p| nearest(p, &centroids).1).sum();
        let assignments = points.iter().map(|p| nearest(p, &centroids).0).collect();
        let run = KMeans {
            centroids,
            assignments,
            inertia,
        };
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Shannon entropy (natural log) of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

fn rows_of(t: &Tensor, channels: &[usize]) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| channels.iter().map(|&c| t.get(i, c) as f64).collect())
        .collect()
}

/// Average per-clip entropy of cluster occupancy, clusters fit on pooled frames.
pub fn sid(sequences: &[Tensor], channels: &[usize], k: usize, seed: u64, restarts: usize) -> Result<f64> {
    let per: Vec<Vec<Vec<f64>>> = sequences.iter().map(|s| rows_of(s, channels)).collect();
    let pooled: Vec<Vec<f64>> = per.iter().flatten().cloned().collect();
    if k > pooled.len() {
        return Err(Error::Invalid(format!("K = {k} exceeds {} frames", pooled.len())));
    }
    // Clustering runs on the frames in a canonical order, so the result does
    // not depend on the order of the clips.
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| {
        pooled[a]
            .iter()
            .zip(&pooled[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| pooled[i].clone()).collect();
    let km = kmeans(&sorted, k, seed, restarts, 100)?;
    let mut assignment = vec![0; pooled.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = km.assignments[pos];
    }
    let mut at = 0;
    let mut total = 0.0;
    for s in &per {
        let mut counts = vec![0; k];
        for &a in &assignment[at..at + s.len()] {
            counts[a] += 1;
        }
        at += s.len();
        total += entropy(&counts);
    }
    Ok(total / per.len() as f64)
}

/// Temporal variance per channel, averaged over channels and then clips.
pub fn var_metric(sequences: &[Tensor], channels: &[usize]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Invalid("no sequences".into()));
    }
    let mut total = 0.0;
    for s in sequences {
        if s.rows() < 2 {
            return Err(Error::Invalid("variance needs two frames".into()));
        }
        let mut v = 0.0;
        for &c in channels {
            let x = column(s, c);
            let m = x.iter().sum::<f64>() / x.len() as f64;
            v += x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
        }
        total += v / channels.len() as f64;
    }
    Ok(total / sequences.len() as f64)
}

fn gaussian_fit(sequences: &[Tensor], channels: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let rows: Vec<Vec<f64>> = sequences.iter().flat_map(|s| rows_of(s, channels)).collect();
    let d = channels.len();
    if rows.len() < d + 1 {
        return Err(Error::Invalid(format!("{} frames for a {d}-dim Gaussian fit", rows.len())));
    }
    let n = rows.len() as f64;
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::zeros(d, d);
    for r in &rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mu[i]) * (r[j] - mu[j]);
            }
        }
    }
    Ok((mu, cov / (n - 1.0)))
}

const PSD_TOL: f64 = 1e-8;

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let e = SymmetricEigen::new(m.clone());
    let mut vals = e.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -PSD_TOL {
            return Err(Error::Invalid(format!("{what} is not PSD: eigenvalues {:?}", e.eigenvalues.as_slice())));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// Frechet distance between Gaussian fits of two frame sets.
pub fn frechet_distance(gen: &[Tensor], gt: &[Tensor], channels: &[usize]) -> Result<f64> {
    let (mg, sg) = gaussian_fit(gen, channels)?;
    let (mt, st) = gaussian_fit(gt, channels)?;
    let root_t = psd_sqrt(&st, "ground-truth covariance")?;
    let inner = &root_t * &sg * &root_t;
    let inner = (&inner + inner.transpose()) * 0.5;
    let e = SymmetricEigen::new(inner);
    let mut tr_sqrt = 0.0;
    for &v in e.eigenvalues.iter() {
        if v < -PSD_TOL {
            return Err(Error::Invalid(format!(
                "covariance product is not PSD: eigenvalues {:?}",
                e.eigenvalues.as_slice()
            )));
        }
        tr_sqrt += v.max(0.0).sqrt();
    }
    let mean: f64 = mg.iter().zip(&mt).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((mean + sg.trace() + st.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Mean over frames of `|m[n+1] - 2 m[n] + m[n-1]|`.
pub fn jerk(seq: &Tensor) -> f64 {
    let n = seq.rows();
    if n < 3 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 1..n - 1 {
        let (a, b, c) = (seq.row(i - 1), seq.row(i), seq.row(i + 1));
        total += a
            .iter()
            .zip(b)
            .zip(c)
            .map(|((&a, &b), &c)| {
                let j = (c - 2.0 * b + a) as f64;
                j * j
            })
            .sum::<f64>()
            .sqrt();
    }
    total / (n - 2) as f64
}

pub fn mean_jerk(sequences: &[Tensor]) -> f64 {
    sequences.iter().map(jerk).sum::<f64>() / sequences.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub k_exp: usize,
    pub k_pose: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            k_exp: 4,
            k_pose: 3,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rpcc_exp: f64,
    pub rpcc_pose: f64,
    pub sid_exp: f64,
    pub sid_pose: f64,
    pub var_exp: f64,
    pub var_pose: f64,
    pub fd_exp: f64,
    pub fd_pose: f64,
    pub jerk: f64,
    pub clips: usize,
    pub failed_clips: usize,
    pub undefined_channels: usize,
    pub config: MetricConfig,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "rPCC-Exp", "rPCC-Pose", "SID-Exp", "SID-Pose", "Var-Exp", "Var-Pose", "FD-Exp", "FD-Pose", "Jerk",
];

impl MetricReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.rpcc_exp,
            self.rpcc_pose,
            self.sid_exp,
            self.sid_pose,
            self.var_exp,
            self.var_pose,
            self.fd_exp,
            self.fd_pose,
            self.jerk,
        ]
    }

    pub fn csv_header() -> String {
        format!("name,{},clips,failed,undefined,k_exp,k_pose,seed", REPORT_COLUMNS.join(","))
    }

    pub fn csv_row(&self, name: &str) -> String {
        let v: Vec<String> = self.values().iter().map(|x| format!("{x:.6}")).collect();
        format!(
            "{name},{},{},{},{},{},{},{}",
            v.join(","),
            self.clips,
            self.failed_clips,
            self.undefined_channels,
            self.config.k_exp,
            self.config.k_pose,
            self.config.seed
        )
    }
}

/// Aligned text table of named reports.
pub fn format_table(rows: &[(String, Option<MetricReport>)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<name_w$}", "name");
    for c in REPORT_COLUMNS {
        s.push_str(&format!(" {c:>10}"));
    }
    s.push('\n');
    for (n, r) in rows {
        s.push_str(&format!("{n:<name_w$}"));
        match r {
            Some(r) => {
                for v in r.values() {
                    s.push_str(&format!(" {v:>10.4}"));
                }
            }
            None => {
                for _ in REPORT_COLUMNS {
                    s.push_str(&format!(" {:>10}", "absent"));
                }
            }
        }
        s.push('\n');
    }
    s
}

/// Metrics of generated avatar parameters against ground truth and the user.
///
/// Clips whose rPCC cannot be computed are counted as failed and left out of
/// the rPCC averages.
pub fn evaluate_sequences(gen: &[Tensor], gt: &[Tensor], user: &[Tensor], cfg: &MetricConfig) -> Result<MetricReport> {
    if gen.len() != gt.len() || gen.len() != user.len() || gen.is_empty() {
        return Err(Error::Shape(format!(
            "{} generated, {} ground-truth, {} user sequences",
            gen.len(),
            gt.len(),
            user.len()
        )));
    }
    let (mut re, mut rp, mut ok, mut undefined, mut failed) = (0.0, 0.0, 0usize, 0, 0);
    for ((g, t), u) in gen.iter().zip(gt).zip(user) {
        match (rpcc(t, g, u, &EXPRESSION), rpcc(t, g, u, &POSE)) {
            (Ok(a), Ok(b)) => {
                re += a.value;
                rp += b.value;
                undefined += a.undefined + b.undefined;
                ok += 1;
            }
            _ => failed += 1,
        }
    }
    // No clip with a defined rPCC leaves the mean undefined.
    let denom = if ok == 0 { f64::NAN } else { ok as f64 };
    Ok(MetricReport {
        rpcc_exp: re / denom,
        rpcc_pose: rp / denom,
        sid_exp: sid(gen, &EXPRESSION, cfg.k_exp, cfg.seed, cfg.restarts)?,
        sid_pose: sid(gen, &POSE, cfg.k_pose, cfg.seed, cfg.restarts)?,
        var_exp: var_metric(gen, &EXPRESSION)?,
        var_pose: var_metric(gen, &POSE)?,
        fd_exp: frechet_distance(gen, gt, &EXPRESSION)?,
        fd_pose: frechet_distance(gen, gt, &POSE)?,
        jerk: mean_jerk(gen),
        clips: gen.len(),
        failed_clips: failed,
        undefined_channels: undefined,
        config: cfg.clone(),
    })
}

/// Generated, ground-truth and user parameter sequences for a dataset.
pub struct Rollouts {
    pub generated: Vec<Tensor>,
    pub ground_truth: Vec<Tensor>,
    pub user: Vec<Tensor>,
    pub failed: usize,
}

/// Streams every clip through the model and decodes through the codec and
/// the world's motion oracle. Clip `k` uses sampler seed `seed + k`.
pub fn rollout(
    model: &VectorField,
    params: &ParamStore,
    sampler: &SamplerConfig,
    codec: &Codec,
    world: &LinearWorld,
    data: &Dataset,
) -> Result<Rollouts> {
    let mut out = Rollouts {
        generated: Vec::new(),
        ground_truth: Vec::new(),
        user: Vec::new(),
        failed: 0,
    };
    for (k, clip) in data.clips.iter().enumerate() {
        let run = || -> Result<Tensor> {
            let e = codec.embed_clip(world, clip, k)?;
            let cfg = SamplerConfig {
                seed: sampler.seed.wrapping_add(k as u64),
                ..sampler.clone()
            };
            let m = generate(model, params, &e.condition(), &e.avatar_identity, &e.reference, &cfg)?;
            codec.latents_to_params(world, &e.avatar_identity, &m)
        };
        match run() {
            Ok(g) => {
                out.generated.push(g);
                out.ground_truth.push(clip.avatar_motion.clone());
                out.user.push(clip.user_motion.clone());
            }
            Err(Error::UntrainedCodec) => return Err(Error::UntrainedCodec),
            Err(_) => out.failed += 1,
        }
    }
    Ok(out)
}

/// Generates every clip and scores it against ground truth.
pub fn evaluate(
    model: &VectorField,
    params: &ParamStore,
    sampler: &SamplerConfig,
    codec: &Codec,
    world: &LinearWorld,
    data: &Dataset,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let r = rollout(model, params, sampler, codec, world, data)?;
    let mut rep = evaluate_sequences(&r.generated, &r.ground_truth, &r.user, cfg)?;
    rep.failed_clips += r.failed;
    Ok(rep)
}
