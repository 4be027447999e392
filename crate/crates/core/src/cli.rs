//! Command-line front end. Every command reads the run configuration, checks
//! the digests of the artifacts it consumes and writes its outputs together
//! with `.meta` sidecars under `--out`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checks::{all_checks, GRAD_TOLERANCE};
use crate::codec::{train_codec, Codec, EmbeddedClip, LinearWorld};
use crate::config::{digest_hex, fnv1a, ArtifactMeta, RunConfig, SeedStream};
use crate::error::{Error, Result};
use crate::masking::CausalKind;
use crate::metrics::{evaluate, evaluate_sequences, format_table, MetricReport};
use crate::model::{CondMode, ConditionTriplet, ModelConfig, VectorField};
use crate::numeric::{params_from_bytes, params_to_bytes, Graph, ParamStore};
use crate::preference::{build_pairs, finetune, pairs_to_bytes, train_talking_only};
use crate::sampler::{open_session, stream_dump_to_bytes, StreamRecord};
use crate::trainer::{train, TrainConfig};
use crate::world::Dataset;

#[derive(Debug, Parser)]
#[command(name = "dyadic-motion", version, about = "Streaming dyadic avatar motion toolkit")]
pub struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Accept artifacts produced under a different configuration.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and evaluation datasets.
    GenData,
    /// Train the codec or one of the motion generator variants.
    Train {
        #[arg(long, value_enum)]
        variant: Variant,
        /// Self-attention mask of a `df` run; the checkpoint is named after it.
        #[arg(long, value_enum)]
        mask: Option<MaskArg>,
    },
    /// Preference fine-tuning of a trained checkpoint.
    Dpo {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        talking: Option<PathBuf>,
    },
    /// Stream one evaluation clip block by block.
    Stream {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Only stream the first `frames` frames of the clip.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        dump_stream: Option<PathBuf>,
    },
    /// Metric report for a checkpoint, or ground truth against itself.
    Evaluate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Ablation table over the trained variants and masks.
    Ablate,
    /// Backprop against finite differences for every registered check.
    GradCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Codec,
    Df,
    TalkingOnly,
    NoUserMotion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Framewise,
    Blockwise,
    Lookahead,
}

impl MaskArg {
    pub fn kind(self) -> CausalKind {
        match self {
            MaskArg::Framewise => CausalKind::Framewise,
            MaskArg::Blockwise => CausalKind::Blockwise,
            MaskArg::Lookahead => CausalKind::BlockwiseLookahead,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskArg::Framewise => "framewise",
            MaskArg::Blockwise => "blockwise",
            MaskArg::Lookahead => "lookahead",
        }
    }
}

pub const TRAIN_DATA: &str = "train.afds";
pub const EVAL_DATA: &str = "eval.afds";
pub const CODEC_CKPT: &str = "codec.afck";
pub const DF_CKPT: &str = "df.afck";
pub const TALKING_CKPT: &str = "talking-only.afck";
pub const NO_USER_CKPT: &str = "no-user-motion.afck";
pub const DPO_CKPT: &str = "dpo.afck";
pub const PAIRS_FILE: &str = "pairs.afpp";

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ctx = Context {
        digest: cfg.digest(),
        cfg,
        out: cli.out.clone(),
        force: cli.force,
    };
    std::fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    match &cli.command {
        Command::GenData => ctx.gen_data(),
        Command::Train { variant, mask } => ctx.train(*variant, *mask),
        Command::Dpo { base, talking } => ctx.dpo(base.as_deref(), talking.as_deref()),
        Command::Stream {
            ckpt,
            clip,
            frames,
            dump_stream,
        } => ctx.stream(ckpt.as_deref(), *clip, *frames, dump_stream.as_deref()),
        Command::Evaluate { ckpt, dataset } => ctx.evaluate(ckpt.as_deref(), dataset.as_deref()),
        Command::Ablate => ctx.ablate(),
        Command::GradCheck => ctx.grad_check(),
    }
}

struct Context {
    cfg: RunConfig,
    digest: u64,
    out: PathBuf,
    force: bool,
}

struct Loaded {
    model: VectorField,
    params: ParamStore,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn meta(&self, kind: &str) -> ArtifactMeta {
        ArtifactMeta::new(kind, self.digest)
    }

    fn write(&self, path: &Path, bytes: &[u8], meta: &ArtifactMeta) -> Result<()> {
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        meta.write(path)
    }

    fn read_checked(&self, path: &Path) -> Result<(Vec<u8>, ArtifactMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = ArtifactMeta::read(path)?;
        meta.check(self.digest, self.force)?;
        Ok((bytes, meta))
    }

    fn dataset(&self, path: &Path) -> Result<Dataset> {
        let (b, _) = self.read_checked(path)?;
        Dataset::from_bytes(&b)
    }

    fn world(&self) -> Result<LinearWorld> {
        LinearWorld::new(self.cfg.seed_for(SeedStream::World), &self.cfg.codec)
    }

    fn codec(&self) -> Result<Codec> {
        let p = self.path(CODEC_CKPT);
        let (b, meta) = self.read_checked(&p)?;
        let config = meta.codec.unwrap_or_else(|| self.cfg.codec.clone());
        Codec::from_params(config, params_from_bytes(&b)?)
    }

    fn load_model(&self, path: &Path) -> Result<Loaded> {
        let (b, meta) = self.read_checked(path)?;
        let config = meta
            .model
            .clone()
            .ok_or_else(|| Error::Format(format!("{}: no model configuration in sidecar", path.display())))?;
        let params = params_from_bytes(&b)?;
        let model = VectorField::from_params(config, &params)?;
        Ok(Loaded { model, params })
    }

    fn save_model(&self, name: &str, kind: &str, config: &ModelConfig, params: &ParamStore) -> Result<PathBuf> {
        let p = self.path(name);
        let mut meta = self.meta(kind);
        meta.model = Some(config.clone());
        self.write(&p, &params_to_bytes(params), &meta)?;
        Ok(p)
    }

    fn write_text(&self, name: &str, kind: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        self.write(&p, text.as_bytes(), &self.meta(kind))?;
        Ok(p)
    }

    fn embedded(&self, data: &Dataset, codec: &Codec, world: &LinearWorld) -> Result<Vec<EmbeddedClip>> {
        data.clips
            .iter()
            .enumerate()
            .map(|(k, c)| codec.embed_clip(world, c, k))
            .collect()
    }

    fn gen_data(&self) -> Result<i32> {
        let d = &self.cfg.data;
        for (name, stream, clips) in [
            (TRAIN_DATA, SeedStream::Data, d.clips),
            (EVAL_DATA, SeedStream::EvalData, d.eval_clips),
        ] {
            let ds = Dataset::generate(self.cfg.seed_for(stream), clips, d.frames, &self.cfg.world)?;
            let p = self.path(name);
            self.write(&p, &ds.to_bytes(), &self.meta("dataset"))?;
            println!("{}: {} clips x {} frames", p.display(), ds.len(), d.frames);
        }
        println!("config digest {}", digest_hex(self.digest));
        Ok(0)
    }

    fn train(&self, variant: Variant, mask: Option<MaskArg>) -> Result<i32> {
        if mask.is_some() && variant != Variant::Df {
            return Err(Error::Config("--mask applies to the df variant only".into()));
        }
        let data = self.dataset(&self.path(TRAIN_DATA))?;
        let world = self.world()?;
        if variant == Variant::Codec {
            let (codec, rep) = train_codec(&world, &data, &self.cfg.codec, self.cfg.seed_for(SeedStream::Codec))?;
            let p = self.path(CODEC_CKPT);
            let mut meta = self.meta("codec");
            meta.codec = Some(codec.config.clone());
            self.write(&p, &params_to_bytes(&codec.params), &meta)?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in rep.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.9}\n"));
            }
            self.write_text("codec_loss.csv", "loss-trace", &csv)?;
            let first = rep.losses.first().copied().unwrap_or(f32::NAN);
            let last = rep.losses.last().copied().unwrap_or(f32::NAN);
            println!("codec loss {first:.6} -> {last:.6}; wrote {}", p.display());
            return Ok(0);
        }
        let codec = self.codec()?;
        let clips = self.embedded(&data, &codec, &world)?;
        let tc = self.cfg.train_resolved();
        let base = self.cfg.model.clone();
        let (name, model, params, rep) = match variant {
            Variant::TalkingOnly => {
                let (m, p, r) = train_talking_only(&base, &clips, &tc, self.cfg.seed_for(SeedStream::TalkingInit))?;
                (TALKING_CKPT.to_string(), m, p, r)
            }
            _ => {
                let (name, config) = match (variant, mask) {
                    (Variant::NoUserMotion, _) => (
                        NO_USER_CKPT.to_string(),
                        ModelConfig {
                            cond_mode: CondMode::NoUserMotion,
                            ..base
                        },
                    ),
                    (_, Some(m)) => (format!("df-{}.afck", m.name()), ModelConfig { mask: m.kind(), ..base }),
                    _ => (DF_CKPT.to_string(), base),
                };
                let (m, mut p) = VectorField::init(config, self.cfg.seed_for(SeedStream::ModelInit))?;
                let r = train(&m, &mut p, &clips, &tc, None)?;
                (name, m, p, r)
            }
        };
        let p = self.save_model(&name, "checkpoint", &model.config, &params)?;
        let stem = name.trim_end_matches(".afck");
        self.write_text(&format!("{stem}_loss.csv"), "loss-trace", &rep.to_csv())?;
        let n = rep.trace.len();
        let k = (n / 10).max(1);
        println!(
            "{stem}: {} steps, loss {:.6} -> {:.6}",
            n,
            rep.mean_loss(0, k),
            rep.mean_loss(n.saturating_sub(k), k)
        );
        let delta = sensitivity_probe(&model, &params, &clips[0], tc.window)?;
        println!("sensitivity probe: |output change| with user streams zeroed = {delta:.6e}");
        println!("wrote {}", p.display());
        Ok(0)
    }

    fn dpo(&self, base: Option<&Path>, talking: Option<&Path>) -> Result<i32> {
        let base_path = base.map(Path::to_path_buf).unwrap_or_else(|| self.path(DF_CKPT));
        let talking_path = talking.map(Path::to_path_buf).unwrap_or_else(|| self.path(TALKING_CKPT));
        let base = self.load_model(&base_path)?;
        let talk = self.load_model(&talking_path)?;
        if talk.model.config.cond_mode != CondMode::TalkingOnly {
            return Err(Error::Mismatch(format!("{} is not a talking-only checkpoint", talking_path.display())));
        }
        let data = self.dataset(&self.path(TRAIN_DATA))?;
        let world = self.world()?;
        let codec = self.codec()?;
        let clips = self.embedded(&data, &codec, &world)?;
        let sampler = self.cfg.sampler_resolved();
        let pairs = build_pairs(&data, &codec, &world, &talk.model, &talk.params, &sampler)?;
        let pp = self.path(PAIRS_FILE);
        self.write(&pp, &pairs_to_bytes(&data, &pairs)?, &self.meta("pairs"))?;
        println!("{} preference pairs ({} skipped)", pairs.pairs.len(), pairs.skipped);
        let dpo = self.cfg.dpo_resolved();
        let tc = TrainConfig {
            seed: dpo.seed,
            ..self.cfg.train_resolved()
        };
        let reference = base.params.clone();
        let mut params = base.params.clone();
        let rep = finetune(&base.model, &mut params, &reference, &pairs.pairs, &clips, &tc, &dpo)?;
        let p = self.path(DPO_CKPT);
        let mut meta = self.meta("checkpoint");
        meta.model = Some(base.model.config.clone());
        meta.ref_digest = Some(digest_hex(fnv1a(&params_to_bytes(&reference))));
        self.write(&p, &params_to_bytes(&params), &meta)?;
        self.write_text("dpo_loss.csv", "loss-trace", &rep.to_csv())?;
        if let (Some(a), Some(b)) = (rep.trace.first(), rep.trace.last()) {
            println!(
                "L_DF {:.6} -> {:.6}, L_DPO {:.6} -> {:.6}",
                a.df_loss, b.df_loss, a.dpo_loss, b.dpo_loss
            );
        }
        println!("reference {} digest {}", base_path.display(), meta.ref_digest.as_deref().unwrap_or(""));
        println!("wrote {}", p.display());
        Ok(0)
    }

    fn stream(&self, ckpt: Option<&Path>, clip: usize, frames: Option<usize>, dump: Option<&Path>) -> Result<i32> {
        let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| self.path(DF_CKPT));
        let l = self.load_model(&path)?;
        let data = self.dataset(&self.path(EVAL_DATA))?;
        let c = data
            .clips
            .get(clip)
            .ok_or_else(|| Error::Invalid(format!("clip {clip} out of range (dataset has {})", data.len())))?;
        let world = self.world()?;
        let codec = self.codec()?;
        let e = codec.embed_clip(&world, c, clip)?;
        let n = frames.unwrap_or(e.len()).min(e.len());
        if n == 0 {
            return Err(Error::Invalid("nothing to stream".into()));
        }
        let cond = e.condition().slice(0, n);
        let bs = l.model.config.block_size;
        let blocks = n.div_ceil(bs);
        let mut session = open_session(&l.model, &l.params, &e.avatar_identity, &e.reference, self.cfg.sampler_resolved())?;
        let mut motion = Vec::new();
        for k in 0..blocks {
            let take = bs.min(n - k * bs);
            let mut blk = cond.slice(k * bs, take);
            if take < bs {
                let last = blk.slice(take - 1, 1);
                let pad: Vec<ConditionTriplet> = (take..bs).map(|_| last.clone()).collect();
                let mut parts = vec![&blk];
                parts.extend(pad.iter());
                blk = ConditionTriplet::concat(&parts)?;
            }
            motion.extend(session.push_block(&blk)?);
        }
        motion.extend(session.flush()?);
        let ns = session.latency_ns().to_vec();
        let mut csv = String::from("block,ms\n");
        for (i, t) in ns.iter().enumerate() {
            csv.push_str(&format!("{i},{:.6}\n", *t as f64 / 1e6));
        }
        self.write_text("latency.csv", "latency", &csv)?;
        if let Some(d) = dump {
            let records: Vec<StreamRecord> = motion
                .iter()
                .zip(&ns)
                .enumerate()
                .map(|(i, (m, &w))| StreamRecord {
                    index: i as u32,
                    wall_ns: w,
                    motion: m.clone(),
                })
                .collect();
            self.write(d, &stream_dump_to_bytes(&records), &self.meta("stream-dump"))?;
            println!("wrote {}", d.display());
        }
        let ms: Vec<f64> = ns.iter().map(|&t| t as f64 / 1e6).collect();
        let mean = ms.iter().sum::<f64>() / ms.len() as f64;
        println!(
            "streamed {n} frames in {} blocks of {bs}; mean {mean:.3} ms/block, first {:.3} ms; cache {} blocks, {} bytes",
            motion.len(),
            ms[0],
            session.cached_blocks(),
            session.cache_bytes()
        );
        Ok(0)
    }

    fn evaluate(&self, ckpt: Option<&Path>, dataset: Option<&Path>) -> Result<i32> {
        let dpath = dataset.map(Path::to_path_buf).unwrap_or_else(|| self.path(EVAL_DATA));
        let data = self.dataset(&dpath)?;
        let mcfg = self.cfg.metrics_resolved();
        let (name, report) = match ckpt {
            None => {
                let gt: Vec<_> = data.clips.iter().map(|c| c.avatar_motion.clone()).collect();
                let user: Vec<_> = data.clips.iter().map(|c| c.user_motion.clone()).collect();
                ("ground-truth".to_string(), evaluate_sequences(&gt, &gt, &user, &mcfg)?)
            }
            Some(p) => {
                let l = self.load_model(p)?;
                let world = self.world()?;
                let codec = self.codec()?;
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let r = evaluate(&l.model, &l.params, &self.cfg.sampler_resolved(), &codec, &world, &data, &mcfg)?;
                (name, r)
            }
        };
        let csv = format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row(&name));
        self.write_text("report.csv", "report", &csv)?;
        let table = format_table(&[(name, Some(report))]);
        self.write_text("report.txt", "report", &table)?;
        print!("{table}");
        Ok(0)
    }

    fn ablate(&self) -> Result<i32> {
        let data = self.dataset(&self.path(EVAL_DATA))?;
        let world = self.world()?;
        let codec = self.codec()?;
        let sampler = self.cfg.sampler_resolved();
        let mcfg = self.cfg.metrics_resolved();
        let mut rows: Vec<(String, Option<PathBuf>)> = vec![
            ("✗✗ no user motion".into(), Some(self.path(NO_USER_CKPT))),
            ("✓✗ full".into(), Some(self.path(DF_CKPT))),
            ("✓✓ full + DPO".into(), Some(self.path(DPO_CKPT))),
        ];
        for m in [MaskArg::Framewise, MaskArg::Blockwise, MaskArg::Lookahead] {
            rows.push((format!("mask {}", m.name()), self.mask_checkpoint(m)));
        }
        let mut table = Vec::new();
        let mut csv = MetricReport::csv_header() + "\n";
        for (label, path) in rows {
            let report = match path.filter(|p| p.exists()) {
                None => None,
                Some(p) => {
                    let l = self.load_model(&p)?;
                    Some(evaluate(&l.model, &l.params, &sampler, &codec, &world, &data, &mcfg)?)
                }
            };
            match &report {
                Some(r) => csv.push_str(&(r.csv_row(&label) + "\n")),
                None => csv.push_str(&format!("{label},absent\n")),
            }
            table.push((label, report));
        }
        let text = format_table(&table);
        self.write_text("ablation.csv", "report", &csv)?;
        self.write_text("ablation.txt", "report", &text)?;
        print!("{text}");
        Ok(0)
    }

    /// `df-<mask>.afck`, or `df.afck` when it was trained with that mask.
    fn mask_checkpoint(&self, m: MaskArg) -> Option<PathBuf> {
        let own = self.path(&format!("df-{}.afck", m.name()));
        if own.exists() {
            return Some(own);
        }
        let df = self.path(DF_CKPT);
        let meta = ArtifactMeta::read(&df).ok()?;
        (meta.model?.mask == m.kind()).then_some(df)
    }

    fn grad_check(&self) -> Result<i32> {
        let checks = all_checks(self.cfg.seed)?;
        let mut csv = String::from("name,rel_err,passed\n");
        let mut failed = 0;
        for c in &checks {
            let ok = c.passed(GRAD_TOLERANCE);
            failed += usize::from(!ok);
            println!("{:<24} {:.3e} {}", c.name, c.rel_err, if ok { "pass" } else { "FAIL" });
            csv.push_str(&format!("{},{:e},{}\n", c.name, c.rel_err, ok));
        }
        self.write_text("gradcheck.csv", "report", &csv)?;
        println!("{} checks, {failed} failed (tolerance {GRAD_TOLERANCE:e})", checks.len());
        Ok(if failed == 0 { 0 } else { 1 })
    }
}

/// Mean absolute change of the field when the user streams are zeroed, on
/// the first `window` frames of `clip` at `t = 0.5`.
pub fn sensitivity_probe(model: &VectorField, params: &ParamStore, clip: &EmbeddedClip, window: usize) -> Result<f64> {
    let n = window.min(clip.len());
    let cond = clip.condition().slice(0, n);
    let zeroed = ConditionTriplet {
        user_audio: cond.user_audio.map(|_| 0.0),
        user_motion: cond.user_motion.map(|_| 0.0),
        avatar_audio: cond.avatar_audio.clone(),
    };
    let noisy = clip.avatar_latent.slice_rows(0, n);
    let frames: Vec<usize> = (0..n).collect();
    let times = vec![0.5; n];
    let rules = model.config.training_rules();
    let mut out = Vec::new();
    for c in [&cond, &zeroed] {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = g.constant(noisy.clone());
        let s = g.constant(clip.reference.clone());
        let v = model.forward_window(&mut g, &b, x, &times, Some(c), s, &frames, &rules)?;
        out.push(g.value(v).clone());
    }
    let d = out[0].zip_map(&out[1], |a, b| (a - b).abs())?;
    Ok(d.data().iter().map(|&x| x as f64).sum::<f64>() / d.data().len() as f64)
}
