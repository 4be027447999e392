use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use dyadic_motion::cli::main_with_args;
use dyadic_motion::config::ArtifactMeta;
use dyadic_motion::sampler::stream_dump_from_bytes;
use dyadic_motion::world::Dataset;

const CONFIG: &str = "\
# tiny run for command tests
data.clips = 4
data.frames = 120
data.eval_clips = 3
model.width = 16
model.heads = 2
model.depth = 1
train.steps = 12
train.lr = 1e-3
codec.steps = 300
dpo.steps = 4
";

const STAGES: &[&[&str]] = &[
    &["gen-data"],
    &["train", "--variant", "codec"],
    &["train", "--variant", "df"],
    &["train", "--variant", "talking-only"],
    &["train", "--variant", "no-user-motion"],
    &["train", "--variant", "df", "--mask", "blockwise"],
    &["dpo"],
    &["stream", "--frames", "50", "--dump-stream", "{out}/stream.bin"],
    &["evaluate"],
    &["ablate"],
];

fn run_in(dir: &Path, args: &[&str]) -> i32 {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = dir.join("out");
    let out_s = out.to_str().unwrap().to_string();
    let mut full: Vec<String> = vec!["dyadic-motion".into(), "--config".into(), cfg.to_str().unwrap().into()];
    full.push("--out".into());
    full.push(out_s.clone());
    full.extend(args.iter().map(|a| a.replace("{out}", &out_s)));
    main_with_args(full)
}

fn pipeline(dir: &Path) {
    for s in STAGES {
        assert_eq!(run_in(dir, s), 0, "stage {s:?}");
    }
}

/// One full pipeline shared by the read-only tests.
fn shared() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap().keep();
        pipeline(&d);
        d
    })
}

fn out(name: &str) -> PathBuf {
    shared().join("out").join(name)
}

fn read(name: &str) -> String {
    std::fs::read_to_string(out(name)).unwrap()
}

#[test]
fn gen_data_writes_configured_clip_counts_and_round_trips() {
    let train = Dataset::load(out("train.afds")).unwrap();
    let eval = Dataset::load(out("eval.afds")).unwrap();
    assert_eq!(train.len(), 4);
    assert_eq!(eval.len(), 3);
    assert_eq!(train.clips[0].len(), 120);
    let meta = ArtifactMeta::read(&out("train.afds")).unwrap();
    assert!(meta.tool.starts_with("dyadic-motion "));
    assert_eq!(meta.digest.len(), 16);
}

#[test]
fn loss_traces_have_one_row_per_step() {
    for (f, header, rows) in [
        ("df_loss.csv", "step,loss,lr", 12),
        ("talking-only_loss.csv", "step,loss,lr", 12),
        ("dpo_loss.csv", "step,l_df,l_dpo", 4),
    ] {
        let t = read(f);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], header, "{f}");
        assert_eq!(lines.len() - 1, rows, "{f}");
    }
}

#[test]
fn dpo_checkpoint_records_reference_digest() {
    let meta = ArtifactMeta::read(&out("dpo.afck")).unwrap();
    let r = meta.ref_digest.expect("reference digest");
    let base = std::fs::read(out("df.afck")).unwrap();
    assert_eq!(r, dyadic_motion::config::digest_hex(dyadic_motion::config::fnv1a(&base)));
    assert!(meta.model.is_some());
}

#[test]
fn stream_emits_one_block_per_ten_frames() {
    let recs = stream_dump_from_bytes(&std::fs::read(out("stream.bin")).unwrap()).unwrap();
    assert_eq!(recs.len(), 5);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.index as usize, i);
        assert_eq!(r.motion.shape(), &[10, 16]);
        assert!(r.wall_ns > 0);
    }
    assert_eq!(read("latency.csv").lines().count() - 1, 5);
}

#[test]
fn ground_truth_report_has_zero_rpcc() {
    let csv = read("report.csv");
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "ground-truth");
    assert_eq!(row[1], "0.000000");
    assert_eq!(row[2], "0.000000");
    assert!(read("report.txt").contains("0.0000"));
}

#[test]
fn ablation_table_has_the_variant_rows_in_order_and_marks_missing_ones() {
    let t = read("ablation.txt");
    let labels: Vec<&str> = t.lines().skip(1).map(|l| l.split("  ").next().unwrap().trim()).collect();
    assert_eq!(labels[0], "✗✗ no user motion");
    assert_eq!(labels[1], "✓✗ full");
    assert_eq!(labels[2], "✓✓ full + DPO");
    let framewise = t.lines().find(|l| l.starts_with("mask framewise")).unwrap();
    assert!(framewise.contains("absent"));
    let blockwise = t.lines().find(|l| l.starts_with("mask blockwise")).unwrap();
    assert!(!blockwise.contains("absent"));
}

#[test]
fn talking_only_checkpoint_ignores_user_streams() {
    use dyadic_motion::cli::sensitivity_probe;
    use dyadic_motion::model::VectorField;
    use dyadic_motion::numeric::load_params;
    let load = |name: &str| {
        let meta = ArtifactMeta::read(&out(name)).unwrap();
        let p = load_params(out(name)).unwrap();
        (VectorField::from_params(meta.model.unwrap(), &p).unwrap(), p)
    };
    let clip = dyadic_motion::codec::EmbeddedClip {
        user_latent: dyadic_motion::numeric::SeededRng::new(1).gaussian(&[20, 16]),
        avatar_latent: dyadic_motion::numeric::SeededRng::new(2).gaussian(&[20, 16]),
        avatar_identity: dyadic_motion::numeric::Tensor::zeros(&[1, 16]),
        reference: dyadic_motion::numeric::Tensor::zeros(&[1, 16]),
        user_audio: dyadic_motion::numeric::SeededRng::new(3).gaussian(&[20, 4]),
        avatar_audio: dyadic_motion::numeric::SeededRng::new(4).gaussian(&[20, 4]),
    };
    let (m, p) = load("talking-only.afck");
    assert_eq!(sensitivity_probe(&m, &p, &clip, 20).unwrap(), 0.0);
    let (m, p) = load("df.afck");
    assert!(sensitivity_probe(&m, &p, &clip, 20).unwrap() > 0.0);
}

#[test]
fn mismatched_digest_is_refused_unless_forced() {
    let d = shared();
    assert_eq!(run_in(d, &["--seed", "9", "evaluate"]), 4);
    let forced = tempfile::tempdir().unwrap();
    // forced runs write elsewhere so the shared artifacts stay untouched
    let cfg = d.join("run.toml");
    let code = main_with_args([
        "dyadic-motion",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "9",
        "--force",
        "--out",
        forced.path().to_str().unwrap(),
        "evaluate",
        "--dataset",
        out("eval.afds").to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn exit_codes_for_config_numeric_and_io_failures() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "model.widht = 3\n").unwrap();
    let o = d.path().join("o");
    let o = o.to_str().unwrap();
    assert_eq!(main_with_args(["dyadic-motion", "--config", bad.to_str().unwrap(), "--out", o, "gen-data"]), 2);
    assert_eq!(main_with_args(["dyadic-motion", "--out", o, "train", "--variant", "df"]), 5);
    assert_eq!(main_with_args(["dyadic-motion", "--out", o, "no-such-command"]), 2);

    let nan = d.path().join("nan.toml");
    std::fs::write(&nan, format!("{CONFIG}train.lr = 1e30\n").replace("train.lr = 1e-3\n", "")).unwrap();
    let args = |cmd: &[&str]| {
        let mut v = vec!["dyadic-motion", "--config", nan.to_str().unwrap(), "--out", o];
        v.extend_from_slice(cmd);
        main_with_args(v)
    };
    assert_eq!(args(&["gen-data"]), 0);
    assert_eq!(args(&["train", "--variant", "codec"]), 0);
    assert_eq!(args(&["train", "--variant", "df"]), 3);
}

#[test]
fn grad_check_passes_and_lists_every_check() {
    let d = tempfile::tempdir().unwrap();
    let o = d.path().to_str().unwrap();
    assert_eq!(main_with_args(["dyadic-motion", "--out", o, "grad-check"]), 0);
    let csv = std::fs::read_to_string(d.path().join("gradcheck.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    for want in ["matmul", "masked_attention", "layer_norm", "vector_field", "df_loss", "dpo_loss"] {
        assert!(names.contains(&want), "{want} missing");
    }
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

/// Wall-clock fields are the only bytes allowed to differ between runs.
fn comparable(name: &str, bytes: Vec<u8>) -> Option<Vec<u8>> {
    match name {
        "latency.csv" | "latency.csv.meta" => None,
        "stream.bin" => {
            let mut recs = stream_dump_from_bytes(&bytes).unwrap();
            for r in &mut recs {
                r.wall_ns = 0;
            }
            Some(dyadic_motion::sampler::stream_dump_to_bytes(&recs))
        }
        _ => Some(bytes),
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = shared().join("out");
    let other = tempfile::tempdir().unwrap();
    pipeline(other.path());
    let b = other.path().join("out");
    let mut names: Vec<String> = std::fs::read_dir(&b)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(names.len() > 20);
    for n in names {
        let x = comparable(&n, std::fs::read(a.join(&n)).unwrap());
        let y = comparable(&n, std::fs::read(b.join(&n)).unwrap());
        assert!(x == y, "{n} differs between runs");
    }
}
