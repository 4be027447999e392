//! Runs every command-line stage in-process on a tiny configuration:
//! data, codec, the model variants, DPO, streaming, evaluation, ablation.

use dyadic_motion::cli::main_with_args;

const CONFIG: &str = "\
data.clips = 6
data.frames = 150
data.eval_clips = 4
model.width = 16
model.heads = 2
model.depth = 1
train.steps = 60
train.lr = 1e-3
dpo.steps = 10
";

fn main() {
    let dir = std::env::temp_dir().join("dyadic-motion-pipeline");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, CONFIG).expect("write config");
    let out = dir.join("out");
    let dump = out.join("stream.bin");
    let stages: Vec<Vec<&str>> = vec![
        vec!["gen-data"],
        vec!["train", "--variant", "codec"],
        vec!["train", "--variant", "df"],
        vec!["train", "--variant", "talking-only"],
        vec!["train", "--variant", "no-user-motion"],
        vec!["train", "--variant", "df", "--mask", "blockwise"],
        vec!["dpo"],
        vec!["stream", "--frames", "50", "--dump-stream", dump.to_str().unwrap()],
        vec!["evaluate"],
        vec!["ablate"],
    ];
    for s in stages {
        println!("$ dyadic-motion {}", s.join(" "));
        let mut args = vec!["dyadic-motion", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend(s);
        let code = main_with_args(args);
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("artifacts in {}", out.display());
}
