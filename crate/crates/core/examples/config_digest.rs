//! Parses a run configuration and prints its resolved keys and digest.
//!
//! cargo run --example config_digest -- configs/toy.toml

use dyadic_motion::config::{digest_hex, RunConfig};

fn main() -> dyadic_motion::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("seed = 7\nmodel.width = 32\n")?,
    };
    print!("{}", cfg.to_text());
    println!("digest {}", digest_hex(cfg.digest()));
    match RunConfig::parse("model.widht = 32") {
        Err(e) => println!("typo rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
