//! Builds the causal attention masks and prints them as ASCII grids.
//!
//! cargo run --example attention_masks -- 12 4 1

use dyadic_motion::masking::{
    build_blockwise_causal_mask, build_framewise_causal_mask, build_lookahead_mask, AttentionMask,
};

fn show(name: &str, m: &AttentionMask) {
    println!("{name} ({}x{})", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: String = m.row(i).iter().map(|&a| if a { '#' } else { '.' }).collect();
        println!("  {row}  {}", m.row_count(i));
    }
}

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(12);
    let b = args.get(1).copied().unwrap_or(4);
    let l = args.get(2).copied().unwrap_or(1);
    show("framewise causal", &build_framewise_causal_mask(n));
    show("blockwise causal", &build_blockwise_causal_mask(n, b));
    let la = build_lookahead_mask(n, b, l);
    show(&format!("blockwise causal, look-ahead {l}"), &la);
    std::fs::write("lookahead_mask.pgm", la.to_pgm()).expect("write pgm");
    println!("wrote lookahead_mask.pgm");
}
