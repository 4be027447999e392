//! Attention masks over frame sequences.
//!
//! All masks are boolean `rows x cols` matrices where `true` means the query
//! frame of that row may attend the key frame of that column. Frames are
//! grouped into blocks of `block_size` consecutive frames.
//!
//! | kind                  | admits `(i, j)` when                    |
//! |-----------------------|-----------------------------------------|
//! | blockwise look-ahead  | `j / B <= i / B + l`                    |
//! | blockwise causal      | `j / B <= i / B`                        |
//! | framewise causal      | `j <= i`                                |
//! | sliding window        | `i - l <= j < i + l`                    |
//!
//! Rectangular masks for cached inference are built from a [`TemporalRule`]
//! evaluated on absolute frame indices of queries and keys.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskKind {
    BlockwiseLookahead,
    BlockwiseCausal,
    FramewiseCausal,
    SlidingWindow,
    Custom,
}

/// Unit of the look-ahead distance `l`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LookaheadUnit {
    /// `l` counts whole blocks: `j / B <= i / B + l`.
    #[default]
    Blocks,
    /// `l` counts frames past the end of the query's block.
    Frames,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
    kind: MaskKind,
    block_size: usize,
    look_ahead: usize,
}

impl AttentionMask {
    pub fn from_fn(
        rows: usize,
        cols: usize,
        kind: MaskKind,
        block_size: usize,
        look_ahead: usize,
        admits: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(admits(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
            kind,
            block_size,
            look_ahead,
        }
    }

    /// Mask between explicit query and key frame indices under `rule`.
    pub fn from_rule(query_frames: &[usize], key_frames: &[usize], rule: &TemporalRule) -> Self {
        Self::from_fn(
            query_frames.len(),
            key_frames.len(),
            MaskKind::Custom,
            rule.block_size,
            rule.look_ahead,
            |i, j| rule.admits(query_frames[i], key_frames[j]),
        )
    }

    /// Every key admitted (a dense mask).
    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, MaskKind::Custom, 1, 0, |_, _| true)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn look_ahead(&self) -> usize {
        self.look_ahead
    }

    #[inline]
    pub fn admits(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    /// Admitted column indices of row `i`.
    pub fn admitted(&self, i: usize) -> Vec<usize> {
        (0..self.cols).filter(|&j| self.admits(i, j)).collect()
    }

    /// First row without any admitted key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| self.row_count(i) == 0)
    }

    /// Elementwise conjunction of two masks of equal size.
    pub fn intersect(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "mask intersect {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(AttentionMask {
            rows: self.rows,
            cols: self.cols,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(a, b)| *a && *b)
                .collect(),
            kind: MaskKind::Custom,
            block_size: self.block_size,
            look_ahead: self.look_ahead,
        })
    }

    /// Plain-text PGM (`P2`) image: admitted entries white, masked black.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n1\n", self.cols, self.rows);
        for i in 0..self.rows {
            let line: Vec<&str> = self
                .row(i)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Blockwise look-ahead causal mask: `M[i][j] = floor(j/B) <= floor(i/B) + l`.
pub fn build_lookahead_mask(n: usize, block_size: usize, look_ahead: usize) -> AttentionMask {
    assert!(n >= 1 && block_size >= 1, "mask needs n >= 1 and B >= 1");
    AttentionMask::from_fn(
        n,
        n,
        MaskKind::BlockwiseLookahead,
        block_size,
        look_ahead,
        |i, j| j / block_size <= i / block_size + look_ahead,
    )
}

/// Look-ahead counted in frames: a frame sees its own block plus the first
/// `look_ahead` frames after it.
pub fn build_lookahead_mask_frames(n: usize, block_size: usize, look_ahead: usize) -> AttentionMask {
    assert!(n >= 1 && block_size >= 1, "mask needs n >= 1 and B >= 1");
    AttentionMask::from_fn(
        n,
        n,
        MaskKind::BlockwiseLookahead,
        block_size,
        look_ahead,
        |i, j| j < (i / block_size + 1) * block_size + look_ahead,
    )
}

pub fn build_blockwise_causal_mask(n: usize, block_size: usize) -> AttentionMask {
    let mut m = build_lookahead_mask(n, block_size, 0);
    m.kind = MaskKind::BlockwiseCausal;
    m
}

pub fn build_framewise_causal_mask(n: usize) -> AttentionMask {
    assert!(n >= 1);
    AttentionMask::from_fn(n, n, MaskKind::FramewiseCausal, 1, 0, |i, j| j <= i)
}

/// Window `[i - l, i + l)` clipped to the sequence.
pub fn build_sliding_window_mask(n: usize, half_width: usize) -> AttentionMask {
    assert!(n >= 1 && half_width >= 1, "sliding window needs n >= 1 and l >= 1");
    AttentionMask::from_fn(n, n, MaskKind::SlidingWindow, 1, half_width, |i, j| {
        in_window(i, j, half_width)
    })
}

#[inline]
fn in_window(i: usize, j: usize, half_width: usize) -> bool {
    j + half_width >= i && j < i + half_width
}

/// Temporal structure of the self-attention masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CausalKind {
    Framewise,
    Blockwise,
    BlockwiseLookahead,
}

/// Admission rule on absolute frame indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalRule {
    pub kind: CausalKind,
    pub block_size: usize,
    pub look_ahead: usize,
    pub unit: LookaheadUnit,
    /// Keys more than this many blocks older than the query block are
    /// dropped. This is the rolling-cache capacity.
    pub history_blocks: Option<usize>,
    /// Additional `[i - w, i + w)` window, used for condition tokens.
    pub window: Option<usize>,
}

impl TemporalRule {
    pub fn new(kind: CausalKind, block_size: usize, look_ahead: usize, unit: LookaheadUnit) -> Self {
        Self {
            kind,
            block_size,
            look_ahead,
            unit,
            history_blocks: None,
            window: None,
        }
    }

    pub fn blockwise(block_size: usize) -> Self {
        Self::new(CausalKind::Blockwise, block_size, 0, LookaheadUnit::Blocks)
    }

    pub fn with_history(mut self, blocks: Option<usize>) -> Self {
        self.history_blocks = blocks;
        self
    }

    pub fn with_window(mut self, half_width: Option<usize>) -> Self {
        self.window = half_width;
        self
    }

    /// Same rule with the look-ahead removed.
    pub fn strict(mut self) -> Self {
        if self.kind == CausalKind::BlockwiseLookahead {
            self.kind = CausalKind::Blockwise;
        }
        self.look_ahead = 0;
        self
    }

    /// How many blocks past its own a query block may see.
    pub fn lookahead_blocks(&self) -> usize {
        match (self.kind, self.unit) {
            (CausalKind::BlockwiseLookahead, LookaheadUnit::Blocks) => self.look_ahead,
            (CausalKind::BlockwiseLookahead, LookaheadUnit::Frames) => {
                self.look_ahead.div_ceil(self.block_size)
            }
            _ => 0,
        }
    }

    pub fn admits(&self, q: usize, k: usize) -> bool {
        let b = self.block_size;
        let (qb, kb) = (q / b, k / b);
        let temporal = match self.kind {
            CausalKind::Framewise => k <= q,
            CausalKind::Blockwise => kb <= qb,
            CausalKind::BlockwiseLookahead => match self.unit {
                LookaheadUnit::Blocks => kb <= qb + self.look_ahead,
                LookaheadUnit::Frames => k < (qb + 1) * b + self.look_ahead,
            },
        };
        if !temporal {
            return false;
        }
        if let Some(m) = self.history_blocks {
            if kb + m < qb {
                return false;
            }
        }
        match self.window {
            Some(w) => in_window(q, k, w),
            None => true,
        }
    }
}

/// Outcome of a [`causality_probe`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CausalityReport {
    /// Per output row: `true` when no masked perturbation changed it.
    pub row_ok: Vec<bool>,
    /// `(row, perturbed column)` pairs whose output changed.
    pub violations: Vec<(usize, usize)>,
    pub forwards: usize,
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Perturbs input columns that `mask` hides from some output rows and checks
/// those rows stay bit-identical.
///
/// Columns are perturbed in groups of `group` consecutive positions (use the
/// block size for block-level probing, 1 for single frames). `forward(None)`
/// must return the unperturbed output; `forward(Some(cols))` the output with
/// the inputs at `cols` perturbed. A row is checked against a group only when
/// every column of the group is masked for it.
pub fn causality_probe<F>(mask: &AttentionMask, group: usize, mut forward: F) -> Result<CausalityReport>
where
    F: FnMut(Option<&[usize]>) -> Result<Tensor<f32>>,
{
    let group = group.max(1);
    let base = forward(None)?;
    if base.rows() != mask.rows() {
        return Err(Error::Shape(format!(
            "probe output has {} rows, mask {}",
            base.rows(),
            mask.rows()
        )));
    }
    let mut report = CausalityReport {
        row_ok: vec![true; mask.rows()],
        violations: Vec::new(),
        forwards: 1,
    };
    let mut start = 0;
    while start < mask.cols() {
        let cols: Vec<usize> = (start..(start + group).min(mask.cols())).collect();
        start += group;
        let rows: Vec<usize> = (0..mask.rows())
            .filter(|&i| cols.iter().all(|&j| !mask.admits(i, j)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let out = forward(Some(&cols))?;
        report.forwards += 1;
        for i in rows {
            let same = base
                .row(i)
                .iter()
                .zip(out.row(i))
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                report.row_ok[i] = false;
                report.violations.push((i, cols[0]));
            }
        }
    }
    Ok(report)
}
