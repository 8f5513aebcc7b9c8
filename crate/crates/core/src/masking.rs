//! Attention visibility: plain causal, full causal over `[X, M]`, and the
//! block-wise causal layout where memory slot `t` reads only chunk `t` plus
//! the memory slots before it.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// `N` equal, contiguous, half-open ranges covering `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPartition {
    pub len: usize,
    pub chunks: usize,
}

impl ChunkPartition {
    pub fn chunk_len(&self) -> usize {
        self.len / self.chunks
    }

    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        let c = self.chunk_len();
        (0..self.chunks).map(|t| (t * c, (t + 1) * c)).collect()
    }

    pub fn range(&self, chunk: usize) -> std::ops::Range<usize> {
        let c = self.chunk_len();
        chunk * c..(chunk + 1) * c
    }

    /// Chunk index (0-based) of context position `j`.
    pub fn chunk_of(&self, j: usize) -> usize {
        j / self.chunk_len()
    }

    /// Length of the combined sequence `[X, M]`.
    pub fn total(&self) -> usize {
        self.len + self.chunks
    }
}

pub fn partition_chunks(len: usize, chunks: usize) -> Result<ChunkPartition> {
    if chunks == 0 || len < chunks {
        return Err(Error::Contract(format!(
            "need 1 <= N <= L, got L={len} N={chunks}"
        )));
    }
    if len % chunks != 0 {
        return Err(Error::Divisibility { len, chunks });
    }
    Ok(ChunkPartition { len, chunks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Context,
    Memory,
}

/// Visibility rules over `Z = [x_1..x_L, m_1..m_N]`, evaluated per pair.
///
/// - context → context: causal, `i ≥ j`
/// - memory → memory: causal, `i ≥ j`
/// - memory `t` → context `j`: iff `j` lies in chunk `t`
/// - context → memory: never
pub fn visible(i: usize, j: usize, partition: &ChunkPartition) -> Result<bool> {
    let total = partition.total();
    for idx in [i, j] {
        if idx >= total {
            return Err(Error::Index {
                what: "mask position",
                index: idx,
                size: total,
            });
        }
    }
    let l = partition.len;
    Ok(match (i < l, j < l) {
        (true, true) => i >= j,
        (false, false) => i >= j,
        (false, true) => partition.chunk_of(j) == i - l,
        (true, false) => false,
    })
}

/// Dense `rows × cols` visibility matrix; additive form is `0` / `−∞`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
    roles: Vec<Role>,
}

impl AttentionMask {
    /// Builds a mask by evaluating `f(i, j)` for every cell.
    pub fn from_fn(rows: usize, cols: usize, roles: Vec<Role>, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                visible.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            visible,
            roles,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Side length of a square mask.
    pub fn size(&self) -> usize {
        self.rows
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.visible[i * self.cols..(i + 1) * self.cols]
    }

    pub fn visible_in_row(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&v| v).count()
    }

    /// Additive entries: `0` where visible, the dtype's most negative finite
    /// value elsewhere.
    pub fn additive<T: Scalar>(&self) -> Arc<[T]> {
        self.visible
            .iter()
            .map(|&v| if v { T::zero() } else { T::mask_neg() })
            .collect()
    }

    /// Clears visibility where `block(i, j)` holds. The diagonal is kept.
    pub fn without(&self, block: impl Fn(usize, usize) -> bool) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                if i != j && block(i, j) {
                    out.visible[i * self.cols + j] = false;
                }
            }
        }
        out
    }

    /// Errors when some row has no visible key.
    pub fn check_rows(&self) -> Result<()> {
        match (0..self.rows).find(|&i| self.visible_in_row(i) == 0) {
            Some(i) => Err(Error::Invariant(format!("mask row {i} is fully blocked"))),
            None => Ok(()),
        }
    }

    /// 0/1 visibility, one row per line, comma separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows * self.cols * 2);
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|&v| if v { "1" } else { "0" }).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain PGM (P2); visible cells white.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for i in 0..self.rows {
            let line: Vec<&str> = self.row(i).iter().map(|&v| if v { "255" } else { "0" }).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

/// Lower-triangular visibility over `len` positions, all roles context.
pub fn build_causal_mask(len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(Error::Contract("causal mask needs at least one position".into()));
    }
    Ok(AttentionMask::from_fn(len, len, vec![Role::Context; len], |i, j| i >= j))
}

fn z_roles(partition: &ChunkPartition) -> Vec<Role> {
    let mut roles = vec![Role::Context; partition.len];
    roles.extend(std::iter::repeat(Role::Memory).take(partition.chunks));
    roles
}

/// Full causal mask over `[X, M]`: every memory slot sees the whole context.
pub fn build_full_causal_mask(len: usize, chunks: usize) -> Result<AttentionMask> {
    let p = partition_chunks(len, chunks)?;
    let n = p.total();
    Ok(AttentionMask::from_fn(n, n, z_roles(&p), |i, j| i >= j))
}

/// Block-wise causal mask over `[X, M]`, filled block by block.
pub fn build_block_causal_mask(len: usize, chunks: usize) -> Result<AttentionMask> {
    let p = partition_chunks(len, chunks)?;
    let n = p.total();
    let mut visible = vec![false; n * n];
    for i in 0..len {
        visible[i * n..i * n + i + 1].fill(true);
    }
    for (t, (start, end)) in p.boundaries().into_iter().enumerate() {
        let row = (len + t) * n;
        visible[row + start..row + end].fill(true);
        visible[row + len..row + len + t + 1].fill(true);
    }
    Ok(AttentionMask {
        rows: n,
        cols: n,
        visible,
        roles: z_roles(&p),
    })
}
