//! The three ways of turning `X = x_1..x_L` into `N` memory embeddings.
//!
//! * direct: one pass over `[X, M]` with a full causal mask; every slot may
//!   read the whole context.
//! * iterative: `N` passes; pass `t` reads chunk `c_t` and the history of
//!   earlier slots.
//! * pic: one pass over `[X, M]` with the block-wise causal mask, which gives
//!   every slot the receptive field it would have had in the iterative loop.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{
    build_block_causal_mask, build_causal_mask, build_full_causal_mask, partition_chunks,
    AttentionMask, ChunkPartition, Role,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, TokenSequence, Vocabulary};
use crate::transformer::{
    embed, forward, forward_ext, KvPrefix, MaskSchedule, ModelParams, ParamVars, Segment,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Direct,
    Iterative,
    Pic,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::Direct => "direct",
            Paradigm::Iterative => "iterative",
            Paradigm::Pic => "pic",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Paradigm::Direct),
            "iterative" => Ok(Paradigm::Iterative),
            "pic" => Ok(Paradigm::Pic),
            other => Err(Error::config("paradigm", format!("unknown paradigm `{other}`"))),
        }
    }
}

/// What pass `t` of the iterative loop sees of earlier slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IterativeHistory {
    /// Per-layer residual states of `m_{<t}` are carried forward as a
    /// key/value prefix. Positions follow `Z`, so this reproduces the
    /// block-mask computation pass by pass.
    #[default]
    MemoryStates,
    /// Final embeddings `h_{<t}` are prepended as input rows; positions
    /// restart at 0 every pass.
    FinalStates,
}

/// One element of `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZItem {
    Token(TokenId),
    /// Memory placeholder for this 0-based slot.
    Marker(usize),
}

/// `Z = [c_1..c_N, m_1..m_N]` together with its partition and mask.
#[derive(Debug, Clone)]
pub struct CompressionInput {
    pub z: Vec<ZItem>,
    pub partition: ChunkPartition,
    pub mask: AttentionMask,
}

impl CompressionInput {
    /// Indices of the markers inside `Z`.
    pub fn marker_positions(&self) -> Vec<usize> {
        self.z
            .iter()
            .enumerate()
            .filter_map(|(i, item)| matches!(item, ZItem::Marker(_)).then_some(i))
            .collect()
    }

    /// `Z` as vocabulary ids; markers map to `MEM_t`.
    pub fn ids(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        self.z
            .iter()
            .map(|item| match *item {
                ZItem::Token(id) => Ok(id),
                ZItem::Marker(slot) => vocab.memory_id(slot),
            })
            .collect()
    }
}

fn check_context(x: &TokenSequence, chunks: usize) -> Result<ChunkPartition> {
    if x.is_empty() {
        return Err(Error::Contract("cannot compress an empty sequence".into()));
    }
    if x.has_specials() {
        return Err(Error::Contract("context contains special tokens".into()));
    }
    partition_chunks(x.len(), chunks)
}

/// Builds `Z` with the block-wise mask for [`Paradigm::Pic`] and the full
/// causal mask otherwise.
pub fn build_compression_input(
    x: &TokenSequence,
    chunks: usize,
    paradigm: Paradigm,
) -> Result<CompressionInput> {
    let partition = check_context(x, chunks)?;
    let mask = match paradigm {
        Paradigm::Pic => build_block_causal_mask(x.len(), chunks)?,
        Paradigm::Direct | Paradigm::Iterative => build_full_causal_mask(x.len(), chunks)?,
    };
    let mut z: Vec<ZItem> = x.ids.iter().map(|&id| ZItem::Token(id)).collect();
    z.extend((0..chunks).map(ZItem::Marker));
    Ok(CompressionInput { z, partition, mask })
}

/// Compressed representation `H̃`, `[N × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEmbeddings<T> {
    pub h: Tensor<T>,
    pub paradigm: Paradigm,
    pub source_len: usize,
}

impl<T: Scalar> MemoryEmbeddings<T> {
    pub fn slots(&self) -> usize {
        self.h.rows()
    }

    pub fn ratio(&self) -> usize {
        self.source_len / self.slots()
    }
}

/// Compresses already-embedded context rows `ctx: [L × d]` on the tape.
/// Returns `[N × d]`. Exposed so tests can differentiate with respect to
/// individual context rows.
pub fn compress_embedded<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    ctx: Var,
    chunks: usize,
    paradigm: Paradigm,
    history: IterativeHistory,
) -> Result<Var> {
    let len = tape.value(ctx).rows();
    let partition = partition_chunks(len, chunks)?;
    if chunks > pv.config.max_memory {
        return Err(Error::Index {
            what: "memory slots",
            index: chunks,
            size: pv.config.max_memory,
        });
    }
    match paradigm {
        Paradigm::Direct | Paradigm::Pic => {
            let mask = if paradigm == Paradigm::Pic {
                build_block_causal_mask(len, chunks)?
            } else {
                build_full_causal_mask(len, chunks)?
            };
            let input = embed(tape, pv, &[Segment::Rows(ctx), Segment::Memory(0..chunks)])?;
            let positions: Vec<usize> = (0..partition.total()).collect();
            let out = forward(tape, pv, input, &positions, &mask)?;
            tape.slice_rows(out.hidden, len, chunks)
        }
        Paradigm::Iterative => match history {
            IterativeHistory::MemoryStates => iterative_memory_states(tape, pv, ctx, &partition),
            IterativeHistory::FinalStates => iterative_final_states(tape, pv, ctx, &partition),
        },
    }
}

fn iterative_memory_states<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    ctx: Var,
    partition: &ChunkPartition,
) -> Result<Var> {
    let len = partition.len;
    let c = partition.chunk_len();
    let n_layers = pv.config.n_layers;
    // cached[ℓ] = layer-ℓ inputs of m_1..m_{t-1}
    let mut cached: Vec<Vec<Var>> = vec![Vec::new(); n_layers];
    let mut outputs = Vec::with_capacity(partition.chunks);

    for t in 0..partition.chunks {
        let chunk = tape.slice_rows(ctx, t * c, c)?;
        let input = embed(tape, pv, &[Segment::Rows(chunk), Segment::Memory(t..t + 1)])?;
        let mut positions: Vec<usize> = partition.range(t).collect();
        positions.push(len + t);

        let mask = AttentionMask::from_fn(c + 1, t + c + 1, vec![Role::Context; t + c + 1], |i, j| {
            if i < c {
                // chunk token: causal within the chunk, never memory
                j >= t && j - t <= i
            } else {
                // memory slot: all earlier slots, its chunk, itself
                true
            }
        });
        let prefix = if t == 0 {
            None
        } else {
            let layers = cached
                .iter()
                .map(|rows| tape.concat_rows(rows))
                .collect::<Result<Vec<_>>>()?;
            Some(KvPrefix {
                layers,
                positions: (len..len + t).collect(),
            })
        };
        let out = forward_ext(
            tape,
            pv,
            input,
            &positions,
            MaskSchedule::Shared(&mask),
            prefix.as_ref(),
        )?;
        for (layer, &li) in out.layer_inputs.iter().enumerate() {
            cached[layer].push(tape.slice_rows(li, c, 1)?);
        }
        outputs.push(tape.slice_rows(out.hidden, c, 1)?);
    }
    tape.concat_rows(&outputs)
}

fn iterative_final_states<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    ctx: Var,
    partition: &ChunkPartition,
) -> Result<Var> {
    let c = partition.chunk_len();
    let mut outputs: Vec<Var> = Vec::with_capacity(partition.chunks);
    for t in 0..partition.chunks {
        let chunk = tape.slice_rows(ctx, t * c, c)?;
        let mut segments = Vec::with_capacity(3);
        let history;
        if t > 0 {
            history = tape.concat_rows(&outputs)?;
            segments.push(Segment::Rows(history));
        }
        segments.push(Segment::Rows(chunk));
        segments.push(Segment::Memory(t..t + 1));
        let input = embed(tape, pv, &segments)?;
        let rows = t + c + 1;
        let positions: Vec<usize> = (0..rows).collect();
        let out = forward(tape, pv, input, &positions, &build_causal_mask(rows)?)?;
        outputs.push(tape.slice_rows(out.hidden, rows - 1, 1)?);
    }
    tape.concat_rows(&outputs)
}

/// Embeds `x` and compresses it on the tape; `[N × d]`.
pub fn compress_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    x: &TokenSequence,
    chunks: usize,
    paradigm: Paradigm,
) -> Result<Var> {
    check_context(x, chunks)?;
    let ctx = embed(tape, pv, &[Segment::Tokens(&x.ids)])?;
    compress_embedded(tape, pv, ctx, chunks, paradigm, IterativeHistory::default())
}

/// Result of an untaped compression together with the number of
/// transformer passes it took.
#[derive(Debug, Clone)]
pub struct Compressed<T> {
    pub memory: MemoryEmbeddings<T>,
    pub forward_passes: usize,
}

pub fn compress<T: Scalar>(
    params: &ModelParams<T>,
    x: &TokenSequence,
    chunks: usize,
    paradigm: Paradigm,
    history: IterativeHistory,
) -> Result<Compressed<T>> {
    check_context(x, chunks)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let ctx = embed(&mut tape, &pv, &[Segment::Tokens(&x.ids)])?;
    let h = compress_embedded(&mut tape, &pv, ctx, chunks, paradigm, history)?;
    Ok(Compressed {
        memory: MemoryEmbeddings {
            h: tape.value(h).clone(),
            paradigm,
            source_len: x.len(),
        },
        forward_passes: tape.forward_passes(),
    })
}

pub fn compress_pic<T: Scalar>(
    params: &ModelParams<T>,
    x: &TokenSequence,
    chunks: usize,
) -> Result<MemoryEmbeddings<T>> {
    Ok(compress(params, x, chunks, Paradigm::Pic, IterativeHistory::default())?.memory)
}

pub fn compress_iterative<T: Scalar>(
    params: &ModelParams<T>,
    x: &TokenSequence,
    chunks: usize,
) -> Result<MemoryEmbeddings<T>> {
    Ok(compress(params, x, chunks, Paradigm::Iterative, IterativeHistory::default())?.memory)
}

pub fn compress_direct<T: Scalar>(
    params: &ModelParams<T>,
    x: &TokenSequence,
    chunks: usize,
) -> Result<MemoryEmbeddings<T>> {
    Ok(compress(params, x, chunks, Paradigm::Direct, IterativeHistory::default())?.memory)
}

pub const MEMORY_MAGIC: &[u8; 4] = b"PICM";
pub const MEMORY_VERSION: u32 = 1;

/// `PICM`, u32 version, u32 N, u32 d_model, then `N·d` little-endian f32.
pub fn write_memory<T: Scalar>(w: &mut impl Write, memory: &MemoryEmbeddings<T>) -> std::io::Result<()> {
    let (n, d) = (memory.h.rows(), memory.h.cols());
    let mut buf = Vec::with_capacity(16 + n * d * 4);
    buf.extend_from_slice(MEMORY_MAGIC);
    buf.extend_from_slice(&MEMORY_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in memory.h.data() {
        buf.extend_from_slice(&(v.to_f64().unwrap_or(f64::NAN) as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a `PICM` record back as an `[N × d]` f32 tensor.
pub fn read_memory(r: &mut impl Read, path: &Path) -> Result<Tensor<f32>> {
    let fmt = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(fmt("truncated header"));
    }
    if &bytes[..4] != MEMORY_MAGIC {
        return Err(fmt("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != MEMORY_VERSION as usize {
        return Err(fmt("unsupported version"));
    }
    let (n, d) = (word(8), word(12));
    let payload = &bytes[16..];
    if payload.len() != n * d * 4 {
        return Err(fmt("payload length does not match N×d"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(n, d, data)
}
