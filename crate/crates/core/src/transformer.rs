//! Decoder-only transformer whose attention visibility is supplied by the
//! caller as an [`AttentionMask`] (one shared mask or one per layer).

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::AttentionMask;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, OUTPUT_VOCAB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Output vocabulary (bytes plus specials).
    pub vocab: usize,
    /// Number of learnable memory embeddings.
    pub max_memory: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab: OUTPUT_VOCAB,
            max_memory: 64,
            max_seq_len: 1024,
            rope_base: 10_000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("layers", "must be at least 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::config("heads", "head dimension must be even for rotary"));
        }
        if self.d_ff == 0 || self.vocab == 0 || self.max_memory == 0 {
            return Err(Error::config("d_ff/vocab/max_memory", "must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// Weights of one transformer. The output head is tied to `tok_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub mem_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
}

const INIT_STD: f64 = 0.02;

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl<T: Scalar> ModelParams<T> {
    /// Gaussian initialization; residual output projections are scaled by
    /// `1/sqrt(2·n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let tok_emb = normal(&mut rng, &[config.vocab, d], INIT_STD);
        let mem_emb = normal(&mut rng, &[config.max_memory, d], INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::filled(&[d], T::one()),
                wq: normal(&mut rng, &[d, d], INIT_STD),
                wk: normal(&mut rng, &[d, d], INIT_STD),
                wv: normal(&mut rng, &[d, d], INIT_STD),
                wo: normal(&mut rng, &[d, d], resid_std),
                ffn_norm: Tensor::filled(&[d], T::one()),
                w_up: normal(&mut rng, &[d, config.d_ff], INIT_STD),
                w_down: normal(&mut rng, &[config.d_ff, d], resid_std),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            mem_emb,
            layers,
            final_norm: Tensor::filled(&[d], T::one()),
        })
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("mem_emb".to_string(), &self.mem_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ffn_norm", &l.ffn_norm),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.mem_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            mem_emb: self.mem_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on `tape`; `trainable` decides gradient participation.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), trainable);
        let tok_emb = leaf(&self.tok_emb);
        let mem_emb = leaf(&self.mem_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ffn_norm: leaf(&l.ffn_norm),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        ParamVars {
            config: self.config.clone(),
            tok_emb,
            mem_emb,
            layers,
            final_norm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub config: ModelConfig,
    pub tok_emb: Var,
    pub mem_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
}

impl ParamVars {
    /// Vars in the order of [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.mem_emb];
        for l in &self.layers {
            out.extend([
                l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_up, l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out
    }
}

/// One contiguous run of input rows.
#[derive(Debug, Clone)]
pub enum Segment<'a> {
    Tokens(&'a [TokenId]),
    /// Learnable memory embeddings for these 0-based slots.
    Memory(Range<usize>),
    /// Precomputed embedding rows (e.g. compressed memory).
    Rows(Var),
}

/// Builds the `[L′ × d_model]` input matrix from segments in order.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, segments: &[Segment<'_>]) -> Result<Var> {
    let mut parts = Vec::with_capacity(segments.len());
    for seg in segments {
        match seg {
            Segment::Tokens(ids) if ids.is_empty() => {}
            Segment::Tokens(ids) => parts.push(tape.gather(pv.tok_emb, ids)?),
            Segment::Memory(r) if r.is_empty() => {}
            Segment::Memory(r) => {
                let slots: Vec<usize> = r.clone().collect();
                parts.push(tape.gather(pv.mem_emb, &slots).map_err(|_| Error::Index {
                    what: "memory slot",
                    index: r.end - 1,
                    size: pv.config.max_memory,
                })?);
            }
            Segment::Rows(v) => {
                if tape.value(*v).cols() != pv.config.d_model {
                    return Err(Error::shape("embed rows", tape.shape(*v), &[pv.config.d_model]));
                }
                parts.push(*v);
            }
        }
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat_rows(&parts)
}

/// Residual-stream rows of earlier positions that queries may attend to at
/// every layer without being recomputed. `layers[ℓ]` holds the inputs to
/// layer ℓ for those positions.
#[derive(Debug, Clone, Default)]
pub struct KvPrefix {
    pub layers: Vec<Var>,
    pub positions: Vec<usize>,
}

impl KvPrefix {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-layer states after the output norm, `[rows × d_model]`.
    pub hidden: Var,
    /// `attn[layer][head]`: `[rows × (prefix + rows)]` attention weights.
    pub attn: Vec<Vec<Var>>,
    /// Residual-stream input to each layer, `[rows × d_model]`.
    pub layer_inputs: Vec<Var>,
}

/// Masks for a forward: one shared by all layers or one per layer.
#[derive(Debug, Clone, Copy)]
pub enum MaskSchedule<'a> {
    Shared(&'a AttentionMask),
    PerLayer(&'a [AttentionMask]),
}

impl<'a> MaskSchedule<'a> {
    fn for_layer(&self, layer: usize) -> &'a AttentionMask {
        match self {
            MaskSchedule::Shared(m) => m,
            MaskSchedule::PerLayer(ms) => &ms[layer],
        }
    }
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: Var,
    positions: &[usize],
    mask: &AttentionMask,
) -> Result<ForwardOutput> {
    forward_ext(tape, pv, input, positions, MaskSchedule::Shared(mask), None)
}

/// Full forward with per-layer masks and an optional key/value prefix.
/// Mask shape must be `rows × (prefix + rows)`.
pub fn forward_ext<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    input: Var,
    positions: &[usize],
    masks: MaskSchedule<'_>,
    prefix: Option<&KvPrefix>,
) -> Result<ForwardOutput> {
    let cfg = &pv.config;
    let rows = tape.value(input).rows();
    if tape.value(input).cols() != cfg.d_model || positions.len() != rows {
        return Err(Error::shape(
            "forward input",
            tape.shape(input),
            &[positions.len(), cfg.d_model],
        ));
    }
    if let MaskSchedule::PerLayer(ms) = masks {
        if ms.len() != cfg.n_layers {
            return Err(Error::Contract(format!(
                "{} masks for {} layers",
                ms.len(),
                cfg.n_layers
            )));
        }
    }
    let prefix_len = prefix.map_or(0, |p| p.len());
    if let Some(p) = prefix {
        if p.layers.len() != cfg.n_layers {
            return Err(Error::Contract("prefix must cover every layer".into()));
        }
    }
    let kv_positions: Vec<usize> = match prefix {
        Some(p) => p.positions.iter().chain(positions).copied().collect(),
        None => positions.to_vec(),
    };

    tape.count_forward_pass();
    let mut x = input;
    let mut attn = Vec::with_capacity(cfg.n_layers);
    let mut layer_inputs = Vec::with_capacity(cfg.n_layers);
    let eps = T::from_f64_lossy(cfg.norm_eps);
    let head_dim = cfg.head_dim();
    let score_scale = T::from_f64_lossy(1.0 / (head_dim as f64).sqrt());

    for (li, lv) in pv.layers.iter().enumerate() {
        layer_inputs.push(x);
        let mask = masks.for_layer(li);
        if mask.rows() != rows || mask.cols() != prefix_len + rows {
            return Err(Error::shape(
                "attention mask",
                &[mask.rows(), mask.cols()],
                &[rows, prefix_len + rows],
            ));
        }
        let additive = mask.additive::<T>();

        let full = match prefix {
            Some(p) if !p.is_empty() => tape.concat_rows(&[p.layers[li], x])?,
            _ => x,
        };
        let hn_full = tape.rms_norm(full, lv.attn_norm, eps)?;
        let hn = if prefix_len > 0 {
            tape.slice_rows(hn_full, prefix_len, rows)?
        } else {
            hn_full
        };
        let q = tape.matmul(hn, lv.wq)?;
        let k = tape.matmul(hn_full, lv.wk)?;
        let v = tape.matmul(hn_full, lv.wv)?;
        let q = tape.rope(q, positions, cfg.n_heads, cfg.rope_base)?;
        let k = tape.rope(k, &kv_positions, cfg.n_heads, cfg.rope_base)?;

        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut weights = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * head_dim, head_dim)?,
                    tape.slice_cols(k, h * head_dim, head_dim)?,
                    tape.slice_cols(v, h * head_dim, head_dim)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, score_scale);
            let p = tape.masked_softmax(scores, &additive)?;
            weights.push(p);
            heads.push(tape.matmul(p, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn_out = tape.matmul(merged, lv.wo)?;
        x = tape.add(x, attn_out)?;

        let hn = tape.rms_norm(x, lv.ffn_norm, eps)?;
        let up = tape.matmul(hn, lv.w_up)?;
        let act = tape.silu(up);
        let down = tape.matmul(act, lv.w_down)?;
        x = tape.add(x, down)?;
        attn.push(weights);
    }

    let hidden = tape.rms_norm(x, pv.final_norm, eps)?;
    Ok(ForwardOutput {
        hidden,
        attn,
        layer_inputs,
    })
}

/// Tied output head: `hidden · tok_embᵀ`.
pub fn logits<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, hidden: Var) -> Result<Var> {
    tape.matmul_nt(hidden, pv.tok_emb)
}

#[cfg(test)]
mod tests;
