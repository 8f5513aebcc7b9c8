//! Consuming memory embeddings downstream: the converter, greedy decoding
//! conditioned on `H̃`, and reconstruction / completion metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compressor::{compress, IterativeHistory, Paradigm};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenId, TokenSequence, AE, EOS};
use crate::training::{completion_split, decoder_logits, PicModel};
use crate::transformer::ModelParams;

/// Maps compressor-space rows into the decoder's embedding space.
#[derive(Debug, Clone, PartialEq)]
pub enum Converter<T> {
    Identity { dim: usize },
    Affine { weight: Tensor<T>, bias: Tensor<T> },
}

#[derive(Debug, Clone, Copy)]
pub enum ConverterVars {
    Identity,
    Affine { weight: Var, bias: Var },
}

impl<T: Scalar> Converter<T> {
    pub fn identity(dim: usize) -> Self {
        Converter::Identity { dim }
    }

    /// Small random weights plus zero bias.
    pub fn affine(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
        let weight = (0..d_in * d_out)
            .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
            .collect();
        Converter::Affine {
            weight: Tensor::matrix(d_in, d_out, weight).expect("shape"),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Converter::Identity { dim } => *dim,
            Converter::Affine { weight, .. } => weight.rows(),
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            Converter::Identity { dim } => *dim,
            Converter::Affine { weight, .. } => weight.cols(),
        }
    }

    /// Affine map per row; identity returns the input unchanged.
    pub fn convert(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        if h.cols() != self.d_in() {
            return Err(Error::shape("convert", h.shape(), &[self.d_in(), self.d_out()]));
        }
        match self {
            Converter::Identity { .. } => Ok(h.clone()),
            Converter::Affine { .. } => {
                let mut tape = Tape::new();
                let vars = self.register(&mut tape, false);
                let x = tape.constant(h.clone());
                let y = Self::apply(&mut tape, vars, x)?;
                Ok(tape.value(y).clone())
            }
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> ConverterVars {
        match self {
            Converter::Identity { .. } => ConverterVars::Identity,
            Converter::Affine { weight, bias } => ConverterVars::Affine {
                weight: tape.leaf(weight.clone(), trainable),
                bias: tape.leaf(bias.clone(), trainable),
            },
        }
    }

    pub fn apply(tape: &mut Tape<T>, vars: ConverterVars, h: Var) -> Result<Var> {
        match vars {
            ConverterVars::Identity => Ok(h),
            ConverterVars::Affine { weight, bias } => {
                let y = tape.matmul(h, weight)?;
                tape.add_row(y, bias)
            }
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Converter::Identity { .. } => Vec::new(),
            Converter::Affine { weight, bias } => vec![
                ("weight".to_string(), weight),
                ("bias".to_string(), bias),
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Converter::Identity { .. } => Vec::new(),
            Converter::Affine { weight, bias } => vec![weight, bias],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Converter<U> {
        match self {
            Converter::Identity { dim } => Converter::Identity { dim: *dim },
            Converter::Affine { weight, bias } => Converter::Affine {
                weight: weight.cast(),
                bias: bias.cast(),
            },
        }
    }
}

/// What follows the memory rows in the decoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    /// The `<AE>` token: regenerate the compressed context.
    Reconstruct,
    /// Raw prompt ids (may be empty).
    Tokens(Vec<TokenId>),
}

impl Prompt {
    fn ids(&self) -> Vec<TokenId> {
        match self {
            Prompt::Reconstruct => vec![AE],
            Prompt::Tokens(ids) => ids.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

/// One row of the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSlot {
    Memory(usize),
    Token(TokenId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationResult {
    /// Emitted tokens, without the terminating EOS.
    pub ids: Vec<TokenId>,
    pub stop: StopReason,
    /// Decoder input at the final step.
    pub layout: Vec<InputSlot>,
}

/// Argmax decoding over `[memory rows, prompt, generated]` with a causal
/// mask. Recomputes the whole prefix every step. Ties go to the lowest id.
pub fn greedy_generate<T: Scalar>(
    decoder: &ModelParams<T>,
    memory_rows: &Tensor<T>,
    prompt: &Prompt,
    max_len: usize,
) -> Result<GenerationResult> {
    if memory_rows.cols() != decoder.config.d_model {
        return Err(Error::shape(
            "greedy_generate memory",
            memory_rows.shape(),
            &[decoder.config.d_model],
        ));
    }
    let n = memory_rows.rows();
    let mut tail = prompt.ids();
    let prompt_len = tail.len();
    let mut stop = StopReason::MaxLength;
    while tail.len() - prompt_len < max_len {
        let rows = n + tail.len();
        if rows == 0 {
            return Err(Error::Contract("nothing to condition generation on".into()));
        }
        let mut tape = Tape::new();
        let pv = decoder.register(&mut tape, false);
        let mem = tape.constant(memory_rows.clone());
        let logits = decoder_logits(&mut tape, &pv, mem, &tail)?;
        let last = tape.value(logits).row(rows - 1);
        let next = argmax(last);
        if next == EOS {
            stop = StopReason::Eos;
            break;
        }
        tail.push(next);
    }
    let layout = (0..n)
        .map(InputSlot::Memory)
        .chain(tail.iter().map(|&id| InputSlot::Token(id)))
        .collect();
    Ok(GenerationResult {
        ids: tail[prompt_len..].to_vec(),
        stop,
        layout,
    })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced decoder pass for reconstruction; returns per-position
/// logits for predicting `x_1..x_L` (`[L × V]`).
pub fn reconstruction_logits<T: Scalar>(
    decoder: &ModelParams<T>,
    memory_rows: &Tensor<T>,
    x: &TokenSequence,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = decoder.register(&mut tape, false);
    let mem = tape.constant(memory_rows.clone());
    let mut tail = vec![AE];
    tail.extend_from_slice(&x.ids[..x.len() - 1]);
    let logits = decoder_logits(&mut tape, &pv, mem, &tail)?;
    let n = memory_rows.rows();
    let l = tape.slice_rows(logits, n, x.len())?;
    Ok(tape.value(l).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionAccuracy {
    /// Fraction of positions whose teacher-forced argmax equals `x_i`.
    pub per_token: f64,
    /// Fraction of samples regenerated exactly by free-running decoding.
    pub exact_sequence: f64,
    pub n_samples: usize,
}

/// `free_running` controls whether the (slower) greedy exact-match rate is
/// measured; when false it is reported as 0.
pub fn eval_reconstruction_accuracy<T: Scalar>(
    model: &PicModel<T>,
    corpus: &[TokenSequence],
    chunks: usize,
    paradigm: Paradigm,
    free_running: bool,
) -> Result<ReconstructionAccuracy> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut exact = 0usize;
    for x in corpus {
        let mem = compress(&model.compressor, x, chunks, paradigm, IterativeHistory::default())?;
        let rows = model.converter.convert(&mem.memory.h)?;
        let logits = reconstruction_logits(&model.decoder, &rows, x)?;
        for (i, &target) in x.ids.iter().enumerate() {
            if argmax(logits.row(i)) == target {
                correct += 1;
            }
            total += 1;
        }
        if free_running {
            let g = greedy_generate(&model.decoder, &rows, &Prompt::Reconstruct, x.len())?;
            if g.ids == x.ids {
                exact += 1;
            }
        }
    }
    let n = corpus.len().max(1) as f64;
    Ok(ReconstructionAccuracy {
        per_token: correct as f64 / total.max(1) as f64,
        exact_sequence: exact as f64 / n,
        n_samples: corpus.len(),
    })
}

/// Mean over the corpus of the completion loss, with the prefix
/// `x_1..x_k` compressed at the same ratio as the full context.
pub fn eval_completion_nll<T: Scalar>(
    model: &PicModel<T>,
    corpus: &[TokenSequence],
    ratio: usize,
    k: usize,
    paradigm: Paradigm,
) -> Result<f64> {
    let mut total = 0.0;
    for x in corpus {
        let (prefix, prefix_chunks) = completion_split(x, k, ratio)?;
        let mem = compress(&model.compressor, &prefix, prefix_chunks, paradigm, IterativeHistory::default())?;
        let rows = model.converter.convert(&mem.memory.h)?;
        total += completion_nll(&model.decoder, &rows, x, k)?;
    }
    Ok(total / corpus.len().max(1) as f64)
}

/// Untaped completion loss for one sample, accumulated in f64.
pub fn completion_nll<T: Scalar>(
    decoder: &ModelParams<T>,
    memory_rows: &Tensor<T>,
    x: &TokenSequence,
    k: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = decoder.register(&mut tape, false);
    let mem = tape.constant(memory_rows.clone());
    let logits = decoder_logits(&mut tape, &pv, mem, &x.ids[k - 1..x.len() - 1])?;
    let n = memory_rows.rows();
    let lv = tape.value(logits);
    let mut total = 0.0;
    for (r, &target) in x.ids[k..].iter().enumerate() {
        let row: Vec<f64> = lv.row(n + r).iter().map(|v| v.to_f64().unwrap()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
    }
    Ok(total / (x.len() - k) as f64)
}

/// `{metric, value, n_samples, config_hash, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub config_hash: String,
    pub seed: u64,
}
