//! Pre-training objectives (reconstruction, completion, their mix), Adam,
//! the training loop and checkpoint persistence.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{Converter, ConverterVars};
use crate::compressor::{compress_on_tape, Paradigm};
use crate::error::{Error, Result};
use crate::masking::build_causal_mask;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{decode, make_batch, TokenId, TokenSequence, TrainingBatch, AE, BOS};
use crate::transformer::{embed, forward, logits, ModelConfig, ModelParams, ParamVars, Segment};

/// Compressor, decoder and the converter between them.
#[derive(Debug, Clone, PartialEq)]
pub struct PicModel<T> {
    pub compressor: ModelParams<T>,
    pub decoder: ModelParams<T>,
    pub converter: Converter<T>,
}

impl<T: Scalar> PicModel<T> {
    /// Identity converter when the widths match, affine otherwise.
    pub fn init(compressor: &ModelConfig, decoder: &ModelConfig, seed: u64) -> Result<Self> {
        let converter = if compressor.d_model == decoder.d_model {
            Converter::identity(compressor.d_model)
        } else {
            Converter::affine(compressor.d_model, decoder.d_model, seed ^ 0xc0de)
        };
        Ok(Self {
            compressor: ModelParams::init(compressor, seed)?,
            decoder: ModelParams::init(decoder, seed.wrapping_add(1))?,
            converter,
        })
    }

    /// All tensors as `(group.name, tensor)`, compressor first.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        for (n, t) in self.compressor.named() {
            out.push((format!("compressor.{n}"), t));
        }
        for (n, t) in self.decoder.named() {
            out.push((format!("decoder.{n}"), t));
        }
        for (n, t) in self.converter.named() {
            out.push((format!("converter.{n}"), t));
        }
        out
    }

    /// Same order as [`PicModel::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.compressor.tensors_mut();
        out.extend(self.decoder.tensors_mut());
        out.extend(self.converter.tensors_mut());
        out
    }

    pub fn cast<U: Scalar>(&self) -> PicModel<U> {
        PicModel {
            compressor: self.compressor.cast(),
            decoder: self.decoder.cast(),
            converter: self.converter.cast(),
        }
    }
}

/// Tape handles for a registered [`PicModel`].
pub struct ModelVars {
    pub compressor: ParamVars,
    pub decoder: ParamVars,
    pub converter: ConverterVars,
}

impl<T: Scalar> PicModel<T> {
    pub fn register(&self, tape: &mut Tape<T>, freeze_decoder: bool) -> ModelVars {
        ModelVars {
            compressor: self.compressor.register(tape, true),
            decoder: self.decoder.register(tape, !freeze_decoder),
            converter: self.converter.register(tape, true),
        }
    }
}

/// Logits over `[memory rows, tail tokens]` under a causal mask.
pub(crate) fn decoder_logits<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    memory: Var,
    tail: &[TokenId],
) -> Result<Var> {
    let input = embed(tape, pv, &[Segment::Rows(memory), Segment::Tokens(tail)])?;
    let rows = tape.value(input).rows();
    let positions: Vec<usize> = (0..rows).collect();
    let out = forward(tape, pv, input, &positions, &build_causal_mask(rows)?)?;
    logits(tape, pv, out.hidden)
}

/// Reconstruction loss: decoder reads `[H̃, <AE>, x_1..x_{L-1}]` and is
/// scored on `x_1..x_L`. `memory` is in decoder space.
pub fn loss_reconstruction_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    decoder: &ParamVars,
    memory: Var,
    x: &TokenSequence,
) -> Result<Var> {
    let n = tape.value(memory).rows();
    let mut tail = Vec::with_capacity(x.len());
    tail.push(AE);
    tail.extend_from_slice(&x.ids[..x.len() - 1]);
    let lg = decoder_logits(tape, decoder, memory, &tail)?;
    let scored = tape.slice_rows(lg, n, x.len())?;
    tape.cross_entropy(scored, &x.ids)
}

/// Completion loss: memory compressed from `x_1..x_k`; decoder reads
/// `[H̃, x_k..x_{L-1}]` and is scored on `x_{k+1}..x_L`, normalized by `L-k`.
pub fn loss_completion_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    decoder: &ParamVars,
    memory: Var,
    x: &TokenSequence,
    k: usize,
) -> Result<Var> {
    if k == 0 || k >= x.len() {
        return Err(Error::Index {
            what: "completion split k",
            index: k,
            size: x.len(),
        });
    }
    let n = tape.value(memory).rows();
    let lg = decoder_logits(tape, decoder, memory, &x.ids[k - 1..x.len() - 1])?;
    let scored = tape.slice_rows(lg, n, x.len() - k)?;
    tape.cross_entropy(scored, &x.ids[k..])
}

/// `λ·tc + (1−λ)·tr`.
pub fn loss_combined<T: Scalar>(tr: T, tc: T, lambda: T) -> T {
    lambda * tc + (T::one() - lambda) * tr
}

/// Prefix `x_1..x_k` and its slot count `k / ratio`.
pub fn completion_split(x: &TokenSequence, k: usize, ratio: usize) -> Result<(TokenSequence, usize)> {
    if k == 0 || k >= x.len() {
        return Err(Error::Index {
            what: "completion split k",
            index: k,
            size: x.len(),
        });
    }
    if ratio == 0 || k % ratio != 0 {
        return Err(Error::config(
            "tc_split",
            format!("prefix length {k} is not divisible by ratio {ratio}"),
        ));
    }
    Ok((x.prefix(k), k / ratio))
}

/// Untaped reconstruction loss for one sample. `memory_rows` must already be
/// in decoder space and come from a context of length `source_len`.
pub fn loss_reconstruction<T: Scalar>(
    decoder: &ModelParams<T>,
    memory_rows: &Tensor<T>,
    source_len: usize,
    x: &TokenSequence,
) -> Result<T> {
    if source_len != x.len() {
        return Err(Error::Contract(format!(
            "memory compressed from {source_len} tokens, target has {}",
            x.len()
        )));
    }
    let mut tape = Tape::new();
    let pv = decoder.register(&mut tape, false);
    let mem = tape.constant(memory_rows.clone());
    let l = loss_reconstruction_on_tape(&mut tape, &pv, mem, x)?;
    Ok(tape.value(l).data()[0])
}

/// Untaped completion loss; `memory_rows` compressed from `x_1..x_k`.
pub fn loss_completion<T: Scalar>(
    decoder: &ModelParams<T>,
    memory_rows: &Tensor<T>,
    x: &TokenSequence,
    k: usize,
) -> Result<T> {
    let mut tape = Tape::new();
    let pv = decoder.register(&mut tape, false);
    let mem = tape.constant(memory_rows.clone());
    let l = loss_completion_on_tape(&mut tape, &pv, mem, x, k)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda: f64,
    /// Completion split; `None` means `L/2`.
    pub tc_split: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Compression ratio `L/N`.
    pub ratio: usize,
    pub mask_mode: Paradigm,
    pub freeze_decoder: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tc_split: None,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            ratio: 4,
            mask_mode: Paradigm::Pic,
            freeze_decoder: false,
        }
    }
}

impl TrainingConfig {
    /// Checks every field against a context length `seq_len`.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.ratio == 0 || seq_len % self.ratio != 0 {
            return Err(Error::config(
                "ratio",
                format!("{} does not divide seq_len {seq_len}", self.ratio),
            ));
        }
        if self.mask_mode == Paradigm::Iterative {
            return Err(Error::config("mask", "training supports pic or direct"));
        }
        let k = self.split(seq_len);
        if k == 0 || k >= seq_len {
            return Err(Error::config("tc_split", format!("must satisfy 1 <= k < {seq_len}")));
        }
        if k % self.ratio != 0 {
            return Err(Error::config(
                "tc_split",
                format!("prefix length {k} is not divisible by ratio {}", self.ratio),
            ));
        }
        Ok(())
    }

    pub fn split(&self, seq_len: usize) -> usize {
        self.tc_split.unwrap_or(seq_len / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tr: f64,
    pub tc: f64,
    pub combined: f64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update; `params[i]` pairs with `grads[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
                .collect();
        }
        self.t += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g.data() {
            let x = v.to_f64().unwrap_or(f64::NAN);
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub wall_ms: Option<f64>,
}

pub const LOG_HEADER: &str = "step,tr,tc,combined,wall_ms";

impl LogRow {
    /// CSV line; `wall_ms` is left empty when not recorded.
    pub fn to_csv(&self) -> String {
        let wall = self.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.step, self.loss.tr, self.loss.tc, self.loss.combined, wall
        )
    }
}

/// Serialized ChaCha position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::config("rng", format!("bad {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word_pos"))?);
        Ok(rng)
    }
}

/// Owns the model, optimizer and data order for one run.
pub struct Trainer<T: Scalar> {
    pub model: PicModel<T>,
    pub config: TrainingConfig,
    adam: Adam<T>,
    step: u64,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    record_wall_time: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: PicModel<T>, config: TrainingConfig) -> Self {
        let adam = Adam::new(config.lr, config.beta1, config.beta2, config.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            model,
            config,
            adam,
            step: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
            record_wall_time: false,
        }
    }

    /// Whether log rows carry wall-clock time. Off by default so logs are
    /// reproducible byte for byte.
    pub fn record_wall_time(&mut self, on: bool) {
        self.record_wall_time = on;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Next `batch_size` sequences of a reshuffled-every-epoch order.
    pub fn next_batch(&mut self, corpus: &[TokenSequence]) -> Result<TrainingBatch> {
        let b = self.config.batch_size;
        if corpus.len() < b {
            return Err(Error::Contract(format!(
                "corpus of {} cannot fill a batch of {b}",
                corpus.len()
            )));
        }
        let mut picked = Vec::with_capacity(b);
        while picked.len() < b {
            if self.cursor >= self.order.len() || self.order.len() != corpus.len() {
                self.order = (0..corpus.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(corpus[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        make_batch(&picked, b)
    }

    /// Combined-loss forward and backward on `batch`, clip, Adam update.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossBreakdown> {
        let cfg = &self.config;
        cfg.validate(batch.seq_len)?;
        let k = cfg.split(batch.seq_len);
        let chunks = batch.seq_len / cfg.ratio;

        let mut tape = Tape::<T>::new();
        let vars = self.model.register(&mut tape, cfg.freeze_decoder);
        let mut trs = Vec::with_capacity(batch.sequences.len());
        let mut tcs = Vec::with_capacity(batch.sequences.len());
        for x in &batch.sequences {
            let (tr, tc) = sample_losses(&mut tape, &vars, x, chunks, k, cfg.ratio, cfg.mask_mode)?;
            trs.push(tr);
            tcs.push(tc);
        }
        let inv_b = T::from_f64_lossy(1.0 / batch.sequences.len() as f64);
        let tr = mean_of(&mut tape, &trs, inv_b)?;
        let tc = mean_of(&mut tape, &tcs, inv_b)?;
        let lambda = T::from_f64_lossy(cfg.lambda);
        let a = tape.scale(tc, lambda);
        let b = tape.scale(tr, T::one() - lambda);
        let combined = tape.add(a, b)?;

        let loss = LossBreakdown {
            tr: tape.value(tr).data()[0].to_f64().unwrap_or(f64::NAN),
            tc: tape.value(tc).data()[0].to_f64().unwrap_or(f64::NAN),
            combined: tape.value(combined).data()[0].to_f64().unwrap_or(f64::NAN),
        };
        if !loss.combined.is_finite() {
            let dump: Vec<String> = batch
                .sequences
                .iter()
                .map(|s| String::from_utf8_lossy(&decode(&s.ids)).into_owned())
                .collect();
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("losses {loss:?}; batch {dump:?}"),
            });
        }

        let grads = tape.backward(combined)?;
        let mut trainable: Vec<Var> = vars.compressor.all();
        if !cfg.freeze_decoder {
            trainable.extend(vars.decoder.all());
        }
        if let ConverterVars::Affine { weight, bias } = vars.converter {
            trainable.extend([weight, bias]);
        }
        let mut g: Vec<Tensor<T>> = trainable.iter().map(|&v| grads.get_or_zeros(v)).collect();
        clip_global_norm(&mut g, cfg.clip_norm);

        let freeze = cfg.freeze_decoder;
        let mut params: Vec<&mut Tensor<T>> = self.model.compressor.tensors_mut();
        if !freeze {
            params.extend(self.model.decoder.tensors_mut());
        }
        params.extend(self.model.converter.tensors_mut());
        self.adam.update(&mut params, &g);
        self.step += 1;
        Ok(loss)
    }

    /// Draws a batch, trains on it and returns the log row.
    pub fn step(&mut self, corpus: &[TokenSequence]) -> Result<LogRow> {
        let start = Instant::now();
        let batch = self.next_batch(corpus)?;
        let loss = self.train_step(&batch)?;
        Ok(LogRow {
            step: self.step,
            loss,
            wall_ms: self
                .record_wall_time
                .then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    }
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, parts: &[Var], inv_n: T) -> Result<Var> {
    let stacked = tape.concat_rows(parts)?;
    let s = tape.sum(stacked);
    Ok(tape.scale(s, inv_n))
}

/// Reconstruction and completion losses of one sample on `tape`.
pub fn sample_losses<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    x: &TokenSequence,
    chunks: usize,
    k: usize,
    ratio: usize,
    paradigm: Paradigm,
) -> Result<(Var, Var)> {
    let h = compress_on_tape(tape, &vars.compressor, x, chunks, paradigm)?;
    let h = Converter::apply(tape, vars.converter, h)?;
    let tr = loss_reconstruction_on_tape(tape, &vars.decoder, h, x)?;

    let (prefix, prefix_chunks) = completion_split(x, k, ratio)?;
    let hp = compress_on_tape(tape, &vars.compressor, &prefix, prefix_chunks, paradigm)?;
    let hp = Converter::apply(tape, vars.converter, hp)?;
    let tc = loss_completion_on_tape(tape, &vars.decoder, hp, x, k)?;
    Ok((tr, tc))
}

/// Plain next-token training of a decoder on `[<BOS>, x_1..x_{L-1}] → x`.
/// Used to obtain a decoder that is later frozen.
pub fn pretrain_decoder<T: Scalar>(
    decoder: &mut ModelParams<T>,
    corpus: &[TokenSequence],
    steps: u64,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(lr, 0.9, 0.999, 1e-8);
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let picked: Vec<&TokenSequence> = corpus.choose_multiple(&mut rng, batch_size).collect();
        let mut tape = Tape::<T>::new();
        let pv = decoder.register(&mut tape, true);
        let mut parts = Vec::with_capacity(picked.len());
        for x in &picked {
            let mut input = vec![BOS];
            input.extend_from_slice(&x.ids[..x.len() - 1]);
            let emb = embed(&mut tape, &pv, &[Segment::Tokens(&input)])?;
            let positions: Vec<usize> = (0..input.len()).collect();
            let out = forward(&mut tape, &pv, emb, &positions, &build_causal_mask(input.len())?)?;
            let lg = logits(&mut tape, &pv, out.hidden)?;
            parts.push(tape.cross_entropy(lg, &x.ids)?);
        }
        let inv = T::from_f64_lossy(1.0 / parts.len() as f64);
        let loss = mean_of(&mut tape, &parts, inv)?;
        losses.push(tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN));
        let grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<T>> = pv.all().iter().map(|&v| grads.get_or_zeros(v)).collect();
        clip_global_norm(&mut g, 1.0);
        adam.update(&mut decoder.tensors_mut(), &g);
    }
    Ok(losses)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PICC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConverterKind {
    Identity,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    compressor: ModelConfig,
    decoder: ModelConfig,
    converter: ConverterKind,
    converter_dims: [usize; 2],
    training: TrainingConfig,
    step: u64,
    rng: RngState,
}

/// Everything needed to rebuild a model and report how it was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: PicModel<T>,
    pub training: TrainingConfig,
    pub step: u64,
    pub rng: RngState,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_trainer(trainer: &Trainer<T>) -> Self {
        Self {
            model: trainer.model.clone(),
            training: trainer.config.clone(),
            step: trainer.step_count(),
            rng: trainer.rng_state(),
        }
    }

    /// Binary layout: `PICC`, u32 version, u32 entry count, entries
    /// (u16 name length, name, u8 dtype, u8 ndim, u32 dims, LE payload),
    /// then u32 length and a JSON blob with the configs.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.named();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in &named {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let meta = CheckpointMeta {
            compressor: self.model.compressor.config.clone(),
            decoder: self.model.decoder.config.clone(),
            converter: match self.model.converter {
                Converter::Identity { .. } => ConverterKind::Identity,
                Converter::Affine { .. } => ConverterKind::Affine,
            },
            converter_dims: [self.model.converter.d_in(), self.model.converter.d_out()],
            training: self.training.clone(),
            step: self.step,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic"));
        }
        if r.u32()? != CHECKPOINT_VERSION {
            return Err(r.err("unsupported version"));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("name is not UTF-8"))?;
            let dtype = crate::tensor::DType::from_code(r.take(1)?[0]).ok_or_else(|| r.err("unknown dtype"))?;
            if dtype != T::DTYPE {
                return Err(r.err("dtype differs from requested precision"));
            }
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let size = dtype.size_of();
            let payload = r.take(n * size)?;
            let data = payload.chunks_exact(size).map(T::read_le).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        let json_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }

        let converter = match meta.converter {
            ConverterKind::Identity => Converter::identity(meta.converter_dims[0]),
            ConverterKind::Affine => {
                Converter::affine(meta.converter_dims[0], meta.converter_dims[1], 0)
            }
        };
        let mut model = PicModel {
            compressor: ModelParams::init(&meta.compressor, 0)?,
            decoder: ModelParams::init(&meta.decoder, 0)?,
            converter,
        };
        let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != entries.len() {
            return Err(r.err("entry count does not match configs"));
        }
        for ((slot, expected), (name, t)) in model.tensors_mut().into_iter().zip(&names).zip(entries) {
            if &name != expected || slot.shape() != t.shape() {
                return Err(r.err(&format!("unexpected entry {name}")));
            }
            *slot = t;
        }
        Ok(Self {
            model,
            training: meta.training,
            step: meta.step,
            rng: meta.rng,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
