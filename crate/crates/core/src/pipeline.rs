//! Run configuration and the end-to-end commands built on it: training,
//! compression, reconstruction, evaluation, heatmaps, benchmarks and the
//! invariant suite. Every artifact name carries the config hash.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{
    eval_completion_nll, eval_reconstruction_accuracy, greedy_generate, EvalReport, Prompt,
};
use crate::compressor::{compress, write_memory, IterativeHistory, Paradigm};
use crate::diagnostics::{
    attention_heatmap, context_embeddings, cosine_map, gradient_check, latency_benchmark,
    receptive_field_matrix, BenchOptions, Comparison, EmbeddingSource, GradCheckSetup, HeadSelect,
    HeatmapKind,
};
use crate::error::{Error, Result};
use crate::masking::{build_block_causal_mask, partition_chunks, visible};
use crate::tokenizer::{decode, encode, generate_corpus, CorpusKind, CorpusSpec, TokenSequence};
use crate::training::{
    load_checkpoint, pretrain_decoder, save_checkpoint, Checkpoint, PicModel, Trainer, TrainingConfig,
    LOG_HEADER,
};
use crate::transformer::{ModelConfig, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples scored; `0` means the whole corpus.
    pub samples: usize,
    /// Also measure free-running exact-sequence reconstruction.
    pub free_running: bool,
    /// Score a freshly generated corpus (seed + 1) instead of the training one.
    pub held_out: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 0,
            free_running: false,
            held_out: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapConfig {
    pub kind: HeatmapKind,
    pub layer: usize,
    /// `None` averages heads.
    pub head: Option<usize>,
    pub source: EmbeddingSource,
    /// Corpus index of the visualized context.
    pub sample: usize,
    pub paradigm: Paradigm,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self {
            kind: HeatmapKind::Attention,
            layer: 0,
            head: None,
            source: EmbeddingSource::Input,
            sample: 0,
            paradigm: Paradigm::Pic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub paradigms: Vec<Paradigm>,
    pub chunks: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
    pub history: IterativeHistory,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            paradigms: vec![Paradigm::Pic, Paradigm::Iterative],
            chunks: vec![2, 4, 8, 16],
            warmup: 2,
            repetitions: 7,
            history: IterativeHistory::FinalStates,
        }
    }
}

/// Everything a command needs, loadable from JSON with every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Decoder shape; the compressor's when absent.
    pub decoder: Option<ModelConfig>,
    pub training: TrainingConfig,
    pub corpus: CorpusSpec,
    /// Language-model steps for the decoder before it is frozen.
    pub decoder_pretrain_steps: u64,
    /// Fill the `wall_ms` log column. Off keeps logs byte-reproducible.
    pub log_wall_time: bool,
    pub eval: EvalConfig,
    pub heatmap: HeatmapConfig,
    pub bench: BenchConfig,
    /// Output directory; not part of the config hash.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            decoder: None,
            training: TrainingConfig::default(),
            corpus: CorpusSpec::template(0, 128, 256),
            decoder_pretrain_steps: 0,
            log_wall_time: false,
            eval: EvalConfig::default(),
            heatmap: HeatmapConfig::default(),
            bench: BenchConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn decoder_config(&self) -> ModelConfig {
        self.decoder.clone().unwrap_or_else(|| self.model.clone())
    }

    pub fn seq_len(&self) -> usize {
        self.corpus.seq_len
    }

    /// Memory slots per context, `L / ratio`.
    pub fn chunks(&self) -> usize {
        self.corpus.seq_len / self.training.ratio.max(1)
    }

    pub fn seed(&self) -> u64 {
        self.training.seed
    }

    /// Checks every nested invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let prefixed = |section: &str, e: Error| match e {
            Error::Config { field, reason } => Error::config(format!("{section}.{field}"), reason),
            other => other,
        };
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.decoder_config().validate().map_err(|e| prefixed("decoder", e))?;
        let len = self.corpus.seq_len;
        if len < 2 {
            return Err(Error::config("seq_len", "must be at least 2"));
        }
        if self.corpus.count == 0 {
            return Err(Error::config("corpus.count", "must be at least 1"));
        }
        if let CorpusKind::RandomMarkov { states } = self.corpus.kind {
            if states < 2 {
                return Err(Error::config("corpus.states", "need at least 2 states"));
            }
        }
        self.training.validate(len).map_err(|e| prefixed("training", e))?;
        let chunks = self.chunks();
        if chunks > self.model.max_memory {
            return Err(Error::config(
                "ratio",
                format!("{chunks} memory slots exceed max_memory {}", self.model.max_memory),
            ));
        }
        if len + chunks + 1 > self.model.max_seq_len.min(self.decoder_config().max_seq_len) {
            return Err(Error::config("seq_len", "exceeds max_seq_len"));
        }
        if self.training.batch_size > self.corpus.count {
            return Err(Error::config("training.batch_size", "larger than the corpus"));
        }
        if self.heatmap.layer >= self.model.n_layers {
            return Err(Error::config("heatmap.layer", "out of range"));
        }
        if let Some(h) = self.heatmap.head {
            if h >= self.model.n_heads {
                return Err(Error::config("heatmap.head", "out of range"));
            }
        }
        if self.heatmap.paradigm == Paradigm::Iterative && self.heatmap.kind == HeatmapKind::Attention {
            return Err(Error::config("heatmap.paradigm", "attention maps need pic or direct"));
        }
        if self.bench.repetitions == 0 {
            return Err(Error::config("bench.repetitions", "must be at least 1"));
        }
        for &n in &self.bench.chunks {
            if n == 0 || len % n != 0 {
                return Err(Error::config("bench.chunks", format!("{n} does not divide seq_len {len}")));
            }
            if n > self.model.max_memory {
                return Err(Error::config("bench.chunks", format!("{n} exceeds max_memory")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted) JSON, without `out_dir`;
    /// first 12 hex digits.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut value {
            map.remove("out_dir");
        }
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Names files `<stem>-<hash>.<ext>` under the output directory and refuses
/// to overwrite unless forced.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub hash: String,
    pub force: bool,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path, hash: &str, force: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
            force,
            written: Vec::new(),
        })
    }

    pub fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}-{}.{ext}", self.hash))
    }

    /// Reserves a path, failing when it exists and `force` is off.
    pub fn claim(&mut self, stem: &str, ext: &str) -> Result<PathBuf> {
        let p = self.path(stem, ext);
        if p.exists() && !self.force {
            return Err(Error::config(
                "out",
                format!("{} exists; pass --force to overwrite", p.display()),
            ));
        }
        self.written.push(p.clone());
        Ok(p)
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// Per-command record of what ran and what it produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: Option<String>,
    pub wall_time_ms: f64,
    pub artifacts: Vec<PathBuf>,
}

pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Writes `manifest-<command>-<hash>.json`.
pub fn write_manifest(cfg: &RunConfig, arts: &mut Artifacts, command: &str, started: Instant) -> Result<PathBuf> {
    let path = arts.claim(&format!("manifest-{command}"), "json")?;
    let manifest = Manifest {
        command: command.to_string(),
        config: cfg.clone(),
        config_hash: arts.hash.clone(),
        seed: cfg.seed(),
        git_describe: git_describe(),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        artifacts: arts.written().to_vec(),
    };
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn corpus(cfg: &RunConfig) -> Result<Vec<TokenSequence>> {
    generate_corpus(&cfg.corpus)
}

fn eval_corpus(cfg: &RunConfig) -> Result<Vec<TokenSequence>> {
    let mut spec = cfg.corpus.clone();
    if cfg.eval.held_out {
        spec.seed = spec.seed.wrapping_add(1);
    }
    let mut c = generate_corpus(&spec)?;
    if cfg.eval.samples > 0 {
        c.truncate(cfg.eval.samples);
    }
    Ok(c)
}

pub fn init_model(cfg: &RunConfig) -> Result<PicModel<f32>> {
    PicModel::init(&cfg.model, &cfg.decoder_config(), cfg.seed())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub last: Option<crate::training::LogRow>,
}

/// Trains for `training.steps`, streaming the CSV log, then saves the
/// checkpoint.
pub fn run_train(cfg: &RunConfig, arts: &mut Artifacts) -> Result<TrainOutcome> {
    let log_path = arts.claim("train", "log.csv")?;
    let ckpt_path = arts.claim("model", "picc")?;
    let data = corpus(cfg)?;
    let mut model = init_model(cfg)?;
    if cfg.training.freeze_decoder && cfg.decoder_pretrain_steps > 0 {
        pretrain_decoder(
            &mut model.decoder,
            &data,
            cfg.decoder_pretrain_steps,
            cfg.training.batch_size,
            cfg.training.lr,
            cfg.seed().wrapping_add(7),
        )?;
    }
    let mut trainer = Trainer::new(model, cfg.training.clone());
    trainer.record_wall_time(cfg.log_wall_time);

    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{LOG_HEADER}").map_err(io)?;
    let mut last = None;
    for _ in 0..cfg.training.steps {
        let row = trainer.step(&data)?;
        writeln!(log, "{}", row.to_csv()).map_err(io)?;
        last = Some(row);
    }
    log.flush().map_err(io)?;
    save_checkpoint(&Checkpoint::from_trainer(&trainer), &ckpt_path)?;
    Ok(TrainOutcome {
        log: log_path,
        checkpoint: ckpt_path,
        last,
    })
}

/// A context from a file (first `seq_len` bytes) or a corpus sample.
pub fn select_input(cfg: &RunConfig, input: Option<&Path>, sample: usize) -> Result<TokenSequence> {
    let len = cfg.seq_len();
    match input {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() < len {
                return Err(Error::config(
                    "input",
                    format!("{} holds {} bytes, need {len}", path.display(), bytes.len()),
                ));
            }
            Ok(encode(&bytes[..len]))
        }
        None => {
            let data = corpus(cfg)?;
            data.get(sample).cloned().ok_or_else(|| {
                Error::config("sample", format!("index {sample} outside corpus of {}", data.len()))
            })
        }
    }
}

/// Loads a checkpoint or, without one, a fresh model from the config.
pub fn model_for(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PicModel<f32>> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint::<f32>(p)?.model),
        None => init_model(cfg),
    }
}

fn check_fits(cfg: &RunConfig, model: &PicModel<f32>) -> Result<()> {
    if cfg.chunks() > model.compressor.config.max_memory {
        return Err(Error::config("ratio", "checkpoint has too few memory slots"));
    }
    Ok(())
}

pub fn run_compress(
    cfg: &RunConfig,
    arts: &mut Artifacts,
    model: &PicModel<f32>,
    x: &TokenSequence,
    paradigm: Paradigm,
) -> Result<PathBuf> {
    check_fits(cfg, model)?;
    let path = arts.claim(&format!("memory-{}", paradigm.name()), "picm")?;
    let c = compress(&model.compressor, x, cfg.chunks(), paradigm, IterativeHistory::default())?;
    let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    write_memory(&mut f, &c.memory)
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn run_reconstruct(
    cfg: &RunConfig,
    arts: &mut Artifacts,
    model: &PicModel<f32>,
    x: &TokenSequence,
    max_len: usize,
) -> Result<(PathBuf, Vec<u8>)> {
    check_fits(cfg, model)?;
    let path = arts.claim("reconstruct", "txt")?;
    let c = compress(&model.compressor, x, cfg.chunks(), cfg.training.mask_mode, IterativeHistory::default())?;
    let rows = model.converter.convert(&c.memory.h)?;
    let g = greedy_generate(&model.decoder, &rows, &Prompt::Reconstruct, max_len)?;
    let text = decode(&g.ids);
    fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok((path, text))
}

pub fn run_eval(cfg: &RunConfig, arts: &mut Artifacts, model: &PicModel<f32>) -> Result<(PathBuf, Vec<EvalReport>)> {
    check_fits(cfg, model)?;
    let path = arts.claim("eval", "json")?;
    let data = eval_corpus(cfg)?;
    let paradigm = cfg.training.mask_mode;
    let acc = eval_reconstruction_accuracy(model, &data, cfg.chunks(), paradigm, cfg.eval.free_running)?;
    let k = cfg.training.split(cfg.seq_len());
    let nll = eval_completion_nll(model, &data, cfg.training.ratio, k, paradigm)?;
    let report = |metric: &str, value: f64| EvalReport {
        metric: metric.to_string(),
        value,
        n_samples: data.len(),
        config_hash: arts.hash.clone(),
        seed: cfg.seed(),
    };
    let mut reports = vec![
        report("reconstruction_token_accuracy", acc.per_token),
        report("completion_nll", nll),
    ];
    if cfg.eval.free_running {
        reports.push(report("reconstruction_exact_sequence", acc.exact_sequence));
    }
    fs::write(&path, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(&path, e))?;
    Ok((path, reports))
}

pub fn run_heatmap(
    cfg: &RunConfig,
    arts: &mut Artifacts,
    model: &PicModel<f32>,
    x: &TokenSequence,
) -> Result<Vec<PathBuf>> {
    check_fits(cfg, model)?;
    let h = &cfg.heatmap;
    let params = &model.compressor;
    let map = match h.kind {
        HeatmapKind::Attention => {
            let head = h.head.map_or(HeadSelect::Mean, HeadSelect::Head);
            attention_heatmap(params, x, cfg.chunks(), h.paradigm, h.layer, head)?
        }
        HeatmapKind::Cosine => {
            let mem = compress(params, x, cfg.chunks(), h.paradigm, IterativeHistory::default())?;
            let ctx = context_embeddings(params, x, cfg.chunks(), h.source)?;
            cosine_map(&mem.memory.h, &ctx)?
        }
    };
    let stem = match h.kind {
        HeatmapKind::Attention => "heatmap-attention",
        HeatmapKind::Cosine => "heatmap-cosine",
    };
    for ext in ["csv", "pgm", "json"] {
        arts.claim(stem, ext)?;
    }
    map.write(&arts.dir, &format!("{stem}-{}", arts.hash))
}

pub fn run_bench(cfg: &RunConfig, arts: &mut Artifacts, params: &ModelParams<f32>) -> Result<PathBuf> {
    let path = arts.claim("bench", "csv")?;
    let opts = BenchOptions {
        seq_len: cfg.seq_len(),
        chunks: cfg.bench.chunks.clone(),
        paradigms: cfg.bench.paradigms.clone(),
        warmup: cfg.bench.warmup,
        repetitions: cfg.bench.repetitions,
        seed: cfg.seed(),
        history: cfg.bench.history,
    };
    let report = latency_benchmark(params, &opts)?;
    fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One line of the invariant suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail: detail.into(),
    }
}

/// Mask oracle over every `L ≤ max_len` and `N | L`.
pub fn verify_masks(max_len: usize) -> Result<Check> {
    let mut cases = 0usize;
    for len in 2..=max_len {
        for chunks in (1..=len).filter(|n| len % n == 0) {
            let p = partition_chunks(len, chunks)?;
            let m = build_block_causal_mask(len, chunks)?;
            for i in 0..p.total() {
                for j in 0..p.total() {
                    if m.is_visible(i, j) != visible(i, j, &p)? {
                        return Ok(check(
                            "mask_oracle",
                            false,
                            format!("L={len} N={chunks} cell ({i},{j})"),
                        ));
                    }
                }
            }
            cases += 1;
        }
    }
    Ok(check("mask_oracle", true, format!("{cases} (L, N) pairs")))
}

fn tiny(layers: usize, d: usize, max_memory: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: 2,
        d_model: d,
        d_ff: 2 * d,
        max_memory,
        ..ModelConfig::default()
    }
}

/// Exhaustive perturbation at `L=8, N=4`: future chunks never reach `h_t`
/// (depth 1, 2, 4); at depth 1 `h_t` depends exactly on `c_t` for both the
/// PIC and iterative paradigms.
pub fn verify_dependencies(seed: u64) -> Result<Vec<Check>> {
    let x = generate_corpus(&CorpusSpec::template(seed, 8, 1))?.remove(0);
    let p = partition_chunks(8, 4)?;
    let mut out = Vec::new();
    for depth in [1, 2, 4] {
        let params = ModelParams::<f32>::init(&tiny(depth, 8, 4), seed.wrapping_add(depth as u64))?;
        let m = receptive_field_matrix(&params, Paradigm::Pic, &x, 4, Comparison::BitExact)?;
        let leaks: Vec<(usize, usize)> = (0..4)
            .flat_map(|t| (0..8).map(move |j| (t, j)))
            .filter(|&(t, j)| p.chunk_of(j) > t && m.get(t, j))
            .collect();
        out.push(check(
            &format!("future_chunk_independence_depth{depth}"),
            leaks.is_empty(),
            format!("{} leaking (t, j) pairs", leaks.len()),
        ));
    }
    let params = ModelParams::<f32>::init(&tiny(1, 8, 4), seed)?;
    let pic = receptive_field_matrix(&params, Paradigm::Pic, &x, 4, Comparison::BitExact)?;
    let iter = receptive_field_matrix(&params, Paradigm::Iterative, &x, 4, Comparison::BitExact)?;
    let exact = |m: &crate::diagnostics::DependencyMatrix| {
        (0..4).all(|t| (0..8).all(|j| m.get(t, j) == (p.chunk_of(j) == t)))
    };
    out.push(check("single_layer_locality", exact(&pic), "depth 1, L=8, N=4"));
    out.push(check(
        "iterative_receptive_field_equivalence",
        exact(&pic) && pic == iter,
        "depth 1 PIC vs iterative dependency matrices",
    ));
    Ok(out)
}

/// Finite-difference check of the reconstruction, completion and combined
/// losses on a 2-layer, width-16 model in f64.
pub fn verify_gradients(seed: u64, tolerance: f64) -> Result<Vec<Check>> {
    let cfg = tiny(2, 16, 4);
    let model = PicModel {
        compressor: ModelParams::<f64>::init(&cfg, seed)?,
        decoder: ModelParams::init(&cfg, seed.wrapping_add(1))?,
        converter: crate::bridge::Converter::affine(16, 16, seed.wrapping_add(2)),
    };
    let samples = generate_corpus(&CorpusSpec::template(seed, 8, 2))?;
    let setup = GradCheckSetup {
        samples: &samples,
        ratio: 2,
        tc_split: 4,
        lambda: 0.5,
        step: 1e-5,
        per_group: 3,
        seed,
    };
    let results = gradient_check(&model, &setup)?;
    let mut out = Vec::new();
    for obj in crate::diagnostics::Objective::ALL {
        let group: Vec<_> = results.iter().filter(|r| r.objective == obj).collect();
        let worst = group
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("at least one group");
        let passed = group.iter().all(|r| r.max_rel_err < tolerance);
        out.push(check(
            &format!("gradient_{}", serde_json::to_value(obj)?.as_str().unwrap_or("?")),
            passed,
            format!(
                "{} groups, worst {} at {:.2e}",
                group.len(),
                worst.group,
                worst.max_rel_err
            ),
        ));
    }
    Ok(out)
}

/// The whole invariant suite.
pub fn run_verify(cfg: &RunConfig, arts: &mut Artifacts) -> Result<(PathBuf, Vec<Check>)> {
    let path = arts.claim("verify", "json")?;
    let mut checks = vec![verify_masks(64)?];
    checks.extend(verify_dependencies(cfg.seed())?);
    checks.extend(verify_gradients(cfg.seed(), 1e-5)?);
    fs::write(&path, serde_json::to_string_pretty(&checks)?).map_err(|e| Error::io(&path, e))?;
    Ok((path, checks))
}
