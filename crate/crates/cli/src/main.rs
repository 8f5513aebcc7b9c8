use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pic_core::compressor::Paradigm;
use pic_core::diagnostics::{EmbeddingSource, HeatmapKind};
use pic_core::pipeline::{self, Artifacts, RunConfig};
use pic_core::Error;

#[derive(Parser, Debug)]
#[command(name = "pic", version, about = "Soft-prompt context compression with a block-wise causal mask")]
struct Cli {
    #[command(flatten)]
    global: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override the JSON config.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    seq_len: Option<usize>,
    #[arg(long, global = true)]
    ratio: Option<usize>,
    /// Compression mask used for training and evaluation.
    #[arg(long, global = true, value_name = "pic|direct")]
    mask: Option<Paradigm>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    tc_split: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    corpus_count: Option<usize>,
    #[arg(long, global = true)]
    freeze_decoder: bool,
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Checkpoint to load; a freshly initialized model otherwise.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Raw bytes to compress (first seq-len bytes are used).
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Corpus sample used when no input file is given.
    #[arg(long, default_value_t = 0)]
    sample: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train compressor and decoder; writes the log and a checkpoint.
    Train,
    /// Compress one context into a memory file.
    Compress {
        #[command(flatten)]
        io: InputArgs,
        #[arg(long, value_name = "pic|direct|iterative")]
        paradigm: Option<Paradigm>,
    },
    /// Compress a context and regenerate it greedily.
    Reconstruct {
        #[command(flatten)]
        io: InputArgs,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Reconstruction accuracy and completion NLL over the corpus.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        free_running: bool,
        #[arg(long)]
        held_out: bool,
    },
    /// Attention or cosine-similarity map between memory and context.
    Heatmap {
        #[command(flatten)]
        io: InputArgs,
        #[arg(long, value_name = "attention|cosine")]
        kind: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        /// Single head; heads are averaged when omitted.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long, value_name = "input|hidden")]
        source: Option<String>,
        #[arg(long, value_name = "pic|direct|iterative")]
        paradigm: Option<Paradigm>,
    },
    /// Compression latency against the number of memory slots.
    Bench {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        paradigms: Option<Vec<Paradigm>>,
        #[arg(long, value_delimiter = ',')]
        chunks: Option<Vec<usize>>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        /// Iterative scheme to time.
        #[arg(long, value_name = "final-states|memory-states")]
        history: Option<String>,
    },
    /// Mask oracle, dependency matrices and gradient checks.
    Verify,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Compress { .. } => "compress",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Eval { .. } => "eval",
            Command::Heatmap { .. } => "heatmap",
            Command::Bench { .. } => "bench",
            Command::Verify => "verify",
        }
    }
}

fn parse_kind(s: &str) -> pic_core::Result<HeatmapKind> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config("kind", format!("unknown heatmap kind `{s}`")))
}

fn parse_source(s: &str) -> pic_core::Result<EmbeddingSource> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::config("source", format!("unknown embedding source `{s}`")))
}

/// File values first, then flags on top.
fn build_config(o: &Overrides, command: &Command) -> pic_core::Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = o.seed {
        cfg.training.seed = v;
    }
    if let Some(v) = o.seq_len {
        cfg.corpus.seq_len = v;
    }
    if let Some(v) = o.ratio {
        cfg.training.ratio = v;
    }
    if let Some(v) = o.mask {
        cfg.training.mask_mode = v;
    }
    for m in std::iter::once(&mut cfg.model).chain(cfg.decoder.as_mut()) {
        if let Some(v) = o.layers {
            m.n_layers = v;
        }
        if let Some(v) = o.heads {
            m.n_heads = v;
        }
        if let Some(v) = o.d_model {
            m.d_model = v;
            m.d_ff = 4 * v;
        }
    }
    if let Some(v) = o.steps {
        cfg.training.steps = v;
    }
    if let Some(v) = o.lr {
        cfg.training.lr = v;
    }
    if let Some(v) = o.lambda {
        cfg.training.lambda = v;
    }
    if let Some(v) = o.tc_split {
        cfg.training.tc_split = Some(v);
    }
    if let Some(v) = o.batch_size {
        cfg.training.batch_size = v;
    }
    if let Some(v) = o.corpus_count {
        cfg.corpus.count = v;
    }
    if o.freeze_decoder {
        cfg.training.freeze_decoder = true;
    }
    match command {
        Command::Eval {
            samples,
            free_running,
            held_out,
            ..
        } => {
            if let Some(v) = samples {
                cfg.eval.samples = *v;
            }
            cfg.eval.free_running |= free_running;
            cfg.eval.held_out |= held_out;
        }
        Command::Heatmap {
            io,
            kind,
            layer,
            head,
            source,
            paradigm,
        } => {
            if let Some(v) = kind {
                cfg.heatmap.kind = parse_kind(v)?;
            }
            if let Some(v) = layer {
                cfg.heatmap.layer = *v;
            }
            if head.is_some() {
                cfg.heatmap.head = *head;
            }
            if let Some(v) = source {
                cfg.heatmap.source = parse_source(v)?;
            }
            if let Some(v) = paradigm {
                cfg.heatmap.paradigm = *v;
            }
            cfg.heatmap.sample = io.sample;
        }
        Command::Bench {
            paradigms,
            chunks,
            repetitions,
            warmup,
            history,
            ..
        } => {
            if let Some(v) = history {
                cfg.bench.history = serde_json::from_value(serde_json::Value::String(v.clone()))
                    .map_err(|_| Error::config("history", format!("unknown iterative scheme `{v}`")))?;
            }
            if let Some(v) = paradigms {
                cfg.bench.paradigms = v.clone();
            }
            if let Some(v) = chunks {
                cfg.bench.chunks = v.clone();
            }
            if let Some(v) = repetitions {
                cfg.bench.repetitions = *v;
            }
            if let Some(v) = warmup {
                cfg.bench.warmup = *v;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> pic_core::Result<bool> {
    let started = Instant::now();
    let hash = cfg.config_hash();
    let mut arts = Artifacts::new(&cfg.out_dir, &hash, cli.global.force)?;
    let mut ok = true;
    match &cli.command {
        Command::Train => {
            let out = pipeline::run_train(cfg, &mut arts)?;
            if let Some(last) = out.last {
                println!(
                    "step {} tr {:.4} tc {:.4} combined {:.4}",
                    last.step, last.loss.tr, last.loss.tc, last.loss.combined
                );
            }
            println!("log {}", out.log.display());
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Compress { io, paradigm } => {
            let model = pipeline::model_for(cfg, io.checkpoint.as_deref())?;
            let x = pipeline::select_input(cfg, io.input.as_deref(), io.sample)?;
            let p = paradigm.unwrap_or(cfg.training.mask_mode);
            let path = pipeline::run_compress(cfg, &mut arts, &model, &x, p)?;
            println!("memory {}", path.display());
        }
        Command::Reconstruct { io, max_len } => {
            let model = pipeline::model_for(cfg, io.checkpoint.as_deref())?;
            let x = pipeline::select_input(cfg, io.input.as_deref(), io.sample)?;
            let max_len = max_len.unwrap_or(cfg.seq_len());
            let (path, text) = pipeline::run_reconstruct(cfg, &mut arts, &model, &x, max_len)?;
            println!("{}", String::from_utf8_lossy(&text));
            println!("output {}", path.display());
        }
        Command::Eval { checkpoint, .. } => {
            let model = pipeline::model_for(cfg, Some(checkpoint))?;
            let (path, reports) = pipeline::run_eval(cfg, &mut arts, &model)?;
            for r in &reports {
                println!("{} {:.6} (n={})", r.metric, r.value, r.n_samples);
            }
            println!("report {}", path.display());
        }
        Command::Heatmap { io, .. } => {
            let model = pipeline::model_for(cfg, io.checkpoint.as_deref())?;
            let x = pipeline::select_input(cfg, io.input.as_deref(), io.sample)?;
            for p in pipeline::run_heatmap(cfg, &mut arts, &model, &x)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Bench { checkpoint, .. } => {
            let model = pipeline::model_for(cfg, checkpoint.as_deref())?;
            let path = pipeline::run_bench(cfg, &mut arts, &model.compressor)?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?);
            println!("csv {}", path.display());
        }
        Command::Verify => {
            let (path, checks) = pipeline::run_verify(cfg, &mut arts)?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("report {}", path.display());
            ok = checks.iter().all(|c| c.passed);
        }
    }
    let manifest = pipeline::write_manifest(cfg, &mut arts, cli.command.name(), started)?;
    println!("manifest {}", manifest.display());
    Ok(ok)
}

fn is_validation(e: &Error) -> bool {
    matches!(e, Error::Config { .. } | Error::Divisibility { .. })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli.global, &cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if is_validation(&e) || matches!(e, Error::Io { .. }) { 2 } else { 1 });
        }
    };
    match run(&cli, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
