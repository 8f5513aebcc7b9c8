//! Analyses over compressors: memory→context attention and cosine maps,
//! pairwise memory similarity, receptive-field matrices, latency scaling
//! and finite-difference gradient checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compressor::{compress, IterativeHistory, Paradigm};
use crate::error::{Error, Result};
use crate::masking::{build_block_causal_mask, build_full_causal_mask, partition_chunks};
use crate::tensor::gradcheck::{central_difference, relative_error};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{TokenSequence, BYTE_TOKENS};
use crate::training::{sample_losses, PicModel};
use crate::transformer::{embed, forward, ModelParams, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapKind {
    Attention,
    Cosine,
}

/// `[N × L]` map from memory slots to context positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub kind: HeatmapKind,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    /// Set when some cosine involved a zero-norm vector (those cells are 0).
    pub zero_norm: bool,
}

/// Min/max written next to a PGM so the grey levels can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub kind: HeatmapKind,
    pub min: f64,
    pub max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl Heatmap {
    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.cols + j]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.cols..(t + 1) * self.cols]
    }

    /// Each row divided by its sum; all-zero rows stay zero.
    pub fn renormalized(&self) -> Heatmap {
        let mut out = self.clone();
        for t in 0..self.rows {
            let s: f64 = self.row(t).iter().sum();
            if s > 0.0 {
                for v in &mut out.values[t * self.cols..(t + 1) * self.cols] {
                    *v /= s;
                }
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.rows {
            let line: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain PGM scaled linearly from the map's min (black) to max (white).
    pub fn to_pgm(&self) -> (String, PgmScale) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if max > min { max - min } else { 1.0 };
        let mut s = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for t in 0..self.rows {
            let line: Vec<String> = self
                .row(t)
                .iter()
                .map(|v| (((v - min) / span) * 255.0).round().to_string())
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        let scale = PgmScale {
            kind: self.kind,
            min,
            max,
            rows: self.rows,
            cols: self.cols,
        };
        (s, scale)
    }

    /// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let (pgm, scale) = self.to_pgm();
        let files = [
            (format!("{stem}.csv"), self.to_csv()),
            (format!("{stem}.pgm"), pgm),
            (format!("{stem}.json"), serde_json::to_string_pretty(&scale)?),
        ];
        let mut paths = Vec::new();
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            paths.push(p);
        }
        Ok(paths)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Head(usize),
    Mean,
}

/// Attention of memory rows over context columns in one layer of a
/// single-pass compression (`Pic` or `Direct`).
pub fn attention_heatmap<T: Scalar>(
    params: &ModelParams<T>,
    x: &TokenSequence,
    chunks: usize,
    paradigm: Paradigm,
    layer: usize,
    head: HeadSelect,
) -> Result<Heatmap> {
    let cfg = &params.config;
    if layer >= cfg.n_layers {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            size: cfg.n_layers,
        });
    }
    if let HeadSelect::Head(h) = head {
        if h >= cfg.n_heads {
            return Err(Error::Index {
                what: "head",
                index: h,
                size: cfg.n_heads,
            });
        }
    }
    let len = x.len();
    let mask = match paradigm {
        Paradigm::Pic => build_block_causal_mask(len, chunks)?,
        Paradigm::Direct => build_full_causal_mask(len, chunks)?,
        Paradigm::Iterative => {
            return Err(Error::Contract(
                "attention heatmaps need a single-pass paradigm".into(),
            ))
        }
    };
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let input = embed(&mut tape, &pv, &[Segment::Tokens(&x.ids), Segment::Memory(0..chunks)])?;
    let positions: Vec<usize> = (0..len + chunks).collect();
    let out = forward(&mut tape, &pv, input, &positions, &mask)?;

    let heads: Vec<usize> = match head {
        HeadSelect::Head(h) => vec![h],
        HeadSelect::Mean => (0..cfg.n_heads).collect(),
    };
    let mut values = vec![0.0; chunks * len];
    for &h in &heads {
        let w = tape.value(out.attn[layer][h]);
        for t in 0..chunks {
            for (j, v) in w.row(len + t)[..len].iter().enumerate() {
                values[t * len + j] += v.to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    if heads.len() > 1 {
        let inv = 1.0 / heads.len() as f64;
        values.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Heatmap {
        kind: HeatmapKind::Attention,
        rows: chunks,
        cols: len,
        values,
        zero_norm: false,
    })
}

/// Entry `(t, j)` is `cos(h_t, e_j)`. Zero-norm vectors give 0 and set the flag.
pub fn cosine_map<T: Scalar>(memory: &Tensor<T>, context: &Tensor<T>) -> Result<Heatmap> {
    if memory.cols() != context.cols() {
        return Err(Error::shape("cosine_map", memory.shape(), context.shape()));
    }
    let to64 = |r: &[T]| -> Vec<f64> { r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect() };
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let (n, l) = (memory.rows(), context.rows());
    let ctx: Vec<Vec<f64>> = (0..l).map(|j| to64(context.row(j))).collect();
    let ctx_norm: Vec<f64> = ctx.iter().map(|c| norm(c)).collect();
    let mut values = Vec::with_capacity(n * l);
    let mut zero_norm = false;
    for t in 0..n {
        let h = to64(memory.row(t));
        let hn = norm(&h);
        for j in 0..l {
            if hn == 0.0 || ctx_norm[j] == 0.0 {
                zero_norm = true;
                values.push(0.0);
            } else {
                let dot: f64 = h.iter().zip(&ctx[j]).map(|(a, b)| a * b).sum();
                values.push((dot / (hn * ctx_norm[j])).clamp(-1.0, 1.0));
            }
        }
    }
    Ok(Heatmap {
        kind: HeatmapKind::Cosine,
        rows: n,
        cols: l,
        values,
        zero_norm,
    })
}

/// What the memory rows are compared against in a cosine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    /// Rows of the token embedding table.
    #[default]
    Input,
    /// Final-layer states of the context positions in the PIC pass.
    Hidden,
}

pub fn context_embeddings<T: Scalar>(
    params: &ModelParams<T>,
    x: &TokenSequence,
    chunks: usize,
    source: EmbeddingSource,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let ctx = embed(&mut tape, &pv, &[Segment::Tokens(&x.ids)])?;
    let v = match source {
        EmbeddingSource::Input => ctx,
        EmbeddingSource::Hidden => {
            let len = x.len();
            let input = embed(&mut tape, &pv, &[Segment::Rows(ctx), Segment::Memory(0..chunks)])?;
            let positions: Vec<usize> = (0..len + chunks).collect();
            let mask = build_block_causal_mask(len, chunks)?;
            let out = forward(&mut tape, &pv, input, &positions, &mask)?;
            tape.slice_rows(out.hidden, 0, len)?
        }
    };
    Ok(tape.value(v).clone())
}

/// Normalized histogram of pairwise cosines between memory rows of each
/// sample, over `bins` equal bins on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    pub pairs: usize,
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
}

impl SimilarityHistogram {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,mass\n");
        for (i, m) in self.masses.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], m);
        }
        s
    }
}

/// All `i < j` cosines of the rows of `h`.
pub fn pairwise_cosines<T: Scalar>(h: &Tensor<T>) -> Result<Vec<f64>> {
    let n = h.rows();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 memory rows, got {n}")));
    }
    let map = cosine_map(h, h)?;
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(map.at(i, j));
        }
    }
    Ok(out)
}

/// Bin index of `v` in `bins` equal bins over `[-1, 1]`; `1.0` falls in the last bin.
pub fn bin_of(v: f64, bins: usize) -> usize {
    let b = ((v + 1.0) / 2.0 * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

pub fn pairwise_memory_histogram<T: Scalar>(samples: &[Tensor<T>], bins: usize) -> Result<SimilarityHistogram> {
    if bins == 0 {
        return Err(Error::config("bins", "must be at least 1"));
    }
    let mut all = Vec::new();
    for h in samples {
        all.extend(pairwise_cosines(h)?);
    }
    if all.is_empty() {
        return Err(Error::Contract("no samples".into()));
    }
    let mut counts = vec![0usize; bins];
    for &v in &all {
        counts[bin_of(v, bins)] += 1;
    }
    let total = all.len() as f64;
    let mean = all.iter().sum::<f64>() / total;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / total;
    let std = var.sqrt();
    let skew = if std > 0.0 {
        all.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / total
    } else {
        0.0
    };
    Ok(SimilarityHistogram {
        edges: (0..=bins).map(|i| -1.0 + 2.0 * i as f64 / bins as f64).collect(),
        masses: counts.iter().map(|&c| c as f64 / total).collect(),
        pairs: all.len(),
        mean,
        std,
        skew,
    })
}

/// How two memory tensors are compared in a dependency test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Comparison {
    BitExact,
    Tolerance(f64),
}

impl Comparison {
    fn differs<T: Scalar>(self, a: &[T], b: &[T]) -> bool {
        match self {
            Comparison::BitExact => a
                .iter()
                .zip(b)
                .any(|(x, y)| x.to_f64().map(f64::to_bits) != y.to_f64().map(f64::to_bits)),
            Comparison::Tolerance(tol) => a.iter().zip(b).any(|(x, y)| {
                let (x, y) = (x.to_f64().unwrap_or(f64::NAN), y.to_f64().unwrap_or(f64::NAN));
                !((x - y).abs() <= tol)
            }),
        }
    }
}

/// `[N × L]`: entry `(t, j)` says whether perturbing `x_j` changed `h_t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<bool>,
}

impl DependencyMatrix {
    pub fn get(&self, t: usize, j: usize) -> bool {
        self.entries[t * self.cols + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for t in 0..self.rows {
            let line: Vec<&str> = self.entries[t * self.cols..(t + 1) * self.cols]
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Replaces each `x_j` by `(x_j + 1) mod 256`, recompresses, and records
/// which memory rows moved.
pub fn receptive_field_matrix<T: Scalar>(
    params: &ModelParams<T>,
    paradigm: Paradigm,
    x: &TokenSequence,
    chunks: usize,
    comparison: Comparison,
) -> Result<DependencyMatrix> {
    let run = |seq: &TokenSequence| -> Result<Tensor<T>> {
        Ok(compress(params, seq, chunks, paradigm, IterativeHistory::default())?.memory.h)
    };
    let base = run(x)?;
    let len = x.len();
    let mut entries = vec![false; chunks * len];
    for j in 0..len {
        let mut y = x.clone();
        y.ids[j] = (y.ids[j] + 1) % BYTE_TOKENS;
        let h = run(&y)?;
        for t in 0..chunks {
            entries[t * len + j] = comparison.differs(base.row(t), h.row(t));
        }
    }
    Ok(DependencyMatrix {
        rows: chunks,
        cols: len,
        entries,
    })
}

/// Ordinary least squares fit `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("line fit needs at least two paired points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("line fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(LinearFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub paradigm: Paradigm,
    pub n: usize,
    pub median_ms: f64,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// Iterative median time against `N`, when measured.
    pub iterative_fit: Option<LinearFit>,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("paradigm,N,median_ms,passes\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.4},{}", r.paradigm.name(), r.n, r.median_ms, r.passes);
        }
        s
    }

    pub fn medians(&self, paradigm: Paradigm) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.paradigm == paradigm)
            .map(|r| (r.n, r.median_ms))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub seq_len: usize,
    pub chunks: Vec<usize>,
    pub paradigms: Vec<Paradigm>,
    pub warmup: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Iterative scheme being timed.
    pub history: IterativeHistory,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Times untaped compression of one random context per `N`, on the calling
/// thread. Warmup runs are discarded.
pub fn latency_benchmark<T: Scalar>(params: &ModelParams<T>, opts: &BenchOptions) -> Result<LatencyReport> {
    if opts.repetitions == 0 {
        return Err(Error::config("repetitions", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = TokenSequence::new((0..opts.seq_len).map(|_| rng.gen_range(0..BYTE_TOKENS)).collect());
    let mut cells = Vec::new();
    for &paradigm in &opts.paradigms {
        for &n in &opts.chunks {
            partition_chunks(opts.seq_len, n)?;
            cells.push((paradigm, n));
        }
    }
    for _ in 0..opts.warmup {
        for &(paradigm, n) in &cells {
            compress(params, &x, n, paradigm, opts.history)?;
        }
    }
    // round-robin so slow drift of the machine hits every cell alike
    let mut times = vec![Vec::with_capacity(opts.repetitions); cells.len()];
    let mut passes = vec![0; cells.len()];
    for _ in 0..opts.repetitions {
        for (i, &(paradigm, n)) in cells.iter().enumerate() {
            let start = Instant::now();
            let c = compress(params, &x, n, paradigm, opts.history)?;
            times[i].push(start.elapsed().as_secs_f64() * 1e3);
            passes[i] = c.forward_passes;
        }
    }
    let rows = cells
        .into_iter()
        .zip(times.into_iter().zip(passes))
        .map(|((paradigm, n), (t, passes))| LatencyRow {
            paradigm,
            n,
            median_ms: median(t),
            passes,
        })
        .collect();
    let mut report = LatencyReport {
        rows,
        iterative_fit: None,
    };
    let it = report.medians(Paradigm::Iterative);
    if it.len() >= 2 {
        let xs: Vec<f64> = it.iter().map(|&(n, _)| n as f64).collect();
        let ys: Vec<f64> = it.iter().map(|&(_, t)| t).collect();
        report.iterative_fit = Some(fit_line(&xs, &ys)?);
    }
    Ok(report)
}

/// Which objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Reconstruction,
    Completion,
    Combined,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Reconstruction, Objective::Completion, Objective::Combined];
}

/// Worst relative error over the sampled coordinates of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub objective: Objective,
    pub group: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

/// Setup of a finite-difference check over every tensor of a model.
#[derive(Debug, Clone)]
pub struct GradCheckSetup<'a> {
    pub samples: &'a [TokenSequence],
    pub ratio: usize,
    pub tc_split: usize,
    pub lambda: f64,
    pub step: f64,
    /// Coordinates sampled per tensor: this many largest `|grad|` plus this
    /// many uniformly random ones.
    pub per_group: usize,
    pub seed: u64,
}

fn objective_value(
    model: &PicModel<f64>,
    setup: &GradCheckSetup<'_>,
    objective: Objective,
) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let mut params = vars.compressor.all();
    params.extend(vars.decoder.all());
    if let crate::bridge::ConverterVars::Affine { weight, bias } = vars.converter {
        params.extend([weight, bias]);
    }
    let mut trs = Vec::new();
    let mut tcs = Vec::new();
    for x in setup.samples {
        let chunks = x.len() / setup.ratio;
        let (tr, tc) = sample_losses(&mut tape, &vars, x, chunks, setup.tc_split, setup.ratio, Paradigm::Pic)?;
        trs.push(tr);
        tcs.push(tc);
    }
    let inv = 1.0 / setup.samples.len() as f64;
    let tr = {
        let s = tape.concat_rows(&trs)?;
        let s = tape.sum(s);
        tape.scale(s, inv)
    };
    let tc = {
        let s = tape.concat_rows(&tcs)?;
        let s = tape.sum(s);
        tape.scale(s, inv)
    };
    let root = match objective {
        Objective::Reconstruction => tr,
        Objective::Completion => tc,
        Objective::Combined => {
            let a = tape.scale(tc, setup.lambda);
            let b = tape.scale(tr, 1.0 - setup.lambda);
            tape.add(a, b)?
        }
    };
    Ok((tape, root, params))
}

/// Compares tape gradients with central differences for every tensor of
/// `model` and every objective.
pub fn gradient_check(model: &PicModel<f64>, setup: &GradCheckSetup<'_>) -> Result<Vec<GroupCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for objective in Objective::ALL {
        let (tape, root, params) = objective_value(model, setup, objective)?;
        let grads = tape.backward(root)?;
        for (gi, (&var, name)) in params.iter().zip(&names).enumerate() {
            let g = grads.get_or_zeros(var);
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
            let mut coords: Vec<usize> = order.into_iter().take(setup.per_group).collect();
            for _ in 0..setup.per_group {
                coords.push(rng.gen_range(0..g.len()));
            }
            coords.sort_unstable();
            coords.dedup();

            let mut worst = 0.0f64;
            let mut probe = model.clone();
            for &c in &coords {
                let mut values = probe.tensors_mut()[gi].data().to_vec();
                let numeric = central_difference(&mut values, c, setup.step, |v| {
                    probe.tensors_mut()[gi].data_mut().copy_from_slice(v);
                    objective_value(&probe, setup, objective)
                        .map(|(t, r, _)| t.value(r).data()[0])
                        .unwrap_or(f64::NAN)
                });
                probe.tensors_mut()[gi].data_mut().copy_from_slice(&values);
                let err = relative_error(g.data()[c], numeric);
                worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
            }
            out.push(GroupCheck {
                objective,
                group: name.clone(),
                coordinates: coords.len(),
                max_rel_err: worst,
            });
        }
    }
    Ok(out)
}
