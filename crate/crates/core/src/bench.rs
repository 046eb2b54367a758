//! Benchmark harness for the sticky-chain task: experiment configs, grid
//! expansion with matched NFE budgets, seeded parallel execution, CSV/JSON
//! lines output and per-budget hyperparameter selection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::OracleDenoiser;
use crate::error::{Error, Result};
use crate::hmm::{error_counts, StickyChainModel};
use crate::rng::substream;
use crate::samplers::{
    generate_with_rng, ArgmaxScope, Confidence, CorrectorKind, GenerationReport, PredictorKind, SamplerConfig,
};
use crate::schedule::MaskingSchedule;
use crate::sequence::SequenceSpec;

/// Overrides the output directory of every command.
pub const OUT_DIR_ENV: &str = "MASKDIFF_OUT_DIR";

pub const CSV_HEADER: &str = "sampler,nfe,k,tau,h_c,seed,err_mean,err_std,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerLabel {
    NoCorrector,
    ForwardBackward,
    Informed,
    OneAtATime,
}

impl SamplerLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerLabel::NoCorrector => "no_corrector",
            SamplerLabel::ForwardBackward => "forward_backward",
            SamplerLabel::Informed => "informed",
            SamplerLabel::OneAtATime => "one_at_a_time",
        }
    }

    fn id(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub vocab_size: usize,
    pub len: usize,
    pub stickiness: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        Self { vocab_size: 4, len: 128, stickiness: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub samplers: Vec<SamplerLabel>,
    /// Predictor used by every sampler except `one_at_a_time`.
    pub predictor: PredictorKind,
    pub nfe: Vec<usize>,
    pub k: Vec<usize>,
    pub tau: Vec<f64>,
    pub h_c: Vec<f64>,
    pub t_c: f64,
    pub t_min: f64,
    pub confidence: Confidence,
    pub argmax_scope: ArgmaxScope,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            samplers: vec![SamplerLabel::NoCorrector, SamplerLabel::ForwardBackward, SamplerLabel::Informed],
            predictor: PredictorKind::Ancestral,
            nfe: vec![32, 64, 128],
            k: vec![1, 2, 4, 8, 16],
            tau: vec![0.01, 0.1, 0.5, 1.0, 2.0, 4.0],
            h_c: vec![0.01, 0.1, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0],
            t_c: 1.0,
            t_min: 1e-3,
            confidence: Confidence::Margin,
            argmax_scope: ArgmaxScope::MaskedOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub n_seeds: usize,
    /// Chains generated per (cell, seed).
    pub n_samples: usize,
    pub out_dir: PathBuf,
    /// Fill `wall_ms`; off by default so tables are byte-reproducible.
    pub timing: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, n_seeds: 5, n_samples: 64, out_dir: PathBuf::from("results"), timing: false }
    }
}

/// Optional hyperparameter selection on separate seeds before the bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub seed: u64,
    pub n_seeds: usize,
    pub n_samples: usize,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self { seed: 1_000_003, n_seeds: 3, n_samples: 64 }
    }
}

/// Settings for the `sample` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    pub sampler: SamplerConfig,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 8, sampler: SamplerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub chain: ChainSection,
    pub schedule: MaskingSchedule,
    pub grid: GridSection,
    pub run: RunSection,
    pub tuning: Option<TuningSection>,
    pub sample: SampleSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn model(&self) -> Result<StickyChainModel> {
        StickyChainModel::new(self.chain.vocab_size, self.chain.stickiness).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> Result<SequenceSpec> {
        SequenceSpec::new(self.chain.vocab_size, self.chain.len).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        let spec = self.spec()?;
        let g = &self.grid;
        let needs = |label| g.samplers.contains(&label);
        if g.samplers.is_empty() || g.nfe.is_empty() {
            return Err(Error::Config("grid needs at least one sampler and one NFE budget".into()));
        }
        if needs(SamplerLabel::Informed) && (g.k.is_empty() || g.tau.is_empty()) {
            return Err(Error::Config("informed sampler needs non-empty k and tau grids".into()));
        }
        if needs(SamplerLabel::ForwardBackward) && g.h_c.is_empty() {
            return Err(Error::Config("forward-backward sampler needs a non-empty h_c grid".into()));
        }
        if self.run.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be positive".into()));
        }
        if let Some(t) = &self.tuning {
            if t.n_seeds == 0 || t.n_samples == 0 {
                return Err(Error::Config("tuning needs positive n_seeds and n_samples".into()));
            }
        }
        for cell in self.cells()? {
            cell.config.validate(spec)?;
        }
        self.sample.sampler.validate(spec)?;
        Ok(())
    }

    fn base_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            predictor: self.grid.predictor,
            t_c: self.grid.t_c,
            t_min: self.grid.t_min,
            confidence: self.grid.confidence,
            argmax_scope: self.grid.argmax_scope,
            schedule: self.schedule,
            final_argmax: true,
            ..SamplerConfig::default()
        }
    }

    /// Cartesian grid: informed cells span `k x tau`, forward-backward
    /// cells span `h_c`, the rest have no free hyperparameter.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let g = &self.grid;
        let base = self.base_sampler();
        let mut cells = Vec::new();
        for &label in &g.samplers {
            for &nfe in &g.nfe {
                let mut push = |k: Option<usize>, tau: Option<f64>, h_c: Option<f64>| -> Result<()> {
                    let mut c = base;
                    if let Some(k) = k {
                        c.k = k;
                    }
                    if let Some(tau) = tau {
                        c.tau = tau;
                    }
                    if let Some(h) = h_c {
                        c.h_c = h;
                    }
                    cells.push(Cell::resolve(label, nfe, c, k, tau, h_c)?);
                    Ok(())
                };
                match label {
                    SamplerLabel::Informed => {
                        for &k in &g.k {
                            for &tau in &g.tau {
                                push(Some(k), Some(tau), None)?;
                            }
                        }
                    }
                    SamplerLabel::ForwardBackward => {
                        for &h in &g.h_c {
                            push(None, None, Some(h))?;
                        }
                    }
                    _ => push(None, None, None)?,
                }
            }
        }
        Ok(cells)
    }

    /// Output directory after the environment override.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.run.out_dir.clone(),
        }
    }
}

/// One concrete sampler setting at one NFE budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub label: SamplerLabel,
    /// Predictor plus corrector evaluations allowed.
    pub budget: usize,
    /// Evaluations actually spent, including the final argmax, which the
    /// budget does not count.
    pub nfe: usize,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub h_c: Option<f64>,
    pub config: SamplerConfig,
}

impl Cell {
    /// Picks the largest number of predictor steps whose predictor and
    /// corrector evaluations fit the budget.
    pub fn resolve(
        label: SamplerLabel,
        budget: usize,
        mut config: SamplerConfig,
        k: Option<usize>,
        tau: Option<f64>,
        h_c: Option<f64>,
    ) -> Result<Self> {
        match label {
            SamplerLabel::NoCorrector => config.corrector = CorrectorKind::None,
            SamplerLabel::ForwardBackward => config.corrector = CorrectorKind::ForwardBackward,
            SamplerLabel::Informed => config.corrector = CorrectorKind::Informed,
            SamplerLabel::OneAtATime => {
                config.corrector = CorrectorKind::None;
                config.predictor = PredictorKind::OneAtATime;
            }
        }
        config.corrector_steps = 1;
        let mut best = None;
        for steps in 1..=budget {
            config.steps = steps;
            let nfe = config.expected_nfe();
            if nfe - usize::from(config.final_argmax) > budget {
                break;
            }
            best = Some((steps, nfe));
        }
        let Some((steps, nfe)) = best else {
            return Err(Error::Config(format!("NFE budget {budget} too small for {}", label.as_str())));
        };
        config.steps = steps;
        Ok(Self { label, budget, nfe, k, tau, h_c, config })
    }

    fn stream_key(&self) -> [u64; 5] {
        [
            self.label.id(),
            self.budget as u64,
            self.k.map_or(u64::MAX, |k| k as u64),
            self.tau.map_or(u64::MAX, f64::to_bits),
            self.h_c.map_or(u64::MAX, f64::to_bits),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sampler: SamplerLabel,
    pub nfe: usize,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub h_c: Option<f64>,
    pub seed: usize,
    /// Pooled error rate over every adjacent pair of every chain.
    pub err_mean: f64,
    /// Spread of the per-chain error rates.
    pub err_std: f64,
    pub wall_ms: f64,
}

/// Runs `n_samples` chains of one cell under seed index `seed_index`.
/// Chain `i` draws from the stream `(master, cell, seed_index, i)`.
pub fn run_cell_seed(
    cell: &Cell,
    model: &StickyChainModel,
    spec: SequenceSpec,
    master: u64,
    seed_index: usize,
    n_samples: usize,
    timing: bool,
) -> Result<(ResultRow, Vec<GenerationReport>)> {
    let oracle = OracleDenoiser::new(model.clone());
    let start = Instant::now();
    let key = cell.stream_key();
    let mut reports = Vec::with_capacity(n_samples);
    for chain in 0..n_samples {
        let mut rng = substream(master, &[key[0], key[1], key[2], key[3], key[4], seed_index as u64, chain as u64]);
        let report = generate_with_rng(&cell.config, &oracle, spec, false, &mut rng)?;
        if report.nfe != cell.nfe {
            return Err(Error::Contract(format!("cell promised {} evaluations, run used {}", cell.nfe, report.nfe)));
        }
        reports.push(report);
    }
    let wall_ms = if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    let samples: Vec<_> = reports.iter().map(|r| r.sample.clone()).collect();
    let (errors, pairs) = error_counts(&samples, model)?;
    let err_mean = if pairs == 0 { 0.0 } else { errors as f64 / pairs as f64 };
    let mut per_chain = Vec::with_capacity(samples.len());
    for s in &samples {
        let (e, p) = error_counts(std::slice::from_ref(s), model)?;
        per_chain.push(if p == 0 { 0.0 } else { e as f64 / p as f64 });
    }
    let row = ResultRow {
        sampler: cell.label,
        nfe: cell.nfe,
        k: cell.k,
        tau: cell.tau,
        h_c: cell.h_c,
        seed: seed_index,
        err_mean,
        err_std: std_dev(&per_chain),
        wall_ms,
    };
    Ok((row, reports))
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Every `(cell, seed)` pair in grid order. Rows do not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn run_grid(
    cells: &[Cell],
    model: &StickyChainModel,
    spec: SequenceSpec,
    master: u64,
    n_seeds: usize,
    n_samples: usize,
    timing: bool,
    jobs: Option<usize>,
) -> Result<Vec<ResultRow>> {
    let tasks: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..n_seeds).map(move |s| (c, s))).collect();
    pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|&(c, s)| run_cell_seed(&cells[c], model, spec, master, s, n_samples, timing).map(|(row, _)| row))
            .collect()
    })
}

/// Mean over seeds of one cell's rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub sampler: SamplerLabel,
    pub nfe: usize,
    pub k: Option<usize>,
    pub tau: Option<f64>,
    pub h_c: Option<f64>,
    pub err_mean: f64,
    /// Standard error of the mean across seeds.
    pub err_se: f64,
    pub n_seeds: usize,
}

impl CellSummary {
    fn same_cell(&self, row: &ResultRow) -> bool {
        self.sampler == row.sampler && self.nfe == row.nfe && self.k == row.k && self.tau == row.tau && self.h_c == row.h_c
    }
}

/// Groups rows by cell, keeping first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<CellSummary> {
    let mut out: Vec<(CellSummary, Vec<f64>)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(s, _)| s.same_cell(row)) {
            Some((_, v)) => v.push(row.err_mean),
            None => out.push((
                CellSummary {
                    sampler: row.sampler,
                    nfe: row.nfe,
                    k: row.k,
                    tau: row.tau,
                    h_c: row.h_c,
                    err_mean: 0.0,
                    err_se: 0.0,
                    n_seeds: 0,
                },
                vec![row.err_mean],
            )),
        }
    }
    out.into_iter()
        .map(|(mut s, v)| {
            s.n_seeds = v.len();
            s.err_mean = v.iter().sum::<f64>() / v.len() as f64;
            s.err_se = std_dev(&v) / (v.len() as f64).sqrt();
            s
        })
        .collect()
}

/// Lowest mean error per `(sampler, nfe)`; ties go to smaller `k`, then
/// smaller `tau`, then smaller `h_c`.
pub fn best_cells(summaries: &[CellSummary]) -> Vec<CellSummary> {
    let key = |s: &CellSummary| (s.k.unwrap_or(0), s.tau.unwrap_or(0.0), s.h_c.unwrap_or(0.0));
    let mut best: Vec<CellSummary> = Vec::new();
    for s in summaries {
        match best.iter_mut().find(|b| b.sampler == s.sampler && b.nfe == s.nfe) {
            Some(b) => {
                let (bk, bt, bh) = key(b);
                let (sk, st, sh) = key(s);
                let better = s.err_mean < b.err_mean
                    || (s.err_mean == b.err_mean && sk.cmp(&bk).then(st.total_cmp(&bt)).then(sh.total_cmp(&bh)).is_lt());
                if better {
                    *b = s.clone();
                }
            }
            None => best.push(s.clone()),
        }
    }
    best
}

fn cell_matches(cell: &Cell, s: &CellSummary) -> bool {
    cell.label == s.sampler && cell.nfe == s.nfe && cell.k == s.k && cell.tau == s.tau && cell.h_c == s.h_c
}

pub fn write_rows<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summaries<W: Write>(rows: &[CellSummary], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("csv: {other:?}")),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<CellSummary>,
    /// Selected cells when a tuning pass ran.
    pub tuned: Option<Vec<CellSummary>>,
}

/// Runs the bench in memory. With a tuning section, each `(sampler, nfe)`
/// first has its hyperparameters picked on the tuning seeds and only the
/// winner is evaluated on the run seeds.
pub fn run_bench(config: &ExperimentConfig, opts: RunOptions) -> Result<BenchOutcome> {
    config.validate()?;
    let model = config.model()?;
    let spec = config.spec()?;
    let master = opts.seed.unwrap_or(config.run.seed);
    let mut cells = config.cells()?;
    let tuned = match &config.tuning {
        Some(t) => {
            let rows = run_grid(&cells, &model, spec, t.seed, t.n_seeds, t.n_samples, false, opts.jobs)?;
            let best = best_cells(&summarize(&rows));
            cells.retain(|c| best.iter().any(|b| cell_matches(c, b)));
            Some(best)
        }
        None => None,
    };
    let rows = run_grid(&cells, &model, spec, master, config.run.n_seeds, config.run.n_samples, config.run.timing, opts.jobs)?;
    let summary = summarize(&rows);
    Ok(BenchOutcome { rows, summary, tuned })
}

/// Writes `results.csv`, the long-format `plot.csv` and, after tuning,
/// `tuned.csv`.
pub fn cmd_bench(config: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<BenchOutcome> {
    let outcome = run_bench(config, opts)?;
    write_rows(&outcome.rows, create(out_dir, "results.csv")?)?;
    write_summaries(&outcome.summary, create(out_dir, "plot.csv")?)?;
    if let Some(t) = &outcome.tuned {
        write_summaries(t, create(out_dir, "tuned.csv")?)?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub best: Vec<CellSummary>,
}

pub fn run_sweep(config: &ExperimentConfig, opts: RunOptions) -> Result<SweepOutcome> {
    config.validate()?;
    let model = config.model()?;
    let spec = config.spec()?;
    let master = opts.seed.unwrap_or(config.run.seed);
    let cells = config.cells()?;
    let rows = run_grid(&cells, &model, spec, master, config.run.n_seeds, config.run.n_samples, config.run.timing, opts.jobs)?;
    let best = best_cells(&summarize(&rows));
    Ok(SweepOutcome { rows, best })
}

/// Writes `sweep.csv` (every cell and seed) and `best.csv`.
pub fn cmd_sweep(config: &ExperimentConfig, out_dir: &Path, opts: RunOptions) -> Result<SweepOutcome> {
    let outcome = run_sweep(config, opts)?;
    write_rows(&outcome.rows, create(out_dir, "sweep.csv")?)?;
    write_summaries(&outcome.best, create(out_dir, "best.csv")?)?;
    Ok(outcome)
}

#[derive(Debug, Serialize)]
struct SampleLine<'a> {
    index: usize,
    tokens: &'a [u32],
    nfe: usize,
    residual_masks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [crate::samplers::StepRecord]>,
}

/// Draws `config.sample.n` sequences with the oracle denoiser. Sample `i`
/// uses the stream `(seed, i)`.
pub fn run_sample(config: &ExperimentConfig, opts: RunOptions, trace: bool) -> Result<Vec<GenerationReport>> {
    config.validate()?;
    let model = config.model()?;
    let spec = config.spec()?;
    let oracle = OracleDenoiser::new(model);
    let master = opts.seed.unwrap_or(config.sample.sampler.seed);
    pool(opts.jobs)?.install(|| {
        (0..config.sample.n)
            .into_par_iter()
            .map(|i| {
                let mut rng = substream(master, &[i as u64]);
                generate_with_rng(&config.sample.sampler, &oracle, spec, trace, &mut rng)
            })
            .collect()
    })
}

pub fn write_samples<W: Write>(reports: &[GenerationReport], mut w: W) -> Result<()> {
    for (index, r) in reports.iter().enumerate() {
        let line = SampleLine {
            index,
            tokens: r.sample.tokens(),
            nfe: r.nfe,
            residual_masks: r.residual_masks,
            trace: r.trace.as_deref(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::InvalidInput(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `samples.jsonl`.
pub fn cmd_sample(config: &ExperimentConfig, out_dir: &Path, opts: RunOptions, trace: bool) -> Result<Vec<GenerationReport>> {
    let reports = run_sample(config, opts, trace)?;
    write_samples(&reports, create(out_dir, "samples.jsonl")?)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.chain.len = 32;
        c.grid.nfe = vec![16];
        c.grid.k = vec![1, 2];
        c.grid.tau = vec![0.1, 1.0];
        c.grid.h_c = vec![0.5];
        c.run.n_seeds = 2;
        c.run.n_samples = 4;
        c
    }

    #[test]
    fn defaults_are_the_standard_grids() {
        let c = ExperimentConfig::default();
        assert_eq!(c.grid.k, vec![1, 2, 4, 8, 16]);
        assert_eq!(c.grid.tau, vec![0.01, 0.1, 0.5, 1.0, 2.0, 4.0]);
        assert_eq!(c.cells().unwrap().len(), 3 * (1 + 9 + 30));
        c.validate().unwrap();
    }

    #[test]
    fn budgets_are_matched() {
        for cell in ExperimentConfig::default().cells().unwrap() {
            assert_eq!(cell.nfe, cell.budget + 1, "{cell:?}");
            assert_eq!(cell.config.expected_nfe(), cell.nfe);
        }
        let cell = Cell::resolve(SamplerLabel::Informed, 3, SamplerConfig { t_c: 1.0, ..Default::default() }, Some(1), Some(1.0), None).unwrap();
        assert_eq!((cell.config.steps, cell.nfe), (1, 3));
        assert!(Cell::resolve(SamplerLabel::Informed, 1, SamplerConfig::default(), None, None, None).is_err());
    }

    #[test]
    fn toml_round_trip_and_errors() {
        let text = r#"
            schedule = "linear"
            [chain]
            len = 16
            [grid]
            samplers = ["informed"]
            nfe = [8]
            k = [1]
            tau = [0.5]
            [run]
            n_seeds = 1
            n_samples = 2
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.schedule, MaskingSchedule::Linear);
        assert_eq!(c.cells().unwrap().len(), 1);
        assert!(matches!(ExperimentConfig::from_toml("[chain]\nbogus = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[grid]\nk = [0]"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[chain]\nstickiness = 1.5"), Err(Error::Config(_))));
    }

    #[test]
    fn grid_rows_independent_of_jobs() {
        let c = small();
        let a = run_sweep(&c, RunOptions { seed: None, jobs: Some(1) }).unwrap();
        let b = run_sweep(&c, RunOptions { seed: None, jobs: Some(3) }).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), c.cells().unwrap().len() * 2);
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_rows(&a.rows, &mut buf_a).unwrap();
        write_rows(&b.rows, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        assert!(String::from_utf8(buf_a).unwrap().starts_with(CSV_HEADER));
    }

    #[test]
    fn adding_cells_keeps_existing_streams() {
        let c = small();
        let mut wider = c.clone();
        wider.grid.tau.push(4.0);
        let a = run_sweep(&c, RunOptions::default()).unwrap().rows;
        let b = run_sweep(&wider, RunOptions::default()).unwrap().rows;
        for row in &a {
            assert!(b.contains(row));
        }
    }

    #[test]
    fn aggregation_matches_raw_samples() {
        let c = small();
        let model = c.model().unwrap();
        let cell = c.cells().unwrap()[0];
        let (row, reports) = run_cell_seed(&cell, &model, c.spec().unwrap(), 5, 0, 6, false).unwrap();
        let samples: Vec<_> = reports.iter().map(|r| r.sample.clone()).collect();
        assert_eq!(row.err_mean, crate::hmm::error_rate(&samples, &model).unwrap());
        assert!((0.0..=1.0).contains(&row.err_mean) && row.err_std >= 0.0);
    }

    #[test]
    fn best_cell_tie_break() {
        let mk = |k, tau, err| CellSummary {
            sampler: SamplerLabel::Informed,
            nfe: 8,
            k: Some(k),
            tau: Some(tau),
            h_c: None,
            err_mean: err,
            err_se: 0.0,
            n_seeds: 1,
        };
        let best = best_cells(&[mk(4, 0.1, 0.0), mk(2, 1.0, 0.0), mk(2, 0.5, 0.0), mk(1, 0.1, 0.2)]);
        assert_eq!(best.len(), 1);
        assert_eq!((best[0].k, best[0].tau), (Some(2), Some(0.5)));
        let one = best_cells(&[mk(8, 2.0, 0.3)]);
        assert_eq!(one[0], mk(8, 2.0, 0.3));
    }

    #[test]
    fn sample_count_and_masks() {
        let mut c = small();
        c.sample.n = 0;
        assert!(run_sample(&c, RunOptions::default(), true).unwrap().is_empty());
        c.sample.n = 3;
        let reports = run_sample(&c, RunOptions::default(), true).unwrap();
        for r in &reports {
            assert!(!r.sample.has_mask());
            assert_eq!(r.trace.as_ref().unwrap().len(), r.nfe);
        }
        let mut buf = Vec::new();
        write_samples(&reports, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }
}
