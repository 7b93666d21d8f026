//! Command-line front end: corpus generation, solving, training,
//! prediction, noise sweeps, figure data and threshold reports.
//!
//! Exit codes: 0 success, 1 convergence or threshold failure, 2 usage or
//! I/O error. Every artifact-producing command writes one run manifest next
//! to its primary output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    build_grid, export_csv, generate_corrected_corpus, generate_naive_corpus, load_corpus, save_corpus, AlphaScheme,
    CorrectedBudget, GridConfig, SingularPolicy, Task,
};
use crate::decompose::{expand_five_piece, solve_xzx, XzxAngles};
use crate::error::{Error, Result};
use crate::neuralnet::{
    evaluate_naive, examples, mean_cost, naive_slices, predict_corrected, predict_naive, train, BinMode,
    Mlp, TrainConfig, TrainedModel,
};
use crate::pulsesim::{
    evolve_sequence_with, log_grid, log_log_slope, noise_sweep, read_sequence_csv, write_sequence_csv, write_sweep_csv,
    ChargeCoupling, NoiseAxis, NoisePoint, PulseSequence, SweepPoint, SLOPE_WINDOW,
};
use crate::su2::{gate_error, AxisAngle};
use crate::supcode::{expand_corrected, synthesize, SynthConfig, SynthOutcome, DEFAULT_JMAX};

pub const SEED_ENV: &str = "PULSEFORGE_SEED";

#[derive(Debug, Parser, Serialize)]
#[command(name = "pulseforge", version, about = "Composite pulse compiler and trainer for singlet-triplet qubits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Solve a rotation for its naive or corrected pulse sequence.
    Solve(SolveArgs),
    /// Generate a training corpus.
    GenDataset(GenArgs),
    /// Train a network on a corpus.
    Train(TrainArgs),
    /// Predict a pulse sequence with a trained network.
    Predict(PredictArgs),
    /// Sweep one noise axis over a sequence.
    Sweep(SweepArgs),
    /// Check learning curves and sweeps against acceptance thresholds.
    Report(ReportArgs),
    /// Naive-versus-corrected noise sweeps for the two reference rotations.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Naive,
    Corrected,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Naive => Task::Naive,
            TaskArg::Corrected => Task::Corrected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxisArg {
    Hyperfine,
    Charge,
}

impl From<AxisArg> for NoiseAxis {
    fn from(a: AxisArg) -> NoiseAxis {
        match a {
            AxisArg::Hyperfine => NoiseAxis::Hyperfine,
            AxisArg::Charge => NoiseAxis::Charge,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingArg {
    Proportional,
    Gated,
}

impl From<CouplingArg> for ChargeCoupling {
    fn from(c: CouplingArg) -> ChargeCoupling {
        match c {
            CouplingArg::Proportional => ChargeCoupling::Proportional,
            CouplingArg::Gated => ChargeCoupling::Gated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Cosine,
    Uniform,
    UniformCos,
}

impl From<SchemeArg> for AlphaScheme {
    fn from(s: SchemeArg) -> AlphaScheme {
        match s {
            SchemeArg::Cosine => AlphaScheme::Cosine,
            SchemeArg::Uniform => AlphaScheme::Uniform,
            SchemeArg::UniformCos => AlphaScheme::UniformCos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinModeArg {
    AverageData,
    AverageGradient,
}

impl From<BinModeArg> for BinMode {
    fn from(b: BinModeArg) -> BinMode {
        match b {
            BinModeArg::AverageData => BinMode::AverageData,
            BinModeArg::AverageGradient => BinMode::AverageGradient,
        }
    }
}

/// Exactly one way of naming the target gate.
#[derive(Debug, Clone, Args, Serialize)]
#[group(required = true, multiple = false)]
pub struct TargetArgs {
    /// Rotation as α β θ (radians).
    #[arg(long, num_args = 3, value_names = ["ALPHA", "BETA", "THETA"], allow_negative_numbers = true)]
    pub rotation: Option<Vec<f64>>,
    /// Naive decomposition angles φa φb φc (radians).
    #[arg(long, num_args = 3, value_names = ["PHI_A", "PHI_B", "PHI_C"], allow_negative_numbers = true)]
    pub angles: Option<Vec<f64>>,
    /// CSV of targets with header `alpha,beta,theta` or `phi_a,phi_b,phi_c`.
    #[arg(long)]
    pub batch: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Exchange ceiling (units of h).
    #[arg(long, default_value_t = DEFAULT_JMAX)]
    pub jmax: f64,
    /// Acceptance threshold on the residual ∞-norm.
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Random restarts after the supplied seeds.
    #[arg(long, default_value_t = 100)]
    pub restarts: usize,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig { jmax: self.jmax, tolerance: self.tol, random_restarts: self.restarts, seed, ..SynthConfig::default() }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    /// Synthesize the noise-correcting sequence instead of the naive one.
    #[arg(long)]
    pub corrected: bool,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Sequence CSV, or the per-row status CSV in batch mode.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long, env = SEED_ENV)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a CSV export with raw and normalized columns.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Corrected task: grid points attempted.
    #[arg(long, default_value_t = 2000)]
    pub max_points: usize,
    /// Naive task: drop records at singular points.
    #[arg(long)]
    pub exclude_singular: bool,
    #[arg(long, value_enum, default_value_t = SchemeArg::Cosine)]
    pub alpha_scheme: SchemeArg,
    #[command(flatten)]
    pub synth: SynthArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, env = SEED_ENV)]
    pub seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Learning-curve CSV (default: checkpoint path with `.curve.csv`).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 100)]
    pub neurons: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub bin_size: usize,
    #[arg(long, value_enum, default_value_t = BinModeArg::AverageData)]
    pub bin_mode: BinModeArg,
    /// Train on a seeded subsample of this many records.
    #[arg(long)]
    pub records: Option<usize>,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    /// Points per naive evaluation slice.
    #[arg(long, default_value_t = 101)]
    pub eval_points: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub target: TargetArgs,
    /// Sequence CSV, or the prediction table in batch mode.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    #[arg(long, default_value_t = 1e-4)]
    pub lo: f64,
    #[arg(long, default_value_t = 0.1)]
    pub hi: f64,
    #[arg(long, default_value_t = 31)]
    pub points: usize,
    #[arg(long, value_enum, default_value_t = CouplingArg::Proportional)]
    pub coupling: CouplingArg,
    /// Label for the `sequence_id` column (default: file stem).
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Learning-curve CSVs to check.
    #[arg(long, num_args = 1..)]
    pub curve: Vec<PathBuf>,
    /// Metric column checked in learning curves.
    #[arg(long, default_value = "mean")]
    pub metric: String,
    /// Upper bound on the final metric value.
    #[arg(long, default_value_t = 1e-2)]
    pub threshold: f64,
    /// Epochs at which the metric must strictly decrease.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 50, 200])]
    pub checkpoints: Vec<usize>,
    /// Sweep CSVs with `naive` and `corrected` sequence ids.
    #[arg(long, num_args = 1..)]
    pub sweep: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 31)]
    pub points: usize,
    #[command(flatten)]
    pub synth: SynthArgs,
}

/// Whether a command's checks passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    Failure,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::Failure => 1,
        }
    }
}

/// Exit code for an error: convergence and divergence are failures (1),
/// everything else is a usage or I/O problem (2).
pub fn error_exit_code(e: &Error) -> u8 {
    match e {
        Error::NoConvergence { .. } | Error::Diverged { .. } => 1,
        _ => 2,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sha256 = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok(FileDigest { path: path.to_path_buf(), sha256 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_seconds: f64,
}

/// `<primary>.manifest.json`, or `<dir>/manifest.json` for a directory.
pub fn manifest_path(primary: &Path) -> PathBuf {
    if primary.is_dir() {
        primary.join("manifest.json")
    } else {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

struct Recorder {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Recorder {
    fn new<T: Serialize>(command: &'static str, args: &T, seeds: Vec<u64>) -> Result<Self> {
        Ok(Self { command, config: serde_json::to_value(args)?, seeds, inputs: vec![], outputs: vec![], started: Instant::now() })
    }

    fn finish(self, primary: &Path) -> Result<RunManifest> {
        let digest_all = |v: &[PathBuf]| v.iter().map(|p| digest_file(p)).collect::<Result<Vec<_>>>();
        let manifest = RunManifest {
            command: self.command.into(),
            config: self.config,
            seeds: self.seeds,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: digest_all(&self.inputs)?,
            outputs: digest_all(&self.outputs)?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(primary);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn write_sequence_file(path: &Path, seq: &PulseSequence) -> Result<()> {
    let mut w = create(path)?;
    write_sequence_csv(&mut w, seq)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_sequence(path: &Path) -> Result<PulseSequence> {
    read_sequence_csv(open(path)?, path)
}

/// A target as given on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Rotation(AxisAngle),
    Angles(XzxAngles),
}

impl Target {
    fn from_args(t: &TargetArgs) -> Option<Self> {
        if let Some(r) = &t.rotation {
            return Some(Target::Rotation(AxisAngle::new(r[0], r[1], r[2])));
        }
        t.angles.as_ref().map(|a| Target::Angles(XzxAngles::new(a[0], a[1], a[2])))
    }

    /// Decomposition angles; rotations are solved in closed form.
    pub fn angles(&self) -> Result<XzxAngles> {
        match self {
            Target::Rotation(r) => Ok(solve_xzx(r)?.angles),
            Target::Angles(a) => Ok(*a),
        }
    }
}

/// Reads a batch CSV whose header is `alpha,beta,theta` or `phi_a,phi_b,phi_c`.
pub fn read_targets(path: &Path) -> Result<Vec<Target>> {
    let mut lines = open(path)?.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let rotation = match header.trim() {
        "alpha,beta,theta" => true,
        "phi_a,phi_b,phi_c" => false,
        other => return Err(Error::parse(path, 1, format!("unknown header `{other}`"))),
    };
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let n = k + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::parse(path, n, format!("`{f}`: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(Error::parse(path, n, format!("expected 3 fields, found {}", v.len())));
        }
        out.push(if rotation {
            Target::Rotation(AxisAngle::new(v[0], v[1], v[2]))
        } else {
            Target::Angles(XzxAngles::new(v[0], v[1], v[2]))
        });
    }
    Ok(out)
}

pub fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::GenDataset(a) => cmd_gen_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
        Command::Compare(a) => cmd_compare(a),
    }
}

fn solve_one(target: &Target, corrected: bool, synth: &SynthConfig) -> Result<(XzxAngles, PulseSequence, Option<SynthOutcome>)> {
    let angles = target.angles()?;
    if corrected {
        let o = synthesize(&angles, &[], synth)?;
        Ok((o.angles, o.sequence().to_sequence(), Some(o)))
    } else {
        Ok((angles, expand_five_piece(&angles).to_sequence(), None))
    }
}

pub fn cmd_solve(a: &SolveArgs) -> Result<Status> {
    let mut rec = Recorder::new("solve", a, vec![a.seed])?;
    let synth = a.synth.config(a.seed);
    if let Some(batch) = &a.target.batch {
        rec.inputs.push(batch.clone());
        let targets = read_targets(batch)?;
        let mut w = csv::Writer::from_writer(create(&a.out)?);
        w.write_record(["row", "status", "phi_a", "phi_b", "phi_c", "gate_error", "j0", "j1", "j3", "j5", "j6", "phi6", "residual"])?;
        let mut failed = 0;
        for (k, t) in targets.iter().enumerate() {
            let seed_cfg = SynthConfig { seed: synth.seed.wrapping_add(k as u64), ..synth };
            let mut row = vec![k.to_string()];
            match solve_one(t, a.corrected, &seed_cfg) {
                Ok((angles, seq, outcome)) => {
                    let v = angles.reconstruct();
                    let err = gate_error(&evolve_sequence_with(&seq, NoisePoint::ZERO, synth.coupling), &v);
                    row.push("ok".into());
                    row.extend(angles.as_array().iter().map(|x| format!("{x:?}")));
                    row.push(format!("{err:e}"));
                    match outcome {
                        Some(o) => {
                            row.extend(o.params.to_array().iter().map(|x| format!("{x:?}")));
                            row.push(format!("{:e}", o.residual));
                        }
                        None => row.extend(std::iter::repeat_n(String::new(), 7)),
                    }
                }
                Err(e) => {
                    failed += 1;
                    row.push(match e {
                        Error::NoConvergence { .. } => "no_convergence".into(),
                        Error::Domain(_) => "domain_error".into(),
                        other => return Err(other),
                    });
                    row.extend(std::iter::repeat_n(String::new(), 11));
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&a.out, e))?;
        println!("{} targets, {} failed", targets.len(), failed);
        rec.outputs.push(a.out.clone());
        rec.finish(&a.out)?;
        return Ok(if failed == 0 { Status::Success } else { Status::Failure });
    }

    let target = Target::from_args(&a.target).expect("clap enforces one target");
    let (angles, seq, outcome) = solve_one(&target, a.corrected, &synth)?;
    write_sequence_file(&a.out, &seq)?;
    let err = gate_error(&evolve_sequence_with(&seq, NoisePoint::ZERO, synth.coupling), &angles.reconstruct());
    println!("angles (φa, φb, φc) = ({:.12}, {:.12}, {:.12})", angles.phi_a, angles.phi_b, angles.phi_c);
    if let Some(o) = outcome {
        let p = o.params;
        println!(
            "j0={:.9} j1={:.9} j3={:.9} j5={:.9} j6={:.9} φ6={:.9}  residual {:.2e}  lift {}",
            p.j0, p.j1, p.j3, p.j5, p.j6, p.phi6, o.residual, o.lift.0
        );
    }
    println!("{} pieces, duration {:.6}, zero-noise gate error {:.3e}", seq.len(), seq.total_duration(), err);
    rec.outputs.push(a.out.clone());
    rec.finish(&a.out)?;
    Ok(Status::Success)
}

pub fn cmd_gen_dataset(a: &GenArgs) -> Result<Status> {
    let mut rec = Recorder::new("gen-dataset", a, vec![a.seed])?;
    let grid = build_grid(&GridConfig { scheme: a.alpha_scheme.into(), ..GridConfig::default() })?;
    let corpus = match Task::from(a.task) {
        Task::Naive => {
            let policy = if a.exclude_singular { SingularPolicy::Exclude } else { SingularPolicy::Keep };
            generate_naive_corpus(&grid, policy, a.seed)?
        }
        Task::Corrected => {
            let out = generate_corrected_corpus(&grid, &CorrectedBudget { max_points: a.max_points }, &a.synth.config(a.seed))?;
            for f in &out.failures {
                log::warn!("no convergence at {:?} (best residual {:.2e})", f.source, f.best_residual);
            }
            out.corpus
        }
    };
    save_corpus(&a.out, &corpus)?;
    rec.outputs.push(a.out.clone());
    if let Some(csv_path) = &a.csv {
        let mut w = create(csv_path)?;
        export_csv(&mut w, &corpus)?;
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        rec.outputs.push(csv_path.clone());
    }
    let m = &corpus.meta;
    println!(
        "{} corpus: {} records from {} points ({} singular, {} excluded, {} failed)",
        m.task, m.records, m.attempted, m.singular, m.excluded, m.failed
    );
    rec.finish(&a.out)?;
    Ok(Status::Success)
}

pub fn cmd_train(a: &TrainArgs) -> Result<Status> {
    let mut rec = Recorder::new("train", a, vec![a.seed])?;
    rec.inputs.push(a.corpus.clone());
    let corpus = load_corpus(&a.corpus)?;
    let task = corpus.meta.task;
    let records = match a.records {
        Some(n) => corpus.subsample(n, a.seed),
        None => corpus.records.clone(),
    };
    let data = examples(&records);
    let norm = corpus.normalization();
    let mut mlp = Mlp::for_task(task, a.neurons, a.seed)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        bin_size: a.bin_size,
        bin_mode: a.bin_mode.into(),
        seed: a.seed,
        eval_every: a.eval_every,
        eval_epochs: vec![],
    };
    let slices = naive_slices(a.eval_points);
    let curve = train(&mut mlp, &data, &cfg, |m| match task {
        Task::Naive => evaluate_naive(&TrainedModel::new(task, norm, m.clone(), a.seed)?, &slices),
        Task::Corrected => Ok(vec![("corpus_cost".into(), mean_cost(m, &data)?)]),
    })?;
    let mut model = TrainedModel::new(task, norm, mlp, a.seed)?;
    model.train_seed = a.seed;
    model.epochs = a.epochs;
    model.save(&a.out)?;
    let curve_path = a.curve.clone().unwrap_or_else(|| a.out.with_extension("curve.csv"));
    let mut w = create(&curve_path)?;
    curve.write_csv(&mut w)?;
    w.flush().map_err(|e| Error::io(&curve_path, e))?;
    if let Some(last) = curve.last() {
        println!("epoch {}: train cost {:.3e} {:?}", last.epoch, last.train_cost, last.metrics);
    }
    rec.outputs.extend([a.out.clone(), curve_path]);
    rec.finish(&a.out)?;
    Ok(Status::Success)
}

/// Sequence and summary for one prediction.
fn predict_one(model: &TrainedModel, target: &Target) -> Result<(PulseSequence, XzxAngles, Vec<f64>, bool)> {
    match model.task {
        Task::Naive => {
            let rotation = match target {
                Target::Rotation(r) => *r,
                Target::Angles(_) => return Err(Error::TaskMismatch("the naive model takes a rotation (α, β, θ)".into())),
            };
            let angles = predict_naive(model, &rotation)?;
            let err = gate_error(&angles.reconstruct(), &rotation.to_unitary());
            Ok((expand_five_piece(&angles).to_sequence(), angles, vec![err], false))
        }
        Task::Corrected => {
            let angles = target.angles()?;
            let p = predict_corrected(model, &angles)?;
            let seq = expand_corrected(&p.params, &p.angles)?.to_sequence();
            let err = gate_error(&evolve_sequence_with(&seq, NoisePoint::ZERO, ChargeCoupling::Proportional), &angles.reconstruct());
            let mut out = p.params.to_array().to_vec();
            out.push(err);
            Ok((seq, p.angles, out, p.clamped))
        }
    }
}

pub fn cmd_predict(a: &PredictArgs) -> Result<Status> {
    let mut rec = Recorder::new("predict", a, vec![])?;
    rec.inputs.push(a.model.clone());
    let model = TrainedModel::load(&a.model)?;
    if let Some(batch) = &a.target.batch {
        rec.inputs.push(batch.clone());
        let targets = read_targets(batch)?;
        let mut w = csv::Writer::from_writer(create(&a.out)?);
        let mut header = vec!["row", "phi_a", "phi_b", "phi_c"];
        header.extend(match model.task {
            Task::Naive => vec!["gate_error"],
            Task::Corrected => vec!["j0", "j1", "j3", "j5", "j6", "phi6", "gate_error", "clamped"],
        });
        w.write_record(&header)?;
        for (k, t) in targets.iter().enumerate() {
            let (_, angles, values, clamped) = predict_one(&model, t)?;
            let mut row = vec![k.to_string()];
            row.extend(angles.as_array().iter().map(|x| format!("{x:?}")));
            row.extend(values.iter().map(|x| format!("{x:?}")));
            if model.task == Task::Corrected {
                row.push(clamped.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&a.out, e))?;
        println!("{} predictions", targets.len());
    } else {
        let target = Target::from_args(&a.target).expect("clap enforces one target");
        let (seq, angles, values, clamped) = predict_one(&model, &target)?;
        write_sequence_file(&a.out, &seq)?;
        println!("angles (φa, φb, φc) = ({:.9}, {:.9}, {:.9})", angles.phi_a, angles.phi_b, angles.phi_c);
        println!("{} pieces; outputs {values:?}{}", seq.len(), if clamped { " (negative exchange clamped to 0)" } else { "" });
    }
    rec.outputs.push(a.out.clone());
    rec.finish(&a.out)?;
    Ok(Status::Success)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<Status> {
    let mut rec = Recorder::new("sweep", a, vec![])?;
    rec.inputs.push(a.sequence.clone());
    if !(a.lo > 0.0 && a.hi > a.lo && a.points >= 2) {
        return Err(Error::Domain("sweep needs 0 < lo < hi and at least 2 points".into()));
    }
    let seq = load_sequence(&a.sequence)?;
    let coupling: ChargeCoupling = a.coupling.into();
    // the ideal gate is the sequence's own noiseless product
    let target = evolve_sequence_with(&seq, NoisePoint::ZERO, coupling);
    let points = noise_sweep(&seq, a.axis.into(), &log_grid(a.lo, a.hi, a.points), &target, coupling);
    let id = a.id.clone().unwrap_or_else(|| a.sequence.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let mut w = create(&a.out)?;
    write_sweep_csv(&mut w, &id, &points, true)?;
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    match log_log_slope(&points, SLOPE_WINDOW.0, SLOPE_WINDOW.1) {
        Some(s) => println!("log-log slope over [{:e}, {:e}]: {s:.3}", SLOPE_WINDOW.0, SLOPE_WINDOW.1),
        None => println!("sweep does not cover the slope window"),
    }
    rec.outputs.push(a.out.clone());
    rec.finish(&a.out)?;
    Ok(Status::Success)
}

/// Rows of a sweep CSV grouped by `sequence_id`, in file order.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<(String, Vec<SweepPoint>)>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header: Vec<String> = r.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.iter().map(String::from).collect();
    if header != ["noise_value", "gate_error", "sequence_id"] {
        return Err(Error::parse(path, 1, "expected header noise_value,gate_error,sequence_id"));
    }
    let mut groups: Vec<(String, Vec<SweepPoint>)> = Vec::new();
    for (k, row) in r.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            row.get(i).unwrap_or("").trim().parse().map_err(|e| Error::parse(path, line, format!("{}: {e}", header[i])))
        };
        let p = SweepPoint { noise: num(0)?, gate_error: num(1)? };
        let id = row.get(2).unwrap_or("").to_string();
        match groups.iter_mut().find(|g| g.0 == id) {
            Some(g) => g.1.push(p),
            None => groups.push((id, vec![p])),
        }
    }
    Ok(groups)
}

/// Thresholds for a naive-versus-corrected noise sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCriteria {
    pub corrected_slope: (f64, f64),
    pub naive_slope: (f64, f64),
    /// Noise value where the corrected error must be below the naive one.
    pub compare_at: f64,
}

impl Default for FlatnessCriteria {
    fn default() -> Self {
        Self { corrected_slope: (4.0, 0.4), naive_slope: (2.0, 0.3), compare_at: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCheck {
    pub naive_slope: Option<f64>,
    pub corrected_slope: Option<f64>,
    pub naive_at: Option<f64>,
    pub corrected_at: Option<f64>,
}

fn value_at(points: &[SweepPoint], x: f64) -> Option<f64> {
    points.iter().find(|p| ((p.noise - x) / x).abs() < 1e-9).map(|p| p.gate_error)
}

impl FlatnessCheck {
    pub fn new(naive: &[SweepPoint], corrected: &[SweepPoint], compare_at: f64) -> Self {
        Self {
            naive_slope: log_log_slope(naive, SLOPE_WINDOW.0, SLOPE_WINDOW.1),
            corrected_slope: log_log_slope(corrected, SLOPE_WINDOW.0, SLOPE_WINDOW.1),
            naive_at: value_at(naive, compare_at),
            corrected_at: value_at(corrected, compare_at),
        }
    }

    /// Failed conditions, empty when all pass.
    pub fn failures(&self, c: &FlatnessCriteria) -> Vec<String> {
        let mut out = Vec::new();
        let within = |s: Option<f64>, (mid, tol): (f64, f64)| s.is_some_and(|s| (s - mid).abs() <= tol);
        if !within(self.corrected_slope, c.corrected_slope) {
            out.push(format!("corrected slope {:?} outside {}±{}", self.corrected_slope, c.corrected_slope.0, c.corrected_slope.1));
        }
        if !within(self.naive_slope, c.naive_slope) {
            out.push(format!("naive slope {:?} outside {}±{}", self.naive_slope, c.naive_slope.0, c.naive_slope.1));
        }
        match (self.corrected_at, self.naive_at) {
            (Some(a), Some(b)) if a < b => {}
            (a, b) => out.push(format!("at δ={}: corrected {a:?} not below naive {b:?}", c.compare_at)),
        }
        out
    }
}

/// Sweep grid: `n` log-spaced points on `[1e-4, 0.1]` plus `extra`, sorted.
pub fn sweep_grid(n: usize, extra: f64) -> Vec<f64> {
    let mut g = log_grid(1e-4, 0.1, n.max(2));
    if !g.iter().any(|x| ((x - extra) / extra).abs() < 1e-9) {
        g.push(extra);
    }
    g.sort_by(f64::total_cmp);
    g
}

/// Naive and solver-corrected sequences for one rotation, swept on both axes.
#[derive(Debug, Clone)]
pub struct FlatnessPanel {
    pub rotation: AxisAngle,
    pub naive: PulseSequence,
    pub corrected: SynthOutcome,
    /// `(axis, naive sweep, corrected sweep)`.
    pub sweeps: Vec<(NoiseAxis, Vec<SweepPoint>, Vec<SweepPoint>)>,
}

impl FlatnessPanel {
    pub fn check(&self, axis: NoiseAxis, compare_at: f64) -> Option<FlatnessCheck> {
        self.sweeps.iter().find(|s| s.0 == axis).map(|(_, n, c)| FlatnessCheck::new(n, c, compare_at))
    }
}

pub fn flatness_panel(rotation: &AxisAngle, synth: &SynthConfig, grid: &[f64]) -> Result<FlatnessPanel> {
    let angles = solve_xzx(rotation)?.angles;
    let naive = expand_five_piece(&angles).to_sequence();
    let corrected = synthesize(&angles, &[], synth)?;
    let cseq = corrected.sequence().to_sequence();
    let target = rotation.to_unitary();
    let sweeps = [NoiseAxis::Hyperfine, NoiseAxis::Charge]
        .into_iter()
        .map(|axis| {
            (
                axis,
                noise_sweep(&naive, axis, grid, &target, synth.coupling),
                noise_sweep(&cseq, axis, grid, &target, synth.coupling),
            )
        })
        .collect();
    Ok(FlatnessPanel { rotation: *rotation, naive, corrected, sweeps })
}

/// The two rotations swept by the `compare` command.
pub const REFERENCE_ROTATIONS: [(f64, f64, f64); 2] = [(-1.0, 2.0, 1.0), (-2.0, 2.0, 2.0)];

pub fn cmd_compare(a: &CompareArgs) -> Result<Status> {
    let mut rec = Recorder::new("compare", a, vec![a.seed])?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let criteria = FlatnessCriteria::default();
    let grid = sweep_grid(a.points, criteria.compare_at);
    let mut summary = Vec::new();
    for (k, &(al, be, th)) in REFERENCE_ROTATIONS.iter().enumerate() {
        let rotation = AxisAngle::new(al, be, th);
        let panel = flatness_panel(&rotation, &a.synth.config(a.seed), &grid)?;
        let stem = format!("rotation{}", k + 1);
        for (name, seq) in [("naive", &panel.naive), ("corrected", &panel.corrected.sequence().to_sequence())] {
            let p = a.out.join(format!("{stem}_{name}_sequence.csv"));
            write_sequence_file(&p, seq)?;
            rec.outputs.push(p);
        }
        for (axis, naive, corrected) in &panel.sweeps {
            let p = a.out.join(format!("{stem}_{}.csv", axis.name()));
            let mut w = create(&p)?;
            write_sweep_csv(&mut w, "naive", naive, true)?;
            write_sweep_csv(&mut w, "corrected", corrected, false)?;
            w.flush().map_err(|e| Error::io(&p, e))?;
            let check = FlatnessCheck::new(naive, corrected, criteria.compare_at);
            println!(
                "({al}, {be}, {th}) {}: naive slope {:.3}, corrected slope {:.3}",
                axis.name(),
                check.naive_slope.unwrap_or(f64::NAN),
                check.corrected_slope.unwrap_or(f64::NAN)
            );
            summary.push(serde_json::json!({ "rotation": [al, be, th], "axis": axis.name(), "file": p, "check": check }));
            rec.outputs.push(p);
        }
    }
    let sp = a.out.join("summary.json");
    std::fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&sp, e))?;
    rec.outputs.push(sp);
    rec.finish(&a.out)?;
    Ok(Status::Success)
}

/// One pass/fail line of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLine {
    pub passed: bool,
    pub subject: String,
    pub detail: String,
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<(usize, Vec<(String, f64)>)>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    let header: Vec<String> = r.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.iter().map(String::from).collect();
    if header.first().map(String::as_str) != Some("epoch") {
        return Err(Error::parse(path, 1, "expected a learning-curve header starting with `epoch`"));
    }
    let mut rows = Vec::new();
    for (k, row) in r.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let epoch = row.get(0).unwrap_or("").parse().map_err(|e| Error::parse(path, line, format!("epoch: {e}")))?;
        let values = header[1..]
            .iter()
            .enumerate()
            .map(|(i, name)| {
                row.get(i + 1)
                    .unwrap_or("")
                    .parse::<f64>()
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::parse(path, line, format!("{name}: {e}")))
            })
            .collect::<Result<_>>()?;
        rows.push((epoch, values));
    }
    Ok(rows)
}

pub fn curve_report(path: &Path, metric: &str, threshold: f64, checkpoints: &[usize]) -> Result<Vec<ReportLine>> {
    let rows = read_curve_csv(path)?;
    let value = |epoch: usize| -> Option<f64> {
        rows.iter().find(|r| r.0 == epoch).and_then(|r| r.1.iter().find(|m| m.0 == metric)).map(|m| m.1)
    };
    let subject = path.display().to_string();
    let mut out = Vec::new();
    let last = rows.last().and_then(|r| value(r.0));
    out.push(ReportLine {
        passed: last.is_some_and(|v| v < threshold),
        subject: subject.clone(),
        detail: format!("final {metric} {last:?} < {threshold:e}"),
    });
    if !checkpoints.is_empty() {
        let vals: Vec<Option<f64>> = checkpoints.iter().map(|&e| value(e)).collect();
        let decreasing = vals.iter().all(Option::is_some) && vals.windows(2).all(|w| w[1] < w[0]);
        out.push(ReportLine {
            passed: decreasing,
            subject,
            detail: format!("{metric} strictly decreasing at epochs {checkpoints:?}: {vals:?}"),
        });
    }
    Ok(out)
}

pub fn sweep_report(path: &Path, criteria: &FlatnessCriteria) -> Result<Vec<ReportLine>> {
    let groups = read_sweep_csv(path)?;
    let find = |id: &str| groups.iter().find(|g| g.0 == id).map(|g| g.1.as_slice());
    let (Some(naive), Some(corrected)) = (find("naive"), find("corrected")) else {
        return Err(Error::parse(path, 1, "sweep needs both `naive` and `corrected` sequence ids"));
    };
    let check = FlatnessCheck::new(naive, corrected, criteria.compare_at);
    let failures = check.failures(criteria);
    Ok(vec![ReportLine {
        passed: failures.is_empty(),
        subject: path.display().to_string(),
        detail: if failures.is_empty() {
            format!(
                "slopes naive {:.3} corrected {:.3}; corrected below naive at δ={}",
                check.naive_slope.unwrap_or(f64::NAN),
                check.corrected_slope.unwrap_or(f64::NAN),
                criteria.compare_at
            )
        } else {
            failures.join("; ")
        },
    }])
}

pub fn cmd_report(a: &ReportArgs) -> Result<Status> {
    if a.curve.is_empty() && a.sweep.is_empty() {
        return Err(Error::Domain("report needs at least one --curve or --sweep file".into()));
    }
    let mut lines = Vec::new();
    for p in &a.curve {
        lines.extend(curve_report(p, &a.metric, a.threshold, &a.checkpoints)?);
    }
    for p in &a.sweep {
        lines.extend(sweep_report(p, &FlatnessCriteria::default())?);
    }
    for l in &lines {
        println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.subject, l.detail);
    }
    Ok(if lines.iter().all(|l| l.passed) { Status::Success } else { Status::Failure })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("pulseforge").chain(args.iter().copied()))
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn negative_rotation_angles_parse() {
        let cli = parse(&["solve", "--rotation", "-0.785", "2.094", "1.571", "--out", "x.csv"]).unwrap();
        let Command::Solve(a) = cli.command else { panic!() };
        assert_eq!(a.target.rotation, Some(vec![-0.785, 2.094, 1.571]));
        assert!(!a.corrected);
    }

    #[test]
    fn targets_are_mutually_exclusive_and_required() {
        assert!(parse(&["solve", "--out", "x.csv"]).is_err());
        assert!(parse(&["solve", "--rotation", "-1", "1", "1", "--angles", "0", "1", "1", "--out", "x"]).is_err());
    }

    #[test]
    fn seeds_are_required_for_generation_and_training() {
        // the environment fallback must not leak into this check
        if std::env::var_os(SEED_ENV).is_some() {
            return;
        }
        let err = parse(&["gen-dataset", "--task", "naive", "--out", "c.txt"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::MissingRequiredArgument);
        assert!(parse(&["train", "--corpus", "c.txt", "--out", "m.json"]).is_err());
        assert!(parse(&["train", "--corpus", "c.txt", "--out", "m.json", "--seed", "3"]).is_ok());
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        assert_eq!(error_exit_code(&Error::NoConvergence { attempts: 1, best_residual: 1.0 }), 1);
        assert_eq!(error_exit_code(&Error::Diverged { epoch: 2 }), 1);
        assert_eq!(error_exit_code(&Error::io("x", std::io::Error::other("gone"))), 2);
        assert_eq!(error_exit_code(&Error::parse("x", 3, "bad")), 2);
        assert_eq!(Status::Failure.exit_code(), 1);
    }

    #[test]
    fn batch_targets_parse_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "alpha,beta,theta\n-1,2,1\n\n-2,2,2\n").unwrap();
        assert_eq!(read_targets(&p).unwrap().len(), 2);
        std::fs::write(&p, "phi_a,phi_b,phi_c\n0,3.14,3.14\n1,2\n").unwrap();
        match read_targets(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "x,y,z\n").unwrap();
        assert!(matches!(read_targets(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sweep_grid_contains_the_comparison_point() {
        let g = sweep_grid(31, 0.05);
        assert_eq!(g.len(), 32);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(g.contains(&0.05));
    }

    #[test]
    fn flatness_check_flags_each_condition() {
        let line = |slope: f64, c: f64| -> Vec<SweepPoint> {
            sweep_grid(31, 0.05).into_iter().map(|x| SweepPoint { noise: x, gate_error: c * x.powf(slope) }).collect()
        };
        let c = FlatnessCriteria::default();
        assert!(FlatnessCheck::new(&line(2.0, 1.0), &line(4.0, 1.0), 0.05).failures(&c).is_empty());
        assert_eq!(FlatnessCheck::new(&line(2.0, 1.0), &line(2.0, 0.5), 0.05).failures(&c).len(), 1);
        // corrected steeper but larger at the comparison point
        assert_eq!(FlatnessCheck::new(&line(2.0, 1.0), &line(4.0, 1e4), 0.05).failures(&c).len(), 1);
    }

    #[test]
    fn curve_report_checks_threshold_and_trend() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "epoch,train_cost,mean\n10,0.1,0.05\n50,0.05,0.02\n200,0.01,0.005\n").unwrap();
        assert!(curve_report(&p, "mean", 1e-2, &[10, 50, 200]).unwrap().iter().all(|l| l.passed));
        let lines = curve_report(&p, "mean", 1e-3, &[10, 50, 200]).unwrap();
        assert_eq!(lines.iter().filter(|l| !l.passed).count(), 1);
        std::fs::write(&p, "epoch,train_cost,mean\n10,0.1,0.01\n50,0.05,0.02\n200,0.01,0.005\n").unwrap();
        assert!(!curve_report(&p, "mean", 1e-2, &[10, 50, 200]).unwrap()[1].passed);
        assert!(matches!(curve_report(&dir.path().join("missing.csv"), "mean", 1.0, &[]), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_sits_next_to_its_output() {
        assert_eq!(manifest_path(Path::new("out/model.json")), PathBuf::from("out/model.json.manifest.json"));
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(manifest_path(dir.path()), dir.path().join("manifest.json"));
    }

    #[test]
    fn digest_matches_a_known_vector() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(digest_file(&p).unwrap().sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn naive_solve_command_writes_sequence_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("seq.csv");
        let args = SolveArgs {
            target: TargetArgs { rotation: Some(vec![-PI / 4.0, 2.0 * PI / 3.0, PI / 2.0]), angles: None, batch: None },
            corrected: false,
            synth: SynthArgs { jmax: 30.0, tol: 1e-9, restarts: 100 },
            seed: 0,
            out: out.clone(),
        };
        assert_eq!(cmd_solve(&args).unwrap(), Status::Success);
        let seq = load_sequence(&out).unwrap();
        assert_eq!(seq.pieces().iter().map(|p| p.exchange).collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 1.0, 0.0]);
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(&out)).unwrap()).unwrap();
        assert_eq!(m.command, "solve");
        assert_eq!(m.outputs[0].sha256, digest_file(&out).unwrap().sha256);
        assert_eq!(m.config["target"]["rotation"][2], serde_json::json!(PI / 2.0));
    }
}
