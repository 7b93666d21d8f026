//! Sampling grid and training corpora for the two learning tasks.
//!
//! Records keep raw values (radians, exchanges in units of `h`) and derive
//! the normalized network vectors from them, so a corpus file stores only
//! raw numbers and reloads bit-for-bit.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{solve_xzx, Singularity, XzxAngles};
use crate::error::{Error, Result};
use crate::pulsesim::{evolve_sequence_with, ChargeCoupling, NoisePoint};
use crate::su2::{gate_error, AxisAngle};
use crate::supcode::{synthesize, AngleLift, SupcodeParams, SynthConfig, SynthOutcome, DEFAULT_JMAX};

pub const CORPUS_FORMAT: &str = "pulseforge-corpus";
pub const CORPUS_VERSION: u32 = 1;

/// α values closer than the margin to these are never sampled.
pub const EXCLUDED_ALPHA: [f64; 5] = [-PI, -0.75 * PI, -0.5 * PI, -0.25 * PI, 0.0];

const TWO_PI: f64 = 2.0 * PI;

/// Into `(−π, π]`.
pub fn wrap_symmetric(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    if r > PI {
        r - TWO_PI
    } else {
        r
    }
}

/// Into `[0, 2π)`.
pub fn wrap_positive(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// `(α, β, θ) → (φa, φb, φc)`.
    Naive,
    /// `(φa, φb, φc) → (j0, j1, j3, j5, j6, φ6)`.
    Corrected,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Naive => "naive",
            Task::Corrected => "corrected",
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            Task::Naive => 3,
            Task::Corrected => 6,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Task::Naive),
            "corrected" => Ok(Task::Corrected),
            other => Err(Error::Domain(format!("unknown task {other:?}; expected naive or corrected"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the 20 α values of each open subinterval are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaScheme {
    /// Chebyshev-Lobatto nodes, clustered toward both excluded endpoints.
    #[default]
    Cosine,
    /// Evenly spaced in α.
    Uniform,
    /// Evenly spaced in `cos α`.
    UniformCos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub scheme: AlphaScheme,
    pub alpha_per_interval: usize,
    pub n_beta: usize,
    pub n_theta: usize,
    /// Distance kept from each excluded α.
    pub margin: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { scheme: AlphaScheme::Cosine, alpha_per_interval: 20, n_beta: 20, n_theta: 40, margin: 0.01 }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub excluded_alpha: Vec<f64>,
    pub config: GridConfig,
}

pub fn build_grid(config: &GridConfig) -> Result<SampleGrid> {
    let gap = EXCLUDED_ALPHA[1] - EXCLUDED_ALPHA[0];
    if !(config.margin > 0.0 && 2.0 * config.margin < gap) {
        return Err(Error::Domain(format!("margin {} must lie in (0, {})", config.margin, 0.5 * gap)));
    }
    let n = config.alpha_per_interval;
    let mut alpha = Vec::with_capacity(4 * n);
    for w in EXCLUDED_ALPHA.windows(2) {
        let (lo, hi) = (w[0] + config.margin, w[1] - config.margin);
        match config.scheme {
            AlphaScheme::Uniform => alpha.extend(linspace(lo, hi, n)),
            AlphaScheme::Cosine => {
                let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                let nodes = linspace(0.0, PI, n);
                alpha.extend(nodes.iter().map(|t| mid - half * t.cos()));
            }
            AlphaScheme::UniformCos => {
                // cos is monotone on [−π, 0], so the map is invertible per interval
                let c = linspace(lo.cos(), hi.cos(), n);
                alpha.extend(c.iter().map(|v| -v.clamp(-1.0, 1.0).acos()));
            }
        }
    }
    Ok(SampleGrid {
        alpha,
        beta: linspace(0.0, PI, config.n_beta),
        theta: linspace(0.0, TWO_PI, config.n_theta),
        excluded_alpha: EXCLUDED_ALPHA.to_vec(),
        config: *config,
    })
}

impl SampleGrid {
    pub fn len(&self) -> usize {
        self.alpha.len() * self.beta.len() * self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `i` in α-major, then β, then θ order.
    pub fn point(&self, i: usize) -> AxisAngle {
        let (nb, nt) = (self.beta.len(), self.theta.len());
        AxisAngle::new(self.alpha[i / (nb * nt)], self.beta[(i / nt) % nb], self.theta[i % nt])
    }

    pub fn points(&self) -> Vec<AxisAngle> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// `n` distinct grid indices drawn with `seed`, in ascending order.
    pub fn subsample_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        if n >= self.len() {
            return (0..self.len()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Maps raw record values to the `[−1, 1]` network range and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub jmax: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { jmax: DEFAULT_JMAX }
    }
}

impl Normalization {
    pub fn input(&self, _task: Task, raw: [f64; 3]) -> [f64; 3] {
        raw.map(|x| x / TWO_PI)
    }

    pub fn denormalize_input(&self, _task: Task, v: [f64; 3]) -> [f64; 3] {
        v.map(|x| x * TWO_PI)
    }

    pub fn target(&self, task: Task, raw: &[f64]) -> Vec<f64> {
        match task {
            Task::Naive => raw.iter().map(|x| x / TWO_PI).collect(),
            Task::Corrected => {
                let mut v: Vec<f64> = raw[..5].iter().map(|j| j / self.jmax).collect();
                v.push(wrap_symmetric(raw[5]) / TWO_PI);
                v
            }
        }
    }

    pub fn denormalize_target(&self, task: Task, v: &[f64]) -> Vec<f64> {
        match task {
            Task::Naive => v.iter().map(|x| x * TWO_PI).collect(),
            Task::Corrected => {
                let mut raw: Vec<f64> = v[..5].iter().map(|j| j * self.jmax).collect();
                raw.push(wrap_positive(v[5] * TWO_PI));
                raw
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordFlags {
    pub singular: Option<Singularity>,
    pub lift: Option<AngleLift>,
    /// Synthesis residual, corrected task only.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task: Task,
    /// Grid rotation the record was generated from.
    pub source: AxisAngle,
    /// Naive: `(α, β, θ)`. Corrected: `(φa, φb, φc)` wrapped into `[0, 2π)`.
    pub raw_input: [f64; 3],
    /// Naive: the principal-branch `(φa, φb, φc)`, each in `(−2π, 2π]`. Corrected:
    /// `(j0, j1, j3, j5, j6, φ6)`.
    pub raw_target: Vec<f64>,
    pub input: [f64; 3],
    pub target: Vec<f64>,
    pub flags: RecordFlags,
}

impl TrainingRecord {
    pub fn new(
        task: Task,
        source: AxisAngle,
        raw_input: [f64; 3],
        raw_target: Vec<f64>,
        flags: RecordFlags,
        norm: &Normalization,
    ) -> Result<Self> {
        if raw_target.len() != task.output_dim() {
            return Err(Error::Shape(format!("{task} target needs {} values, got {}", task.output_dim(), raw_target.len())));
        }
        let input = norm.input(task, raw_input);
        let target = norm.target(task, &raw_target);
        if let Some(bad) = input.iter().chain(target.iter()).find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Domain(format!("normalized value {bad} outside [−1, 1]")));
        }
        Ok(Self { task, source, raw_input, raw_target, input, target, flags })
    }

    /// Naive-task angles as the five-piece pulse would use them.
    pub fn naive_angles(&self) -> Option<XzxAngles> {
        (self.task == Task::Naive).then(|| XzxAngles::new(self.raw_target[0], self.raw_target[1], self.raw_target[2]))
    }

    /// Corrected-task parameters and realized pulse angles.
    pub fn corrected_solution(&self) -> Option<(SupcodeParams, XzxAngles)> {
        if self.task != Task::Corrected {
            return None;
        }
        let t = &self.raw_target;
        let params = SupcodeParams::from_array([t[0], t[1], t[2], t[3], t[4], t[5]]);
        let wrapped = XzxAngles::new(self.raw_input[0], self.raw_input[1], self.raw_input[2]);
        Some((params, self.flags.lift.unwrap_or_default().apply(&wrapped)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularPolicy {
    /// Keep singular solves; the chosen branch is still an exact solution.
    #[default]
    Keep,
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub format: String,
    pub version: u32,
    pub generator: String,
    pub task: Task,
    pub jmax: f64,
    pub seed: u64,
    pub records: usize,
    /// Grid points visited, including excluded and failed ones.
    pub attempted: usize,
    pub singular: usize,
    pub excluded: usize,
    pub failed: usize,
    pub grid: GridConfig,
}

impl CorpusMeta {
    pub fn new(task: Task, jmax: f64, seed: u64, grid: GridConfig) -> Self {
        Self {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            generator: concat!("pulseforge ", env!("CARGO_PKG_VERSION")).into(),
            task,
            jmax,
            seed,
            records: 0,
            attempted: 0,
            singular: 0,
            excluded: 0,
            failed: 0,
            grid,
        }
    }

    pub fn convergence_rate(&self) -> f64 {
        let tried = self.attempted - self.excluded;
        if tried == 0 {
            return 0.0;
        }
        self.records as f64 / tried as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub records: Vec<TrainingRecord>,
}

impl Corpus {
    pub fn normalization(&self) -> Normalization {
        Normalization { jmax: self.meta.jmax }
    }

    /// `n` distinct records drawn with `seed`, in corpus order; all of them
    /// when `n` is not smaller than the corpus.
    pub fn subsample(&self, n: usize, seed: u64) -> Vec<TrainingRecord> {
        if n >= self.records.len() {
            return self.records.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, self.records.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.records[i].clone()).collect()
    }
}

/// One record per grid point (`(α, β, θ) → (φa, φb, φc)`).
pub fn generate_naive_corpus(grid: &SampleGrid, policy: SingularPolicy, seed: u64) -> Result<Corpus> {
    let norm = Normalization::default();
    let solved: Vec<(AxisAngle, crate::decompose::XzxSolution)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.point(i);
            solve_xzx(&p).map(|s| (p, s))
        })
        .collect::<Result<_>>()?;

    let mut meta = CorpusMeta::new(Task::Naive, norm.jmax, seed, grid.config);
    meta.attempted = solved.len();
    let mut records = Vec::with_capacity(solved.len());
    for (p, s) in solved {
        if s.is_singular() {
            meta.singular += 1;
            if policy == SingularPolicy::Exclude {
                meta.excluded += 1;
                continue;
            }
        }
        // principal branch: continuous across the grid away from α = −π/2
        let raw_target = s.principal.to_vec();
        let flags = RecordFlags { singular: s.singularity, ..RecordFlags::default() };
        records.push(TrainingRecord::new(Task::Naive, p, [p.alpha, p.beta, p.theta], raw_target, flags, &norm)?);
    }
    meta.records = records.len();
    log::info!(
        "naive corpus: {} records from {} grid points ({} singular, {} excluded)",
        meta.records,
        meta.attempted,
        meta.singular,
        meta.excluded
    );
    Ok(Corpus { meta, records })
}

/// Limits for corrected-corpus generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedBudget {
    /// Grid points to attempt; a seeded subsample is drawn when smaller than
    /// the grid.
    pub max_points: usize,
}

impl Default for CorrectedBudget {
    fn default() -> Self {
        Self { max_points: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthFailure {
    pub source: AxisAngle,
    pub angles: XzxAngles,
    pub best_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedCorpus {
    pub corpus: Corpus,
    pub failures: Vec<SynthFailure>,
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Prim order over `points`: each entry is the unvisited point nearest to
/// the visited set, paired with that nearest visited point.
fn continuation_order(points: &[[f64; 3]]) -> Vec<(usize, Option<usize>)> {
    let n = points.len();
    let mut order = Vec::with_capacity(n);
    if n == 0 {
        return order;
    }
    let mut visited = vec![false; n];
    let mut best: Vec<(f64, Option<usize>)> = vec![(f64::INFINITY, None); n];
    let mut next = 0;
    for _ in 0..n {
        visited[next] = true;
        order.push((next, best[next].1));
        let mut pick = None;
        for j in 0..n {
            if visited[j] {
                continue;
            }
            let d = squared_distance(&points[next], &points[j]);
            if d < best[j].0 {
                best[j] = (d, Some(next));
            }
            if pick.is_none_or(|k: usize| best[j].0 < best[k].0) {
                pick = Some(j);
            }
        }
        match pick {
            Some(k) => next = k,
            None => break,
        }
    }
    order
}

/// Converged `(φa, φb, φc) → (j, φ6)` records for a subsample of the grid.
///
/// Targets are solved one after another along a nearest-neighbour spanning
/// tree in network-input space, each seeded from the solution (parameters
/// and angle lift) of its closest solved neighbour, so that neighbouring
/// records follow one continuous solution family. Solves are sequential by
/// design; synthesis itself is deterministic given `synth.seed`.
pub fn generate_corrected_corpus(grid: &SampleGrid, budget: &CorrectedBudget, synth: &SynthConfig) -> Result<CorrectedCorpus> {
    let norm = Normalization { jmax: synth.jmax };
    let mut meta = CorpusMeta::new(Task::Corrected, synth.jmax, synth.seed, grid.config);
    let mut points = Vec::new();
    for i in grid.subsample_indices(budget.max_points, synth.seed) {
        let p = grid.point(i);
        let s = solve_xzx(&p)?;
        if s.is_singular() {
            meta.singular += 1;
        }
        points.push((i, p, s.angles));
    }
    meta.attempted = points.len();

    let inputs: Vec<[f64; 3]> = points.iter().map(|(_, _, a)| a.as_array().map(wrap_positive)).collect();
    let mut solved: Vec<Option<SynthOutcome>> = vec![None; points.len()];
    let mut failed: Vec<Option<f64>> = vec![None; points.len()];
    for (k, parent) in continuation_order(&inputs) {
        let (index, source, angles) = points[k];
        let cfg = SynthConfig { seed: synth.seed.wrapping_add(index as u64), ..*synth };
        // the tree parent, or the closest solved point if the parent failed
        let anchor = parent.filter(|&p| solved[p].is_some()).or_else(|| {
            (0..points.len())
                .filter(|&j| solved[j].is_some())
                .min_by(|&a, &b| squared_distance(&inputs[a], &inputs[k]).total_cmp(&squared_distance(&inputs[b], &inputs[k])))
        });
        let (seeds, target) = match anchor.and_then(|j| solved[j]) {
            Some(o) => (vec![o.params], o.lift.apply(&angles)),
            None => (vec![], angles),
        };
        match synthesize(&target, &seeds, &cfg) {
            Ok(o) => solved[k] = Some(o),
            Err(Error::NoConvergence { best_residual, .. }) => failed[k] = Some(best_residual),
            Err(e) => {
                log::warn!("synthesis error at {source:?}: {e}");
                failed[k] = Some(f64::NAN);
            }
        }
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (k, &(_, source, angles)) in points.iter().enumerate() {
        if let Some(o) = solved[k] {
            let flags = RecordFlags { lift: Some(o.lift), residual: Some(o.residual), ..RecordFlags::default() };
            records.push(TrainingRecord::new(Task::Corrected, source, inputs[k], o.params.to_array().to_vec(), flags, &norm)?);
        } else {
            failures.push(SynthFailure { source, angles, best_residual: failed[k].unwrap_or(f64::NAN) });
        }
    }
    meta.records = records.len();
    meta.failed = failures.len();
    log::info!(
        "corrected corpus: {}/{} converged ({:.1}%)",
        meta.records,
        meta.attempted,
        100.0 * meta.convergence_rate()
    );
    Ok(CorrectedCorpus { corpus: Corpus { meta, records }, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub max_gate_error: f64,
    /// Indices of audited records above the threshold.
    pub failures: Vec<usize>,
}

/// Zero-noise gate error of the sequence a record encodes, against the
/// rotation it was generated from.
pub fn record_gate_error(rec: &TrainingRecord, coupling: ChargeCoupling) -> Result<f64> {
    let target = rec.source.to_unitary();
    match rec.task {
        Task::Naive => Ok(gate_error(&rec.naive_angles().expect("naive").reconstruct(), &target)),
        Task::Corrected => {
            let (params, angles) = rec.corrected_solution().expect("corrected");
            let seq = crate::supcode::expand_corrected(&params, &angles)?.to_sequence();
            Ok(gate_error(&evolve_sequence_with(&seq, NoisePoint::ZERO, coupling), &target))
        }
    }
}

/// Re-simulates a seeded random `fraction` of the records (at least one).
pub fn audit_corpus(corpus: &Corpus, fraction: f64, seed: u64, threshold: f64) -> Result<AuditReport> {
    let n = corpus.records.len();
    if n == 0 {
        return Ok(AuditReport { checked: 0, max_gate_error: 0.0, failures: vec![] });
    }
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let errors: Vec<(usize, f64)> = idx
        .par_iter()
        .map(|&i| record_gate_error(&corpus.records[i], ChargeCoupling::Proportional).map(|e| (i, e)))
        .collect::<Result<_>>()?;
    let max_gate_error = errors.iter().fold(0.0f64, |m, e| m.max(e.1));
    let failures = errors.iter().filter(|e| !(e.1 < threshold)).map(|e| e.0).collect();
    Ok(AuditReport { checked: k, max_gate_error, failures })
}

fn columns(task: Task) -> &'static [&'static str] {
    match task {
        Task::Naive => &["alpha", "beta", "theta", "phi_a", "phi_b", "phi_c", "singular"],
        Task::Corrected => &[
            "alpha", "beta", "theta", "phi_a", "phi_b", "phi_c", "j0", "j1", "j3", "j5", "j6", "phi6", "lift", "residual",
        ],
    }
}

fn singular_code(s: Option<Singularity>) -> &'static str {
    match s {
        None => "-",
        Some(Singularity::DifferenceFree) => "difference_free",
        Some(Singularity::SumFree) => "sum_free",
    }
}

fn record_line(rec: &TrainingRecord) -> String {
    let mut line = String::new();
    let s = rec.source;
    // a naive record's raw input is its source rotation
    let input: &[f64] = match rec.task {
        Task::Naive => &[],
        Task::Corrected => &rec.raw_input,
    };
    let fields = [s.alpha, s.beta, s.theta].into_iter().chain(input.iter().copied()).chain(rec.raw_target.iter().copied());
    for (k, v) in fields.enumerate() {
        if k > 0 {
            line.push(',');
        }
        // shortest round-trip representation
        write!(line, "{v:?}").expect("string write");
    }
    match rec.task {
        Task::Naive => write!(line, ",{}", singular_code(rec.flags.singular)),
        Task::Corrected => write!(
            line,
            ",{},{:?}",
            rec.flags.lift.unwrap_or_default().0,
            rec.flags.residual.unwrap_or(f64::NAN)
        ),
    }
    .expect("string write");
    line
}

/// Writes `#meta <json>`, `#fields <names>`, then one line per record.
pub fn write_corpus<W: Write>(mut out: W, corpus: &Corpus) -> std::io::Result<()> {
    writeln!(out, "#meta {}", serde_json::to_string(&corpus.meta).expect("meta serializes"))?;
    writeln!(out, "#fields {}", columns(corpus.meta.task).join(","))?;
    for rec in &corpus.records {
        writeln!(out, "{}", record_line(rec))?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(&mut w, corpus).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn parse_record(task: Task, line: &str, norm: &Normalization) -> std::result::Result<TrainingRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    let expected = columns(task).len();
    if fields.len() != expected {
        return Err(format!("expected {expected} fields, found {}", fields.len()));
    }
    let num = |k: usize| fields[k].trim().parse::<f64>().map_err(|e| format!("field {} ({}): {e}", k + 1, columns(task)[k]));
    let source = AxisAngle::new(num(0)?, num(1)?, num(2)?);
    let (raw_input, first_target) = match task {
        Task::Naive => ([source.alpha, source.beta, source.theta], 3),
        Task::Corrected => ([num(3)?, num(4)?, num(5)?], 6),
    };
    let raw_target = (first_target..first_target + task.output_dim()).map(num).collect::<std::result::Result<Vec<_>, _>>()?;
    let flags = match task {
        Task::Naive => RecordFlags {
            singular: match fields[first_target + 3].trim() {
                "-" => None,
                "difference_free" => Some(Singularity::DifferenceFree),
                "sum_free" => Some(Singularity::SumFree),
                other => return Err(format!("unknown singular flag {other:?}")),
            },
            ..RecordFlags::default()
        },
        Task::Corrected => {
            let lift: u8 = fields[12].trim().parse().map_err(|e| format!("field 13 (lift): {e}"))?;
            if lift >= AngleLift::COUNT {
                return Err(format!("lift {lift} out of range"));
            }
            RecordFlags { lift: Some(AngleLift(lift)), residual: Some(num(13)?), singular: None }
        }
    };
    TrainingRecord::new(task, source, raw_input, raw_target, flags, norm).map_err(|e| e.to_string())
}

pub fn read_corpus<R: BufRead>(input: R, path: &Path) -> Result<Corpus> {
    let mut meta: Option<CorpusMeta> = None;
    let mut records = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(json) = line.strip_prefix("#meta ") {
            let m: CorpusMeta = serde_json::from_str(json).map_err(|e| Error::parse(path, lineno, format!("bad #meta: {e}")))?;
            if m.format != CORPUS_FORMAT || m.version != CORPUS_VERSION {
                return Err(Error::parse(path, lineno, format!("unsupported corpus format {} v{}", m.format, m.version)));
            }
            meta = Some(m);
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let m = meta.as_ref().ok_or_else(|| Error::parse(path, lineno, "record before #meta header"))?;
        let norm = Normalization { jmax: m.jmax };
        records.push(parse_record(m.task, &line, &norm).map_err(|msg| Error::parse(path, lineno, msg))?);
    }
    let meta = meta.ok_or_else(|| Error::parse(path, 1, "missing #meta header"))?;
    if meta.records != records.len() {
        return Err(Error::parse(path, 1, format!("header declares {} records, file has {}", meta.records, records.len())));
    }
    Ok(Corpus { meta, records })
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path)
}

/// CSV export with both raw and normalized columns.
pub fn export_csv<W: Write>(out: W, corpus: &Corpus) -> Result<()> {
    let task = corpus.meta.task;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = columns(task).iter().map(|s| s.to_string()).collect();
    header.extend((0..3).map(|k| format!("in_{k}")));
    header.extend((0..task.output_dim()).map(|k| format!("out_{k}")));
    w.write_record(&header)?;
    for rec in &corpus.records {
        let mut row: Vec<String> = record_line(rec).split(',').map(str::to_string).collect();
        row.extend(rec.input.iter().chain(rec.target.iter()).map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
