//! Two-hidden-layer tanh network trained by plain SGD on a quadratic cost.
//!
//! Layer `l` computes `a^l = tanh(w^l a^{l−1} + b^l)`; the output layer is
//! tanh as well, so every prediction lies in `(−1, 1)` before
//! denormalization.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{wrap_positive, Normalization, Task, TrainingRecord};
use crate::decompose::XzxAngles;
use crate::error::{Error, Result};
use crate::pulsesim::ChargeCoupling;
use crate::su2::{gate_error, AxisAngle};
use crate::supcode::{select_lift, AngleLift, SupcodeParams};

pub const CHECKPOINT_FORMAT: &str = "pulseforge-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_SCHEME: &str = "uniform(±1/sqrt(fan_in))";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
        }
    }

    /// `f′(z)` written in terms of `a = f(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Weights `w[j][k]` (row `j` = neuron, column `k` = input), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, w: vec![0.0; inputs * outputs], b: vec![0.0; outputs] }
    }

    pub fn weight(&self, j: usize, k: usize) -> f64 {
        self.w[j * self.inputs + k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Per-layer pre-activations `z` and activations `a` (`a[0]` is the input).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub z: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.a.last().expect("at least the input layer")
    }
}

/// `∂C/∂w` and `∂C/∂b`, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(m: &Mlp) -> Self {
        Self { layers: m.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect() }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += s * y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += s * y);
        }
    }
}

/// `½ Σ_j (y_j − a_j)²`.
pub fn quadratic_cost(output: &[f64], target: &[f64]) -> f64 {
    0.5 * output.iter().zip(target).map(|(a, y)| (y - a) * (y - a)).sum::<f64>()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("layer sizes {sizes:?} need at least two non-empty layers")));
        }
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self { sizes: sizes.to_vec(), activation: Activation::Tanh, layers })
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &mut m.layers {
            let r = 1.0 / (l.inputs as f64).sqrt();
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|x| *x = rng.random_range(-r..=r));
        }
        Ok(m)
    }

    /// `(3, Nn, Nn, out)`.
    pub fn for_task(task: Task, neurons: usize, seed: u64) -> Result<Self> {
        Self::new(&[3, neurons, neurons, task.output_dim()], seed)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|x| x.is_finite()))
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!("input length {} != {}", input.len(), self.input_dim())));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<ForwardPass> {
        self.check_input(input)?;
        let mut z = Vec::with_capacity(self.layers.len());
        let mut a = Vec::with_capacity(self.layers.len() + 1);
        a.push(input.to_vec());
        for l in &self.layers {
            let prev = a.last().expect("seeded with input");
            let zl: Vec<f64> = (0..l.outputs)
                .map(|j| {
                    let row = &l.w[j * l.inputs..(j + 1) * l.inputs];
                    row.iter().zip(prev).map(|(w, x)| w * x).sum::<f64>() + l.b[j]
                })
                .collect();
            a.push(zl.iter().map(|&v| self.activation.apply(v)).collect());
            z.push(zl);
        }
        Ok(ForwardPass { z, a })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.a.pop().expect("output layer"))
    }

    /// Gradients of `½‖y − a^L‖²` for one cached forward pass.
    pub fn backprop(&self, pass: &ForwardPass, target: &[f64]) -> Result<Gradients> {
        if target.len() != self.output_dim() {
            return Err(Error::Shape(format!("target length {} != {}", target.len(), self.output_dim())));
        }
        let mut grads = Gradients::zeros_like(self);
        let last = self.layers.len() - 1;
        // δ^L = (a^L − y) ⊙ f′(z^L)
        let mut delta: Vec<f64> = pass.a[last + 1]
            .iter()
            .zip(target)
            .map(|(a, y)| (a - y) * self.activation.derivative_from_output(*a))
            .collect();
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let prev = &pass.a[l];
            let g = &mut grads.layers[l];
            for j in 0..layer.outputs {
                g.b[j] = delta[j];
                let row = &mut g.w[j * layer.inputs..(j + 1) * layer.inputs];
                row.iter_mut().zip(prev).for_each(|(gw, ak)| *gw = delta[j] * ak);
            }
            if l > 0 {
                // δ^{l−1}_k = f′(z_k) Σ_j w_jk δ_j
                let mut next = vec![0.0; layer.inputs];
                for (j, d) in delta.iter().enumerate() {
                    let row = &layer.w[j * layer.inputs..(j + 1) * layer.inputs];
                    next.iter_mut().zip(row).for_each(|(n, w)| *n += w * d);
                }
                for (n, a) in next.iter_mut().zip(prev) {
                    *n *= self.activation.derivative_from_output(*a);
                }
                delta = next;
            }
        }
        Ok(grads)
    }

    /// `w → w − η ∂C/∂w`, `b → b − η ∂C/∂b`.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.w.iter_mut().zip(&g.w).for_each(|(w, d)| *w -= learning_rate * d);
            l.b.iter_mut().zip(&g.b).for_each(|(b, d)| *b -= learning_rate * d);
        }
    }
}

/// How the `Nb` entries of a bin become one SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    /// Average the inputs and targets, then take the gradient of the
    /// averaged example.
    #[default]
    AverageData,
    /// Average the per-entry gradients.
    AverageGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub bin_size: usize,
    pub bin_mode: BinMode,
    pub seed: u64,
    /// Evaluate every this many epochs (0 = only at `eval_epochs` and the
    /// final epoch).
    pub eval_every: usize,
    pub eval_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 500,
            bin_size: 1,
            bin_mode: BinMode::AverageData,
            seed: 0,
            eval_every: 0,
            eval_epochs: vec![],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.bin_size == 0 || self.epochs == 0 {
            return Err(Error::Domain("bin size and epoch count must be at least 1".into()));
        }
        Ok(())
    }

    fn evaluates_at(&self, epoch: usize) -> bool {
        epoch == self.epochs || (self.eval_every > 0 && epoch % self.eval_every == 0) || self.eval_epochs.contains(&epoch)
    }
}

/// Named scalar metrics from one evaluation, in a fixed order.
pub type Metrics = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    /// Mean per-step cost over the epoch, before each step's update.
    pub train_cost: f64,
    pub metrics: Metrics,
}

impl CurvePoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|m| m.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn at(&self, epoch: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.epoch == epoch)
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    /// `epoch,train_cost,<metric names…>`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let names: Vec<String> = self.points.first().map(|p| p.metrics.iter().map(|m| m.0.clone()).collect()).unwrap_or_default();
        let mut header = vec!["epoch".to_string(), "train_cost".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![p.epoch.to_string(), format!("{:e}", p.train_cost)];
            row.extend(p.metrics.iter().map(|m| format!("{:e}", m.1)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<curve>", e))
    }
}

/// Training examples as normalized `(input, target)` pairs.
pub fn examples(records: &[TrainingRecord]) -> Vec<(Vec<f64>, Vec<f64>)> {
    records.iter().map(|r| (r.input.to_vec(), r.target.clone())).collect()
}

fn mean_of(rows: &[&(Vec<f64>, Vec<f64>)]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut x = vec![0.0; rows[0].0.len()];
    let mut y = vec![0.0; rows[0].1.len()];
    for (xi, yi) in rows {
        x.iter_mut().zip(xi).for_each(|(a, b)| *a += b / n);
        y.iter_mut().zip(yi).for_each(|(a, b)| *a += b / n);
    }
    (x, y)
}

/// Shuffles, bins and steps through `data` for `config.epochs` epochs.
///
/// `evaluate` is called on the configured epochs; its metrics are recorded
/// in the learning curve.
pub fn train<F>(model: &mut Mlp, data: &[(Vec<f64>, Vec<f64>)], config: &TrainConfig, mut evaluate: F) -> Result<LearningCurve>
where
    F: FnMut(&Mlp) -> Result<Metrics>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training data is empty".into()));
    }
    for (x, y) in data {
        if x.len() != model.input_dim() || y.len() != model.output_dim() {
            return Err(Error::Shape(format!(
                "example of shape ({}, {}) for model {:?}",
                x.len(),
                y.len(),
                model.sizes
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = LearningCurve::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut cost = 0.0;
        let mut steps = 0usize;
        for bin in order.chunks(config.bin_size) {
            let rows: Vec<&(Vec<f64>, Vec<f64>)> = bin.iter().map(|&i| &data[i]).collect();
            let grads = match config.bin_mode {
                BinMode::AverageData => {
                    let (x, y) = mean_of(&rows);
                    let pass = model.forward(&x)?;
                    cost += quadratic_cost(pass.output(), &y);
                    model.backprop(&pass, &y)?
                }
                BinMode::AverageGradient => {
                    let mut acc = Gradients::zeros_like(model);
                    let s = 1.0 / rows.len() as f64;
                    for (x, y) in &rows {
                        let pass = model.forward(x)?;
                        cost += s * quadratic_cost(pass.output(), y);
                        acc.add_scaled(&model.backprop(&pass, y)?, s);
                    }
                    acc
                }
            };
            model.sgd_step(&grads, config.learning_rate);
            steps += 1;
        }
        let train_cost = cost / steps as f64;
        if !train_cost.is_finite() || !model.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if config.evaluates_at(epoch) {
            let metrics = evaluate(model)?;
            log::debug!("epoch {epoch}: cost {train_cost:.3e} {metrics:?}");
            curve.points.push(CurvePoint { epoch, train_cost, metrics });
        }
    }
    Ok(curve)
}

/// A network together with what is needed to use it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub normalization: Normalization,
    pub init: String,
    pub init_seed: u64,
    pub train_seed: u64,
    pub epochs: usize,
    pub mlp: Mlp,
}

impl TrainedModel {
    pub fn new(task: Task, normalization: Normalization, mlp: Mlp, init_seed: u64) -> Result<Self> {
        if mlp.input_dim() != 3 || mlp.output_dim() != task.output_dim() {
            return Err(Error::TaskMismatch(format!("model {:?} cannot serve the {task} task", mlp.sizes)));
        }
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            task,
            normalization,
            init: INIT_SCHEME.into(),
            init_seed,
            train_seed: 0,
            epochs: 0,
            mlp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: TrainedModel = serde_json::from_str(&text).map_err(|e| {
            Error::parse(path, e.line(), format!("invalid checkpoint: {e}"))
        })?;
        if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
            return Err(Error::parse(path, 1, format!("unsupported checkpoint {} v{}", m.format, m.version)));
        }
        for (k, l) in m.mlp.layers.iter().enumerate() {
            if l.inputs != m.mlp.sizes[k] || l.outputs != m.mlp.sizes[k + 1] || l.w.len() != l.inputs * l.outputs || l.b.len() != l.outputs {
                return Err(Error::Shape(format!("{}: layer {k} inconsistent with sizes {:?}", path.display(), m.mlp.sizes)));
            }
        }
        Ok(m)
    }

    fn expect_task(&self, task: Task) -> Result<()> {
        if self.task != task {
            return Err(Error::TaskMismatch(format!("model trained for {} used for {task}", self.task)));
        }
        Ok(())
    }

    fn raw_output(&self, input: [f64; 3]) -> Result<Vec<f64>> {
        let out = self.mlp.predict(&input)?;
        if let Some(bad) = out.iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Domain(format!("network output {bad} outside [−1, 1]")));
        }
        Ok(out)
    }
}

pub fn predict_naive(model: &TrainedModel, target: &AxisAngle) -> Result<XzxAngles> {
    model.expect_task(Task::Naive)?;
    let input = model.normalization.input(Task::Naive, [target.alpha, target.beta, target.theta]);
    let raw = model.normalization.denormalize_target(Task::Naive, &model.raw_output(input)?);
    Ok(XzxAngles::new(raw[0], raw[1], raw[2]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectedPrediction {
    pub params: SupcodeParams,
    /// Pulse angles with the lift chosen for `params`.
    pub angles: XzxAngles,
    pub lift: AngleLift,
    /// Some exchange came out negative and was clamped to zero.
    pub clamped: bool,
}

pub fn predict_corrected(model: &TrainedModel, angles: &XzxAngles) -> Result<CorrectedPrediction> {
    model.expect_task(Task::Corrected)?;
    let wrapped = angles.as_array().map(wrap_positive);
    let input = model.normalization.input(Task::Corrected, wrapped);
    let raw = model.normalization.denormalize_target(Task::Corrected, &model.raw_output(input)?);
    let clamped = raw[..5].iter().any(|j| *j < 0.0);
    let j: Vec<f64> = raw[..5].iter().map(|j| j.max(0.0)).collect();
    let params = SupcodeParams::from_array([j[0], j[1], j[2], j[3], j[4], raw[5]]);
    let (lift, lifted) = select_lift(&params, angles, ChargeCoupling::Proportional);
    Ok(CorrectedPrediction { params, angles: lifted, lift, clamped })
}

/// Half-width of the α window around −π/2 reported separately.
pub const SINGULAR_WINDOW: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub points: Vec<AxisAngle>,
}

/// The three naive-task evaluation slices: α swept at `β = 1, θ = 2`,
/// β swept at `α = −1, θ = 2`, θ swept at `α = −1, β = 1`; `n` points each,
/// endpoints included. Points of the α slice within [`SINGULAR_WINDOW`] of
/// −π/2 are split into a fourth slice, `alpha_window`.
pub fn naive_slices(n: usize) -> Vec<Slice> {
    let lin = |lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1).max(1) as f64).collect() };
    let (mut alpha, mut window) = (Vec::new(), Vec::new());
    for a in lin(-PI, 0.0) {
        let p = AxisAngle::new(a, 1.0, 2.0);
        if (a + 0.5 * PI).abs() <= SINGULAR_WINDOW {
            window.push(p);
        } else {
            alpha.push(p);
        }
    }
    vec![
        Slice { name: "alpha".into(), points: alpha },
        Slice { name: "beta".into(), points: lin(0.0, PI).into_iter().map(|b| AxisAngle::new(-1.0, b, 2.0)).collect() },
        Slice { name: "theta".into(), points: lin(0.0, 2.0 * PI).into_iter().map(|t| AxisAngle::new(-1.0, 1.0, t)).collect() },
        Slice { name: "alpha_window".into(), points: window },
    ]
}

/// Mean gate error of predicted five-piece sequences per slice, plus
/// `mean`, the average of the `alpha`, `beta` and `theta` slice means.
pub fn evaluate_naive(model: &TrainedModel, slices: &[Slice]) -> Result<Metrics> {
    let mut metrics = Vec::with_capacity(slices.len() + 1);
    for s in slices {
        let errs: Vec<f64> = s
            .points
            .par_iter()
            .map(|p| predict_naive(model, p).map(|a| gate_error(&a.reconstruct(), &p.to_unitary())))
            .collect::<Result<_>>()?;
        let mean = if errs.is_empty() { 0.0 } else { errs.iter().sum::<f64>() / errs.len() as f64 };
        metrics.push((s.name.clone(), mean));
    }
    let main: Vec<f64> = metrics.iter().filter(|m| ["alpha", "beta", "theta"].contains(&m.0.as_str())).map(|m| m.1).collect();
    let mean = main.iter().sum::<f64>() / main.len().max(1) as f64;
    metrics.push(("mean".into(), mean));
    Ok(metrics)
}

/// Output-space quadratic cost, averaged over `data`.
pub fn mean_cost(mlp: &Mlp, data: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let total: f64 = data
        .par_iter()
        .map(|(x, y)| mlp.predict(x).map(|a| quadratic_cost(&a, y)))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / data.len().max(1) as f64)
}
