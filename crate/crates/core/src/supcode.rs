//! Noise-correcting 18-piece sequences.
//!
//! The naive five-piece pulse is split after its second piece and an
//! engineered identity is inserted (operator order):
//!
//! ```text
//! U(0,φa) U(1,π) U(j6,π−φ6) U(j5,π) U(0,π) U(j3,π) U(0,π) U(j1,π) U(j0,4π)
//!   U(j1,π) U(0,π) U(j3,π) U(0,π) U(j5,π) U(j6,π+φ6) U(0,φb) U(1,π) U(0,φc)
//! ```
//!
//! At zero noise the inserted block is `±I` for any parameters (the
//! palindrome of π pieces squares to `−I` and the two `j6` pieces add to a
//! 2π turn), so the target constraint is automatic and the six parameters are
//! fixed by the six first-order sensitivities to `δh` and `δε`.
//!
//! Each naive angle may be realized as `φ` or `φ + 2π`. The gate is the same
//! up to sign, but the noise the naive pieces accumulate differs, and for a
//! given target only some of the eight [`AngleLift`]s admit non-negative
//! exchanges. Synthesis therefore searches over lifts as well as seeds.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::XzxAngles;
use crate::error::{Error, Result};
use crate::lm::{self, Bounds, LmConfig};
use crate::pulsesim::{evolve_pieces, piece_generator, ChargeCoupling, NoiseAxis, NoisePoint, Piece, PulseSequence};
use crate::su2::{anti_hermitian_components, exp_pauli, su2_log_components, Unitary2};

pub const PIECE_COUNT: usize = 18;
pub const DEFAULT_JMAX: f64 = 30.0;

/// `{j0, j1, j3, j5, j6, φ6}`; exchanges in units of `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupcodeParams {
    pub j0: f64,
    pub j1: f64,
    pub j3: f64,
    pub j5: f64,
    pub j6: f64,
    pub phi6: f64,
}

impl SupcodeParams {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self { j0: v[0], j1: v[1], j3: v[2], j5: v[3], j6: v[4], phi6: v[5] }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.j0, self.j1, self.j3, self.j5, self.j6, self.phi6]
    }

    pub fn exchanges(&self) -> [f64; 5] {
        [self.j0, self.j1, self.j3, self.j5, self.j6]
    }

    pub fn validate(&self, jmax: f64) -> Result<()> {
        for (name, j) in ["j0", "j1", "j3", "j5", "j6"].iter().zip(self.exchanges()) {
            if !(j.is_finite() && (0.0..=jmax).contains(&j)) {
                return Err(Error::Domain(format!("{name} = {j} outside [0, {jmax}]")));
            }
        }
        if !(self.phi6.is_finite() && (0.0..2.0 * PI).contains(&self.phi6)) {
            return Err(Error::Domain(format!("φ6 = {} outside [0, 2π)", self.phi6)));
        }
        Ok(())
    }

    /// Nominal angles `(π−φ6, π+φ6)` of the two `j6` pieces, each reduced
    /// into `[0, 2π]`. Their sum is always 2π.
    pub fn j6_angles(&self) -> (f64, f64) {
        if self.phi6 <= PI {
            (PI - self.phi6, PI + self.phi6)
        } else {
            (3.0 * PI - self.phi6, self.phi6 - PI)
        }
    }
}

/// Which of `φa, φb, φc` (bits 0, 1, 2) carry an extra 2π on top of their
/// value wrapped into `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AngleLift(pub u8);

impl AngleLift {
    pub const COUNT: u8 = 8;

    pub fn all() -> impl Iterator<Item = AngleLift> {
        (0..Self::COUNT).map(AngleLift)
    }

    /// The lift already present in canonical angles.
    pub fn of(angles: &XzxAngles) -> Self {
        let bit = |v: f64, k: u8| if v >= 2.0 * PI { 1 << k } else { 0 };
        AngleLift(bit(angles.phi_a, 0) | bit(angles.phi_b, 1) | bit(angles.phi_c, 2))
    }

    /// Wraps each angle into `[0, 2π)` and adds 2π where the bit is set.
    pub fn apply(self, angles: &XzxAngles) -> XzxAngles {
        let lift = |v: f64, k: u8| {
            let w = v.rem_euclid(2.0 * PI);
            let w = if w >= 2.0 * PI { 0.0 } else { w };
            if self.0 >> k & 1 == 1 { w + 2.0 * PI } else { w }
        };
        XzxAngles::new(lift(angles.phi_a, 0), lift(angles.phi_b, 1), lift(angles.phi_c, 2))
    }
}

/// The 18 pieces in operator order, with `j2 = j4 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedSequence {
    pieces: Vec<Piece>,
}

impl CorrectedSequence {
    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn total_duration(&self) -> f64 {
        self.pieces.iter().map(Piece::duration).sum()
    }

    pub fn to_sequence(&self) -> PulseSequence {
        PulseSequence::new(self.pieces.clone()).expect("validated parameters give non-negative pieces")
    }
}

fn corrected_pieces(p: &SupcodeParams, t: &XzxAngles) -> [Piece; PIECE_COUNT] {
    let pc = |j, phi| Piece::new(j, phi);
    let (minus, plus) = p.j6_angles();
    // operator order; reversed, this is the time-ordered pulse list
    [
        pc(0.0, t.phi_a),
        pc(1.0, PI),
        pc(p.j6, minus),
        pc(p.j5, PI),
        pc(0.0, PI),
        pc(p.j3, PI),
        pc(0.0, PI),
        pc(p.j1, PI),
        pc(p.j0, 4.0 * PI),
        pc(p.j1, PI),
        pc(0.0, PI),
        pc(p.j3, PI),
        pc(0.0, PI),
        pc(p.j5, PI),
        pc(p.j6, plus),
        pc(0.0, t.phi_b),
        pc(1.0, PI),
        pc(0.0, t.phi_c),
    ]
}

pub fn expand_corrected(params: &SupcodeParams, target: &XzxAngles) -> Result<CorrectedSequence> {
    params.validate(f64::INFINITY)?;
    Ok(CorrectedSequence { pieces: corrected_pieces(params, target).to_vec() })
}

/// How the first-order noise derivatives are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMethod {
    /// Central differences at `h` and `h/2` combined by one Richardson step.
    #[default]
    Richardson,
    /// Exact toggling-frame sum of per-piece derivatives.
    Exact,
}

/// Step used by [`DerivativeMethod::Richardson`].
pub const FD_STEP: f64 = 1e-6;

/// `U(v+) − U(v−)` for `v± = v0 ± dv`, with every difference of nearly equal
/// quantities rewritten as a product so that no digits cancel.
fn exp_pauli_difference(v0: [f64; 3], dv: [f64; 3]) -> Unitary2 {
    let vp = [0, 1, 2].map(|k| v0[k] + dv[k]);
    let vm = [0, 1, 2].map(|k| v0[k] - dv[k]);
    let tp = (vp[0] * vp[0] + vp[1] * vp[1] + vp[2] * vp[2]).sqrt();
    let tm = (vm[0] * vm[0] + vm[1] * vm[1] + vm[2] * vm[2]).sqrt();
    if tp + tm == 0.0 {
        return Unitary2::from_quaternion(0.0, 0.0, 0.0, 0.0);
    }
    // θ+ − θ− = (θ+² − θ−²)/(θ+ + θ−) = 4 v0·dv / (θ+ + θ−)
    let diff = 4.0 * (v0[0] * dv[0] + v0[1] * dv[1] + v0[2] * dv[2]) / (tp + tm);
    let mean = 0.25 * (tp + tm);
    let quarter = 0.25 * diff;
    let dcos = -2.0 * mean.sin() * quarter.sin();
    // sinc-like factor s(θ) = sin(θ/2)/θ, so U(v) = cos(θ/2) I − i s(θ) v·σ
    let sinc = |t: f64| if t == 0.0 { 0.5 } else { (0.5 * t).sin() / t };
    let dsin = 2.0 * mean.cos() * quarter.sin();
    let dsinc = if tp == 0.0 || tm == 0.0 {
        sinc(tp) - sinc(tm)
    } else {
        dsin / tp - (0.5 * tm).sin() * diff / (tp * tm)
    };
    let sp = sinc(tp);
    let q = [0, 1, 2].map(|k| sp * 2.0 * dv[k] + dsinc * vm[k]);
    Unitary2::from_quaternion(dcos, q[0], q[1], q[2])
}

/// `∂v/∂δ` for one piece; the generator is linear in the noise.
fn generator_direction(p: &Piece, axis: NoiseAxis, coupling: ChargeCoupling) -> [f64; 3] {
    let t = p.duration();
    match axis {
        NoiseAxis::Hyperfine => [t, 0.0, 0.0],
        NoiseAxis::Charge => [0.0, 0.0, coupling.slope(p.exchange) * t],
    }
}

/// `(W(+h) − W(−h)) / 2h` along one noise axis, evaluated through the
/// telescoping sum `Σ_k W₊[..k] (U_k(+h) − U_k(−h)) W₋[k+1..]`.
fn central_difference(pieces: &[Piece], axis: NoiseAxis, coupling: ChargeCoupling, h: f64) -> Unitary2 {
    let n = pieces.len();
    let shifted: Vec<([f64; 3], [f64; 3])> = pieces
        .iter()
        .map(|p| {
            let v0 = piece_generator(p.exchange, p.angle, NoisePoint::ZERO, coupling);
            let dir = generator_direction(p, axis, coupling);
            (v0, dir.map(|d| d * h))
        })
        .collect();
    let mut suffix_minus = vec![Unitary2::IDENTITY; n + 1];
    for k in (0..n).rev() {
        let (v0, dv) = shifted[k];
        suffix_minus[k] = exp_pauli([0, 1, 2].map(|i| v0[i] - dv[i])) * suffix_minus[k + 1];
    }
    let mut prefix_plus = Unitary2::IDENTITY;
    let mut total = Unitary2::from_quaternion(0.0, 0.0, 0.0, 0.0);
    for (k, &(v0, dv)) in shifted.iter().enumerate() {
        let d = exp_pauli_difference(v0, dv);
        total = total.add(&(prefix_plus * d * suffix_minus[k + 1]));
        prefix_plus = prefix_plus * exp_pauli([0, 1, 2].map(|i| v0[i] + dv[i]));
    }
    total.scale((0.5 / h).into())
}

/// `∂W/∂δ` at zero noise by central differences with step `h`, optionally
/// refined once by Richardson extrapolation.
pub fn fd_derivative(pieces: &[Piece], axis: NoiseAxis, coupling: ChargeCoupling, h: f64, richardson: bool) -> Unitary2 {
    let coarse = central_difference(pieces, axis, coupling, h);
    if !richardson {
        return coarse;
    }
    let fine = central_difference(pieces, axis, coupling, 0.5 * h);
    fine.scale((4.0 / 3.0).into()).sub(&coarse.scale((1.0 / 3.0).into()))
}

/// `U†dU` coordinates for `U = exp(−i v·σ/2)` perturbed along `dv`, i.e.
/// `g` with `U† ∂U = −(i/2) g·σ`.
fn exp_derivative_components(v: [f64; 3], dv: [f64; 3]) -> [f64; 3] {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta < 1e-300 {
        return dv;
    }
    let n = v.map(|x| x / theta);
    let along = dv[0] * n[0] + dv[1] * n[1] + dv[2] * n[2];
    let perp = [dv[0] - along * n[0], dv[1] - along * n[1], dv[2] - along * n[2]];
    let cross = [
        n[1] * perp[2] - n[2] * perp[1],
        n[2] * perp[0] - n[0] * perp[2],
        n[0] * perp[1] - n[1] * perp[0],
    ];
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta;
    [0, 1, 2].map(|k| along * n[k] + a * perp[k] - b * cross[k])
}

fn pauli_vector(g: [f64; 3]) -> Unitary2 {
    Unitary2::from_quaternion(0.0, 0.5 * g[0], 0.5 * g[1], 0.5 * g[2])
}

/// Coordinates `g` of `W₀† ∂W/∂δ = −(i/2) g·σ`, summed exactly piece by piece.
pub fn exact_sensitivity(pieces: &[Piece], axis: NoiseAxis, coupling: ChargeCoupling) -> [f64; 3] {
    // W = U1 U2 … Un; W†dW = Σ_k S_k† (U_k† dU_k) S_k with S_k = U_{k+1} … U_n.
    let mut suffix = Unitary2::IDENTITY;
    let mut total = Unitary2::from_quaternion(0.0, 0.0, 0.0, 0.0);
    for p in pieces.iter().rev() {
        let v = piece_generator(p.exchange, p.angle, NoisePoint::ZERO, coupling);
        let dv = generator_direction(p, axis, coupling);
        let local = pauli_vector(exp_derivative_components(v, dv));
        total = total.add(&(suffix.adjoint() * local * suffix));
        suffix = exp_pauli(v) * suffix;
    }
    anti_hermitian_components(&total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualOptions {
    pub method: DerivativeMethod,
    pub coupling: ChargeCoupling,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self { method: DerivativeMethod::Richardson, coupling: ChargeCoupling::Proportional }
    }
}

/// Nine residuals: target mismatch (rotation vector of `V†W₀`), then the
/// `δh` and `δε` first-order sensitivities (coordinates of `W₀†∂W`).
///
/// Only derivatives at zero noise enter; no noise amplitude is ever read.
pub fn residuals(params: &SupcodeParams, target: &XzxAngles) -> [f64; 9] {
    residuals_with(params, target, &ResidualOptions::default())
}

pub fn residuals_with(params: &SupcodeParams, target: &XzxAngles, opts: &ResidualOptions) -> [f64; 9] {
    let pieces = corrected_pieces(params, target);
    let w0 = evolve_pieces(&pieces, NoisePoint::ZERO, opts.coupling);
    let v = target.reconstruct();
    let mismatch = su2_log_components(&(v.adjoint() * w0)).vector;
    let sens = |axis| match opts.method {
        DerivativeMethod::Exact => exact_sensitivity(&pieces, axis, opts.coupling),
        DerivativeMethod::Richardson => {
            let dw = fd_derivative(&pieces, axis, opts.coupling, FD_STEP, true);
            anti_hermitian_components(&(w0.adjoint() * dw))
        }
    };
    let dh = sens(NoiseAxis::Hyperfine);
    let de = sens(NoiseAxis::Charge);
    [mismatch[0], mismatch[1], mismatch[2], dh[0], dh[1], dh[2], de[0], de[1], de[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub jmax: f64,
    /// Acceptance threshold on `‖residuals‖∞`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Random starting points tried after the supplied seeds; each is run
    /// against every lift.
    pub random_restarts: usize,
    pub seed: u64,
    pub coupling: ChargeCoupling,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            jmax: DEFAULT_JMAX,
            tolerance: 1e-9,
            max_iterations: 300,
            random_restarts: 100,
            seed: 0,
            coupling: ChargeCoupling::Proportional,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOutcome {
    pub params: SupcodeParams,
    /// Naive angles as realized in the sequence; equal to the requested
    /// target up to the lift.
    pub angles: XzxAngles,
    pub lift: AngleLift,
    /// `‖residuals‖∞` from the finite-difference route.
    pub residual: f64,
    /// Number of (start, lift) pairs tried, including the successful one.
    pub attempts: usize,
}

impl SynthOutcome {
    pub fn sequence(&self) -> CorrectedSequence {
        CorrectedSequence { pieces: corrected_pieces(&self.params, &self.angles).to_vec() }
    }
}

/// A random starting point: exchanges log-uniform in `[0.05, Jmax]`, `φ6`
/// uniform. A ceiling below 0.05 collapses the range onto `Jmax`.
pub fn random_seed_params(rng: &mut impl Rng, jmax: f64) -> SupcodeParams {
    let (lo, hi) = (0.05f64.min(jmax).ln(), jmax.ln());
    let mut j = [0.0; 5];
    for x in j.iter_mut() {
        *x = rng.random_range(lo..=hi).exp();
    }
    SupcodeParams { j0: j[0], j1: j[1], j3: j[2], j5: j[3], j6: j[4], phi6: rng.random_range(0.0..2.0 * PI) }
}

fn sensitivity_vector(x: &[f64], target: &XzxAngles, coupling: ChargeCoupling) -> Vec<f64> {
    let p = from_search_coords(x);
    let pieces = corrected_pieces(&p, target);
    let dh = exact_sensitivity(&pieces, NoiseAxis::Hyperfine, coupling);
    let de = exact_sensitivity(&pieces, NoiseAxis::Charge, coupling);
    vec![dh[0], dh[1], dh[2], de[0], de[1], de[2]]
}

// The search runs φ6 over (−π, π], where the piece angles are continuous.
fn from_search_coords(x: &[f64]) -> SupcodeParams {
    let phi6 = x[5].rem_euclid(2.0 * PI);
    SupcodeParams::from_array([x[0], x[1], x[2], x[3], x[4], if phi6 >= 2.0 * PI { 0.0 } else { phi6 }])
}

fn to_search_coords(p: &SupcodeParams) -> [f64; 6] {
    let mut x = p.to_array();
    if x[5] > PI {
        x[5] -= 2.0 * PI;
    }
    x
}

/// The target's own lift first, then the rest in index order.
fn lift_order(target: &XzxAngles) -> Vec<AngleLift> {
    let own = AngleLift::of(target);
    std::iter::once(own).chain(AngleLift::all().filter(|l| *l != own)).collect()
}

/// Searches for parameters that cancel both first-order noise channels.
///
/// Starting points (supplied seeds, then random restarts) are taken in turn,
/// and each is run against every lift of the target, the target's own lift
/// first. A start is polished by bounded Levenberg-Marquardt on the exact
/// sensitivities and accepted once the nine finite-difference residuals are
/// below tolerance.
pub fn synthesize(target: &XzxAngles, seeds: &[SupcodeParams], cfg: &SynthConfig) -> Result<SynthOutcome> {
    if seeds.is_empty() && cfg.random_restarts == 0 {
        return Err(Error::Domain("synthesize needs at least one seed".into()));
    }
    if !(cfg.jmax.is_finite() && cfg.jmax > 0.0) {
        return Err(Error::Domain(format!("Jmax = {} must be finite and positive", cfg.jmax)));
    }
    let bounds = Bounds { lower: vec![0.0, 0.0, 0.0, 0.0, 0.0, -PI], upper: vec![cfg.jmax, cfg.jmax, cfg.jmax, cfg.jmax, cfg.jmax, PI] };
    let lm_cfg = LmConfig { max_iterations: cfg.max_iterations, tolerance: cfg.tolerance * 1e-2, ..LmConfig::default() };
    let opts = ResidualOptions { method: DerivativeMethod::Richardson, coupling: cfg.coupling };
    let lifts: Vec<(AngleLift, XzxAngles)> = lift_order(target).into_iter().map(|l| (l, l.apply(target))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // best finite-difference residual among starts the polish got close
    let mut best = f64::INFINITY;
    let mut best_polish = f64::INFINITY;
    let mut attempts = 0;

    let starts = seeds.iter().copied().map(Some).chain((0..cfg.random_restarts).map(|_| None));
    for start in starts {
        let start = start.unwrap_or_else(|| random_seed_params(&mut rng, cfg.jmax));
        for &(lift, angles) in &lifts {
            attempts += 1;
            let rep = lm::minimize(|x| sensitivity_vector(x, &angles, cfg.coupling), &to_search_coords(&start), &bounds, &lm_cfg);
            best_polish = best_polish.min(rep.residual_inf);
            if rep.residual_inf > cfg.tolerance {
                continue;
            }
            let params = from_search_coords(&rep.params);
            let residual = residuals_with(&params, &angles, &opts).iter().fold(0.0f64, |m, r| m.max(r.abs()));
            if residual < cfg.tolerance && params.validate(cfg.jmax).is_ok() {
                return Ok(SynthOutcome { params, angles, lift, residual, attempts });
            }
            best = best.min(residual);
        }
    }
    let best_residual = if best.is_finite() { best } else { best_polish };
    Err(Error::NoConvergence { attempts, best_residual })
}

/// `‖(g_h, g_ε)‖∞` of the first-order sensitivities, exact route.
pub fn first_order_norm(params: &SupcodeParams, angles: &XzxAngles, coupling: ChargeCoupling) -> f64 {
    let pieces = corrected_pieces(params, angles);
    let dh = exact_sensitivity(&pieces, NoiseAxis::Hyperfine, coupling);
    let de = exact_sensitivity(&pieces, NoiseAxis::Charge, coupling);
    dh.iter().chain(de.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
}

/// The lift under which `params` best cancels first-order noise, for
/// parameters that did not come with one (e.g. a network prediction).
/// Ties go to the lower index.
pub fn select_lift(params: &SupcodeParams, angles: &XzxAngles, coupling: ChargeCoupling) -> (AngleLift, XzxAngles) {
    AngleLift::all()
        .map(|l| {
            let a = l.apply(angles);
            (l, a, first_order_norm(params, &a, coupling))
        })
        .fold(None, |best: Option<(AngleLift, XzxAngles, f64)>, cur| match best {
            Some(b) if b.2 <= cur.2 => Some(b),
            _ => Some(cur),
        })
        .map(|(l, a, _)| (l, a))
        .expect("eight lifts")
}
