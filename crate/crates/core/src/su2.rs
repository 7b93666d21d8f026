//! Exact 2×2 complex linear algebra for single-qubit operators.
//!
//! Every operator is stored as a dense row-major 2×2 complex matrix. Rotations
//! follow the convention `R(n̂, θ) = exp(−i θ n̂·σ / 2)`, so `R(n̂, 2π) = −I`
//! and comparisons between operators are always made projectively (global
//! phase is irrelevant to every metric in this module).

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Tolerance on `|axis| = 1` accepted by [`rotation`].
pub const AXIS_NORM_TOL: f64 = 1e-9;

/// A 2×2 complex matrix `[[a, b], [c, d]]`, row-major.
///
/// Constructors in this module only ever produce unitary matrices; arbitrary
/// matrices (for example finite-difference derivatives) can be built with
/// [`Unitary2::from_entries`] and are then just "2×2 complex matrices".
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Unitary2 {
    m: [Complex64; 4],
}

impl fmt::Debug for Unitary2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.m;
        write!(f, "[[{a:.12}, {b:.12}], [{c:.12}, {d:.12}]]")
    }
}

impl Unitary2 {
    pub const IDENTITY: Unitary2 = Unitary2 { m: [ONE, ZERO, ZERO, ONE] };

    pub fn identity() -> Self {
        Self::IDENTITY
    }

    pub fn from_entries(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Self { m: [a, b, c, d] }
    }

    /// `q0·I − i(qx·σx + qy·σy + qz·σz)` for real `q`; special-unitary when
    /// `q` is a unit quaternion.
    pub fn from_quaternion(q0: f64, qx: f64, qy: f64, qz: f64) -> Self {
        Self {
            m: [
                Complex64::new(q0, -qz),
                Complex64::new(-qy, -qx),
                Complex64::new(qy, -qx),
                Complex64::new(q0, qz),
            ],
        }
    }

    pub fn pauli_x() -> Self {
        Self { m: [ZERO, ONE, ONE, ZERO] }
    }

    pub fn pauli_y() -> Self {
        Self { m: [ZERO, -I, I, ZERO] }
    }

    pub fn pauli_z() -> Self {
        Self { m: [ONE, ZERO, ZERO, -ONE] }
    }

    pub fn entries(&self) -> [Complex64; 4] {
        self.m
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.m[2 * row + col]
    }

    pub fn adjoint(&self) -> Self {
        let [a, b, c, d] = self.m;
        Self { m: [a.conj(), c.conj(), b.conj(), d.conj()] }
    }

    pub fn trace(&self) -> Complex64 {
        self.m[0] + self.m[3]
    }

    pub fn det(&self) -> Complex64 {
        self.m[0] * self.m[3] - self.m[1] * self.m[2]
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self { m: self.m.map(|z| z * s) }
    }

    /// Multiplies by the global phase `e^{iχ}`.
    pub fn with_phase(&self, chi: f64) -> Self {
        self.scale(Complex64::from_polar(1.0, chi))
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut m = self.m;
        for (x, y) in m.iter_mut().zip(other.m) {
            *x += y;
        }
        Self { m }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(-ONE))
    }

    /// Largest entrywise modulus.
    pub fn max_abs(&self) -> f64 {
        self.m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Entrywise distance `max |Aij − Bij|`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.sub(other).max_abs()
    }

    /// Largest entry of `|U†U − I|`.
    pub fn unitarity_defect(&self) -> f64 {
        (self.adjoint() * *self).max_abs_diff(&Self::IDENTITY)
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_defect() <= tol && (self.det().norm() - 1.0).abs() <= tol
    }

    /// Real Pauli coordinates `(t0, tx, ty, tz)` of `A = t0·I + tx·σx + ty·σy + tz·σz`,
    /// each component complex in general.
    pub fn pauli_decompose(&self) -> [Complex64; 4] {
        let [a, b, c, d] = self.m;
        [(a + d) * 0.5, (b + c) * 0.5, (b - c) * I * 0.5, (a - d) * 0.5]
    }

    /// Projective distance `min_χ max|e^{iχ}U − V|` approximated by aligning
    /// the phase of `Tr(V†U)`.
    pub fn projective_distance(&self, other: &Self) -> f64 {
        let overlap = (other.adjoint() * *self).trace();
        let phase = if overlap.norm() > 0.0 { overlap.conj() / overlap.norm() } else { ONE };
        self.scale(phase).max_abs_diff(other)
    }
}

impl Mul for Unitary2 {
    type Output = Unitary2;

    fn mul(self, rhs: Unitary2) -> Unitary2 {
        let [a, b, c, d] = self.m;
        let [e, f, g, h] = rhs.m;
        Unitary2 { m: [a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h] }
    }
}

impl Mul for &Unitary2 {
    type Output = Unitary2;

    fn mul(self, rhs: &Unitary2) -> Unitary2 {
        *self * *rhs
    }
}

/// A rotation axis/angle triple in the target-rotation parametrisation.
///
/// The axis is `r̂ = (cos α sin β, sin α sin β, cos β)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
}

impl AxisAngle {
    pub fn new(alpha: f64, beta: f64, theta: f64) -> Self {
        Self { alpha, beta, theta }
    }

    pub fn axis(&self) -> [f64; 3] {
        let (sa, ca) = self.alpha.sin_cos();
        let (sb, cb) = self.beta.sin_cos();
        [ca * sb, sa * sb, cb]
    }

    /// Whether the triple lies in the sampling domain
    /// `α ∈ [−π, 0]`, `β ∈ [0, π]`, `θ ∈ [0, 2π]` (with slack `tol`).
    pub fn in_domain(&self, tol: f64) -> bool {
        (-PI - tol..=tol).contains(&self.alpha)
            && (-tol..=PI + tol).contains(&self.beta)
            && (-tol..=2.0 * PI + tol).contains(&self.theta)
    }

    pub fn to_unitary(&self) -> Unitary2 {
        rotation_unchecked(self.axis(), self.theta)
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `exp(−i·angle·(axis·σ)/2)` for a unit `axis`.
pub fn rotation(axis: [f64; 3], angle: f64) -> Result<Unitary2> {
    let n = norm3(axis);
    if !n.is_finite() || (n - 1.0).abs() > AXIS_NORM_TOL {
        return Err(Error::Domain(format!("rotation axis must be a unit vector, got norm {n}")));
    }
    if !angle.is_finite() {
        return Err(Error::Domain(format!("rotation angle must be finite, got {angle}")));
    }
    Ok(rotation_unchecked(axis, angle))
}

pub(crate) fn rotation_unchecked(axis: [f64; 3], angle: f64) -> Unitary2 {
    let (s, c) = (0.5 * angle).sin_cos();
    Unitary2::from_quaternion(c, s * axis[0], s * axis[1], s * axis[2])
}

/// `exp(−i (v·σ)/2)` for an arbitrary real 3-vector `v` (not necessarily unit).
///
/// Uses the closed form `cos(|v|/2) I − i sin(|v|/2) v̂·σ`.
pub fn exp_pauli(v: [f64; 3]) -> Unitary2 {
    let theta = norm3(v);
    if theta == 0.0 {
        return Unitary2::IDENTITY;
    }
    let (s, c) = (0.5 * theta).sin_cos();
    let k = s / theta;
    Unitary2::from_quaternion(c, k * v[0], k * v[1], k * v[2])
}

/// Gate error `Δ = 1 − (|Tr(V†U)|² + 2)/6`, the average over uniformly
/// distributed pure input states of `1 − |⟨ψ|V†U|ψ⟩|²`.
pub fn gate_error(actual: &Unitary2, target: &Unitary2) -> f64 {
    let overlap = (target.adjoint() * *actual).trace().norm_sqr();
    (1.0 - (overlap + 2.0) / 6.0).max(0.0)
}

/// Which sign of the SU(2) representative to keep when taking the logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBranch {
    /// Choose the representative with non-negative real trace, giving a
    /// rotation vector of norm at most π.
    #[default]
    MinimalNorm,
    /// Strip the phase with the principal square root of the determinant and
    /// keep the resulting sign; rotation vectors may have norm up to 2π.
    PrincipalPhase,
}

/// Result of [`su2_log_components`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogComponents {
    pub vector: [f64; 3],
    /// Set when the rotation angle is π (to 1e-9) under the minimal-norm
    /// branch, where `c` and `−c` are equally short. The returned vector is
    /// the one whose first non-negligible component is positive.
    pub ambiguous: bool,
}

impl LogComponents {
    pub fn norm(&self) -> f64 {
        norm3(self.vector)
    }
}

/// Rotation-vector coordinates `c` with `U = e^{iχ} exp(−i c·σ/2)`.
pub fn su2_log_components(u: &Unitary2) -> LogComponents {
    su2_log_components_with(u, LogBranch::MinimalNorm)
}

pub fn su2_log_components_with(u: &Unitary2, branch: LogBranch) -> LogComponents {
    let root = u.det().sqrt();
    let v = if root.norm() > 0.0 { u.scale(root.inv()) } else { *u };
    let [t0, tx, ty, tz] = v.pauli_decompose();
    // V = q0 I − i q·σ, so the Pauli coefficients are (q0, −i q).
    let mut q0 = t0.re;
    let mut q = [-tx.im, -ty.im, -tz.im];
    if branch == LogBranch::MinimalNorm && q0 < 0.0 {
        q0 = -q0;
        q = q.map(|x| -x);
    }
    let qn = norm3(q);
    if qn == 0.0 {
        return LogComponents { vector: [0.0; 3], ambiguous: false };
    }
    let angle = 2.0 * qn.atan2(q0);
    let mut vector = q.map(|x| angle * x / qn);
    let ambiguous = branch == LogBranch::MinimalNorm && (angle - PI).abs() < 1e-9;
    if ambiguous {
        let lead = vector.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(0.0);
        if lead < 0.0 {
            vector = vector.map(|x| -x);
        }
    }
    LogComponents { vector, ambiguous }
}

/// Real coordinates `g` of a traceless anti-Hermitian `A = −(i/2) g·σ`.
pub fn anti_hermitian_components(a: &Unitary2) -> [f64; 3] {
    let [_, tx, ty, tz] = a.pauli_decompose();
    [-2.0 * tx.im, -2.0 * ty.im, -2.0 * tz.im]
}
