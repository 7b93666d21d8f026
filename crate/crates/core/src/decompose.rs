//! x-z-x decomposition of a target rotation and its five-piece pulse.
//!
//! A target `R(r̂, θ)` is written exactly (not just up to phase) as
//! `U(0,φa) U(1,π) U(0,φb) U(1,π) U(0,φc) = −Rx(φa) Rz(φb) Rx(φc)`, using the
//! Hadamard frame `Rz(φ) = −H Rx(φ) H` with `H = R((x̂+ẑ)/√2, π)`.
//!
//! Writing the target as `q0 I − i q·σ` and the half angles
//! `b = φb/2`, `s = (φa+φc)/2`, `d = (φa−φc)/2`, the matrix identity reduces to
//!
//! ```text
//! cos b · (cos s, sin s) = (−q0, −q1)
//! sin b · (cos d, sin d) = (−q3,  q2)
//! ```
//!
//! which is solved with two-argument arctangents and `b ∈ [0, π/2]`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, Bounds, LmConfig};
use crate::pulsesim::{Piece, PulseSequence};
use crate::su2::{rotation_unchecked, AxisAngle, Unitary2};

const FOUR_PI: f64 = 4.0 * PI;

/// Below this, `cos b` or `sin b` is treated as zero and the corresponding
/// half angle is underdetermined.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Auxiliary angles `{φa, φb, φc}`, each kept in `[0, 4π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XzxAngles {
    pub phi_a: f64,
    pub phi_b: f64,
    pub phi_c: f64,
}

impl XzxAngles {
    /// Builds canonicalised angles (reduced into `[0, 4π)`).
    pub fn new(phi_a: f64, phi_b: f64, phi_c: f64) -> Self {
        Self { phi_a: canonical_angle(phi_a), phi_b: canonical_angle(phi_b), phi_c: canonical_angle(phi_c) }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.phi_a, self.phi_b, self.phi_c]
    }

    /// Operator realised by the five-piece pulse at zero noise.
    pub fn reconstruct(&self) -> Unitary2 {
        let x = [1.0, 0.0, 0.0];
        let h = hadamard_frame();
        rotation_unchecked(x, self.phi_a)
            * h
            * rotation_unchecked(x, self.phi_b)
            * h
            * rotation_unchecked(x, self.phi_c)
    }
}

/// Reduces an angle into `[0, 4π)`; `R(x̂, φ)` has period 4π so this is exact.
pub fn canonical_angle(phi: f64) -> f64 {
    let r = phi.rem_euclid(FOUR_PI);
    if r >= FOUR_PI {
        0.0
    } else {
        r
    }
}

/// `R((x̂+ẑ)/√2, π)`.
pub fn hadamard_frame() -> Unitary2 {
    rotation_unchecked([FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2], PI)
}

/// Which half angle was free when the solution was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Singularity {
    /// `sin(φb/2) = 0`: only `φa + φc` is fixed.
    DifferenceFree,
    /// `cos(φb/2) = 0`: only `φa − φc` is fixed.
    SumFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XzxSolution {
    pub angles: XzxAngles,
    /// `(s + d, 2b, s − d)` before canonicalization, with `s ∈ (−π, π]`,
    /// `d ∈ (−π, π]`, `b ∈ [0, π/2]`. Continuous in the target over the rotation
    /// domain, `θ ∈ {0, 2π}` included, except across `α = −π/2` with `θ < π`.
    pub principal: [f64; 3],
    pub singularity: Option<Singularity>,
}

impl XzxSolution {
    pub fn is_singular(&self) -> bool {
        self.singularity.is_some()
    }
}

/// Closed-form solution of the decomposition equations for `target`.
pub fn solve_xzx(target: &AxisAngle) -> Result<XzxSolution> {
    if !target.in_domain(1e-9) {
        return Err(Error::Domain(format!(
            "target {target:?} outside α ∈ [−π,0], β ∈ [0,π], θ ∈ [0,2π]"
        )));
    }
    let n = target.axis();
    let (sh, q0) = (0.5 * target.theta).sin_cos();
    // At θ ∈ {0, 2π} the vector part vanishes; the floor keeps its
    // direction so the free half angle takes its limit from inside the domain.
    let t = sh.max(f64::MIN_POSITIVE);
    let mut sol = solve_quaternion(q0, t * n[0], t * n[1], t * n[2]);
    if sh < f64::MIN_POSITIVE {
        // the floor leaves a denormal φb; the limit is exactly zero
        sol.principal[1] = 0.0;
        sol.angles.phi_b = 0.0;
    }
    Ok(sol)
}

/// Same as [`solve_xzx`] for an arbitrary special-unitary operator.
pub fn solve_xzx_unitary(u: &Unitary2) -> XzxSolution {
    let [t0, tx, ty, tz] = u.pauli_decompose();
    solve_quaternion(t0.re, -tx.im, -ty.im, -tz.im)
}

fn solve_quaternion(q0: f64, q1: f64, q2: f64, q3: f64) -> XzxSolution {

    let cos_b = q0.hypot(q1);
    let sin_b = q2.hypot(q3);
    let b = sin_b.atan2(cos_b);

    let mut singularity = None;
    if cos_b < SINGULAR_TOL {
        singularity = Some(Singularity::SumFree);
    }
    if sin_b < SINGULAR_TOL {
        singularity = Some(Singularity::DifferenceFree);
    }
    // a free half angle keeps whatever direction its pair still carries
    let s = if cos_b == 0.0 { 0.0 } else { (-q1).atan2(-q0) };
    let d = if sin_b == 0.0 { 0.0 } else { q2.atan2(-q3) };

    let principal = [s + d, 2.0 * b, s - d];
    XzxSolution { angles: XzxAngles::new(principal[0], principal[1], principal[2]), principal, singularity }
}

/// Real and imaginary parts of the three independent entries of
/// `five_piece(angles) − target`.
pub fn equation_residuals(angles: [f64; 3], target: &Unitary2) -> [f64; 6] {
    let [pa, pb, pc] = angles;
    let (sb, cb) = (0.5 * pb).sin_cos();
    let (ss, cs) = (0.5 * (pa + pc)).sin_cos();
    let (sd, cd) = (0.5 * (pa - pc)).sin_cos();
    let rhs = [
        (-cb * cs, sb * cd),
        (-sb * sd, cb * ss),
        (sb * sd, cb * ss),
    ];
    let lhs = [target.get(0, 0), target.get(0, 1), target.get(1, 0)];
    let mut out = [0.0; 6];
    for k in 0..3 {
        out[2 * k] = rhs[k].0 - lhs[k].re;
        out[2 * k + 1] = rhs[k].1 - lhs[k].im;
    }
    out
}

/// Direct numeric solve of the decomposition equations by multistart
/// Levenberg-Marquardt, independent of the half-angle reduction.
pub fn solve_xzx_least_squares(target: &AxisAngle, seed: u64) -> Result<XzxAngles> {
    let u = target.to_unitary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LmConfig { tolerance: 1e-13, ..LmConfig::default() };
    let bounds = Bounds::unbounded(3);
    let mut best = f64::INFINITY;
    for _ in 0..64 {
        let x0: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..FOUR_PI)).collect();
        let rep = lm::minimize(|x| equation_residuals([x[0], x[1], x[2]], &u).to_vec(), &x0, &bounds, &cfg);
        best = best.min(rep.residual_inf);
        if rep.converged {
            return Ok(XzxAngles::new(rep.params[0], rep.params[1], rep.params[2]));
        }
    }
    Err(Error::NoConvergence { attempts: 64, best_residual: best })
}

/// Axis of a five-piece segment: bare `x̂` (J = 0) or the Hadamard axis (J = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceAxis {
    X,
    XPlusZ,
}

impl PieceAxis {
    pub fn exchange(self) -> f64 {
        match self {
            PieceAxis::X => 0.0,
            PieceAxis::XPlusZ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FivePieceSequence {
    pub pieces: [(PieceAxis, f64); 5],
}

impl FivePieceSequence {
    pub fn to_sequence(&self) -> PulseSequence {
        PulseSequence::new(self.pieces.iter().map(|&(ax, phi)| Piece::new(ax.exchange(), phi)).collect())
            .expect("canonical angles are non-negative")
    }

    pub fn durations(&self) -> [f64; 5] {
        self.pieces.map(|(ax, phi)| Piece::new(ax.exchange(), phi).duration())
    }
}

pub fn expand_five_piece(angles: &XzxAngles) -> FivePieceSequence {
    FivePieceSequence {
        pieces: [
            (PieceAxis::X, angles.phi_a),
            (PieceAxis::XPlusZ, PI),
            (PieceAxis::X, angles.phi_b),
            (PieceAxis::XPlusZ, PI),
            (PieceAxis::X, angles.phi_c),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulsesim::{evolve_sequence, NoisePoint};
    use crate::su2::{gate_error, rotation};

    fn random_target(rng: &mut impl Rng) -> AxisAngle {
        AxisAngle::new(rng.random_range(-PI..0.0), rng.random_range(0.0..PI), rng.random_range(0.0..2.0 * PI))
    }

    /// Oracle: the plain product of three rotations with the Hadamard identity.
    fn three_rotation_product(a: &XzxAngles) -> Unitary2 {
        let x = [1.0, 0.0, 0.0];
        let z = [0.0, 0.0, 1.0];
        (rotation(x, a.phi_a).unwrap() * rotation(z, a.phi_b).unwrap() * rotation(x, a.phi_c).unwrap())
            .scale(num_complex::Complex64::new(-1.0, 0.0))
    }

    #[test]
    fn hadamard_identity_holds() {
        let h = hadamard_frame();
        for phi in [0.0, 0.3, 2.0, 5.5] {
            let lhs = rotation([0.0, 0.0, 1.0], phi).unwrap();
            let rhs = (h * rotation([1.0, 0.0, 0.0], phi).unwrap() * h).scale((-1.0).into());
            assert!(lhs.max_abs_diff(&rhs) < 1e-14);
        }
    }

    #[test]
    fn reconstruction_is_exact_for_random_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = random_target(&mut rng);
            let sol = solve_xzx(&t).unwrap();
            let v = t.to_unitary();
            let w = sol.angles.reconstruct();
            assert!(gate_error(&w, &v) < 1e-10);
            // equality holds without any global phase
            assert!(w.max_abs_diff(&v) < 1e-12);
            assert!(equation_residuals(sol.angles.as_array(), &v).iter().all(|r| r.abs() < 1e-10));
            for phi in sol.angles.as_array() {
                assert!((0.0..FOUR_PI).contains(&phi));
            }
        }
    }

    #[test]
    fn five_piece_equals_three_rotation_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let a = XzxAngles::new(
                rng.random_range(0.0..FOUR_PI),
                rng.random_range(0.0..FOUR_PI),
                rng.random_range(0.0..FOUR_PI),
            );
            let seq = expand_five_piece(&a).to_sequence();
            let u = evolve_sequence(&seq, NoisePoint::ZERO);
            assert!(u.max_abs_diff(&three_rotation_product(&a)) < 1e-12);
            assert!(u.max_abs_diff(&a.reconstruct()) < 1e-12);
        }
    }

    #[test]
    fn literature_target_reconstructs() {
        let t = AxisAngle::new(-PI / 4.0, 2.0 * PI / 3.0, PI / 2.0);
        let sol = solve_xzx(&t).unwrap();
        assert!(sol.singularity.is_none());
        assert!(gate_error(&sol.angles.reconstruct(), &t.to_unitary()) < 1e-10);
        let five = expand_five_piece(&sol.angles);
        let js: Vec<f64> = five.pieces.iter().map(|p| p.0.exchange()).collect();
        assert_eq!(js, vec![0.0, 1.0, 0.0, 1.0, 0.0]);
        let total: f64 = five.durations().iter().sum();
        let expected = sol.angles.phi_a + sol.angles.phi_b + sol.angles.phi_c + 2.0 * PI / 2f64.sqrt();
        assert!((total - expected).abs() < 1e-12);
    }

    #[test]
    fn pure_z_target() {
        for theta in [0.4, 1.0, 2.5, 4.0] {
            let t = AxisAngle::new(-1.0, 0.0, theta);
            let sol = solve_xzx(&t).unwrap();
            let w = sol.angles.reconstruct();
            assert!(gate_error(&w, &rotation([0.0, 0.0, 1.0], theta).unwrap()) < 1e-12);
            // φa = −φc mod 4π: the x pieces cancel, leaving only the z frame
            let sum = canonical_angle(sol.angles.phi_a + sol.angles.phi_c);
            assert!(sum < 1e-9 || (FOUR_PI - sum) < 1e-9 || (sum - 2.0 * PI).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_target_is_flagged_and_exact() {
        let sol = solve_xzx(&AxisAngle::new(-1.0, 1.0, 0.0)).unwrap();
        assert_eq!(sol.singularity, Some(Singularity::DifferenceFree));
        assert!(gate_error(&sol.angles.reconstruct(), &Unitary2::IDENTITY) < 1e-14);
    }

    #[test]
    fn sum_free_singularity() {
        // q0 = q1 = 0: θ = π about an axis in the y-z plane
        let sol = solve_xzx(&AxisAngle::new(-PI / 2.0, 1.0, PI)).unwrap();
        assert_eq!(sol.singularity, Some(Singularity::SumFree));
        let t = AxisAngle::new(-PI / 2.0, 1.0, PI).to_unitary();
        assert!(gate_error(&sol.angles.reconstruct(), &t) < 1e-12);
    }

    #[test]
    fn out_of_domain_is_rejected() {
        assert!(matches!(solve_xzx(&AxisAngle::new(0.5, 1.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_angles_give_identity_up_to_phase() {
        let seq = expand_five_piece(&XzxAngles::new(0.0, 0.0, 0.0)).to_sequence();
        let u = evolve_sequence(&seq, NoisePoint::ZERO);
        assert!(u.max_abs_diff(&Unitary2::IDENTITY.scale((-1.0).into())) < 1e-14);
    }

    #[test]
    fn closed_form_agrees_with_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..40 {
            let t = random_target(&mut rng);
            let closed = solve_xzx(&t).unwrap().angles.reconstruct();
            let numeric = solve_xzx_least_squares(&t, k).unwrap().reconstruct();
            assert!(closed.projective_distance(&numeric) < 1e-8);
        }
    }

    #[test]
    fn solutions_vary_continuously_off_singular_sets() {
        // walk a β line at fixed α, θ; adjacent solutions stay close modulo 4π
        let step = 1e-3;
        let mut prev = solve_xzx(&AxisAngle::new(-1.0, 0.2, 2.0)).unwrap().angles.as_array();
        let mut beta = 0.2;
        while beta < 2.9 {
            beta += step;
            let cur = solve_xzx(&AxisAngle::new(-1.0, beta, 2.0)).unwrap().angles.as_array();
            let jump: f64 = cur
                .iter()
                .zip(prev)
                .map(|(a, b)| {
                    let d = (a - b).rem_euclid(FOUR_PI);
                    d.min(FOUR_PI - d).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            assert!(jump < 10.0 * step, "jump {jump} at β={beta}");
            prev = cur;
        }
    }
}
