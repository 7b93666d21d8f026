//! Square-pulse evolution under static hyperfine and charge noise.
//!
//! A piece with exchange `J` and nominal angle `φ` runs for `φ/√(1+J²)` (in
//! units of `1/h`, with `h = 1`) under
//! `H = (1+δh)σx/2 + (J+δJ)σz/2`. Charge noise enters through the detuning as
//! `δJ`, whose dependence on `J` is set by [`ChargeCoupling`].

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::su2::{exp_pauli, gate_error, Unitary2};

/// One square pulse: exchange value (units of `h`) and nominal rotation angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub exchange: f64,
    pub angle: f64,
}

impl Piece {
    pub fn new(exchange: f64, angle: f64) -> Self {
        Self { exchange, angle }
    }

    pub fn duration(&self) -> f64 {
        self.angle / (1.0 + self.exchange * self.exchange).sqrt()
    }
}

/// Pieces in operator-notation order: the first piece is the leftmost factor
/// and therefore acts last in time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pieces: Vec<Piece>,
}

impl PulseSequence {
    pub fn new(pieces: Vec<Piece>) -> Result<Self> {
        for (k, p) in pieces.iter().enumerate() {
            if !(p.exchange.is_finite() && p.angle.is_finite()) {
                return Err(Error::Domain(format!("piece {k} is not finite: {p:?}")));
            }
            if p.exchange < 0.0 || p.angle < 0.0 {
                return Err(Error::Domain(format!(
                    "piece {k} has negative exchange or angle: J={}, φ={}",
                    p.exchange, p.angle
                )));
            }
        }
        Ok(Self { pieces })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.pieces.iter().map(Piece::duration).sum()
    }

    /// Operator product `self · other`: `other` is applied first in time.
    pub fn concat(&self, other: &PulseSequence) -> PulseSequence {
        let mut pieces = self.pieces.clone();
        pieces.extend_from_slice(&other.pieces);
        PulseSequence { pieces }
    }

    /// Pieces in the order they are applied, with their start times.
    pub fn time_profile(&self) -> Vec<(f64, Piece)> {
        let mut t = 0.0;
        self.pieces
            .iter()
            .rev()
            .map(|p| {
                let start = t;
                t += p.duration();
                (start, *p)
            })
            .collect()
    }
}

/// Static noise shifts: `h → 1 + δh`, detuning `ε → ε + δε`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub delta_h: f64,
    pub delta_eps: f64,
}

impl NoisePoint {
    pub const ZERO: NoisePoint = NoisePoint { delta_h: 0.0, delta_eps: 0.0 };

    pub fn new(delta_h: f64, delta_eps: f64) -> Self {
        Self { delta_h, delta_eps }
    }

    pub fn along(axis: NoiseAxis, value: f64) -> Self {
        match axis {
            NoiseAxis::Hyperfine => Self::new(value, 0.0),
            NoiseAxis::Charge => Self::new(0.0, value),
        }
    }
}

/// How a detuning shift `δε` perturbs the exchange of a piece.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargeCoupling {
    /// `δJ = J·δε`, from an exponential `J(ε)`; pieces at `J = 0` are immune.
    #[default]
    Proportional,
    /// `δJ = δε` on every piece with `J > 0`, none at `J = 0`.
    Gated,
}

impl ChargeCoupling {
    pub fn delta_exchange(self, exchange: f64, delta_eps: f64) -> f64 {
        match self {
            ChargeCoupling::Proportional => exchange * delta_eps,
            ChargeCoupling::Gated if exchange > 0.0 => delta_eps,
            ChargeCoupling::Gated => 0.0,
        }
    }

    /// `∂δJ/∂δε` for a piece with exchange `J`.
    pub fn slope(self, exchange: f64) -> f64 {
        self.delta_exchange(exchange, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseAxis {
    Hyperfine,
    Charge,
}

impl NoiseAxis {
    pub fn name(self) -> &'static str {
        match self {
            NoiseAxis::Hyperfine => "delta_h",
            NoiseAxis::Charge => "delta_eps",
        }
    }
}

impl std::str::FromStr for NoiseAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" | "dh" | "delta_h" | "hyperfine" => Ok(NoiseAxis::Hyperfine),
            "eps" | "de" | "delta_eps" | "charge" => Ok(NoiseAxis::Charge),
            other => Err(Error::Domain(format!("unknown noise axis '{other}'"))),
        }
    }
}

/// Rotation vector `v` such that the piece evolves as `exp(−i v·σ/2)`.
pub fn piece_generator(exchange: f64, angle: f64, noise: NoisePoint, coupling: ChargeCoupling) -> [f64; 3] {
    let t = angle / (1.0 + exchange * exchange).sqrt();
    let dj = coupling.delta_exchange(exchange, noise.delta_eps);
    [(1.0 + noise.delta_h) * t, 0.0, (exchange + dj) * t]
}

/// Single-piece evolution with proportional charge coupling.
pub fn evolve_piece(exchange: f64, angle: f64, noise: NoisePoint) -> Unitary2 {
    evolve_piece_with(exchange, angle, noise, ChargeCoupling::Proportional)
}

pub fn evolve_piece_with(exchange: f64, angle: f64, noise: NoisePoint, coupling: ChargeCoupling) -> Unitary2 {
    exp_pauli(piece_generator(exchange, angle, noise, coupling))
}

pub fn evolve_sequence(seq: &PulseSequence, noise: NoisePoint) -> Unitary2 {
    evolve_sequence_with(seq, noise, ChargeCoupling::Proportional)
}

pub fn evolve_sequence_with(seq: &PulseSequence, noise: NoisePoint, coupling: ChargeCoupling) -> Unitary2 {
    evolve_pieces(seq.pieces(), noise, coupling)
}

pub(crate) fn evolve_pieces(pieces: &[Piece], noise: NoisePoint, coupling: ChargeCoupling) -> Unitary2 {
    pieces.iter().fold(Unitary2::IDENTITY, |acc, p| {
        acc * evolve_piece_with(p.exchange, p.angle, noise, coupling)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub noise: f64,
    pub gate_error: f64,
}

/// Gate error against `target` at each grid value of one noise channel, the
/// other held at zero.
pub fn noise_sweep(
    seq: &PulseSequence,
    axis: NoiseAxis,
    grid: &[f64],
    target: &Unitary2,
    coupling: ChargeCoupling,
) -> Vec<SweepPoint> {
    grid.par_iter()
        .map(|&value| {
            let u = evolve_sequence_with(seq, NoisePoint::along(axis, value), coupling);
            SweepPoint { noise: value, gate_error: gate_error(&u, target) }
        })
        .collect()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2, "log_grid needs 0 < lo < hi and n ≥ 2");
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Fixed fit window for slope estimates, one decade of noise amplitude.
pub const SLOPE_WINDOW: (f64, f64) = (1e-3, 1e-2);

/// Least-squares slope of `ln Δ` against `ln |δ|` over points with
/// `lo ≤ |δ| ≤ hi` and `Δ > 0`. `None` when fewer than two points qualify.
pub fn log_log_slope(points: &[SweepPoint], lo: f64, hi: f64) -> Option<f64> {
    let xy: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| {
            let a = p.noise.abs();
            a >= lo * (1.0 - 1e-12) && a <= hi * (1.0 + 1e-12) && p.gate_error > 0.0
        })
        .map(|p| (p.noise.abs().ln(), p.gate_error.ln()))
        .collect();
    if xy.len() < 2 {
        return None;
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Writes `noise_value,gate_error,sequence_id` rows, header included when
/// `header` is set.
pub fn write_sweep_csv<W: Write>(out: W, sequence_id: &str, points: &[SweepPoint], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record(["noise_value", "gate_error", "sequence_id"])?;
    }
    for p in points {
        w.write_record([format!("{:e}", p.noise), format!("{:e}", p.gate_error), sequence_id.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

const SEQUENCE_HEADER: [&str; 5] = ["index", "exchange", "angle", "duration", "t_start"];

/// Writes `index,exchange,angle,duration,t_start` rows in operator order;
/// `t_start` is when the piece begins in time.
pub fn write_sequence_csv<W: Write>(out: W, seq: &PulseSequence) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SEQUENCE_HEADER)?;
    let total = seq.total_duration();
    let mut end = total;
    for (k, p) in seq.pieces().iter().enumerate() {
        let start = end - p.duration();
        w.write_record([k.to_string(), format!("{:?}", p.exchange), format!("{:?}", p.angle), format!("{:?}", p.duration()), format!("{:?}", start.max(0.0))])?;
        end = start;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Reads a file written by [`write_sequence_csv`]; only `exchange` and
/// `angle` are used.
pub fn read_sequence_csv<R: Read>(input: R, path: &Path) -> Result<PulseSequence> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != SEQUENCE_HEADER {
        return Err(Error::parse(path, 1, format!("expected header {}", SEQUENCE_HEADER.join(","))));
    }
    let mut pieces = Vec::new();
    for (k, row) in r.records().enumerate() {
        let line = k + 2;
        let row = row.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            row.get(i)
                .ok_or_else(|| Error::parse(path, line, format!("missing column {}", SEQUENCE_HEADER[i])))?
                .trim()
                .parse()
                .map_err(|e| Error::parse(path, line, format!("{}: {e}", SEQUENCE_HEADER[i])))
        };
        pieces.push(Piece::new(field(1)?, field(2)?));
    }
    PulseSequence::new(pieces).map_err(|e| Error::parse(path, 1, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::su2::rotation;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn bare_pieces_match_rotations() {
        let u = evolve_piece(0.0, PI, NoisePoint::ZERO);
        assert!(u.max_abs_diff(&rotation([1.0, 0.0, 0.0], PI).unwrap()) < 1e-15);
        let s = 0.5f64.sqrt();
        let u = evolve_piece(1.0, PI, NoisePoint::ZERO);
        assert!(u.max_abs_diff(&rotation([s, 0.0, s], PI).unwrap()) < 1e-15);
    }

    #[test]
    fn hyperfine_noise_stretches_x_rotation() {
        let u = evolve_piece(0.0, PI, NoisePoint::new(0.01, 0.0));
        let expected = rotation([1.0, 0.0, 0.0], PI * 1.01).unwrap();
        assert!(u.max_abs_diff(&expected) < 1e-15);
        // J = 0 pieces see no charge noise under either coupling.
        let quiet = evolve_piece(0.0, 1.7, NoisePoint::new(0.0, 0.3));
        assert!(quiet.max_abs_diff(&evolve_piece(0.0, 1.7, NoisePoint::ZERO)) < 1e-15);
        let gated = evolve_piece_with(0.0, 1.7, NoisePoint::new(0.0, 0.3), ChargeCoupling::Gated);
        assert!(gated.max_abs_diff(&quiet) < 1e-15);
    }

    #[test]
    fn empty_sequence_is_identity() {
        let u = evolve_sequence(&PulseSequence::empty(), NoisePoint::new(0.1, 0.1));
        assert_eq!(u, Unitary2::IDENTITY);
    }

    #[test]
    fn rejects_negative_pieces() {
        assert!(PulseSequence::new(vec![Piece::new(-1.0, 1.0)]).is_err());
        assert!(PulseSequence::new(vec![Piece::new(1.0, -0.1)]).is_err());
        assert!(PulseSequence::new(vec![Piece::new(f64::NAN, 0.1)]).is_err());
    }

    #[test]
    fn concat_is_operator_product() {
        let a = PulseSequence::new(vec![Piece::new(0.0, 1.0), Piece::new(2.0, 0.4)]).unwrap();
        let b = PulseSequence::new(vec![Piece::new(1.0, 3.0), Piece::new(0.5, 2.2)]).unwrap();
        let noise = NoisePoint::new(0.02, -0.03);
        let joined = evolve_sequence(&a.concat(&b), noise);
        let product = evolve_sequence(&a, noise) * evolve_sequence(&b, noise);
        assert!(joined.max_abs_diff(&product) < 1e-12);
    }

    #[test]
    fn time_profile_runs_right_to_left() {
        let seq = PulseSequence::new(vec![Piece::new(0.0, 1.0), Piece::new(1.0, PI)]).unwrap();
        let prof = seq.time_profile();
        assert_eq!(prof[0].1.exchange, 1.0);
        assert_abs_diff_eq!(prof[1].0, PI / 2f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(seq.total_duration(), 1.0 + PI / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let grid = log_grid(1e-3, 1e-2, 9);
        let pts: Vec<SweepPoint> = grid.iter().map(|&d| SweepPoint { noise: d, gate_error: 3.0 * d.powi(4) }).collect();
        assert_abs_diff_eq!(log_log_slope(&pts, 1e-3, 1e-2).unwrap(), 4.0, epsilon = 1e-10);
        assert!(log_log_slope(&pts[..1], 1e-3, 1e-2).is_none());
    }

    #[test]
    fn sweep_at_zero_noise_is_decomposition_error() {
        let seq = PulseSequence::new(vec![Piece::new(0.0, 1.0)]).unwrap();
        let target = rotation([1.0, 0.0, 0.0], 1.0).unwrap();
        let pts = noise_sweep(&seq, NoiseAxis::Charge, &[0.0], &target, ChargeCoupling::Proportional);
        assert!(pts[0].gate_error < 1e-15);
    }

    #[test]
    fn sweep_csv_has_fixed_columns() {
        let mut buf = Vec::new();
        let pts = [SweepPoint { noise: 0.001, gate_error: 2.5e-7 }];
        write_sweep_csv(&mut buf, "naive", &pts, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "noise_value,gate_error,sequence_id\n1e-3,2.5e-7,naive\n");
    }

    #[test]
    fn sequence_csv_round_trips() {
        let seq = PulseSequence::new(vec![Piece::new(0.0, 1.25), Piece::new(1.0, PI), Piece::new(0.3, 4.0 * PI)]).unwrap();
        let mut bytes = Vec::new();
        write_sequence_csv(&mut bytes, &seq).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "index,exchange,angle,duration,t_start");
        // the last operator factor starts first in time
        assert!(text.lines().last().unwrap().ends_with(",0.0"));
        assert_eq!(read_sequence_csv(&bytes[..], Path::new("mem")).unwrap(), seq);
    }

    #[test]
    fn malformed_sequence_rows_report_their_line() {
        let bad = "index,exchange,angle,duration,t_start\n0,0.5,1.0,0,0\n1,oops,1.0,0,0\n";
        match read_sequence_csv(bad.as_bytes(), Path::new("seq.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(read_sequence_csv("a,b\n".as_bytes(), Path::new("seq.csv")).is_err());
    }
}
