//! Numerical checks on `Y_λ(ω) = L(ω) + (λ/2)ω²` for scalar losses.
//!
//! A local minimum `ω*` of `Y_λ` satisfies `L'(ω*) + λω* = 0`, so along the
//! branch `λ(ω) = −L'(ω)/ω` and
//! `dλ/dω = (L'(ω) − ωL''(ω))/ω²`, which at the minimum equals
//! `−(L''(ω) + λ)/ω`. With positive curvature the sign is opposite to `ω`:
//! raising `λ` moves the minimum toward zero.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

pub const STEP_TOL: f64 = 1e-12;
pub const MAX_ITERS: usize = 200;
pub const GRAD_TOL: f64 = 1e-10;
const GRID_POINTS: usize = 256;

pub trait ScalarLoss: Send + Sync {
    fn name(&self) -> String;
    fn value(&self, w: f64) -> f64;
    fn d1(&self, w: f64) -> f64;
    fn d2(&self, w: f64) -> f64;
}

/// `k(ω − c)²/2`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic {
    pub center: f64,
    pub curvature: f64,
}

impl Quadratic {
    pub fn unit() -> Self {
        Quadratic { center: 1.0, curvature: 1.0 }
    }

    /// Closed-form minimizer `kc/(k + λ)`.
    pub fn argmin(&self, lambda: f64) -> f64 {
        self.curvature * self.center / (self.curvature + lambda)
    }
}

impl ScalarLoss for Quadratic {
    fn name(&self) -> String {
        format!("quadratic(c={},k={})", self.center, self.curvature)
    }
    fn value(&self, w: f64) -> f64 {
        0.5 * self.curvature * (w - self.center).powi(2)
    }
    fn d1(&self, w: f64) -> f64 {
        self.curvature * (w - self.center)
    }
    fn d2(&self, _w: f64) -> f64 {
        self.curvature
    }
}

/// `ω⁴/4 − ω²/2`, minima at ±1.
#[derive(Debug, Clone, Copy)]
pub struct DoubleWell;

impl ScalarLoss for DoubleWell {
    fn name(&self) -> String {
        "double-well".into()
    }
    fn value(&self, w: f64) -> f64 {
        w.powi(4) / 4.0 - w * w / 2.0
    }
    fn d1(&self, w: f64) -> f64 {
        w * w * w - w
    }
    fn d2(&self, w: f64) -> f64 {
        3.0 * w * w - 1.0
    }
}

/// `cosh(ω − c)`.
#[derive(Debug, Clone, Copy)]
pub struct Cosh {
    pub center: f64,
}

impl ScalarLoss for Cosh {
    fn name(&self) -> String {
        format!("cosh(c={})", self.center)
    }
    fn value(&self, w: f64) -> f64 {
        (w - self.center).cosh()
    }
    fn d1(&self, w: f64) -> f64 {
        (w - self.center).sinh()
    }
    fn d2(&self, w: f64) -> f64 {
        (w - self.center).cosh()
    }
}

/// `ln(1 + e^{−mω})`. Has no minimum without regularization.
#[derive(Debug, Clone, Copy)]
pub struct Logistic {
    pub margin: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ScalarLoss for Logistic {
    fn name(&self) -> String {
        format!("logistic(m={})", self.margin)
    }
    fn value(&self, w: f64) -> f64 {
        let x = -self.margin * w;
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
    fn d1(&self, w: f64) -> f64 {
        -self.margin * sigmoid(-self.margin * w)
    }
    fn d2(&self, w: f64) -> f64 {
        let m = self.margin;
        m * m * sigmoid(m * w) * sigmoid(-m * w)
    }
}

/// `Σ a_i ωⁱ`.
#[derive(Debug, Clone)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl ScalarLoss for Polynomial {
    fn name(&self) -> String {
        format!("polynomial{:?}", self.coeffs)
    }
    fn value(&self, w: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &a| acc * w + a)
    }
    fn d1(&self, w: f64) -> f64 {
        self.coeffs.iter().enumerate().skip(1).rev().fold(0.0, |acc, (i, &a)| acc * w + i as f64 * a)
    }
    fn d2(&self, w: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (i, &a)| acc * w + (i * (i - 1)) as f64 * a)
    }
}

/// `L(−ω)`: moves every minimum to the opposite sign.
pub struct Mirrored<L>(pub L);

impl<L: ScalarLoss> ScalarLoss for Mirrored<L> {
    fn name(&self) -> String {
        format!("mirrored-{}", self.0.name())
    }
    fn value(&self, w: f64) -> f64 {
        self.0.value(-w)
    }
    fn d1(&self, w: f64) -> f64 {
        -self.0.d1(-w)
    }
    fn d2(&self, w: f64) -> f64 {
        self.0.d2(-w)
    }
}

pub fn objective(loss: &dyn ScalarLoss, lambda: f64, w: f64) -> f64 {
    loss.value(w) + 0.5 * lambda * w * w
}

fn y1(loss: &dyn ScalarLoss, lambda: f64, w: f64) -> f64 {
    loss.d1(w) + lambda * w
}

fn y2(loss: &dyn ScalarLoss, lambda: f64, w: f64) -> f64 {
    loss.d2(w) + lambda
}

/// Locates a local minimum of `Y_λ` inside `[lo, hi]`.
///
/// If `Y'` does not go from negative to positive across the ends, the interval
/// is scanned on a uniform grid for the first such crossing. The crossing is
/// then refined by Newton steps kept inside the shrinking bracket, falling back
/// to bisection.
pub fn find_local_min(loss: &dyn ScalarLoss, lambda: f64, bracket: (f64, f64)) -> Result<f64> {
    let (lo, hi) = bracket;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("λ = {lambda} must be finite and nonnegative")));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::Bracket { lo, hi });
    }
    let (mut a, mut b) = crossing(loss, lambda, lo, hi).ok_or(Error::Bracket { lo, hi })?;
    let fa = y1(loss, lambda, a);
    if fa == 0.0 {
        return verify(loss, lambda, a);
    }
    let fb = y1(loss, lambda, b);
    if fb == 0.0 {
        return verify(loss, lambda, b);
    }

    let mut x = 0.5 * (a + b);
    for _ in 0..MAX_ITERS {
        let f = y1(loss, lambda, x);
        if f == 0.0 {
            break;
        }
        if f < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let d = y2(loss, lambda, x);
        let newton = x - f / d;
        let next = if d > 0.0 && newton > a && newton < b { newton } else { 0.5 * (a + b) };
        let step = (next - x).abs();
        x = next;
        if step < STEP_TOL || b - a < STEP_TOL {
            break;
        }
    }
    verify(loss, lambda, x)
}

fn crossing(loss: &dyn ScalarLoss, lambda: f64, lo: f64, hi: f64) -> Option<(f64, f64)> {
    if y1(loss, lambda, lo) <= 0.0 && y1(loss, lambda, hi) >= 0.0 {
        return Some((lo, hi));
    }
    let step = (hi - lo) / GRID_POINTS as f64;
    let mut prev = lo;
    let mut fprev = y1(loss, lambda, lo);
    for i in 1..=GRID_POINTS {
        let x = if i == GRID_POINTS { hi } else { lo + step * i as f64 };
        let f = y1(loss, lambda, x);
        if fprev <= 0.0 && f >= 0.0 && (fprev < 0.0 || f > 0.0) {
            return Some((prev, x));
        }
        prev = x;
        fprev = f;
    }
    None
}

fn verify(loss: &dyn ScalarLoss, lambda: f64, x: f64) -> Result<f64> {
    let g = y1(loss, lambda, x);
    let c = y2(loss, lambda, x);
    if c <= 0.0 {
        return Err(Error::Saddle { omega: x, curvature: c });
    }
    if !(g.abs() < GRAD_TOL) {
        return Err(Error::Domain(format!("refinement stalled at ω = {x} with |Y'| = {:e}", g.abs())));
    }
    Ok(x)
}

/// `λ = −L'(ω)/ω`, the regularization making `ω` stationary.
pub fn lambda_of_omega(loss: &dyn ScalarLoss, w: f64) -> Result<f64> {
    if w == 0.0 {
        return Err(Error::Domain("λ(ω) is singular at ω = 0".into()));
    }
    Ok(-loss.d1(w) / w)
}

/// `dλ/dω = (L'(ω) − ωL''(ω))/ω²` along the stationary branch.
pub fn dlambda_domega(loss: &dyn ScalarLoss, w: f64) -> Result<f64> {
    if w == 0.0 {
        return Err(Error::Domain("dλ/dω is singular at ω = 0".into()));
    }
    Ok((loss.d1(w) - w * loss.d2(w)) / (w * w))
}

/// `−(L''(ω) + λ)/ω`, the same derivative rewritten with the stationarity condition.
pub fn dlambda_domega_at_min(loss: &dyn ScalarLoss, lambda: f64, w: f64) -> Result<f64> {
    if w == 0.0 {
        return Err(Error::Domain("dλ/dω is singular at ω = 0".into()));
    }
    Ok(-(loss.d2(w) + lambda) / w)
}

#[derive(Debug, Clone, Serialize)]
pub struct TracePoint {
    pub lambda: f64,
    pub omega: f64,
    pub y_prime: f64,
    pub y_second: f64,
    /// `None` when the tracked minimum sits at zero.
    pub dlambda_domega: Option<f64>,
    pub dlambda_at_min: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Truncation {
    pub lambda: f64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimumTrace {
    pub family: String,
    pub points: Vec<TracePoint>,
    pub truncated: Option<Truncation>,
    pub step_tol: f64,
    pub grad_tol: f64,
}

impl MinimumTrace {
    /// Steps where `|ω|` failed to drop strictly, skipping steps that end at zero.
    pub fn non_decreasing_steps(&self) -> Vec<usize> {
        self.points
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1].omega != 0.0 && !(w[1].omega.abs() < w[0].omega.abs()))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Largest gap between the two derivative forms over the trace.
    pub fn max_identity_gap(&self) -> f64 {
        self.points
            .iter()
            .filter_map(|p| Some((p.dlambda_domega? - p.dlambda_at_min?).abs()))
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_traces_csv(std::slice::from_ref(self), out)
    }
}

pub fn write_traces_csv<W: Write>(traces: &[MinimumTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["family", "lambda", "omega", "y_prime", "y_second", "dlambda_domega"])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for t in traces {
        for p in &t.points {
            w.write_record([
                t.family.clone(),
                format!("{:e}", p.lambda),
                format!("{:e}", p.omega),
                format!("{:e}", p.y_prime),
                format!("{:e}", p.y_second),
                opt(p.dlambda_domega),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn trace_point(loss: &dyn ScalarLoss, lambda: f64, w: f64) -> TracePoint {
    TracePoint {
        lambda,
        omega: w,
        y_prime: y1(loss, lambda, w),
        y_second: y2(loss, lambda, w),
        dlambda_domega: dlambda_domega(loss, w).ok(),
        dlambda_at_min: dlambda_domega_at_min(loss, lambda, w).ok(),
    }
}

/// Tracks a local minimum while `λ` moves from `lambda_start` to `lambda_end`
/// in `steps` equal increments (`steps + 1` points).
///
/// Each later minimum is searched in `[ω − |ω|/2, ω + |ω|/2]` around the
/// previous one, which never crosses zero. When the minimum leaves that window
/// or stops being a minimum the trace ends there with a [`Truncation`].
pub fn sweep_lambda(
    loss: &dyn ScalarLoss,
    lambda_start: f64,
    lambda_end: f64,
    steps: usize,
    bracket: (f64, f64),
) -> Result<MinimumTrace> {
    if !(lambda_start >= 0.0 && lambda_end >= lambda_start && lambda_end.is_finite()) {
        return Err(Error::Domain(format!("invalid sweep {lambda_start} → {lambda_end}")));
    }
    let mut trace = MinimumTrace {
        family: loss.name(),
        points: Vec::new(),
        truncated: None,
        step_tol: STEP_TOL,
        grad_tol: GRAD_TOL,
    };
    let w0 = find_local_min(loss, lambda_start, bracket)?;
    trace.points.push(trace_point(loss, lambda_start, w0));
    if lambda_end == lambda_start || steps == 0 {
        return Ok(trace);
    }
    let dl = (lambda_end - lambda_start) / steps as f64;
    let mut w = w0;
    for k in 1..=steps {
        let lambda = if k == steps { lambda_end } else { lambda_start + dl * k as f64 };
        if w == 0.0 {
            trace.truncated = Some(Truncation { lambda, reason: "minimum reached ω = 0".into() });
            break;
        }
        let r = 0.5 * w.abs();
        match find_local_min(loss, lambda, (w - r, w + r)) {
            Ok(next) => {
                trace.points.push(trace_point(loss, lambda, next));
                w = next;
            }
            Err(e) => {
                trace.truncated = Some(Truncation { lambda, reason: e.to_string() });
                break;
            }
        }
    }
    Ok(trace)
}

pub struct SweepCase {
    pub loss: Box<dyn ScalarLoss>,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub steps: usize,
    pub bracket: (f64, f64),
}

impl SweepCase {
    pub fn run(&self) -> Result<MinimumTrace> {
        sweep_lambda(self.loss.as_ref(), self.lambda_start, self.lambda_end, self.steps, self.bracket)
    }
}

fn case(loss: impl ScalarLoss + 'static, range: (f64, f64), steps: usize, bracket: (f64, f64)) -> SweepCase {
    SweepCase { loss: Box::new(loss), lambda_start: range.0, lambda_end: range.1, steps, bracket }
}

/// Five loss families, each tracked from a positive and a negative minimum,
/// with `Δλ = 0.05`.
pub fn standard_suite() -> Vec<SweepCase> {
    let mirror = |b: (f64, f64)| (-b.1, -b.0);
    let q = Quadratic::unit();
    let sq = Quadratic { center: 2.5, curvature: 0.4 };
    let ch = Cosh { center: 1.5 };
    let lg = Logistic { margin: 2.0 };
    vec![
        case(q, (0.0, 3.0), 60, (0.0, 2.0)),
        case(Mirrored(q), (0.0, 3.0), 60, mirror((0.0, 2.0))),
        case(sq, (0.0, 2.0), 40, (0.0, 5.0)),
        case(Mirrored(sq), (0.0, 2.0), 40, mirror((0.0, 5.0))),
        case(DoubleWell, (0.0, 0.9), 18, (0.5, 2.0)),
        case(Mirrored(DoubleWell), (0.0, 0.9), 18, mirror((0.5, 2.0))),
        case(ch, (0.0, 2.0), 40, (0.0, 3.0)),
        case(Mirrored(ch), (0.0, 2.0), 40, mirror((0.0, 3.0))),
        case(lg, (0.05, 2.0), 39, (1e-3, 10.0)),
        case(Mirrored(lg), (0.05, 2.0), 39, mirror((1e-3, 10.0))),
    ]
}

/// Suite cases whose family name starts with `prefix` (mirrored variants included).
pub fn suite_family(prefix: &str) -> Vec<SweepCase> {
    standard_suite()
        .into_iter()
        .filter(|c| {
            let name = c.loss.name();
            name.starts_with(prefix) || name.strip_prefix("mirrored-").is_some_and(|n| n.starts_with(prefix))
        })
        .collect()
}
