//! Macroscopic growth laws of the leader degree and their estimators.
//!
//! Three regimes are modelled: power-law nucleation after a critical frame,
//! and the two logarithmic branches of a λ-shaped peak. Each has an ODE form
//! (integrated with fixed-step RK4) and a closed-form solution used for fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::ols;

pub const DEFAULT_DT: f64 = 0.1;
/// Divergence guard around `t_λ`, in trading days.
pub const DEFAULT_GUARD: usize = 3;
pub const DEFAULT_HALF_WIDTH: usize = 50;
pub const MIN_BRANCH_POINTS: usize = 5;
/// Robust z-score of the largest increment below which a jump is not trusted.
pub const MIN_JUMP_CONFIDENCE: f64 = 6.0;

/// A sampled time series with strictly increasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl Series {
    pub fn new(t: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if t.len() != y.len() {
            return Err(Error::Dimension(format!("{} times vs {} values", t.len(), y.len())));
        }
        if t.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::data("series contains non-finite values"));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::data("series times must be strictly increasing"));
        }
        Ok(Self { t, y })
    }

    /// Values at frames `0, 1, 2, ...`.
    pub fn frames(y: Vec<f64>) -> Self {
        Self {
            t: (0..y.len()).map(|i| i as f64).collect(),
            y,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn scale_time(&self, c: f64) -> Self {
        Self {
            t: self.t.iter().map(|t| t * c).collect(),
            y: self.y.clone(),
        }
    }

    /// Reads a CSV whose first column is time and `column` (default: the
    /// second) holds the values. Rows with an empty value are skipped.
    pub fn read_csv<R: std::io::Read>(source: R, column: Option<&str>) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(source);
        let header = reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
        let col = match column {
            Some(name) => header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("no column `{name}`") })?,
            None if header.len() >= 2 => 1,
            None => return Err(Error::Parse { line: 1, msg: "need at least two columns".into() }),
        };
        let (mut t, mut y) = (Vec::new(), Vec::new());
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                msg: e.to_string(),
            })?;
            let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
            let cell = |i: usize| -> Result<Option<f64>> {
                match record.get(i).map(str::trim) {
                    None | Some("") => Ok(None),
                    Some(s) => s.parse().map(Some).map_err(|_| Error::Parse { line, msg: format!("bad number `{s}`") }),
                }
            };
            if let (Some(ti), Some(yi)) = (cell(0)?, cell(col)?) {
                t.push(ti);
                y.push(yi);
            }
        }
        Self::new(t, y)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,y")?;
        for (t, y) in self.t.iter().zip(&self.y) {
            writeln!(out, "{t},{y}")?;
        }
        Ok(())
    }

    fn argmax(&self) -> usize {
        // first maximum
        let mut best = 0;
        for (i, v) in self.y.iter().enumerate() {
            if *v > self.y[best] {
                best = i;
            }
        }
        best
    }
}

/// Every 5th sample starting at the first; an incomplete final week is
/// dropped. Times are divided by 5 (trading days to trading weeks).
pub fn weekly_downsample(series: &Series) -> Series {
    let weeks = series.len() / 5;
    Series {
        t: (0..weeks).map(|w| series.t[5 * w] / 5.0).collect(),
        y: (0..weeks).map(|w| series.y[5 * w]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub k: Vec<f64>,
}

/// Fixed-step RK4 for the autonomous equation `dk/dt = rate(k)` from `t0`
/// to `t1`; the final step is shortened to land on `t1`. Leaving the open
/// interval `domain` is an error at the offending time.
pub fn rk4(
    rate: impl Fn(f64) -> f64,
    k0: f64,
    t0: f64,
    t1: f64,
    dt: f64,
    domain: (f64, f64),
) -> Result<Trajectory> {
    if !(dt > 0.0) || !(t1 >= t0) {
        return Err(Error::config("dt", "need dt > 0 and t1 ≥ t0"));
    }
    let inside = |k: f64| k.is_finite() && k > domain.0 && k < domain.1;
    if !inside(k0) {
        return Err(Error::Domain {
            t: t0,
            msg: format!("initial value {k0} outside ({}, {})", domain.0, domain.1),
        });
    }
    let steps = ((t1 - t0) / dt).ceil() as usize;
    let mut out = Trajectory {
        t: Vec::with_capacity(steps + 1),
        k: Vec::with_capacity(steps + 1),
    };
    out.t.push(t0);
    out.k.push(k0);
    let mut k = k0;
    for s in 0..steps {
        let ta = t0 + s as f64 * dt;
        let tb = if s + 1 == steps { t1 } else { t0 + (s + 1) as f64 * dt };
        let h = tb - ta;
        let k1 = rate(k);
        let k2 = rate(k + 0.5 * h * k1);
        let k3 = rate(k + 0.5 * h * k2);
        let k4 = rate(k + h * k3);
        k += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !inside(k) {
            return Err(Error::Domain {
                t: tb,
                msg: format!("value {k} outside ({}, {})", domain.0, domain.1),
            });
        }
        out.t.push(tb);
        out.k.push(k);
    }
    Ok(out)
}

/// `dk/dt' = (n - 1 - k) b(1|k)` on `(0, n - 1)`.
pub fn integrate_generic(
    n: usize,
    b_plus: impl Fn(f64) -> f64,
    k0: f64,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory> {
    let top = n as f64 - 1.0;
    rk4(|k| (top - k) * b_plus(k), k0, t_span.0, t_span.1, dt, (0.0, top))
}

/// `k = A0` up to `t_crit`, then `A0 + A (t - t_crit)^(1/z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleationLaw {
    pub a0: f64,
    pub a: f64,
    pub z: f64,
    pub t_crit: f64,
}

impl NucleationLaw {
    pub fn value(&self, t: f64) -> f64 {
        if t <= self.t_crit {
            self.a0
        } else {
            self.a0 + self.a * (t - self.t_crit).powf(1.0 / self.z)
        }
    }

    /// `dk/dt' = A^z / z · (k - A0)^-(z - 1)`.
    pub fn rate(&self, k: f64) -> f64 {
        self.a.powf(self.z) / self.z * (k - self.a0).powf(1.0 - self.z)
    }

    /// Integrates from `t_crit + offset` (started on the exact solution) to `t_end`.
    pub fn integrate(&self, offset: f64, t_end: f64, dt: f64) -> Result<Trajectory> {
        let t0 = self.t_crit + offset;
        rk4(|k| self.rate(k), self.value(t0), t0, t_end, dt, (self.a0, f64::INFINITY))
    }
}

/// One side of the peak: `-A ln(|t - t_λ| / τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogBranch {
    pub a: f64,
    pub tau: f64,
}

impl LogBranch {
    pub fn at_distance(&self, d: f64) -> f64 {
        -self.a * (d / self.tau).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaLaw {
    pub t_lambda: f64,
    pub left: LogBranch,
    pub right: LogBranch,
}

impl LambdaLaw {
    /// Closed form on either side; `None` at the singular point itself.
    pub fn value(&self, t: f64) -> Option<f64> {
        let d = t - self.t_lambda;
        if d < 0.0 {
            Some(self.left.at_distance(-d))
        } else if d > 0.0 {
            Some(self.right.at_distance(d))
        } else {
            None
        }
    }

    /// `dk/dt = (A_L / τ_L) exp(k / A_L)`.
    pub fn left_rate(&self, k: f64) -> f64 {
        self.left.a / self.left.tau * (k / self.left.a).exp()
    }

    /// `dk/dt = -(A_R / τ_R) exp(k / A_R)`.
    pub fn right_rate(&self, k: f64) -> f64 {
        -self.right.a / self.right.tau * (k / self.right.a).exp()
    }

    /// Left branch from `t_from` up to `t_to < t_λ`.
    pub fn integrate_left(&self, t_from: f64, t_to: f64, dt: f64) -> Result<Trajectory> {
        if t_to >= self.t_lambda {
            return Err(Error::Domain {
                t: t_to,
                msg: "left branch ends at the singular point".into(),
            });
        }
        let k0 = self.left.at_distance(self.t_lambda - t_from);
        rk4(|k| self.left_rate(k), k0, t_from, t_to, dt, (f64::NEG_INFINITY, f64::INFINITY))
    }

    /// Right branch from `t_from > t_λ`; the trajectory must decrease strictly.
    pub fn integrate_right(&self, t_from: f64, t_to: f64, dt: f64) -> Result<Trajectory> {
        if t_from <= self.t_lambda {
            return Err(Error::Domain {
                t: t_from,
                msg: "right branch starts at the singular point".into(),
            });
        }
        let k0 = self.value(t_from).unwrap();
        let traj = rk4(|k| self.right_rate(k), k0, t_from, t_to, dt, (f64::NEG_INFINITY, f64::INFINITY))?;
        if let Some(i) = traj.k.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::Domain {
                t: traj.t[i + 1],
                msg: "right branch stopped decreasing".into(),
            });
        }
        Ok(traj)
    }
}

/// Largest relative deviation `|k - exact| / max(|exact|, 1)` along a trajectory.
pub fn max_relative_error(traj: &Trajectory, exact: impl Fn(f64) -> f64) -> f64 {
    traj.t
        .iter()
        .zip(&traj.k)
        .map(|(&t, &k)| {
            let e = exact(t);
            (k - e).abs() / e.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TCritMethod {
    Jump,
    Scan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TCritDetection {
    /// Chosen index: the jump unless it is missing or low-confidence.
    pub index: usize,
    pub t_crit: f64,
    pub method: TCritMethod,
    pub jump_index: Option<usize>,
    pub jump_size: Option<f64>,
    /// `(jump - median) / (1.4826 MAD)` of the one-step increments.
    pub jump_confidence: Option<f64>,
    pub low_confidence: bool,
    pub scan_index: Option<usize>,
    pub scan_residual: Option<f64>,
    pub warning: Option<String>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Change-point candidates for the start of nucleation.
///
/// The jump candidate is the last frame before the largest one-step increase
/// preceding the series maximum. The scan candidate minimizes the residual
/// of the piecewise nucleation model over `[0, scan_end]`.
pub fn detect_t_crit(series: &Series, scan_end: Option<usize>) -> Result<TCritDetection> {
    if series.len() < MIN_BRANCH_POINTS + 2 {
        return Err(Error::fit("series too short for change-point detection"));
    }
    let peak = series.argmax();
    let inc: Vec<f64> = series.y.windows(2).map(|w| w[1] - w[0]).collect();
    if inc.iter().all(|d| *d == 0.0) {
        return Err(Error::fit("flat series has no change point"));
    }

    let mut jump = None;
    if peak > 0 {
        let (j, size) = inc[..peak]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, d)| if *d > b.1 { (i, *d) } else { b });
        let mut scratch = inc.clone();
        let med = median(&mut scratch);
        let mut dev: Vec<f64> = inc.iter().map(|d| (d - med).abs()).collect();
        let mad = 1.4826 * median(&mut dev);
        let excess = size - med;
        if size > 0.0 && excess > 0.0 {
            let conf = if mad > 0.0 { excess / mad } else { f64::INFINITY };
            jump = Some((j, size, conf));
        }
    }

    let scan = nucleation_scan(series, scan_end.unwrap_or(series.len() - 1).min(series.len() - 1));
    let mut det = TCritDetection {
        index: 0,
        t_crit: 0.0,
        method: TCritMethod::Jump,
        jump_index: jump.map(|j| j.0),
        jump_size: jump.map(|j| j.1),
        jump_confidence: jump.map(|j| j.2),
        low_confidence: jump.is_none_or(|j| j.2 < MIN_JUMP_CONFIDENCE),
        scan_index: scan.map(|s| s.0),
        scan_residual: scan.map(|s| s.1),
        warning: None,
    };
    match (jump, scan) {
        (Some((j, _, conf)), _) if conf >= MIN_JUMP_CONFIDENCE => det.index = j,
        (_, Some((s, _))) => {
            let msg = if jump.is_none() {
                "no jump in the series; using the residual scan".to_string()
            } else {
                "largest jump is not distinguishable from noise; using the residual scan".to_string()
            };
            log::warn!("{msg}");
            det.warning = Some(msg);
            det.method = TCritMethod::Scan;
            det.index = s;
        }
        (Some((j, _, _)), None) => {
            det.warning = Some("low-confidence jump and no usable scan".into());
            det.index = j;
        }
        (None, None) => return Err(Error::fit("no change-point candidate")),
    }
    det.t_crit = series.t[det.index];
    Ok(det)
}

/// Argmin over `c` of the piecewise-model residual, with `A0` the mean of
/// `y[..=c]` and the power law fitted on `(c, end]`.
fn nucleation_scan(series: &Series, end: usize) -> Option<(usize, f64)> {
    let mut prefix = vec![0.0];
    for v in &series.y {
        prefix.push(prefix.last().unwrap() + v);
    }
    let mut best: Option<(usize, f64)> = None;
    for c in 0..end.saturating_sub(MIN_BRANCH_POINTS) {
        let a0 = prefix[c + 1] / (c + 1) as f64;
        let Some(law) = nucleation_ols(series, c, a0, c + 1, end).ok() else {
            continue;
        };
        let sse: f64 = (0..=end)
            .map(|i| {
                let r = series.y[i] - law.0.value(series.t[i]);
                r * r
            })
            .sum();
        if sse.is_finite() && best.is_none_or(|b| sse < b.1) {
            best = Some((c, sse));
        }
    }
    best
}

/// Log-log OLS of `y - a0` against `t - t_c` over `[from, to]`; returns the
/// law, the slope standard error and the number of points used.
fn nucleation_ols(
    series: &Series,
    c: usize,
    a0: f64,
    from: usize,
    to: usize,
) -> Result<(NucleationLaw, f64, usize)> {
    let tc = series.t[c];
    let (x, y): (Vec<f64>, Vec<f64>) = (from.max(c + 1)..=to.min(series.len() - 1))
        .filter(|&i| series.y[i] > a0)
        .map(|i| ((series.t[i] - tc).ln(), (series.y[i] - a0).ln()))
        .unzip();
    if x.len() < MIN_BRANCH_POINTS {
        return Err(Error::fit(format!(
            "{} usable points above A0 = {a0}, need {MIN_BRANCH_POINTS}",
            x.len()
        )));
    }
    let (slope, intercept, stderr, _) = ols(&x, &y);
    if !(slope > 0.0) || !slope.is_finite() {
        return Err(Error::fit(format!("non-increasing growth, slope {slope}")));
    }
    Ok((
        NucleationLaw {
            a0,
            a: intercept.exp(),
            z: 1.0 / slope,
            t_crit: tc,
        },
        stderr,
        x.len(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleationFit {
    pub a0: f64,
    pub t_crit: f64,
    pub t_crit_index: usize,
    pub a: f64,
    pub z: f64,
    pub z_stderr: f64,
    /// `z ± 1.96 σ_z`.
    pub z_ci95: (f64, f64),
    /// Sum of squared residuals of the power law over the fit range.
    pub residual: f64,
    pub points: usize,
    pub fit_range: (usize, usize),
    /// `γ = z - 1`, `D0 = A^z / z`, `β = γ - 1`.
    pub gamma: f64,
    pub d0: f64,
    pub beta: f64,
}

impl NucleationFit {
    pub fn law(&self) -> NucleationLaw {
        NucleationLaw {
            a0: self.a0,
            a: self.a,
            z: self.z,
            t_crit: self.t_crit,
        }
    }

    /// `ε(t') = ln(k - k(0))` on the fitted curve.
    pub fn energy(&self, t_prime: f64) -> f64 {
        self.a.ln() + t_prime.ln() / self.z
    }
}

/// Fits `A (t - t_crit)^(1/z) + A0` with `A0` the mean of the frames up to and
/// including `t_crit`. `fit_range` defaults to everything after `t_crit`.
pub fn fit_nucleation(
    series: &Series,
    t_crit: usize,
    fit_range: Option<(usize, usize)>,
) -> Result<NucleationFit> {
    if t_crit + 1 >= series.len() {
        return Err(Error::fit(format!("t_crit index {t_crit} leaves no growth segment")));
    }
    let a0 = series.y[..=t_crit].iter().sum::<f64>() / (t_crit + 1) as f64;
    let (from, to) = fit_range.unwrap_or((t_crit + 1, series.len() - 1));
    if from > to || to >= series.len() {
        return Err(Error::config("fit_range", format!("invalid range {from}..={to}")));
    }
    let (law, slope_se, points) = nucleation_ols(series, t_crit, a0, from, to)?;
    if !(law.z > 1.0) {
        return Err(Error::fit(format!("dynamic exponent z = {} is not above 1", law.z)));
    }
    let residual = (from.max(t_crit + 1)..=to)
        .map(|i| {
            let r = series.y[i] - law.value(series.t[i]);
            r * r
        })
        .sum();
    let z_se = slope_se * law.z * law.z;
    let gamma = law.z - 1.0;
    Ok(NucleationFit {
        a0,
        t_crit: law.t_crit,
        t_crit_index: t_crit,
        a: law.a,
        z: law.z,
        z_stderr: z_se,
        z_ci95: (law.z - 1.96 * z_se, law.z + 1.96 * z_se),
        residual,
        points,
        fit_range: (from, to),
        gamma,
        d0: law.a.powf(law.z) / law.z,
        beta: gamma - 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFit {
    pub a: f64,
    pub tau: f64,
    pub a_stderr: f64,
    pub sse: f64,
    pub points: usize,
}

impl BranchFit {
    pub fn branch(&self) -> LogBranch {
        LogBranch {
            a: self.a,
            tau: self.tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakAt {
    pub index: usize,
    pub t_lambda: f64,
    pub left: BranchFit,
    pub right: BranchFit,
    pub residual: f64,
}

impl PeakAt {
    pub fn law(&self) -> LambdaLaw {
        LambdaLaw {
            t_lambda: self.t_lambda,
            left: self.left.branch(),
            right: self.right.branch(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaOptions {
    /// Candidate centres are `argmax ± half_width` samples.
    pub half_width: usize,
    /// Samples with `|i - i_λ| < guard` are excluded from both branches.
    pub guard: usize,
    /// Optional centre from elsewhere (e.g. the MOL minimum); fitted and reported alongside.
    pub prior: Option<f64>,
}

impl Default for LambdaOptions {
    fn default() -> Self {
        Self {
            half_width: DEFAULT_HALF_WIDTH,
            guard: DEFAULT_GUARD,
            prior: None,
        }
    }
}

/// Guard in samples for a series sampled every `stride_td` trading days,
/// given a guard of `guard_td` trading days.
pub fn guard_samples(guard_td: usize, stride_td: usize) -> usize {
    guard_td.div_ceil(stride_td.max(1)).max(1)
}

impl LambdaOptions {
    /// Defaults for a series sampled every `stride_td` trading days.
    pub fn for_stride(stride_td: usize) -> Self {
        Self {
            guard: guard_samples(DEFAULT_GUARD, stride_td),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPeakFit {
    pub best: PeakAt,
    pub grid: (usize, usize),
    pub guard: usize,
    pub prior: Option<PeakAt>,
}

impl LambdaPeakFit {
    pub fn t_lambda(&self) -> f64 {
        self.best.t_lambda
    }
    pub fn a_l(&self) -> f64 {
        self.best.left.a
    }
    pub fn tau_l(&self) -> f64 {
        self.best.left.tau
    }
    pub fn a_r(&self) -> f64 {
        self.best.right.a
    }
    pub fn tau_r(&self) -> f64 {
        self.best.right.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// OLS of `y` on `ln d`, then repeatedly drop points beyond the fitted `τ`.
fn fit_branch(series: &Series, center: usize, side: Side, guard: usize) -> Result<BranchFit> {
    let tc = series.t[center];
    let idx: Vec<usize> = match side {
        Side::Left => (0..center.saturating_sub(guard.max(1) - 1)).collect(),
        Side::Right => (center + guard.max(1)..series.len()).collect(),
    };
    let mut pts: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| ((series.t[i] - tc).abs(), series.y[i]))
        .collect();
    let mut last_len = usize::MAX;
    for _ in 0..50 {
        if pts.len() < MIN_BRANCH_POINTS {
            return Err(Error::fit(format!(
                "{} branch has {} points, need {MIN_BRANCH_POINTS}",
                side.name(),
                pts.len()
            )));
        }
        let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let (slope, intercept, stderr, _) = ols(&x, &y);
        let a = -slope;
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::fit(format!("{} branch amplitude {a} is not positive", side.name())));
        }
        let tau = (intercept / a).exp();
        if pts.len() == last_len || pts.iter().all(|p| p.0 <= tau) {
            let sse = x
                .iter()
                .zip(&y)
                .map(|(xi, yi)| {
                    let r = yi - (intercept + slope * xi);
                    r * r
                })
                .sum();
            return Ok(BranchFit {
                a,
                tau,
                a_stderr: stderr,
                sse,
                points: pts.len(),
            });
        }
        last_len = pts.len();
        pts.retain(|p| p.0 <= tau);
    }
    Err(Error::fit(format!("{} branch window did not settle", side.name())))
}

fn fit_peak_at(series: &Series, center: usize, guard: usize) -> Result<PeakAt> {
    let left = fit_branch(series, center, Side::Left, guard)?;
    let right = fit_branch(series, center, Side::Right, guard)?;
    Ok(PeakAt {
        index: center,
        t_lambda: series.t[center],
        residual: left.sse + right.sse,
        left,
        right,
    })
}

/// Two-branch logarithmic fit with a shared centre chosen on a grid around
/// the series maximum by smallest summed residual (ties: earliest centre).
pub fn fit_lambda_peak(series: &Series, opts: &LambdaOptions) -> Result<LambdaPeakFit> {
    if series.is_empty() {
        return Err(Error::fit("empty series"));
    }
    let peak = series.argmax();
    let lo = peak.saturating_sub(opts.half_width);
    let hi = (peak + opts.half_width).min(series.len() - 1);
    let fits: Vec<Result<PeakAt>> = (lo..=hi)
        .into_par_iter()
        .map(|c| fit_peak_at(series, c, opts.guard))
        .collect();
    let mut best: Option<PeakAt> = None;
    for fit in fits.iter().flatten() {
        if best.is_none_or(|b| fit.residual < b.residual) {
            best = Some(*fit);
        }
    }
    let Some(best) = best else {
        // report why the most natural candidate fails
        return Err(fit_peak_at(series, peak, opts.guard).unwrap_err());
    };
    let prior = match opts.prior {
        Some(tp) => {
            let idx = nearest_index(&series.t, tp);
            Some(fit_peak_at(series, idx, opts.guard)?)
        }
        None => None,
    };
    Ok(LambdaPeakFit {
        best,
        grid: (lo, hi),
        guard: opts.guard,
        prior,
    })
}

fn nearest_index(t: &[f64], target: f64) -> usize {
    let mut best = 0;
    for (i, v) in t.iter().enumerate() {
        if (v - target).abs() < (t[best] - target).abs() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub tolerance: f64,
    /// Integer times where the nucleation and left-branch curves agree within tolerance.
    pub frames: Vec<i64>,
    pub window: Option<(i64, i64)>,
    pub empty: bool,
    pub full_range: bool,
}

/// Overlap of the fitted nucleation curve and the left λ branch on integer
/// times `t_crit < t < t_λ` inside the left branch domain.
pub fn crossover_report(nfit: &NucleationFit, lfit: &LambdaPeakFit, tolerance: f64) -> CrossoverReport {
    let nl = nfit.law();
    let ll = lfit.best.law();
    let start = nfit.t_crit.floor() as i64 + 1;
    let end = ll.t_lambda.ceil() as i64 - 1;
    let candidates: Vec<i64> = (start..=end)
        .filter(|&t| ll.t_lambda - (t as f64) < ll.left.tau)
        .collect();
    let frames: Vec<i64> = candidates
        .iter()
        .copied()
        .filter(|&t| {
            let t = t as f64;
            (nl.value(t) - ll.value(t).unwrap()).abs() < tolerance
        })
        .collect();
    CrossoverReport {
        tolerance,
        window: frames.first().zip(frames.last()).map(|(a, b)| (*a, *b)),
        empty: frames.is_empty(),
        full_range: !candidates.is_empty() && frames.len() == candidates.len(),
        frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn series_csv_round_trip_and_column_pick() {
        let s = Series::new(vec![0.0, 1.5, 3.0], vec![2.0, -1.25, 7.0]).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(Series::read_csv(&buf[..], None).unwrap(), s);
        let text = "frame_index,center_date,k_leader,k3\n0,d0,4,\n1,d1,6,2\n";
        let picked = Series::read_csv(text.as_bytes(), Some("k3")).unwrap();
        assert_eq!((picked.t, picked.y), (vec![1.0], vec![2.0]));
        assert!(Series::read_csv(text.as_bytes(), Some("center_date")).is_err());
        assert!(Series::read_csv(text.as_bytes(), Some("missing")).is_err());
    }

    fn table_one() -> LambdaLaw {
        LambdaLaw {
            t_lambda: 544.0,
            left: LogBranch { a: 14.0, tau: 2500.0 },
            right: LogBranch { a: 22.0, tau: 480.0 },
        }
    }

    fn nucleation() -> NucleationLaw {
        NucleationLaw {
            a0: 4.5273,
            a: 2.5,
            z: 2.0,
            t_crit: 164.0,
        }
    }

    /// Closed-form samples at frames, with the centre sample set to its
    /// neighbours' level (it is excluded from fits anyway).
    fn lambda_series(law: &LambdaLaw, len: usize, sigma: f64, seed: u64) -> Series {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let y = (0..len)
            .map(|i| {
                let t = i as f64;
                let v = law.value(t).unwrap_or_else(|| law.left.at_distance(1.0));
                v + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 }
            })
            .collect();
        Series::frames(y)
    }

    #[test]
    fn rk4_constant_when_rate_vanishes() {
        let traj = integrate_generic(100, |_| 0.0, 7.0, (0.0, 50.0), DEFAULT_DT).unwrap();
        assert!(traj.k.iter().all(|&k| k == 7.0));
        assert_eq!(*traj.t.last().unwrap(), 50.0);
    }

    #[test]
    fn rk4_exponential_decay() {
        let traj = rk4(|k| -k, 1.0, 0.0, 5.0, 0.01, (0.0, 2.0)).unwrap();
        assert!(max_relative_error(&traj, |t| (-t).exp()) < 1e-9);
    }

    #[test]
    fn domain_exit_is_reported() {
        let err = integrate_generic(10, |k| 1.0 / ((9.0 - k) * (9.0 - k)), 1.0, (0.0, 100.0), DEFAULT_DT)
            .unwrap_err();
        match err {
            Error::Domain { t, .. } => assert!(t > 0.0 && t < 100.0),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn nucleation_ode_matches_closed_form() {
        let law = nucleation();
        let traj = law.integrate(1.0, 544.0, DEFAULT_DT).unwrap();
        assert!(max_relative_error(&traj, |t| law.value(t)) <= 1e-6);

        // same regime written as the generic attachment equation
        let n = 459;
        let b = |k: f64| law.rate(k) / (n as f64 - 1.0 - k);
        let generic = integrate_generic(n, b, law.value(165.0), (165.0, 544.0), DEFAULT_DT).unwrap();
        assert!(max_relative_error(&generic, |t| law.value(t)) <= 1e-6);
    }

    #[test]
    fn log_branches_match_closed_form() {
        let law = table_one();
        let left = law
            .integrate_left(law.t_lambda - 2500.0, law.t_lambda - 25.0, DEFAULT_DT)
            .unwrap();
        assert!(max_relative_error(&left, |t| law.value(t).unwrap()) <= 1e-6);
        let right = law
            .integrate_right(law.t_lambda + 4.8, law.t_lambda + 480.0, DEFAULT_DT)
            .unwrap();
        assert!(max_relative_error(&right, |t| law.value(t).unwrap()) <= 1e-6);
        assert!(right.k.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn left_branch_vanishes_at_tau() {
        let law = table_one();
        assert_eq!(law.value(544.0 - 2500.0).unwrap(), 0.0);
        assert_eq!(law.value(544.0 + 480.0).unwrap(), 0.0);
        assert!(law.value(544.0).is_none());
    }

    fn nucleation_series(law: &NucleationLaw, len: usize, sigma: f64, seed: u64) -> Series {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        Series::frames(
            (0..len)
                .map(|i| law.value(i as f64) + if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 })
                .collect(),
        )
    }

    #[test]
    fn noiseless_nucleation_recovery() {
        let law = nucleation();
        let s = nucleation_series(&law, 544, 0.0, 0);
        let fit = fit_nucleation(&s, 164, None).unwrap();
        assert!((fit.a0 - 4.5273).abs() <= 1e-9);
        assert!((fit.z - 2.0).abs() <= 1e-6, "{}", fit.z);
        assert!((fit.a - 2.5).abs() <= 1e-6);
        assert!((fit.gamma - 1.0).abs() <= 1e-6);
        assert!((fit.d0 - 3.125).abs() <= 1e-5);
    }

    #[test]
    fn nucleation_flat_series_errors() {
        let s = Series::frames(vec![4.5273; 300]);
        assert!(matches!(fit_nucleation(&s, 164, None), Err(Error::Fit(_))));
    }

    #[test]
    fn planted_jump_is_detected() {
        let mut y = vec![2.0; 400];
        for (i, v) in y.iter_mut().enumerate().skip(165) {
            *v = 12.0 + (i - 165) as f64 * 0.05;
        }
        let det = detect_t_crit(&Series::frames(y), None).unwrap();
        assert_eq!(det.method, TCritMethod::Jump);
        assert_eq!(det.index, 164);
        assert!(!det.low_confidence);
    }

    #[test]
    fn pure_noise_is_low_confidence() {
        let s = nucleation_series(
            &NucleationLaw {
                a0: 5.0,
                a: 0.0,
                z: 2.0,
                t_crit: 1e9,
            },
            500,
            1.0,
            3,
        );
        let det = detect_t_crit(&s, None).unwrap();
        assert!(det.low_confidence);
    }

    #[test]
    fn ramp_falls_back_to_scan_and_flat_errors() {
        let ramp = Series::frames((0..300).map(|i| i as f64).collect());
        let det = detect_t_crit(&ramp, None).unwrap();
        assert_eq!(det.method, TCritMethod::Scan);
        assert!(det.warning.is_some());
        assert!(detect_t_crit(&Series::frames(vec![3.0; 50]), None).is_err());
    }

    #[test]
    fn noisy_nucleation_scan_finds_t_crit() {
        let law = nucleation();
        let mut ok = 0;
        for seed in 0..20 {
            let s = nucleation_series(&law, 544, 1.5, seed);
            let det = detect_t_crit(&s, None).unwrap();
            let fit = fit_nucleation(&s, det.index, None).unwrap();
            if (det.index as f64 - 164.0).abs() <= 3.0 && (fit.z - 2.0).abs() <= 0.2 {
                ok += 1;
            }
        }
        assert!(ok >= 17, "{ok}/20");
    }

    #[test]
    fn noiseless_lambda_recovery() {
        for law in [
            table_one(),
            LambdaLaw {
                t_lambda: 544.0,
                left: LogBranch { a: 16.0, tau: 544.0 },
                right: LogBranch { a: 25.0, tau: 200.0 },
            },
        ] {
            let len = (law.t_lambda + law.right.tau) as usize;
            let s = lambda_series(&law, len, 0.0, 0);
            let fit = fit_lambda_peak(&s, &LambdaOptions::default()).unwrap();
            assert_eq!(fit.t_lambda(), 544.0);
            assert!((fit.a_l() / law.left.a - 1.0).abs() < 1e-9);
            assert!((fit.tau_l() / law.left.tau - 1.0).abs() < 1e-9);
            assert!((fit.a_r() / law.right.a - 1.0).abs() < 1e-9);
            assert!((fit.tau_r() / law.right.tau - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn time_scaling_scales_tau_only() {
        let s = lambda_series(&table_one(), 1024, 3.0, 11);
        let a = fit_lambda_peak(&s, &LambdaOptions::default()).unwrap();
        let b = fit_lambda_peak(&s.scale_time(5.0), &LambdaOptions::default()).unwrap();
        assert_eq!(a.best.index, b.best.index);
        assert!((b.a_l() / a.a_l() - 1.0).abs() < 1e-9);
        assert!((b.tau_l() / a.tau_l() - 5.0).abs() < 1e-8);
        assert!((b.tau_r() / a.tau_r() - 5.0).abs() < 1e-8);

        let law = nucleation();
        let n = nucleation_series(&law, 544, 0.5, 2);
        let za = fit_nucleation(&n, 164, None).unwrap().z;
        let zb = fit_nucleation(&n.scale_time(5.0), 164, None).unwrap().z;
        assert!((za - zb).abs() < 1e-9);
    }

    #[test]
    fn time_reversal_swaps_branches() {
        let s = lambda_series(&table_one(), 1024, 3.0, 5);
        let fwd = fit_lambda_peak(&s, &LambdaOptions::default()).unwrap();
        let mut y = s.y.clone();
        y.reverse();
        let rev = fit_lambda_peak(&Series::frames(y), &LambdaOptions::default()).unwrap();
        assert_eq!(rev.best.index, s.len() - 1 - fwd.best.index);
        assert!((rev.a_l() - fwd.a_r()).abs() < 1e-9);
        assert!((rev.tau_l() - fwd.tau_r()).abs() < 1e-6 * fwd.tau_r());
        assert!((rev.a_r() - fwd.a_l()).abs() < 1e-9);
    }

    #[test]
    fn short_branch_is_named() {
        let law = table_one();
        let y: Vec<f64> = (500..548).map(|t| law.value(t as f64).unwrap_or(80.0)).collect();
        let err = fit_lambda_peak(&Series::frames(y), &LambdaOptions::default()).unwrap_err();
        assert!(err.to_string().contains("right branch"), "{err}");
    }

    #[test]
    fn prior_is_reported() {
        let s = lambda_series(&table_one(), 1024, 0.0, 0);
        let opts = LambdaOptions {
            prior: Some(540.0),
            ..Default::default()
        };
        let fit = fit_lambda_peak(&s, &opts).unwrap();
        assert_eq!(fit.prior.unwrap().index, 540);
        assert_eq!(fit.best.index, 544);
    }

    #[test]
    fn weekly_downsample_truncates_and_keeps_constants() {
        let s = Series::frames(vec![3.0; 23]);
        let w = weekly_downsample(&s);
        assert_eq!(w.len(), 4);
        assert!(w.y.iter().all(|&v| v == 3.0));
        assert_eq!(w.t, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn weekly_fit_divides_tau_by_five() {
        let s = lambda_series(&table_one(), 1024, 0.0, 0);
        let fit = fit_lambda_peak(&weekly_downsample(&s), &LambdaOptions::for_stride(5)).unwrap();
        assert_eq!(fit.guard, 1);
        assert!((fit.tau_l() / 500.0 - 1.0).abs() < 0.1, "{}", fit.tau_l());
        assert!((fit.tau_r() / 96.0 - 1.0).abs() < 0.15, "{}", fit.tau_r());
    }

    fn peak_fit(law: LambdaLaw) -> LambdaPeakFit {
        let branch = |b: LogBranch| BranchFit {
            a: b.a,
            tau: b.tau,
            a_stderr: 0.0,
            sse: 0.0,
            points: 10,
        };
        LambdaPeakFit {
            best: PeakAt {
                index: law.t_lambda as usize,
                t_lambda: law.t_lambda,
                left: branch(law.left),
                right: branch(law.right),
                residual: 0.0,
            },
            grid: (0, 0),
            guard: 3,
            prior: None,
        }
    }

    fn nucleation_fit(law: NucleationLaw) -> NucleationFit {
        NucleationFit {
            a0: law.a0,
            t_crit: law.t_crit,
            t_crit_index: law.t_crit as usize,
            a: law.a,
            z: law.z,
            z_stderr: 0.0,
            z_ci95: (law.z, law.z),
            residual: 0.0,
            points: 10,
            fit_range: (0, 0),
            gamma: law.z - 1.0,
            d0: 0.0,
            beta: 0.0,
        }
    }

    #[test]
    fn crossover_window_between_the_regimes() {
        let rep = crossover_report(&nucleation_fit(nucleation()), &peak_fit(table_one()), 1.0);
        let (a, b) = rep.window.unwrap();
        // curves cross where 4.5273 + 2.5 sqrt(t - 164) = -14 ln((544 - t) / 2500)
        let f = |t: f64| nucleation().value(t) - table_one().value(t).unwrap();
        let cross = (165..544).find(|&t| f(t as f64) * f(t as f64 + 1.0) <= 0.0).unwrap() as i64;
        assert!(a <= cross && cross <= b + 1, "{a}..{b} vs {cross}");
        assert!(!rep.full_range);
    }

    #[test]
    fn crossover_edge_cases() {
        let far = NucleationLaw {
            a0: 1000.0,
            ..nucleation()
        };
        assert!(crossover_report(&nucleation_fit(far), &peak_fit(table_one()), 1.0).empty);
        let rep = crossover_report(&nucleation_fit(nucleation()), &peak_fit(table_one()), 1e9);
        assert!(rep.full_range);
    }

    #[test]
    fn fit_reports_serialize() {
        let s = lambda_series(&table_one(), 1024, 0.0, 0);
        let fit = fit_lambda_peak(&s, &LambdaOptions::default()).unwrap();
        let back: LambdaPeakFit = serde_json::from_str(&serde_json::to_string(&fit).unwrap()).unwrap();
        assert_eq!(back, fit);
    }
}
