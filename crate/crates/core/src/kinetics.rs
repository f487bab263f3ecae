//! Degree-ladder kinetics: empirical one-step degree transitions, binomial
//! basic probabilities `b(-1|k)` and `b(+1|k)`, the detailed-balance kernel
//! built from `b(-1|k)` and a power-law stationary state, currents and the
//! master-equation step.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::corrnet::TreeFrame;
use crate::error::{Error, Result};

/// Jumps larger than this are outside the usual support of a row.
pub const SUPPORT_RADIUS: i64 = 5;

/// Probabilities below this do not extend a row's cutoff.
pub const CUTOFF_EPS: f64 = 1e-4;

pub type Distribution = BTreeMap<usize, f64>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub n: usize,
    /// `k -> (l -> events)`: a vertex of degree `k` moved to `k + l`.
    pub counts: BTreeMap<usize, BTreeMap<i64, u64>>,
    pub pairs: usize,
    /// Frame pairs with a missing partner (skipped frame in between).
    pub skipped_pairs: usize,
    pub first_frame: Option<usize>,
    pub last_frame: Option<usize>,
    pub stride: usize,
}

impl TransitionCounts {
    pub fn total(&self, k: usize) -> u64 {
        self.counts.get(&k).map_or(0, |row| row.values().sum())
    }

    pub fn count(&self, k: usize, l: i64) -> u64 {
        self.counts
            .get(&k)
            .and_then(|row| row.get(&l))
            .copied()
            .unwrap_or(0)
    }

    pub fn events(&self) -> u64 {
        self.counts.values().flat_map(|row| row.values()).sum()
    }

    /// Fraction of events with `|l| > SUPPORT_RADIUS`.
    pub fn mass_outside_support(&self) -> f64 {
        let total = self.events();
        if total == 0 {
            return 0.0;
        }
        let outside: u64 = self
            .counts
            .values()
            .flat_map(|row| row.iter())
            .filter(|(l, _)| l.abs() > SUPPORT_RADIUS)
            .map(|(_, c)| c)
            .sum();
        outside as f64 / total as f64
    }

    /// Adds another tally over a disjoint set of frame pairs.
    pub fn merge(&mut self, other: &TransitionCounts) -> Result<()> {
        if self.n != other.n && self.pairs + self.skipped_pairs > 0 {
            return Err(Error::data("cannot merge tallies over different ticker sets"));
        }
        self.n = other.n;
        for (k, row) in &other.counts {
            let mine = self.counts.entry(*k).or_default();
            for (l, c) in row {
                *mine.entry(*l).or_insert(0) += c;
            }
        }
        self.pairs += other.pairs;
        self.skipped_pairs += other.skipped_pairs;
        self.first_frame = match (self.first_frame, other.first_frame) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.last_frame = self.last_frame.max(other.last_frame);
        self.stride = other.stride;
        Ok(())
    }
}

/// Tallies `(k_t, k_{t+stride} - k_t)` for every vertex over every pair of
/// frames `stride` indices apart. Frames must be sorted by index; pairs whose
/// partner frame is missing are counted as skipped.
pub fn count_transitions(frames: &[TreeFrame], stride: usize) -> Result<TransitionCounts> {
    if stride == 0 {
        return Err(Error::config("frame_stride", "stride must be ≥ 1"));
    }
    let mut out = TransitionCounts {
        stride,
        ..Default::default()
    };
    let Some(first) = frames.first() else {
        return Ok(out);
    };
    out.n = first.n();
    if frames.iter().any(|f| f.n() != out.n) {
        return Err(Error::data("frames do not share one ticker set"));
    }
    if frames.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
        return Err(Error::data("frames must be in increasing index order"));
    }
    let by_index: BTreeMap<usize, &TreeFrame> =
        frames.iter().map(|f| (f.frame_index, f)).collect();
    let last_index = frames.last().unwrap().frame_index;
    out.first_frame = Some(first.frame_index);
    out.last_frame = Some(last_index);
    for start in first.frame_index..=last_index.saturating_sub(stride) {
        if start + stride > last_index {
            break;
        }
        match (by_index.get(&start), by_index.get(&(start + stride))) {
            (Some(a), Some(b)) => {
                out.pairs += 1;
                for (ka, kb) in a.degree.iter().zip(&b.degree) {
                    let l = *kb as i64 - *ka as i64;
                    *out.counts.entry(*ka).or_default().entry(l).or_insert(0) += 1;
                }
            }
            _ => out.skipped_pairs += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelSource {
    Empirical {
        min_samples: u64,
        first_frame: Option<usize>,
        last_frame: Option<usize>,
        stride: usize,
    },
    Theoretical {
        k_cap: usize,
    },
    Custom,
}

/// Transition probabilities `p(l|k)` over a degree ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionKernel {
    pub n: usize,
    pub alpha_bar: Option<f64>,
    /// `k -> (l -> p(l|k))`, including `l = 0`.
    pub rows: BTreeMap<usize, BTreeMap<i64, f64>>,
    /// Rows with too few samples to estimate.
    pub unavailable: BTreeSet<usize>,
    pub b_minus: BTreeMap<usize, f64>,
    pub b_plus: BTreeMap<usize, f64>,
    /// Largest upward jump with `p >= CUTOFF_EPS`.
    pub l_max: BTreeMap<usize, i64>,
    /// Largest downward jump (as a positive number) with `p >= CUTOFF_EPS`.
    pub l_min: BTreeMap<usize, i64>,
    /// Rows whose survival mass went negative and were rescaled.
    pub renormalized: BTreeSet<usize>,
    pub source: KernelSource,
}

impl TransitionKernel {
    /// Kernel from explicit rows; each row must sum to one.
    pub fn from_rows(n: usize, rows: BTreeMap<usize, BTreeMap<i64, f64>>) -> Result<Self> {
        let mut kernel = Self {
            n,
            alpha_bar: None,
            rows,
            unavailable: BTreeSet::new(),
            b_minus: BTreeMap::new(),
            b_plus: BTreeMap::new(),
            l_max: BTreeMap::new(),
            l_min: BTreeMap::new(),
            renormalized: BTreeSet::new(),
            source: KernelSource::Custom,
        };
        kernel.check_rows(1e-9)?;
        kernel.update_cutoffs();
        Ok(kernel)
    }

    pub fn p(&self, k: usize, l: i64) -> f64 {
        self.rows
            .get(&k)
            .and_then(|row| row.get(&l))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn row_sum(&self, k: usize) -> f64 {
        self.rows.get(&k).map_or(0.0, |row| row.values().sum())
    }

    pub fn ladder(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    pub fn check_rows(&self, tol: f64) -> Result<()> {
        for (k, row) in &self.rows {
            if row.values().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Kernel(format!("row {k} has a probability outside [0, 1]")));
            }
            let s: f64 = row.values().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Kernel(format!("row {k} sums to {s}")));
            }
            if let Some(l) = row.keys().find(|&&l| (*k as i64 + l) < 1) {
                return Err(Error::Kernel(format!("row {k} jumps to degree {}", *k as i64 + l)));
            }
        }
        Ok(())
    }

    fn update_cutoffs(&mut self) {
        self.l_max.clear();
        self.l_min.clear();
        for (k, row) in &self.rows {
            let up = row
                .iter()
                .filter(|(l, p)| **l > 0 && **p >= CUTOFF_EPS)
                .map(|(l, _)| *l)
                .max()
                .unwrap_or(0);
            let down = row
                .iter()
                .filter(|(l, p)| **l < 0 && **p >= CUTOFF_EPS)
                .map(|(l, _)| -*l)
                .max()
                .unwrap_or(0);
            self.l_max.insert(*k, up);
            self.l_min.insert(*k, down);
        }
        let wide: Vec<usize> = self
            .l_max
            .iter()
            .zip(&self.l_min)
            .filter(|((_, u), (_, d))| **u > SUPPORT_RADIUS || **d > SUPPORT_RADIUS)
            .map(|((k, _), _)| *k)
            .collect();
        if !wide.is_empty() {
            log::warn!("kernel rows with jumps beyond ±{SUPPORT_RADIUS}: {wide:?}");
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `p(k, l) = counts / totals` on rows with at least `min_samples` events.
pub fn empirical_kernel(counts: &TransitionCounts, min_samples: u64) -> TransitionKernel {
    let mut rows = BTreeMap::new();
    let mut unavailable = BTreeSet::new();
    for (k, row) in &counts.counts {
        let total: u64 = row.values().sum();
        if total >= min_samples.max(1) {
            rows.insert(
                *k,
                row.iter()
                    .map(|(l, c)| (*l, *c as f64 / total as f64))
                    .collect(),
            );
        } else {
            unavailable.insert(*k);
        }
    }
    let mut kernel = TransitionKernel {
        n: counts.n,
        alpha_bar: None,
        rows,
        unavailable,
        b_minus: BTreeMap::new(),
        b_plus: BTreeMap::new(),
        l_max: BTreeMap::new(),
        l_min: BTreeMap::new(),
        renormalized: BTreeSet::new(),
        source: KernelSource::Empirical {
            min_samples,
            first_frame: counts.first_frame,
            last_frame: counts.last_frame,
            stride: counts.stride,
        },
    };
    kernel.update_cutoffs();
    kernel
}

/// `C(trials, l) b^l (1 - b)^(trials - l)`.
pub fn binomial_pmf(trials: usize, l: usize, b: f64) -> f64 {
    if l > trials {
        return 0.0;
    }
    if b <= 0.0 {
        return if l == 0 { 1.0 } else { 0.0 };
    }
    if b >= 1.0 {
        return if l == trials { 1.0 } else { 0.0 };
    }
    let ln = ln_binomial(trials as u64, l as u64)
        + l as f64 * b.ln()
        + (trials - l) as f64 * (1.0 - b).ln();
    ln.exp()
}

/// Least-squares estimate of the binomial parameter from observed
/// probabilities of `l` successes in `trials`. Among equally good minima the
/// smallest parameter wins.
pub fn fit_binomial_parameter(trials: usize, cells: &[(usize, f64)]) -> f64 {
    let sse = |b: f64| -> f64 {
        cells
            .iter()
            .map(|&(l, p)| {
                let r = binomial_pmf(trials, l, b) - p;
                r * r
            })
            .sum()
    };
    // d SSE / db on the open interval
    let slope = |b: f64| -> f64 {
        cells
            .iter()
            .map(|&(l, p)| {
                let m = binomial_pmf(trials, l, b);
                let dm = m * (l as f64 / b - (trials - l) as f64 / (1.0 - b));
                2.0 * (m - p) * dm
            })
            .sum()
    };

    let mut grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    grid.extend((0..=450).map(|i| 10f64.powf(-9.0 + i as f64 / 50.0)));
    grid.retain(|b| (0.0..=1.0).contains(b));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let values: Vec<f64> = grid.iter().map(|&b| sse(b)).collect();

    let mut candidates: Vec<(f64, f64)> = Vec::new();
    for i in 0..grid.len() {
        let left = if i > 0 { values[i - 1] } else { f64::INFINITY };
        let right = values.get(i + 1).copied().unwrap_or(f64::INFINITY);
        if values[i] > left || values[i] > right {
            continue;
        }
        let b = if i == 0 || i + 1 == grid.len() {
            grid[i]
        } else {
            refine_minimum(&slope, grid[i - 1], grid[i + 1]).unwrap_or(grid[i])
        };
        candidates.push((sse(b), b));
    }
    let best = candidates.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let scale = cells.iter().map(|c| c.1 * c.1).sum::<f64>().max(1e-300);
    candidates
        .into_iter()
        .filter(|c| c.0 - best <= 1e-12 * scale + 1e-30)
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min)
}

/// Bisection on the derivative over `[lo, hi]`.
fn refine_minimum(slope: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (mut slo, shi) = (slope(lo), slope(hi));
    if !(slo <= 0.0 && shi >= 0.0) {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = slope(mid);
        if s <= 0.0 && slo <= 0.0 {
            lo = mid;
            slo = s;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn available_row(kernel: &TransitionKernel, k: usize) -> Result<&BTreeMap<i64, f64>> {
    kernel
        .rows
        .get(&k)
        .ok_or_else(|| Error::fit(format!("row k = {k} unavailable")))
}

/// `b(-1|k)` from `p(-l|k) = C(k, l) b^l (1 - b)^(k - l)`, `l = 1 .. k - 1`.
pub fn fit_b_minus(kernel: &TransitionKernel, k: usize) -> Result<f64> {
    let row = available_row(kernel, k)?;
    if k < 2 {
        return Err(Error::fit(format!("row k = {k} has no downward cells")));
    }
    let cells: Vec<(usize, f64)> = (1..k)
        .map(|l| (l, row.get(&-(l as i64)).copied().unwrap_or(0.0)))
        .collect();
    Ok(fit_binomial_parameter(k, &cells))
}

/// `b(+1|k)` from `p(l|k) = C(n-1-k, l) b^l (1 - b)^(n-1-k-l)`, `l = 1 .. n-1-k`.
pub fn fit_b_plus(kernel: &TransitionKernel, k: usize) -> Result<f64> {
    let row = available_row(kernel, k)?;
    let room = (kernel.n - 1).saturating_sub(k);
    if room == 0 {
        return Err(Error::fit(format!("row k = {k} has no upward cells")));
    }
    let cells: Vec<(usize, f64)> = (1..=room)
        .map(|l| (l, row.get(&(l as i64)).copied().unwrap_or(0.0)))
        .collect();
    Ok(fit_binomial_parameter(room, &cells))
}

/// Fills `b_minus` / `b_plus` for every available row where a fit exists.
pub fn fit_b_tables(kernel: &mut TransitionKernel) {
    let ks: Vec<usize> = kernel.rows.keys().copied().collect();
    for k in ks {
        if let Ok(b) = fit_b_minus(kernel, k) {
            kernel.b_minus.insert(k, b);
        }
        if let Ok(b) = fit_b_plus(kernel, k) {
            kernel.b_plus.insert(k, b);
        }
    }
}

/// Detailed-balance kernel on the ladder `1 ..= min(k_cap, n - 1)`.
///
/// Downward rows are binomial in `b(-1|k)`; upward rows follow from zero
/// microscopic current against a stationary `P(k) ∝ k^-alpha_bar`:
/// `p(l|k) = C(k+l, l) b(-1|k+l)^l (1 - b(-1|k+l))^k (1 + l/k)^-alpha_bar`.
/// The survival probability takes the remaining mass.
pub fn theoretical_kernel(
    b_minus: &BTreeMap<usize, f64>,
    alpha_bar: f64,
    n: usize,
    k_cap: usize,
) -> Result<TransitionKernel> {
    if n < 3 {
        return Err(Error::Dimension("need n ≥ 3".into()));
    }
    let top = k_cap.min(n - 1);
    if top < 2 {
        return Err(Error::Dimension("ladder needs at least degrees 1 and 2".into()));
    }
    let b = |k: usize| -> Result<f64> {
        let v = *b_minus
            .get(&k)
            .ok_or_else(|| Error::Kernel(format!("b(-1|{k}) missing")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Kernel(format!("b(-1|{k}) = {v} outside [0, 1]")));
        }
        Ok(v)
    };

    let mut rows = BTreeMap::new();
    let mut renormalized = BTreeSet::new();
    for k in 1..=top {
        let mut row = BTreeMap::new();
        for l in 1..k {
            row.insert(-(l as i64), binomial_pmf(k, l, b(k)?));
        }
        for l in 1..=(top - k) {
            let ratio = (1.0 + l as f64 / k as f64).powf(-alpha_bar);
            // C(k+l, l) b^l (1-b)^k is the binomial pmf of l out of k + l
            row.insert(l as i64, binomial_pmf(k + l, l, b(k + l)?) * ratio);
        }
        let moved: f64 = row.values().sum();
        if moved > 1.0 {
            log::warn!(
                "row k = {k}: transition mass {moved} > 1, rescaled (equilibrium hypothesis violated)"
            );
            row.values_mut().for_each(|p| *p /= moved);
            row.insert(0, 0.0);
            renormalized.insert(k);
        } else {
            row.insert(0, 1.0 - moved);
        }
        rows.insert(k, row);
    }
    let mut kernel = TransitionKernel {
        n,
        alpha_bar: Some(alpha_bar),
        rows,
        unavailable: BTreeSet::new(),
        b_minus: (2..=top).map(|k| b(k).map(|v| (k, v))).collect::<Result<_>>()?,
        b_plus: BTreeMap::new(),
        l_max: BTreeMap::new(),
        l_min: BTreeMap::new(),
        renormalized,
        source: KernelSource::Theoretical { k_cap },
    };
    kernel.update_cutoffs();
    Ok(kernel)
}

/// Normalized `k^-alpha` over the given degrees.
pub fn power_law(degrees: impl IntoIterator<Item = usize>, alpha: f64) -> Distribution {
    let raw: Distribution = degrees
        .into_iter()
        .map(|k| (k, (k as f64).powf(-alpha)))
        .collect();
    let z: f64 = raw.values().sum();
    raw.into_iter().map(|(k, w)| (k, w / z)).collect()
}

/// `p(l|k) P(k) - p(-l|k+l) P(k+l)` for every `l >= 1` with both ends on the ladder.
pub fn detailed_balance_residuals(
    kernel: &TransitionKernel,
    p: &Distribution,
) -> BTreeMap<(usize, usize), f64> {
    let mut out = BTreeMap::new();
    for &k in kernel.rows.keys() {
        for &k_up in kernel.rows.range(k + 1..).map(|(k, _)| k) {
            let l = k_up - k;
            let pk = p.get(&k).copied().unwrap_or(0.0);
            let pu = p.get(&k_up).copied().unwrap_or(0.0);
            out.insert(
                (k, l),
                kernel.p(k, l as i64) * pk - kernel.p(k_up, -(l as i64)) * pu,
            );
        }
    }
    out
}

/// One step of the master equation.
pub fn master_step(kernel: &TransitionKernel, p: &Distribution) -> Distribution {
    let mut out: Distribution = kernel.rows.keys().map(|&k| (k, 0.0)).collect();
    for (&k, &pk) in p {
        match kernel.rows.get(&k) {
            Some(row) => {
                for (&l, &q) in row {
                    let to = (k as i64 + l) as usize;
                    *out.entry(to).or_insert(0.0) += q * pk;
                }
            }
            None => *out.entry(k).or_insert(0.0) += pk,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentField {
    /// `(k, l) -> j`: net one-step flow from `k` up to `k + l`.
    pub j: BTreeMap<(usize, usize), f64>,
    pub j_in: BTreeMap<usize, f64>,
    pub j_out: BTreeMap<usize, f64>,
    /// `P_t1(k) - P_t(k) + (J_out - J_in)` per level.
    pub continuity: BTreeMap<usize, f64>,
}

impl CurrentField {
    pub fn max_continuity_error(&self) -> f64 {
        self.continuity.values().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Microscopic currents and the macroscopic in/out currents per level.
/// The bottom rung has only outgoing (upward) terms, the top rung only
/// incoming ones.
pub fn currents(kernel: &TransitionKernel, p_t: &Distribution, p_t1: &Distribution) -> CurrentField {
    let j = detailed_balance_residuals(kernel, p_t);
    let mut j_in: BTreeMap<usize, f64> = kernel.rows.keys().map(|&k| (k, 0.0)).collect();
    let mut j_out = j_in.clone();
    for (&(k, l), &flow) in &j {
        *j_out.get_mut(&k).unwrap() += flow;
        *j_in.get_mut(&(k + l)).unwrap() += flow;
    }
    let continuity = kernel
        .rows
        .keys()
        .map(|&k| {
            let dp = p_t1.get(&k).copied().unwrap_or(0.0) - p_t.get(&k).copied().unwrap_or(0.0);
            (k, dp + (j_out[&k] - j_in[&k]))
        })
        .collect();
    CurrentField {
        j,
        j_in,
        j_out,
        continuity,
    }
}
