//! Single-vertex Markov chain on the degree ladder and the deterministic
//! attachment map of a dominating hub.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::kinetics::{Distribution, TransitionKernel};
use crate::observables::ols;

pub const ROW_MASS_TOL: f64 = 1e-9;

struct CompiledRow {
    jumps: Vec<i64>,
    sampler: WeightedIndex<f64>,
}

/// Degree of one vertex evolving under a transition kernel.
pub struct LadderChain {
    rows: BTreeMap<usize, CompiledRow>,
    state: usize,
    seed: u64,
    rng: ChaCha8Rng,
    steps: u64,
    histogram: BTreeMap<usize, u64>,
}

impl LadderChain {
    /// Rows must sum to one within `ROW_MASS_TOL` and every jump must land
    /// on another row of the kernel.
    pub fn new(kernel: &TransitionKernel, start: usize, seed: u64) -> Result<Self> {
        let mut rows = BTreeMap::new();
        for (&k, row) in &kernel.rows {
            let mass: f64 = row.values().sum();
            if (mass - 1.0).abs() > ROW_MASS_TOL {
                return Err(Error::Kernel(format!("row {k} has mass {mass}")));
            }
            let live: Vec<(i64, f64)> = row.iter().filter(|(_, p)| **p > 0.0).map(|(l, p)| (*l, *p)).collect();
            for (l, _) in &live {
                let to = k as i64 + l;
                if to < 1 || !kernel.rows.contains_key(&(to as usize)) {
                    return Err(Error::Kernel(format!("row {k} jumps to degree {to} which has no row")));
                }
            }
            let sampler = WeightedIndex::new(live.iter().map(|x| x.1))
                .map_err(|e| Error::Kernel(format!("row {k}: {e}")))?;
            rows.insert(
                k,
                CompiledRow {
                    jumps: live.iter().map(|x| x.0).collect(),
                    sampler,
                },
            );
        }
        if !rows.contains_key(&start) {
            return Err(Error::Kernel(format!("start degree {start} has no row")));
        }
        Ok(Self {
            rows,
            state: start,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            histogram: BTreeMap::new(),
        })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Visits recorded after each step.
    pub fn histogram(&self) -> &BTreeMap<usize, u64> {
        &self.histogram
    }

    pub fn step(&mut self) -> usize {
        self.advance();
        *self.histogram.entry(self.state).or_insert(0) += 1;
        self.steps += 1;
        self.state
    }

    fn advance(&mut self) {
        let row = &self.rows[&self.state];
        let l = row.jumps[row.sampler.sample(&mut self.rng)];
        self.state = (self.state as i64 + l) as usize;
    }

    /// Moves without recording, for burn-in.
    pub fn skip(&mut self, steps: u64) {
        for _ in 0..steps {
            self.advance();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: BTreeMap<usize, u64>,
    pub total: u64,
}

impl Histogram {
    pub fn frequency(&self, k: usize) -> f64 {
        self.counts.get(&k).copied().unwrap_or(0) as f64 / self.total.max(1) as f64
    }

    /// OLS slope of `-ln f(k)` on `ln k` over populated `k ∈ [k_min, k_max)`.
    pub fn exponent(&self, k_min: usize, k_max: usize) -> Result<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = self
            .counts
            .range(k_min..k_max)
            .filter(|(_, c)| **c > 0)
            .map(|(k, c)| ((*k as f64).ln(), (*c as f64).ln()))
            .unzip();
        if x.len() < 3 {
            return Err(Error::fit("fewer than 3 populated bins"));
        }
        Ok(-ols(&x, &y).0)
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (k, c) in &other.counts {
            *self.counts.entry(*k).or_insert(0) += c;
        }
        self.total += other.total;
    }

    pub fn write_csv(&self, mut out: impl Write, expected: Option<&Distribution>) -> Result<()> {
        writeln!(out, "k,count,frequency,expected")?;
        for (k, c) in &self.counts {
            let e = expected
                .and_then(|p| p.get(k))
                .map(|v| v.to_string())
                .unwrap_or_default();
            writeln!(out, "{k},{c},{},{e}", self.frequency(*k))?;
        }
        Ok(())
    }
}

/// Visit frequencies of `steps` recorded moves after `burn_in` unrecorded
/// ones, starting from the lowest rung.
pub fn stationary_histogram(kernel: &TransitionKernel, steps: u64, burn_in: u64, seed: u64) -> Result<Histogram> {
    sampled_histogram(kernel, steps, burn_in, seed, 1)
}

/// As [`stationary_histogram`] but recording only every `thin`-th state.
pub fn sampled_histogram(
    kernel: &TransitionKernel,
    steps: u64,
    burn_in: u64,
    seed: u64,
    thin: u64,
) -> Result<Histogram> {
    let start = *kernel
        .rows
        .keys()
        .next()
        .ok_or_else(|| Error::Kernel("empty kernel".into()))?;
    let mut chain = LadderChain::new(kernel, start, seed)?;
    chain.skip(burn_in);
    let thin = thin.max(1);
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for s in 1..=steps {
        chain.advance();
        if s % thin == 0 {
            *counts.entry(chain.state).or_insert(0) += 1;
            total += 1;
        }
    }
    Ok(Histogram { counts, total })
}

/// One histogram per seed, computed in parallel, returned in seed order.
pub fn run_seeds(kernel: &TransitionKernel, steps: u64, burn_in: u64, seeds: &[u64], thin: u64) -> Result<Vec<Histogram>> {
    seeds
        .par_iter()
        .map(|&s| sampled_histogram(kernel, steps, burn_in, s, thin))
        .collect()
}

/// Second-largest eigenvalue modulus of a kernel reversible with respect to `p`.
pub fn second_eigenvalue(kernel: &TransitionKernel, p: &Distribution) -> Result<f64> {
    let ks: Vec<usize> = kernel.rows.keys().copied().collect();
    let m = ks.len();
    if m < 2 {
        return Ok(0.0);
    }
    let pos: BTreeMap<usize, usize> = ks.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let sqrt_p: Vec<f64> = ks.iter().map(|k| p.get(k).copied().unwrap_or(0.0).sqrt()).collect();
    if sqrt_p.iter().any(|v| *v <= 0.0) {
        return Err(Error::Kernel("stationary distribution must be positive on the ladder".into()));
    }
    let mut s = DMatrix::<f64>::zeros(m, m);
    for (&k, row) in &kernel.rows {
        let i = pos[&k];
        for (&l, &q) in row {
            if let Some(&j) = pos.get(&((k as i64 + l) as usize)) {
                s[(i, j)] += sqrt_p[i] * q / sqrt_p[j];
            }
        }
    }
    let sym = (&s + s.transpose()) * 0.5;
    let mut eig: Vec<f64> = sym.symmetric_eigen().eigenvalues.iter().map(|v| v.abs()).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    Ok(eig[1].min(1.0))
}

/// Steps between samples so the slowest mode decorrelates below `residual`.
pub fn mixing_interval(lambda2: f64, residual: f64) -> u64 {
    if lambda2 <= 0.0 {
        return 1;
    }
    if lambda2 >= 1.0 {
        return u64::MAX;
    }
    (residual.ln() / lambda2.ln()).ceil().max(1.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Goodness of fit of the histogram against `expected` on `k ∈ [k_min, k_max)`,
/// both renormalized to that range.
pub fn chi_square(hist: &Histogram, expected: &Distribution, k_min: usize, k_max: usize) -> Result<ChiSquareTest> {
    let bins: Vec<usize> = (k_min..k_max).filter(|k| expected.contains_key(k)).collect();
    if bins.len() < 2 {
        return Err(Error::fit("need at least two bins"));
    }
    let n: f64 = bins.iter().map(|k| hist.counts.get(k).copied().unwrap_or(0) as f64).sum();
    let z: f64 = bins.iter().map(|k| expected[k]).sum();
    if n == 0.0 || z <= 0.0 {
        return Err(Error::fit("no mass in the tested range"));
    }
    let statistic = bins
        .iter()
        .map(|k| {
            let e = n * expected[k] / z;
            let o = hist.counts.get(k).copied().unwrap_or(0) as f64;
            (o - e) * (o - e) / e
        })
        .sum();
    let dof = bins.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::fit(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Degrees reachable from `from` through positive-probability jumps.
pub fn reachable(kernel: &TransitionKernel, from: usize) -> BTreeSet<usize> {
    let mut seen = BTreeSet::from([from]);
    let mut queue = VecDeque::from([from]);
    while let Some(k) = queue.pop_front() {
        let Some(row) = kernel.rows.get(&k) else { continue };
        for (&l, &p) in row {
            let to = (k as i64 + l) as usize;
            if p > 0.0 && seen.insert(to) {
                queue.push_back(to);
            }
        }
    }
    seen
}

/// Every rung reaches every other rung.
pub fn is_irreducible(kernel: &TransitionKernel) -> bool {
    let all: BTreeSet<usize> = kernel.rows.keys().copied().collect();
    all.iter().all(|&k| reachable(kernel, k).is_superset(&all))
}

/// `k_{t+1} = k_t + (n - 1 - k_t) b(1|k_t)`; returns `steps + 1` values.
pub fn iterate_dragon_king(n: usize, b_plus: impl Fn(f64) -> f64, k0: f64, steps: usize) -> Result<Vec<f64>> {
    let top = n as f64 - 1.0;
    if !(0.0..=top).contains(&k0) {
        return Err(Error::Domain {
            t: 0.0,
            msg: format!("k0 = {k0} outside [0, {top}]"),
        });
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(k0);
    let mut k = k0;
    for s in 0..steps {
        let b = b_plus(k);
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Domain {
                t: s as f64,
                msg: format!("b(1|{k}) = {b} outside [0, 1]"),
            });
        }
        k += (top - k) * b;
        out.push(k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::{power_law, theoretical_kernel};
    use crate::phasefit::NucleationLaw;

    fn identity(top: usize) -> TransitionKernel {
        TransitionKernel::from_rows(100, (1..=top).map(|k| (k, BTreeMap::from([(0, 1.0)]))).collect()).unwrap()
    }

    fn db_kernel() -> TransitionKernel {
        let b: BTreeMap<usize, f64> = (1..=30).map(|k| (k, 0.3 / k as f64)).collect();
        theoretical_kernel(&b, 3.07, 459, 30).unwrap()
    }

    #[test]
    fn identity_kernel_holds_state() {
        let mut chain = LadderChain::new(&identity(5), 3, 1).unwrap();
        for _ in 0..100 {
            assert_eq!(chain.step(), 3);
        }
        assert_eq!(chain.histogram()[&3], chain.steps());
    }

    #[test]
    fn deterministic_up_move() {
        let rows = BTreeMap::from([
            (1, BTreeMap::from([(1, 1.0)])),
            (2, BTreeMap::from([(0, 1.0)])),
        ]);
        let kern = TransitionKernel::from_rows(10, rows).unwrap();
        let mut chain = LadderChain::new(&kern, 1, 0).unwrap();
        assert_eq!(chain.step(), 2);
    }

    #[test]
    fn bad_rows_are_rejected() {
        let mut kern = identity(3);
        kern.rows.get_mut(&2).unwrap().insert(0, 0.9);
        assert!(matches!(LadderChain::new(&kern, 1, 0), Err(Error::Kernel(_))));
        let mut kern = identity(3);
        kern.rows.insert(3, BTreeMap::from([(1, 1.0)]));
        assert!(LadderChain::new(&kern, 1, 0).is_err());
    }

    #[test]
    fn seeded_chains_repeat() {
        let k = db_kernel();
        let a = stationary_histogram(&k, 20_000, 100, 9).unwrap();
        let b = stationary_histogram(&k, 20_000, 100, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, stationary_histogram(&k, 20_000, 100, 10).unwrap());
        assert_eq!(a.total, 20_000);
    }

    #[test]
    fn two_state_chain_matches_closed_form() {
        let (a, b) = (0.2, 0.05);
        let rows = BTreeMap::from([
            (1, BTreeMap::from([(0, 1.0 - a), (1, a)])),
            (2, BTreeMap::from([(-1, b), (0, 1.0 - b)])),
        ]);
        let kern = TransitionKernel::from_rows(10, rows).unwrap();
        let h = stationary_histogram(&kern, 400_000, 1000, 4).unwrap();
        let want = b / (a + b);
        assert!((h.frequency(1) - want).abs() < 0.01, "{} vs {want}", h.frequency(1));
        let p = BTreeMap::from([(1, want), (2, 1.0 - want)]);
        // eigenvalues of a two-state chain: 1 and 1 - a - b
        assert!((second_eigenvalue(&kern, &p).unwrap() - (1.0 - a - b)).abs() < 1e-12);
    }

    #[test]
    fn db_chain_visits_plankton_levels_and_is_irreducible() {
        let k = db_kernel();
        let h = stationary_histogram(&k, 200_000, 1000, 1).unwrap();
        assert!((2..=11).all(|d| h.counts.get(&d).copied().unwrap_or(0) > 0));
        let mut restricted = k.clone();
        restricted.rows.retain(|d, _| *d <= 20);
        assert!((1..=20).all(|d| reachable(&restricted, 1).contains(&d)));
        assert!(is_irreducible(&k));
        assert!(!is_irreducible(&identity(3)));
    }

    #[test]
    fn db_chain_exponent_and_chi_square() {
        let k = db_kernel();
        let p = power_law(k.ladder(), 3.07);
        let lambda = second_eigenvalue(&k, &p).unwrap();
        assert!(lambda > 0.0 && lambda < 1.0);
        let h = stationary_histogram(&k, 1_000_000, 10_000, 7).unwrap();
        assert!((h.exponent(2, 12).unwrap() - 3.07).abs() < 0.15);
        let thin = mixing_interval(lambda, 0.05);
        let hs = sampled_histogram(&k, 1_000_000, 10_000, 7, thin).unwrap();
        let test = chi_square(&hs, &p, 2, 12).unwrap();
        assert_eq!(test.dof, 9);
        assert!(test.p_value > 1e-4, "{test:?}");
    }

    #[test]
    fn chi_square_hand_value() {
        let hist = Histogram {
            counts: BTreeMap::from([(2, 30), (3, 10)]),
            total: 40,
        };
        let p = BTreeMap::from([(2, 0.5), (3, 0.5)]);
        let t = chi_square(&hist, &p, 2, 4).unwrap();
        // (30-20)^2/20 + (10-20)^2/20 = 10, dof 1
        assert!((t.statistic - 10.0).abs() < 1e-12);
        assert!((t.p_value - 0.001565402258).abs() < 1e-9);
    }

    #[test]
    fn dragon_king_trivial_maps() {
        assert!(iterate_dragon_king(50, |_| 0.0, 3.0, 10).unwrap().iter().all(|&k| k == 3.0));
        let full = iterate_dragon_king(50, |_| 1.0, 3.0, 2).unwrap();
        assert_eq!(full[1], 49.0);
        assert!(iterate_dragon_king(50, |_| 1.5, 3.0, 2).is_err());
    }

    #[test]
    fn dragon_king_follows_nucleation_envelope() {
        let law = NucleationLaw {
            a0: 4.5273,
            a: 2.5,
            z: 2.0,
            t_crit: 0.0,
        };
        let n = 459;
        let b = |k: f64| law.rate(k) / (n as f64 - 1.0 - k);
        let traj = iterate_dragon_king(n, b, law.value(1.0), 379).unwrap();
        for (s, k) in traj.iter().enumerate().skip(1) {
            let t = 1.0 + s as f64;
            let exact = law.value(t);
            // unit-step Euler drifts by O(ln t / t) relative to the growth
            let bound = (1.0 + t.ln()) / (4.0 * t);
            assert!((k - exact).abs() / (exact - law.a0) < bound, "step {s}: {k} vs {exact}");
        }
    }

    #[test]
    fn histogram_csv() {
        let h = Histogram {
            counts: BTreeMap::from([(1, 3), (2, 1)]),
            total: 4,
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf, None).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "k,count,frequency,expected\n1,3,0.75,\n2,1,0.25,\n");
    }
}
