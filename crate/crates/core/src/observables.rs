//! Per-frame observables of a spanning tree: degree statistics and the
//! power-law exponent, mean occupation layer, mean handshake distance,
//! entropies, betweenness, degree ranks and handshake distances between
//! ranked vertices, plus the variogram of any resulting series.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corrnet::{build_mst, DistanceMatrix, TreeFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeDistribution {
    pub frame_index: usize,
    pub n: usize,
    /// degree -> number of vertices with that degree
    pub counts: BTreeMap<usize, usize>,
}

impl DegreeDistribution {
    pub fn probability(&self, k: usize) -> f64 {
        self.counts.get(&k).copied().unwrap_or(0) as f64 / self.n as f64
    }
}

pub fn degree_distribution(frame: &TreeFrame) -> DegreeDistribution {
    let mut counts = BTreeMap::new();
    for &k in &frame.degree {
        *counts.entry(k).or_insert(0) += 1;
    }
    DegreeDistribution {
        frame_index: frame.frame_index,
        n: frame.n(),
        counts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub alpha_stderr: f64,
    pub k_min: usize,
    /// exclusive
    pub k_max: usize,
    pub r2: f64,
    pub bins: usize,
}

/// Ordinary least squares fit of a straight line; returns
/// `(slope, intercept, slope_stderr, r2)`.
pub(crate) fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .sum();
    let stderr = if x.len() > 2 {
        (sse / (m - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    (slope, intercept, stderr, r2)
}

fn populated_bins(dist: &DegreeDistribution, k_min: usize, k_max: usize) -> Vec<(usize, usize)> {
    dist.counts
        .range(k_min.max(1)..k_max)
        .filter(|(_, &c)| c > 0)
        .map(|(&k, &c)| (k, c))
        .collect()
}

/// OLS of `ln N(k)` on `ln k` over populated bins with `k_min <= k < k_max`.
pub fn fit_power_law(dist: &DegreeDistribution, k_min: usize, k_max: usize) -> Result<PowerLawFit> {
    let bins = populated_bins(dist, k_min, k_max);
    if bins.len() < 3 {
        return Err(Error::fit(format!(
            "frame {}: {} populated degree bins in [{k_min}, {k_max}), need 3",
            dist.frame_index,
            bins.len()
        )));
    }
    let x: Vec<f64> = bins.iter().map(|(k, _)| (*k as f64).ln()).collect();
    let y: Vec<f64> = bins.iter().map(|(_, c)| (*c as f64).ln()).collect();
    let (slope, _, stderr, r2) = ols(&x, &y);
    Ok(PowerLawFit {
        alpha: -slope,
        alpha_stderr: stderr,
        k_min,
        k_max,
        r2,
        bins: bins.len(),
    })
}

/// Maximum-likelihood exponent of a discrete power law truncated to
/// `[k_min, k_max)`. The standard error comes from the Fisher information.
pub fn fit_power_law_mle(
    dist: &DegreeDistribution,
    k_min: usize,
    k_max: usize,
) -> Result<PowerLawFit> {
    let bins = populated_bins(dist, k_min, k_max);
    if bins.len() < 2 {
        return Err(Error::fit(format!(
            "frame {}: {} populated degree bins, need 2 for MLE",
            dist.frame_index,
            bins.len()
        )));
    }
    let support: Vec<f64> = (k_min.max(1)..k_max).map(|k| (k as f64).ln()).collect();
    let total: f64 = bins.iter().map(|(_, c)| *c as f64).sum();
    let mean_log = bins
        .iter()
        .map(|(k, c)| *c as f64 * (*k as f64).ln())
        .sum::<f64>()
        / total;
    // (E[ln k], Var[ln k]) under exponent a
    let moments = |a: f64| {
        let w: Vec<f64> = support.iter().map(|l| (-a * l).exp()).collect();
        let z: f64 = w.iter().sum();
        let m1 = support.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() / z;
        let m2 = support.iter().zip(&w).map(|(l, w)| l * l * w).sum::<f64>() / z;
        (m1, m2 - m1 * m1)
    };
    // the score N (E_a[ln k] - mean_log) is decreasing in a
    let (mut lo, mut hi) = (-20.0, 20.0);
    if moments(lo).0 < mean_log || moments(hi).0 > mean_log {
        return Err(Error::fit("MLE exponent outside [-20, 20]"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if moments(mid).0 > mean_log {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    let var = moments(alpha).1;
    Ok(PowerLawFit {
        alpha,
        alpha_stderr: 1.0 / (total * var).sqrt(),
        k_min,
        k_max,
        r2: f64::NAN,
        bins: bins.len(),
    })
}

/// Arithmetic mean and sample standard deviation of the valid exponents.
pub fn mean_alpha(alphas: &[f64]) -> Result<(f64, f64)> {
    if alphas.is_empty() {
        return Err(Error::fit("no valid exponent to average"));
    }
    let m = alphas.len() as f64;
    let mean = alphas.iter().sum::<f64>() / m;
    let sd = if alphas.len() > 1 {
        (alphas.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, sd))
}

/// Handshake distance (edge count) from `root` to every vertex.
pub fn bfs_levels(adj: &[Vec<usize>], root: usize) -> Vec<usize> {
    let mut level = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::from([root]);
    level[root] = 0;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if level[u] == usize::MAX {
                level[u] = level[v] + 1;
                queue.push_back(u);
            }
        }
    }
    level
}

/// Rooted at vertex 0: `(parent, subtree size, preorder)`.
fn rooted(adj: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = adj.len();
    let mut parent = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    parent[0] = 0;
    while let Some(v) = stack.pop() {
        order.push(v);
        for &u in &adj[v] {
            if parent[u] == usize::MAX {
                parent[u] = v;
                stack.push(u);
            }
        }
    }
    let mut size = vec![1; n];
    for &v in order.iter().skip(1).rev() {
        size[parent[v]] += size[v];
    }
    (parent, size, order)
}

/// `b_v`: unordered pairs `{i, j}` (both distinct from `v`) whose tree path
/// passes through `v`, from the sizes of the branches hanging off `v`.
pub fn tree_betweenness(frame: &TreeFrame) -> Vec<u64> {
    let n = frame.n();
    let adj = frame.adjacency();
    let (parent, size, _) = rooted(&adj);
    (0..n)
        .map(|v| {
            let mut sum = 0u64;
            let mut sum_sq = 0u64;
            for &u in &adj[v] {
                let branch = if u == parent[v] && v != 0 {
                    (n - size[v]) as u64
                } else {
                    size[u] as u64
                };
                sum += branch;
                sum_sq += branch * branch;
            }
            (sum * sum - sum_sq) / 2
        })
        .collect()
}

/// Sum of handshake distances over all unordered pairs, via edge cut sizes.
pub fn wiener_index(frame: &TreeFrame) -> u64 {
    let n = frame.n();
    let (_, size, order) = rooted(&frame.adjacency());
    order
        .iter()
        .skip(1)
        .map(|&v| (size[v] * (n - size[v])) as u64)
        .sum()
}

/// Mean handshake distance over all `n (n - 1) / 2` pairs.
pub fn mhsd(frame: &TreeFrame) -> f64 {
    let n = frame.n() as u64;
    wiener_index(frame) as f64 / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterRule {
    /// Highest degree; ties by betweenness, then id.
    #[default]
    MaxDegree,
    /// Highest betweenness; ties by degree, then id.
    MaxBetweenness,
}

pub fn central_vertex(frame: &TreeFrame, betweenness: &[u64], rule: CenterRule) -> usize {
    let key = |v: usize| match rule {
        CenterRule::MaxDegree => (frame.degree[v] as u64, betweenness[v]),
        CenterRule::MaxBetweenness => (betweenness[v], frame.degree[v] as u64),
    };
    // max_by_key keeps the last maximum; scan in reverse so the smallest id wins
    (0..frame.n()).rev().max_by_key(|&v| key(v)).unwrap()
}

/// Mean level of all vertices below `root` (the root sits at level 0).
pub fn mol(frame: &TreeFrame, root: usize) -> f64 {
    let levels = bfs_levels(&frame.adjacency(), root);
    levels.iter().sum::<usize>() as f64 / frame.n() as f64
}

pub fn mol_central(frame: &TreeFrame, rule: CenterRule) -> f64 {
    let b = tree_betweenness(frame);
    mol(frame, central_vertex(frame, &b, rule))
}

/// MOL of the tree rebuilt without asset `exclude`.
pub fn mol_excluding(dist: &DistanceMatrix, exclude: usize, rule: CenterRule) -> Result<f64> {
    if exclude >= dist.n() {
        return Err(Error::Dimension(format!("no asset {exclude}")));
    }
    if dist.n() < 3 {
        return Err(Error::Dimension(
            "excluding an asset leaves fewer than 2 vertices".into(),
        ));
    }
    let reduced = build_mst(&dist.without(exclude), 0, "")?;
    Ok(mol_central(&reduced, rule))
}

fn shannon(weights: impl Iterator<Item = f64>) -> f64 {
    -weights
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `-sum P(k) ln P(k)` with `P(k) = N(k) / n`.
pub fn degree_entropy(dist: &DegreeDistribution) -> f64 {
    let n = dist.n as f64;
    shannon(dist.counts.values().map(|&c| c as f64 / n))
}

/// Shannon entropy of the normalized vertex efficiencies
/// `e(v) = sum_{u != v} 1 / hd(v, u)`.
///
/// Not a standard network measure; other normalizations are possible.
pub fn efficiency_entropy(frame: &TreeFrame) -> f64 {
    let adj = frame.adjacency();
    let eff: Vec<f64> = (0..frame.n())
        .map(|v| {
            bfs_levels(&adj, v)
                .iter()
                .filter(|&&l| l > 0)
                .map(|&l| 1.0 / l as f64)
                .sum()
        })
        .collect();
    let total: f64 = eff.iter().sum();
    shannon(eff.iter().map(|e| e / total))
}

/// Vertices sorted by degree (desc), betweenness (desc), id (asc).
pub fn rank_order(frame: &TreeFrame, betweenness: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frame.n()).collect();
    order.sort_by(|&a, &b| {
        frame.degree[b]
            .cmp(&frame.degree[a])
            .then(betweenness[b].cmp(&betweenness[a]))
            .then(a.cmp(&b))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub leader: usize,
    pub k_leader: usize,
    pub vice: usize,
    pub k2: usize,
    pub third: Option<usize>,
    pub k3: Option<usize>,
    /// 1-based rank of the followed asset, if one is followed.
    pub follow_rank: Option<usize>,
}

pub fn rank_track(order: &[usize], frame: &TreeFrame, follow: Option<usize>) -> RankRecord {
    let deg = |v: usize| frame.degree[v];
    RankRecord {
        leader: order[0],
        k_leader: deg(order[0]),
        vice: order[1],
        k2: deg(order[1]),
        third: order.get(2).copied(),
        k3: order.get(2).map(|&v| deg(v)),
        follow_rank: follow.and_then(|f| order.iter().position(|&v| v == f).map(|p| p + 1)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thsd {
    pub distance: usize,
    /// Distance to the next same-degree holder, not shorter than `distance`.
    pub twin: Option<usize>,
}

/// Handshake distance from `from` to the nearest vertex holding the degree of
/// rank position `rank` (1-based). Vertices ranked above `rank` never count,
/// so a leader tied in degree with the vice-leader is not its own rank-2 holder.
pub fn thsd(frame: &TreeFrame, order: &[usize], from: usize, rank: usize) -> Option<Thsd> {
    if rank == 0 || rank > order.len() {
        return None;
    }
    let k = frame.degree[order[rank - 1]];
    let levels = bfs_levels(&frame.adjacency(), from);
    let mut candidates: Vec<(usize, usize)> = order[rank - 1..]
        .iter()
        .filter(|&&v| frame.degree[v] == k)
        .map(|&v| (levels[v], v))
        .collect();
    candidates.sort_unstable();
    Some(Thsd {
        distance: candidates[0].0,
        twin: candidates.get(1).map(|c| c.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramSeries {
    pub lag: usize,
    pub squared: bool,
    pub increments: Vec<f64>,
    /// `(block start, unbiased variance)` over disjoint blocks of increments.
    pub partial_variances: Vec<(usize, f64)>,
}

pub fn variogram(series: &[f64], lag: usize, block: usize, squared: bool) -> Result<VariogramSeries> {
    if lag == 0 {
        return Err(Error::config("lag", "lag must be ≥ 1"));
    }
    if block < 2 {
        return Err(Error::config("partial_window", "block length must be ≥ 2"));
    }
    let increments: Vec<f64> = if series.len() > lag {
        series
            .iter()
            .zip(&series[lag..])
            .map(|(a, b)| if squared { (b - a) * (b - a) } else { b - a })
            .collect()
    } else {
        Vec::new()
    };
    let partial_variances = increments
        .chunks_exact(block)
        .enumerate()
        .map(|(i, chunk)| {
            let m = chunk.len() as f64;
            let mean = chunk.iter().sum::<f64>() / m;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
            (i * block, var)
        })
        .collect();
    Ok(VariogramSeries {
        lag,
        squared,
        increments,
        partial_variances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannRow {
    pub k: usize,
    pub energy: f64,
    pub weight: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoltzmannTable {
    pub beta: f64,
    pub partition: f64,
    pub rows: Vec<BoltzmannRow>,
}

/// Energy `ln k`, inverse temperature `alpha - 1`, over `k = 1 ..= n - 1`.
pub fn boltzmann_map(n: usize, alpha_bar: f64) -> Result<BoltzmannTable> {
    if n < 2 {
        return Err(Error::Dimension("need n ≥ 2".into()));
    }
    let beta = alpha_bar - 1.0;
    let raw: Vec<(usize, f64, f64)> = (1..n)
        .map(|k| {
            let e = (k as f64).ln();
            (k, e, (-beta * e).exp())
        })
        .collect();
    let partition: f64 = raw.iter().map(|r| r.2).sum();
    Ok(BoltzmannTable {
        beta,
        partition,
        rows: raw
            .into_iter()
            .map(|(k, energy, weight)| BoltzmannRow {
                k,
                energy,
                weight,
                probability: weight / partition,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableOptions {
    pub k_min: usize,
    pub k_max: usize,
    pub center_rule: CenterRule,
    pub mle: bool,
    pub efficiency: bool,
    /// Asset removed before recomputing MOL.
    pub exclude: Option<usize>,
    /// Asset whose handshake distances to the ranked vertices are tracked;
    /// the frame's leader when unset.
    pub follow: Option<usize>,
}

impl Default for ObservableOptions {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 12,
            center_rule: CenterRule::MaxDegree,
            mle: false,
            efficiency: true,
            exclude: None,
            follow: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservables {
    pub frame_index: usize,
    pub center_date: String,
    pub mol: f64,
    pub mol_excluding: Option<f64>,
    pub mhsd: f64,
    pub degree_entropy: f64,
    pub efficiency_entropy: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_stderr: Option<f64>,
    pub ranks: RankRecord,
    pub delta: usize,
    pub delta2: Option<usize>,
    pub b_leader: u64,
    pub b_vice: u64,
    /// Degree of the followed asset, if any.
    pub k_follow: Option<usize>,
    pub thsd2: Option<Thsd>,
    pub thsd3: Option<Thsd>,
}

/// All observables of one frame. `dist` is needed only for `exclude`.
pub fn frame_observables(
    frame: &TreeFrame,
    dist: Option<&DistanceMatrix>,
    opts: &ObservableOptions,
) -> Result<FrameObservables> {
    let b = tree_betweenness(frame);
    let order = rank_order(frame, &b);
    let ranks = rank_track(&order, frame, opts.follow);
    let center = central_vertex(frame, &b, opts.center_rule);
    let degrees = degree_distribution(frame);
    let fit = if opts.mle {
        fit_power_law_mle(&degrees, opts.k_min, opts.k_max)
    } else {
        fit_power_law(&degrees, opts.k_min, opts.k_max)
    }
    .ok();
    let mol_excluding = match (opts.exclude, dist) {
        (Some(x), Some(d)) => Some(mol_excluding(d, x, opts.center_rule)?),
        (Some(_), None) => {
            return Err(Error::data("excluded-asset MOL needs the distance matrix"))
        }
        _ => None,
    };
    let from = opts.follow.unwrap_or(ranks.leader);
    Ok(FrameObservables {
        frame_index: frame.frame_index,
        center_date: frame.center_date.clone(),
        mol: mol(frame, center),
        mol_excluding,
        mhsd: mhsd(frame),
        degree_entropy: degree_entropy(&degrees),
        efficiency_entropy: opts.efficiency.then(|| efficiency_entropy(frame)),
        alpha: fit.map(|f| f.alpha),
        alpha_stderr: fit.map(|f| f.alpha_stderr),
        delta: ranks.k_leader - ranks.k2,
        delta2: ranks.k3.map(|k3| ranks.k2 - k3),
        b_leader: b[ranks.leader],
        b_vice: b[ranks.vice],
        k_follow: opts.follow.map(|f| frame.degree[f]),
        thsd2: thsd(frame, &order, from, 2),
        thsd3: thsd(frame, &order, from, 3),
        ranks,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one CSV per series family into `dir`; returns the file names.
pub fn write_series(
    dir: &std::path::Path,
    records: &[FrameObservables],
    tickers: &[String],
) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &str, row: &dyn Fn(&FrameObservables) -> String| -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
        writeln!(f, "frame_index,center_date,{header}")?;
        for r in records {
            writeln!(f, "{},{},{}", r.frame_index, r.center_date, row(r))?;
        }
        f.flush()?;
        written.push(name.to_string());
        Ok(())
    };
    emit(
        "structure.csv",
        "mol,mol_excluding,mhsd,degree_entropy,efficiency_entropy",
        &|r| {
            format!(
                "{},{},{},{},{}",
                r.mol,
                opt(r.mol_excluding),
                r.mhsd,
                r.degree_entropy,
                opt(r.efficiency_entropy)
            )
        },
    )?;
    emit("powerlaw.csv", "alpha,alpha_stderr", &|r| {
        format!("{},{}", opt(r.alpha), opt(r.alpha_stderr))
    })?;
    emit(
        "ranks.csv",
        "leader,k_leader,vice,k2,third,k3,delta,delta2,b_leader,b_vice,k_follow,follow_rank",
        &|r| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                tickers[r.ranks.leader],
                r.ranks.k_leader,
                tickers[r.ranks.vice],
                r.ranks.k2,
                opt(r.ranks.third.map(|v| &tickers[v])),
                opt(r.ranks.k3),
                r.delta,
                opt(r.delta2),
                r.b_leader,
                r.b_vice,
                opt(r.k_follow),
                opt(r.ranks.follow_rank)
            )
        },
    )?;
    emit("thsd.csv", "thsd2,thsd2_twin,thsd3,thsd3_twin", &|r| {
        format!(
            "{},{},{},{}",
            opt(r.thsd2.map(|t| t.distance)),
            opt(r.thsd2.and_then(|t| t.twin)),
            opt(r.thsd3.map(|t| t.distance)),
            opt(r.thsd3.and_then(|t| t.twin))
        )
    })?;
    Ok(written)
}
