//! Rolling-window Pearson correlations, the correlation distance and
//! per-window minimum spanning trees.
//!
//! Windows are processed in blocks of [`RESYNC_INTERVAL`] frames. Each block
//! starts from a direct evaluation of the window sums and then slides with
//! one subtract/add per pair and step, so blocks are independent and can be
//! evaluated in parallel without changing a single bit of the output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ReturnPanel;

/// Frames between full recomputations of the window sums.
pub const RESYNC_INTERVAL: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: usize,
    pub step: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            width: 400,
            step: 1,
        }
    }
}

impl WindowSpec {
    pub fn new(width: usize, step: usize) -> Result<Self> {
        let spec = Self { width, step };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::config("width_td", "width_td ≥ 2"));
        }
        if self.step < 1 {
            return Err(Error::config("step_td", "step_td ≥ 1"));
        }
        Ok(())
    }

    /// `floor((T - width) / step) + 1`, or zero when the window does not fit.
    pub fn frame_count(&self, n_returns: usize) -> usize {
        if n_returns < self.width {
            0
        } else {
            (n_returns - self.width) / self.step + 1
        }
    }

    pub fn frame_start(&self, frame: usize) -> usize {
        frame * self.step
    }

    /// Offset of the reported center date inside the window.
    pub fn center_offset(&self) -> usize {
        self.width / 2
    }
}

/// Symmetric `n x n` matrix stored densely, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    fn filled(n: usize, value: f64) -> Self {
        Self {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("matrix must be square".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        for i in 0..n {
            for j in 0..i {
                if data[i * n + j] != data[j * n + i] {
                    return Err(Error::data(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Copy with row/column `drop` removed.
    pub fn without(&self, drop: usize) -> Self {
        let keep: Vec<usize> = (0..self.n).filter(|&i| i != drop).collect();
        let m = keep.len();
        let mut data = Vec::with_capacity(m * m);
        for &i in &keep {
            for &j in &keep {
                data.push(self.get(i, j));
            }
        }
        Self { n: m, data }
    }

    /// Applies a vertex relabeling: entry `(perm[i], perm[j])` of the result
    /// is entry `(i, j)` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::filled(self.n, 0.0);
        for i in 0..self.n {
            for j in 0..self.n {
                out.data[perm[i] * self.n + perm[j]] = self.get(i, j);
            }
        }
        out
    }
}

/// Pearson correlation matrix: unit diagonal, entries clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(SymMatrix);

impl CorrelationMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = SymMatrix::from_rows(rows)?;
        for i in 0..m.n {
            if m.get(i, i) != 1.0 {
                return Err(Error::data(format!("diagonal entry {i} is not 1")));
            }
        }
        if m.data.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(Error::data("correlation outside [-1, 1]"));
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.0
    }

    /// Smallest eigenvalue; used as a positive-semidefiniteness diagnostic.
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.n();
        let m = nalgebra::DMatrix::from_row_slice(n, n, &self.0.data);
        m.symmetric_eigenvalues().min()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .data
            .iter()
            .zip(&other.0.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Correlation distances `d = sqrt(2 (1 - C))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix(SymMatrix);

impl DistanceMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = SymMatrix::from_rows(rows)?;
        if (0..m.n).any(|i| m.get(i, i) != 0.0) {
            return Err(Error::data("distance diagonal must be zero"));
        }
        if m.data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::data("distances must be finite and non-negative"));
        }
        Ok(Self(m))
    }

    pub fn n(&self) -> usize {
        self.0.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn without(&self, drop: usize) -> Self {
        Self(self.0.without(drop))
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self(self.0.permuted(perm))
    }
}

pub fn distance_of(c: f64) -> f64 {
    (2.0 * (1.0 - c)).max(0.0).sqrt()
}

pub fn to_distances(corr: &CorrelationMatrix) -> DistanceMatrix {
    let n = corr.n();
    let data = corr
        .0
        .data
        .iter()
        .enumerate()
        .map(|(idx, &c)| if idx / n == idx % n { 0.0 } else { distance_of(c) })
        .collect();
    DistanceMatrix(SymMatrix { n, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

impl Edge {
    pub fn key(&self) -> (usize, usize) {
        (self.a, self.b)
    }
}

/// One window's minimum spanning tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeFrame {
    pub frame_index: usize,
    pub center_date: String,
    /// `n - 1` edges with `a < b`, in the order Kruskal accepted them.
    pub edges: Vec<Edge>,
    pub degree: Vec<usize>,
    /// Some tree edge joins two negatively correlated assets.
    pub uses_negative_correlation: bool,
}

impl TreeFrame {
    pub fn n(&self) -> usize {
        self.degree.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.distance).sum()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n()];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Builds a frame from an explicit edge list (no minimality implied).
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if edges.len() + 1 != n {
            return Err(Error::Dimension(format!(
                "a tree on {n} vertices has {} edges, got {}",
                n.saturating_sub(1),
                edges.len()
            )));
        }
        let mut uf = UnionFind::new(n);
        let mut degree = vec![0; n];
        let mut out = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= n || v >= n || u == v || !uf.union(u, v) {
                return Err(Error::data(format!("edge ({u}, {v}) breaks the tree")));
            }
            degree[u] += 1;
            degree[v] += 1;
            out.push(Edge {
                a: u.min(v),
                b: u.max(v),
                distance: 1.0,
            });
        }
        Ok(Self {
            frame_index: 0,
            center_date: String::new(),
            edges: out,
            degree,
            uses_negative_correlation: false,
        })
    }
}

/// Disjoint sets with path halving and union by size.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merges the sets of `a` and `b`; false if they were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

/// Kruskal's algorithm with candidate edges ordered by
/// `(distance, min(i, j), max(i, j))`, so ties resolve the same way every time.
pub fn build_mst(dist: &DistanceMatrix, frame_index: usize, center_date: &str) -> Result<TreeFrame> {
    let n = dist.n();
    if n < 2 {
        return Err(Error::Dimension(format!("need at least 2 vertices, got {n}")));
    }
    let mut candidates: Vec<(f64, u32, u32)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            candidates.push((dist.get(i, j), i as u32, j as u32));
        }
    }
    candidates.sort_unstable_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });

    let mut uf = UnionFind::new(n);
    let mut edges = Vec::with_capacity(n - 1);
    let mut degree = vec![0; n];
    let mut negative = false;
    for (d, i, j) in candidates {
        let (i, j) = (i as usize, j as usize);
        if uf.union(i, j) {
            degree[i] += 1;
            degree[j] += 1;
            // d > sqrt(2) <=> C < 0
            negative |= d * d > 2.0;
            edges.push(Edge { a: i, b: j, distance: d });
            if edges.len() == n - 1 {
                break;
            }
        }
    }
    Ok(TreeFrame {
        frame_index,
        center_date: center_date.to_string(),
        edges,
        degree,
        uses_negative_correlation: negative,
    })
}

/// Textbook two-pass Pearson correlation of the rows over `[start, start + width)`.
pub fn direct_correlation(
    returns: &ReturnPanel,
    start: usize,
    width: usize,
) -> std::result::Result<CorrelationMatrix, usize> {
    let n = returns.n_assets();
    let w = width as f64;
    let centered: Vec<Vec<f64>> = returns
        .rows()
        .iter()
        .map(|r| {
            let slice = &r[start..start + width];
            let mean = slice.iter().sum::<f64>() / w;
            slice.iter().map(|x| x - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if let Some(bad) = norms.iter().position(|&s| s == 0.0) {
        return Err(bad);
    }
    let mut m = SymMatrix::filled(n, 1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            m.set(i, j, (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0));
        }
    }
    Ok(CorrelationMatrix(m))
}

/// Running sums over one window, for all assets and pairs.
struct WindowSums<'a> {
    rows: &'a [Vec<f64>],
    width: usize,
    start: usize,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    /// Upper triangle, row-major, `i < j`.
    sxy: Vec<f64>,
}

impl<'a> WindowSums<'a> {
    fn at(rows: &'a [Vec<f64>], start: usize, width: usize) -> Self {
        let n = rows.len();
        let mut sums = Self {
            rows,
            width,
            start,
            sx: vec![0.0; n],
            sxx: vec![0.0; n],
            sxy: vec![0.0; n * (n - 1) / 2],
        };
        for t in start..start + width {
            sums.add_day(t, 1.0);
        }
        sums
    }

    #[inline]
    fn add_day(&mut self, t: usize, sign: f64) {
        let n = self.rows.len();
        let mut k = 0;
        for i in 0..n {
            let xi = self.rows[i][t];
            self.sx[i] += sign * xi;
            self.sxx[i] += sign * xi * xi;
            let sxi = sign * xi;
            for j in (i + 1)..n {
                self.sxy[k] += sxi * self.rows[j][t];
                k += 1;
            }
        }
    }

    fn advance(&mut self, step: usize) {
        for _ in 0..step {
            let old = self.start;
            let new = self.start + self.width;
            self.add_day(old, -1.0);
            self.add_day(new, 1.0);
            self.start += 1;
        }
    }

    /// Returns the index of a zero-variance asset on failure.
    fn correlation(&self) -> std::result::Result<CorrelationMatrix, usize> {
        let n = self.rows.len();
        let w = self.width as f64;
        let mut scale = Vec::with_capacity(n);
        for i in 0..n {
            let var = w * self.sxx[i] - self.sx[i] * self.sx[i];
            // Residue of add/subtract cycles on a constant series is not variance.
            if !(var > 1e-12 * w * self.sxx[i]) || self.sxx[i] == 0.0 {
                return Err(i);
            }
            scale.push(var.sqrt());
        }
        let mut m = SymMatrix::filled(n, 1.0);
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                let cov = w * self.sxy[k] - self.sx[i] * self.sx[j];
                m.set(i, j, (cov / (scale[i] * scale[j])).clamp(-1.0, 1.0));
                k += 1;
            }
        }
        Ok(CorrelationMatrix(m))
    }
}

/// Data handed to a per-frame callback.
pub struct FrameInput<'a> {
    pub frame_index: usize,
    pub center_date: &'a str,
    pub corr: &'a CorrelationMatrix,
}

fn check_fits(returns: &ReturnPanel, spec: &WindowSpec) -> Result<usize> {
    spec.validate()?;
    if returns.n_assets() < 2 {
        return Err(Error::Dimension("need at least 2 assets".into()));
    }
    let frames = spec.frame_count(returns.n_days());
    if frames == 0 {
        log::warn!(
            "window width {} exceeds {} return rows; no frames",
            spec.width,
            returns.n_days()
        );
    }
    Ok(frames)
}

/// Evaluates `f` on every frame's correlation matrix. Output is ordered by
/// frame index and identical for any rayon pool size. Frames with a
/// zero-variance asset yield [`Error::ZeroVariance`] in their slot.
pub fn map_frames<T, F>(returns: &ReturnPanel, spec: &WindowSpec, f: F) -> Result<Vec<Result<T>>>
where
    T: Send,
    F: Fn(FrameInput<'_>) -> Result<T> + Sync,
{
    let frames = check_fits(returns, spec)?;
    let blocks: Vec<usize> = (0..frames).step_by(RESYNC_INTERVAL).collect();
    let per_block: Vec<Vec<Result<T>>> = blocks
        .into_par_iter()
        .map(|first| {
            let last = (first + RESYNC_INTERVAL).min(frames);
            let mut sums = WindowSums::at(returns.rows(), spec.frame_start(first), spec.width);
            let mut out = Vec::with_capacity(last - first);
            for frame in first..last {
                if frame > first {
                    sums.advance(spec.step);
                }
                let center = &returns.dates()[spec.frame_start(frame) + spec.center_offset()];
                out.push(match sums.correlation() {
                    Ok(corr) => f(FrameInput {
                        frame_index: frame,
                        center_date: center,
                        corr: &corr,
                    }),
                    Err(asset) => Err(Error::ZeroVariance {
                        frame,
                        ticker: returns.tickers()[asset].clone(),
                    }),
                });
            }
            out
        })
        .collect();
    Ok(per_block.into_iter().flatten().collect())
}

/// Sequential rolling correlations (incremental sums, periodic resync).
pub fn rolling_correlations<'a>(
    returns: &'a ReturnPanel,
    spec: WindowSpec,
) -> Result<impl Iterator<Item = Result<CorrelationMatrix>> + 'a> {
    let frames = check_fits(returns, &spec)?;
    let mut sums: Option<WindowSums<'a>> = None;
    Ok((0..frames).map(move |frame| {
        match sums.as_mut() {
            Some(s) if frame % RESYNC_INTERVAL != 0 => s.advance(spec.step),
            _ => {
                sums = Some(WindowSums::at(
                    returns.rows(),
                    spec.frame_start(frame),
                    spec.width,
                ))
            }
        }
        sums.as_ref()
            .unwrap()
            .correlation()
            .map_err(|asset| Error::ZeroVariance {
                frame,
                ticker: returns.tickers()[asset].clone(),
            })
    }))
}

/// MST per frame; skipped frames appear as errors in their slot.
pub fn frame_stream(returns: &ReturnPanel, spec: &WindowSpec) -> Result<Vec<Result<TreeFrame>>> {
    map_frames(returns, spec, |input| {
        build_mst(&to_distances(input.corr), input.frame_index, input.center_date)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel(rows: Vec<Vec<f64>>) -> ReturnPanel {
        let t = rows[0].len();
        let tickers = (0..rows.len()).map(|i| format!("A{i:03}")).collect();
        let dates = (0..t).map(|d| format!("D{d:05}")).collect();
        ReturnPanel::new(tickers, dates, rows).unwrap()
    }

    fn random_panel(n: usize, t: usize, seed: u64) -> ReturnPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let market: Vec<f64> = (0..t).map(|_| rng.random_range(-0.02..0.02)).collect();
        panel(
            (0..n)
                .map(|_| {
                    let beta = rng.random_range(0.0..1.5);
                    market
                        .iter()
                        .map(|m| beta * m + rng.random_range(-0.02..0.02))
                        .collect()
                })
                .collect(),
        )
    }

    #[test]
    fn frame_count_arithmetic() {
        assert_eq!(WindowSpec::new(400, 1).unwrap().frame_count(2000), 1601);
        assert_eq!(WindowSpec::new(400, 5).unwrap().frame_count(2000), 321);
        assert_eq!(WindowSpec::new(400, 1).unwrap().frame_count(399), 0);
        assert!(WindowSpec::new(1, 1).is_err());
        assert!(WindowSpec::new(2, 0).is_err());
    }

    #[test]
    fn identical_and_opposite_series() {
        let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let p = panel(vec![x.clone(), x.clone(), neg]);
        for c in rolling_correlations(&p, WindowSpec::new(6, 1).unwrap()).unwrap() {
            let c = c.unwrap();
            assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
            assert!((c.get(0, 2) + 1.0).abs() < 1e-12);
            assert_eq!(c.get(1, 1), 1.0);
        }
    }

    #[test]
    fn five_point_series_match_hand_pearson() {
        // Hand evaluation: x = [1,2,3,4,5], y = [2,1,4,3,5], z = [5,3,4,1,2].
        // mean 3 for all; deviations x: [-2,-1,0,1,2], y: [-1,-2,1,0,2], z: [2,0,1,-2,-1]
        // Sxx = Syy = Szz = 10; Sxy = 2+2+0+0+4 = 8; Sxz = -4+0+0-2-2 = -8; Syz = -2+0+1+0-2 = -3
        let p = panel(vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![2.0, 1.0, 4.0, 3.0, 5.0],
            vec![5.0, 3.0, 4.0, 1.0, 2.0],
        ]);
        let c = rolling_correlations(&p, WindowSpec::new(5, 1).unwrap())
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        assert!((c.get(0, 1) - 0.8).abs() < 1e-14);
        assert!((c.get(0, 2) + 0.8).abs() < 1e-14);
        assert!((c.get(1, 2) + 0.3).abs() < 1e-14);
    }

    #[test]
    fn zero_variance_frame_is_reported_and_skipped() {
        let mut a = vec![0.01; 12];
        a[0] = 0.03;
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let p = panel(vec![a, b]);
        let frames = frame_stream(&p, &WindowSpec::new(5, 1).unwrap()).unwrap();
        assert!(frames[0].is_ok());
        match &frames[1] {
            Err(Error::ZeroVariance { frame, ticker }) => {
                assert_eq!(*frame, 1);
                assert_eq!(ticker, "A000");
            }
            other => panic!("expected zero variance, got {other:?}"),
        }
    }

    #[test]
    fn window_longer_than_data_gives_no_frames() {
        let p = random_panel(3, 10, 1);
        assert!(frame_stream(&p, &WindowSpec::new(11, 1).unwrap())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn center_date_is_floor_half_width() {
        let p = random_panel(3, 30, 2);
        let frames = frame_stream(&p, &WindowSpec::new(10, 3).unwrap()).unwrap();
        assert_eq!(frames.len(), 7);
        let f = frames[2].as_ref().unwrap();
        assert_eq!(f.center_date, p.dates()[6 + 5]);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance_of(1.0), 0.0);
        assert_eq!(distance_of(-1.0), 2.0);
        assert!((distance_of(0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_mst() {
        let d = DistanceMatrix::from_rows(&[
            vec![0.0, 1.0, 3.0],
            vec![1.0, 0.0, 2.0],
            vec![3.0, 2.0, 0.0],
        ])
        .unwrap();
        let t = build_mst(&d, 0, "").unwrap();
        let keys: Vec<_> = t.edges.iter().map(Edge::key).collect();
        assert_eq!(keys, [(0, 1), (1, 2)]);
        assert_eq!(t.total_weight(), 3.0);
    }

    #[test]
    fn two_vertices_and_too_few() {
        let d = DistanceMatrix::from_rows(&[vec![0.0, 0.7], vec![0.7, 0.0]]).unwrap();
        let t = build_mst(&d, 0, "").unwrap();
        assert_eq!(t.edges.len(), 1);
        let one = DistanceMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(build_mst(&one, 0, ""), Err(Error::Dimension(_))));
    }

    #[test]
    fn ties_break_lexicographically() {
        // all distances equal: Kruskal takes (0,1), (0,2), (0,3) -> star on 0
        let d = DistanceMatrix::from_rows(&vec![
            vec![0.0, 1.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0, 0.0],
        ])
        .unwrap();
        let t = build_mst(&d, 0, "").unwrap();
        assert_eq!(t.degree, [3, 1, 1, 1]);
    }

    #[test]
    fn negative_correlation_flag() {
        let c = CorrelationMatrix::from_rows(&[vec![1.0, -0.2], vec![-0.2, 1.0]]).unwrap();
        assert!(build_mst(&to_distances(&c), 0, "").unwrap().uses_negative_correlation);
        let c = CorrelationMatrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 1.0]]).unwrap();
        assert!(!build_mst(&to_distances(&c), 0, "").unwrap().uses_negative_correlation);
    }

    #[test]
    fn incremental_matches_direct() {
        let p = random_panel(12, 900, 3);
        let spec = WindowSpec::new(60, 1).unwrap();
        let inc: Vec<_> = rolling_correlations(&p, spec).unwrap().collect();
        for (f, c) in inc.iter().enumerate() {
            let direct = direct_correlation(&p, f, 60).unwrap();
            assert!(c.as_ref().unwrap().max_abs_diff(&direct) <= 1e-10, "frame {f}");
        }
    }

    #[test]
    fn parallel_stream_equals_sequential() {
        let p = random_panel(10, 700, 4);
        let spec = WindowSpec::new(40, 2).unwrap();
        let seq: Vec<_> = rolling_correlations(&p, spec)
            .unwrap()
            .enumerate()
            .map(|(f, c)| build_mst(&to_distances(&c.unwrap()), f, "").unwrap().edges)
            .collect();
        let par: Vec<_> = frame_stream(&p, &spec)
            .unwrap()
            .into_iter()
            .map(|f| f.unwrap().edges)
            .collect();
        assert_eq!(seq, par);
    }

    #[test]
    fn correlation_is_psd() {
        let p = random_panel(15, 200, 5);
        let c = direct_correlation(&p, 0, 200).unwrap();
        assert!(c.min_eigenvalue() > -1e-9);
    }

    proptest! {
        #[test]
        fn permuting_tickers_permutes_the_tree(seed in 0u64..1000, n in 3usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let d = rng.random_range(0.0..2.0);
                    rows[i][j] = d;
                    rows[j][i] = d;
                }
            }
            let d = DistanceMatrix::from_rows(&rows).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let t = build_mst(&d, 0, "").unwrap();
            let tp = build_mst(&d.permuted(&perm), 0, "").unwrap();
            let mut mapped: Vec<_> = t.edges.iter()
                .map(|e| (perm[e.a].min(perm[e.b]), perm[e.a].max(perm[e.b])))
                .collect();
            let mut got: Vec<_> = tp.edges.iter().map(Edge::key).collect();
            mapped.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(mapped, got);
        }

        #[test]
        fn distance_is_strictly_decreasing(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            prop_assume!(a != b);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(distance_of(hi) < distance_of(lo));
            prop_assert!((0.0..=2.0).contains(&distance_of(lo)));
        }
    }
}
