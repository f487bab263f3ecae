//! Python module `mstdyn`. Structured results are returned as plain
//! dicts and lists, decoded from the core types' JSON form.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use mstdyn_core::corrnet::{build_mst, to_distances, direct_correlation, TreeFrame, WindowSpec};
use mstdyn_core::ingest::{write_prices, ReturnPanel, Survivorship};
use mstdyn_core::kinetics::{
    count_transitions, detailed_balance_residuals, empirical_kernel, fit_b_tables, master_step, power_law,
    theoretical_kernel, TransitionKernel,
};
use mstdyn_core::laddersim::{second_eigenvalue, stationary_histogram};
use mstdyn_core::observables::{frame_observables, ObservableOptions};
use mstdyn_core::phasefit::{self, LambdaLaw, LambdaOptions, LogBranch, NucleationLaw, Series};
use mstdyn_core::pipeline;
use mstdyn_core::snapshots::{diff_frames, export_dot, ExportOptions};
use mstdyn_core::synthgen::{self, FactorModelSpec, Law, LawSeriesSpec, LoadingProfile, PlantedEpisode};

create_exception!(mstdyn, MstdynError, PyException);
create_exception!(mstdyn, ConfigError, MstdynError);
create_exception!(mstdyn, DataError, MstdynError);
create_exception!(mstdyn, FitError, MstdynError);

fn err(e: mstdyn_core::Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        3 => DataError::new_err(msg),
        4 => FitError::new_err(msg),
        _ => MstdynError::new_err(msg),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MstdynError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn series(t: Option<Vec<f64>>, y: Vec<f64>) -> PyResult<Series> {
    match t {
        Some(t) => Series::new(t, y).map_err(err),
        None => Ok(Series::frames(y)),
    }
}

/// Daily log returns of a set of assets over a common calendar.
#[pyclass(name = "Panel", module = "mstdyn", frozen)]
struct PyPanel(ReturnPanel);

#[pymethods]
impl PyPanel {
    /// Prices from a `date,ticker,close` CSV. `window=(start, end)` keeps
    /// tickers complete inside that date range; otherwise complete everywhere.
    #[staticmethod]
    #[pyo3(signature = (path, window=None))]
    fn from_csv(py: Python<'_>, path: PathBuf, window: Option<(String, String)>) -> PyResult<Self> {
        let mode = match window {
            Some((start, end)) => Survivorship::Window { start, end },
            None => Survivorship::Strict,
        };
        py.detach(|| pipeline::load_returns(&path, &mode)).map(Self).map_err(err)
    }

    /// One-factor synthetic panel, optionally with a hub episode on `episode_asset`.
    #[staticmethod]
    #[pyo3(signature = (n, days, seed, beta=1.0, idio_vol=0.02, market_vol=0.01,
                        episode_asset=None, episode=(400, 1100), peak_beta=3.5))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        n: usize,
        days: usize,
        seed: u64,
        beta: f64,
        idio_vol: f64,
        market_vol: f64,
        episode_asset: Option<usize>,
        episode: (usize, usize),
        peak_beta: f64,
    ) -> PyResult<Self> {
        let mut spec = FactorModelSpec::uniform(n, days, beta, idio_vol, seed);
        spec.market_vol = market_vol;
        spec.episode = episode_asset.map(|asset| PlantedEpisode {
            asset,
            start: episode.0,
            end: episode.1,
            peak_beta,
            profile: LoadingProfile::peak(),
        });
        synthgen::generate_panel(&spec).map(Self).map_err(err)
    }

    #[getter]
    fn tickers(&self) -> Vec<String> {
        self.0.tickers().to_vec()
    }

    #[getter]
    fn dates(&self) -> Vec<String> {
        self.0.dates().to_vec()
    }

    #[getter]
    fn n_assets(&self) -> usize {
        self.0.n_assets()
    }

    #[getter]
    fn n_days(&self) -> usize {
        self.0.n_days()
    }

    fn returns(&self, asset: usize) -> PyResult<Vec<f64>> {
        if asset >= self.0.n_assets() {
            return Err(DataError::new_err(format!("asset {asset} out of range")));
        }
        Ok(self.0.series(asset).to_vec())
    }

    /// Writes prices rebuilt from returns, starting at 100 on `first_date`,
    /// which must precede every return date.
    #[pyo3(signature = (path, first_date=synthgen::FIRST_PRICE_DATE.to_string()))]
    fn write_prices(&self, path: PathBuf, first_date: String) -> PyResult<()> {
        let prices = self.0.to_prices(&first_date, 100.0).map_err(err)?;
        let file = std::fs::File::create(path)?;
        write_prices(&prices, file).map_err(err)
    }

    /// Pearson correlations of the window starting at return `start`.
    fn correlation(&self, start: usize, width: usize) -> PyResult<Vec<Vec<f64>>> {
        let c = direct_correlation(&self.0, start, width)
            .map_err(|t| DataError::new_err(format!("zero variance for asset {t}")))?;
        let n = c.n();
        Ok((0..n).map(|i| (0..n).map(|j| c.get(i, j)).collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Panel(n_assets={}, n_days={})", self.0.n_assets(), self.0.n_days())
    }
}

/// Minimum spanning tree of one correlation window.
#[pyclass(name = "Tree", module = "mstdyn", frozen, from_py_object)]
#[derive(Clone)]
struct PyTree(TreeFrame);

#[pymethods]
impl PyTree {
    /// Tree of a full correlation matrix.
    #[staticmethod]
    #[pyo3(signature = (corr, frame_index=0, center_date=String::new()))]
    fn from_correlation(corr: Vec<Vec<f64>>, frame_index: usize, center_date: String) -> PyResult<Self> {
        let c = mstdyn_core::corrnet::CorrelationMatrix::from_rows(&corr).map_err(err)?;
        build_mst(&to_distances(&c), frame_index, &center_date).map(Self).map_err(err)
    }

    /// Unweighted tree from an edge list.
    #[staticmethod]
    fn from_edges(n: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        TreeFrame::from_edges(n, &edges).map(Self).map_err(err)
    }

    #[getter]
    fn frame_index(&self) -> usize {
        self.0.frame_index
    }

    #[getter]
    fn center_date(&self) -> String {
        self.0.center_date.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    /// `(a, b, distance)` with `a < b`, sorted.
    #[getter]
    fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.0.edges.iter().map(|e| (e.a, e.b, e.distance)).collect()
    }

    #[getter]
    fn degree(&self) -> Vec<usize> {
        self.0.degree.clone()
    }

    #[pyo3(signature = (k_min=2, k_max=12, follow=None))]
    fn observables<'py>(
        &self,
        py: Python<'py>,
        k_min: usize,
        k_max: usize,
        follow: Option<usize>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opts = ObservableOptions {
            k_min,
            k_max,
            follow,
            ..Default::default()
        };
        let obs = frame_observables(&self.0, None, &opts).map_err(err)?;
        to_py(py, &obs)
    }

    /// DOT text; vertices are labelled with `tickers` or their index.
    #[pyo3(signature = (tickers=None))]
    fn to_dot(&self, tickers: Option<Vec<String>>) -> PyResult<String> {
        let tickers = tickers.unwrap_or_else(|| (0..self.0.n()).map(|i| i.to_string()).collect());
        let betweenness = mstdyn_core::observables::tree_betweenness(&self.0);
        let ranks = mstdyn_core::observables::rank_order(&self.0, &betweenness);
        let diff = diff_frames(None, &self.0, None);
        export_dot(&self.0, &diff, &ranks, &tickers, &ExportOptions::default()).map_err(err)
    }

    fn __repr__(&self) -> String {
        let k = self.0.degree.iter().max().copied().unwrap_or(0);
        format!("Tree(frame_index={}, n={}, max_degree={k})", self.0.frame_index, self.0.n())
    }
}

/// Rolling-window trees and their observables.
///
/// Returns `(trees, observables, skipped)` where `skipped` lists
/// `(frame_index, reason)` for frames that could not be built.
#[pyfunction]
#[pyo3(signature = (panel, width=400, step=1, k_min=2, k_max=12))]
fn analyze<'py>(
    py: Python<'py>,
    panel: &PyPanel,
    width: usize,
    step: usize,
    k_min: usize,
    k_max: usize,
) -> PyResult<(Vec<PyTree>, Bound<'py, PyAny>, Vec<(usize, String)>)> {
    let spec = WindowSpec::new(width, step).map_err(err)?;
    let opts = ObservableOptions {
        k_min,
        k_max,
        ..Default::default()
    };
    let out = py.detach(|| pipeline::analyze(&panel.0, &spec, &opts)).map_err(err)?;
    let trees = out.frames.into_iter().map(PyTree).collect();
    let skipped = out.skipped.into_iter().map(|s| (s.frame_index, s.reason)).collect();
    Ok((trees, to_py(py, &out.records)?, skipped))
}

/// Degree-transition probabilities `p(l | k)` on a ladder of degrees.
#[pyclass(name = "Kernel", module = "mstdyn", frozen)]
struct PyKernel(TransitionKernel);

#[pymethods]
impl PyKernel {
    /// Detailed-balance kernel from a `{k: b(-1|k)}` table.
    #[staticmethod]
    #[pyo3(signature = (b_minus, alpha_bar, n, k_cap=30))]
    fn theoretical(b_minus: BTreeMap<usize, f64>, alpha_bar: f64, n: usize, k_cap: usize) -> PyResult<Self> {
        theoretical_kernel(&b_minus, alpha_bar, n, k_cap).map(Self).map_err(err)
    }

    /// Empirical kernel from consecutive trees.
    #[staticmethod]
    #[pyo3(signature = (trees, stride=1, min_samples=30))]
    fn estimate(trees: Vec<PyTree>, stride: usize, min_samples: u64) -> PyResult<Self> {
        let frames: Vec<TreeFrame> = trees.into_iter().map(|t| t.0).collect();
        let counts = count_transitions(&frames, stride).map_err(err)?;
        let mut kernel = empirical_kernel(&counts, min_samples);
        fit_b_tables(&mut kernel);
        Ok(Self(kernel))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TransitionKernel::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    #[getter]
    fn ladder(&self) -> Vec<usize> {
        self.0.ladder().collect()
    }

    #[getter]
    fn b_minus(&self) -> BTreeMap<usize, f64> {
        self.0.b_minus.clone()
    }

    #[getter]
    fn renormalized(&self) -> Vec<usize> {
        self.0.renormalized.iter().copied().collect()
    }

    fn p(&self, k: usize, l: i64) -> f64 {
        self.0.p(k, l)
    }

    /// Net currents `P(k) p(l|k) - P(k+l) p(-l|k+l)` against `P ∝ k^-alpha`,
    /// keyed by `(k, l)`.
    fn detailed_balance_residuals(&self, alpha: f64) -> BTreeMap<(usize, i64), f64> {
        let p = power_law(self.0.ladder(), alpha);
        detailed_balance_residuals(&self.0, &p)
            .into_iter()
            .map(|((k, l), r)| ((k, l as i64), r))
            .collect()
    }

    /// One master-equation step applied to `{k: P(k)}`.
    fn master_step(&self, p: BTreeMap<usize, f64>) -> BTreeMap<usize, f64> {
        master_step(&self.0, &p)
    }

    /// Second eigenvalue modulus against `P ∝ k^-alpha`.
    fn second_eigenvalue(&self, alpha: f64) -> PyResult<f64> {
        second_eigenvalue(&self.0, &power_law(self.0.ladder(), alpha)).map_err(err)
    }

    /// Visit counts `{k: count}` of a seeded single-vertex chain.
    #[pyo3(signature = (steps, seed, burn_in=10_000))]
    fn simulate(&self, py: Python<'_>, steps: u64, seed: u64, burn_in: u64) -> PyResult<BTreeMap<usize, u64>> {
        let hist = py.detach(|| stationary_histogram(&self.0, steps, burn_in, seed)).map_err(err)?;
        Ok(hist.counts)
    }
}

#[pyfunction]
#[pyo3(signature = (y, t=None))]
fn detect_t_crit<'py>(py: Python<'py>, y: Vec<f64>, t: Option<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
    let s = series(t, y)?;
    to_py(py, &phasefit::detect_t_crit(&s, None).map_err(err)?)
}

/// Power-law nucleation fit; `t_crit_index` is detected when omitted.
#[pyfunction]
#[pyo3(signature = (y, t=None, t_crit_index=None))]
fn fit_nucleation<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    t: Option<Vec<f64>>,
    t_crit_index: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = series(t, y)?;
    let index = match t_crit_index {
        Some(i) => i,
        None => phasefit::detect_t_crit(&s, None).map_err(err)?.index,
    };
    to_py(py, &phasefit::fit_nucleation(&s, index, None).map_err(err)?)
}

/// Two-sided logarithmic peak fit. `weekly=True` downsamples to every
/// 5th sample first, so times are in weeks. `guard` is in trading days.
#[pyfunction]
#[pyo3(signature = (y, t=None, half_width=50, guard=3, prior=None, weekly=false))]
fn fit_lambda_peak<'py>(
    py: Python<'py>,
    y: Vec<f64>,
    t: Option<Vec<f64>>,
    half_width: usize,
    guard: usize,
    prior: Option<f64>,
    weekly: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let mut s = series(t, y)?;
    let mut stride = 1;
    if weekly {
        s = phasefit::weekly_downsample(&s);
        stride = 5;
    }
    let opts = LambdaOptions {
        half_width,
        guard: phasefit::guard_samples(guard, stride),
        prior,
    };
    to_py(py, &phasefit::fit_lambda_peak(&s, &opts).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (length, seed, noise=0.0, a0=4.5273, a=2.5, z=2.0, t_crit=164.0))]
fn nucleation_series(length: usize, seed: u64, noise: f64, a0: f64, a: f64, z: f64, t_crit: f64) -> PyResult<Vec<f64>> {
    let law = Law::Nucleation(NucleationLaw { a0, a, z, t_crit });
    Ok(synthgen::generate_law_series(&LawSeriesSpec::new(law, noise, length, seed)).map_err(err)?.y)
}

#[pyfunction]
#[pyo3(signature = (length, seed, noise=0.0, t_lambda=544.0, a_l=14.0, tau_l=2500.0, a_r=22.0, tau_r=480.0))]
#[allow(clippy::too_many_arguments)]
fn lambda_series(
    length: usize,
    seed: u64,
    noise: f64,
    t_lambda: f64,
    a_l: f64,
    tau_l: f64,
    a_r: f64,
    tau_r: f64,
) -> PyResult<Vec<f64>> {
    let law = Law::Lambda(LambdaLaw {
        t_lambda,
        left: LogBranch { a: a_l, tau: tau_l },
        right: LogBranch { a: a_r, tau: tau_r },
    });
    Ok(synthgen::generate_law_series(&LawSeriesSpec::new(law, noise, length, seed)).map_err(err)?.y)
}

/// Parses a `key = value` config and returns the resolved settings.
#[pyfunction]
fn validate_config<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &pipeline::validate_config(text).map_err(err)?)
}

/// Runs the full pipeline for a config text; returns the manifest.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = pipeline::validate_config(text).map_err(err)?;
    let manifest = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(err)?;
    to_py(py, &manifest)
}

#[pymodule]
fn mstdyn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MstdynError", py.get_type::<MstdynError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add("FitError", py.get_type::<FitError>())?;
    m.add_class::<PyPanel>()?;
    m.add_class::<PyTree>()?;
    m.add_class::<PyKernel>()?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(detect_t_crit, m)?)?;
    m.add_function(wrap_pyfunction!(fit_nucleation, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lambda_peak, m)?)?;
    m.add_function(wrap_pyfunction!(nucleation_series, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_series, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
