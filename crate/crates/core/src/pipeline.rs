//! Configuration and the end-to-end run: prices → frames → observables,
//! optionally kinetics, phase fits and frame exports, with a checksum manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corrnet::{build_mst, map_frames, to_distances, TreeFrame, WindowSpec};
use crate::error::{Error, Result};
use crate::ingest::{load_prices, log_returns, ReturnPanel, Survivorship};
use crate::kinetics::{
    count_transitions, detailed_balance_residuals, empirical_kernel, fit_b_tables, power_law, theoretical_kernel,
};
use crate::observables::{
    frame_observables, mean_alpha, variogram, write_series, CenterRule, FrameObservables, ObservableOptions,
};
use crate::phasefit::{
    crossover_report, detect_t_crit, fit_lambda_peak, fit_nucleation, guard_samples, LambdaOptions, Series,
};
use crate::snapshots::{export_frames, ExportOptions, GraphFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Day,
    Week,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitSeries {
    Leader,
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub width_td: usize,
    pub step_td: usize,
    pub horizon: Horizon,
    pub survivorship: String,
    pub window_start: Option<String>,
    pub window_end: Option<String>,
    pub k_min: usize,
    pub k_max: usize,
    pub center_rule: CenterRule,
    pub power_law_mle: bool,
    pub efficiency_entropy: bool,
    pub exclude: Option<String>,
    pub follow: Option<String>,
    pub variogram_lag: usize,
    pub partial_window: usize,
    pub variogram_squared: bool,
    pub kinetics: bool,
    pub min_samples: u64,
    pub frame_stride: usize,
    pub kinetics_from: Option<usize>,
    pub kinetics_to: Option<usize>,
    pub alpha_bar: Option<f64>,
    pub k_cap: usize,
    pub fits: bool,
    pub fit_series: FitSeries,
    pub lambda_half_width: usize,
    /// Trading days around `t_λ` left out of both branches.
    pub lambda_guard: usize,
    pub crossover_tolerance: f64,
    pub snapshots_from: Option<usize>,
    pub snapshots_to: Option<usize>,
    pub graph_format: GraphFormat,
    pub seed: u64,
    /// Worker threads; 0 uses the rayon default. Never affects results.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input: None,
            output_dir: PathBuf::from("mstdyn_out"),
            width_td: 400,
            step_td: 1,
            horizon: Horizon::Day,
            survivorship: "strict".into(),
            window_start: None,
            window_end: None,
            k_min: 2,
            k_max: 12,
            center_rule: CenterRule::MaxDegree,
            power_law_mle: false,
            efficiency_entropy: true,
            exclude: None,
            follow: None,
            variogram_lag: 1,
            partial_window: 60,
            variogram_squared: false,
            kinetics: false,
            min_samples: 30,
            frame_stride: 1,
            kinetics_from: None,
            kinetics_to: None,
            alpha_bar: None,
            k_cap: 30,
            fits: false,
            fit_series: FitSeries::Leader,
            lambda_half_width: 50,
            lambda_guard: 3,
            crossover_tolerance: 1.0,
            snapshots_from: None,
            snapshots_to: None,
            graph_format: GraphFormat::Dot,
            seed: 0,
            threads: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn optional(value: &str) -> Option<&str> {
    match value {
        "" | "none" => None,
        v => Some(v),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    optional(value).map(|v| parse(key, v)).transpose()
}

/// `key = value` lines; `#` starts a comment. Returns `(line, key, value)`.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().to_string();
        if let Some(prev) = seen.insert(key.clone(), i + 1) {
            return Err(Error::config(&key, format!("set twice (lines {prev} and {})", i + 1)));
        }
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

impl PipelineConfig {
    /// Sets one key; unknown keys are errors naming the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "input" => self.input = optional(v).map(PathBuf::from),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "width_td" => self.width_td = parse(key, v)?,
            "step_td" => self.step_td = parse(key, v)?,
            "horizon" => {
                self.horizon = match v {
                    "day" => Horizon::Day,
                    "week" => Horizon::Week,
                    _ => return Err(Error::config(key, "expected day or week")),
                }
            }
            "survivorship" => self.survivorship = v.to_string(),
            "window_start" => self.window_start = optional(v).map(str::to_string),
            "window_end" => self.window_end = optional(v).map(str::to_string),
            "k_min" => self.k_min = parse(key, v)?,
            "k_max" => self.k_max = parse(key, v)?,
            "center_rule" => {
                self.center_rule = match v {
                    "max-degree" => CenterRule::MaxDegree,
                    "max-betweenness" => CenterRule::MaxBetweenness,
                    _ => return Err(Error::config(key, "expected max-degree or max-betweenness")),
                }
            }
            "power_law" => {
                self.power_law_mle = match v {
                    "ols" => false,
                    "mle" => true,
                    _ => return Err(Error::config(key, "expected ols or mle")),
                }
            }
            "efficiency_entropy" => self.efficiency_entropy = parse_bool(key, v)?,
            "exclude" => self.exclude = optional(v).map(str::to_string),
            "follow" => self.follow = optional(v).map(str::to_string),
            "variogram_lag" => self.variogram_lag = parse(key, v)?,
            "partial_window" | "l_td" => self.partial_window = parse(key, v)?,
            "variogram_squared" => self.variogram_squared = parse_bool(key, v)?,
            "kinetics" => self.kinetics = parse_bool(key, v)?,
            "min_samples" => self.min_samples = parse(key, v)?,
            "frame_stride" => self.frame_stride = parse(key, v)?,
            "kinetics_from" => self.kinetics_from = parse_opt(key, v)?,
            "kinetics_to" => self.kinetics_to = parse_opt(key, v)?,
            "alpha_bar" => self.alpha_bar = parse_opt(key, v)?,
            "k_cap" => self.k_cap = parse(key, v)?,
            "fits" => self.fits = parse_bool(key, v)?,
            "fit_series" => {
                self.fit_series = match v {
                    "leader" => FitSeries::Leader,
                    "delta" => FitSeries::Delta,
                    _ => return Err(Error::config(key, "expected leader or delta")),
                }
            }
            "lambda_half_width" => self.lambda_half_width = parse(key, v)?,
            "lambda_guard" => self.lambda_guard = parse(key, v)?,
            "crossover_tolerance" => self.crossover_tolerance = parse(key, v)?,
            "snapshots_from" => self.snapshots_from = parse_opt(key, v)?,
            "snapshots_to" => self.snapshots_to = parse_opt(key, v)?,
            "graph_format" => {
                self.graph_format = match v {
                    "dot" => GraphFormat::Dot,
                    "graphml" => GraphFormat::Graphml,
                    _ => return Err(Error::config(key, "expected dot or graphml")),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Cross-field checks; run after all keys are applied.
    pub fn check(&mut self) -> Result<()> {
        if self.horizon == Horizon::Week {
            if self.step_td != 1 && self.step_td != 5 {
                return Err(Error::config("step_td", "weekly horizon implies step_td = 5"));
            }
            self.step_td = 5;
        }
        self.window()?;
        if self.k_min < 1 || self.k_max <= self.k_min + 1 {
            return Err(Error::config("k_max", "need 1 ≤ k_min and k_max ≥ k_min + 2"));
        }
        self.survivorship_mode()?;
        if self.variogram_lag == 0 {
            return Err(Error::config("variogram_lag", "must be ≥ 1"));
        }
        if self.partial_window < 2 {
            return Err(Error::config("partial_window", "must be ≥ 2"));
        }
        if self.frame_stride == 0 {
            return Err(Error::config("frame_stride", "must be ≥ 1"));
        }
        if self.k_cap < 2 {
            return Err(Error::config("k_cap", "must be ≥ 2"));
        }
        if self.snapshots_from.is_some() != self.snapshots_to.is_some() {
            return Err(Error::config("snapshots_to", "set both snapshots_from and snapshots_to"));
        }
        if !(self.crossover_tolerance > 0.0) {
            return Err(Error::config("crossover_tolerance", "must be > 0"));
        }
        Ok(())
    }

    pub fn window(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.width_td, self.step_td)
    }

    pub fn survivorship_mode(&self) -> Result<Survivorship> {
        match self.survivorship.as_str() {
            "strict" => Ok(Survivorship::Strict),
            "window" => match (&self.window_start, &self.window_end) {
                (Some(start), Some(end)) if start <= end => Ok(Survivorship::Window {
                    start: start.clone(),
                    end: end.clone(),
                }),
                _ => Err(Error::config("window_start", "window survivorship needs window_start ≤ window_end")),
            },
            _ => Err(Error::config("survivorship", "expected strict or window")),
        }
    }

    pub fn observable_options(&self, tickers: &[String]) -> Result<ObservableOptions> {
        let find = |key: &str, name: &Option<String>| -> Result<Option<usize>> {
            name.as_ref()
                .map(|n| {
                    tickers
                        .binary_search(n)
                        .map_err(|_| Error::config(key, format!("ticker `{n}` not in the panel")))
                })
                .transpose()
        };
        Ok(ObservableOptions {
            k_min: self.k_min,
            k_max: self.k_max,
            center_rule: self.center_rule,
            mle: self.power_law_mle,
            efficiency: self.efficiency_entropy,
            exclude: find("exclude", &self.exclude)?,
            follow: find("follow", &self.follow)?,
        })
    }

    /// SHA-256 of the canonical JSON form without `output_dir` and `threads`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
            m.remove("threads");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Defaults, then every key of `text`, then cross-field checks.
pub fn validate_config(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    for (_, k, v) in parse_pairs(text)? {
        cfg.apply(&k, &v)?;
    }
    cfg.check()?;
    Ok(cfg)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// Price CSV at `path` to log returns.
pub fn load_returns(path: &Path, survivorship: &Survivorship) -> Result<ReturnPanel> {
    let file = std::fs::File::open(path)?;
    log_returns(&load_prices(std::io::BufReader::new(file), survivorship)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub frame_index: usize,
    pub reason: String,
}

/// Frames and per-frame observables, in frame order, with skipped frames listed.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub tickers: Vec<String>,
    pub frames: Vec<TreeFrame>,
    pub records: Vec<FrameObservables>,
    pub skipped: Vec<SkippedFrame>,
}

/// Correlation frames, MSTs and observables for every window position.
pub fn analyze(returns: &ReturnPanel, window: &WindowSpec, opts: &ObservableOptions) -> Result<Analysis> {
    let need_dist = opts.exclude.is_some();
    let slots = map_frames(returns, window, |input| {
        let dist = to_distances(input.corr);
        let tree = build_mst(&dist, input.frame_index, input.center_date)?;
        let obs = frame_observables(&tree, need_dist.then_some(&dist), opts)?;
        Ok((tree, obs))
    })?;
    let mut out = Analysis {
        tickers: returns.tickers().to_vec(),
        frames: Vec::with_capacity(slots.len()),
        records: Vec::with_capacity(slots.len()),
        skipped: Vec::new(),
    };
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Ok((tree, obs)) => {
                out.frames.push(tree);
                out.records.push(obs);
            }
            Err(e) => {
                log::warn!("frame {i} skipped: {e}");
                out.skipped.push(SkippedFrame {
                    frame_index: i,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub file: String,
    pub stage: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedStep {
    pub step: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub input_sha256: Option<String>,
    pub n_assets: usize,
    pub frames_total: usize,
    pub frames_ok: usize,
    pub skipped_frames: Vec<SkippedFrame>,
    pub failed_fits: Vec<FailedStep>,
    pub outputs: Vec<OutputRecord>,
    pub error: Option<String>,
    pub complete: bool,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    dir: PathBuf,
    manifest: Manifest,
}

impl Run<'_> {
    fn record(&mut self, stage: &str, file: &str) -> Result<()> {
        let sha256 = sha256_file(&self.dir.join(file))?;
        self.manifest.outputs.push(OutputRecord {
            file: file.to_string(),
            stage: stage.to_string(),
            sha256,
        });
        Ok(())
    }

    fn write(&mut self, stage: &str, file: &str, text: &str) -> Result<()> {
        if let Some(parent) = self.dir.join(file).parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(self.dir.join(file), text)?;
        self.record(stage, file)
    }

    fn fail_fit(&mut self, step: &str, e: &Error) {
        log::warn!("{step} failed: {e}");
        self.manifest.failed_fits.push(FailedStep {
            step: step.to_string(),
            reason: e.to_string(),
        });
    }

    fn finish(&mut self) -> Result<()> {
        self.manifest.outputs.sort_by(|a, b| a.file.cmp(&b.file));
        self.manifest.complete = self.manifest.error.is_none()
            && self.manifest.skipped_frames.is_empty()
            && self.manifest.failed_fits.is_empty();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Runs every selected stage inside a pool of `cfg.threads` workers and
/// writes `manifest.json` last. A failing stage still leaves a manifest
/// marked incomplete.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut cfg = cfg.clone();
    cfg.check()?;
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| Error::config("input", "no input file given"))?;
    if !input.is_file() {
        return Err(Error::config("input", format!("{} does not exist", input.display())));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| {
        std::fs::create_dir_all(&cfg.output_dir)?;
        let mut run = Run {
            cfg: &cfg,
            dir: cfg.output_dir.clone(),
            manifest: Manifest {
                tool: "mstdyn".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                input_sha256: Some(sha256_file(&input)?),
                n_assets: 0,
                frames_total: 0,
                frames_ok: 0,
                skipped_frames: Vec::new(),
                failed_fits: Vec::new(),
                outputs: Vec::new(),
                error: None,
                complete: false,
            },
        };
        let result = stages(&mut run, &input);
        if let Err(e) = &result {
            run.manifest.error = Some(e.to_string());
        }
        run.finish()?;
        result.map(|_| run.manifest.clone())
    })
}

fn stages(run: &mut Run<'_>, input: &Path) -> Result<()> {
    let cfg = run.cfg;
    let returns = load_returns(input, &cfg.survivorship_mode()?).map_err(|e| e.in_stage("ingest"))?;
    run.manifest.n_assets = returns.n_assets();

    let window = cfg.window()?;
    let opts = cfg.observable_options(returns.tickers())?;
    let analysis = analyze(&returns, &window, &opts).map_err(|e| e.in_stage("corrnet"))?;
    run.manifest.frames_total = analysis.records.len() + analysis.skipped.len();
    run.manifest.frames_ok = analysis.records.len();
    run.manifest.skipped_frames = analysis.skipped.clone();

    for file in write_series(&run.dir, &analysis.records, &analysis.tickers).map_err(|e| e.in_stage("observables"))? {
        run.record("observables", &file)?;
    }
    write_variogram(run, &analysis).map_err(|e| e.in_stage("observables"))?;

    if cfg.kinetics {
        kinetics_stage(run, &analysis).map_err(|e| e.in_stage("kinetics"))?;
    }
    if cfg.fits {
        fits_stage(run, &analysis).map_err(|e| e.in_stage("phasefit"))?;
    }
    if let (Some(from), Some(to)) = (cfg.snapshots_from, cfg.snapshots_to) {
        let files = export_frames(
            &analysis.frames,
            &analysis.tickers,
            &run.dir.join("frames"),
            (from, to),
            cfg.graph_format,
            &ExportOptions::default(),
        )
        .map_err(|e| e.in_stage("snapshots"))?;
        for f in files {
            run.record("snapshots", &format!("frames/{f}"))?;
        }
    }
    Ok(())
}

fn write_variogram(run: &mut Run<'_>, analysis: &Analysis) -> Result<()> {
    let cfg = run.cfg;
    let mol: Vec<f64> = analysis.records.iter().map(|r| r.mol).collect();
    let vg = variogram(&mol, cfg.variogram_lag, cfg.partial_window, cfg.variogram_squared)?;
    let mut text = String::from("frame_index,center_date,mol_increment\n");
    for (i, inc) in vg.increments.iter().enumerate() {
        let r = &analysis.records[i + cfg.variogram_lag];
        writeln!(text, "{},{},{inc}", r.frame_index, r.center_date).unwrap();
    }
    run.write("observables", "variogram.csv", &text)?;
    let mut text = String::from("frame_index,center_date,partial_variance\n");
    for (start, var) in &vg.partial_variances {
        let r = &analysis.records[start + cfg.variogram_lag];
        writeln!(text, "{},{},{var}", r.frame_index, r.center_date).unwrap();
    }
    run.write("observables", "partial_variances.csv", &text)
}

fn kinetics_stage(run: &mut Run<'_>, analysis: &Analysis) -> Result<()> {
    let cfg = run.cfg;
    let lo = cfg.kinetics_from.unwrap_or(0);
    let hi = cfg.kinetics_to.unwrap_or(usize::MAX);
    let frames: Vec<TreeFrame> = analysis
        .frames
        .iter()
        .filter(|f| (lo..=hi).contains(&f.frame_index))
        .cloned()
        .collect();
    let counts = count_transitions(&frames, cfg.frame_stride)?;
    let mut emp = empirical_kernel(&counts, cfg.min_samples);
    fit_b_tables(&mut emp);
    run.write("kinetics", "kernel_empirical.json", &(emp.to_json()? + "\n"))?;

    let alpha_bar = match cfg.alpha_bar {
        Some(a) => a,
        None => {
            let alphas: Vec<f64> = analysis
                .records
                .iter()
                .filter(|r| (lo..=hi).contains(&r.frame_index))
                .filter_map(|r| r.alpha)
                .collect();
            mean_alpha(&alphas)?.0
        }
    };
    let p = power_law(emp.ladder(), alpha_bar);
    let mut text = String::from("k,l,residual\n");
    for ((k, l), r) in detailed_balance_residuals(&emp, &p) {
        writeln!(text, "{k},{l},{r}").unwrap();
    }
    run.write("kinetics", "detailed_balance.csv", &text)?;

    let n = analysis.tickers.len();
    let top = cfg.k_cap.min(n.saturating_sub(1));
    let b: BTreeMap<usize, f64> = emp.b_minus.range(2..=top).map(|(k, v)| (*k, *v)).collect();
    if (2..=top).all(|k| b.contains_key(&k)) {
        match theoretical_kernel(&b, alpha_bar, n, cfg.k_cap) {
            Ok(theory) => run.write("kinetics", "kernel_theory.json", &(theory.to_json()? + "\n"))?,
            Err(e) => run.fail_fit("kernel_theory", &e),
        }
    } else {
        let missing: Vec<usize> = (2..=top).filter(|k| !b.contains_key(k)).collect();
        run.fail_fit(
            "kernel_theory",
            &Error::Kernel(format!("b(-1|k) unavailable for k in {missing:?}; raise data or lower k_cap")),
        );
    }
    let summary = serde_json::json!({
        "alpha_bar": alpha_bar,
        "pairs": counts.pairs,
        "skipped_pairs": counts.skipped_pairs,
        "events": counts.events(),
        "mass_outside_support": counts.mass_outside_support(),
        "unavailable_rows": emp.unavailable,
        "frame_stride": cfg.frame_stride,
    });
    run.write("kinetics", "kinetics_summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn fits_stage(run: &mut Run<'_>, analysis: &Analysis) -> Result<()> {
    let cfg = run.cfg;
    if analysis.records.is_empty() {
        run.fail_fit("phasefit", &Error::fit("no frames"));
        return Ok(());
    }
    let t: Vec<f64> = analysis.records.iter().map(|r| r.frame_index as f64).collect();
    let y: Vec<f64> = analysis
        .records
        .iter()
        .map(|r| match cfg.fit_series {
            FitSeries::Leader => r.ranks.k_leader as f64,
            FitSeries::Delta => r.delta as f64,
        })
        .collect();
    let series = Series::new(t, y)?;
    let mol_min = analysis
        .records
        .iter()
        .fold(&analysis.records[0], |b, r| if r.mol < b.mol { r } else { b })
        .frame_index as f64;
    let lambda = fit_lambda_peak(
        &series,
        &LambdaOptions {
            half_width: cfg.lambda_half_width,
            guard: guard_samples(cfg.lambda_guard, cfg.step_td),
            prior: Some(mol_min),
        },
    );
    // nucleation is fitted on the rise before the peak
    let peak = series
        .y
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > series.y[b] { i } else { b });
    let rise = Series::new(series.t[..=peak].to_vec(), series.y[..=peak].to_vec())?;
    let t_crit = detect_t_crit(&rise, None);
    let nucleation = t_crit
        .as_ref()
        .map_err(|e| Error::fit(e.to_string()))
        .and_then(|d| fit_nucleation(&rise, d.index, None));

    let mut report = serde_json::Map::new();
    report.insert("series".into(), serde_json::to_value(cfg.fit_series)?);
    report.insert("mol_minimum_frame".into(), serde_json::json!(mol_min));
    match &t_crit {
        Ok(d) => {
            report.insert("t_crit".into(), serde_json::to_value(d)?);
        }
        Err(e) => run.fail_fit("t_crit", e),
    }
    match &nucleation {
        Ok(f) => {
            report.insert("nucleation".into(), serde_json::to_value(f)?);
        }
        Err(e) => run.fail_fit("nucleation", e),
    }
    match &lambda {
        Ok(f) => {
            report.insert("lambda_peak".into(), serde_json::to_value(f)?);
        }
        Err(e) => run.fail_fit("lambda_peak", e),
    }
    if let (Ok(n), Ok(l)) = (&nucleation, &lambda) {
        report.insert(
            "crossover".into(),
            serde_json::to_value(crossover_report(n, l, cfg.crossover_tolerance))?,
        );
    }
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(report))? + "\n";
    run.write("phasefit", "fits.json", &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = validate_config("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!((cfg.width_td, cfg.step_td, cfg.k_min, cfg.k_max, cfg.partial_window), (400, 1, 2, 12, 60));
    }

    #[test]
    fn zero_width_names_the_rule() {
        let err = validate_config("width_td = 0").unwrap_err();
        assert!(err.to_string().contains("width_td ≥ 2"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let err = validate_config("widht_td = 10").unwrap_err();
        assert!(err.to_string().contains("widht_td"), "{err}");
        assert!(validate_config("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn comments_weekly_horizon_and_values() {
        let cfg = validate_config("# run\nhorizon = week  # weekly\nfollow = S001\nkinetics = yes\n").unwrap();
        assert_eq!(cfg.step_td, 5);
        assert_eq!(cfg.follow.as_deref(), Some("S001"));
        assert!(cfg.kinetics);
        assert!(validate_config("horizon = week\nstep_td = 3").is_err());
        assert!(validate_config("survivorship = window\nwindow_start = 2001-01-01").is_err());
        assert!(validate_config("kinetics = maybe").is_err());
    }

    #[test]
    fn hash_ignores_threads_and_output() {
        let a = validate_config("threads = 1\noutput_dir = a").unwrap();
        let b = validate_config("threads = 4\noutput_dir = b").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), validate_config("seed = 3").unwrap().hash());
    }

    #[test]
    fn missing_input_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig {
            input: Some(dir.path().join("absent.csv")),
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        let err = run_pipeline(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(!cfg.output_dir.exists());
        cfg.input = None;
        assert_eq!(run_pipeline(&cfg).unwrap_err().exit_code(), 2);
    }
}
