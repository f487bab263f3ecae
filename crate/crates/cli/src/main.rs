use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mstdyn::corrnet::WindowSpec;
use mstdyn::ingest::{write_prices, Survivorship};
use mstdyn::kinetics::{count_transitions, empirical_kernel, fit_b_tables, power_law, theoretical_kernel, TransitionKernel};
use mstdyn::laddersim::{chi_square, stationary_histogram};
use mstdyn::observables::ObservableOptions;
use mstdyn::phasefit::{
    detect_t_crit, fit_lambda_peak, fit_nucleation, guard_samples, weekly_downsample, LambdaLaw, LambdaOptions, LogBranch,
    NucleationLaw, Series,
};
use mstdyn::pipeline::{analyze, load_returns, parse_pairs, run_pipeline, PipelineConfig};
use mstdyn::snapshots::{export_frames, ExportOptions, GraphFormat};
use mstdyn::synthgen::{
    generate_law_series, generate_panel, FactorModelSpec, Law, LawSeriesSpec, LoadingProfile, PlantedEpisode,
    FIRST_PRICE_DATE,
};
use mstdyn::{Error, Result};

#[derive(Parser)]
#[command(name = "mstdyn", version, about = "Correlation-tree dynamics of asset panels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline from a config file; flags override file values.
    Run(RunArgs),
    /// One-factor synthetic price panel as date,ticker,close CSV.
    SynthPanel(SynthPanelArgs),
    /// Noisy samples of a closed-form growth law as t,y CSV.
    SynthSeries(SynthSeriesArgs),
    /// Degree-ladder Monte Carlo under a kernel.
    SimulateLadder(LadderArgs),
    /// Power-law nucleation fit of a leader-degree series.
    FitNucleation(NucleationArgs),
    /// Two-sided logarithmic peak fit.
    FitLambda(LambdaArgs),
    /// DOT or GraphML snapshots of a frame range.
    ExportFrames(ExportArgs),
    /// Empirical degree-transition kernel from a price panel.
    KernelEstimate(KernelArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(short, long, env = "MSTDYN_OUT")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Any other config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthPanelArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1500)]
    days: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.02)]
    idio_vol: f64,
    #[arg(long, default_value_t = 0.01)]
    market_vol: f64,
    /// Asset whose loading is raised during the episode.
    #[arg(long)]
    episode_asset: Option<usize>,
    #[arg(long, default_value_t = 400)]
    episode_start: usize,
    #[arg(long, default_value_t = 1100)]
    episode_end: usize,
    #[arg(long, default_value_t = 3.5)]
    peak_beta: f64,
    /// Fraction of the episode spent at the peak loading.
    #[arg(long, default_value_t = 0.0)]
    plateau: f64,
    #[arg(long)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LawKind {
    Nucleation,
    Lambda,
}

#[derive(Args)]
struct SynthSeriesArgs {
    #[arg(long, value_enum)]
    law: LawKind,
    #[arg(long, default_value_t = 1024)]
    length: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    seed: u64,
    /// Round values to integers.
    #[arg(long)]
    round: bool,
    #[arg(long, default_value_t = 4.5273)]
    a0: f64,
    #[arg(long, default_value_t = 2.5)]
    a: f64,
    #[arg(long, default_value_t = 2.0)]
    z: f64,
    #[arg(long, default_value_t = 164.0)]
    t_crit: f64,
    #[arg(long, default_value_t = 544.0)]
    t_lambda: f64,
    #[arg(long, default_value_t = 14.0)]
    a_l: f64,
    #[arg(long, default_value_t = 2500.0)]
    tau_l: f64,
    #[arg(long, default_value_t = 22.0)]
    a_r: f64,
    #[arg(long, default_value_t = 480.0)]
    tau_r: f64,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LadderArgs {
    /// Kernel JSON; otherwise a detailed-balance kernel is built from
    /// --alpha-bar, --n and b(-1|k) = --b-scale / k.
    #[arg(long)]
    kernel: Option<PathBuf>,
    #[arg(long, default_value_t = 3.07)]
    alpha_bar: f64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    k_cap: usize,
    #[arg(long, default_value_t = 0.3)]
    b_scale: f64,
    #[arg(long, default_value_t = 1_000_000)]
    steps: u64,
    #[arg(long, default_value_t = 10_000)]
    burn_in: u64,
    /// Required: runs are reproducible only with an explicit seed.
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    #[arg(long, default_value_t = 12)]
    k_max: usize,
    /// Histogram CSV; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HorizonArg {
    Day,
    Week,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeriesArg {
    Leader,
    Delta,
}

#[derive(Args)]
struct SeriesInput {
    /// CSV with time in the first column.
    #[arg(short, long)]
    input: PathBuf,
    /// Value column; defaults to the second column.
    #[arg(long, conflicts_with = "series")]
    column: Option<String>,
    /// Shorthand for the ranks.csv columns k_leader / delta.
    #[arg(long, value_enum)]
    series: Option<SeriesArg>,
}

impl SeriesInput {
    fn load(&self) -> Result<Series> {
        let column = match self.series {
            Some(SeriesArg::Leader) => Some("k_leader"),
            Some(SeriesArg::Delta) => Some("delta"),
            None => self.column.as_deref(),
        };
        Series::read_csv(open(&self.input)?, column)
    }
}

#[derive(Args)]
struct NucleationArgs {
    #[command(flatten)]
    source: SeriesInput,
    /// Index of t_crit; detected when absent.
    #[arg(long)]
    t_crit_index: Option<usize>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LambdaArgs {
    #[command(flatten)]
    source: SeriesInput,
    /// `week` keeps every 5th sample and measures time in weeks.
    #[arg(long, value_enum, default_value = "day")]
    horizon: HorizonArg,
    #[arg(long, default_value_t = 50)]
    half_width: usize,
    /// Trading days around t_λ left out of both branches.
    #[arg(long, default_value_t = 3)]
    guard: usize,
    /// Extra candidate for t_λ, reported separately.
    #[arg(long)]
    prior: Option<f64>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PanelInput {
    /// date,ticker,close CSV.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value_t = 400)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
}

impl PanelInput {
    fn analyze(&self) -> Result<mstdyn::pipeline::Analysis> {
        if !self.input.is_file() {
            return Err(Error::Config {
                key: "input".into(),
                msg: format!("{} does not exist", self.input.display()),
            });
        }
        let returns = load_returns(&self.input, &Survivorship::Strict)?;
        analyze(&returns, &WindowSpec::new(self.width, self.step)?, &ObservableOptions::default())
    }
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    panel: PanelInput,
    #[arg(long)]
    from: usize,
    #[arg(long)]
    to: usize,
    #[arg(long, default_value = "dot")]
    format: String,
    #[arg(short, long, env = "MSTDYN_OUT")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    panel: PanelInput,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 30)]
    min_samples: u64,
    #[arg(long)]
    from: Option<usize>,
    #[arg(long)]
    to: Option<usize>,
    /// Kernel JSON; stdout when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::Config {
            key: "input".into(),
            msg: format!("{}: {e}", path.display()),
        })
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn emit_json(out: &Option<PathBuf>, value: &impl serde::Serialize) -> Result<()> {
    let mut w = sink(out)?;
    writeln!(w, "{}", serde_json::to_string_pretty(value)?)?;
    w.flush()?;
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "config".into(),
            msg: format!("{}: {e}", path.display()),
        })?;
        for (_, k, v) in parse_pairs(&text)? {
            cfg.apply(&k, &v)?;
        }
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k.to_string(), v));
        }
    };
    flag("input", args.input.map(|p| p.display().to_string()));
    flag("output_dir", args.output_dir.map(|p| p.display().to_string()));
    flag("width_td", args.width.map(|v| v.to_string()));
    flag("step_td", args.step.map(|v| v.to_string()));
    flag("horizon", args.horizon);
    flag("seed", args.seed.map(|v| v.to_string()));
    flag("threads", args.threads.map(|v| v.to_string()));
    for kv in &args.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        flags.push((k.trim().to_string(), v.trim().to_string()));
    }
    for (k, v) in flags {
        cfg.apply(&k, &v)?;
    }
    cfg.check()?;
    let manifest = run_pipeline(&cfg)?;
    eprintln!(
        "{} frames ({} skipped), {} outputs, {} failed fits -> {}",
        manifest.frames_total,
        manifest.skipped_frames.len(),
        manifest.outputs.len(),
        manifest.failed_fits.len(),
        cfg.output_dir.join("manifest.json").display()
    );
    Ok(())
}

fn synth_panel(a: SynthPanelArgs) -> Result<()> {
    let mut spec = FactorModelSpec::uniform(a.n, a.days, a.beta, a.idio_vol, a.seed);
    spec.market_vol = a.market_vol;
    spec.episode = a.episode_asset.map(|asset| PlantedEpisode {
        asset,
        start: a.episode_start,
        end: a.episode_end,
        peak_beta: a.peak_beta,
        profile: LoadingProfile {
            rise: (1.0 - a.plateau) / 2.0,
            plateau: a.plateau,
        },
    });
    let prices = generate_panel(&spec)?.to_prices(FIRST_PRICE_DATE, 100.0)?;
    let mut w = sink(&a.out)?;
    write_prices(&prices, &mut w)?;
    w.flush()?;
    Ok(())
}

fn synth_series(a: SynthSeriesArgs) -> Result<()> {
    let law = match a.law {
        LawKind::Nucleation => Law::Nucleation(NucleationLaw {
            a0: a.a0,
            a: a.a,
            z: a.z,
            t_crit: a.t_crit,
        }),
        LawKind::Lambda => Law::Lambda(LambdaLaw {
            t_lambda: a.t_lambda,
            left: LogBranch { a: a.a_l, tau: a.tau_l },
            right: LogBranch { a: a.a_r, tau: a.tau_r },
        }),
    };
    let mut spec = LawSeriesSpec::new(law, a.noise, a.length, a.seed);
    spec.round = a.round;
    let series = generate_law_series(&spec)?;
    let mut w = sink(&a.out)?;
    series.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn simulate_ladder(a: LadderArgs) -> Result<()> {
    let kernel = match &a.kernel {
        Some(path) => TransitionKernel::from_json(&std::fs::read_to_string(path).map_err(|e| Error::Config {
            key: "kernel".into(),
            msg: format!("{}: {e}", path.display()),
        })?)?,
        None => {
            let b: BTreeMap<usize, f64> = (1..a.n).map(|k| (k, (a.b_scale / k as f64).min(1.0))).collect();
            theoretical_kernel(&b, a.alpha_bar, a.n, a.k_cap)?
        }
    };
    let hist = stationary_histogram(&kernel, a.steps, a.burn_in, a.seed)?;
    let alpha = kernel.alpha_bar.unwrap_or(a.alpha_bar);
    let expected = power_law(kernel.ladder(), alpha);
    let mut w = sink(&a.out)?;
    hist.write_csv(&mut w, Some(&expected))?;
    w.flush()?;
    let exponent = hist.exponent(a.k_min, a.k_max)?;
    let chi = chi_square(&hist, &expected, a.k_min, a.k_max)?;
    eprintln!(
        "exponent over [{}, {}): {exponent:.4}; chi-square {:.2} on {} dof, p = {:.4} (unthinned samples are correlated)",
        a.k_min, a.k_max, chi.statistic, chi.dof, chi.p_value
    );
    Ok(())
}

fn fit_nucleation_cmd(a: NucleationArgs) -> Result<()> {
    let series = a.source.load()?;
    let mut report = serde_json::Map::new();
    let index = match a.t_crit_index {
        Some(i) => i,
        None => {
            let d = detect_t_crit(&series, None)?;
            let i = d.index;
            report.insert("t_crit_detection".into(), serde_json::to_value(d)?);
            i
        }
    };
    report.insert("fit".into(), serde_json::to_value(fit_nucleation(&series, index, None)?)?);
    emit_json(&a.out, &report)
}

fn fit_lambda_cmd(a: LambdaArgs) -> Result<()> {
    let mut series = a.source.load()?;
    let mut stride = 1;
    if a.horizon == HorizonArg::Week {
        series = weekly_downsample(&series);
        stride = 5;
    }
    let fit = fit_lambda_peak(
        &series,
        &LambdaOptions {
            half_width: a.half_width,
            guard: guard_samples(a.guard, stride),
            prior: a.prior,
        },
    )?;
    emit_json(&a.out, &fit)
}

fn export_frames_cmd(a: ExportArgs) -> Result<()> {
    let format = match a.format.as_str() {
        "dot" => GraphFormat::Dot,
        "graphml" => GraphFormat::Graphml,
        other => {
            return Err(Error::Config {
                key: "format".into(),
                msg: format!("expected dot or graphml, got `{other}`"),
            })
        }
    };
    if a.from > a.to {
        return Err(Error::Config {
            key: "from".into(),
            msg: "from must not exceed to".into(),
        });
    }
    let analysis = a.panel.analyze()?;
    let files = export_frames(
        &analysis.frames,
        &analysis.tickers,
        &a.output_dir,
        (a.from, a.to),
        format,
        &ExportOptions::default(),
    )?;
    eprintln!("{} files -> {}", files.len(), a.output_dir.display());
    Ok(())
}

fn kernel_estimate(a: KernelArgs) -> Result<()> {
    let analysis = a.panel.analyze()?;
    let lo = a.from.unwrap_or(0);
    let hi = a.to.unwrap_or(usize::MAX);
    let frames: Vec<_> = analysis
        .frames
        .into_iter()
        .filter(|f| (lo..=hi).contains(&f.frame_index))
        .collect();
    let counts = count_transitions(&frames, a.stride)?;
    let mut kernel = empirical_kernel(&counts, a.min_samples);
    fit_b_tables(&mut kernel);
    let mut w = sink(&a.out)?;
    writeln!(w, "{}", kernel.to_json()?)?;
    w.flush()?;
    eprintln!(
        "{} frame pairs, {} rows estimated, {} unavailable",
        counts.pairs,
        kernel.rows.len(),
        kernel.unavailable.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::SynthPanel(a) => synth_panel(a),
        Command::SynthSeries(a) => synth_series(a),
        Command::SimulateLadder(a) => simulate_ladder(a),
        Command::FitNucleation(a) => fit_nucleation_cmd(a),
        Command::FitLambda(a) => fit_lambda_cmd(a),
        Command::ExportFrames(a) => export_frames_cmd(a),
        Command::KernelEstimate(a) => kernel_estimate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
