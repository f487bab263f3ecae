//! Synthetic inputs: one-factor return panels with a planted hub episode,
//! and noisy samples of the closed-form growth laws.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ReturnPanel;
use crate::phasefit::{LambdaLaw, NucleationLaw, Series, DEFAULT_GUARD};

pub const FIRST_PRICE_DATE: &str = "2000-01-03";

/// Loading shape over an episode: linear rise over the first `rise` fraction,
/// flat for the next `plateau` fraction, linear fall over the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadingProfile {
    pub rise: f64,
    pub plateau: f64,
}

impl Default for LoadingProfile {
    fn default() -> Self {
        Self {
            rise: 0.5,
            plateau: 0.25,
        }
    }
}

impl LoadingProfile {
    /// Single sharp maximum at the episode midpoint.
    pub fn peak() -> Self {
        Self {
            rise: 0.5,
            plateau: 0.0,
        }
    }

    /// Shape value in `[0, 1]` at episode fraction `u ∈ [0, 1]`.
    pub fn at(&self, u: f64) -> f64 {
        let fall_start = self.rise + self.plateau;
        if u <= 0.0 || u >= 1.0 {
            0.0
        } else if u < self.rise {
            u / self.rise
        } else if u <= fall_start {
            1.0
        } else {
            (1.0 - u) / (1.0 - fall_start)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEpisode {
    pub asset: usize,
    pub start: usize,
    pub end: usize,
    /// Market loading of the planted asset at the top of the profile.
    pub peak_beta: f64,
    pub profile: LoadingProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelSpec {
    pub n: usize,
    pub days: usize,
    pub betas: Vec<f64>,
    pub idio_vol: Vec<f64>,
    pub market_vol: f64,
    pub episode: Option<PlantedEpisode>,
    pub seed: u64,
}

impl FactorModelSpec {
    /// Equal loadings and volatilities for every asset.
    pub fn uniform(n: usize, days: usize, beta: f64, idio_vol: f64, seed: u64) -> Self {
        Self {
            n,
            days,
            betas: vec![beta; n],
            idio_vol: vec![idio_vol; n],
            market_vol: 0.01,
            episode: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.days < 2 {
            return Err(Error::config("n", "need n ≥ 2 assets and days ≥ 2"));
        }
        if self.betas.len() != self.n || self.idio_vol.len() != self.n {
            return Err(Error::Dimension("betas and idio_vol need one entry per asset".into()));
        }
        if self.idio_vol.iter().any(|v| !(*v > 0.0)) || !(self.market_vol >= 0.0) {
            return Err(Error::config("idio_vol", "volatilities must be positive"));
        }
        if let Some(ep) = &self.episode {
            if ep.asset >= self.n || ep.start >= ep.end || ep.end > self.days {
                return Err(Error::config("episode", "episode must lie inside [0, days) on an existing asset"));
            }
            let p = ep.profile;
            if !(p.rise > 0.0 && p.plateau >= 0.0 && p.rise + p.plateau <= 1.0) {
                return Err(Error::config("profile", "need rise > 0, plateau ≥ 0, rise + plateau ≤ 1"));
            }
        }
        Ok(())
    }

    /// Loading of `asset` on `day`.
    pub fn beta(&self, asset: usize, day: usize) -> f64 {
        let base = self.betas[asset];
        match &self.episode {
            Some(ep) if ep.asset == asset && day >= ep.start && day < ep.end => {
                let u = (day - ep.start) as f64 / (ep.end - ep.start) as f64;
                base + (ep.peak_beta - base) * ep.profile.at(u)
            }
            _ => base,
        }
    }
}

/// `S000`, `S001`, ... zero-padded so lexicographic order is numeric order.
pub fn ticker_names(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(3);
    (0..n).map(|i| format!("S{i:0width$}")).collect()
}

/// The `count` weekdays following `first` (exclusive).
pub fn business_days_after(first: &str, count: usize) -> Result<Vec<String>> {
    let mut d = NaiveDate::parse_from_str(first, "%Y-%m-%d")
        .map_err(|e| Error::config("first_date", e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        d = d
            .checked_add_days(Days::new(1))
            .ok_or_else(|| Error::data("calendar overflow"))?;
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d.format("%Y-%m-%d").to_string());
        }
    }
    Ok(out)
}

/// `r_i(t) = β_i(t) m(t) + σ_i ε_i(t)` with independent standard normal
/// `m / market_vol` and `ε`. Draw order is day-major, market first.
pub fn generate_panel(spec: &FactorModelSpec) -> Result<ReturnPanel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut returns = vec![Vec::with_capacity(spec.days); spec.n];
    for t in 0..spec.days {
        let z: f64 = StandardNormal.sample(&mut rng);
        let m = spec.market_vol * z;
        for (i, row) in returns.iter_mut().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            row.push(spec.beta(i, t) * m + spec.idio_vol[i] * e);
        }
    }
    ReturnPanel::new(
        ticker_names(spec.n),
        business_days_after(FIRST_PRICE_DATE, spec.days)?,
        returns,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum Law {
    Nucleation(NucleationLaw),
    Lambda(LambdaLaw),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawSeriesSpec {
    pub law: Law,
    pub noise_sigma: f64,
    pub length: usize,
    pub seed: u64,
    /// Round each value to the nearest integer, as for degree series.
    pub round: bool,
    /// Distances to `t_λ` below this many frames are clamped to it.
    pub guard: usize,
}

impl LawSeriesSpec {
    pub fn new(law: Law, noise_sigma: f64, length: usize, seed: u64) -> Self {
        Self {
            law,
            noise_sigma,
            length,
            seed,
            round: false,
            guard: DEFAULT_GUARD,
        }
    }
}

fn clean_value(law: &Law, t: f64, guard: f64) -> f64 {
    match law {
        Law::Nucleation(n) => n.value(t),
        Law::Lambda(l) => {
            let d = t - l.t_lambda;
            let left = l.left.at_distance((-d).max(guard));
            let right = l.right.at_distance(d.max(guard));
            if d < 0.0 {
                left
            } else if d > 0.0 {
                right
            } else {
                left.max(right)
            }
        }
    }
}

/// Closed-form values at frames `0 .. length` plus i.i.d. Gaussian noise.
pub fn generate_law_series(spec: &LawSeriesSpec) -> Result<Series> {
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::config("noise_sigma", "must be ≥ 0"));
    }
    let guard = spec.guard.max(1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let y = (0..spec.length)
        .map(|i| {
            let mut v = clean_value(&spec.law, i as f64, guard);
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * noise.sample(&mut rng);
            }
            if spec.round {
                v = v.round();
            }
            v
        })
        .collect();
    Ok(Series::frames(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrnet::{direct_correlation, frame_stream, WindowSpec};
    use crate::phasefit::LogBranch;
    use proptest::prelude::*;

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

    #[test]
    fn names_and_calendar() {
        assert_eq!(ticker_names(3), vec!["S000", "S001", "S002"]);
        assert_eq!(ticker_names(1001)[1000], "S1000");
        let days = business_days_after("2000-01-03", 6).unwrap();
        assert_eq!(days, vec!["2000-01-04", "2000-01-05", "2000-01-06", "2000-01-07", "2000-01-10", "2000-01-11"]);
    }

    #[test]
    fn profile_shape() {
        let p = LoadingProfile::default();
        assert_eq!(p.at(0.25), 0.5);
        assert_eq!(p.at(0.6), 1.0);
        assert!((p.at(0.875) - 0.5).abs() < 1e-12);
        assert_eq!(LoadingProfile::peak().at(0.5), 1.0);
    }

    #[test]
    fn zero_loading_gives_small_correlations() {
        let spec = FactorModelSpec::uniform(8, 1000, 0.0, 0.02, 5);
        let panel = generate_panel(&spec).unwrap();
        let c = direct_correlation(&panel, 0, 1000).unwrap();
        for i in 0..8 {
            for j in 0..i {
                assert!(c.get(i, j).abs() < 0.1);
            }
        }
    }

    #[test]
    fn pure_factor_limit_is_all_ones() {
        let spec = FactorModelSpec::uniform(5, 300, 1.0, 1e-9, 6);
        let panel = generate_panel(&spec).unwrap();
        let c = direct_correlation(&panel, 0, 300).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert!((c.get(i, j) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn planted_asset_becomes_hub() {
        let mut hits = 0;
        for seed in 0..10 {
            let mut spec = FactorModelSpec::uniform(30, 600, 0.5, 0.02, seed);
            spec.episode = Some(PlantedEpisode {
                asset: 7,
                start: 100,
                end: 500,
                peak_beta: 3.0,
                profile: LoadingProfile::default(),
            });
            let panel = generate_panel(&spec).unwrap();
            let frames = frame_stream(&panel, &WindowSpec::new(100, 1).unwrap()).unwrap();
            // window centred on the plateau
            let f = frames[300 - 50].as_ref().unwrap();
            let max = *f.degree.iter().max().unwrap();
            if f.degree[7] == max {
                hits += 1;
            }
        }
        assert!(hits >= 9, "{hits}/10");
    }

    #[test]
    fn invalid_specs() {
        let mut spec = FactorModelSpec::uniform(4, 10, 1.0, 0.0, 0);
        assert!(generate_panel(&spec).is_err());
        spec.idio_vol = vec![0.1; 4];
        spec.episode = Some(PlantedEpisode {
            asset: 9,
            start: 0,
            end: 5,
            peak_beta: 2.0,
            profile: LoadingProfile::default(),
        });
        assert!(generate_panel(&spec).is_err());
    }

    #[test]
    fn noiseless_laws() {
        let s = generate_law_series(&LawSeriesSpec::new(Law::Nucleation(nucleation()), 0.0, 544, 0)).unwrap();
        for (i, v) in s.y.iter().enumerate() {
            assert_eq!(*v, nucleation().value(i as f64));
        }
        let law = table_one();
        let mut spec = LawSeriesSpec::new(Law::Lambda(law), 0.0, 1024, 0);
        let s = generate_law_series(&spec).unwrap();
        assert_eq!(s.y[0], law.value(0.0).unwrap());
        assert_eq!(s.y[541], law.value(541.0).unwrap());
        assert_eq!(s.y[543], law.left.at_distance(3.0));
        assert_eq!(s.y[544], law.right.at_distance(3.0));
        // ln 1 = 0 at the edge of the left domain
        spec.law = Law::Lambda(LambdaLaw { t_lambda: 2600.0, ..law });
        spec.length = 200;
        assert_eq!(generate_law_series(&spec).unwrap().y[100], 0.0);
    }

    proptest! {
        #[test]
        fn rounding_error_at_most_half(seed in 0u64..1000, sigma in 0.0f64..5.0) {
            let mut spec = LawSeriesSpec::new(Law::Lambda(table_one()), sigma, 300, seed);
            let raw = generate_law_series(&spec).unwrap();
            spec.round = true;
            let rounded = generate_law_series(&spec).unwrap();
            for (a, b) in raw.y.iter().zip(&rounded.y) {
                prop_assert!((a - b).abs() <= 0.5);
                prop_assert_eq!(b.fract(), 0.0);
            }
        }

        #[test]
        fn generators_are_seeded(seed in 0u64..1000) {
            let spec = FactorModelSpec::uniform(4, 50, 0.8, 0.02, seed);
            prop_assert_eq!(generate_panel(&spec).unwrap(), generate_panel(&spec).unwrap());
            let law = LawSeriesSpec::new(Law::Nucleation(nucleation()), 1.5, 100, seed);
            prop_assert_eq!(generate_law_series(&law).unwrap(), generate_law_series(&law).unwrap());
        }
    }
}
