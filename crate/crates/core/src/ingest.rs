//! Price loading, survivorship filtering and log-returns.
//!
//! Input is long-format CSV with the header `date,ticker,close`. Dates are
//! ISO-8601 calendar days and are treated as opaque ordered labels; tickers
//! are kept in lexicographic order, which is the vertex order used by every
//! downstream tie-break.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};

/// Prices of `n` tickers over `T` dates. Cells may be empty until a
/// survivorship filter has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    tickers: Vec<String>,
    dates: Vec<String>,
    /// `prices[i][t]` is the close of ticker `i` on date `t`.
    prices: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Survivorship {
    /// Keep only tickers quoted on every date of the full calendar.
    Strict,
    /// Restrict the calendar to `[start, end]` (inclusive) and keep tickers
    /// quoted on every date inside it.
    Window { start: String, end: String },
}

impl PricePanel {
    pub fn new(
        tickers: Vec<String>,
        dates: Vec<String>,
        prices: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if tickers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("tickers must be unique and sorted"));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("dates must be strictly increasing"));
        }
        if prices.len() != tickers.len() || prices.iter().any(|row| row.len() != dates.len()) {
            return Err(Error::Dimension(format!(
                "price matrix must be {}x{}",
                tickers.len(),
                dates.len()
            )));
        }
        for (i, row) in prices.iter().enumerate() {
            for (t, p) in row.iter().enumerate() {
                if let Some(p) = p {
                    if !(p.is_finite() && *p > 0.0) {
                        return Err(Error::data(format!(
                            "non-positive price {p} for {} on {}",
                            tickers[i], dates[t]
                        )));
                    }
                }
            }
        }
        Ok(Self {
            tickers,
            dates,
            prices,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn price(&self, asset: usize, date: usize) -> Option<f64> {
        self.prices[asset][date]
    }

    pub fn is_complete(&self) -> bool {
        self.prices.iter().all(|row| row.iter().all(Option::is_some))
    }
}

fn check_date(s: &str) -> std::result::Result<(), String> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|_| ())
        .map_err(|e| format!("bad date `{s}`: {e}"))
}

/// Parses `date,ticker,close` records and applies the survivorship filter.
///
/// The result does not depend on record order.
pub fn load_prices<R: Read>(source: R, survivorship: &Survivorship) -> Result<PricePanel> {
    let raw = read_raw(source)?;
    survivorship_filter(&raw, survivorship)
}

/// Parses the CSV into a (possibly gappy) panel over the union calendar.
pub fn read_raw<R: Read>(source: R) -> Result<PricePanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names != ["date", "ticker", "close"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `date,ticker,close`, got `{}`", names.join(",")),
        });
    }

    let mut cells: BTreeMap<(String, String), f64> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse_err = |msg: String| Error::Parse { line, msg };
        if record.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, got {}", record.len())));
        }
        let date = record[0].to_string();
        check_date(&date).map_err(parse_err)?;
        let ticker = record[1].to_string();
        if ticker.is_empty() {
            return Err(parse_err("empty ticker".into()));
        }
        let close: f64 = record[2]
            .parse()
            .map_err(|e| parse_err(format!("bad close `{}`: {e}", &record[2])))?;
        if !close.is_finite() {
            return Err(parse_err(format!("non-finite close `{}`", &record[2])));
        }
        if close <= 0.0 {
            return Err(Error::data(format!(
                "line {line}: non-positive price {close} for {ticker} on {date}"
            )));
        }
        if cells.insert((ticker.clone(), date.clone()), close).is_some() {
            return Err(parse_err(format!("duplicate row for {ticker} on {date}")));
        }
    }
    if cells.is_empty() {
        return Err(Error::data("no rows"));
    }

    let tickers: Vec<String> = cells
        .keys()
        .map(|(t, _)| t.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dates: Vec<String> = cells
        .keys()
        .map(|(_, d)| d.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let date_index: BTreeMap<&str, usize> = dates
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();

    let mut prices = vec![vec![None; dates.len()]; tickers.len()];
    let mut asset = 0;
    for ((ticker, date), close) in &cells {
        while tickers[asset] != *ticker {
            asset += 1;
        }
        prices[asset][date_index[date.as_str()]] = Some(*close);
    }
    PricePanel::new(tickers, dates, prices)
}

/// Drops tickers with gaps (strict) or restricts to a date window first.
/// Idempotent.
pub fn survivorship_filter(panel: &PricePanel, mode: &Survivorship) -> Result<PricePanel> {
    let date_range: Vec<usize> = match mode {
        Survivorship::Strict => (0..panel.n_dates()).collect(),
        Survivorship::Window { start, end } => {
            check_date(start).map_err(|m| Error::config("start", m))?;
            check_date(end).map_err(|m| Error::config("end", m))?;
            if start > end {
                return Err(Error::config("start", "start date after end date"));
            }
            panel
                .dates
                .iter()
                .enumerate()
                .filter(|(_, d)| d.as_str() >= start.as_str() && d.as_str() <= end.as_str())
                .map(|(i, _)| i)
                .collect()
        }
    };
    if date_range.is_empty() {
        return Err(Error::data("empty calendar after survivorship filtering"));
    }

    let mut tickers = Vec::new();
    let mut prices = Vec::new();
    for (i, row) in panel.prices.iter().enumerate() {
        if date_range.iter().all(|&t| row[t].is_some()) {
            tickers.push(panel.tickers[i].clone());
            prices.push(date_range.iter().map(|&t| row[t]).collect());
        }
    }
    if tickers.is_empty() {
        return Err(Error::data("no surviving ticker"));
    }
    let dates = date_range.iter().map(|&t| panel.dates[t].clone()).collect();
    PricePanel::new(tickers, dates, prices)
}

/// Writes the panel in the input format, ordered by date then ticker.
pub fn write_prices<W: Write>(panel: &PricePanel, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["date", "ticker", "close"])
        .map_err(csv_io)?;
    for (t, date) in panel.dates.iter().enumerate() {
        for (i, ticker) in panel.tickers.iter().enumerate() {
            if let Some(p) = panel.prices[i][t] {
                w.write_record([date.as_str(), ticker.as_str(), &p.to_string()])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Log-returns of `n` assets: `returns[i][t] = ln(p[i][t+1] / p[i][t])`.
/// `dates[t]` is the date of the later price.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    tickers: Vec<String>,
    dates: Vec<String>,
    returns: Vec<Vec<f64>>,
}

impl ReturnPanel {
    pub fn new(tickers: Vec<String>, dates: Vec<String>, returns: Vec<Vec<f64>>) -> Result<Self> {
        if tickers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("tickers must be unique and sorted"));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("dates must be strictly increasing"));
        }
        if returns.len() != tickers.len() || returns.iter().any(|r| r.len() != dates.len()) {
            return Err(Error::Dimension(format!(
                "return matrix must be {}x{}",
                tickers.len(),
                dates.len()
            )));
        }
        if returns.iter().flatten().any(|r| !r.is_finite()) {
            return Err(Error::data("non-finite return"));
        }
        Ok(Self {
            tickers,
            dates,
            returns,
        })
    }

    pub fn tickers(&self) -> &[String] {
        &self.tickers
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn series(&self, asset: usize) -> &[f64] {
        &self.returns[asset]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.returns
    }

    /// Rebuilds a complete price panel starting every asset at `p0` on
    /// `first_date`.
    pub fn to_prices(&self, first_date: &str, p0: f64) -> Result<PricePanel> {
        if self.dates.first().is_some_and(|d| d.as_str() <= first_date) {
            return Err(Error::data("first_date must precede all return dates"));
        }
        let mut dates = Vec::with_capacity(self.dates.len() + 1);
        dates.push(first_date.to_string());
        dates.extend(self.dates.iter().cloned());
        let prices = self
            .returns
            .iter()
            .map(|r| {
                let mut row = Vec::with_capacity(r.len() + 1);
                let mut acc = 0.0;
                row.push(Some(p0));
                for x in r {
                    acc += x;
                    row.push(Some(p0 * acc.exp()));
                }
                row
            })
            .collect();
        PricePanel::new(self.tickers.clone(), dates, prices)
    }
}

pub fn log_returns(panel: &PricePanel) -> Result<ReturnPanel> {
    if panel.n_dates() < 2 {
        return Err(Error::Dimension(format!(
            "need at least 2 dates for returns, got {}",
            panel.n_dates()
        )));
    }
    if !panel.is_complete() {
        return Err(Error::data("panel has gaps; apply a survivorship filter first"));
    }
    let returns = panel
        .prices
        .iter()
        .map(|row| {
            row.windows(2)
                .map(|w| (w[1].unwrap() / w[0].unwrap()).ln())
                .collect()
        })
        .collect();
    ReturnPanel::new(panel.tickers.clone(), panel.dates[1..].to_vec(), returns)
}
