//! Post-hoc analysis of sampling runs.
//!
//! Three kinds of artifacts come out of here:
//!
//! * [`ConsistencyStats`] aggregates the per-step `cp` statistics of one or
//!   more traces (means averaged, histograms summed) and round-trips
//!   through a pinned CSV layout.
//! * [`render_histogram_image`] turns one aggregated step into a plain-text
//!   PPM bar chart, with the out-of-range bins tinted differently so
//!   clipped mass is visible at a glance.
//! * [`prompt_alignment_score`] and [`identity_score`] are the two scalar
//!   figures of merit used when comparing guidance modes: how much the
//!   final grids look like the conditioned class, and how close they stay
//!   to a set of subject references.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use crate::models::{Condition, GaussianMixtureModel};
use crate::sampler::SamplerTrace;

/// Binning for the per-step `cp` histograms: `bins` equal-width interior
/// bins over `[lo, hi)`, plus an underflow and an overflow bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    /// Number of interior bins (excluding underflow/overflow).
    pub bins: usize,
}

impl Default for HistogramSpec {
    /// Sixty interior bins over `[-3, 3)` — the `cp` field concentrates
    /// near zero at working guidance scales, so this range is generous.
    fn default() -> Self {
        HistogramSpec {
            lo: -3.0,
            hi: 3.0,
            bins: 60,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo >= self.hi {
            return Err(Error::param(format!(
                "histogram range [{}, {}) is not a finite non-empty interval",
                self.lo, self.hi
            )));
        }
        if self.bins == 0 {
            return Err(Error::param("histogram needs at least one interior bin"));
        }
        Ok(())
    }

    /// Interior bins plus the two out-of-range bins.
    pub fn total_bins(&self) -> usize {
        self.bins + 2
    }

    /// Index of the bin holding `v`: `0` is underflow (`v < lo`), the last
    /// index is overflow (`v >= hi`), interior bins are half-open
    /// equal-width intervals in between.
    pub fn bin(&self, v: f64) -> usize {
        if v < self.lo {
            return 0;
        }
        if v >= self.hi {
            return self.bins + 1;
        }
        let frac = (v - self.lo) / (self.hi - self.lo);
        let idx = (frac * self.bins as f64).floor() as usize;
        1 + idx.min(self.bins - 1)
    }

    /// Histogram counts of `values`, length [`HistogramSpec::total_bins`].
    pub fn count(&self, values: &[f64]) -> Vec<u64> {
        let mut counts = vec![0u64; self.total_bins()];
        for v in values {
            counts[self.bin(*v)] += 1;
        }
        counts
    }
}

/// One aggregated step of a [`ConsistencyStats`] table.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsRow {
    pub t: usize,
    /// `cp` mean, averaged over the aggregated runs.
    pub mu: f64,
    /// `cp` deviation, averaged over the aggregated runs (each run's own
    /// population deviation, not the pooled one).
    pub sigma: f64,
    /// Count of `cp` values below the histogram range, summed over runs.
    pub underflow: u64,
    /// Interior bin counts, summed over runs.
    pub interior: Vec<u64>,
    /// Count of `cp` values at or above the histogram range, summed.
    pub overflow: u64,
}

impl StatsRow {
    /// Total mass across underflow, interior and overflow.
    pub fn total_count(&self) -> u64 {
        self.underflow + self.interior.iter().sum::<u64>() + self.overflow
    }
}

impl ConsistencyStats {
    /// The aggregated row for timestep `t`.
    ///
    /// # Errors
    ///
    /// Asking for a timestep the stats do not contain is a parameter error.
    pub fn row(&self, t: usize) -> Result<&StatsRow> {
        self.rows
            .iter()
            .find(|r| r.t == t)
            .ok_or_else(|| Error::param(format!("no statistics recorded for timestep {t}")))
    }
}

/// Per-step `cp` statistics aggregated across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyStats {
    /// Width of each row's `interior` vector; kept even when `rows` is
    /// empty so the CSV header stays well-defined.
    pub interior_bins: usize,
    pub rows: Vec<StatsRow>,
}

impl ConsistencyStats {
    /// Aggregates traces of identical shape: same step count, same timestep
    /// sequence, same histogram width. Means are averaged, counts summed.
    pub fn from_traces(traces: &[SamplerTrace]) -> Result<Self> {
        let first = traces
            .first()
            .ok_or_else(|| Error::param("need at least one trace to aggregate"))?;
        if first.is_empty() {
            return Err(Error::param("cannot aggregate an empty trace"));
        }
        let hist_len = first.records[0].hist.len();
        if hist_len < 3 {
            return Err(Error::param(format!(
                "trace histograms need underflow, interior and overflow bins; got width {hist_len}"
            )));
        }
        for (i, trace) in traces.iter().enumerate() {
            if trace.len() != first.len() {
                return Err(Error::param(format!(
                    "trace {i} has {} steps, expected {}",
                    trace.len(),
                    first.len()
                )));
            }
            for (rec, lead) in trace.records.iter().zip(&first.records) {
                if rec.t != lead.t {
                    return Err(Error::param(format!(
                        "trace {i} records t={} where t={} was expected",
                        rec.t, lead.t
                    )));
                }
                if rec.hist.len() != hist_len {
                    return Err(Error::param(format!(
                        "trace {i} has histogram width {}, expected {hist_len}",
                        rec.hist.len()
                    )));
                }
            }
        }

        let n = traces.len() as f64;
        let rows = (0..first.len())
            .map(|step| {
                let t = first.records[step].t;
                let mut mu = 0.0;
                let mut sigma = 0.0;
                let mut hist = vec![0u64; hist_len];
                for trace in traces {
                    let rec = &trace.records[step];
                    mu += rec.cp_mean;
                    sigma += rec.cp_std;
                    for (acc, c) in hist.iter_mut().zip(&rec.hist) {
                        *acc += c;
                    }
                }
                StatsRow {
                    t,
                    mu: mu / n,
                    sigma: sigma / n,
                    underflow: hist[0],
                    interior: hist[1..hist_len - 1].to_vec(),
                    overflow: hist[hist_len - 1],
                }
            })
            .collect();
        Ok(ConsistencyStats {
            interior_bins: hist_len - 2,
            rows,
        })
    }

    /// Writes the table as CSV with the pinned header
    /// `t,mu,sigma,underflow,bin_0,...,overflow`. An empty table writes the
    /// header alone.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let mut header = String::from("t,mu,sigma,underflow");
        for i in 0..self.interior_bins {
            let _ = write!(header, ",bin_{i}");
        }
        header.push_str(",overflow");
        writeln!(out, "{header}")?;
        for row in &self.rows {
            if row.interior.len() != self.interior_bins {
                return Err(Error::param(format!(
                    "row at t={} has {} interior bins, expected {}",
                    row.t,
                    row.interior.len(),
                    self.interior_bins
                )));
            }
            write!(out, "{},{},{},{}", row.t, row.mu, row.sigma, row.underflow)?;
            for c in &row.interior {
                write!(out, ",{c}")?;
            }
            writeln!(out, ",{}", row.overflow)?;
        }
        Ok(())
    }

    pub fn read_csv(input: &mut impl Read) -> Result<ConsistencyStats> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        ConsistencyStats::parse_csv(&text)
    }

    /// Parses CSV written by [`ConsistencyStats::write_csv`]. A header-only
    /// file parses to an empty table.
    pub fn parse_csv(text: &str) -> Result<ConsistencyStats> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("stats csv", "empty file"))?;
        let interior_bins = parse_stats_header(header)?;
        let columns = interior_bins + 5;

        let mut rows = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns {
                return Err(Error::format(
                    "stats csv",
                    format!(
                        "line {lineno}: expected {columns} fields, found {}",
                        fields.len()
                    ),
                ));
            }
            let t: usize = fields[0].parse().map_err(|_| {
                Error::format("stats csv", format!("line {lineno}: bad timestep '{}'", fields[0]))
            })?;
            let mu = parse_stat(fields[1], lineno)?;
            let sigma = parse_stat(fields[2], lineno)?;
            let counts: Vec<u64> = fields[3..]
                .iter()
                .map(|f| {
                    f.parse().map_err(|_| {
                        Error::format("stats csv", format!("line {lineno}: bad count '{f}'"))
                    })
                })
                .collect::<Result<_>>()?;
            rows.push(StatsRow {
                t,
                mu,
                sigma,
                underflow: counts[0],
                interior: counts[1..counts.len() - 1].to_vec(),
                overflow: counts[counts.len() - 1],
            });
        }
        for pair in rows.windows(2) {
            if pair[1].t >= pair[0].t {
                return Err(Error::format(
                    "stats csv",
                    format!(
                        "timesteps must strictly decrease, got {} then {}",
                        pair[0].t, pair[1].t
                    ),
                ));
            }
        }
        Ok(ConsistencyStats {
            interior_bins,
            rows,
        })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<ConsistencyStats> {
        let mut input = BufReader::new(File::open(path)?);
        ConsistencyStats::read_csv(&mut input)
    }
}

fn parse_stats_header(header: &str) -> Result<usize> {
    let cols: Vec<&str> = header.split(',').collect();
    let fixed = ["t", "mu", "sigma", "underflow"];
    if cols.len() < fixed.len() + 2 {
        return Err(Error::format(
            "stats csv",
            format!("header has {} columns, expected at least 6", cols.len()),
        ));
    }
    for (got, want) in cols.iter().zip(fixed) {
        if *got != want {
            return Err(Error::format(
                "stats csv",
                format!("header column '{got}' where '{want}' was expected"),
            ));
        }
    }
    if *cols.last().expect("non-empty") != "overflow" {
        return Err(Error::format(
            "stats csv",
            "header must end with 'overflow'",
        ));
    }
    let bins = &cols[fixed.len()..cols.len() - 1];
    for (i, got) in bins.iter().enumerate() {
        let want = format!("bin_{i}");
        if *got != want {
            return Err(Error::format(
                "stats csv",
                format!("header column '{got}' where '{want}' was expected"),
            ));
        }
    }
    Ok(bins.len())
}

fn parse_stat(field: &str, lineno: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::format("stats csv", format!("line {lineno}: bad number '{field}'")))?;
    if !v.is_finite() {
        return Err(Error::format(
            "stats csv",
            format!("line {lineno}: non-finite value '{field}'"),
        ));
    }
    Ok(v)
}

const BAR_WIDTH: usize = 3;
const BAR_GAP: usize = 1;
const IMAGE_HEIGHT: usize = 48;
const INTERIOR_COLOR: (u8, u8, u8) = (70, 120, 200);
const EDGE_COLOR: (u8, u8, u8) = (200, 80, 60);
const BACKGROUND: (u8, u8, u8) = (245, 245, 245);

/// Renders one aggregated step as a plain-text PPM (`P3`) bar chart.
///
/// Bars run left to right as underflow, interior bins, overflow; the two
/// out-of-range bars use a warning tint. Heights are normalized to the
/// row's largest count, with integer arithmetic only, so the output is
/// byte-deterministic.
pub fn render_histogram_image(row: &StatsRow) -> String {
    let mut counts: Vec<(u64, bool)> = Vec::with_capacity(row.interior.len() + 2);
    counts.push((row.underflow, true));
    counts.extend(row.interior.iter().map(|c| (*c, false)));
    counts.push((row.overflow, true));

    let cell = BAR_WIDTH + BAR_GAP;
    let width = counts.len() * cell + BAR_GAP;
    let max = counts.iter().map(|(c, _)| *c).max().unwrap_or(0).max(1);

    let mut out = String::with_capacity(width * IMAGE_HEIGHT * 12);
    let _ = write!(out, "P3\n{width} {IMAGE_HEIGHT}\n255\n");
    for y in 0..IMAGE_HEIGHT {
        for x in 0..width {
            let idx = x / cell;
            let offset = x % cell;
            let (r, g, b) = if offset < BAR_GAP || idx >= counts.len() {
                BACKGROUND
            } else {
                let (count, edge) = counts[idx];
                let bar = (count * IMAGE_HEIGHT as u64 / max) as usize;
                if IMAGE_HEIGHT - y <= bar {
                    if edge {
                        EDGE_COLOR
                    } else {
                        INTERIOR_COLOR
                    }
                } else {
                    BACKGROUND
                }
            };
            let _ = writeln!(out, "{r} {g} {b}");
        }
    }
    out
}

/// Mean log-density of `samples` under the model's clean conditional
/// mixture: how strongly the produced grids resemble the conditioned class.
pub fn prompt_alignment_score(
    model: &GaussianMixtureModel,
    cond: &Condition,
    samples: &[LatentGrid],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::param("need at least one sample to score"));
    }
    let mut total = 0.0;
    for s in samples {
        total += model.log_density(s, cond)?;
    }
    Ok(total / samples.len() as f64)
}

/// Negated mean per-entry squared distance from each sample to its nearest
/// reference. Zero when every sample sits exactly on a reference; more
/// negative the further the samples drift from the subject.
pub fn identity_score(references: &[LatentGrid], samples: &[LatentGrid]) -> Result<f64> {
    if references.is_empty() || samples.is_empty() {
        return Err(Error::param(
            "identity score needs at least one reference and one sample",
        ));
    }
    let shape = references[0].shape();
    let mut total = 0.0;
    for s in samples {
        let mut best = f64::INFINITY;
        for r in references {
            if r.shape() != shape || s.shape() != shape {
                return Err(Error::ShapeMismatch {
                    left: shape,
                    right: if r.shape() != shape { r.shape() } else { s.shape() },
                });
            }
            let sq: f64 = s
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(sq / shape.len() as f64);
        }
        total += best;
    }
    Ok(-(total / samples.len() as f64))
}
