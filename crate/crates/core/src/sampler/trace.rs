//! Per-step sampling traces and their CSV form.
//!
//! Every reverse step emits one [`StepRecord`] with the `cp` statistics of
//! that step's guidance decomposition, the norms of the guidance directions,
//! and a histogram of the `cp` field. The CSV layout is pinned: a header
//!
//! ```text
//! t,cp_mean,cp_std,g_text_norm,g_par_norm,g_perp_norm,bin_0,...,bin_{B-1}
//! ```
//!
//! followed by one row per step in sampling order (`t` strictly decreasing).
//! The first and last bins are the underflow and overflow counts of the
//! histogram range. Floats are written in Rust's shortest round-trippable
//! form, so parsing a written trace reproduces it exactly.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::LatentGrid;

const FIXED_COLUMNS: [&str; 6] = [
    "t",
    "cp_mean",
    "cp_std",
    "g_text_norm",
    "g_par_norm",
    "g_perp_norm",
];

/// Diagnostics recorded for one reverse step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Timestep this step consumed (the step maps `x_t` to `x_{t-1}`).
    pub t: usize,
    /// Population mean of the `cp` field.
    pub cp_mean: f64,
    /// Population deviation of the `cp` field.
    pub cp_std: f64,
    /// Norm of the text-guidance direction.
    pub g_text_norm: f64,
    /// Norm of the parallel part of the consistency direction.
    pub g_par_norm: f64,
    /// Norm of the orthogonal part of the consistency direction.
    pub g_perp_norm: f64,
    /// Histogram of `cp` values: underflow, interior bins, overflow.
    pub hist: Vec<u64>,
    /// Latent after this step, when snapshots were requested. Not part of
    /// the CSV form.
    pub latent: Option<LatentGrid>,
}

/// The full per-step record of one sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplerTrace {
    pub records: Vec<StepRecord>,
}

impl SamplerTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes the trace as CSV. All records must agree on the histogram
    /// width; an empty trace has no well-defined header and is rejected.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        let bins = self
            .records
            .first()
            .map(|r| r.hist.len())
            .ok_or_else(|| Error::param("cannot write an empty trace"))?;
        let mut header = FIXED_COLUMNS.join(",");
        for i in 0..bins {
            let _ = write!(header, ",bin_{i}");
        }
        writeln!(out, "{header}")?;
        for rec in &self.records {
            if rec.hist.len() != bins {
                return Err(Error::param(format!(
                    "record at t={} has {} histogram bins, expected {bins}",
                    rec.t,
                    rec.hist.len()
                )));
            }
            write!(
                out,
                "{},{},{},{},{},{}",
                rec.t, rec.cp_mean, rec.cp_std, rec.g_text_norm, rec.g_par_norm, rec.g_perp_norm
            )?;
            for c in &rec.hist {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv(input: &mut impl Read) -> Result<SamplerTrace> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        SamplerTrace::parse_csv(&text)
    }

    /// Parses CSV written by [`SamplerTrace::write_csv`].
    ///
    /// The header is matched exactly (fixed columns, then `bin_0..`), rows
    /// must carry the full column count with finite statistics, and `t` must
    /// be strictly decreasing. Latent snapshots are not part of the format,
    /// so parsed records carry `latent: None`.
    pub fn parse_csv(text: &str) -> Result<SamplerTrace> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("trace csv", "empty file"))?;
        let bins = parse_header(header)?;
        let columns = FIXED_COLUMNS.len() + bins;

        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns {
                return Err(Error::format(
                    "trace csv",
                    format!(
                        "line {lineno}: expected {columns} fields, found {}",
                        fields.len()
                    ),
                ));
            }
            let t: usize = fields[0].parse().map_err(|_| {
                Error::format("trace csv", format!("line {lineno}: bad timestep '{}'", fields[0]))
            })?;
            let mut floats = [0.0f64; 5];
            for (slot, field) in floats.iter_mut().zip(&fields[1..6]) {
                *slot = parse_float(field, lineno)?;
            }
            let mut hist = Vec::with_capacity(bins);
            for field in &fields[6..] {
                let count: u64 = field.parse().map_err(|_| {
                    Error::format("trace csv", format!("line {lineno}: bad count '{field}'"))
                })?;
                hist.push(count);
            }
            records.push(StepRecord {
                t,
                cp_mean: floats[0],
                cp_std: floats[1],
                g_text_norm: floats[2],
                g_par_norm: floats[3],
                g_perp_norm: floats[4],
                hist,
                latent: None,
            });
        }
        if records.is_empty() {
            return Err(Error::format("trace csv", "no data rows"));
        }
        for pair in records.windows(2) {
            if pair[1].t >= pair[0].t {
                return Err(Error::format(
                    "trace csv",
                    format!(
                        "timesteps must strictly decrease, got {} then {}",
                        pair[0].t, pair[1].t
                    ),
                ));
            }
        }
        Ok(SamplerTrace { records })
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<SamplerTrace> {
        let mut input = BufReader::new(File::open(path)?);
        SamplerTrace::read_csv(&mut input)
    }
}

/// Checks the header and returns the histogram width.
fn parse_header(header: &str) -> Result<usize> {
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() <= FIXED_COLUMNS.len() {
        return Err(Error::format(
            "trace csv",
            format!("header has {} columns, expected at least 7", cols.len()),
        ));
    }
    for (got, want) in cols.iter().zip(FIXED_COLUMNS) {
        if *got != want {
            return Err(Error::format(
                "trace csv",
                format!("header column '{got}' where '{want}' was expected"),
            ));
        }
    }
    for (i, got) in cols[FIXED_COLUMNS.len()..].iter().enumerate() {
        let want = format!("bin_{i}");
        if *got != want {
            return Err(Error::format(
                "trace csv",
                format!("header column '{got}' where '{want}' was expected"),
            ));
        }
    }
    Ok(cols.len() - FIXED_COLUMNS.len())
}

fn parse_float(field: &str, lineno: usize) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::format("trace csv", format!("line {lineno}: bad number '{field}'")))?;
    if !v.is_finite() {
        return Err(Error::format(
            "trace csv",
            format!("line {lineno}: non-finite value '{field}'"),
        ));
    }
    Ok(v)
}
