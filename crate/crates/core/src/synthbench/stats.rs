use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Pearson correlation of two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(
            "pearson",
            format!("length mismatch: {} vs {}", x.len(), y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson", "need at least two samples"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson", "zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Spatial query count `p`; rate `-ln p`.
    Spatial,
    /// Temporal query count `t`; rate `-ln t`.
    Temporal,
    /// Segment count `n`; the raw count is the rate.
    Segments,
}

impl SweepAxis {
    pub fn rate(self, value: f64) -> f64 {
        match self {
            SweepAxis::Spatial | SweepAxis::Temporal => -value.ln(),
            SweepAxis::Segments => value,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Spatial => "spatial",
            SweepAxis::Temporal => "temporal",
            SweepAxis::Segments => "segments",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "spatial" | "p" => Ok(SweepAxis::Spatial),
            "temporal" | "t" => Ok(SweepAxis::Temporal),
            "segments" | "n" => Ok(SweepAxis::Segments),
            other => Err(format!("unknown sweep axis `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub rate: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Pearson correlation between rate and metric.
    pub r: f64,
}

/// Evaluate `evaluator` at each configuration and correlate the metric
/// with the compression rate of the axis.
pub fn compression_sweep<F>(
    axis: SweepAxis,
    values: &[f64],
    mut evaluator: F,
) -> Result<SweepResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if values.len() < 2 {
        return Err(Error::invalid(
            "compression_sweep",
            "need at least two values",
        ));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        if axis != SweepAxis::Segments && (value.is_nan() || value <= 0.0) {
            return Err(Error::invalid(
                "compression_sweep",
                format!("{axis} query count must be positive, got {value}"),
            ));
        }
        let metric = evaluator(value).map_err(|e| {
            Error::invalid(
                "compression_sweep",
                format!("evaluator failed at {axis}={value}: {e}"),
            )
        })?;
        if !metric.is_finite() {
            return Err(Error::invalid(
                "compression_sweep",
                format!("non-finite metric at {axis}={value}"),
            ));
        }
        rows.push(SweepRow {
            value,
            rate: axis.rate(value),
            metric,
        });
    }
    let rates: Vec<f64> = rows.iter().map(|r| r.rate).collect();
    let metrics: Vec<f64> = rows.iter().map(|r| r.metric).collect();
    let r = pearson(&rates, &metrics)?;
    Ok(SweepResult { axis, rows, r })
}

/// A published accuracy column: configuration values and the metric
/// measured at each.
#[derive(Debug, Clone, Copy)]
pub struct MetricTable {
    pub name: &'static str,
    pub axis: SweepAxis,
    pub values: &'static [f64],
    pub metrics: &'static [f64],
}

impl MetricTable {
    pub fn sweep(&self) -> Result<SweepResult> {
        let mut it = self.metrics.iter();
        compression_sweep(self.axis, self.values, |_| {
            it.next()
                .copied()
                .ok_or_else(|| Error::invalid("canned evaluator", "ran out of values"))
        })
    }
}

/// EgoSchema accuracy by segment count at 128 frames, default setting.
pub const SEGMENTS_DEFAULT: MetricTable = MetricTable {
    name: "segments_default",
    axis: SweepAxis::Segments,
    values: &[1.0, 2.0, 4.0, 8.0],
    metrics: &[40.17, 41.66, 42.18, 50.41],
};

/// Same sweep in the needle-in-a-haystack setting.
pub const SEGMENTS_NEEDLE: MetricTable = MetricTable {
    name: "segments_needle",
    axis: SweepAxis::Segments,
    values: &[1.0, 2.0, 4.0, 8.0],
    metrics: &[32.98, 36.21, 38.02, 45.08],
};

/// Accuracy by spatial query count, 32 frames in one segment.
pub const SPATIAL_ONE_SEGMENT: MetricTable = MetricTable {
    name: "spatial_one_segment",
    axis: SweepAxis::Spatial,
    values: &[576.0, 288.0, 144.0, 64.0, 32.0, 16.0, 8.0, 4.0],
    metrics: &[34.55, 44.13, 41.66, 37.39, 45.16, 43.85, 38.50, 43.91],
};

/// Accuracy by temporal query count, 128 frames in one segment.
pub const TEMPORAL_FULL_SEGMENT: MetricTable = MetricTable {
    name: "temporal_full_segment",
    axis: SweepAxis::Temporal,
    values: &[128.0, 64.0, 32.0, 16.0, 8.0, 4.0],
    metrics: &[34.25, 39.22, 35.58, 33.39, 45.28, 37.05],
};

pub const REFERENCE_TABLES: [MetricTable; 4] = [
    SEGMENTS_DEFAULT,
    SEGMENTS_NEEDLE,
    SPATIAL_ONE_SEGMENT,
    TEMPORAL_FULL_SEGMENT,
];

/// Parse a two-column CSV (`<axis>,<metric>` header, then one row per
/// configuration). The axis is taken from the first header cell unless
/// `axis` overrides it.
pub fn parse_metric_csv(
    text: &str,
    axis: Option<SweepAxis>,
) -> Result<(SweepAxis, Vec<f64>, Vec<f64>)> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::invalid("metric table", "empty table"))?;
    let first = header.split(',').next().unwrap_or_default();
    let axis = match axis {
        Some(a) => a,
        None => first
            .parse()
            .map_err(|e: String| Error::invalid("metric table", e))?,
    };
    let (mut values, mut metrics) = (Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(Error::invalid(
                "metric table",
                format!("row {} has {} cells, expected 2", i + 1, cells.len()),
            ));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|_| {
                Error::invalid("metric table", format!("row {}: bad number `{s}`", i + 1))
            })
        };
        values.push(parse(cells[0])?);
        metrics.push(parse(cells[1])?);
    }
    Ok((axis, values, metrics))
}
