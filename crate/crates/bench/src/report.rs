//! CSV rows, aggregates and PGM images.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// One `(dataset, strategy, batch size, seed)` measurement. Columns appear
/// in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub strategy: String,
    pub batch_size: usize,
    pub seed: u64,
    /// Mean lockstep passes per batch.
    pub arm_calls: f64,
    pub call_percentage: f64,
    /// Mean seconds per batch.
    pub wall_time: f64,
    /// Whether every batch satisfied the break-even inequality.
    pub breakeven: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub strategy: String,
    pub batch_size: usize,
    pub n: usize,
    pub mean_call_percentage: f64,
    pub std_call_percentage: f64,
    pub mean_arm_calls: f64,
    pub mean_wall_time: f64,
    /// `mean_wall_time` over the baseline's for the same dataset and batch
    /// size; empty when no baseline was run.
    pub wall_time_ratio: Option<f64>,
}

/// One `(condition, seed)` ablation measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub seed: u64,
    pub arm_calls: f64,
    pub call_percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub condition: String,
    pub n: usize,
    pub mean_call_percentage: f64,
    pub std_call_percentage: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Bessel-corrected sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups rows by `(dataset, strategy, batch size)` in first-seen order.
pub fn aggregate(rows: &[BenchRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.strategy.clone(), r.batch_size);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out: Vec<AggregateRow> = order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let pct: Vec<f64> = g.iter().map(|r| r.call_percentage).collect();
            let calls: Vec<f64> = g.iter().map(|r| r.arm_calls).collect();
            let wall: Vec<f64> = g.iter().map(|r| r.wall_time).collect();
            AggregateRow {
                dataset: key.0,
                strategy: key.1,
                batch_size: key.2,
                n: g.len(),
                mean_call_percentage: mean(&pct),
                std_call_percentage: std_dev(&pct),
                mean_arm_calls: mean(&calls),
                mean_wall_time: mean(&wall),
                wall_time_ratio: None,
            }
        })
        .collect();
    let baselines: Vec<(String, usize, f64)> = out
        .iter()
        .filter(|a| a.strategy == "baseline")
        .map(|a| (a.dataset.clone(), a.batch_size, a.mean_wall_time))
        .collect();
    for a in &mut out {
        a.wall_time_ratio = baselines
            .iter()
            .find(|(ds, bs, _)| *ds == a.dataset && *bs == a.batch_size)
            .map(|(_, _, w)| a.mean_wall_time / w);
    }
    out
}

pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.condition) {
            order.push(r.condition.clone());
        }
    }
    order
        .into_iter()
        .map(|c| {
            let pct: Vec<f64> = rows.iter().filter(|r| r.condition == c).map(|r| r.call_percentage).collect();
            AblationSummary {
                condition: c,
                n: pct.len(),
                mean_call_percentage: mean(&pct),
                std_call_percentage: std_dev(&pct),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(w: impl Write, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(r: impl Read) -> Result<Vec<T>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(Into::into)
}

pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(f, rows)
}

/// Training-curve row: `step,train_bpd,val_bpd,forecast_loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub train_bpd: f64,
    pub val_bpd: f64,
    pub forecast_loss: Option<f64>,
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm(w: &mut impl Write, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    anyhow::ensure!(pixels.len() == width * height, "PGM needs {} pixels, got {}", width * height, pixels.len());
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Tokens spread over 0..=255.
pub fn sample_pixels(tokens: &[usize], categories: usize) -> Vec<u8> {
    let top = categories.saturating_sub(1).max(1);
    tokens.iter().map(|&t| (t * 255 / top) as u8).collect()
}

/// Mistake counts scaled so the largest maps to 255; all zeros stay black.
pub fn mistake_pixels(mistakes: &[u32]) -> Vec<u8> {
    let max = mistakes.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0; mistakes.len()];
    }
    mistakes
        .iter()
        .map(|&m| (f64::from(m) * 255.0 / f64::from(max)).round() as u8)
        .collect()
}

/// Convergence iterations on a log scale: iteration 1 is black, the
/// largest iteration is white.
pub fn convergence_pixels(convergence: &[u32]) -> Vec<u8> {
    let max = convergence.iter().copied().max().unwrap_or(1).max(1);
    if max == 1 {
        return vec![0; convergence.len()];
    }
    let top = f64::from(max).ln();
    convergence
        .iter()
        .map(|&c| (f64::from(c.max(1)).ln() / top * 255.0).round() as u8)
        .collect()
}

pub const REFERENCE_CALLS: [(&str, f64); 4] = [
    ("baseline", 100.0),
    ("zeros", 14.5),
    ("predict-last", 7.8),
    ("fpi", 3.3),
];

pub const REFERENCE_ABLATION: [(&str, f64); 4] = [
    ("fpi", 25.9),
    ("fpi-no-reparam", 97.2),
    ("learned", 50.9),
    ("learned-no-sharing", 67.1),
];

/// Reference values from the original large-scale experiments, printed
/// beside desk measurements.
pub fn footer(table: &[(&str, f64)], what: &str) -> String {
    let mut s = format!(
        "reference ({what}; published large-model values, NOT comparable to desk-scale numbers above):\n"
    );
    for (name, v) in table {
        s.push_str(&format!("  {name:<20} {v:>6.1}%\n"));
    }
    s
}
