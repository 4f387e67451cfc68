//! Aggregation of per-seed run logs into plot-ready mean/std tables.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AggRow {
    pub method: String,
    pub step: u64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// File stem with a trailing `_seed<digits>` removed.
pub fn group_key(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.rfind("_seed") {
        Some(i) if stem.len() > i + 5 && stem[i + 5..].bytes().all(|b| b.is_ascii_digit()) => stem[..i].to_string(),
        _ => stem,
    }
}

/// Metric column used when none is requested.
pub fn default_metric(headers: &csv::StringRecord) -> Option<&'static str> {
    ["train_accuracy", "return"].into_iter().find(|m| headers.iter().any(|h| h == *m))
}

/// Reads `(step, metric)` pairs; with `bin`, steps are bucketed to
/// `ceil(step / bin)·bin` and averaged within each bucket.
fn read_series(path: &Path, metric: Option<&str>, bin: Option<u64>) -> Result<(String, BTreeMap<u64, f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    let metric = match metric {
        Some(m) => m.to_string(),
        None => default_metric(&headers)
            .ok_or_else(|| Error::Validation { file: path.to_path_buf(), msg: "no known metric column".into() })?
            .to_string(),
    };
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Validation {
            file: path.to_path_buf(),
            msg: format!("missing column `{name}`"),
        })
    };
    let (si, mi) = (col("global_step")?, col(&metric)?);
    let mut buckets: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Validation {
            file: path.to_path_buf(),
            msg: format!("bad {what} on line {}", rec.position().map_or(0, |p| p.line())),
        };
        let step: u64 = rec[si].parse().map_err(|_| parse_err("step"))?;
        let v: f64 = rec[mi].parse().map_err(|_| parse_err(&metric))?;
        let key = match bin {
            Some(b) if b > 0 => step.div_ceil(b) * b,
            _ => step,
        };
        let e = buckets.entry(key).or_default();
        e.0 += v;
        e.1 += 1;
    }
    Ok((metric, buckets.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
}

/// Mean and sample standard deviation across the seeds of each method at
/// each step. Every file in a group must have the same step grid.
pub fn plot_data(paths: &[PathBuf], metric: Option<&str>, bin: Option<u64>) -> Result<Vec<AggRow>> {
    let mut groups: BTreeMap<String, Vec<(PathBuf, BTreeMap<u64, f64>)>> = BTreeMap::new();
    for p in paths {
        let (_, series) = read_series(p, metric, bin)?;
        groups.entry(group_key(p)).or_default().push((p.clone(), series));
    }
    let mut misaligned = Vec::new();
    for members in groups.values() {
        let grid: Vec<u64> = members[0].1.keys().copied().collect();
        let bad: Vec<String> = members[1..]
            .iter()
            .filter(|(_, s)| !s.keys().copied().eq(grid.iter().copied()))
            .map(|(p, _)| p.display().to_string())
            .collect();
        if !bad.is_empty() {
            misaligned.push(members[0].0.display().to_string());
            misaligned.extend(bad);
        }
    }
    if !misaligned.is_empty() {
        return Err(Error::MisalignedLogs(misaligned));
    }
    let mut out = Vec::new();
    for (method, members) in &groups {
        for step in members[0].1.keys() {
            let xs: Vec<f64> = members.iter().map(|(_, s)| s[step]).collect();
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            out.push(AggRow { method: method.clone(), step: *step, mean, std, n });
        }
    }
    Ok(out)
}

pub fn write_agg_csv<W: Write>(rows: &[AggRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "step", "mean", "std", "n"])?;
    for r in rows {
        out.write_record([r.method.clone(), r.step.to_string(), r.mean.to_string(), r.std.to_string(), r.n.to_string()])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}
