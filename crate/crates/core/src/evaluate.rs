//! Decoding queries through a model and scoring reconstructions.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::clustering::{assign, LeafId};
use crate::data::{write_mcds, Dataset};
use crate::error::{Error, Result};
use crate::model::predict;
use crate::numeric::DenseMatrix;
use crate::store::EncodedModel;

/// PSNR reported when the reconstruction is exact.
pub const PSNR_CAP: f64 = 99.99;

const DECODE_CHUNK: usize = 4096;

/// Predictions for a batch of queries, `queries x M`, original units.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub values: Vec<f32>,
    pub variable_count: usize,
    /// Leaf each query was routed to.
    pub leaves: Vec<LeafId>,
    /// Queries outside the training bounds; their coordinates were clamped.
    pub out_of_bounds: Vec<bool>,
}

impl Decoded {
    pub fn row(&self, q: usize) -> &[f32] {
        &self.values[q * self.variable_count..(q + 1) * self.variable_count]
    }

    pub fn out_of_bounds_count(&self) -> usize {
        self.out_of_bounds.iter().filter(|&&b| b).count()
    }
}

/// Decodes `(x, y, z, t)` queries given in original units. Each query is
/// normalized, routed to its leaf, and run through that leaf's network.
/// Results do not depend on how queries are batched.
pub fn decode(model: &EncodedModel, queries: &[[f64; 4]]) -> Result<Decoded> {
    let m = model.network.num_variables;
    let norm = &model.normalizer;
    if let Some(i) = queries.iter().position(|q| !q.iter().all(|v| v.is_finite())) {
        return Err(Error::format("query", format!("query {i} has a non-finite coordinate")));
    }
    let mut inputs = Vec::with_capacity(queries.len());
    let mut leaves = Vec::with_capacity(queries.len());
    let mut out_of_bounds = Vec::with_capacity(queries.len());
    for q in queries {
        let p = norm.normalize_point([q[0], q[1], q[2]]);
        let t = norm.normalize_time(q[3]);
        let clamped = [p[0], p[1], p[2], t].map(|v| v.clamp(-1.0, 1.0));
        leaves.push(assign(&model.partition, &[clamped[0], clamped[1], clamped[2]]));
        out_of_bounds.push(norm.out_of_bounds(*q));
        inputs.push(clamped);
    }

    let index: HashMap<LeafId, usize> = model.leaves.iter().enumerate().map(|(i, l)| (l.leaf_id, i)).collect();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); model.leaves.len()];
    for (q, leaf) in leaves.iter().enumerate() {
        let slot = index
            .get(leaf)
            .ok_or_else(|| Error::format("model", format!("query routed to leaf {leaf} without a network")))?;
        groups[*slot].push(q);
    }

    let jobs: Vec<(usize, &[usize])> = groups
        .iter()
        .enumerate()
        .flat_map(|(slot, qs)| qs.chunks(DECODE_CHUNK).map(move |c| (slot, c)))
        .collect();
    let outputs: Vec<Result<Vec<f32>>> = jobs
        .par_iter()
        .map(|&(slot, qs)| {
            let flat: Vec<f32> = qs.iter().flat_map(|&q| inputs[q]).collect();
            let x = DenseMatrix::from_vec(qs.len(), 4, flat)?;
            Ok(predict(&model.leaves[slot].params, &x)?.into_vec())
        })
        .collect();

    let mut values = vec![0.0f32; queries.len() * m];
    for ((_, qs), out) in jobs.iter().zip(outputs) {
        let out = out?;
        for (row, &q) in out.chunks_exact(m).zip(qs.iter()) {
            for (j, &u) in row.iter().enumerate() {
                values[q * m + j] = norm.values[j].denormalize(u as f64) as f32;
            }
        }
    }
    Ok(Decoded {
        values,
        variable_count: m,
        leaves,
        out_of_bounds,
    })
}

/// Decodes every `(point, timestep)` record of `dataset`, `[t][n][m]` order.
pub fn decode_dataset(model: &EncodedModel, dataset: &Dataset) -> Result<Decoded> {
    let queries: Vec<[f64; 4]> = dataset
        .times
        .iter()
        .flat_map(|&t| {
            dataset
                .coords
                .iter()
                .map(move |p| [p[0] as f64, p[1] as f64, p[2] as f64, t as f64])
        })
        .collect();
    decode(model, &queries)
}

/// Why a metric value is not an ordinary finite estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricFlag {
    /// Zero error; PSNR capped at [`PSNR_CAP`].
    ExactReconstruction,
    /// Ground-truth range is zero; a unit range was substituted.
    DegenerateRange,
    /// Ground truth is constant; R² is undefined (reported as NaN).
    ConstantTruth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub flag: Option<MetricFlag>,
}

impl Metric {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }
}

fn mse(gt: &[f32], pred: &[f32]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::Shape {
            op: "metric",
            left_name: "ground truth",
            left: (gt.len(), 1),
            right_name: "prediction",
            right: (pred.len(), 1),
        });
    }
    if gt.is_empty() {
        return Err(Error::Config("metric over zero values".into()));
    }
    let sum: f64 = gt
        .iter()
        .zip(pred)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / gt.len() as f64)
}

fn effective_range(range: f64) -> (f64, Option<MetricFlag>) {
    if range > 0.0 {
        (range, None)
    } else {
        (1.0, Some(MetricFlag::DegenerateRange))
    }
}

/// `10 log10(range^2 / MSE)`.
pub fn psnr(gt: &[f32], pred: &[f32], range: f64) -> Result<Metric> {
    let err = mse(gt, pred)?;
    let (range, flag) = effective_range(range);
    if err == 0.0 {
        return Ok(Metric {
            value: PSNR_CAP,
            flag: Some(MetricFlag::ExactReconstruction),
        });
    }
    Ok(Metric {
        value: 10.0 * (range * range / err).log10(),
        flag,
    })
}

/// `sqrt(MSE) / range`.
pub fn nrmse(gt: &[f32], pred: &[f32], range: f64) -> Result<Metric> {
    let err = mse(gt, pred)?;
    let (range, flag) = effective_range(range);
    Ok(Metric {
        value: err.sqrt() / range,
        flag,
    })
}

/// `1 - SS_res / SS_tot`; may be negative.
pub fn r_squared(gt: &[f32], pred: &[f32]) -> Result<Metric> {
    mse(gt, pred)?;
    let n = gt.len() as f64;
    let mean = gt.iter().map(|&v| v as f64).sum::<f64>() / n;
    let ss_tot: f64 = gt.iter().map(|&v| (v as f64 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(Metric {
            value: f64::NAN,
            flag: Some(MetricFlag::ConstantTruth),
        });
    }
    let ss_res: f64 = gt.iter().zip(pred).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(Metric::plain(1.0 - ss_res / ss_tot))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub variable: usize,
    pub timestep: usize,
    pub psnr: Metric,
    pub nrmse: Metric,
    pub r_squared: Metric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub variable_names: Vec<String>,
    pub times: Vec<f32>,
    /// One entry per (variable, timestep), variable-major.
    pub entries: Vec<MetricEntry>,
    /// Unweighted means over all entries (R² over defined entries only).
    pub mean_psnr: f64,
    pub mean_nrmse: f64,
    pub mean_r_squared: f64,
    /// MSE in the model's normalized value space, averaged over variables.
    pub normalized_mse: f64,
    pub point_count: usize,
    pub out_of_bounds: usize,
}

/// Scores `model` on every record of `dataset`. Ranges are each variable's
/// ground-truth max minus min over all timesteps.
pub fn evaluate(model: &EncodedModel, dataset: &Dataset) -> Result<(MetricReport, Decoded)> {
    model.check_dataset(dataset)?;
    let decoded = decode_dataset(model, dataset)?;
    let report = score(model, dataset, &decoded)?;
    Ok((report, decoded))
}

/// Builds the metric report for predictions in `[t][n][m]` order.
pub fn score(model: &EncodedModel, dataset: &Dataset, decoded: &Decoded) -> Result<MetricReport> {
    let (n, t_count, m) = (dataset.point_count(), dataset.timestep_count(), dataset.variable_count());
    if decoded.values.len() != dataset.values.len() {
        return Err(Error::Shape {
            op: "score",
            left_name: "predictions",
            left: (decoded.values.len() / m.max(1), m),
            right_name: "records",
            right: (n * t_count, m),
        });
    }
    let mut entries = Vec::with_capacity(m * t_count);
    let mut norm_sums = vec![0.0f64; m];
    for var in 0..m {
        let (lo, hi) = dataset.value_range(var);
        let map = &model.normalizer.values[var];
        for t in 0..t_count {
            let idx = |p: usize| dataset.value_index(t, p, var);
            let gt: Vec<f32> = (0..n).map(|p| dataset.values[idx(p)]).collect();
            let pred: Vec<f32> = (0..n).map(|p| decoded.values[idx(p)]).collect();
            for (&g, &p) in gt.iter().zip(&pred) {
                let d = map.normalize(g as f64) - map.normalize(p as f64);
                norm_sums[var] += d * d;
            }
            entries.push(MetricEntry {
                variable: var,
                timestep: t,
                psnr: psnr(&gt, &pred, hi - lo)?,
                nrmse: nrmse(&gt, &pred, hi - lo)?,
                r_squared: r_squared(&gt, &pred)?,
            });
        }
    }
    let mean = |f: &dyn Fn(&MetricEntry) -> f64| {
        let vals: Vec<f64> = entries.iter().map(f).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let records = (n * t_count) as f64;
    Ok(MetricReport {
        variable_names: dataset.variable_names.clone(),
        times: dataset.times.clone(),
        mean_psnr: mean(&|e| e.psnr.value),
        mean_nrmse: mean(&|e| e.nrmse.value),
        mean_r_squared: mean(&|e| e.r_squared.value),
        normalized_mse: norm_sums.iter().map(|s| s / records).sum::<f64>() / m as f64,
        entries,
        point_count: n,
        out_of_bounds: decoded.out_of_bounds_count(),
    })
}

fn flag_note(metric: &Metric) -> &'static str {
    match metric.flag {
        None => "",
        Some(MetricFlag::ExactReconstruction) => " (exact)",
        Some(MetricFlag::DegenerateRange) => " (constant range)",
        Some(MetricFlag::ConstantTruth) => " (undefined)",
    }
}

impl MetricReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12} {:>10} {:>12} {:>10}", "variable", "t", "PSNR dB", "NRMSE", "R2");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>10.4} {:>12.6} {:>10.6}{}{}{}",
                self.variable_names[e.variable],
                self.times[e.timestep],
                e.psnr.value,
                e.nrmse.value,
                e.r_squared.value,
                flag_note(&e.psnr),
                flag_note(&e.nrmse),
                flag_note(&e.r_squared)
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>10.4} {:>12.6} {:>10.6}",
            "mean", "", self.mean_psnr, self.mean_nrmse, self.mean_r_squared
        );
        let _ = writeln!(s, "normalized MSE {:.6e} over {} points", self.normalized_mse, self.point_count);
        s
    }

    /// `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "points = {}", self.point_count);
        let _ = writeln!(s, "timesteps = {}", self.times.len());
        let _ = writeln!(s, "variables = {}", self.variable_names.join(","));
        let _ = writeln!(s, "mean_psnr = {}", self.mean_psnr);
        let _ = writeln!(s, "mean_nrmse = {}", self.mean_nrmse);
        let _ = writeln!(s, "mean_r_squared = {}", self.mean_r_squared);
        let _ = writeln!(s, "normalized_mse = {}", self.normalized_mse);
        let _ = writeln!(s, "out_of_bounds = {}", self.out_of_bounds);
        for e in &self.entries {
            let key = format!("{}.t{}", self.variable_names[e.variable], e.timestep);
            let _ = writeln!(s, "{key}.psnr = {}", e.psnr.value);
            let _ = writeln!(s, "{key}.nrmse = {}", e.nrmse.value);
            let _ = writeln!(s, "{key}.r_squared = {}", e.r_squared.value);
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// `|ground truth - prediction|` per record, `[t][n][m]`, original units.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub abs_errors: Vec<f32>,
}

impl ErrorMap {
    pub fn new(dataset: &Dataset, decoded: &Decoded) -> Result<Self> {
        if decoded.values.len() != dataset.values.len() {
            return Err(Error::Shape {
                op: "ErrorMap::new",
                left_name: "predictions",
                left: (decoded.values.len(), 1),
                right_name: "values",
                right: (dataset.values.len(), 1),
            });
        }
        Ok(Self {
            abs_errors: dataset
                .values
                .iter()
                .zip(&decoded.values)
                .map(|(&g, &p)| (g as f64 - p as f64).abs() as f32)
                .collect(),
        })
    }

    pub fn max(&self) -> f32 {
        self.abs_errors.iter().copied().fold(0.0, f32::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorMapFormat {
    Csv,
    McdsDelta,
}

impl FromStr for ErrorMapFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "mcds-delta" => Ok(Self::McdsDelta),
            other => Err(Error::Config(format!("unknown error map format '{other}' (csv or mcds-delta)"))),
        }
    }
}

/// Writes per-record absolute errors. CSV rows are
/// `x,y,z,t,variable,abs_error`; `mcds-delta` is an MCDS file whose values are
/// the errors.
pub fn export_error_map(
    dataset: &Dataset,
    model: &EncodedModel,
    path: impl AsRef<Path>,
    format: ErrorMapFormat,
) -> Result<ErrorMap> {
    model.check_dataset(dataset)?;
    let decoded = decode_dataset(model, dataset)?;
    let map = ErrorMap::new(dataset, &decoded)?;
    write_error_map(dataset, &map, path, format)?;
    Ok(map)
}

pub fn write_error_map(dataset: &Dataset, map: &ErrorMap, path: impl AsRef<Path>, format: ErrorMapFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ErrorMapFormat::Csv => {
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
            let csv_err = |e: csv::Error| Error::format("error map", e.to_string());
            w.write_record(["x", "y", "z", "t", "variable", "abs_error"]).map_err(csv_err)?;
            for (t, &time) in dataset.times.iter().enumerate() {
                for (n, p) in dataset.coords.iter().enumerate() {
                    for (m, name) in dataset.variable_names.iter().enumerate() {
                        let e = map.abs_errors[dataset.value_index(t, n, m)];
                        w.write_record([
                            p[0].to_string(),
                            p[1].to_string(),
                            p[2].to_string(),
                            time.to_string(),
                            name.clone(),
                            e.to_string(),
                        ])
                        .map_err(csv_err)?;
                    }
                }
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        ErrorMapFormat::McdsDelta => {
            let delta = Dataset::new(
                dataset.variable_names.clone(),
                dataset.coords.clone(),
                dataset.times.clone(),
                map.abs_errors.clone(),
            )?;
            write_mcds(&delta, path).map(|_| ())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_form() {
        let gt = vec![0.0f32; 100];
        let pred = vec![0.01f32; 100];
        let p = psnr(&gt, &pred, 1.0).unwrap();
        assert!((p.value - 40.0).abs() < 1e-4, "{}", p.value);
        assert_eq!(p.flag, None);
    }

    #[test]
    fn exact_reconstruction_is_capped() {
        let gt = vec![1.0f32, 2.0, 3.0];
        let p = psnr(&gt, &gt, 2.0).unwrap();
        assert_eq!(p.value, PSNR_CAP);
        assert_eq!(p.flag, Some(MetricFlag::ExactReconstruction));
        assert_eq!(nrmse(&gt, &gt, 2.0).unwrap().value, 0.0);
        assert_eq!(r_squared(&gt, &gt).unwrap().value, 1.0);
    }

    #[test]
    fn nrmse_closed_form() {
        let gt = vec![0.0f32; 4];
        let pred = vec![0.01f32; 4];
        assert!((nrmse(&gt, &pred, 1.0).unwrap().value - 0.01).abs() < 1e-9);
    }

    #[test]
    fn mean_predictor_scores_zero() {
        let gt = vec![1.0f32, 2.0, 3.0, 6.0];
        let pred = vec![3.0f32; 4];
        assert_eq!(r_squared(&gt, &pred).unwrap().value, 0.0);
        let worse = vec![10.0f32; 4];
        assert!(r_squared(&gt, &worse).unwrap().value < 0.0);
    }

    #[test]
    fn constant_truth_is_flagged() {
        let gt = vec![2.0f32; 5];
        let r = r_squared(&gt, &[1.0; 5]).unwrap();
        assert!(r.value.is_nan());
        assert_eq!(r.flag, Some(MetricFlag::ConstantTruth));
        assert_eq!(psnr(&gt, &[1.0; 5], 0.0).unwrap().flag, Some(MetricFlag::DegenerateRange));
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(psnr(&[1.0], &[1.0, 2.0], 1.0), Err(Error::Shape { .. })));
        assert!(matches!(r_squared(&[1.0], &[]), Err(Error::Shape { .. })));
    }

    #[test]
    fn parse_error_map_format() {
        assert_eq!("csv".parse::<ErrorMapFormat>().unwrap(), ErrorMapFormat::Csv);
        assert_eq!("mcds-delta".parse::<ErrorMapFormat>().unwrap(), ErrorMapFormat::McdsDelta);
        assert!("png".parse::<ErrorMapFormat>().is_err());
    }
}
