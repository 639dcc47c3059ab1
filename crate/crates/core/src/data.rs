//! Datasets: in-memory layout, normalization, MCDS and CSV ingestion, the
//! synthetic field generator, and raw-size accounting.
//!
//! Values are always indexed `[t][n][m]`: timestep, point, variable.
//!
//! MCDS layout (all little-endian):
//!
//! ```text
//! "MCINRDS1"                      8 bytes
//! N, T, M                         u32 each
//! M x (u32 byte length, UTF-8)    variable names
//! 3 x (f64 min, f64 max)          coordinate bounds, x then y then z
//! T x f32                         times
//! N x 3 x f32                     coordinates
//! T x N x M x f32                 values
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{fnv1a, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

pub const MCDS_MAGIC: &[u8; 8] = b"MCINRDS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub variable_names: Vec<String>,
    pub coords: Vec<[f32; 3]>,
    pub times: Vec<f32>,
    pub values: Vec<f32>,
    pub coord_bounds: [(f64, f64); 3],
}

impl Dataset {
    pub fn new(
        variable_names: Vec<String>,
        coords: Vec<[f32; 3]>,
        times: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let (n, t, m) = (coords.len(), times.len(), variable_names.len());
        if n == 0 || t == 0 || m == 0 {
            return Err(Error::format(
                "dataset",
                format!("point, timestep and variable counts must be >= 1 (got N={n}, T={t}, M={m})"),
            ));
        }
        if values.len() != n * t * m {
            return Err(Error::format(
                "dataset",
                format!("expected {} values for N={n}, T={t}, M={m}, got {}", n * t * m, values.len()),
            ));
        }
        if !coords.iter().flatten().chain(&times).chain(&values).all(|v| v.is_finite()) {
            return Err(Error::format("dataset", "non-finite coordinate, time or value"));
        }
        let coord_bounds = compute_bounds(&coords);
        Ok(Self {
            variable_names,
            coords,
            times,
            values,
            coord_bounds,
        })
    }

    pub fn point_count(&self) -> usize {
        self.coords.len()
    }

    pub fn timestep_count(&self) -> usize {
        self.times.len()
    }

    pub fn variable_count(&self) -> usize {
        self.variable_names.len()
    }

    #[inline]
    pub fn value_index(&self, t: usize, n: usize, m: usize) -> usize {
        (t * self.point_count() + n) * self.variable_count() + m
    }

    #[inline]
    pub fn value(&self, t: usize, n: usize, m: usize) -> f32 {
        self.values[self.value_index(t, n, m)]
    }

    /// `(min, max)` of one variable over all points and timesteps.
    pub fn value_range(&self, m: usize) -> (f64, f64) {
        let mvars = self.variable_count();
        self.values
            .iter()
            .skip(m)
            .step_by(mvars)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            })
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut w = ByteWriter::new();
        for (lo, hi) in self.coord_bounds {
            w.f64(lo);
            w.f64(hi);
        }
        Fingerprint {
            point_count: self.point_count() as u32,
            timestep_count: self.timestep_count() as u32,
            variable_count: self.variable_count() as u32,
            variable_names: self.variable_names.clone(),
            bounds_hash: fnv1a(w.as_slice()),
        }
    }
}

fn compute_bounds(coords: &[[f32; 3]]) -> [(f64, f64); 3] {
    let mut bounds = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for p in coords {
        for (b, &v) in bounds.iter_mut().zip(p) {
            b.0 = b.0.min(v as f64);
            b.1 = b.1.max(v as f64);
        }
    }
    bounds
}

/// Identifies the dataset a model was trained on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fingerprint {
    pub point_count: u32,
    pub timestep_count: u32,
    pub variable_count: u32,
    pub variable_names: Vec<String>,
    pub bounds_hash: u64,
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[N={} T={} M={} vars={} bounds={:016x}]",
            self.point_count,
            self.timestep_count,
            self.variable_count,
            self.variable_names.join(","),
            self.bounds_hash
        )
    }
}

/// Affine map of `[min, max]` onto `[-1, 1]`. A degenerate range maps to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub min: f64,
    pub max: f64,
}

impl AffineMap {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max > self.min)
    }

    #[inline]
    pub fn normalize(&self, v: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    #[inline]
    pub fn denormalize(&self, u: f64) -> f64 {
        if self.is_degenerate() {
            self.min
        } else {
            self.min + (u + 1.0) * 0.5 * (self.max - self.min)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub coords: [AffineMap; 3],
    pub time: AffineMap,
    pub values: Vec<AffineMap>,
}

impl Normalizer {
    pub fn fit(dataset: &Dataset) -> Self {
        let coords = dataset.coord_bounds.map(|(lo, hi)| AffineMap::new(lo, hi));
        let (tlo, thi) = dataset
            .times
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
                (lo.min(t as f64), hi.max(t as f64))
            });
        let values = (0..dataset.variable_count())
            .map(|m| {
                let (lo, hi) = dataset.value_range(m);
                AffineMap::new(lo, hi)
            })
            .collect();
        Self {
            coords,
            time: AffineMap::new(tlo, thi),
            values,
        }
    }

    pub fn normalize_point(&self, p: [f64; 3]) -> [f32; 3] {
        [0, 1, 2].map(|a| self.coords[a].normalize(p[a]) as f32)
    }

    pub fn normalize_time(&self, t: f64) -> f32 {
        self.time.normalize(t) as f32
    }

    /// True when an original-unit query falls outside the training bounds.
    pub fn out_of_bounds(&self, q: [f64; 4]) -> bool {
        let inside = |map: &AffineMap, v: f64| v >= map.min && v <= map.max;
        !(inside(&self.coords[0], q[0])
            && inside(&self.coords[1], q[1])
            && inside(&self.coords[2], q[2])
            && inside(&self.time, q[3]))
    }
}

/// Dataset mapped into network space; same `[t][n][m]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedData {
    pub coords: Vec<[f32; 3]>,
    pub times: Vec<f32>,
    pub values: Vec<f32>,
    pub variable_count: usize,
}

impl NormalizedData {
    pub fn point_count(&self) -> usize {
        self.coords.len()
    }

    pub fn timestep_count(&self) -> usize {
        self.times.len()
    }

    #[inline]
    pub fn targets(&self, t: usize, n: usize) -> &[f32] {
        let m = self.variable_count;
        let start = (t * self.point_count() + n) * m;
        &self.values[start..start + m]
    }

    /// Network inputs (`x, y, z, t` rows) and targets for a list of records.
    pub fn gather(&self, records: &[Record]) -> (DenseMatrix<f32>, DenseMatrix<f32>) {
        let m = self.variable_count;
        let mut coords = Vec::with_capacity(records.len() * 4);
        let mut targets = Vec::with_capacity(records.len() * m);
        for &Record { point, timestep } in records {
            let p = self.coords[point as usize];
            coords.extend_from_slice(&[p[0], p[1], p[2], self.times[timestep as usize]]);
            targets.extend_from_slice(self.targets(timestep as usize, point as usize));
        }
        (
            DenseMatrix::from_vec(records.len(), 4, coords).expect("4 coordinates per record"),
            DenseMatrix::from_vec(records.len(), m, targets).expect("M targets per record"),
        )
    }
}

/// One `(point, timestep)` sample carrying all variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Record {
    pub point: u32,
    pub timestep: u32,
}

/// Every timestep of every listed point, point-major.
pub fn records_for_points(points: &[usize], timesteps: usize) -> Vec<Record> {
    points
        .iter()
        .flat_map(|&p| {
            (0..timesteps).map(move |t| Record {
                point: p as u32,
                timestep: t as u32,
            })
        })
        .collect()
}

pub fn normalize(dataset: &Dataset) -> (NormalizedData, Normalizer) {
    let normalizer = Normalizer::fit(dataset);
    let coords = dataset
        .coords
        .iter()
        .map(|p| normalizer.normalize_point(p.map(f64::from)))
        .collect();
    let times = dataset
        .times
        .iter()
        .map(|&t| normalizer.normalize_time(t as f64))
        .collect();
    let m = dataset.variable_count();
    let values = dataset
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| normalizer.values[i % m].normalize(v as f64) as f32)
        .collect();
    (
        NormalizedData {
            coords,
            times,
            values,
            variable_count: m,
        },
        normalizer,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Native,
    Csv,
}

impl FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" | "mcds" => Ok(DataFormat::Native),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::Config(format!("unknown data format '{other}' (expected native or csv)"))),
        }
    }
}

impl DataFormat {
    /// Guesses from the file extension, defaulting to native.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Native,
        }
    }
}

pub fn read_dataset(path: impl AsRef<Path>, format: DataFormat) -> Result<Dataset> {
    let path = path.as_ref();
    match format {
        DataFormat::Native => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            from_mcds_bytes(&bytes)
        }
        DataFormat::Csv => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(file)
        }
    }
}

pub fn to_mcds_bytes(dataset: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MCDS_MAGIC);
    w.u32(dataset.point_count() as u32);
    w.u32(dataset.timestep_count() as u32);
    w.u32(dataset.variable_count() as u32);
    for name in &dataset.variable_names {
        w.string(name);
    }
    for (lo, hi) in dataset.coord_bounds {
        w.f64(lo);
        w.f64(hi);
    }
    w.f32s(&dataset.times);
    for p in &dataset.coords {
        w.f32s(p);
    }
    w.f32s(&dataset.values);
    w.into_inner()
}

pub fn write_mcds(dataset: &Dataset, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = to_mcds_bytes(dataset);
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn from_mcds_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes, "MCDS file");
    let magic = r.take(8)?;
    if magic != MCDS_MAGIC {
        return Err(Error::format("MCDS file", format!("bad magic {:?}", String::from_utf8_lossy(magic))));
    }
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let m = r.u32()? as usize;
    // Reject headers whose payload could not possibly fit before allocating.
    let payload = (t as u128 + 3 * n as u128 + (n as u128 * t as u128 * m as u128)) * 4;
    if payload > r.remaining() as u128 {
        return Err(Error::Truncated {
            what: "MCDS file",
            offset: r.position(),
            needed: (payload - r.remaining() as u128).min(usize::MAX as u128) as usize,
        });
    }
    let names = (0..m).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    let mut stored_bounds = [(0.0, 0.0); 3];
    for b in &mut stored_bounds {
        *b = (r.f64()?, r.f64()?);
    }
    let times = r.f32s(t)?;
    let flat = r.f32s(n * 3)?;
    let coords = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let values = r.f32s(n * t * m)?;
    if r.remaining() != 0 {
        return Err(Error::format("MCDS file", format!("{} trailing bytes", r.remaining())));
    }
    let ds = Dataset::new(names, coords, times, values)?;
    let same = ds
        .coord_bounds
        .iter()
        .zip(&stored_bounds)
        .all(|(a, b)| a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits());
    if !same {
        return Err(Error::format(
            "MCDS file",
            format!("stored coordinate bounds {stored_bounds:?} disagree with coordinates {:?}", ds.coord_bounds),
        ));
    }
    Ok(ds)
}

/// Reads `x,y,z,t,<var1>,...,<varM>` rows. Points are identified across
/// timesteps by exact coordinate match and kept in first-appearance order;
/// timesteps are sorted ascending. Every point must appear at every timestep.
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::format("CSV", e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 5 || cols[..4] != ["x", "y", "z", "t"] {
        return Err(Error::format(
            "CSV",
            format!("header must be x,y,z,t,<variables...>, got {}", cols.join(",")),
        ));
    }
    let names: Vec<String> = cols[4..].iter().map(|s| s.to_string()).collect();
    let m = names.len();

    let mut point_index: HashMap<[u32; 3], usize> = HashMap::new();
    let mut coords: Vec<[f32; 3]> = Vec::new();
    let mut time_index: HashMap<u32, usize> = HashMap::new();
    let mut times: Vec<f32> = Vec::new();
    let mut rows: Vec<(usize, usize, Vec<f32>, u64)> = Vec::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::format("CSV", e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 + m {
            return Err(Error::format(
                "CSV",
                format!("line {line}: {} fields, expected {} (x,y,z,t + {m} variables)", record.len(), 4 + m),
            ));
        }
        let mut nums = Vec::with_capacity(record.len());
        for (field, name) in record.iter().zip(&cols) {
            let v: f32 = field
                .parse()
                .map_err(|_| Error::format("CSV", format!("line {line}: column {name}: cannot parse '{field}'")))?;
            if !v.is_finite() {
                return Err(Error::format("CSV", format!("line {line}: column {name}: non-finite value")));
            }
            nums.push(v);
        }
        let key = [nums[0], nums[1], nums[2]].map(canonical_bits);
        let n = *point_index.entry(key).or_insert_with(|| {
            coords.push([nums[0], nums[1], nums[2]]);
            coords.len() - 1
        });
        let t = *time_index.entry(canonical_bits(nums[3])).or_insert_with(|| {
            times.push(nums[3]);
            times.len() - 1
        });
        rows.push((n, t, nums[4..].to_vec(), line));
    }
    if rows.is_empty() {
        return Err(Error::format("CSV", "no data rows"));
    }

    // Sort timesteps ascending and remap.
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut remap = vec![0; times.len()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let sorted_times: Vec<f32> = order.iter().map(|&i| times[i]).collect();

    let (npts, nt) = (coords.len(), sorted_times.len());
    let mut values = vec![0.0f32; npts * nt * m];
    let mut seen = vec![false; npts * nt];
    for (n, t, vals, line) in rows {
        let t = remap[t];
        let slot = t * npts + n;
        if seen[slot] {
            return Err(Error::format(
                "CSV",
                format!("line {line}: duplicate record for point {:?} at t={}", coords[n], sorted_times[t]),
            ));
        }
        seen[slot] = true;
        values[slot * m..(slot + 1) * m].copy_from_slice(&vals);
    }
    if let Some(hole) = seen.iter().position(|s| !s) {
        let (t, n) = (hole / npts, hole % npts);
        return Err(Error::format(
            "CSV",
            format!("missing record for point {:?} at t={}", coords[n], sorted_times[t]),
        ));
    }
    Dataset::new(names, coords, sorted_times, values)
}

fn canonical_bits(v: f32) -> u32 {
    if v == 0.0 {
        0
    } else {
        v.to_bits()
    }
}

/// Writes the dataset as `x,y,z,t,<variables>` rows, timestep-major.
pub fn write_csv<W: std::io::Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::format("CSV", e.to_string());
    let mut header = vec!["x".to_string(), "y".into(), "z".into(), "t".into()];
    header.extend(dataset.variable_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (t, &time) in dataset.times.iter().enumerate() {
        for (n, p) in dataset.coords.iter().enumerate() {
            let mut row = vec![p[0].to_string(), p[1].to_string(), p[2].to_string(), time.to_string()];
            row.extend((0..dataset.variable_count()).map(|m| dataset.value(t, n, m).to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::format("CSV", e.to_string()))
}

/// Analytic fields produced by [`synthesize`]. Coordinates live in the unit
/// box and time in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    /// `sin(2 pi (x + t/4)) cos(pi y) (1 + z/2)`
    Trig,
    /// Gaussian bump (sigma 0.15) travelling along x.
    Bump,
    /// Two materials separated by the plane `x + 0.2 y = 0.55`.
    Discontinuity,
    /// Two variables: a large, slowly varying one and a small, oscillating one.
    ContrastPair,
}

/// Location of the material interface: `x + 0.2 y = 0.55`.
pub fn material_side(p: [f64; 3]) -> bool {
    p[0] + 0.2 * p[1] < 0.55
}

impl FieldKind {
    pub fn variable_names(self) -> &'static [&'static str] {
        match self {
            FieldKind::Trig => &["trig"],
            FieldKind::Bump => &["bump"],
            FieldKind::Discontinuity => &["material"],
            FieldKind::ContrastPair => &["contrast_low", "contrast_high"],
        }
    }

    pub fn evaluate(self, p: [f64; 3], t: f64) -> Vec<f64> {
        use std::f64::consts::PI;
        let [x, y, z] = p;
        match self {
            FieldKind::Trig => vec![(2.0 * PI * (x + 0.25 * t)).sin() * (PI * y).cos() * (1.0 + 0.5 * z)],
            FieldKind::Bump => {
                let c = [0.25 + 0.5 * t, 0.5, 0.5];
                let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                vec![(-d2 / (2.0 * 0.15 * 0.15)).exp()]
            }
            FieldKind::Discontinuity => {
                if material_side(p) {
                    vec![1.0 + 0.25 * (2.0 * PI * y).sin() * (PI * z).cos() + 0.1 * t]
                } else {
                    vec![-0.5 + 0.25 * (2.0 * PI * z).cos() - 0.1 * t]
                }
            }
            FieldKind::ContrastPair => vec![
                100.0 * (PI * x).sin() * (0.5 * PI * y).cos() + 20.0 * t,
                0.01 * (8.0 * PI * x).sin() * (8.0 * PI * y).sin() * (4.0 * PI * z + PI * t).cos(),
            ],
        }
    }

    pub const ALL: [FieldKind; 4] = [
        FieldKind::Trig,
        FieldKind::Bump,
        FieldKind::Discontinuity,
        FieldKind::ContrastPair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Trig => "trig",
            FieldKind::Bump => "bump",
            FieldKind::Discontinuity => "discontinuity",
            FieldKind::ContrastPair => "contrast",
        }
    }
}

impl FromStr for FieldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FieldKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown field kind '{s}' (expected one of: trig, bump, discontinuity, contrast)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub point_count: usize,
    pub timesteps: usize,
    pub fields: Vec<FieldKind>,
    /// Standard deviation of additive Gaussian noise, in value units.
    pub noise: f64,
    pub seed: u64,
    /// Concentrate 70% of the points in five Gaussian blobs.
    pub clustered: bool,
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fields: Vec<&str> = self.fields.iter().map(|k| k.name()).collect();
        write!(
            f,
            "points={} timesteps={} fields={} noise={} seed={} clustered={}",
            self.point_count,
            self.timesteps,
            fields.join(","),
            self.noise,
            self.seed,
            self.clustered
        )
    }
}

pub fn synthesize(spec: &SynthSpec) -> Result<Dataset> {
    if spec.fields.is_empty() {
        return Err(Error::Config("synthesize needs at least one field kind".into()));
    }
    if spec.point_count == 0 || spec.timesteps == 0 {
        return Err(Error::Config("synthesize needs at least one point and one timestep".into()));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let coords = sample_points(spec, &mut rng);
    let times: Vec<f32> = (0..spec.timesteps)
        .map(|k| {
            if spec.timesteps == 1 {
                0.0
            } else {
                k as f32 / (spec.timesteps - 1) as f32
            }
        })
        .collect();

    let mut names: Vec<String> = Vec::new();
    for kind in &spec.fields {
        for &base in kind.variable_names() {
            let mut name = base.to_string();
            let mut suffix = 2;
            while names.contains(&name) {
                name = format!("{base}_{suffix}");
                suffix += 1;
            }
            names.push(name);
        }
    }

    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let mut values = Vec::with_capacity(coords.len() * times.len() * names.len());
    for &t in &times {
        for p in &coords {
            let p64 = p.map(f64::from);
            for kind in &spec.fields {
                for v in kind.evaluate(p64, t as f64) {
                    let v = match &noise {
                        Some(dist) => v + dist.sample(&mut rng),
                        None => v,
                    };
                    values.push(v as f32);
                }
            }
        }
    }
    Dataset::new(names, coords, times, values)
}

fn sample_points(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let blobs: Vec<[f64; 3]> = if spec.clustered {
        (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
    } else {
        Vec::new()
    };
    let spread = Normal::new(0.0, 0.08).expect("valid sigma");
    (0..spec.point_count)
        .map(|_| {
            if spec.clustered && rng.gen::<f64>() < 0.7 {
                let c = blobs[rng.gen_range(0..blobs.len())];
                c.map(|v| (v + spread.sample(rng)).clamp(0.0, 1.0) as f32)
            } else {
                [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()]
            }
        })
        .collect()
}

/// Raw value payload in bytes (`N * T * M * 4`); the numerator of the
/// compression ratio. Coordinates and connectivity are not counted.
pub fn raw_size_bytes(dataset: &Dataset) -> u64 {
    dataset.point_count() as u64 * dataset.timestep_count() as u64 * dataset.variable_count() as u64 * 4
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            vec!["a".into(), "b".into()],
            vec![[0.0, 0.0, 0.0], [10.0, 1.0, -2.0], [5.0, 0.5, 4.0]],
            vec![0.0, 2.0],
            (0..12).map(|v| v as f32 * 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn raw_size_arithmetic() {
        let one = Dataset::new(vec!["v".into()], vec![[0.0; 3]], vec![0.0], vec![1.0]).unwrap();
        assert_eq!(raw_size_bytes(&one), 4);
        let ds = synthesize(&SynthSpec {
            point_count: 10,
            timesteps: 2,
            fields: vec![FieldKind::Trig, FieldKind::ContrastPair],
            noise: 0.0,
            seed: 0,
            clustered: false,
        })
        .unwrap();
        assert_eq!(raw_size_bytes(&ds), 240);
    }

    #[test]
    fn midpoint_and_degenerate_time() {
        let ds = tiny();
        let norm = Normalizer::fit(&ds);
        assert_eq!(norm.coords[0].normalize(5.0), 0.0);
        let single = Dataset::new(vec!["v".into()], vec![[0.0; 3], [1.0; 3]], vec![7.5], vec![1.0, 2.0]).unwrap();
        let (nd, norm) = normalize(&single);
        assert_eq!(nd.times, vec![0.0]);
        assert_eq!(norm.time.denormalize(0.0), 7.5);
    }

    #[test]
    fn constant_variable_normalizes_to_zero() {
        let ds = Dataset::new(vec!["c".into()], vec![[0.0; 3], [1.0; 3]], vec![0.0], vec![3.25, 3.25]).unwrap();
        let (nd, norm) = normalize(&ds);
        assert_eq!(nd.values, vec![0.0, 0.0]);
        assert_eq!(norm.values[0].denormalize(0.7), 3.25);
    }

    #[test]
    fn mcds_round_trip_and_corruption() {
        let ds = tiny();
        let bytes = to_mcds_bytes(&ds);
        assert_eq!(from_mcds_bytes(&bytes).unwrap(), ds);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_mcds_bytes(&bad), Err(Error::Format { .. })));
        assert!(matches!(from_mcds_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut nan = bytes.clone();
        let last = nan.len() - 4;
        nan[last..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(from_mcds_bytes(&nan).is_err());
    }

    #[test]
    fn csv_smallest_well_formed() {
        let text = "x,y,z,t,p\n0,0,0,0,1\n1,0,0,0,2\n0,0,0,1,3\n1,0,0,1,4\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        assert_eq!((ds.point_count(), ds.timestep_count(), ds.variable_count()), (2, 2, 1));
        assert_eq!(ds.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_sorts_times_and_matches_points() {
        let text = "x,y,z,t,p\n1,0,0,5,4\n0,0,0,5,3\n0,0,0,1,1\n1,0,0,1,2\n";
        let ds = read_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.times, vec![1.0, 5.0]);
        assert_eq!(ds.coords, vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(ds.values, vec![2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn csv_errors() {
        let missing = "x,y,z,t,p\n0,0,0,0,1\n1,0,0,0,2\n0,0,0,1,3\n";
        let msg = read_csv(missing.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("missing record") && msg.contains("t=1"), "{msg}");
        let ragged = "x,y,z,t,p\n0,0,0,0,1\n1,0,0,0\n";
        assert!(read_csv(ragged.as_bytes()).unwrap_err().to_string().contains("line 3"));
        let dup = "x,y,z,t,p\n0,0,0,0,1\n0,0,0,0,1\n";
        assert!(read_csv(dup.as_bytes()).unwrap_err().to_string().contains("duplicate"));
        let header = "a,b,c\n1,2,3\n";
        assert!(read_csv(header.as_bytes()).is_err());
        let nan = "x,y,z,t,p\n0,0,0,0,nan\n";
        assert!(read_csv(nan.as_bytes()).is_err());
    }

    #[test]
    fn trig_zeros() {
        for &(x, t) in &[(0.0, 0.0), (0.5, 0.0), (0.25, 1.0), (0.75, 1.0)] {
            for &(y, z) in &[(0.1, 0.3), (0.9, 0.7)] {
                assert!(FieldKind::Trig.evaluate([x, y, z], t)[0].abs() < 1e-6);
            }
        }
        assert!(FieldKind::Trig.evaluate([0.3, 0.5, 0.2], 0.4)[0].abs() < 1e-6);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let spec = SynthSpec {
            point_count: 200,
            timesteps: 3,
            fields: vec![FieldKind::Bump, FieldKind::Trig],
            noise: 0.01,
            seed: 5,
            clustered: true,
        };
        let a = synthesize(&spec).unwrap();
        assert_eq!(a, synthesize(&spec).unwrap());
        assert_eq!(to_mcds_bytes(&a), to_mcds_bytes(&synthesize(&spec).unwrap()));
        assert!(a.coords.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn unknown_field_kind() {
        assert!(matches!("wobble".parse::<FieldKind>(), Err(Error::Config(_))));
        assert_eq!("contrast".parse::<FieldKind>().unwrap(), FieldKind::ContrastPair);
    }
}
