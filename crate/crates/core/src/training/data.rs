//! Datasets: seeded 2-D toy densities and numeric CSV ingestion.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: file contains no data rows")]
    Empty { path: String },
    #[error("{path}, line {line}, column {column}: cannot parse `{field}` as a number")]
    Parse {
        path: String,
        line: u64,
        column: usize,
        field: String,
    },
    #[error("{path}, line {line}, column {column}: non-finite value `{field}`")]
    NonFinite {
        path: String,
        line: u64,
        column: usize,
        field: String,
    },
    #[error("{path}, line {line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },
    #[error("column {column} ({name}) is constant on the training split; drop it before training")]
    ConstantColumn { column: usize, name: String },
    #[error("invalid split fractions: {0}")]
    BadSplit(String),
    #[error("unknown toy dataset `{0}` (expected two_moons, rings, checkerboard or two_gaussians)")]
    UnknownToy(String),
    #[error("dataset size must be at least 1")]
    NoRows,
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Split {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl Split {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DataError::BadSplit(format!("{parts:?} has a negative or non-finite entry")));
        }
        if self.train <= 0.0 {
            return Err(DataError::BadSplit("training fraction must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSplit(format!("{parts:?} does not sum to 1")));
        }
        Ok(())
    }

    /// Row counts `(train, val, test)` for `n` rows; at least one training row.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let n_train = ((n as f64 * self.train).round() as usize).clamp(1.min(n), n);
        let n_val = ((n as f64 * self.val).round() as usize).min(n - n_train);
        (n_train, n_val, n - n_train - n_val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub columns: Vec<String>,
    pub train: Vec<Vec<f64>>,
    pub val: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
    pub split: Split,
    /// Per-column standardization `(x − mean) / std`, from the training split.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All rows in split order.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Two-dimensional toy densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy {
    /// Two interleaved half circles with Gaussian noise σ = 0.1.
    TwoMoons,
    /// Radii 1 and 2 with equal weight, uniform angle, radial noise σ = 0.1.
    Rings,
    /// Uniform on the 8 dark cells of a 4×4 board over `[−4, 4]²`.
    Checkerboard,
    /// Equal mixture of isotropic Gaussians at `(±2, 0)`, σ = 0.5.
    TwoGaussians,
}

pub const TWO_GAUSSIANS_CENTER: f64 = 2.0;
pub const TWO_GAUSSIANS_STD: f64 = 0.5;

impl Toy {
    pub const ALL: [Toy; 4] = [Toy::TwoMoons, Toy::Rings, Toy::Checkerboard, Toy::TwoGaussians];

    pub fn name(self) -> &'static str {
        match self {
            Toy::TwoMoons => "two_moons",
            Toy::Rings => "rings",
            Toy::Checkerboard => "checkerboard",
            Toy::TwoGaussians => "two_gaussians",
        }
    }

    pub fn sample_one(self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let noise = Normal::new(0.0, 0.1).expect("valid std");
        match self {
            Toy::TwoMoons => {
                let theta = rng.random::<f64>() * std::f64::consts::PI;
                let (x, y) = if rng.random::<bool>() {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                [x + noise.sample(rng), y + noise.sample(rng)]
            }
            Toy::Rings => {
                let radius = if rng.random::<bool>() { 1.0 } else { 2.0 } + noise.sample(rng);
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                [radius * theta.cos(), radius * theta.sin()]
            }
            Toy::Checkerboard => {
                let x1: f64 = rng.random_range(-2.0..2.0);
                let x2: f64 = rng.random::<f64>() - 2.0 * rng.random_range(0..2) as f64;
                let x2 = x2 + x1.floor().rem_euclid(2.0);
                [2.0 * x1, 2.0 * x2]
            }
            Toy::TwoGaussians => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let z0: f64 = StandardNormal.sample(rng);
                let z1: f64 = StandardNormal.sample(rng);
                [
                    sign * TWO_GAUSSIANS_CENTER + TWO_GAUSSIANS_STD * z0,
                    TWO_GAUSSIANS_STD * z1,
                ]
            }
        }
    }

    /// Closed-form log density where one exists.
    pub fn log_density(self, p: [f64; 2]) -> Option<f64> {
        match self {
            Toy::TwoGaussians => {
                let s2 = TWO_GAUSSIANS_STD * TWO_GAUSSIANS_STD;
                let comp = |c: f64| {
                    let d = (p[0] - c).powi(2) + p[1] * p[1];
                    -d / (2.0 * s2)
                };
                let (a, b) = (comp(TWO_GAUSSIANS_CENTER), comp(-TWO_GAUSSIANS_CENTER));
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                Some(lse - (2.0 * std::f64::consts::PI * s2).ln() - std::f64::consts::LN_2)
            }
            Toy::Checkerboard => {
                let cell = |v: f64| (v / 2.0).floor();
                let inside = p.iter().all(|v| (-4.0..4.0).contains(v));
                let dark = (cell(p[0]) + cell(p[1])).rem_euclid(2.0) == 0.0;
                Some(if inside && dark { (1.0f64 / 32.0).ln() } else { f64::NEG_INFINITY })
            }
            Toy::TwoMoons | Toy::Rings => None,
        }
    }
}

impl fmt::Display for Toy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Toy {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Toy::ALL
            .into_iter()
            .find(|t| t.name() == s || t.name().replace('_', "") == s)
            .ok_or_else(|| DataError::UnknownToy(s.to_string()))
    }
}

/// `n` seeded draws from a toy density, split with the default fractions.
/// Toy data are left unstandardized so the generator geometry is preserved.
pub fn toy2d(toy: Toy, n: usize, seed: u64) -> Result<Dataset, DataError> {
    toy2d_split(toy, n, seed, Split::default())
}

pub fn toy2d_split(toy: Toy, n: usize, seed: u64, split: Split) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::NoRows);
    }
    split.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|_| toy.sample_one(&mut rng).to_vec()).collect();
    let (n_train, n_val, _) = split.counts(n);
    let test = rows.split_off(n_train + n_val);
    let val = rows.split_off(n_train);
    Ok(Dataset {
        name: toy.name().to_string(),
        dim: 2,
        columns: vec!["x1".into(), "x2".into()],
        train: rows,
        val,
        test,
        split,
        mean: vec![0.0; 2],
        std: vec![1.0; 2],
    })
}

/// Reads a numeric CSV (optional header), shuffles rows with `seed`, splits,
/// and standardizes every column with training-split mean and population
/// standard deviation.
pub fn load_csv(path: &Path, split: Split, seed: u64) -> Result<Dataset, DataError> {
    split.validate()?;
    let p = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&p, e))?;

    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&p, e))?;
        let line = rec.position().map_or(i as u64 + 1, |pos| pos.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            header = Some(rec.iter().map(str::to_string).collect());
            continue;
        }
        let mut row = Vec::with_capacity(rec.len());
        for (column, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Parse {
                path: p.clone(),
                line,
                column: column + 1,
                field: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite {
                    path: p.clone(),
                    line,
                    column: column + 1,
                    field: field.to_string(),
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Empty { path: p });
    }
    let dim = rows[0].len();
    let columns = header.unwrap_or_else(|| (1..=dim).map(|c| format!("x{c}")).collect());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let n = rows.len();
    let (n_train, n_val, _) = split.counts(n);

    let mut mean = vec![0.0; dim];
    for r in &rows[..n_train] {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    let mut std = vec![0.0; dim];
    for r in &rows[..n_train] {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n_train as f64).sqrt());
    if let Some(c) = std.iter().position(|&s| s == 0.0 || !s.is_finite()) {
        return Err(DataError::ConstantColumn {
            column: c + 1,
            name: columns[c].clone(),
        });
    }
    for r in rows.iter_mut() {
        for ((v, m), s) in r.iter_mut().zip(&mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }

    let test = rows.split_off(n_train + n_val);
    let val = rows.split_off(n_train);
    let name = path
        .file_stem()
        .map_or_else(|| p.clone(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset {
        name,
        dim,
        columns,
        train: rows,
        val,
        test,
        split,
        mean,
        std,
    })
}

fn csv_error(path: &str, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_string(),
            source,
        },
        kind => DataError::Csv {
            path: path.to_string(),
            line,
            message: match kind {
                csv::ErrorKind::UnequalLengths {
                    expected_len, len, ..
                } => format!("expected {expected_len} fields, found {len}"),
                other => format!("{other:?}"),
            },
        },
    }
}
