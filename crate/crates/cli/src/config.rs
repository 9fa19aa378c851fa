//! TOML run files and the resolved per-command configurations.
//!
//! A run file may contain any of the sections below; unknown keys are
//! rejected. Command-line flags are applied on top of the file.
//!
//! ```toml
//! seed = 3
//! out = "runs/toy"
//!
//! [data]
//! dataset = "toy:two_gaussians"   # or "csv:path/to/file.csv"
//! n = 5000
//!
//! [model]
//! layers = 4
//! family = "quadratic"
//!
//! [train]
//! epochs = 200
//! learning_rate = 0.001
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use autm::invbench::BenchConfig;
use autm::training::{Split, Toy, TrainConfig};
use autm::universality::{KernelKind, PicardConfig, StudyConfig};
use autm::ModelSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where training rows come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Toy(Toy),
    Csv(PathBuf),
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(name) = s.strip_prefix("toy:") {
            return Toy::ALL
                .into_iter()
                .find(|t| t.name() == name)
                .map(DataSource::Toy)
                .ok_or_else(|| {
                    let names: Vec<_> = Toy::ALL.iter().map(|t| t.name()).collect();
                    format!("unknown toy dataset `{name}` (known: {})", names.join(", "))
                });
        }
        if let Some(path) = s.strip_prefix("csv:") {
            if path.is_empty() {
                return Err("`csv:` needs a path".into());
            }
            return Ok(DataSource::Csv(PathBuf::from(path)));
        }
        Err(format!("dataset `{s}` must look like `toy:<name>` or `csv:<path>`"))
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Toy(t) => write!(f, "toy:{}", t.name()),
            DataSource::Csv(p) => write!(f, "csv:{}", p.display()),
        }
    }
}

impl Serialize for DataSource {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: String,
    /// Rows drawn for toy datasets; ignored for CSV input.
    pub n: usize,
    pub split: Split,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: "toy:two_gaussians".into(),
            n: 5000,
            split: Split::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniversalitySection {
    /// `affine`, `softplus_shift` or `arctan_blend`.
    pub target: String,
    pub alpha: f64,
    pub beta: f64,
    pub scales: Vec<f64>,
    pub kernel: KernelKind,
    pub grid: usize,
    pub interval: (f64, f64),
    pub picard: PicardConfig,
}

impl Default for UniversalitySection {
    fn default() -> Self {
        let study = StudyConfig::default();
        Self {
            target: "affine".into(),
            alpha: 2.0,
            beta: 1.0,
            scales: study.scales,
            kernel: study.kernel,
            grid: study.grid,
            interval: study.interval,
            picard: study.picard,
        }
    }
}

impl UniversalitySection {
    pub fn study(&self) -> StudyConfig {
        StudyConfig {
            interval: self.interval,
            grid: self.grid,
            scales: self.scales.clone(),
            kernel: self.kernel,
            picard: self.picard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            lo: -4.0,
            hi: 4.0,
            points: 101,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { n: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundtripSection {
    pub n: usize,
    pub tolerance: f64,
    /// Standard deviation of the Gaussian noise added to the parameters of
    /// a freshly built model, which is otherwise the identity map.
    pub perturb: f64,
}

impl Default for RoundtripSection {
    fn default() -> Self {
        Self {
            n: 100,
            tolerance: 1e-8,
            perturb: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub threshold: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { threshold: 1e-4 }
    }
}

/// Contents of a run file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<DataSection>,
    /// Kept as a raw table so that an explicit `dim` can be told apart
    /// from the default.
    pub model: Option<toml::Table>,
    pub train: Option<TrainConfig>,
    pub bench: Option<BenchConfig>,
    pub universality: Option<UniversalitySection>,
    pub grid: Option<GridSection>,
    pub sample: Option<SampleSection>,
    pub roundtrip: Option<RoundtripSection>,
    pub gradcheck: Option<GradcheckSection>,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// The `[model]` section and whether it set `dim` explicitly.
    pub fn model_spec(&self) -> Result<(ModelSpec, bool), CliError> {
        match &self.model {
            None => Ok((ModelSpec::default(), false)),
            Some(table) => {
                let explicit = table.contains_key("dim");
                let spec = ModelSpec::deserialize(toml::Value::Table(table.clone()))
                    .map_err(|e| CliError::Config(format!("[model]: {e}")))?;
                Ok((spec, explicit))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_source_parsing() {
        assert_eq!(
            "toy:two_gaussians".parse::<DataSource>().unwrap(),
            DataSource::Toy(Toy::TwoGaussians)
        );
        assert_eq!(
            "csv:a/b.csv".parse::<DataSource>().unwrap(),
            DataSource::Csv("a/b.csv".into())
        );
        assert!("toy:spiral".parse::<DataSource>().is_err());
        assert!("a.csv".parse::<DataSource>().is_err());
        assert_eq!(DataSource::Toy(Toy::Rings).to_string(), "toy:rings");
    }

    #[test]
    fn run_file_sections() {
        let f = RunFile::parse(
            "seed = 4\n[model]\ndim = 3\nlayers = 2\n[train]\nepochs = 7\n[universality]\nkernel = \"gaussian_normalized\"\n",
        )
        .unwrap();
        assert_eq!(f.seed, Some(4));
        let (spec, explicit) = f.model_spec().unwrap();
        assert!(explicit);
        assert_eq!((spec.dim, spec.layers), (3, 2));
        assert_eq!(f.train.unwrap().epochs, 7);
        assert_eq!(f.universality.unwrap().kernel, KernelKind::GaussianNormalized);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunFile::parse("[train]\nepochz = 3\n").is_err());
        assert!(RunFile::parse("colour = 1\n").is_err());
        let f = RunFile::parse("[model]\nlayerz = 3\n").unwrap();
        assert!(f.model_spec().is_err());
    }
}
