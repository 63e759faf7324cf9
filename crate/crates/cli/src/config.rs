//! Experiment configuration read from TOML. Every table rejects unknown keys.

use phonon_kinetics::kernels::KernelOptions;
use phonon_kinetics::model::{GridSpec, ModelConfig};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ValidateModel,
    KernelTable,
    BoltzmannRun,
    DysonCompare,
    QuantumOracle,
    LadderCheck,
    WignerDemo,
    CombinatoricsSuite,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::ValidateModel,
        Experiment::KernelTable,
        Experiment::BoltzmannRun,
        Experiment::DysonCompare,
        Experiment::QuantumOracle,
        Experiment::LadderCheck,
        Experiment::WignerDemo,
        Experiment::CombinatoricsSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ValidateModel => "validate-model",
            Experiment::KernelTable => "kernel-table",
            Experiment::BoltzmannRun => "boltzmann-run",
            Experiment::DysonCompare => "dyson-compare",
            Experiment::QuantumOracle => "quantum-oracle",
            Experiment::LadderCheck => "ladder-check",
            Experiment::WignerDemo => "wigner-demo",
            Experiment::CombinatoricsSuite => "combinatorics-suite",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Experiment::ValidateModel => "check the standing assumptions of the model on a momentum grid",
            Experiment::KernelTable => "tabulate branch cross sections and compare sigma_0 with -2 Im Psi",
            Experiment::BoltzmannRun => "kinetic Monte Carlo run of the linear Boltzmann equation",
            Experiment::DysonCompare => "Dyson partial sum against the particle solver",
            Experiment::QuantumOracle => "truncated Fock-space evolution: drift, free limit, bath covariance",
            Experiment::LadderCheck => "second-order trace against the single-ladder finite sum",
            Experiment::WignerDemo => "Wigner closed forms, pairing identity and semiclassical limit",
            Experiment::CombinatoricsSuite => "exhaustive peak-count and staircase lemmas",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{message}")]
    Parse { message: String, key: Option<String> },
    #[error("invalid value: {0}")]
    Invalid(String),
}

impl ConfigError {
    /// Offending key for unknown-field errors.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Parse { key, .. } => key.as_deref(),
            _ => None,
        }
    }
}

/// Numeric tolerances of the assertion-type experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub psi_sigma_rel: f64,
    pub free_transport: f64,
    pub mass: f64,
    pub dyson_sigmas: f64,
    pub drift: f64,
    pub free_evolution: f64,
    pub covariance: f64,
    pub ladder: f64,
    pub wigner_closed_form: f64,
    pub pairing: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            psi_sigma_rel: 1e-2,
            free_transport: 1e-12,
            mass: 0.0,
            dyson_sigmas: 3.0,
            drift: 1e-10,
            free_evolution: 1e-10,
            covariance: 1e-3,
            ladder: 1e-8,
            wigner_closed_form: 1e-6,
            pairing: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelTableConfig {
    pub speeds: Vec<f64>,
    /// Also evaluate -2 Im Psi (slow: two resolvent routes per speed).
    pub check_psi: bool,
}

impl Default for KernelTableConfig {
    fn default() -> Self {
        Self {
            speeds: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            check_psi: false,
        }
    }
}

/// Gaussian observable exp(-|X - x0|^2 / 2 wx^2 - |V - v0|^2 / 2 wv^2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservableConfig {
    pub x_center: Vec<f64>,
    pub x_width: f64,
    pub v_center: Vec<f64>,
    pub v_width: f64,
}

impl Default for ObservableConfig {
    fn default() -> Self {
        Self {
            x_center: Vec::new(),
            x_width: 2.0,
            v_center: Vec::new(),
            v_width: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoltzmannConfig {
    pub particles: usize,
    pub t_final: f64,
    pub steps: usize,
    pub x_width: f64,
    /// Maxwellian drift; empty means zero.
    pub drift: Vec<f64>,
}

impl Default for BoltzmannConfig {
    fn default() -> Self {
        Self {
            particles: 20_000,
            t_final: 1.0,
            steps: 4,
            x_width: 1.0,
            drift: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DysonConfig {
    pub order: usize,
    /// Final time; if absent, chosen so that max sigma_0 * T = rate_time.
    pub t_final: Option<f64>,
    pub rate_time: f64,
    pub samples: usize,
    pub particles: usize,
    pub x_width: f64,
    pub observable: ObservableConfig,
}

impl Default for DysonConfig {
    fn default() -> Self {
        Self {
            order: 4,
            t_final: None,
            rate_time: 0.5,
            samples: 200_000,
            particles: 200_000,
            x_width: 1.0,
            observable: ObservableConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantumConfig {
    /// Box side parameter L of the momentum lattice.
    pub box_size: f64,
    /// Momentum indices |i_j| <= cutoff.
    pub cutoff: i32,
    pub n_max: usize,
    pub n_tot: Option<usize>,
    pub t_max: f64,
    pub steps: usize,
    pub covariance_n_max: usize,
    /// Inverse temperature of the covariance check; model beta if absent.
    pub covariance_beta: Option<f64>,
    pub covariance_mode: Vec<f64>,
}

impl Default for QuantumConfig {
    fn default() -> Self {
        Self {
            box_size: 3.0,
            cutoff: 2,
            n_max: 2,
            n_tot: Some(3),
            t_max: 10.0,
            steps: 10,
            covariance_n_max: 8,
            covariance_beta: Some(2.0),
            covariance_mode: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub box_size: f64,
    pub electron_points: Vec<Vec<i32>>,
    pub modes: Vec<Vec<i32>>,
    pub n_max: usize,
    pub lambda: f64,
    pub t: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            box_size: (2.0 * std::f64::consts::PI).sqrt(),
            electron_points: vec![vec![-1], vec![0], vec![1], vec![2]],
            modes: vec![vec![-1], vec![1]],
            n_max: 1,
            lambda: 0.1,
            t: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WignerConfig {
    pub gaussian_dim: usize,
    pub gaussian_spacing: f64,
    pub gaussian_cutoff: i32,
    pub pairs: usize,
    pub epsilons: Vec<f64>,
    pub wkb_curvature: f64,
    pub wkb_xi0: f64,
}

impl Default for WignerConfig {
    fn default() -> Self {
        Self {
            gaussian_dim: 3,
            gaussian_spacing: 0.5,
            gaussian_cutoff: 14,
            pairs: 20,
            epsilons: vec![0.2, 0.1, 0.05],
            wkb_curvature: 0.5,
            wkb_xi0: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinatoricsConfig {
    pub n_max: usize,
    /// Largest n for the (alpha, beta) = (2, 1) staircase case.
    pub n_max_21: usize,
    pub peak_bounds: Vec<usize>,
}

impl Default for CombinatoricsConfig {
    fn default() -> Self {
        Self {
            n_max: 9,
            n_max_21: 10,
            peak_bounds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub kernel: KernelOptions,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub kernel_table: KernelTableConfig,
    #[serde(default)]
    pub boltzmann: BoltzmannConfig,
    #[serde(default)]
    pub dyson: DysonConfig,
    #[serde(default)]
    pub quantum: QuantumConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub wigner: WignerConfig,
    #[serde(default)]
    pub combinatorics: CombinatoricsConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            seed: 0,
            output_dir: default_out(),
            model: ModelConfig::default(),
            tolerances: Tolerances::default(),
            kernel: KernelOptions::default(),
            grid: GridSpec::default(),
            kernel_table: KernelTableConfig::default(),
            boltzmann: BoltzmannConfig::default(),
            dyson: DysonConfig::default(),
            quantum: QuantumConfig::default(),
            ladder: LadderConfig::default(),
            wigner: WignerConfig::default(),
            combinatorics: CombinatoricsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            ConfigError::Parse {
                key: unknown_key(&message),
                message: match e.span() {
                    Some(s) => format!("{message} (at byte {})", s.start),
                    None => message,
                },
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

/// Extract `key` from serde's "unknown field `key`, expected ..." message
/// (or the offending name of an unknown variant).
fn unknown_key(message: &str) -> Option<String> {
    ["unknown field `", "unknown variant `"].iter().find_map(|pat| {
        let rest = message.split(pat).nth(1)?;
        rest.split('`').next().map(str::to_string)
    })
}
