//! Experiment configuration: TOML sections, command-line overrides and the
//! digest used to key outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sharedadv_core::adversary::{AttackGoal, AttackParams, StepSchedule};
use sharedadv_core::net::{Architecture, LossConfig, ModelSpec, DEFAULT_KAPPA, DEFAULT_SMOOTHING};
use sharedadv_core::robustness::{RobustnessQuery, SearchMode};
use sharedadv_core::trainer::{Defense, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub risk: RiskSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            risk: RiskSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Blobs,
    Shapes,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Total examples before the train/test split.
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub side: usize,
    pub max_shapes: usize,
    pub test_fraction: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: DataKind::Blobs,
            n: 2000,
            classes: 2,
            dim: 20,
            separation: 6.0,
            side: 12,
            max_shapes: 3,
            test_fraction: 0.25,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Linear,
    Mlp,
    Conv,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub hidden: Vec<usize>,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Mlp,
            hidden: vec![32],
            channels: vec![16, 16],
            strides: vec![1, 2],
        }
    }
}

impl ModelConfig {
    /// The section that reproduces `arch`; unused fields keep their defaults.
    pub fn from_architecture(arch: &Architecture) -> Self {
        let mut m = ModelConfig::default();
        match arch {
            Architecture::SoftmaxLinear => m.arch = ArchKind::Linear,
            Architecture::Mlp { hidden } => {
                m.arch = ArchKind::Mlp;
                m.hidden = hidden.clone();
            }
            Architecture::SmallConv { channels, strides } => {
                m.arch = ArchKind::Conv;
                m.channels = channels.clone();
                m.strides = strides.clone();
            }
            Architecture::DensePredictor { channels } => {
                m.arch = ArchKind::Dense;
                m.channels = channels.clone();
            }
        }
        m
    }

    pub fn spec(&self, input_shape: Vec<usize>, classes: usize) -> Result<ModelSpec> {
        let arch = match self.arch {
            ArchKind::Linear => Architecture::SoftmaxLinear,
            ArchKind::Mlp => Architecture::Mlp {
                hidden: self.hidden.clone(),
            },
            ArchKind::Conv => Architecture::SmallConv {
                channels: self.channels.clone(),
                strides: self.strides.clone(),
            },
            ArchKind::Dense => Architecture::DensePredictor {
                channels: self.channels.clone(),
            },
        };
        ModelSpec::new(arch, input_shape, classes).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefenseKind {
    Erm,
    Adv,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub defense: DefenseKind,
    pub sharedness: usize,
    pub sigma: f32,
    pub eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// `[[epoch, factor], ...]`.
    pub milestones: Vec<(usize, f32)>,
    pub steps: usize,
    /// Training attack step as a fraction of `eps`.
    pub step_factor: f32,
    pub smoothing: f32,
    /// Loss threshold; `0` disables it.
    pub kappa: f32,
    pub threshold_perturbed: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            defense: DefenseKind::Erm,
            sharedness: 1,
            sigma: 0.5,
            eps: 0.0,
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: Vec::new(),
            steps: 4,
            step_factor: 0.5,
            smoothing: DEFAULT_SMOOTHING,
            kappa: DEFAULT_KAPPA,
            threshold_perturbed: true,
        }
    }
}

fn kappa_opt(k: f32) -> Option<f32> {
    (k != 0.0).then_some(k)
}

impl TrainSection {
    pub fn defense(&self) -> Defense {
        match self.defense {
            DefenseKind::Erm => Defense::Erm,
            DefenseKind::Adv => Defense::AdvTrain,
            DefenseKind::Shared => Defense::SharedAdvTrain {
                sharedness: self.sharedness,
            },
        }
    }

    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            sigma: self.sigma,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            milestones: self.milestones.clone(),
            seed,
            defense: self.defense(),
            eps: self.eps,
            attack: AttackParams::proportional(self.step_factor, self.steps),
            loss: LossConfig {
                smoothing: self.smoothing,
                kappa: kappa_opt(self.kappa),
            },
            threshold_perturbed_term: self.threshold_perturbed,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    Pgd,
    Shared,
    Universal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub mode: AttackMode,
    pub eps: f32,
    pub steps: usize,
    pub beta: f64,
    pub gamma: f64,
    pub sharedness: usize,
    pub sample_size: usize,
    /// A class index, `scene` for the generated target scene, or a TNSR1
    /// label map.
    pub targeted: Option<String>,
    pub kappa: f32,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            mode: AttackMode::Pgd,
            eps: 0.1,
            steps: 200,
            beta: 4.0,
            gamma: 0.975,
            sharedness: 1,
            sample_size: 16,
            targeted: None,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl AttackSection {
    pub fn params(&self) -> AttackParams {
        AttackParams {
            steps: self.steps,
            schedule: StepSchedule::GeometricAnnealed {
                beta: self.beta,
                gamma: self.gamma,
                steps: self.steps,
            },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            smoothing: 0.0,
            kappa: kappa_opt(self.kappa),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Universal,
    PerExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: EvalMode,
    pub delta: f64,
    pub bsearch: usize,
    pub eps_lo: f32,
    /// Upper end of the search; defaults to the domain width.
    pub eps_hi: Option<f32>,
    pub steps: usize,
    pub beta: f64,
    pub gamma: f64,
    pub sample_size: usize,
    pub targeted: Option<String>,
    pub kappa: f32,
}

impl Default for EvalSection {
    fn default() -> Self {
        let q = RobustnessQuery::classification(0.75, 1.0);
        let (beta, gamma) = match q.attack.schedule {
            StepSchedule::GeometricAnnealed { beta, gamma, .. } => (beta, gamma),
            _ => unreachable!(),
        };
        Self {
            mode: EvalMode::Universal,
            delta: q.delta,
            bsearch: q.iterations,
            eps_lo: q.eps_lo,
            eps_hi: None,
            steps: q.attack.steps,
            beta,
            gamma,
            sample_size: q.sample_size,
            targeted: None,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl EvalSection {
    /// The search query; a targeted goal disables the loss threshold.
    pub fn query(&self, goal: AttackGoal, domain_width: f32) -> RobustnessQuery {
        let targeted = matches!(goal, AttackGoal::Targeted { .. });
        RobustnessQuery {
            delta: self.delta,
            iterations: self.bsearch,
            eps_lo: self.eps_lo,
            eps_hi: self.eps_hi.unwrap_or(domain_width),
            attack: AttackParams::geometric(self.beta, self.gamma, self.steps),
            sample_size: self.sample_size,
            loss: LossConfig {
                smoothing: 0.0,
                kappa: if targeted { None } else { kappa_opt(self.kappa) },
            },
            goal,
            mode: match self.mode {
                EvalMode::Universal => SearchMode::Universal,
                EvalMode::PerExample => SearchMode::PerExample,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub eps: Vec<f32>,
    pub sigma: Vec<f32>,
    pub sharedness: Vec<usize>,
    /// Add one ERM baseline record.
    pub include_erm: bool,
    /// Also estimate per-example robustness for every grid point.
    pub eval_adv: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            eps: vec![0.05, 0.1],
            sigma: vec![0.5],
            sharedness: vec![1, 64],
            include_erm: true,
            eval_adv: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    pub batch: usize,
    pub eps: f32,
    pub steps: usize,
    pub tolerance: f64,
}

impl Default for RiskSection {
    fn default() -> Self {
        Self {
            batch: 8,
            eps: 0.1,
            steps: 50,
            tolerance: 0.02,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text)
    }

    /// Canonical text of the fully resolved configuration.
    /// Canonical TOML of every setting except `out_dir`, which only says
    /// where results go.
    pub fn resolved_text(&self) -> String {
        let mut table = toml::Table::try_from(self).expect("configuration always serializes");
        table.remove("out_dir");
        toml::to_string(&table).expect("configuration always serializes")
    }

    /// SHA-256 of [`Config::resolved_text`], hex encoded.
    pub fn hash(&self) -> String {
        digest_hex(self.resolved_text().as_bytes())
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

pub fn digest_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
