//! Experiment configuration: a TOML document with defaults for every key,
//! dotted-path overrides, and a stable fingerprint.

use std::path::Path;

use aroid_nn::Readout;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::augspace::SpaceKind;
use crate::error::{Error, Result};
use crate::objectives::DiversityLimits;
use crate::pg_estimator::{Baseline, PgConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub target: ModelConfig,
    pub affinity: AffinityConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `synthetic:<seed>:<n>`, `cifar10:<dir>`, `folder:<dir>` or a directory.
    pub source: String,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub readout: Readout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinityConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Training stops once train accuracy reaches this value.
    pub target_accuracy: f64,
    /// Ending below this train accuracy emits a warning.
    pub floor_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub space: SpaceKind,
    pub widths: Vec<usize>,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    pub batch_size: usize,
    pub baseline: Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    /// Learned per-image policy.
    Aroid,
    /// Plain adversarial training on unaugmented images.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub augmentation: Augmentation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub clip_norm: f32,
    /// Policy update every `interval` target iterations.
    pub interval: usize,
    pub trajectories: usize,
    pub beta: f64,
    /// `(epoch, λ)` milestones; the latest one not after the epoch applies.
    pub lambda_schedule: Vec<(usize, f64)>,
    pub diversity: DiversityLimits,
    pub warmup_epochs: usize,
    pub eps_warmup_epochs: usize,
    pub at_attack: AttackConfig,
    pub vul_attack: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub attack: AttackConfig,
    pub batch_size: usize,
    /// Evaluate only the first `test_limit` test items at epoch ends.
    pub test_limit: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            target: ModelConfig::default(),
            affinity: AffinityConfig::default(),
            policy: PolicyConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: String::new(),
            train_size: None,
            test_size: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64],
            readout: Readout::Flatten,
        }
    }
}

impl Default for AffinityConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            target_accuracy: 0.995,
            floor_accuracy: 0.9,
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            space: SpaceKind::Standard,
            widths: vec![8, 16, 32, 32],
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: 1.0,
            batch_size: 128,
            baseline: Baseline::PerSampleMean,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            augmentation: Augmentation::Aroid,
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            lr_milestones: vec![100, 150],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 1.0,
            interval: 5,
            trajectories: 8,
            beta: 0.8,
            lambda_schedule: vec![(0, 0.4), (100, 0.2), (150, 0.1)],
            diversity: DiversityLimits {
                lower: 0.9,
                upper: 4.0,
            },
            warmup_epochs: 5,
            eps_warmup_epochs: 0,
            at_attack: AttackConfig::pgd10(),
            vul_attack: AttackConfig::pgd2(),
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::pgd10(),
            batch_size: 256,
            test_limit: None,
        }
    }
}

const PRESETS: [(&str, &str); 4] = [
    ("cifar10", include_str!("../../../configs/cifar10.toml")),
    ("svhn", include_str!("../../../configs/svhn.toml")),
    ("imagenette", include_str!("../../../configs/imagenette.toml")),
    ("desk", include_str!("../../../configs/desk.toml")),
];

impl ExperimentConfig {
    /// Parses a TOML document; errors carry the line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
        Self::from_toml_str(text)
    }

    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Sets a dotted key such as `train.epochs` to a TOML literal; bare words
    /// that are not valid literals are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {} is not a table", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}={value}: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn pg(&self) -> PgConfig {
        PgConfig {
            trajectories: self.train.trajectories,
            beta: self.train.beta,
            limits: self.train.diversity,
            baseline: self.policy.baseline,
            clip_norm: self.policy.clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let bad = |m: String| Err(Error::Config(m));
        if t.interval == 0 {
            return bad("train.interval (K) must be at least 1".into());
        }
        if t.trajectories < 2 {
            return bad(format!("train.trajectories (T) must be at least 2, got {}", t.trajectories));
        }
        if t.lambda_schedule.is_empty() {
            return bad("train.lambda_schedule must not be empty".into());
        }
        if t.lambda_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("train.lambda_schedule epochs must be strictly increasing".into());
        }
        if let Some((e, l)) = t.lambda_schedule.iter().find(|(_, l)| !(*l >= 0.0)) {
            return bad(format!("train.lambda_schedule has negative λ {l} at epoch {e}"));
        }
        if t.lr_milestones.windows(2).any(|w| w[0] > w[1]) {
            return bad("train.lr_milestones must be sorted".into());
        }
        for (name, v) in [
            ("train.batch_size", t.batch_size),
            ("policy.batch_size", self.policy.batch_size),
            ("affinity.batch_size", self.affinity.batch_size),
            ("eval.batch_size", self.eval.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.target.widths.is_empty() || self.policy.widths.is_empty() {
            return bad("target.widths and policy.widths must be non-empty".into());
        }
        if !(t.clip_norm > 0.0) {
            return bad(format!("train.clip_norm must be > 0, got {}", t.clip_norm));
        }
        t.diversity.validate()?;
        t.at_attack.validate()?;
        t.vul_attack.validate()?;
        self.eval.attack.validate()?;
        self.pg().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_with_expected_values() {
        let c = ExperimentConfig::preset("cifar10").unwrap();
        assert_eq!(c.train.lambda_schedule, vec![(0, 0.4), (100, 0.2), (150, 0.1)]);
        assert_eq!(c.train.beta, 0.8);
        assert_eq!((c.train.diversity.lower, c.train.diversity.upper), (0.9, 4.0));
        assert_eq!(c.policy.lr, 0.001);
        assert_eq!(c.train.epochs, 200);
        let s = ExperimentConfig::preset("svhn").unwrap();
        assert_eq!(s.train.lambda_schedule, vec![(0, 0.01)]);
        assert_eq!(s.train.beta, 0.3);
        assert_eq!(s.train.diversity.lower, 0.7);
        assert_eq!(s.train.eps_warmup_epochs, 5);
        assert_eq!(s.train.at_attack.step_size, 1.0 / 255.0);
        let i = ExperimentConfig::preset("imagenette").unwrap();
        assert_eq!(i.train.lambda_schedule, vec![(0, 0.3)]);
        assert_eq!(i.train.diversity.lower, 0.8);
        assert_eq!(i.policy.lr, 0.1);
        assert!(ExperimentConfig::preset("desk").is_ok());
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "seed = 1\n[train]\nepochs = 3\nbogus = 2\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        let err = ExperimentConfig::from_toml_str("[train]\nepochs = \"x\"\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn invariants_enforced() {
        assert!(ExperimentConfig::from_toml_str("[train]\ninterval = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\ntrajectories = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nlambda_schedule = [[0, -0.1]]\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train.diversity]\nlower = 1.2\nupper = 4.0\n").is_err());
    }

    #[test]
    fn overrides_and_fingerprint() {
        let mut c = ExperimentConfig::default();
        let f0 = c.fingerprint();
        assert_eq!(f0, ExperimentConfig::default().fingerprint());
        assert_eq!(f0.len(), 64);
        c.set("train.epochs", "7").unwrap();
        c.set("train.at_attack.epsilon", "0.01").unwrap();
        c.set("data.source", "synthetic:1:10").unwrap();
        c.set("train.lambda_schedule", "[[0, 0.3], [4, 0.1]]").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.at_attack.epsilon, 0.01);
        assert_eq!(c.data.source, "synthetic:1:10");
        assert_eq!(c.train.lambda_schedule, vec![(0, 0.3), (4, 0.1)]);
        assert_ne!(c.fingerprint(), f0);
        assert!(c.set("train.nope", "1").is_err());
        assert!(c.set("train.interval", "0").is_err());
        assert_eq!(c.train.interval, 5);
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
    }
}
