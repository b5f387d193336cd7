//! Run configuration, scenario presets and layered overrides.
//!
//! Precedence, lowest first: built-in defaults, the scenario preset, the
//! config file, then `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::CostModelKind;
use crate::error::{Error, Result};
use crate::model::NetworkSpec;
use crate::optim::{OptimKind, PsgFormats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Standard mini-batch training.
    #[default]
    Smb,
    Smd,
    Slu,
    Psg,
    /// All three techniques together.
    E2train,
}

impl Scenario {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smb" => Ok(Self::Smb),
            "smd" => Ok(Self::Smd),
            "slu" => Ok(Self::Slu),
            "psg" => Ok(Self::Psg),
            "e2train" => Ok(Self::E2train),
            other => Err(Error::config(format!("unknown scenario {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Smb => "smb",
            Self::Smd => "smd",
            Self::Slu => "slu",
            Self::Psg => "psg",
            Self::E2train => "e2train",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub num_blocks: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pad: usize,
    pub block_kernel: usize,
    pub zero_init_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 40,
            num_blocks: 4,
            stem_kernel: 4,
            stem_stride: 4,
            stem_pad: 0,
            block_kernel: 3,
            zero_init_residual: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR-10 training batch files.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    pub subset_per_class: Option<usize>,
    /// Seed of the synthetic task, independent of the run seed so that
    /// runs with different seeds see the same data.
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub difficulty: f64,
    pub augment: bool,
    pub prefetch: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train_files: Vec::new(),
            test_files: Vec::new(),
            subset_per_class: Some(500),
            seed: 1234,
            n_train: 5000,
            n_test: 1000,
            classes: 10,
            difficulty: 2.5,
            augment: false,
            prefetch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Baseline iteration budget; mini-batch dropping rescales it.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_decay_fractions: Vec<f64>,
    pub lr_decay_factor: f64,
    pub eval_every: usize,
    pub ledger_every: usize,
    /// Test images used by the periodic evaluations (all at the end).
    pub eval_samples: usize,
    pub eval_batch: usize,
    /// Training images used to re-estimate batchnorm statistics under the
    /// evaluation gating after training; 0 keeps the running averages.
    pub bn_recalibration_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 16,
            lr_decay_fractions: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            eval_every: 200,
            ledger_every: 50,
            eval_samples: 500,
            eval_batch: 250,
            bn_recalibration_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub wd: f64,
    pub beta: f64,
    pub swa: bool,
    /// Fraction of the scheduled budget after which weights are averaged;
    /// defaults to the last decay point.
    pub swa_start: Option<f64>,
    pub swa_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr: 0.1,
            momentum: 0.9,
            wd: 1e-4,
            beta: 0.05,
            swa: false,
            swa_start: None,
            swa_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    /// Fixed-point forward/backward arithmetic.
    pub enabled: bool,
    pub act_bits: u32,
    pub act_msb_bits: u32,
    pub grad_bits: u32,
    pub grad_msb_bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        let f = PsgFormats::default();
        Self {
            enabled: false,
            act_bits: f.act_bits,
            act_msb_bits: f.act_msb_bits,
            grad_bits: f.grad_bits,
            grad_msb_bits: f.grad_msb_bits,
        }
    }
}

impl QuantConfig {
    pub fn formats(&self) -> PsgFormats {
        PsgFormats {
            act_bits: self.act_bits,
            act_msb_bits: self.act_msb_bits,
            grad_bits: self.grad_bits,
            grad_msb_bits: self.grad_msb_bits,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmdConfig {
    pub enabled: bool,
    pub p: f64,
    pub energy_ratio: f64,
}

impl Default for SmdConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p: 0.5,
            energy_ratio: 0.67,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SluConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub eval_threshold: f64,
    /// Initial gate output bias; positive values start out keeping blocks.
    pub head_bias: f64,
    pub gate_lr: f64,
    pub gate_momentum: f64,
}

impl Default for SluConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha: 0.05,
            eval_threshold: 0.5,
            head_bias: 2.0,
            gate_lr: 0.01,
            gate_momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    pub model: CostModelKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SnapshotConfig {
    /// Layer names such as `block0.conv1` or `fc`.
    pub layers: Vec<String>,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: Scenario,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub optim: OptimConfig,
    pub quant: QuantConfig,
    pub smd: SmdConfig,
    pub slu: SluConfig,
    pub energy: EnergyConfig,
    pub snapshot: SnapshotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scenario(Scenario::Smb)
    }
}

impl RunConfig {
    /// Defaults with the scenario preset applied.
    pub fn for_scenario(scenario: Scenario) -> Self {
        let mut c = Self {
            seed: 0,
            scenario,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            optim: OptimConfig::default(),
            quant: QuantConfig::default(),
            smd: SmdConfig::default(),
            slu: SluConfig::default(),
            energy: EnergyConfig::default(),
            snapshot: SnapshotConfig::default(),
        };
        let psg = |c: &mut Self| {
            c.optim.kind = OptimKind::Psg;
            c.optim.lr = 0.03;
            c.optim.wd = 5e-4;
            c.optim.swa = true;
            c.quant.enabled = true;
        };
        match scenario {
            Scenario::Smb => {}
            Scenario::Smd => c.smd.enabled = true,
            Scenario::Slu => c.slu.enabled = true,
            Scenario::Psg => psg(&mut c),
            Scenario::E2train => {
                c.smd.enabled = true;
                c.slu.enabled = true;
                // Under sign updates the gates settle near the eval threshold at 0.05.
                c.slu.alpha = 0.02;
                psg(&mut c);
            }
        }
        c
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let (in_channels, input_hw, classes) = match self.data.source {
            DataSource::Synthetic => (3, 16, self.data.classes),
            DataSource::Cifar10 => (3, 32, 10),
        };
        NetworkSpec {
            in_channels,
            input_hw,
            width: self.model.width,
            num_blocks: self.model.num_blocks,
            stem_kernel: self.model.stem_kernel,
            stem_stride: self.model.stem_stride,
            stem_pad: self.model.stem_pad,
            block_kernel: self.model.block_kernel,
            num_classes: classes,
            zero_init_residual: self.model.zero_init_residual,
        }
    }

    /// Scheduled iterations after mini-batch dropping is accounted for.
    pub fn scheduled_iterations(&self) -> Result<usize> {
        if self.smd.enabled {
            crate::data::scheduled_iterations(self.train.iterations, self.smd.energy_ratio, self.smd.p)
        } else {
            Ok(self.train.iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network_spec().validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch == 0 || t.eval_every == 0 || t.ledger_every == 0 {
            return Err(Error::config("batch sizes and cadences must be positive"));
        }
        if t.lr_decay_fractions.windows(2).any(|w| w[0] >= w[1])
            || t.lr_decay_fractions.iter().any(|&f| !(f > 0.0 && f < 1.0))
        {
            return Err(Error::config("decay fractions must be strictly increasing inside (0, 1)"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config("optim.lr must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.wd >= 0.0) {
            return Err(Error::config("optim.momentum must be in [0, 1) and optim.wd >= 0"));
        }
        if !(o.beta > 0.0 && o.beta < 1.0) {
            return Err(Error::config("optim.beta must be in (0, 1)"));
        }
        if o.swa_start.is_some_and(|s| !(0.0..1.0).contains(&s)) || o.swa_every == 0 {
            return Err(Error::config("optim.swa_start must be in [0, 1) and optim.swa_every >= 1"));
        }
        if self.quant.enabled || o.kind == OptimKind::Psg {
            self.quant.formats().validate()?;
        }
        if !(0.0..1.0).contains(&self.smd.p) || !(self.smd.energy_ratio > 0.0) {
            return Err(Error::config("smd.p must be in [0, 1) and smd.energy_ratio > 0"));
        }
        let s = &self.slu;
        if !(s.alpha >= 0.0) || !(0.0..=1.0).contains(&s.eval_threshold) || !(s.gate_lr > 0.0) {
            return Err(Error::config("slu.alpha >= 0, slu.eval_threshold in [0, 1], slu.gate_lr > 0"));
        }
        let d = &self.data;
        match d.source {
            DataSource::Synthetic => {
                if d.n_train < d.classes.max(t.batch_size) || d.n_test < d.classes {
                    return Err(Error::config("synthetic data too small for its classes or batch"));
                }
            }
            DataSource::Cifar10 => {
                if d.train_files.is_empty() || d.test_files.is_empty() {
                    return Err(Error::config("cifar10 needs data.train_files and data.test_files"));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Layers `file` and `overrides` over the scenario preset. The
    /// scenario is taken from `scenario`, else the file, else `smb`.
    pub fn load(file: Option<&Path>, scenario: Option<Scenario>, overrides: &[String]) -> Result<Self> {
        let file_table: toml::Table = match file {
            Some(p) => {
                let s = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&s).map_err(|e| Error::Format {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        let mut set_table = toml::Table::new();
        for o in overrides {
            apply_override(&mut set_table, o)?;
        }
        let pick = |t: &toml::Table| -> Result<Option<Scenario>> {
            t.get("scenario")
                .map(|v| v.as_str().ok_or_else(|| Error::config("scenario must be a string")).and_then(Scenario::parse))
                .transpose()
        };
        let scenario = match scenario {
            Some(s) => s,
            None => pick(&set_table)?.or(pick(&file_table)?).unwrap_or_default(),
        };
        let mut base: toml::Table = toml::Table::try_from(Self::for_scenario(scenario))?;
        merge(&mut base, file_table);
        merge(&mut base, set_table);
        base.insert("scenario".into(), toml::Value::String(scenario.name().into()));
        let c: Self = base.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `a.b.c=value` into nested tables. The value is read as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        t = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {key:?} crosses a non-table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let e = RunConfig::for_scenario(Scenario::E2train);
        assert!(e.smd.enabled && e.slu.enabled && e.quant.enabled);
        assert_eq!(e.optim.kind, OptimKind::Psg);
        assert_eq!((e.optim.lr, e.optim.wd), (0.03, 5e-4));
        assert!(!RunConfig::default().smd.enabled);
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::for_scenario(Scenario::Psg);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::load(
            None,
            Some(Scenario::Smd),
            &["smd.energy_ratio=0.5".into(), "train.iterations=10".into(), "seed=3".into()],
        )
        .unwrap();
        assert_eq!(c.smd.energy_ratio, 0.5);
        assert_eq!(c.train.iterations, 10);
        assert_eq!(c.seed, 3);
        assert!(c.smd.enabled);
        assert_eq!(c.scheduled_iterations().unwrap(), 10);
    }

    #[test]
    fn file_layering_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "scenario = \"slu\"\n[slu]\nalpha = 0.3\n").unwrap();
        let c = RunConfig::load(Some(&p), None, &[]).unwrap();
        assert!(c.slu.enabled);
        assert_eq!(c.slu.alpha, 0.3);
        std::fs::write(&p, "[slu]\nalpha = -1.0\n").unwrap();
        assert!(matches!(RunConfig::load(Some(&p), None, &[]), Err(Error::Config(_))));
        std::fs::write(&p, "[slu]\nalfa = 1.0\n").unwrap();
        assert!(RunConfig::load(Some(&p), None, &[]).is_err());
        assert!(RunConfig::load(None, None, &["train.lr_decay_fractions=[0.8, 0.5]".into()]).is_err());
    }
}
