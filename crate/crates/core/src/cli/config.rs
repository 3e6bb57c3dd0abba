use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synth_split, CifarOptions, Dataset, SamplingMode};
use crate::dist::TransportKind;
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::trainer::{LrSchedule, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DatasetConfig {
    Synth { classes: usize, train_per_class: usize, test_per_class: usize, dim: usize, spread: f64, seed: u64 },
    Cifar10 { dir: PathBuf, scale: bool, mean_subtract: bool, train_limit: Option<usize> },
    Csv { train: PathBuf, test: PathBuf, classes: Option<usize> },
}

impl DatasetConfig {
    /// `synth`, `cifar10:<dir>`, or `csv:<train>,<test>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "synth" {
            return Ok(Self::synth_default());
        }
        if let Some(dir) = s.strip_prefix("cifar10:") {
            return Ok(Self::Cifar10 { dir: dir.into(), scale: true, mean_subtract: true, train_limit: None });
        }
        if let Some(rest) = s.strip_prefix("csv:") {
            if let Some((train, test)) = rest.split_once(',') {
                return Ok(Self::Csv { train: train.into(), test: test.into(), classes: None });
            }
        }
        Err(Error::InvalidArgument(format!("unknown dataset `{s}` (expected synth, cifar10:<dir>, csv:<train>,<test>)")))
    }

    pub fn synth_default() -> Self {
        Self::Synth { classes: 8, train_per_class: 200, test_per_class: 100, dim: 2, spread: 0.25, seed: 0 }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            Self::Synth { classes, train_per_class, test_per_class, dim, spread, seed } => {
                synth_split(*classes, *train_per_class, *test_per_class, *dim, *spread, *seed)
            }
            Self::Cifar10 { dir, scale, mean_subtract, train_limit } => {
                let (train, test) =
                    crate::data::load_cifar10(dir, CifarOptions { scale: *scale, mean_subtract: *mean_subtract })?;
                match train_limit {
                    Some(n) if *n < train.len() => Ok((train.subset(&(0..*n).collect::<Vec<_>>())?, test)),
                    _ => Ok((train, test)),
                }
            }
            Self::Csv { train, test, classes } => {
                let tr = Dataset::read_csv(train, *classes)?;
                let te = Dataset::read_csv(test, Some(tr.classes()))?;
                Ok((tr, te))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MclAlgorithm {
    Sgd,
    Classical { rounds: usize },
}

/// Fully resolved run description; `config.json` in every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub spec: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// Hidden widths of the default fully connected network.
    pub hidden: Vec<usize>,
    pub members: usize,
    pub split: String,
    pub loss: LossMode,
    pub k: Option<usize>,
    pub mix: f64,
    pub normalize_by_k: bool,
    pub sampling: SamplingMode,
    pub mcl_algorithm: MclAlgorithm,
    pub he_init: bool,
    pub init_std: f64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub tiebreak_seed: u64,
    pub sgd: SgdConfig,
    pub stop_rule: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub init_from: Option<PathBuf>,
    pub out: PathBuf,
    pub world_size: usize,
    pub rank: Option<usize>,
    pub transport: TransportKind,
    pub bind: Option<String>,
    pub connect: Vec<String>,
}

pub const PRESETS: [&str; 4] = ["cifar10-quick", "synth-mcl", "synth-treenet", "bagging-study"];

impl RunConfig {
    pub fn base(out: PathBuf) -> Self {
        Self {
            preset: None,
            spec: None,
            dataset: DatasetConfig::synth_default(),
            hidden: vec![32],
            members: 1,
            split: "none".into(),
            loss: LossMode::IndependentCe,
            k: None,
            mix: 0.5,
            normalize_by_k: false,
            sampling: SamplingMode::Shared,
            mcl_algorithm: MclAlgorithm::Sgd,
            he_init: false,
            init_std: 0.01,
            init_seed: 0,
            data_seed: 0,
            tiebreak_seed: 0,
            sgd: SgdConfig { lr: 0.05, momentum: 0.9, batch_size: 64, iterations: 2000, ..SgdConfig::default() },
            stop_rule: false,
            log_every: 100,
            checkpoint_every: 0,
            init_from: None,
            out,
            world_size: 1,
            rank: None,
            transport: TransportKind::InProcess,
            bind: None,
            connect: Vec::new(),
        }
    }

    pub fn preset(name: &str, out: PathBuf) -> Result<Self> {
        let mut c = Self::base(out);
        c.preset = Some(name.to_string());
        match name {
            "cifar10-quick" => {
                c.dataset = DatasetConfig::Cifar10 {
                    dir: "data/cifar-10-batches-bin".into(),
                    scale: true,
                    mean_subtract: true,
                    train_limit: None,
                };
                c.members = 4;
                c.sgd = SgdConfig {
                    lr: 0.001,
                    momentum: 0.9,
                    weight_decay: 0.004,
                    batch_size: 350,
                    iterations: 5000,
                    schedule: LrSchedule::Milestones { factor: 0.1, at: vec![4000] },
                    accumulation_steps: 1,
                    lr_ensemble_scale: true,
                };
                c.log_every = 100;
                c.checkpoint_every = 1000;
            }
            "synth-mcl" => {
                c.dataset = DatasetConfig::Synth {
                    classes: 8,
                    train_per_class: 200,
                    test_per_class: 200,
                    dim: 2,
                    spread: 0.3,
                    seed: 0,
                };
                c.hidden = vec![32];
                c.members = 4;
                c.loss = LossMode::Mcl;
                c.k = Some(1);
                c.he_init = true;
                c.sgd = SgdConfig { lr: 0.05, momentum: 0.9, batch_size: 64, iterations: 6000, ..SgdConfig::default() };
            }
            "synth-treenet" => {
                c.hidden = vec![32, 32];
                c.members = 4;
                c.split = "fc1".into();
                c.he_init = true;
                c.sgd.iterations = 3000;
            }
            "bagging-study" => {
                c.hidden = vec![32];
                c.members = 4;
                c.sampling = SamplingMode::Bagged;
                c.he_init = true;
                c.sgd.iterations = 2000;
            }
            other => {
                return Err(Error::InvalidArgument(format!("unknown preset `{other}` (one of {})", PRESETS.join(", "))))
            }
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn k_or_default(&self) -> usize {
        self.k.unwrap_or(1)
    }

    /// Every inconsistency, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.sgd.problems();
        let mcl = self.loss.uses_assignment();
        if self.members == 0 {
            p.push("--members must be at least 1".into());
        }
        match self.k {
            Some(_) if !mcl => p.push(format!("--k requires an MCL loss, not {}", self.loss)),
            Some(k) if self.spec.is_none() && !(1..=self.members).contains(&k) => {
                p.push(format!("--k {k} must lie in [1, {}] (the number of members)", self.members))
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.mix) {
            p.push(format!("--mix must lie in [0, 1], got {}", self.mix));
        }
        if self.sampling != SamplingMode::Shared {
            if self.loss != LossMode::IndependentCe {
                p.push(format!("sampling mode {:?} trains members separately and needs independent-ce", self.sampling));
            }
            if self.split != "none" {
                p.push("per-member sampling cannot share layers; use --split none".into());
            }
            if self.world_size > 1 {
                p.push("per-member sampling is single-process only".into());
            }
        }
        if let SamplingMode::UniqueSubset { fraction } = self.sampling {
            if !(fraction > 0.0 && fraction <= 1.0) {
                p.push(format!("--unique-fraction must lie in (0, 1], got {fraction}"));
            }
        }
        if let MclAlgorithm::Classical { rounds } = self.mcl_algorithm {
            if self.loss != LossMode::Mcl || self.k_or_default() != 1 {
                p.push("classical MCL needs --loss mcl with k = 1".into());
            }
            if self.split != "none" || self.sampling != SamplingMode::Shared || self.world_size > 1 {
                p.push("classical MCL needs --split none, shared sampling and one process".into());
            }
            if rounds == 0 {
                p.push("classical MCL needs at least one round".into());
            }
        }
        if self.init_std <= 0.0 {
            p.push(format!("--init-std must be positive, got {}", self.init_std));
        }
        if self.world_size == 0 {
            p.push("--world-size must be at least 1".into());
        }
        if self.world_size > 1 {
            if self.spec.is_none() && self.members != self.world_size {
                p.push(format!(
                    "distributed TreeNets place one member per rank: --members {} but --world-size {}",
                    self.members, self.world_size
                ));
            }
            if self.sgd.schedule.is_plateau() {
                p.push("plateau schedules are not supported with --world-size > 1".into());
            }
            if self.stop_rule {
                p.push("--stop-rule is not supported with --world-size > 1".into());
            }
        }
        if let Some(r) = self.rank {
            if r >= self.world_size {
                p.push(format!("--rank {r} outside --world-size {}", self.world_size));
            }
            if self.transport != TransportKind::Tcp {
                p.push("--rank runs one process of a multi-process job and needs --transport tcp".into());
            }
            if self.connect.len() != self.world_size {
                p.push(format!(
                    "--connect lists {} addresses; one per rank ({}) is required",
                    self.connect.len(),
                    self.world_size
                ));
            }
        }
        for a in self.connect.iter().chain(&self.bind) {
            if a.parse::<std::net::SocketAddr>().is_err() {
                p.push(format!("`{a}` is not a socket address (host:port)"));
            }
        }
        if let DatasetConfig::Synth { classes, train_per_class, dim, spread, .. } = &self.dataset {
            if *classes < 2 || *train_per_class == 0 || *dim == 0 || *spread < 0.0 {
                p.push("synthetic data needs ≥ 2 classes, ≥ 1 example per class, dim ≥ 1 and spread ≥ 0".into());
            }
        }
        p
    }
}
