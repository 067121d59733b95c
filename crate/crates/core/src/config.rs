//! Experiment configuration: a TOML document with one table per stage.
//! Every field has a default, so an empty file is a valid desk-scale
//! experiment.

use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::fedcore::{Aggregator, LocalConfig, LrSchedule, Stage1Config};
use crate::finetune::FinetuneConfig;
use crate::search::SearchConfig;
use crate::space::{build_space, SpaceConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    /// Directory in the tensor-dir layout; replaces the synthetic set.
    pub import_dir: Option<PathBuf>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            import_dir: None,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 32,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TierConfig {
    pub count: usize,
    pub rho_low: f64,
    pub rho_high: f64,
    /// Share of clients per tier; uniform when omitted.
    pub fractions: Option<Vec<f64>>,
    /// Random paths drawn to estimate the FLOPs distribution.
    pub samples: usize,
}

impl Default for TierConfig {
    fn default() -> Self {
        Self {
            count: 4,
            rho_low: 0.0,
            rho_high: 0.95,
            fractions: None,
            samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Central,
    Federated,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" | "centralized" => Ok(EvalMode::Central),
            "federated" => Ok(EvalMode::Federated),
            _ => Err(Error::Config(format!("unknown eval mode '{s}', expected central or federated"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// NSGA-II generations per tier.
    pub iterations: usize,
    pub population: usize,
    pub sample: usize,
    pub repair_cap: usize,
    pub eval: EvalMode,
    pub fe_rounds: usize,
    /// Clients per federated-evaluation round.
    pub fe_clients: usize,
    /// Fraction of the global validation set used for central search.
    pub val_subsample: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            iterations: 5,
            population: d.population,
            sample: d.sample,
            repair_cap: d.repair_cap,
            eval: EvalMode::Central,
            fe_rounds: 2,
            fe_clients: 8,
            val_subsample: 1.0,
        }
    }
}

impl Stage2Config {
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            iterations: self.iterations,
            population: self.population,
            sample: self.sample,
            repair_cap: self.repair_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local: LocalConfig,
    pub lr_schedule: LrSchedule,
    /// Also train the selected architectures from scratch.
    pub rand_init: bool,
    /// Rounds used when training the same architectures from scratch.
    pub rand_init_rounds: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            rounds: d.rounds,
            clients_per_round: d.clients_per_round,
            local: d.local,
            lr_schedule: d.lr_schedule,
            rand_init: false,
            rand_init_rounds: 40,
        }
    }
}

impl Stage3Config {
    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            rounds: self.rounds,
            clients_per_round: self.clients_per_round,
            local: self.local,
            lr_schedule: self.lr_schedule,
        }
    }

    /// Same schedule, stretched to the from-scratch budget.
    pub fn rand_init(&self) -> FinetuneConfig {
        FinetuneConfig {
            rounds: self.rand_init_rounds,
            ..self.finetune()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub aggregator: Aggregator,
    pub out_dir: Option<PathBuf>,
    pub space: SpaceConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub tiers: TierConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            aggregator: Aggregator::Opa,
            out_dir: None,
            space: SpaceConfig::default(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            tiers: TierConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Check cross-field constraints and fill derived defaults. Every
    /// violation is reported as `field.path: reason`.
    pub fn validate(mut self) -> Result<Self> {
        self.stage1.aggregator = self.aggregator;
        let mut errs: Vec<String> = Vec::new();
        let mut check = |ok: bool, field: &str, reason: String| {
            if !ok {
                errs.push(format!("{field}: {reason}"));
            }
        };

        if let Err(e) = build_space(&self.space) {
            check(false, "space", e.to_string());
        }
        let syn = &self.data.synthetic;
        if self.data.import_dir.is_none() {
            check(syn.classes == self.space.classes, "data.synthetic.classes",
                format!("{} differs from space.classes {}", syn.classes, self.space.classes));
            check(self.space.input_shape == [1, syn.side, syn.side], "data.synthetic.side",
                format!("images of {0}x{0} do not match space.input_shape {1:?}", syn.side, self.space.input_shape));
            check(syn.noise >= 0.0, "data.synthetic.noise", "must be >= 0".into());
            check(syn.samples > 0, "data.synthetic.samples", "must be positive".into());
        }
        let (v, t) = (self.data.val_fraction, self.data.test_fraction);
        check(v > 0.0 && v < 1.0, "data.val_fraction", format!("must be in (0, 1), got {v}"));
        check(t > 0.0 && t < 1.0, "data.test_fraction", format!("must be in (0, 1), got {t}"));
        check(v + t < 1.0, "data", format!("val_fraction + test_fraction must be < 1, got {}", v + t));

        check(self.partition.num_clients > 0, "partition.num_clients", "must be positive".into());
        check(self.partition.alpha > 0.0, "partition.alpha", format!("must be > 0, got {}", self.partition.alpha));

        let tc = &self.tiers;
        check(tc.count >= 2, "tiers.count", format!("must be >= 2, got {}", tc.count));
        check((0.0..1.0).contains(&tc.rho_low) && tc.rho_low < tc.rho_high && tc.rho_high < 1.0,
            "tiers.rho_low/rho_high", format!("require 0 <= rho_low < rho_high < 1, got [{}, {}]", tc.rho_low, tc.rho_high));
        check(tc.samples >= 1000, "tiers.samples", format!("must be >= 1000, got {}", tc.samples));
        match &tc.fractions {
            Some(f) => {
                check(f.len() == tc.count, "tiers.fractions", format!("{} entries for {} tiers", f.len(), tc.count));
                let sum: f64 = f.iter().sum();
                check((sum - 1.0).abs() < 1e-9, "tiers.fractions", format!("must sum to 1, got {sum}"));
                check(f.iter().all(|&x| x >= 0.0), "tiers.fractions", "must be non-negative".into());
            }
            None => self.tiers.fractions = Some(vec![1.0 / tc.count as f64; tc.count]),
        }

        let s1 = &self.stage1;
        check(s1.bcomm_fraction > 0.0 && s1.bcomm_fraction <= 1.0, "stage1.bcomm_fraction",
            format!("must be in (0, 1], got {}", s1.bcomm_fraction));
        check(s1.clients_per_round >= 1 && s1.clients_per_round <= self.partition.num_clients,
            "stage1.clients_per_round", format!("must be in [1, {}], got {}", self.partition.num_clients, s1.clients_per_round));
        check_local(&mut check, "stage1.local", &s1.local);

        let s2 = &self.stage2;
        check(s2.population >= 2, "stage2.population", "must be >= 2".into());
        check(s2.sample >= 2, "stage2.sample", "must be >= 2".into());
        check(s2.repair_cap >= 1, "stage2.repair_cap", "must be >= 1".into());
        check(s2.fe_rounds >= 1, "stage2.fe_rounds", "must be >= 1".into());
        check(s2.fe_clients >= 1, "stage2.fe_clients", "must be >= 1".into());
        check(s2.val_subsample > 0.0 && s2.val_subsample <= 1.0, "stage2.val_subsample",
            format!("must be in (0, 1], got {}", s2.val_subsample));

        let s3 = &self.stage3;
        check(s3.clients_per_round >= 1, "stage3.clients_per_round", "must be >= 1".into());
        check(!s3.rand_init || s3.rand_init_rounds >= 1, "stage3.rand_init_rounds", "must be >= 1".into());
        check_local(&mut check, "stage3.local", &s3.local);

        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

fn check_local(check: &mut impl FnMut(bool, &str, String), prefix: &str, l: &LocalConfig) {
    check(l.epochs >= 1, &format!("{prefix}.epochs"), "must be >= 1".into());
    check(l.batch_size >= 1, &format!("{prefix}.batch_size"), "must be >= 1".into());
    check(l.lr > 0.0, &format!("{prefix}.lr"), format!("must be > 0, got {}", l.lr));
    check((0.0..1.0).contains(&l.momentum), &format!("{prefix}.momentum"),
        format!("must be in [0, 1), got {}", l.momentum));
    if let Some(c) = l.clip_norm {
        check(c > 0.0, &format!("{prefix}.clip_norm"), format!("must be > 0, got {c}"));
    }
}
