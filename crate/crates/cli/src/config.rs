//! Experiment configuration: a flat JSON file whose keys are the simulator
//! and sweep fields, with CLI flags overriding file values. The resolved
//! config is one canonical artifact; its digest names the experiment in
//! every output file.

use crate::CliError;
use seqlora_core::adapter::OrthMode;
use seqlora_core::numkit::digest64;
use seqlora_core::sim::SimConfig;
use seqlora_core::strategies::StrategyKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// On-disk config: every field optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub r: Option<usize>,
    pub r_task: Option<usize>,
    pub delta: Option<f64>,
    pub rho: Option<f64>,
    pub tasks: Option<usize>,
    pub lr: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub probes: Option<usize>,
    pub n_eval: Option<usize>,
    pub init_scale: Option<f64>,
    pub layers: Option<usize>,
    pub train_anchor: Option<seqlora_core::sim::TrainAnchor>,
    pub master_seed: Option<u64>,
    pub strategies: Option<Vec<String>>,
    pub ordering_seeds: Option<Vec<u64>>,
    pub run_seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub orth_mode: Option<OrthMode>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag overrides accepted by `seqlora run`.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub strategies: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rho: Option<f64>,
    pub tasks: Option<usize>,
}

/// Fully-resolved experiment: simulator knobs plus the sweep grid.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub sim: SimConfig,
    pub strategies: Vec<StrategyKind>,
    pub ordering_seeds: Vec<u64>,
    pub run_seeds: Vec<u64>,
    pub orth_mode: OrthMode,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            strategies: StrategyKind::ALL.to_vec(),
            ordering_seeds: vec![0, 5, 10, 42],
            run_seeds: vec![0, 5],
            orth_mode: OrthMode::Project,
            output_dir: PathBuf::from("results"),
        }
    }
}

fn parse_strategies(names: &[String]) -> Result<Vec<StrategyKind>, CliError> {
    let mut out = Vec::new();
    for name in names {
        let kind: StrategyKind = name.trim().parse().map_err(CliError::config)?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("strategy list is empty".into()));
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Apply file values over defaults, then flag overrides over both.
    pub fn resolve(file: Option<ConfigFile>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        if let Some(f) = file {
            let s = &mut cfg.sim;
            macro_rules! take {
                ($($field:ident),*) => {
                    $(if let Some(v) = f.$field { s.$field = v; })*
                };
            }
            take!(m, n, r, r_task, delta, rho, tasks, lr, steps, batch, probes, n_eval, init_scale, layers, train_anchor, master_seed);
            if let Some(names) = f.strategies {
                cfg.strategies = parse_strategies(&names)?;
            }
            if let Some(v) = f.ordering_seeds {
                cfg.ordering_seeds = v;
            }
            if let Some(v) = f.run_seeds {
                cfg.run_seeds = v;
            }
            if let Some(v) = f.output_dir {
                cfg.output_dir = v;
            }
            if let Some(v) = f.orth_mode {
                cfg.orth_mode = v;
            }
        }
        if let Some(names) = &flags.strategies {
            cfg.strategies = parse_strategies(names)?;
        }
        if let Some(out) = &flags.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = flags.seed {
            cfg.sim.master_seed = seed;
        }
        if let Some(rho) = flags.rho {
            cfg.sim.rho = rho;
        }
        if let Some(tasks) = flags.tasks {
            cfg.sim.tasks = tasks;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(CliError::config)?;
        if self.sim.tasks < 2 {
            return Err(CliError::Config(
                "tasks must be >= 2: average forgetting is undefined for a single task".into(),
            ));
        }
        if self.strategies.is_empty() {
            return Err(CliError::Config("strategy list is empty".into()));
        }
        if self.ordering_seeds.is_empty() || self.run_seeds.is_empty() {
            return Err(CliError::Config("seed lists must be non-empty".into()));
        }
        Ok(())
    }

    /// Content digest of everything that determines the numbers: the
    /// simulator config and the sweep grid, but not the output location.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct DigestView<'a> {
            sim: &'a SimConfig,
            strategies: &'a [StrategyKind],
            ordering_seeds: &'a [u64],
            run_seeds: &'a [u64],
            orth_mode: &'a OrthMode,
        }
        let canonical = serde_json::to_string(&DigestView {
            sim: &self.sim,
            strategies: &self.strategies,
            ordering_seeds: &self.ordering_seeds,
            run_seeds: &self.run_seeds,
            orth_mode: &self.orth_mode,
        })
        .expect("config serializes");
        format!("{:016x}", digest64(canonical.as_bytes()))
    }

    /// The flat resolved-config JSON dumped by `--print-config`.
    pub fn to_pretty_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
