//! The sweep runner: strategies x task orderings x run seeds, each run an
//! isolated deterministic computation, aggregated in sorted key order so
//! results never depend on scheduling.

use crate::config::ExperimentConfig;
use crate::CliError;
use rayon::prelude::*;
use seqlora_core::adapter::BaseWeights;
use seqlora_core::metrics::{
    aggregate_runs, write_report_file, CLReport, ReportFile, RunReportEntry, ScoreMatrix,
};
use seqlora_core::numkit::{derive_seed, Rng, RNG_ALGORITHM};
use seqlora_core::sim::{generate_base, generate_tasks, score, train_adapter, SimError, TaskSpec};
use seqlora_core::strategies::{AdapterSpec, StrategyKind, StrategyState};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One run's identity within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub strategy: StrategyKind,
    pub ordering_seed: u64,
    pub run_seed: u64,
}

impl RunKey {
    pub fn dir_name(&self) -> String {
        format!("run_{}_{}", self.ordering_seed, self.run_seed)
    }
}

/// Everything one run produces. Reproducible from (config, key) alone.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub strategy: StrategyKind,
    pub ordering_seed: u64,
    pub run_seed: u64,
    pub score_matrix: ScoreMatrix,
    pub report: CLReport,
    pub wall_time_secs: f64,
}

/// How far a sweep got, with partial results preserved on failure.
#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<(RunKey, String)>,
    pub aggregates: Vec<ReportFile>,
}

impl SweepOutcome {
    pub fn aggregate_for(&self, kind: StrategyKind) -> Option<&ReportFile> {
        self.aggregates.iter().find(|a| a.strategy == kind.as_str())
    }
}

fn strategies_by_name(v: &[StrategyKind]) -> Vec<StrategyKind> {
    let mut out = v.to_vec();
    out.sort_by_key(|k| k.as_str());
    out
}

/// The task ordering used by a given ordering seed: a Fisher-Yates shuffle
/// of the task indices, independent of strategy and run seed.
pub fn task_permutation(cfg: &ExperimentConfig, ordering_seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..cfg.sim.tasks).collect();
    let mut rng = Rng::new(derive_seed(
        cfg.sim.master_seed,
        "ordering",
        &[ordering_seed],
    ));
    rng.shuffle(&mut perm);
    perm
}

/// Drive one strategy through the whole permuted task sequence, filling
/// the full T x T score matrix at every boundary.
pub fn run_single(
    cfg: &ExperimentConfig,
    base: &BaseWeights,
    tasks: &[TaskSpec],
    key: RunKey,
) -> Result<RunRecord, SimError> {
    let started = Instant::now();
    let t = cfg.sim.tasks;
    let perm = task_permutation(cfg, key.ordering_seed);
    let spec = AdapterSpec {
        orth_mode: cfg.orth_mode,
        std_a: cfg.sim.adapter_init_std(),
        ..AdapterSpec::new(cfg.sim.r)
    };
    let mut state = StrategyState::new(key.strategy, base.clone(), spec);
    let mut sm = ScoreMatrix::new(t);

    for pos in 0..t {
        let task = &tasks[perm[pos]];
        let mut init_rng = Rng::new(derive_seed(
            cfg.sim.master_seed,
            "init",
            &[key.ordering_seed, key.run_seed, pos as u64],
        ));
        let mut train_rng = Rng::new(derive_seed(
            cfg.sim.master_seed,
            "train",
            &[key.ordering_seed, key.run_seed, pos as u64],
        ));
        let ctx = state
            .begin_task(&mut init_rng)
            .map_err(|e| SimError::Config(e.to_string()))?;
        let outcome = train_adapter(&ctx, task, base, &cfg.sim, &mut train_rng)?;
        state
            .end_task(outcome.adapters)
            .map_err(|e| SimError::Config(e.to_string()))?;

        let weights = state
            .final_weights()
            .map_err(|e| SimError::Config(e.to_string()))?;
        for j in 0..t {
            let s = score(&weights, base, &tasks[perm[j]])?;
            sm.set(j + 1, pos + 1, s)
                .map_err(|e| SimError::Config(e.to_string()))?;
        }
    }

    let report = CLReport::from_matrix(&sm).map_err(|e| SimError::Config(e.to_string()))?;
    Ok(RunRecord {
        strategy: key.strategy,
        ordering_seed: key.ordering_seed,
        run_seed: key.run_seed,
        score_matrix: sm,
        report,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[derive(Serialize)]
struct RecordJson<'a> {
    strategy: &'a str,
    ordering_seed: u64,
    run_seed: u64,
    report: &'a CLReport,
    wall_time_secs: f64,
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    strategy: &'a str,
    ordering_seed: u64,
    run_seed: u64,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time_secs: Option<f64>,
    path: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    config_digest: String,
    rng_algorithm: &'a str,
    runs: Vec<ManifestRun<'a>>,
}

/// Run the whole sweep and write the output tree:
/// `<out>/<strategy>/run_<ordering>_<seed>/scores.csv`, per-strategy
/// `aggregate.json`, and a root `manifest.json`. Returns the in-memory
/// outcome; any failed run is recorded, not fatal.
pub fn execute_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome, CliError> {
    cfg.validate()?;
    let out_dir = &cfg.output_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;

    let base = generate_base(&cfg.sim).map_err(CliError::data)?;
    let mut task_rng = Rng::new(derive_seed(cfg.sim.master_seed, "tasks", &[]));
    let tasks = generate_tasks(&cfg.sim, &mut task_rng).map_err(CliError::data)?;

    let mut keys = Vec::new();
    for &strategy in &strategies_by_name(&cfg.strategies) {
        for &ordering_seed in &cfg.ordering_seeds {
            for &run_seed in &cfg.run_seeds {
                keys.push(RunKey {
                    strategy,
                    ordering_seed,
                    run_seed,
                });
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let results: Vec<(RunKey, Result<RunRecord, SimError>)> = pool.install(|| {
        keys.par_iter()
            .map(|&key| {
                let res = run_single(cfg, &base, &tasks, key);
                match &res {
                    Ok(r) => eprintln!(
                        "done {} {} ({:.2}s)",
                        key.strategy,
                        key.dir_name(),
                        r.wall_time_secs
                    ),
                    Err(e) => eprintln!("FAILED {} {}: {e}", key.strategy, key.dir_name()),
                }
                (key, res)
            })
            .collect()
    });

    // Aggregation and file writes happen after the full barrier, keyed in
    // sorted order.
    let mut sorted = results;
    sorted.sort_by_key(|(key, _)| *key);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (key, res) in sorted {
        match res {
            Ok(rec) => {
                let dir = out_dir.join(key.strategy.as_str()).join(key.dir_name());
                std::fs::create_dir_all(&dir)
                    .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
                rec.score_matrix
                    .write_csv(dir.join("scores.csv"))
                    .map_err(CliError::data)?;
                write_json(
                    &dir.join("record.json"),
                    &RecordJson {
                        strategy: key.strategy.as_str(),
                        ordering_seed: key.ordering_seed,
                        run_seed: key.run_seed,
                        report: &rec.report,
                        wall_time_secs: rec.wall_time_secs,
                    },
                )?;
                records.push(rec);
            }
            Err(e) => failures.push((key, e.to_string())),
        }
    }

    let mut aggregates = Vec::new();
    for &strategy in &strategies_by_name(&cfg.strategies) {
        let strat_records: Vec<&RunRecord> =
            records.iter().filter(|r| r.strategy == strategy).collect();
        let expected = cfg.ordering_seeds.len() * cfg.run_seeds.len();
        if strat_records.len() != expected {
            continue; // partial strategy: no aggregate, manifest tells why
        }
        let reports: Vec<CLReport> = strat_records.iter().map(|r| r.report.clone()).collect();
        let (mean, std) = aggregate_runs(&reports).map_err(CliError::data)?;
        let report_file = ReportFile {
            strategy: strategy.as_str().to_string(),
            config_digest: cfg.digest(),
            runs: strat_records
                .iter()
                .map(|r| RunReportEntry {
                    ordering_seed: r.ordering_seed,
                    run_seed: r.run_seed,
                    report: r.report.clone(),
                })
                .collect(),
            mean,
            std,
        };
        let path = out_dir.join(strategy.as_str()).join("aggregate.json");
        std::fs::create_dir_all(path.parent().unwrap())
            .map_err(|e| CliError::Data(e.to_string()))?;
        write_report_file(&path, &report_file).map_err(CliError::data)?;
        aggregates.push(report_file);
    }

    let manifest = Manifest {
        config: cfg,
        config_digest: cfg.digest(),
        rng_algorithm: RNG_ALGORITHM,
        runs: {
            let mut rows = Vec::new();
            for rec in &records {
                rows.push(ManifestRun {
                    strategy: rec.strategy.as_str(),
                    ordering_seed: rec.ordering_seed,
                    run_seed: rec.run_seed,
                    status: "ok",
                    error: None,
                    wall_time_secs: Some(rec.wall_time_secs),
                    path: format!(
                        "{}/run_{}_{}/scores.csv",
                        rec.strategy, rec.ordering_seed, rec.run_seed
                    ),
                });
            }
            for (key, err) in &failures {
                rows.push(ManifestRun {
                    strategy: key.strategy.as_str(),
                    ordering_seed: key.ordering_seed,
                    run_seed: key.run_seed,
                    status: "failed",
                    error: Some(err),
                    wall_time_secs: None,
                    path: format!("{}/{}", key.strategy.as_str(), key.dir_name()),
                });
            }
            rows.sort_by(|a, b| {
                (a.strategy, a.ordering_seed, a.run_seed)
                    .cmp(&(b.strategy, b.ordering_seed, b.run_seed))
            });
            rows
        },
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    Ok(SweepOutcome {
        records,
        failures,
        aggregates,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// `run` command entry: resolve config, honor `--print-config`, sweep,
/// map failures to the exit-code contract.
pub fn cmd_run(
    config_path: Option<PathBuf>,
    overrides: crate::config::Overrides,
    jobs: Option<usize>,
    print_config: bool,
) -> Result<(), CliError> {
    let file = match &config_path {
        Some(p) => Some(crate::config::ConfigFile::load(p)?),
        None => None,
    };
    let cfg = ExperimentConfig::resolve(file, &overrides)?;
    if print_config {
        print!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    let jobs = jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let outcome = execute_sweep(&cfg, jobs)?;
    if !outcome.failures.is_empty() {
        return Err(CliError::Data(format!(
            "{} of {} runs failed; partial results and manifest kept in {}",
            outcome.failures.len(),
            outcome.failures.len() + outcome.records.len(),
            cfg.output_dir.display()
        )));
    }
    Ok(())
}
