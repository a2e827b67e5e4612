use seqlora_cli::config::ExperimentConfig;
use seqlora_cli::run::{execute_sweep, task_permutation};
use seqlora_core::numkit::{derive_seed, Rng};
use seqlora_core::sim::{generate_base, generate_tasks, score, SimConfig};
use seqlora_core::strategies::StrategyKind;

fn crit(cfg: &ExperimentConfig, label: &str) {
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg.clone();
    c.output_dir = dir.path().to_path_buf();
    let out = execute_sweep(&c, 8).unwrap();
    println!("{label}:");

    let base = generate_base(&c.sim).unwrap();
    let mut trng = Rng::new(derive_seed(c.sim.master_seed, "tasks", &[]));
    let tasks = generate_tasks(&c.sim, &mut trng).unwrap();
    let mut base_first = 0.0;
    for &o in &c.ordering_seeds {
        let perm = task_permutation(&c, o);
        base_first += score(&base, &base, &tasks[perm[0]]).unwrap() / c.ordering_seeds.len() as f64;
    }
    println!("  base first-task score: {base_first:.4}");

    if !out.failures.is_empty() {
        println!(
            "  {} FAILURES  e.g. {:?} {}",
            out.failures.len(),
            out.failures[0].0,
            out.failures[0].1
        );
    }
    for kind in [
        StrategyKind::Naive,
        StrategyKind::MergeInit,
        StrategyKind::MergeOrth,
        StrategyKind::Magmax,
    ] {
        let recs: Vec<_> = out.records.iter().filter(|r| r.strategy == kind).collect();
        if recs.is_empty() {
            continue;
        }
        let t = recs[0].score_matrix.t();
        let n = recs.len() as f64;
        let mut diag = vec![0.0; t];
        let mut first = vec![0.0; t];
        let mut s_sum = 0.0;
        let mut f_sum = 0.0;
        for r in &recs {
            for k in 1..=t {
                diag[k - 1] += r.score_matrix.get(k, k).unwrap() / n;
                first[k - 1] += r.score_matrix.get(1, k).unwrap() / n;
            }
            s_sum += r.report.avg_score / n;
            f_sum += r.report.avg_forgetting / n;
        }
        let dstr: String = diag.iter().map(|v| format!("{v:.2} ")).collect();
        let fstr: String = first.iter().map(|v| format!("{v:.2} ")).collect();
        println!("  {kind:<10}  S {s_sum:.4} F {f_sum:.4}  diag: {dstr} first: {fstr}");
    }
}

fn main() {
    for &(delta, lr, steps, r_task, batch, init_scale) in &[
        (0.55_f64, 0.0025_f64, 1200_usize, 4_usize, 4_usize, 1.0_f64),
        (0.55, 0.0025, 1800, 4, 4, 1.0),
        (0.55, 0.0025, 800, 4, 4, 1.0),
    ] {
        let sim = SimConfig {
            delta,
            lr,
            steps,
            r_task,
            batch,
            init_scale,
            ..SimConfig::default()
        };
        let mut cfg = ExperimentConfig {
            sim,
            ..ExperimentConfig::default()
        };
        crit(
            &cfg,
            &format!(
                "delta {delta} lr {lr} steps {steps} r_task {r_task} batch {batch} k {init_scale}"
            ),
        );
    }
}
