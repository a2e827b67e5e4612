//! The merge / metrics / inspect commands.

use crate::CliError;
use seqlora_core::adapter::{
    load_adapter_file, load_weights, save_weights, LoraAdapter,
};
use seqlora_core::metrics::ScoreMatrix;
use seqlora_core::numkit::{rank_threshold, Svd, SVD_DIM_LIMIT};
use seqlora_core::strategies::{magmax_select, StrategyKind};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// Apply adapter files to base weights and write the result.
///
/// Sum-style strategies (`naive`, `merge_init`, `merge_orth`) add each
/// adapter's delta in file order. `magmax` first selects the
/// largest-magnitude factor entries per layer across all files, then
/// merges once.
pub fn cmd_merge(
    base_path: &Path,
    adapter_paths: &[PathBuf],
    strategy: StrategyKind,
    out_path: &Path,
) -> Result<(), CliError> {
    if adapter_paths.is_empty() {
        return Err(CliError::Config(
            "merge needs at least one adapter file".into(),
        ));
    }
    let base = load_weights(base_path).map_err(CliError::data)?;

    let merged = match strategy {
        StrategyKind::Magmax => {
            // Per-layer running selection across files, then one merge.
            let mut selected: Vec<LoraAdapter> = Vec::new();
            for path in adapter_paths {
                let file = load_adapter_file(path).map_err(CliError::data)?;
                for entry in file.entries {
                    let ad = entry.adapter;
                    match selected.iter_mut().find(|s| s.name == ad.name) {
                        None => selected.push(ad),
                        Some(acc) => {
                            acc.a = magmax_select(&acc.a, &ad.a).map_err(|e| {
                                CliError::Data(format!("tensor '{}.lora_A': {e}", acc.name))
                            })?;
                            acc.b = magmax_select(&acc.b, &ad.b).map_err(|e| {
                                CliError::Data(format!("tensor '{}.lora_B': {e}", acc.name))
                            })?;
                        }
                    }
                }
            }
            let mut out = base;
            for ad in &selected {
                out = out.merge_adapter(ad).map_err(|e| {
                    CliError::Data(format!("tensor '{}.lora_B x {0}.lora_A': {e}", ad.name))
                })?;
            }
            out
        }
        _ => {
            let mut out = base;
            for path in adapter_paths {
                let file = load_adapter_file(path).map_err(CliError::data)?;
                for entry in file.entries {
                    let name = entry.adapter.name.clone();
                    out = out.merge_adapter(&entry.adapter).map_err(|e| {
                        CliError::Data(format!("tensor '{name}.lora_B x {name}.lora_A': {e}"))
                    })?;
                }
            }
            out
        }
    };

    save_weights(out_path, &merged).map_err(CliError::data)?;
    eprintln!(
        "merged {} adapter file(s) into {}",
        adapter_paths.len(),
        out_path.display()
    );
    Ok(())
}

/// Recompute the two scalar metrics from a scores CSV; JSON to stdout.
pub fn cmd_metrics(scores_csv: &Path, t: usize) -> Result<(), CliError> {
    let sm = ScoreMatrix::read_csv(scores_csv, t).map_err(CliError::data)?;
    let avg_score = sm.avg_score().map_err(CliError::data)?;
    let avg_forgetting = sm.avg_forgetting().map_err(CliError::data)?;
    #[derive(Serialize)]
    struct Out {
        avg_score: f64,
        avg_forgetting: f64,
    }
    println!(
        "{}",
        serde_json::to_string(&Out {
            avg_score,
            avg_forgetting
        })
        .expect("two floats")
    );
    Ok(())
}

#[derive(Serialize)]
struct TensorInfo {
    name: String,
    dtype: &'static str,
    shape: Vec<usize>,
    frobenius_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    numerical_rank: Option<usize>,
}

#[derive(Serialize)]
struct AdapterInfo {
    layer: String,
    rank: usize,
    scale: f64,
    a_numerical_rank: Option<usize>,
    delta_frobenius_norm: f64,
}

#[derive(Serialize)]
struct InspectOut {
    path: String,
    tensors: Vec<TensorInfo>,
    adapters: Vec<AdapterInfo>,
    metadata: std::collections::BTreeMap<String, String>,
}

fn numerical_rank(m: &seqlora_core::numkit::Matrix) -> Option<usize> {
    if m.rows().min(m.cols()) > SVD_DIM_LIMIT {
        return None;
    }
    let svd = Svd::compute(m).ok()?;
    let tau = rank_threshold(m.rows(), m.cols(), svd.sigma.first().copied().unwrap_or(0.0));
    Some(svd.sigma.iter().filter(|&&s| s > tau).count())
}

/// Describe an adapter file: tensor shapes, norms, rank estimates, scale
/// metadata. JSON to stdout.
pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let file = load_adapter_file(path).map_err(CliError::data)?;

    let mut tensors = Vec::new();
    let mut adapters = Vec::new();
    for entry in &file.entries {
        let ad = &entry.adapter;
        for (suffix, m, dtype) in [
            (".lora_A", &ad.a, entry.dtype_a),
            (".lora_B", &ad.b, entry.dtype_b),
        ] {
            tensors.push(TensorInfo {
                name: format!("{}{suffix}", ad.name),
                dtype: dtype.as_str(),
                shape: vec![m.rows(), m.cols()],
                frobenius_norm: m.frobenius_norm(),
                numerical_rank: numerical_rank(m),
            });
        }
        adapters.push(AdapterInfo {
            layer: ad.name.clone(),
            rank: ad.rank(),
            scale: ad.scale,
            a_numerical_rank: numerical_rank(&ad.a),
            delta_frobenius_norm: ad
                .delta()
                .map(|d| d.frobenius_norm())
                .map_err(CliError::data)?,
        });
    }
    for t in &file.extras {
        let norm = match t.to_matrix() {
            Ok(m) => m.frobenius_norm(),
            Err(_) => f64::NAN,
        };
        tensors.push(TensorInfo {
            name: t.name.clone(),
            dtype: t.dtype.as_str(),
            shape: t.shape.clone(),
            frobenius_norm: norm,
            numerical_rank: t.to_matrix().ok().as_ref().and_then(numerical_rank),
        });
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));

    let out = InspectOut {
        path: path.display().to_string(),
        tensors,
        adapters,
        metadata: file.metadata,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("inspect output")
    );
    Ok(())
}
