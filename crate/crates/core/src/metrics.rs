//! Continual-learning evaluation: the task-by-checkpoint score matrix,
//! average score, average forgetting, first-task retention curves, and the
//! CSV / JSON export formats used by the sweep runner.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("score {value} at ({j},{k}) outside [-1, 1] or not finite")]
    InvalidScore { j: usize, k: usize, value: f64 },
    #[error("cell index ({j},{k}) outside a {t}x{t} matrix")]
    OutOfRange { j: usize, k: usize, t: usize },
    #[error("incomplete score matrix; missing cells (task_j, after_k): {}", format_cells(missing))]
    Incomplete { missing: Vec<(usize, usize)> },
    #[error("average forgetting undefined for T={0}; need T >= 2")]
    UndefinedForgetting(usize),
    #[error("no reports to aggregate")]
    EmptyAggregate,
    #[error("reports disagree on T: {0} vs {1}")]
    MixedT(usize, usize),
    #[error("{path}:{line}: {detail}")]
    Csv {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_cells(cells: &[(usize, usize)]) -> String {
    let shown: Vec<String> = cells
        .iter()
        .take(8)
        .map(|(j, k)| format!("({j},{k})"))
        .collect();
    let suffix = if cells.len() > 8 {
        format!(" and {} more", cells.len() - 8)
    } else {
        String::new()
    };
    format!("{}{}", shown.join(", "), suffix)
}

/// T x T grid of scores: cell (j, k) is the score on the task trained at
/// sequence position j, measured after training through position k. Both
/// indices are 1-based at the API surface, matching the usual S_j^k
/// notation; unevaluated cells stay distinct from zero scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    t: usize,
    cells: Vec<Option<f64>>,
}

impl ScoreMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            cells: vec![None; t * t],
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    fn idx(&self, j: usize, k: usize) -> Result<usize, MetricsError> {
        if j == 0 || k == 0 || j > self.t || k > self.t {
            return Err(MetricsError::OutOfRange { j, k, t: self.t });
        }
        Ok((j - 1) * self.t + (k - 1))
    }

    pub fn set(&mut self, j: usize, k: usize, value: f64) -> Result<(), MetricsError> {
        if !value.is_finite() || !(-1.0..=1.0).contains(&value) {
            return Err(MetricsError::InvalidScore { j, k, value });
        }
        let idx = self.idx(j, k)?;
        self.cells[idx] = Some(value);
        Ok(())
    }

    pub fn get(&self, j: usize, k: usize) -> Option<f64> {
        self.idx(j, k).ok().and_then(|i| self.cells[i])
    }

    fn require(&self, j: usize, k: usize) -> Result<f64, MetricsError> {
        self.get(j, k).ok_or(MetricsError::Incomplete {
            missing: vec![(j, k)],
        })
    }

    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut missing = Vec::new();
        for j in 1..=self.t {
            for k in 1..=self.t {
                if self.get(j, k).is_none() {
                    missing.push((j, k));
                }
            }
        }
        missing
    }

    /// Mean final-column score: `avg_score = (1/T) sum_j s[j][T]`.
    pub fn avg_score(&self) -> Result<f64, MetricsError> {
        let missing: Vec<(usize, usize)> = (1..=self.t)
            .filter(|&j| self.get(j, self.t).is_none())
            .map(|j| (j, self.t))
            .collect();
        if !missing.is_empty() {
            return Err(MetricsError::Incomplete { missing });
        }
        let sum: f64 = (1..=self.t)
            .map(|j| self.get(j, self.t).unwrap())
            .sum();
        Ok(sum / self.t as f64)
    }

    /// Mean over tasks j < T of `max_k s[j][k] - s[j][T]`, the gap between
    /// a task's best-ever score and its final score. The max ranges over
    /// every checkpoint k = 1..T, applied literally, so the result is
    /// always >= 0 (k = T is in the range).
    pub fn avg_forgetting(&self) -> Result<f64, MetricsError> {
        if self.t < 2 {
            return Err(MetricsError::UndefinedForgetting(self.t));
        }
        let mut missing = Vec::new();
        for j in 1..self.t {
            for k in 1..=self.t {
                if self.get(j, k).is_none() {
                    missing.push((j, k));
                }
            }
        }
        if !missing.is_empty() {
            return Err(MetricsError::Incomplete { missing });
        }
        let mut total = 0.0;
        for j in 1..self.t {
            let last = self.require(j, self.t)?;
            let best = (1..=self.t)
                .map(|k| self.require(j, k).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            total += best - last;
        }
        Ok(total / (self.t - 1) as f64)
    }

    /// CSV with header `task_j,after_k,score`, rows in (j, k) lexicographic
    /// order, one row per cell; unevaluated cells keep an empty score field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_j,after_k,score\n");
        for j in 1..=self.t {
            for k in 1..=self.t {
                match self.get(j, k) {
                    Some(v) => writeln!(out, "{j},{k},{v}").unwrap(),
                    None => writeln!(out, "{j},{k},").unwrap(),
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Parse the heatmap CSV. `t` caps the matrix size; cell indices beyond
    /// it are an error, missing rows just leave cells unevaluated.
    pub fn from_csv(text: &str, t: usize, path: &str) -> Result<Self, MetricsError> {
        let mut sm = ScoreMatrix::new(t);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "task_j,after_k,score" => {}
            Some((_, header)) => {
                return Err(MetricsError::Csv {
                    path: path.to_string(),
                    line: 1,
                    detail: format!("bad header '{header}', expected 'task_j,after_k,score'"),
                })
            }
            None => {
                return Err(MetricsError::Csv {
                    path: path.to_string(),
                    line: 1,
                    detail: "empty file".into(),
                })
            }
        }
        for (lineno, line) in lines {
            let line_1 = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(MetricsError::Csv {
                    path: path.to_string(),
                    line: line_1,
                    detail: format!("expected 3 fields, got {}", parts.len()),
                });
            }
            let parse_idx = |s: &str, what: &str| {
                s.trim().parse::<usize>().map_err(|_| MetricsError::Csv {
                    path: path.to_string(),
                    line: line_1,
                    detail: format!("bad {what} '{s}'"),
                })
            };
            let j = parse_idx(parts[0], "task_j")?;
            let k = parse_idx(parts[1], "after_k")?;
            if parts[2].trim().is_empty() {
                continue; // unevaluated cell
            }
            let value = parts[2]
                .trim()
                .parse::<f64>()
                .map_err(|_| MetricsError::Csv {
                    path: path.to_string(),
                    line: line_1,
                    detail: format!("bad score '{}'", parts[2]),
                })?;
            sm.set(j, k, value).map_err(|e| MetricsError::Csv {
                path: path.to_string(),
                line: line_1,
                detail: e.to_string(),
            })?;
        }
        Ok(sm)
    }

    pub fn read_csv(path: impl AsRef<Path>, t: usize) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text, t, &path.display().to_string())
    }
}

/// Summary of one run: the two scalar metrics plus the per-task final
/// scores and the first-task retention curve (S_1^k for k = 1..T).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CLReport {
    pub avg_score: f64,
    pub avg_forgetting: f64,
    pub per_task_final: Vec<f64>,
    pub first_task_curve: Vec<f64>,
}

impl CLReport {
    pub fn from_matrix(sm: &ScoreMatrix) -> Result<Self, MetricsError> {
        let avg_score = sm.avg_score()?;
        let avg_forgetting = sm.avg_forgetting()?;
        let per_task_final = (1..=sm.t()).map(|j| sm.get(j, sm.t()).unwrap()).collect();
        let first_task_curve = (1..=sm.t())
            .map(|k| sm.require(1, k))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            avg_score,
            avg_forgetting,
            per_task_final,
            first_task_curve,
        })
    }

    pub fn t(&self) -> usize {
        self.per_task_final.len()
    }
}

/// Elementwise mean and population standard deviation across runs.
///
/// Inputs are sorted into a canonical order internally, so the result does
/// not depend on how callers happened to order the runs.
pub fn aggregate_runs(reports: &[CLReport]) -> Result<(CLReport, CLReport), MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyAggregate);
    }
    let t = reports[0].t();
    for r in reports {
        if r.t() != t {
            return Err(MetricsError::MixedT(t, r.t()));
        }
    }
    let mut sorted: Vec<&CLReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.avg_score
            .total_cmp(&b.avg_score)
            .then(a.avg_forgetting.total_cmp(&b.avg_forgetting))
            .then_with(|| {
                for (x, y) in a.per_task_final.iter().zip(&b.per_task_final) {
                    let ord = x.total_cmp(y);
                    if ord != std::cmp::Ordering::Equal {
                        return ord;
                    }
                }
                std::cmp::Ordering::Equal
            })
    });

    let n = sorted.len() as f64;
    let mean_of = |pick: &dyn Fn(&CLReport) -> f64| sorted.iter().map(|r| pick(r)).sum::<f64>() / n;
    let std_of = |pick: &dyn Fn(&CLReport) -> f64, mean: f64| {
        (sorted
            .iter()
            .map(|r| {
                let d = pick(r) - mean;
                d * d
            })
            .sum::<f64>()
            / n)
            .sqrt()
    };

    let mut mean = CLReport {
        avg_score: 0.0,
        avg_forgetting: 0.0,
        per_task_final: vec![0.0; t],
        first_task_curve: vec![0.0; t],
    };
    let mut std = mean.clone();

    let ms = mean_of(&|r: &CLReport| r.avg_score);
    mean.avg_score = ms;
    std.avg_score = std_of(&|r: &CLReport| r.avg_score, ms);
    let mf = mean_of(&|r: &CLReport| r.avg_forgetting);
    mean.avg_forgetting = mf;
    std.avg_forgetting = std_of(&|r: &CLReport| r.avg_forgetting, mf);
    for i in 0..t {
        let m = mean_of(&|r: &CLReport| r.per_task_final[i]);
        mean.per_task_final[i] = m;
        std.per_task_final[i] = std_of(&|r: &CLReport| r.per_task_final[i], m);
        let m = mean_of(&|r: &CLReport| r.first_task_curve[i]);
        mean.first_task_curve[i] = m;
        std.first_task_curve[i] = std_of(&|r: &CLReport| r.first_task_curve[i], m);
    }
    Ok((mean, std))
}

/// One run's identity and report inside an aggregate file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReportEntry {
    pub ordering_seed: u64,
    pub run_seed: u64,
    pub report: CLReport,
}

/// The per-strategy aggregate written next to the runs. Field order is the
/// serialization order, which keeps reruns byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub strategy: String,
    pub config_digest: String,
    pub runs: Vec<RunReportEntry>,
    pub mean: CLReport,
    pub std: CLReport,
}

pub fn write_report_file(path: impl AsRef<Path>, report: &ReportFile) -> Result<(), MetricsError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_report_file(path: impl AsRef<Path>) -> Result<ReportFile, MetricsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| MetricsError::Csv {
        path: path.display().to_string(),
        line: e.line(),
        detail: e.to_string(),
    })
}
