//! The four continual personalization methods behind one state machine:
//! `begin_task` hands out a training context, training happens elsewhere,
//! `end_task` absorbs the trained adapter, `final_weights` produces the
//! deployable model.
//!
//! The storage regime is strict: between tasks a state holds at most the
//! frozen base, one merged copy and one adapter per layer. Nothing grows
//! with the task count.

use crate::adapter::{AdapterError, BaseWeights, LoraAdapter, OrthMode};
use crate::numkit::{Matrix, NumError, Rng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("unknown strategy '{0}' (expected naive|merge_init|merge_orth|magmax)")]
    UnknownKind(String),
    #[error("contract violation: {0}")]
    Contract(&'static str),
    #[error("trained adapter set has {got} layers, state has {want}")]
    LayerCount { got: usize, want: usize },
    #[error("trained adapter {idx} is named '{got}', expected '{want}'")]
    LayerName {
        idx: usize,
        got: String,
        want: String,
    },
    #[error("no completed task; train at least one before asking for weights")]
    NoCompletedTask,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// The four methods. The string names are stable identifiers used in
/// configs, CLI flags and result records.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Naive,
    MergeInit,
    MergeOrth,
    Magmax,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Naive,
        StrategyKind::MergeInit,
        StrategyKind::MergeOrth,
        StrategyKind::Magmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Naive => "naive",
            StrategyKind::MergeInit => "merge_init",
            StrategyKind::MergeOrth => "merge_orth",
            StrategyKind::Magmax => "magmax",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, StrategyError> {
        match s {
            "naive" => Ok(StrategyKind::Naive),
            "merge_init" => Ok(StrategyKind::MergeInit),
            "merge_orth" => Ok(StrategyKind::MergeOrth),
            "magmax" => Ok(StrategyKind::Magmax),
            other => Err(StrategyError::UnknownKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the trainer sees for one task: a frozen effective base and the
/// adapter set SGD is allowed to touch. `effective_base + delta(trainable)`
/// is the student at every step.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub effective_base: BaseWeights,
    pub trainable: Vec<LoraAdapter>,
}

/// Adapter hyperparameters shared by every task of a run.
#[derive(Debug, Clone, Copy)]
pub struct AdapterSpec {
    pub rank: usize,
    pub std_a: f64,
    pub scale: f64,
    pub orth_mode: OrthMode,
}

impl AdapterSpec {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            std_a: LoraAdapter::default_std(rank),
            scale: 1.0,
            orth_mode: OrthMode::Project,
        }
    }
}

/// Per-method carried state between tasks.
#[derive(Debug, Clone)]
pub struct StrategyState {
    kind: StrategyKind,
    spec: AdapterSpec,
    base: BaseWeights,
    carried_merged: Option<BaseWeights>,
    live: Option<Vec<LoraAdapter>>,
    acc: Option<Vec<LoraAdapter>>,
    task_index: usize,
    in_task: bool,
}

/// Structural storage census, used to assert the memory contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateCensus {
    pub base_matrices: usize,
    pub merged_matrices: usize,
    pub adapter_factors: usize,
}

impl StrategyState {
    pub fn new(kind: StrategyKind, base: BaseWeights, spec: AdapterSpec) -> Self {
        Self {
            kind,
            spec,
            base,
            carried_merged: None,
            live: None,
            acc: None,
            task_index: 0,
            in_task: false,
        }
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn base(&self) -> &BaseWeights {
        &self.base
    }

    /// Completed tasks so far.
    pub fn completed_tasks(&self) -> usize {
        self.task_index
    }

    fn check_invariants(&self) -> Result<(), StrategyError> {
        let started = self.task_index > 0;
        let ok = match self.kind {
            StrategyKind::Naive => {
                self.carried_merged.is_none()
                    && self.acc.is_none()
                    && self.live.is_some() == started
            }
            StrategyKind::MergeInit => {
                self.live.is_none()
                    && self.acc.is_none()
                    && self.carried_merged.is_some() == started
            }
            StrategyKind::MergeOrth => {
                self.live.is_none()
                    && self.carried_merged.is_some() == started
                    && self.acc.is_some() == started
            }
            StrategyKind::Magmax => {
                self.live.is_none()
                    && self.carried_merged.is_none()
                    && self.acc.is_some() == started
            }
        };
        if ok {
            Ok(())
        } else {
            Err(StrategyError::Contract(
                "state does not match the strategy kind",
            ))
        }
    }

    fn fresh_standard(&self, rng: &mut Rng) -> Result<Vec<LoraAdapter>, StrategyError> {
        self.base
            .layers()
            .iter()
            .map(|(name, w)| {
                let mut ad = LoraAdapter::init_standard(
                    rng,
                    name.clone(),
                    w.rows(),
                    w.cols(),
                    self.spec.rank,
                    self.spec.std_a,
                )?;
                ad.scale = self.spec.scale;
                Ok(ad)
            })
            .collect()
    }

    /// Enter a task: pick the effective base and initialize (or carry) the
    /// trainable adapter per the strategy.
    pub fn begin_task(&mut self, rng: &mut Rng) -> Result<TrainContext, StrategyError> {
        if self.in_task {
            return Err(StrategyError::Contract(
                "begin_task called twice without end_task",
            ));
        }
        self.check_invariants()?;

        let ctx = match self.kind {
            StrategyKind::Naive => TrainContext {
                effective_base: self.base.clone(),
                trainable: match &self.live {
                    Some(live) => live.clone(),
                    None => self.fresh_standard(rng)?,
                },
            },
            StrategyKind::MergeInit => TrainContext {
                effective_base: self
                    .carried_merged
                    .clone()
                    .unwrap_or_else(|| self.base.clone()),
                trainable: self.fresh_standard(rng)?,
            },
            StrategyKind::MergeOrth => {
                let trainable = match &self.acc {
                    None => self.fresh_standard(rng)?,
                    Some(acc) => self
                        .base
                        .layers()
                        .iter()
                        .zip(acc)
                        .map(|((name, w), acc_ad)| {
                            let mut ad = LoraAdapter::init_orthogonal(
                                rng,
                                &acc_ad.a,
                                name.clone(),
                                w.rows(),
                                w.cols(),
                                self.spec.rank,
                                self.spec.std_a,
                                self.spec.orth_mode,
                            )?;
                            ad.scale = self.spec.scale;
                            Ok(ad)
                        })
                        .collect::<Result<Vec<_>, AdapterError>>()?,
                };
                TrainContext {
                    effective_base: self
                        .carried_merged
                        .clone()
                        .unwrap_or_else(|| self.base.clone()),
                    trainable,
                }
            }
            StrategyKind::Magmax => {
                // The selected adapter is merged temporarily; the state
                // keeps only base + accumulator.
                let effective_base = match &self.acc {
                    None => self.base.clone(),
                    Some(acc) => merge_all(&self.base, acc)?,
                };
                TrainContext {
                    effective_base,
                    trainable: self.fresh_standard(rng)?,
                }
            }
        };
        self.in_task = true;
        Ok(ctx)
    }

    /// Absorb a trained adapter set and advance the task counter.
    pub fn end_task(&mut self, trained: Vec<LoraAdapter>) -> Result<(), StrategyError> {
        if !self.in_task {
            return Err(StrategyError::Contract(
                "end_task called without a matching begin_task",
            ));
        }
        if trained.len() != self.base.len() {
            return Err(StrategyError::LayerCount {
                got: trained.len(),
                want: self.base.len(),
            });
        }
        for (idx, (ad, (name, w))) in trained.iter().zip(self.base.layers()).enumerate() {
            if ad.name != *name {
                return Err(StrategyError::LayerName {
                    idx,
                    got: ad.name.clone(),
                    want: name.clone(),
                });
            }
            if ad.delta_shape() != w.shape() {
                return Err(AdapterError::DeltaShape {
                    name: ad.name.clone(),
                    dr: ad.delta_shape().0,
                    dc: ad.delta_shape().1,
                    tr: w.rows(),
                    tc: w.cols(),
                }
                .into());
            }
        }

        match self.kind {
            StrategyKind::Naive => {
                self.live = Some(trained);
            }
            StrategyKind::MergeInit => {
                let current = self.carried_merged.take().unwrap_or_else(|| self.base.clone());
                self.carried_merged = Some(merge_all(&current, &trained)?);
            }
            StrategyKind::MergeOrth => {
                let current = self.carried_merged.take().unwrap_or_else(|| self.base.clone());
                self.carried_merged = Some(merge_all(&current, &trained)?);
                self.acc = Some(match self.acc.take() {
                    // Only the running sum of A factors is carried; B stays
                    // zero and unused.
                    None => trained
                        .into_iter()
                        .map(|ad| LoraAdapter {
                            b: Matrix::zeros(ad.b.rows(), ad.b.cols()),
                            ..ad
                        })
                        .collect(),
                    Some(acc) => acc
                        .into_iter()
                        .zip(trained)
                        .map(|(acc_ad, t)| {
                            Ok(LoraAdapter {
                                a: acc_ad.a.add(&t.a)?,
                                ..acc_ad
                            })
                        })
                        .collect::<Result<Vec<_>, NumError>>()?,
                });
            }
            StrategyKind::Magmax => {
                self.acc = Some(match self.acc.take() {
                    None => trained,
                    Some(acc) => acc
                        .into_iter()
                        .zip(trained)
                        .map(|(acc_ad, t)| {
                            Ok(LoraAdapter {
                                a: magmax_select(&acc_ad.a, &t.a)?,
                                b: magmax_select(&acc_ad.b, &t.b)?,
                                ..acc_ad
                            })
                        })
                        .collect::<Result<Vec<_>, StrategyError>>()?,
                });
            }
        }
        self.task_index += 1;
        self.in_task = false;
        self.check_invariants()
    }

    /// The deployable model for the current state. Does not mutate state,
    /// so it doubles as the boundary evaluation hook.
    pub fn final_weights(&self) -> Result<BaseWeights, StrategyError> {
        if self.task_index == 0 {
            return Err(StrategyError::NoCompletedTask);
        }
        match self.kind {
            StrategyKind::Naive => {
                let live = self
                    .live
                    .as_ref()
                    .ok_or(StrategyError::Contract("naive state lost its adapter"))?;
                merge_all(&self.base, live)
            }
            StrategyKind::MergeInit | StrategyKind::MergeOrth => self
                .carried_merged
                .clone()
                .ok_or(StrategyError::Contract("merged weights missing")),
            StrategyKind::Magmax => {
                let acc = self
                    .acc
                    .as_ref()
                    .ok_or(StrategyError::Contract("magmax accumulator missing"))?;
                merge_all(&self.base, acc)
            }
        }
    }

    /// Count what the state actually stores; the totals must not grow with
    /// the number of completed tasks.
    pub fn census(&self) -> StateCensus {
        StateCensus {
            base_matrices: self.base.len(),
            merged_matrices: self.carried_merged.as_ref().map_or(0, |w| w.len()),
            adapter_factors: self.live.as_ref().map_or(0, |v| 2 * v.len())
                + self.acc.as_ref().map_or(0, |v| 2 * v.len()),
        }
    }
}

fn merge_all(base: &BaseWeights, adapters: &[LoraAdapter]) -> Result<BaseWeights, StrategyError> {
    let mut out = base.clone();
    for ad in adapters {
        out = out.merge_adapter(ad)?;
    }
    Ok(out)
}

/// Elementwise pick of the larger-magnitude entry, sign preserved; exact
/// ties keep the accumulated (first) value.
pub fn magmax_select(prev: &Matrix, new: &Matrix) -> Result<Matrix, StrategyError> {
    if prev.shape() != new.shape() {
        return Err(NumError::Shape {
            op: "magmax_select",
            left: format!("{}x{}", prev.rows(), prev.cols()),
            right: format!("{}x{}", new.rows(), new.cols()),
        }
        .into());
    }
    Ok(Matrix::from_fn(prev.rows(), prev.cols(), |i, j| {
        let p = prev.get(i, j);
        let n = new.get(i, j);
        if n.abs() > p.abs() {
            n
        } else {
            p
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(m: usize, n: usize, seed: u64) -> BaseWeights {
        BaseWeights::single("w", Rng::new(seed).normal_matrix(m, n, 1.0))
    }

    fn spec() -> AdapterSpec {
        AdapterSpec::new(2)
    }

    /// Stand-in for SGD: bump B so the delta is nonzero.
    fn fake_train(rng: &mut Rng, mut ads: Vec<LoraAdapter>) -> Vec<LoraAdapter> {
        for ad in &mut ads {
            ad.b = rng.normal_matrix(ad.b.rows(), ad.b.cols(), 0.3);
        }
        ads
    }

    #[test]
    fn task_one_is_degenerate_for_all_kinds() {
        for kind in StrategyKind::ALL {
            let b = base(4, 6, 1);
            let mut st = StrategyState::new(kind, b.clone(), spec());
            let ctx = st.begin_task(&mut Rng::new(5)).unwrap();
            assert_eq!(ctx.effective_base, b, "{kind}");
            for ad in &ctx.trainable {
                assert!(ad.delta().unwrap().is_zero(), "{kind}");
            }
        }
    }

    #[test]
    fn same_trained_adapter_same_final_weights_after_one_task() {
        let b = base(4, 6, 2);
        let trained = {
            let mut st = StrategyState::new(StrategyKind::Naive, b.clone(), spec());
            let ctx = st.begin_task(&mut Rng::new(7)).unwrap();
            fake_train(&mut Rng::new(8), ctx.trainable)
        };
        let mut finals = Vec::new();
        for kind in StrategyKind::ALL {
            let mut st = StrategyState::new(kind, b.clone(), spec());
            st.begin_task(&mut Rng::new(7)).unwrap();
            st.end_task(trained.clone()).unwrap();
            finals.push(st.final_weights().unwrap());
        }
        for f in &finals[1..] {
            for (l0, l1) in finals[0].layers().iter().zip(f.layers()) {
                assert!(l0.1.sub(&l1.1).unwrap().max_abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn naive_carries_adapter_unchanged() {
        let b = base(4, 6, 3);
        let mut st = StrategyState::new(StrategyKind::Naive, b, spec());
        let ctx = st.begin_task(&mut Rng::new(1)).unwrap();
        let trained = fake_train(&mut Rng::new(2), ctx.trainable);
        st.end_task(trained.clone()).unwrap();
        let ctx2 = st.begin_task(&mut Rng::new(3)).unwrap();
        assert_eq!(ctx2.trainable, trained);
        // And naive always trains against the pristine base.
        assert_eq!(&ctx2.effective_base, st.base());
    }

    #[test]
    fn merge_init_zero_b_leaves_base() {
        let b = base(4, 6, 4);
        let mut st = StrategyState::new(StrategyKind::MergeInit, b.clone(), spec());
        let ctx = st.begin_task(&mut Rng::new(1)).unwrap();
        st.end_task(ctx.trainable).unwrap(); // B still zero
        assert_eq!(st.final_weights().unwrap(), b);
    }

    #[test]
    fn merge_orth_accumulates_a_sum_exactly() {
        let b = base(4, 40, 5);
        let mut st = StrategyState::new(StrategyKind::MergeOrth, b, spec());
        let mut rng = Rng::new(9);
        let mut expected_sum: Option<Matrix> = None;
        for _ in 0..2 {
            let ctx = st.begin_task(&mut rng).unwrap();
            let trained = fake_train(&mut rng, ctx.trainable);
            expected_sum = Some(match expected_sum {
                None => trained[0].a.clone(),
                Some(s) => s.add(&trained[0].a).unwrap(),
            });
            st.end_task(trained).unwrap();
        }
        let acc = st.acc.as_ref().unwrap();
        assert_eq!(acc[0].a, expected_sum.unwrap());
        assert!(acc[0].b.is_zero());
    }

    #[test]
    fn merge_orth_init_is_orthogonal_to_accumulated() {
        let b = base(6, 60, 6);
        let mut st = StrategyState::new(StrategyKind::MergeOrth, b, spec());
        let mut rng = Rng::new(10);
        for task in 0..3 {
            let ctx = st.begin_task(&mut rng).unwrap();
            if task > 0 {
                let acc = &st.acc.as_ref().unwrap()[0].a;
                let cross = ctx.trainable[0].a.matmul(&acc.transpose()).unwrap();
                assert!(cross.max_abs() <= 1e-9, "task {task}: {}", cross.max_abs());
            }
            st.end_task(fake_train(&mut rng, ctx.trainable)).unwrap();
        }
    }

    #[test]
    fn magmax_first_task_adopts_trained() {
        let b = base(4, 6, 7);
        let mut st = StrategyState::new(StrategyKind::Magmax, b, spec());
        let ctx = st.begin_task(&mut Rng::new(1)).unwrap();
        let trained = fake_train(&mut Rng::new(2), ctx.trainable);
        st.end_task(trained.clone()).unwrap();
        assert_eq!(st.acc.as_ref().unwrap(), &trained);
    }

    #[test]
    fn magmax_select_forced_case_and_idempotence() {
        let prev = Matrix::new(1, 2, vec![1.0, -3.0]).unwrap();
        let new = Matrix::new(1, 2, vec![2.0, 1.0]).unwrap();
        let sel = magmax_select(&prev, &new).unwrap();
        assert_eq!(sel.data(), &[2.0, -3.0]);
        assert_eq!(magmax_select(&prev, &prev).unwrap(), prev);
    }

    #[test]
    fn magmax_select_matches_brute_force() {
        let mut rng = Rng::new(13);
        let prev = rng.normal_matrix(64, 64, 1.0);
        let new = rng.normal_matrix(64, 64, 1.0);
        let sel = magmax_select(&prev, &new).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let (p, n) = (prev.get(i, j), new.get(i, j));
                let want = if p.abs() > n.abs() {
                    p
                } else if n.abs() > p.abs() {
                    n
                } else {
                    p
                };
                assert_eq!(sel.get(i, j), want);
            }
        }
    }

    #[test]
    fn magmax_final_differs_from_delta_sum() {
        // 2x2 counterexample: selection of factors is not the sum of
        // per-task deltas.
        let b = BaseWeights::single("w", Matrix::zeros(2, 2));
        let mut st = StrategyState::new(StrategyKind::Magmax, b, AdapterSpec::new(1));
        let t1 = LoraAdapter {
            name: "w".into(),
            a: Matrix::new(1, 2, vec![1.0, 0.0]).unwrap(),
            b: Matrix::new(2, 1, vec![1.0, 0.0]).unwrap(),
            scale: 1.0,
        };
        let t2 = LoraAdapter {
            name: "w".into(),
            a: Matrix::new(1, 2, vec![0.0, 2.0]).unwrap(),
            b: Matrix::new(2, 1, vec![0.0, 2.0]).unwrap(),
            scale: 1.0,
        };
        let mut rng = Rng::new(1);
        st.begin_task(&mut rng).unwrap();
        st.end_task(vec![t1.clone()]).unwrap();
        st.begin_task(&mut rng).unwrap();
        st.end_task(vec![t2.clone()]).unwrap();

        let selected = st.final_weights().unwrap();
        // Selected factors: A = [1,2], B = [1,2]^T -> delta [[1,2],[2,4]].
        assert_eq!(selected.layer(0).data(), &[1.0, 2.0, 2.0, 4.0]);
        let sum = t1
            .delta()
            .unwrap()
            .add(&t2.delta().unwrap())
            .unwrap();
        assert_ne!(selected.layer(0), &sum);
    }

    #[test]
    fn state_machine_order_is_enforced() {
        let b = base(3, 4, 8);
        let mut st = StrategyState::new(StrategyKind::MergeInit, b, spec());
        let mut rng = Rng::new(1);
        // end before begin
        let ctx = st.begin_task(&mut rng).unwrap();
        let trained = ctx.trainable.clone();
        st.end_task(trained.clone()).unwrap();
        assert!(matches!(
            st.end_task(trained),
            Err(StrategyError::Contract(_))
        ));
        // begin twice
        st.begin_task(&mut rng).unwrap();
        assert!(matches!(
            st.begin_task(&mut rng),
            Err(StrategyError::Contract(_))
        ));
    }

    #[test]
    fn final_weights_requires_a_completed_task() {
        let st = StrategyState::new(StrategyKind::Naive, base(3, 4, 9), spec());
        assert!(matches!(
            st.final_weights(),
            Err(StrategyError::NoCompletedTask)
        ));
    }

    #[test]
    fn census_does_not_grow_with_tasks() {
        for kind in StrategyKind::ALL {
            let b = base(4, 40, 10);
            let mut st = StrategyState::new(kind, b, spec());
            let mut rng = Rng::new(11);
            let mut censuses = Vec::new();
            for _ in 0..6 {
                let ctx = st.begin_task(&mut rng).unwrap();
                st.end_task(fake_train(&mut rng, ctx.trainable)).unwrap();
                censuses.push(st.census());
            }
            for c in &censuses[1..] {
                assert_eq!(c, &censuses[0], "{kind} census grew");
            }
        }
    }
}
