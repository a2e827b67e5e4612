//! Cross-module invariants: algebraic identities on random inputs, SVD
//! factor quality over a shape sweep, state-machine contracts, and metric
//! properties.

use proptest::prelude::*;
use seqlora_core::adapter::{BaseWeights, LoraAdapter, OrthMode};
use seqlora_core::metrics::ScoreMatrix;
use seqlora_core::numkit::{derive_seed, Matrix, Rng};
use seqlora_core::strategies::{magmax_select, AdapterSpec, StrategyKind, StrategyState};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    rng.normal_matrix(rows, cols, 1.0)
}

#[test]
fn matmul_associativity_on_random_triples() {
    let mut rng = Rng::new(1001);
    for _ in 0..50 {
        let a = random_matrix(&mut rng, 7, 5);
        let b = random_matrix(&mut rng, 5, 9);
        let c = random_matrix(&mut rng, 9, 4);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm();
        assert!(rel <= 1e-10, "associativity broke: {rel}");
    }
}

#[test]
fn svd_factor_quality_over_200_random_shapes() {
    let mut rng = Rng::new(2002);
    for case in 0..200 {
        let rows = 1 + (rng.next_u64() % 64) as usize;
        let cols = 1 + (rng.next_u64() % 256) as usize;
        let m = random_matrix(&mut rng, rows, cols);
        let svd = m.svd().unwrap();
        let utu = svd.u.transpose().matmul(&svd.u).unwrap();
        let vtv = svd.v.transpose().matmul(&svd.v).unwrap();
        let id_err = |g: &Matrix| {
            let mut worst = 0.0f64;
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((g.get(i, j) - want).abs());
                }
            }
            worst
        };
        assert!(id_err(&utu) <= 1e-10, "case {case}: U^T U {}", id_err(&utu));
        assert!(id_err(&vtv) <= 1e-10, "case {case}: V^T V {}", id_err(&vtv));
        let recon = svd.reconstruct();
        let rel = m.sub(&recon).unwrap().frobenius_norm() / m.frobenius_norm().max(1e-300);
        assert!(rel <= 1e-10, "case {case} ({rows}x{cols}): recon {rel}");
    }
}

#[test]
fn rng_streams_reproduce_per_seed() {
    for seed in [0u64, 1, 42, u64::MAX] {
        let a: Vec<u64> = {
            let mut r = Rng::new(seed);
            (0..256).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(seed);
            (0..256).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
    }
}

#[test]
fn orthogonal_init_projects_out_any_rank() {
    // Accumulators of every achievable rank k < n, including rank 0.
    let mut rng = Rng::new(3003);
    for k in 0..=4usize {
        for trial in 0..10 {
            let (r, n, m) = (4, 48, 12);
            // Build an accumulator of rank exactly k as a product of
            // k-rank factors; k = 0 gives the zero matrix.
            let acc = if k == 0 {
                Matrix::zeros(r, n)
            } else {
                let left = random_matrix(&mut rng, r, k);
                let right = random_matrix(&mut rng, k, n);
                left.matmul(&right).unwrap()
            };
            let ad = LoraAdapter::init_orthogonal(
                &mut rng,
                &acc,
                "w",
                m,
                n,
                r,
                0.5,
                OrthMode::Project,
            )
            .unwrap();
            let cross = ad.a.matmul(&acc.transpose()).unwrap();
            assert!(
                cross.max_abs() <= 1e-9,
                "k={k} trial={trial}: {}",
                cross.max_abs()
            );
        }
    }
}

#[test]
fn svd_min_init_rank_one_any_accumulator() {
    let mut rng = Rng::new(4004);
    for trial in 0..20 {
        let (r, n, m) = (3, 40, 10);
        let acc = random_matrix(&mut rng, r, n);
        let ad =
            LoraAdapter::init_orthogonal(&mut rng, &acc, "w", m, n, r, 0.5, OrthMode::SvdMin)
                .unwrap();
        let svd = ad.a.svd().unwrap();
        assert!(
            svd.sigma[1] <= 1e-10 * svd.sigma[0].max(1e-300),
            "trial {trial}: sigma {:?}",
            &svd.sigma[..2]
        );
        let cross = ad.a.matmul(&acc.transpose()).unwrap();
        assert!(cross.max_abs() <= 1e-9);
    }
}

#[test]
fn noop_training_keeps_base_for_merging_strategies() {
    // An adapter returned untouched (B = 0) must leave the final model at
    // the pristine base regardless of how many tasks ran.
    for kind in [
        StrategyKind::MergeInit,
        StrategyKind::MergeOrth,
        StrategyKind::Magmax,
    ] {
        let base = BaseWeights::single("w", Rng::new(7).normal_matrix(6, 60, 1.0));
        let mut st = StrategyState::new(kind, base.clone(), AdapterSpec::new(3));
        let mut rng = Rng::new(5005);
        for _ in 0..5 {
            let ctx = st.begin_task(&mut rng).unwrap();
            st.end_task(ctx.trainable).unwrap();
        }
        let w = st.final_weights().unwrap();
        assert_eq!(w.layer(0), base.layer(0), "{kind}");
    }
}

#[test]
fn merge_orth_orthogonality_sustained_over_ten_tasks() {
    // n >= 20 r so the complement never runs dry.
    let (m, n, r) = (8, 80, 4);
    let base = BaseWeights::single("w", Rng::new(8).normal_matrix(m, n, 1.0));
    let mut st = StrategyState::new(StrategyKind::MergeOrth, base, AdapterSpec::new(r));
    let mut rng = Rng::new(6006);
    let mut acc_oracle: Option<Matrix> = None; // independent running sum
    for task in 0..10 {
        let ctx = st.begin_task(&mut rng).unwrap();
        if let Some(acc) = &acc_oracle {
            let cross = ctx.trainable[0].a.matmul(&acc.transpose()).unwrap();
            assert!(
                cross.max_abs() <= 1e-9,
                "task {task}: cross {}",
                cross.max_abs()
            );
        }
        // Simulated training nudges both factors.
        let mut trained = ctx.trainable;
        trained[0].a = trained[0].a.add(&rng.normal_matrix(r, n, 0.05)).unwrap();
        trained[0].b = rng.normal_matrix(m, r, 0.3);
        acc_oracle = Some(match acc_oracle {
            None => trained[0].a.clone(),
            Some(acc) => acc.add(&trained[0].a).unwrap(),
        });
        st.end_task(trained).unwrap();
    }
}

#[test]
fn magmax_accumulator_magnitude_monotone() {
    let (m, n, r) = (6, 10, 3);
    let base = BaseWeights::single("w", Rng::new(9).normal_matrix(m, n, 1.0));
    let mut st = StrategyState::new(StrategyKind::Magmax, base, AdapterSpec::new(r));
    let mut rng = Rng::new(7007);
    let mut prev: Option<(Matrix, Matrix)> = None;
    for _ in 0..10 {
        let ctx = st.begin_task(&mut rng).unwrap();
        let mut trained = ctx.trainable;
        trained[0].a = rng.normal_matrix(r, n, 1.0);
        trained[0].b = rng.normal_matrix(m, r, 1.0);
        let t = (trained[0].a.clone(), trained[0].b.clone());
        st.end_task(trained).unwrap();
        // Recompute the accumulator independently and compare magnitudes.
        let acc = match prev {
            None => t,
            Some((pa, pb)) => {
                let na = magmax_select(&pa, &t.0).unwrap();
                let nb = magmax_select(&pb, &t.1).unwrap();
                for (old, new) in pa.data().iter().zip(na.data()) {
                    assert!(new.abs() >= old.abs(), "accumulator magnitude shrank");
                }
                for (old, new) in pb.data().iter().zip(nb.data()) {
                    assert!(new.abs() >= old.abs());
                }
                (na, nb)
            }
        };
        prev = Some(acc);
    }
}

#[test]
fn seed_derivation_has_no_collisions_across_default_sweep() {
    // Every stream the default sweep would derive, all distinct.
    let master = 42u64;
    let mut seen = std::collections::HashSet::new();
    let mut all = vec![
        derive_seed(master, "tasks", &[]),
        derive_seed(master, "base-weights", &[0]),
    ];
    for ordering in [0u64, 5, 10, 42] {
        all.push(derive_seed(master, "ordering", &[ordering]));
        for run in [0u64, 5] {
            for task in 0..10u64 {
                all.push(derive_seed(master, "init", &[ordering, run, task]));
                all.push(derive_seed(master, "train", &[ordering, run, task]));
            }
        }
    }
    for s in all {
        assert!(seen.insert(s), "stream seed collision");
    }
}

proptest! {
    #[test]
    fn magmax_select_associative(
        xs in prop::collection::vec(-4i32..=4, 12),
        ys in prop::collection::vec(-4i32..=4, 12),
        zs in prop::collection::vec(-4i32..=4, 12),
    ) {
        // Integer-valued entries manufacture exact magnitude ties.
        let to_m = |v: &Vec<i32>| {
            Matrix::new(3, 4, v.iter().map(|&x| x as f64).collect()).unwrap()
        };
        let (x, y, z) = (to_m(&xs), to_m(&ys), to_m(&zs));
        let left = magmax_select(&magmax_select(&x, &y).unwrap(), &z).unwrap();
        let right = magmax_select(&x, &magmax_select(&y, &z).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }

    #[test]
    fn magmax_select_matches_elementwise_oracle(
        xs in prop::collection::vec(-1.0f64..=1.0, 16),
        ys in prop::collection::vec(-1.0f64..=1.0, 16),
    ) {
        let x = Matrix::new(4, 4, xs).unwrap();
        let y = Matrix::new(4, 4, ys).unwrap();
        let sel = magmax_select(&x, &y).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (p, n) = (x.get(i, j), y.get(i, j));
                let want = if n.abs() > p.abs() { n } else { p };
                prop_assert_eq!(sel.get(i, j), want);
            }
        }
    }

    #[test]
    fn delta_scale_linearity(
        scale in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let mut ad = LoraAdapter::init_standard(&mut rng, "w", 5, 7, 2, 0.5).unwrap();
        ad.b = rng.normal_matrix(5, 2, 1.0);
        let unit = ad.delta().unwrap();
        ad.scale = scale;
        let scaled = ad.delta().unwrap();
        for (u, s) in unit.data().iter().zip(scaled.data()) {
            let want = scale * u;
            prop_assert!((s - want).abs() <= 1e-15 * want.abs().max(1e-300));
        }
    }

    #[test]
    fn avg_forgetting_nonnegative(
        cells in prop::collection::vec(-1.0f64..=1.0, 25),
    ) {
        let mut sm = ScoreMatrix::new(5);
        let mut it = cells.into_iter();
        for j in 1..=5 {
            for k in 1..=5 {
                sm.set(j, k, it.next().unwrap()).unwrap();
            }
        }
        prop_assert!(sm.avg_forgetting().unwrap() >= 0.0);
    }

    #[test]
    fn cosine_stays_in_range(
        u in prop::collection::vec(-1e6f64..=1e6, 8),
        v in prop::collection::vec(-1e6f64..=1e6, 8),
    ) {
        let c = seqlora_core::numkit::cosine_similarity(&u, &v);
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}
