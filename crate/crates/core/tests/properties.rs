//! Randomized invariants of the estimator, saliency, pruner, quantizer and
//! recipe compiler.

use std::path::Path;

use proptest::prelude::*;
use surgeon::harness::fake_quantize;
use surgeon::linalg::cholesky;
use surgeon::oracle::oracle_dense_inverse;
use surgeon::pruner::{gmp_step, oberts_step, SparsitySchedule};
use surgeon::recipe::{self, compile_timeline, Frequency, Recipe};
use surgeon::{FisherInverse, GroupSpec, Layout, Mask};

fn grads_strategy(max_dim: usize, max_m: usize) -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (1..=max_dim, 1..=max_m).prop_flat_map(|(d, m)| (Just(d), prop::collection::vec(prop::collection::vec(-1.0..1.0f64, d), m)))
}

fn fill(d: usize, b: usize, lambda: f64, grads: &[Vec<f64>]) -> FisherInverse<f64> {
    let mut est = FisherInverse::new(d, b, lambda, grads.len()).unwrap();
    for g in grads {
        est.update(g).unwrap();
    }
    est
}

fn base_recipe() -> Recipe {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("recipes/downstream-10ep.toml");
    recipe::parse(&std::fs::read_to_string(path).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimator_matches_dense_inverse_relatively(
        (d, grads) in grads_strategy(60, 40),
        b in prop::sample::select(vec![2usize, 10, 50]),
        log_lambda in -3.0..0.0f64,
    ) {
        let lambda = 10f64.powf(log_lambda);
        let est = fill(d, b, lambda, &grads);
        let oracle = oracle_dense_inverse(&grads, lambda, grads.len(), b, d).unwrap();
        for (blk, reference) in est.blocks().zip(&oracle) {
            let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (x, y) in blk.iter().zip(reference) {
                prop_assert!((x - y).abs() <= 1e-9 * scale, "{x} vs {y} (scale {scale})");
            }
        }
    }

    #[test]
    fn final_estimate_ignores_gradient_order(
        (d, grads) in grads_strategy(40, 30),
        b in prop::sample::select(vec![2usize, 10, 50]),
        seed in any::<u64>(),
    ) {
        let mut shuffled = grads.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        let (a, c) = (fill(d, b, 1e-2, &grads), fill(d, b, 1e-2, &shuffled));
        for (x, y) in a.blocks().zip(c.blocks()) {
            for (p, q) in x.iter().zip(y) {
                prop_assert!((p - q).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn blocks_stay_symmetric_positive_definite(
        (d, grads) in grads_strategy(40, 30),
        b in prop::sample::select(vec![2usize, 10, 50]),
        log_lambda in -7.0..0.0f64,
    ) {
        let est = fill(d, b, 10f64.powf(log_lambda), &grads);
        for blk in est.blocks() {
            for i in 0..b {
                for j in 0..b {
                    prop_assert_eq!(blk[i * b + j], blk[j * b + i]);
                }
            }
            let mut l = blk.to_vec();
            prop_assert!(cholesky(&mut l, b).is_ok());
        }
    }

    #[test]
    fn blocks_only_see_their_own_coordinates(
        (d, grads) in grads_strategy(40, 20),
        noise in prop::collection::vec(-1.0..1.0f64, 10),
    ) {
        let b = 10;
        prop_assume!(d > b);
        let mut changed = grads.clone();
        for g in &mut changed {
            for (x, n) in g.iter_mut().zip(&noise) {
                *x += n;
            }
        }
        let (a, c) = (fill(d, b, 1e-2, &grads), fill(d, b, 1e-2, &changed));
        for k in 1..a.n_blocks() {
            prop_assert_eq!(a.block(k), c.block(k));
        }
    }

    #[test]
    fn masks_only_shrink_under_rising_targets(
        w in prop::collection::vec(-1.0..1.0f64, 8..200),
        mut targets in prop::collection::vec(0.0..1.0f64, 1..6),
        second_order in any::<bool>(),
    ) {
        targets.sort_by(f64::total_cmp);
        let d = w.len();
        let mut weights = w.clone();
        let mut mask = Mask::dense(Layout::flat(d));
        let mut est = FisherInverse::new(d, 4, 1e-2, 4).unwrap();
        for target in targets {
            let next = if second_order {
                est.reset();
                for k in 0..4 {
                    let g: Vec<f64> = (0..d).map(|i| ((i * 7 + k * 13) % 17) as f64 / 17.0 - 0.5).collect();
                    est.update(&g).unwrap();
                }
                oberts_step(&mut weights, &mut est, &mask, target, GroupSpec::unstructured(), true).unwrap().mask
            } else {
                gmp_step(&weights, &mask, target).unwrap()
            };
            prop_assert!(mask.is_superset_of(&next));
            prop_assert!(next.sparsity() >= mask.sparsity());
            prop_assert!(next.pruned_count() >= (target * d as f64 - 1e-9).ceil() as usize);
            mask = next;
        }
    }

    #[test]
    fn quantization_is_idempotent_for_a_fixed_scale(
        w in prop::collection::vec(-10.0..10.0f32, 1..100),
        scale in 1e-3..1.0f32,
    ) {
        let mut once = w.clone();
        fake_quantize(&mut once, scale, 127.0);
        let mut twice = once.clone();
        fake_quantize(&mut twice, scale, 127.0);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn cubic_schedule_is_monotone_and_bounded(
        a in 0.0..1.0f64,
        span in 0.0..1.0f64,
        start in 0.0..50.0f64,
        len in 0.1..50.0f64,
        mut ts in prop::collection::vec(-10.0..120.0f64, 2..30),
    ) {
        let b = a + span * (1.0 - a);
        let s = SparsitySchedule::new(a, b, start, start + len).unwrap();
        ts.sort_by(f64::total_cmp);
        let values: Vec<f64> = ts.iter().map(|&t| s.sparsity_at(t)).collect();
        for pair in values.windows(2) {
            prop_assert!(pair[0] <= pair[1]);
        }
        prop_assert!(values.iter().all(|&v| v >= a && v <= b));
        prop_assert_eq!(s.sparsity_at(start), a);
        prop_assert_eq!(s.sparsity_at(start + len), b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn recipes_survive_render_and_parse(
        epochs in 9usize..40,
        lr in 1e-4..1.0f64,
        ratio in 0.01..1.0f64,
        target in 0.7..1.0f64,
        every in 0.5..4.0f64,
        group in prop::sample::select(vec![1usize, 2, 5, 10]),
    ) {
        let mut r = base_recipe();
        r.epochs = epochs;
        r.lr.initial = lr;
        r.lr.final_ = lr * ratio;
        let p = r.prune.as_mut().unwrap();
        p.target_sparsity = target;
        p.group_size = group;
        p.frequency = Frequency::EveryEpochs(every);
        r.validate().unwrap();
        let text = recipe::render(&r).unwrap();
        prop_assert_eq!(recipe::parse(&text).unwrap(), r);
    }

    #[test]
    fn prune_event_count_matches_counting_oracle(
        start in 0usize..10,
        len in 1usize..12,
        spe in 1usize..60,
        per_epoch in prop::option::of(1usize..6),
        every in 1usize..5,
    ) {
        let mut r = base_recipe();
        r.epochs = start + len + 1;
        r.lr.rewinds = None;
        r.lr.schedule = recipe::LrSchedule::LinearDecay;
        let p = r.prune.as_mut().unwrap();
        p.start_epoch = start as f64;
        p.end_epoch = (start + len) as f64;
        p.frequency = match per_epoch {
            Some(n) => Frequency::PerEpoch(n),
            None => Frequency::EveryEpochs(every as f64),
        };
        // events at start + j/n for t < end, or start + j·k for t ≤ end
        let expected = match per_epoch {
            Some(n) => len * n,
            None => len / every + 1,
        };
        match compile_timeline(&r, spe) {
            Ok(t) => {
                prop_assert_eq!(t.prune_events().count(), expected);
                let s: Vec<f64> = t.prune_events().map(|e| e.scheduled_sparsity).collect();
                prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*s.last().unwrap(), r.prune.as_ref().unwrap().target_sparsity);
                if s.len() > 1 {
                    prop_assert_eq!(s[0], r.prune.as_ref().unwrap().initial_sparsity);
                }
                prop_assert!(t.records.iter().all(|x| x.lr > 0.0));
            }
            Err(_) => prop_assert!(per_epoch.is_some_and(|n| n > spe)),
        }
    }

    #[test]
    fn lr_hits_initial_at_rewinds_and_final_at_the_end(
        epochs in 2usize..30,
        spe in 1usize..50,
        every in 0.5..5.0f64,
    ) {
        let mut r = base_recipe();
        r.epochs = epochs;
        r.prune.as_mut().unwrap().end_epoch = epochs as f64;
        r.prune.as_mut().unwrap().start_epoch = 0.0;
        r.prune.as_mut().unwrap().frequency = Frequency::EveryEpochs(epochs as f64);
        r.lr.rewinds = Some(recipe::Rewinds { at: vec![], start: Some(0.5f64.min(epochs as f64 - 0.5)), every: Some(every) });
        let total = epochs * spe;
        let t = match compile_timeline(&r, spe) {
            Ok(t) => t,
            Err(_) => return Ok(()),
        };
        prop_assert_eq!(t.records[0].lr, r.lr.initial);
        for s in r.rewind_steps(spe) {
            prop_assert_eq!(t.records[s].lr, r.lr.initial);
        }
        prop_assert_eq!(t.records[total - 1].lr, r.lr.final_);
    }
}
