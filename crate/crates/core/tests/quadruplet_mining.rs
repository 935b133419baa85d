use proptest::prelude::*;
use quadnet::config::{Mode, TrainConfig};
use quadnet::data::{synth_generate, SynthConfig};
use quadnet::gradcheck::{adaptive_suite, ADAPTIVE_TOLERANCE};
use quadnet::losses::triplet_hinge;
use quadnet::numeric::Rng;
use quadnet::quadruplets::{batch_loss_adaptive, compute_margins, mining_report, QuadrupletSampler};
use quadnet::train::train;

#[test]
fn adaptive_batch_gradient_matches_finite_differences() {
    let mut rng = Rng::new(21);
    for m in [2, 8, 32] {
        let r = adaptive_suite(&mut rng, m, 100).unwrap();
        assert!(r.passed, "M={m}: {r:?}");
        assert!(r.max_rel_error < ADAPTIVE_TOLERANCE);
    }
}

#[test]
fn sampled_quadruplets_satisfy_identity_constraints() {
    let ds = synth_generate(&SynthConfig {
        num_ids: 5,
        dim: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let sampler = QuadrupletSampler::new(&ds).unwrap();
    let mut rng = Rng::new(22);
    for q in sampler.sample_batch(10_000, &mut rng) {
        assert!(q.is_valid(&ds), "{q:?}");
    }
}

fn scores(rng: &mut Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.uniform(0.0, 1.0)).collect()
}

#[test]
fn mining_mask_equals_brute_force_active_set() {
    let mut rng = Rng::new(23);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = 1 + rng.below(64);
        let (ij, ik, lk) = (scores(&mut rng, m), scores(&mut rng, m), scores(&mut rng, m));
        let r = batch_loss_adaptive(&ij, &ik, &lk).unwrap();
        for q in 0..m {
            let strong = triplet_hinge(ij[q], ik[q], r.stats.alpha1);
            let weak = triplet_hinge(ij[q], lk[q], r.stats.alpha2);
            mismatches += usize::from((strong.grads[1] != 0.0) != r.mask.term1[q]);
            mismatches += usize::from((weak.grads[1] != 0.0) != r.mask.term2[q]);
            mismatches += usize::from((r.hinge_grads.ik[q] != 0.0) != r.mask.term1[q]);
            mismatches += usize::from((r.hinge_grads.lk[q] != 0.0) != r.mask.term2[q]);
        }
        let rep = mining_report(&r.mask);
        let t1 = (0..m).filter(|&q| r.per_quadruplet[q][0] > 0.0).count();
        let t2 = (0..m).filter(|&q| r.per_quadruplet[q][1] > 0.0).count();
        mismatches += usize::from(rep.term1_active != t1) + usize::from(rep.term2_active != t2);
    }
    assert_eq!(mismatches, 0);
}

proptest! {
    #[test]
    fn margins_are_ordered_and_non_negative(
        ij in prop::collection::vec(0.0f64..=1.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let ik = scores(&mut rng, ij.len());
        let lk = scores(&mut rng, ij.len());
        let s = compute_margins(&ij, &ik, &lk).unwrap();
        prop_assert!(s.alpha1 >= s.alpha2 && s.alpha2 >= 0.0);
        prop_assert_eq!(s.alpha2 * 2.0, s.alpha1);
        prop_assert_eq!(s.n_n, 2 * s.n_p);
    }

    #[test]
    fn batch_total_is_sum_of_per_quadruplet_terms(
        ij in prop::collection::vec(0.0f64..=1.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let ik = scores(&mut rng, ij.len());
        let lk = scores(&mut rng, ij.len());
        let r = batch_loss_adaptive(&ij, &ik, &lk).unwrap();
        let sum = r.per_quadruplet.iter().fold(0.0, |a, t| a + (t[0] + t[1]));
        prop_assert_eq!(sum, r.loss.total);
        prop_assert!(r.loss.total >= 0.0);
    }
}

#[test]
fn logged_margins_match_offline_recomputation() {
    let ds = synth_generate(&SynthConfig {
        num_ids: 12,
        dim: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        mode: Mode::QuadrupletMargohnm,
        epochs: 4,
        batch_size: 16,
        hidden: vec![8],
        ..TrainConfig::default()
    };
    let (_, log) = train(&cfg, &ds).unwrap();
    assert_eq!(log.warm_start_epochs, 2);
    for e in &log.epochs {
        let s = e.last_batch_scores.as_ref().expect("quadruplet modes log scores");
        if e.adaptive {
            let offline = compute_margins(&s.ij, &s.ik, &s.lk).unwrap();
            assert_eq!((e.alpha1, e.alpha2), (offline.alpha1, offline.alpha2), "epoch {}", e.epoch);
        } else {
            assert_eq!((e.alpha1, e.alpha2), (cfg.margins.alpha1, cfg.margins.alpha2));
        }
    }
    assert!(log.epochs.iter().any(|e| e.adaptive));
}
