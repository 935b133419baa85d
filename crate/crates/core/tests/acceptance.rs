//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use quadnet::config::{Mode, TrainConfig};
use quadnet::data::{synth_generate, Dataset, Sample, SynthConfig};
use quadnet::equivalence::{self, run_equivalence_suite};
use quadnet::evaluation::{cmc_from_distances, cmc_single_shot, DistanceMode};
use quadnet::gradcheck::{run_gradcheck, ADAPTIVE_TOLERANCE};
use quadnet::losses::triplet_hinge;
use quadnet::model::{Architecture, HeadKind, ModelParams};
use quadnet::numeric::{Matrix, Rng};
use quadnet::quadruplets::batch_loss_adaptive;
use quadnet::run::{eval_run, prepare_split, evaluate, train_run, RunSummary, SUMMARY_FILE};
use quadnet::train::train;
use quadnet::Result;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let report = run_gradcheck(0)?;
    let secs = start.elapsed().as_secs_f64();
    let non_adaptive: Vec<_> = report.suites.iter().filter(|s| !s.name.starts_with("batch_loss_adaptive")).collect();
    let worst = non_adaptive.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = non_adaptive.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    let loss_instances_ok = non_adaptive
        .iter()
        .filter(|s| !s.name.starts_with("model"))
        .all(|s| s.instances >= 100);
    let model_instances: usize = non_adaptive.iter().filter(|s| s.name.starts_with("model")).map(|s| s.instances).sum();
    Ok(outcome(
        failing.is_empty() && loss_instances_ok && model_instances >= 100 && secs < 30.0,
        format!(
            "{} suites, max rel err {worst:.2e} (< 1e-5), {model_instances} model instances, {secs:.2}s (< 30s){}",
            non_adaptive.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    ))
}

fn adaptive_gradient() -> Result<Outcome> {
    let report = run_gradcheck(0)?;
    let mut parts = Vec::new();
    let mut ok = true;
    for m in [2, 8, 32] {
        let name = format!("batch_loss_adaptive_m{m}");
        match report.suites.iter().find(|s| s.name == name) {
            Some(s) => {
                ok &= s.passed && s.max_rel_error < ADAPTIVE_TOLERANCE;
                parts.push(format!("M={m} {:.2e}", s.max_rel_error));
            }
            None => {
                ok = false;
                parts.push(format!("M={m} missing"));
            }
        }
    }
    ok &= !report.closed_form_comparison.is_empty();
    let closed: Vec<String> = report
        .closed_form_comparison
        .iter()
        .map(|c| format!("M={} {:.3}", c.m, c.max_abs_dev_ij.max(c.max_abs_dev_ik).max(c.max_abs_dev_lk)))
        .collect();
    Ok(outcome(
        ok,
        format!("{} (< 1e-6); closed-form vs exact max |dev|: {}", parts.join(", "), closed.join(", ")),
    ))
}

fn identity_suite() -> Result<Outcome> {
    let r = run_equivalence_suite(0, 1_000_000, 1000)?;
    Ok(outcome(
        r.max_identity_max_deviation == 0.0
            && r.max_identity_triples == 1_000_000
            && r.sum_equivalence_max_deviation < 1e-9
            && r.half_ratio_max_deviation < 1e-9,
        format!(
            "max identity dev {} over {} triples; sum dev {:.2e}, M/2 ratio dev {:.2e} over {} batches",
            r.max_identity_max_deviation,
            r.max_identity_triples,
            r.sum_equivalence_max_deviation,
            r.half_ratio_max_deviation,
            r.sum_equivalence_batches
        ),
    ))
}

fn mining_rule() -> Result<Outcome> {
    let mut rng = Rng::new(4);
    let mut mismatches = 0;
    let mut quads = 0;
    for _ in 0..1000 {
        let m = 1 + rng.below(128);
        let mut draw = || (0..m).map(|_| rng.uniform(0.0, 1.0)).collect::<Vec<f64>>();
        let (ij, ik, lk) = (draw(), draw(), draw());
        let r = batch_loss_adaptive(&ij, &ik, &lk)?;
        for q in 0..m {
            let strong = triplet_hinge(ij[q], ik[q], r.stats.alpha1).grads[1] != 0.0;
            let weak = triplet_hinge(ij[q], lk[q], r.stats.alpha2).grads[1] != 0.0;
            let batch_strong = r.hinge_grads.ik[q] != 0.0;
            let batch_weak = r.hinge_grads.lk[q] != 0.0;
            mismatches += usize::from(strong != r.mask.term1[q] || batch_strong != r.mask.term1[q]);
            mismatches += usize::from(weak != r.mask.term2[q] || batch_weak != r.mask.term2[q]);
        }
        quads += m;
    }
    Ok(outcome(
        mismatches == 0,
        format!("{mismatches} mismatches over 1000 batches ({quads} quadruplets)"),
    ))
}

fn preference_demo() -> Result<Outcome> {
    let p = equivalence::preference_demo()?;
    let (c1, c2) = (&p.case1, &p.case2);
    Ok(outcome(
        c1.rank1_errors == 0
            && c2.rank1_errors == 1
            && c2.min_misclassifications < c1.min_misclassifications
            && c1.quadruplet_loss < c2.quadruplet_loss,
        format!(
            "rank-1 errors {}/{}, threshold errors {}/{}, quadruplet loss {:.4}/{:.4}",
            c1.rank1_errors,
            c2.rank1_errors,
            c1.min_misclassifications,
            c2.min_misclassifications,
            c1.quadruplet_loss,
            c2.quadruplet_loss
        ),
    ))
}

/// 60 identities split 50/10, d = 16, two cameras, 20 epochs.
fn ablation_config(mode: Mode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        mode,
        seed,
        epochs: 20,
        ..TrainConfig::default()
    };
    cfg.synth = SynthConfig {
        num_ids: 60,
        samples_per_id_per_camera: 3,
        cameras: 2,
        dim: 16,
        intra_sigma: 0.3,
        camera_shift_sigma: 0.3,
        ..SynthConfig::default()
    };
    cfg.test_fraction = 1.0 / 6.0;
    cfg
}

struct AblationRun {
    seed: u64,
    quad: RunSummary,
    improved: RunSummary,
    bl2: RunSummary,
    slowest: f64,
}

fn ablation_runs() -> Result<Vec<AblationRun>> {
    let mut out = Vec::new();
    for seed in 0..5 {
        let mut slowest = 0.0f64;
        let mut run = |mode| -> Result<RunSummary> {
            let start = Instant::now();
            let cfg = ablation_config(mode, seed);
            let split = prepare_split(&cfg)?;
            assert_eq!(
                (split.train.identities().len(), split.test.identities().len()),
                (50, 10)
            );
            let (params, log) = train(&cfg, &split.train)?;
            let ev = evaluate(&cfg, &params, &split, Some(&log))?;
            slowest = slowest.max(start.elapsed().as_secs_f64());
            Ok(ev.summary)
        };
        let quad = run(Mode::Quadruplet)?;
        let improved = run(Mode::TripletImproved)?;
        let bl2 = run(Mode::TripletMetric)?;
        out.push(AblationRun {
            seed,
            quad,
            improved,
            bl2,
            slowest,
        });
    }
    Ok(out)
}

fn table_ordering(runs: &[AblationRun]) -> Outcome {
    let qw = runs.iter().filter(|r| r.quad.rank1 >= r.improved.rank1).count();
    let tw = runs.iter().filter(|r| r.improved.rank1 >= r.bl2.rank1).count();
    let slowest = runs.iter().map(|r| r.slowest).fold(0.0, f64::max);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("s{} {:.3}/{:.3}/{:.3}", r.seed, r.quad.rank1, r.improved.rank1, r.bl2.rank1))
        .collect();
    outcome(
        qw >= 4 && tw >= 4 && slowest < 60.0,
        format!(
            "quadruplet >= triplet_improved {qw}/5, triplet_improved >= triplet_metric {tw}/5, slowest run {slowest:.1}s; rank-1 q/ti/bl2: {}",
            per_seed.join(", ")
        ),
    )
}

fn variation_ordering(runs: &[AblationRun]) -> Outcome {
    let wins = runs
        .iter()
        .filter(|r| {
            r.quad.train_variation.intra_mean <= r.improved.train_variation.intra_mean
                && r.quad.train_variation.inter_mean >= r.improved.train_variation.inter_mean
        })
        .count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "s{} intra {:.3}/{:.3} inter {:.3}/{:.3}",
                r.seed,
                r.quad.train_variation.intra_mean,
                r.improved.train_variation.intra_mean,
                r.quad.train_variation.inter_mean,
                r.improved.train_variation.inter_mean
            )
        })
        .collect();
    outcome(
        wins >= 4,
        format!("{wins}/5 seeds (q/ti): {}", per_seed.join(", ")),
    )
}

fn unit(theta_deg: f64) -> Vec<f64> {
    let t = theta_deg.to_radians();
    vec![t.cos(), t.sin()]
}

fn cmc_oracle() -> Result<Outcome> {
    // Identity embedding: no hidden layers, so distances are half chords
    // between the unit vectors below.
    let params = ModelParams::zeros(&Architecture::new(2, vec![], HeadKind::Softmax2))?;
    let views = [(0, 0.0, 100.0), (1, 90.0, 75.0), (2, 180.0, 170.0)];
    let mut samples = Vec::new();
    for &(id, probe, gallery) in &views {
        samples.push(Sample { features: unit(probe), person_id: id, camera_id: 0 });
        samples.push(Sample { features: unit(gallery), person_id: id, camera_id: 1 });
    }
    let ds = Dataset::new(samples)?;
    // By hand: probe 0 sees gallery angles 100, 75, 170 -> true match 2nd.
    // Probe 1 sees 10, 15, 80 -> true match 2nd. Probe 2 sees 80, 105, 10 -> 1st.
    let expected = vec![1.0 / 3.0, 1.0, 1.0];
    let got = cmc_single_shot(&params, &ds, DistanceMode::Embed, 1, &mut Rng::new(0))?;
    let exact = got.rank_accuracy == expected;

    // Random model on identity-free data: every probe ranks its match
    // uniformly, so rank-1 has mean 1/N. Probes in a trial share one model
    // and gallery, so the per-trial standard deviation is bounded by
    // sqrt(p(1-p)) rather than assuming independent probes.
    let n = 10usize;
    let trials = 1000;
    let mut rng = Rng::new(8);
    let mut sum = 0.0;
    for t in 0..trials {
        let ds = synth_generate(&SynthConfig {
            num_ids: n,
            samples_per_id_per_camera: 1,
            dim: 8,
            inter_spread: 0.0,
            seed: 1000 + t as u64,
            ..SynthConfig::default()
        })?;
        let model = ModelParams::init(&Architecture::new(8, vec![16, 8], HeadKind::Softmax2), &mut rng)?;
        sum += cmc_single_shot(&model, &ds, DistanceMode::Metric, 1, &mut rng)?.rank1();
    }
    let mean = sum / trials as f64;
    let p = 1.0 / n as f64;
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();

    // Uniform random distances, probes independent: binomial sigma.
    let mut hits = 0.0;
    let dtrials = 1000;
    for _ in 0..dtrials {
        let d = Matrix::new(n, n, (0..n * n).map(|_| rng.uniform(0.0, 1.0)).collect())?;
        let ids: Vec<u32> = (0..n as u32).collect();
        hits += cmc_from_distances(&d, &ids, &ids, 1, &mut rng)?.rank1() * n as f64;
    }
    let dmean = hits / (dtrials * n) as f64;
    let dsigma = (p * (1.0 - p) / (dtrials * n) as f64).sqrt();

    Ok(outcome(
        exact && (mean - p).abs() <= 3.0 * sigma && (dmean - p).abs() <= 3.0 * dsigma,
        format!(
            "hand enumeration {:?} vs {:?}; random model rank-1 {mean:.4} (1/N = {p}, 3 sigma = {:.4}); random distances {dmean:.4} (3 sigma = {:.4})",
            got.rank_accuracy,
            expected,
            3.0 * sigma,
            3.0 * dsigma
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let tmp = tempfile::tempdir().map_err(|e| quadnet::Error::io("<tempdir>", e))?;
    let mut cfg = ablation_config(Mode::QuadrupletMargohnm, 3);
    cfg.epochs = 4;
    let mut texts = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        train_run(&cfg, &dir)?;
        eval_run(&dir, None)?;
        let mut bytes = Vec::new();
        for f in [SUMMARY_FILE, "trainlog.json", "checkpoint", "cmc.csv", "variation.csv"] {
            bytes.push(std::fs::read(dir.join(f)).map_err(|e| quadnet::Error::io(dir.join(f), e))?);
        }
        texts.push(bytes);
    }
    let same_summary = texts[0][0] == texts[1][0];
    let same_all = texts[0] == texts[1];
    Ok(outcome(
        same_summary && same_all,
        format!("summary.json identical: {same_summary}; all run artifacts identical: {same_all}"),
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Result<Outcome>)> = vec![
        ("gradient suite", gradient_suite()),
        ("adaptive-margin gradient", adaptive_gradient()),
        ("contrastive/quadruplet identities", identity_suite()),
        ("mining rule", mining_rule()),
        ("ranking vs classification demo", preference_demo()),
    ];
    match ablation_runs() {
        Ok(runs) => {
            results.push(("ablation rank-1 ordering", Ok(table_ordering(&runs))));
            results.push(("intra/inter variation ordering", Ok(variation_ordering(&runs))));
        }
        Err(e) => {
            let msg = e.to_string();
            results.push(("ablation rank-1 ordering", Err(quadnet::Error::Config(msg.clone()))));
            results.push(("intra/inter variation ordering", Err(quadnet::Error::Config(msg))));
        }
    }
    results.push(("CMC oracle", cmc_oracle()));
    results.push(("determinism", determinism()));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(o) => {
                println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
                failed += usize::from(!o.passed);
            }
            Err(e) => {
                println!("FAIL {name}: error: {e}");
                failed += 1;
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
