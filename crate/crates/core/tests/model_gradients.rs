//! Parameter gradients of deeper networks than the built-in gradcheck uses,
//! against central differences.

use quadnet::model::{
    backward_distances, backward_pairs, forward_distances, forward_pairs, Architecture, HeadKind, ModelParams,
    PairFeatures,
};
use quadnet::numeric::{relative_error, Matrix, Rng};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const GUARD: f64 = 1e-4;

fn random_inputs(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Max relative error of `grad` against central differences of `loss`.
fn fd_max_error(params: &ModelParams, grad: &ModelParams, loss: impl Fn(&ModelParams) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for n in 0..params.num_params() {
        let x = params.get_flat(n);
        probe.set_flat(n, x + EPS);
        let up = loss(&probe);
        probe.set_flat(n, x - EPS);
        let down = loss(&probe);
        probe.set_flat(n, x);
        let e = relative_error(grad.get_flat(n), (up - down) / (2.0 * EPS));
        if e.is_nan() || e > worst {
            worst = e;
        }
    }
    worst
}

fn three_layer(head: HeadKind, pf: PairFeatures) -> Architecture {
    Architecture::new(5, vec![8, 7, 6], head).with_pair_features(pf)
}

#[test]
fn metric_head_gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    let pairs = [(0, 1), (1, 2), (3, 0), (2, 4), (4, 4)];
    let mut checked = 0;
    for (head, pf) in [
        (HeadKind::Softmax2, PairFeatures::ConcatProduct),
        (HeadKind::Softmax2, PairFeatures::Concat),
        (HeadKind::Linear1, PairFeatures::ConcatProduct),
        (HeadKind::Linear1, PairFeatures::Concat),
    ] {
        let mut done = 0;
        while done < 5 {
            let params = ModelParams::init(&three_layer(head, pf), &mut rng).unwrap();
            let x = random_inputs(&mut rng, 5, 5);
            let weights: Vec<f64> = pairs.iter().map(|_| rng.uniform(-1.0, 1.0)).collect();
            let (_, cache) = forward_pairs(&params, &x, &pairs).unwrap();
            if cache.embed_cache().min_abs_pre_activation() < GUARD {
                continue;
            }
            let grad = backward_pairs(&params, &cache, &weights).unwrap();
            let loss = |p: &ModelParams| {
                let (s, _) = forward_pairs(p, &x, &pairs).unwrap();
                s.iter().zip(&weights).map(|(s, w)| s.g * w).sum::<f64>()
            };
            let err = fd_max_error(&params, &grad, loss);
            assert!(err < TOL, "{head:?}/{pf:?}: max rel err {err:e}");
            done += 1;
            checked += 1;
        }
    }
    assert_eq!(checked, 20);
}

#[test]
fn embedding_distance_gradients_match_finite_differences() {
    let mut rng = Rng::new(12);
    let pairs = [(0, 1), (1, 2), (3, 0), (2, 4)];
    let mut done = 0;
    while done < 10 {
        let params = ModelParams::init(&three_layer(HeadKind::Softmax2, PairFeatures::ConcatProduct), &mut rng).unwrap();
        let x = random_inputs(&mut rng, 5, 5);
        let weights: Vec<f64> = pairs.iter().map(|_| rng.uniform(-1.0, 1.0)).collect();
        let (d, cache) = forward_distances(&params, &x, &pairs).unwrap();
        if cache.embed_cache().min_abs_pre_activation() < GUARD || d.iter().any(|&v| v < GUARD) {
            continue;
        }
        let grad = backward_distances(&params, &cache, &weights).unwrap();
        let loss = |p: &ModelParams| {
            let (d, _) = forward_distances(p, &x, &pairs).unwrap();
            d.iter().zip(&weights).map(|(d, w)| d * w).sum::<f64>()
        };
        let err = fd_max_error(&params, &grad, loss);
        assert!(err < TOL, "max rel err {err:e}");
        done += 1;
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut rng = Rng::new(13);
    let params = ModelParams::init(&three_layer(HeadKind::Linear1, PairFeatures::ConcatProduct), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    params.save(&path).unwrap();
    assert_eq!(ModelParams::load(&path).unwrap(), params);
}
