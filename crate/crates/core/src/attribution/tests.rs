use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::MlpEncoder;

/// `f(x) = A x`.
struct Linear(Tensor);

impl Model for Linear {
    fn input_dim(&self) -> usize {
        self.0.cols()
    }
    fn output_dim(&self) -> usize {
        self.0.rows()
    }
    fn embed(&self, x: &Tensor) -> Result<Tensor, EncoderError> {
        Ok(x.matmul(&self.0.transpose())?)
    }
    fn jacobians(&self, x: &Tensor) -> Result<Vec<Tensor>, EncoderError> {
        Ok(vec![self.0.clone(); x.rows()])
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}

fn encoder(seed: u64, input: usize) -> MlpEncoder {
    MlpEncoder::init(seed, input, 16, &[2, 2], 1.1).unwrap()
}

#[test]
fn neuron_gradient_of_linear_model_is_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random(&mut rng, 3, 5);
    let map = neuron_gradient(&Linear(a.clone()), &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
    assert_eq!(map.scores, a.transpose());
}

#[test]
fn zero_weight_encoder_gives_zero_maps() {
    let mut enc = encoder(1, 6);
    for l in &mut enc.layers {
        l.weight.data_mut().fill(0.0);
    }
    let x = [0.3; 6];
    assert_eq!(neuron_gradient(&enc, &x).unwrap().scores.max_abs(), 0.0);
    let inv = inverted_neuron_gradient(&enc, &x, DEFAULT_RANK_TOL).unwrap();
    assert_eq!(inv.scores.max_abs(), 0.0);
    assert_eq!(inv.rank, Some(0));
}

#[test]
fn neuron_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = encoder(2, 7);
    let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let map = neuron_gradient(&enc, &x).unwrap();
    let h = 1e-5;
    for i in 0..7 {
        let (mut p, mut m) = (x.clone(), x.clone());
        p[i] += h;
        m[i] -= h;
        let fp = enc.embed(&Tensor::new(1, 7, p).unwrap()).unwrap();
        let fm = enc.embed(&Tensor::new(1, 7, m).unwrap()).unwrap();
        for j in 0..4 {
            let fd = (fp.get(0, j) - fm.get(0, j)) / (2.0 * h);
            assert!((fd - map.scores.get(i, j)).abs() < 1e-4 * map.scores.max_abs());
        }
    }
}

#[test]
fn pseudo_inverse_closed_forms() {
    let id = Linear(Tensor::identity(3));
    let inv = inverted_neuron_gradient(&id, &[1.0, 2.0, 3.0], DEFAULT_RANK_TOL).unwrap();
    assert!(close(&inv.scores, &Tensor::identity(3), 1e-14));
    let diag = Linear(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let inv = inverted_neuron_gradient(&diag, &[1.0, 1.0], DEFAULT_RANK_TOL).unwrap();
    assert!(close(&inv.scores, &Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.0]]).unwrap(), 1e-14));
    assert_eq!(inv.rank, Some(1));
}

fn penrose_residuals(j: &Tensor, p: &Tensor) -> [f64; 4] {
    let jp = j.matmul(p).unwrap();
    let pj = p.matmul(j).unwrap();
    let dev = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    [
        dev(&jp.matmul(j).unwrap(), j),
        dev(&pj.matmul(p).unwrap(), p),
        dev(&jp, &jp.transpose()),
        dev(&pj, &pj.transpose()),
    ]
}

#[test]
fn penrose_conditions_on_full_row_rank_jacobians() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let j = random(&mut rng, 4, 50);
        let p = inverted_neuron_gradient(&Linear(j.clone()), &[0.0; 50], DEFAULT_RANK_TOL).unwrap().scores;
        assert!(close(&j.matmul(&p).unwrap(), &Tensor::identity(4), 1e-10));
        assert!(penrose_residuals(&j, &p).iter().all(|&r| r < 1e-10));
    }
}

#[test]
fn integrated_gradients_of_linear_model_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&mut rng, 2, 5);
    let x = [0.5, -1.0, 2.0, 0.0, 1.5];
    let ig = integrated_gradients(&Linear(a.clone()), &x, &[0.0; 5], 4).unwrap();
    let want = Tensor::from_fn(5, 2, |i, j| x[i] * a.get(j, i));
    assert!(close(&ig.scores, &want, 1e-14));
    assert!(matches!(integrated_gradients(&Linear(a), &x, &[0.0; 5], 1), Err(AttributionError::Steps(1))));
}

#[test]
fn integrated_gradients_completeness() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = encoder(5, 10);
    for _ in 0..10 {
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-0.5..0.5)).collect();
        let ig = integrated_gradients(&enc, &x, &b, 256).unwrap();
        let fx = enc.embed(&Tensor::new(1, 10, x.clone()).unwrap()).unwrap();
        let fb = enc.embed(&Tensor::new(1, 10, b.clone()).unwrap()).unwrap();
        for j in 0..4 {
            let total: f64 = (0..10).map(|i| ig.scores.get(i, j)).sum();
            assert!((total - (fx.get(0, j) - fb.get(0, j))).abs() < 1e-3);
        }
        assert_eq!(integrated_gradients(&enc, &x, &x, 8).unwrap().scores.max_abs(), 0.0);
    }
}

#[test]
fn feature_ablation_recovers_additive_terms() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0, -2.0], vec![0.5, 3.0, 0.0]]).unwrap();
    let x = [2.0, 1.0, 0.5];
    let map = feature_ablation(&Linear(a.clone()), &x, &[0.0; 3]).unwrap();
    assert!(close(&map.scores, &Tensor::from_fn(3, 2, |i, j| a.get(j, i) * x[i]), 1e-14));
    // an input the model ignores gets an all-zero row
    assert_eq!(map.scores.get(2, 1), 0.0);
    assert_eq!(feature_ablation(&encoder(6, 3), &x, &x).unwrap().scores.max_abs(), 0.0);
}

#[test]
fn shapley_of_linear_model_with_zero_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 2, 6);
    let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let map = shapley_sampled(&Linear(a.clone()), &x, ShapleyBaseline::Zeros, 200, 1).unwrap();
    let want = Tensor::from_fn(6, 2, |i, j| a.get(j, i) * x[i]);
    for (got, want) in map.scores.data().iter().zip(want.data()) {
        assert!((got - want).abs() <= 0.05 * want.abs() + 1e-12);
    }
}

/// Exact Shapley values by enumerating every coalition.
fn shapley_exhaustive(model: &MlpEncoder, x: &[f64]) -> Tensor {
    let dim = x.len();
    let fact = |n: usize| (1..=n).product::<usize>() as f64;
    let coalitions = 1usize << dim;
    let probes = Tensor::from_fn(coalitions, dim, |s, i| if s >> i & 1 == 1 { x[i] } else { 0.0 });
    let y = model.embed(&probes).unwrap();
    Tensor::from_fn(dim, y.cols(), |i, j| {
        (0..coalitions)
            .filter(|s| s >> i & 1 == 0)
            .map(|s| {
                let size = (s as u32).count_ones() as usize;
                let w = fact(size) * fact(dim - size - 1) / fact(dim);
                w * (y.get(s | 1 << i, j) - y.get(s, j))
            })
            .sum()
    })
}

#[test]
fn sampled_shapley_matches_exhaustive_enumeration() {
    let enc = encoder(8, 4);
    let x = [1.2, -0.7, 0.4, 1.5];
    let exact = shapley_exhaustive(&enc, &x);
    let sampled = shapley_sampled(&enc, &x, ShapleyBaseline::Zeros, 20_000, 3).unwrap();
    let scale = exact.max_abs();
    for (s, e) in sampled.scores.data().iter().zip(exact.data()) {
        assert!((s - e).abs() < 0.02 * scale, "{s} vs {e}");
    }
    // efficiency holds per permutation with a fixed baseline
    let fx = enc.embed(&Tensor::new(1, 4, x.to_vec()).unwrap()).unwrap();
    let f0 = enc.embed(&Tensor::zeros(1, 4)).unwrap();
    for j in 0..4 {
        let total: f64 = (0..4).map(|i| sampled.scores.get(i, j)).sum();
        assert!((total - (fx.get(0, j) - f0.get(0, j))).abs() < 1e-10);
    }
}

#[test]
fn shuffled_shapley_is_seeded_and_efficient_in_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pool = random(&mut rng, 50, 5);
    let enc = encoder(9, 5);
    let x = [0.3, -0.2, 0.9, 0.1, -0.8];
    let a = shapley_sampled(&enc, &x, ShapleyBaseline::Shuffle(&pool), 400, 4).unwrap();
    let b = shapley_sampled(&enc, &x, ShapleyBaseline::Shuffle(&pool), 400, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.method, Method::ShapleyShuffle);
    // absent features are drawn independently per feature, so the expected
    // baseline output is over the product of the per-feature marginals
    let mut draw = ChaCha8Rng::seed_from_u64(99);
    let probes = Tensor::from_fn(20_000, 5, |_, i| pool.get(draw.random_range(0..50), i));
    let f_base = enc.embed(&probes).unwrap();
    let fx = enc.embed(&Tensor::new(1, 5, x.to_vec()).unwrap()).unwrap();
    for j in 0..4 {
        let total: f64 = (0..5).map(|i| a.scores.get(i, j)).sum();
        let expect = fx.get(0, j) - (0..20_000).map(|t| f_base.get(t, j)).sum::<f64>() / 20_000.0;
        let sd = ((0..20_000).map(|t| f_base.get(t, j).powi(2)).sum::<f64>() / 20_000.0).sqrt();
        // 400 baseline draws: four standard errors
        assert!((total - expect).abs() < 4.0 * sd / 20.0, "{total} vs {expect}");
    }
}

#[test]
fn aggregation_rules() {
    let m = Tensor::from_rows(&[vec![1.0, -2.0], vec![-3.0, 0.5]]).unwrap();
    let abs = m.map(f64::abs);
    assert_eq!(aggregate_global(&[m.clone()], Aggregation::Sum).unwrap(), abs);
    let three = aggregate_global(&[m.clone(), m.clone(), m.clone()], Aggregation::Sum).unwrap();
    assert_eq!(three, abs.map(|v| 3.0 * v));
    assert_eq!(aggregate_global(&[m.clone(), m.clone()], Aggregation::Mean).unwrap(), abs);
    let other = m.map(|v| 10.0 * v);
    let med = aggregate_global(&[m.clone(), other.clone(), m.clone()], Aggregation::Median).unwrap();
    assert_eq!(med, abs);
    assert!(matches!(aggregate_global(&[], Aggregation::Sum), Err(AttributionError::Empty)));
    assert!(matches!(aggregate_global(&[m, Tensor::zeros(1, 2)], Aggregation::Sum), Err(AttributionError::Shape(..))));
}

#[test]
fn thresholding_examples() {
    let s = Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(binarize(&s, 1.5).data(), &[0, 1, 1]);
    assert_eq!(zscore_threshold(&s).unwrap().data(), &[0, 1, 1]);
    assert!(zscore_threshold(&Tensor::filled(2, 2, 4.0)).is_none());
    assert_eq!(zscore_binarize(&Tensor::filled(2, 2, 4.0)).count_ones(), 0);
}

#[test]
fn global_attribution_is_independent_of_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, 700, 6);
    let enc = encoder(10, 6);
    let cfg = AttributionConfig { subsample: Some(300), permutations: 3, ig_steps: 4, ..AttributionConfig::default() };
    for method in Method::ALL {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| attribute(&enc, &x, method, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a, b, "{}", method.name());
        let expect = if method.is_gradient() { 700 } else { 300 };
        assert_eq!(a.timesteps, expect);
        assert_eq!(a.scores.shape(), [6, 4]);
    }
}

#[test]
fn global_sum_and_mean_rank_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, 300, 5);
    let enc = encoder(11, 5);
    let sum = attribute(&enc, &x, Method::InvertedNeuronGradient, &AttributionConfig::default()).unwrap();
    let mean_cfg = AttributionConfig { aggregation: Aggregation::Mean, ..AttributionConfig::default() };
    let mean = attribute(&enc, &x, Method::InvertedNeuronGradient, &mean_cfg).unwrap();
    assert!(close(&sum.scores.map(|v| v / 300.0), &mean.scores, 1e-12));
    assert_eq!(sum.min_rank, Some(4));
    let manual: Vec<Tensor> =
        (0..300).map(|t| inverted_neuron_gradient(&enc, x.row(t), DEFAULT_RANK_TOL).unwrap().scores).collect();
    assert!(close(&aggregate_global(&manual, Aggregation::Sum).unwrap(), &sum.scores, 1e-9));
}

proptest! {
    #[test]
    fn penrose_conditions_hold_for_any_shape(seed in 0u64..500, rows in 1usize..6, cols in 1usize..12, rank_cut in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut j = random(&mut rng, rows, cols);
        if rank_cut && rows > 1 {
            // duplicate a row to force rank deficiency
            let first = j.row(0).to_vec();
            for (c, v) in first.into_iter().enumerate() {
                j.set(rows - 1, c, v);
            }
        }
        let p = pinv(&j, DEFAULT_RANK_TOL).matrix;
        let res = penrose_residuals(&j, &p);
        prop_assert!(res.iter().all(|&r| r < 1e-8), "{:?}", res);
    }
}
