use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::grad_check;
use crate::synth::{make_dataset, SynthConfig};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn small_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        hidden_width: 16,
        batch_size: 32,
        negatives: 32,
        steps: 40,
        ramp_start: 10,
        ramp_end: 20,
        learning_rate: 1e-3,
        log_every: 10,
        eval_batches: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn small_data(seed: u64) -> Dataset {
    make_dataset(&SynthConfig { t: 2000, seed, ..SynthConfig::default() }).unwrap().0
}

#[test]
fn infonce_closed_forms() {
    // every negative scores 0, the positive scores 10
    let neg = Tensor::zeros(1, 100);
    assert!((infonce(&[10.0], &neg) - (100f64.ln() - 10.0)).abs() < 1e-12);
    // one negative equal to the positive
    let neg = Tensor::filled(1, 1, 3.0);
    assert!(infonce(&[3.0], &neg).abs() < 1e-12);
}

#[test]
fn identical_embeddings_give_log_n() {
    let mut enc = init_encoder(&small_cfg(Mode::Time), 50).unwrap();
    for l in &mut enc.layers {
        l.weight = Tensor::zeros(l.weight.rows(), l.weight.cols());
    }
    let data = small_data(0);
    let loss = evaluate_loss(&enc, &data, &small_cfg(Mode::Time), 2).unwrap();
    assert!((loss - 32f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn graph_infonce_matches_numeric() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for sim in [Similarity::NegSqEuclidean { temperature: 0.7 }, Similarity::Dot { temperature: 0.5 }] {
        let (r, p, n) = (random(&mut rng, 6, 3), random(&mut rng, 6, 3), random(&mut rng, 9, 3));
        let mut g = Graph::new();
        let (rn, pn, nn) = (g.constant(r.clone()), g.constant(p.clone()), g.constant(n.clone()));
        // the graph's dot form skips normalization; feed unit rows
        let unit = |t: &Tensor| {
            Tensor::from_fn(t.rows(), t.cols(), |i, j| {
                let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                if matches!(sim, Similarity::Dot { .. }) { t.get(i, j) / norm } else { t.get(i, j) }
            })
        };
        let (r, p, n) = (unit(&r), unit(&p), unit(&n));
        let (rn, pn, nn) = if matches!(sim, Similarity::Dot { .. }) {
            (g.constant(r.clone()), g.constant(p.clone()), g.constant(n.clone()))
        } else {
            (rn, pn, nn)
        };
        let node = infonce_node(&mut g, sim, rn, pn, nn).unwrap();
        let pos: Vec<f64> = (0..6).map(|i| sim.eval(r.row(i), p.row(i))).collect();
        let neg = Tensor::from_fn(6, 9, |i, j| sim.eval(r.row(i), n.row(j)));
        let want = infonce(&pos, &neg);
        assert!((g.value(node).item() - want).abs() < 1e-10);
    }
}

#[test]
fn infonce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, n) = (random(&mut rng, 5, 4), random(&mut rng, 7, 4));
    let r = random(&mut rng, 5, 4);
    let sim = Similarity::NegSqEuclidean { temperature: 0.8 };
    let report = grad_check(
        |g, x| {
            let (pn, nn) = (g.constant(p.clone()), g.constant(n.clone()));
            infonce_node(g, sim, x, pn, nn)
        },
        &r,
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(report.passes(1e-3), "{}", report.max_rel_error);
}

#[test]
fn ramp_schedule() {
    assert_eq!(lambda_schedule(0, 0.1, 10, 20), 0.0);
    assert_eq!(lambda_schedule(9, 0.1, 10, 20), 0.0);
    assert_eq!(lambda_schedule(10, 0.1, 10, 20), 0.0);
    assert!((lambda_schedule(15, 0.1, 10, 20) - 0.05).abs() < 1e-15);
    assert_eq!(lambda_schedule(20, 0.1, 10, 20), 0.1);
    assert_eq!(lambda_schedule(10_000, 0.1, 10, 20), 0.1);
}

#[test]
fn unregularized_trace_matches_plain_infonce() {
    let data = small_data(1);
    let cfg = TrainConfig { lambda_max: 0.0, ..small_cfg(Mode::Time) };
    let out = train(&data, &cfg).unwrap();
    for row in &out.trace.rows {
        assert_eq!(row.reg, 0.0);
        assert_eq!(row.lambda, 0.0);
        assert!((row.gof - (32f64.ln() - row.infonce)).abs() < 1e-12);
    }
    // the first logged row is the untrained encoder on batch 0
    let enc = init_encoder(&cfg, data.x.cols()).unwrap();
    let index = IndexedDataset::new(data.len(), None).unwrap();
    let batch = index.build_batch(Mode::Time, 32, 32, cfg.seed, 0).unwrap();
    let emb = crate::encoder::Model::embed(&enc, &data.x).unwrap();
    let pos: Vec<f64> =
        batch.reference.iter().zip(&batch.positives[0]).map(|(&a, &b)| cfg.similarity.eval(emb.row(a), emb.row(b))).collect();
    let neg = Tensor::from_fn(32, 32, |i, j| cfg.similarity.eval(emb.row(batch.reference[i]), emb.row(batch.negatives[j])));
    assert!((out.trace.rows[0].infonce - infonce(&pos, &neg)).abs() < 1e-9);
}

#[test]
fn training_is_deterministic_and_logs_the_ramp() {
    let data = small_data(2);
    let cfg = small_cfg(Mode::Hybrid);
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a.encoder.layers[0].weight, b.encoder.layers[0].weight);
    let steps: Vec<usize> = a.trace.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 39]);
    assert_eq!(a.trace.rows[1].lambda, 0.0);
    assert_eq!(a.trace.rows[2].lambda, 0.1);
    assert!(a.trace.rows.iter().all(|r| r.reg > 0.0));
    assert!(a.trace.to_csv().starts_with("step,infonce,reg,lambda,gof\n0,"));
}

#[test]
fn time_contrastive_training_reduces_the_loss() {
    let data = small_data(4);
    let cfg = TrainConfig { steps: 300, log_every: 100, eval_batches: 4, lambda_max: 0.0, ..small_cfg(Mode::Time) };
    let out = train(&data, &cfg).unwrap();
    let before = evaluate_loss(&init_encoder(&cfg, 50).unwrap(), &data, &cfg, 4).unwrap();
    assert!(out.trace.final_infonce < before - 0.2, "{} vs {before}", out.trace.final_infonce);
    assert!(goodness_of_fit(&out.trace) > 0.2);
}

#[test]
fn regression_fits_labels() {
    let data = small_data(5);
    let cfg = TrainConfig { steps: 300, log_every: 100, lambda_max: 0.0, partition: vec![2], ..small_cfg(Mode::Regression) };
    let out = train(&data, &cfg).unwrap();
    let first = out.trace.rows[0].infonce;
    assert!(out.trace.final_infonce < 0.5 * first, "{} vs {first}", out.trace.final_infonce);
    let bad = TrainConfig { partition: vec![3], ..cfg };
    assert!(matches!(train(&data, &bad), Err(TrainError::LabelWidth { .. })));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { partition: vec![], ..TrainConfig::default() },
        TrainConfig { partition: vec![4], ..TrainConfig::default() },
        TrainConfig { ramp_start: 5, ramp_end: 5, ..TrainConfig::default() },
        TrainConfig { lambda_max: f64::NAN, ..TrainConfig::default() },
        TrainConfig { similarity: Similarity::Dot { temperature: 0.0 }, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
    }
    let json = r#"{"mode":"time","similarity":{"kind":"neg_sq_euclidean"}}"#;
    let cfg: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.similarity.temperature(), 1.0);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz":3}"#).is_err());
}
