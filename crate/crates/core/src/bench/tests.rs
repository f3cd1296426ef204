use super::*;

fn tiny_spec() -> BenchSpec {
    BenchSpec {
        data: DataSpec::Synthetic(SynthConfig { t: 400, ..SynthConfig::default() }),
        train: TrainConfig {
            hidden_width: 8,
            batch_size: 16,
            negatives: 16,
            steps: 4,
            ramp_start: 1,
            ramp_end: 2,
            log_every: 2,
            eval_batches: 1,
            ..TrainConfig::default()
        },
        attribution: AttributionConfig { subsample: Some(8), gradient_subsample: Some(8), permutations: 2, ig_steps: 4, ..Default::default() },
        modes: vec![Mode::Supervised],
        methods: vec![Method::InvertedNeuronGradient],
        seeds: vec![0],
        bootstrap: 50,
        r2_rows: 100,
        ..BenchSpec::default()
    }
}

#[test]
fn single_cell_grid_has_one_row_per_arm() {
    let mut spec = tiny_spec();
    spec.lambda_max = 0.0;
    let res = run_benchmark(&spec, 1).unwrap();
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.summary.len(), 1);
    let row = &res.rows[0];
    assert!(row.error.is_none(), "{:?}", row.error);
    assert!((0.0..=1.0).contains(&row.auroc));
    assert!(row.ci_lo <= row.ci_hi);
    let csv = res.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    assert!(lines.next().unwrap().starts_with("inverted_neuron_gradient,supervised,false,0,"));
    assert_eq!(lines.next(), None);
}

#[test]
fn grid_covers_modes_arms_and_methods_deterministically() {
    let mut spec = tiny_spec();
    spec.modes = vec![Mode::Hybrid, Mode::Supervised, Mode::Regression];
    spec.methods = vec![Method::NeuronGradient, Method::FeatureAblation];
    spec.seeds = vec![0, 1];
    let a = run_benchmark(&spec, 2).unwrap();
    assert_eq!(a.rows.len(), 3 * 2 * 2 * 2);
    assert_eq!(a.summary.len(), 3 * 2 * 2);
    assert!(a.rows.iter().all(|r| r.error.is_none()));
    let b = run_benchmark(&spec, 1).unwrap();
    let strip = |r: &BenchResult| r.rows.iter().map(|r| (r.method, r.mode, r.regularized, r.seed, r.auroc.to_bits())).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn failed_cells_are_recorded_not_fatal() {
    let mut spec = tiny_spec();
    spec.target.group = Some(7);
    let res = run_benchmark(&spec, 1).unwrap();
    assert!(res.rows.iter().all(|r| r.error.is_some() && r.auroc.is_nan()));
    assert!(res.summary.iter().all(|s| s.failures == 1 && s.seeds == 0));
    assert!(res.to_csv().lines().nth(1).unwrap().contains(",,"));
}

#[test]
fn invalid_spec_is_rejected() {
    let mut spec = tiny_spec();
    spec.seeds.clear();
    assert!(run_benchmark(&spec, 1).is_err());
    let mut spec = tiny_spec();
    spec.hybrid_partition = vec![4];
    spec.modes = vec![Mode::Hybrid];
    assert!(spec.validate().is_err());
}

#[test]
fn spec_parses_from_json_with_unknown_keys_rejected() {
    let spec: BenchSpec = serde_json::from_str(r#"{"modes": ["hybrid"], "data": {"navsim": {"t": 100}}}"#).unwrap();
    assert_eq!(spec.modes, vec![Mode::Hybrid]);
    assert!(matches!(spec.data, DataSpec::Navsim(ref c) if c.t == 100));
    assert!(serde_json::from_str::<BenchSpec>(r#"{"mode": ["hybrid"]}"#).is_err());
}

#[test]
fn auroc_ci_brackets_the_estimate() {
    let scores = [0.9, 0.8, 0.7, 0.4, 0.35, 0.3, 0.2, 0.75];
    let labels = [true, true, true, false, false, false, false, false];
    let point = auroc_values(&scores, &labels).unwrap();
    let (lo, hi) = auroc_ci(&scores, &labels, 500, 0.95, 3).unwrap();
    assert!(lo <= point && point <= hi, "{lo} {point} {hi}");
    assert_eq!(auroc_ci(&scores, &labels, 500, 0.95, 3), Some((lo, hi)));
    assert!(auroc_ci(&scores, &[true; 8], 10, 0.95, 0).is_none());
}
