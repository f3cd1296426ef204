use super::*;

fn small_linear() -> LinearSetup {
    LinearSetup { data: SynthConfig { t: 600, mixing: MixingKind::Linear, ..SynthConfig::default() }, fit_rows: 400, ..LinearSetup::default() }
}

#[test]
fn min_norm_affine_reproduces_linear_latents() {
    let (data, model, unreg) = linear_models(&small_linear(), 3).unwrap();
    let z = data.z.as_ref().unwrap();
    for emb in [model.embed(&data.x).unwrap(), unreg.embed(&data.x).unwrap()] {
        let err = (0..emb.len()).map(|k| (emb.data()[k] - z.data()[k]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err}");
    }
    // the perturbed twin has a strictly larger Jacobian
    assert!(unreg.weight.frobenius_sq() > model.weight.frobenius_sq() + 1e-3);
}

#[test]
fn linear_case_is_exact_and_control_breaks_it() {
    for seed in 0..3 {
        let v = check_linear_exact(&small_linear(), seed);
        assert!(v.error.is_none(), "{:?}", v.error);
        assert!(v.passed, "{:?}", v.metrics);
        assert_eq!(v.metrics["auroc"], 1.0);
        assert!(v.metrics["control_mismatches"] > 0.0);
    }
}

#[test]
fn block_transforms_preserve_pattern_dense_ones_do_not() {
    let v = check_block_invariance(&small_linear(), 1);
    assert!(v.error.is_none(), "{:?}", v.error);
    assert!(v.passed, "{:?}", v.metrics);
}

#[test]
fn random_transform_respects_blocks() {
    let m = random_transform(&[2, 3], true, 9);
    for i in 0..5 {
        for j in 0..5 {
            if (i < 2) != (j < 2) {
                assert_eq!(m.get(i, j), 0.0);
            }
        }
    }
    assert!(linalg::condition_number(&m) < 1e3);
    let dense = random_transform(&[2, 3], false, 9);
    assert!(dense.get(0, 4) != 0.0);
}

#[test]
fn latent_order_puts_observed_groups_first() {
    let (data, _) = make_dataset(&SynthConfig { t: 50, observed: vec![1], ..SynthConfig::default() }).unwrap();
    assert_eq!(hybrid_latent_order(&data), (vec![2, 3, 0, 1], vec![2, 2]));
}

#[test]
fn config_rejects_unknown_keys_and_reports_serialize() {
    assert!(serde_json::from_str::<ClaimsConfig>(r#"{"linear": {"fit_rowz": 3}}"#).is_err());
    let cfg: ClaimsConfig = serde_json::from_str(r#"{"linear": {"fit_rows": 300}}"#).unwrap();
    assert_eq!(cfg.linear.fit_rows, 300);
    let report = run_claims(&ClaimsConfig { linear: small_linear(), ..cfg }, &[Claim::LinearExact], &[0, 1], 2).unwrap();
    assert!(report.passed);
    let json = serde_json::to_string(&report).unwrap();
    assert!(json.contains("\"linear_exact\""));
}
