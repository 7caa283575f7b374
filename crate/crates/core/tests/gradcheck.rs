use emt_core::commands::{cmd_gradcheck, run_gradcheck};
use emt_core::config::RunConfig;
use emt_core::fusion::{Strategy, Variant};
use emt_core::tensor::fault;
use emt_core::Error;

fn quick() -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.gradcheck.samples_per_tensor = 3;
    cfg
}

#[test]
fn task_loss_only_path_passes() {
    let mut cfg = quick();
    cfg.train.lambda1 = 0.0;
    cfg.train.lambda2 = 0.0;
    let r = run_gradcheck(&cfg).unwrap();
    assert!(r.passed, "max rel. error {}", r.max_rel_error);
}

#[test]
fn every_strategy_and_variant_passes() {
    for strategy in Strategy::ALL {
        for variant in [Variant::Parallel, Variant::Serial] {
            let mut cfg = quick();
            cfg.model.fusion.strategy = strategy;
            cfg.model.fusion.variant = variant;
            if cfg.model.fusion.validate().is_err() {
                continue;
            }
            let r = run_gradcheck(&cfg).unwrap();
            assert!(r.passed, "{strategy:?}/{variant:?}: {}", r.max_rel_error);
        }
    }
}

#[test]
fn shared_parameters_pass() {
    let mut cfg = quick();
    cfg.model.fusion.share_mpu = true;
    cfg.model.fusion.share_layer = true;
    cfg.model.share_simsiam_heads = true;
    assert!(run_gradcheck(&cfg).unwrap().passed);
}

#[test]
fn corrupted_backward_rule_is_caught_and_named() {
    let dir = tempfile::tempdir().unwrap();
    fault::corrupt_backward("embedding", 1.5);
    let result = cmd_gradcheck(&quick(), dir.path());
    fault::clear();
    match result {
        Err(Error::GradCheck { name, error, .. }) => {
            assert_eq!(name, "encoders.text.embedding");
            assert!(error > 1e-4);
        }
        other => panic!("expected a gradcheck failure, got {other:?}"),
    }
    assert!(dir.path().join("gradcheck.json").exists());
}
