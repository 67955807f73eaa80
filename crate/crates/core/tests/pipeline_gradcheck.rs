use cerd::config::TrainConfig;
use cerd::fullcheck::pipeline_gradcheck;

fn check(detach: bool) {
    let config = TrainConfig {
        detach_completion: detach,
        ..TrainConfig::tiny()
    };
    let r = pipeline_gradcheck(&config, 1e-5, 1e-4).unwrap();
    assert!(r.passed, "detach={detach}: {:?}", r.modules);
    assert!(r.modules.contains_key("generator"), "{:?}", r.modules.keys());
}

#[test]
fn joint_objective_gradients_with_attached_completion() {
    check(false);
}

#[test]
fn joint_objective_gradients_with_detached_completion() {
    check(true);
}

#[test]
fn joint_objective_gradients_with_partial_reconstruction() {
    let config = TrainConfig {
        partial_reconstruction: true,
        detach_completion: true,
        ..TrainConfig::tiny()
    };
    let r = pipeline_gradcheck(&config, 1e-5, 1e-4).unwrap();
    assert!(r.passed, "{:?}", r.modules);
}
