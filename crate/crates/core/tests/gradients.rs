mod common;

use common::{cases, gradient_suite};

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    for report in gradient_suite(100, 7) {
        assert!(
            report.worst_rel < 1e-4,
            "{}: relative error {:.3e} over {} instances",
            report.name,
            report.worst_rel,
            report.instances
        );
    }
}

#[test]
fn suite_covers_layers_and_losses() {
    let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
    for needed in [
        "matmul",
        "relu",
        "tanh",
        "normalize_power",
        "l1_loss",
        "cross_entropy",
        "mlp_cross_entropy",
    ] {
        assert!(names.contains(&needed), "missing {needed}");
    }
}
