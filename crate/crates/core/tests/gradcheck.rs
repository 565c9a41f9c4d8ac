use promptrr_core::gradcheck::{audit_micro, check, GradcheckConfig};
use promptrr_core::pipeline::{ModelConfig, Models};

#[test]
fn micro_model_audit_passes() {
    let cfg = GradcheckConfig::default();
    let report = audit_micro(&cfg).unwrap();
    assert_eq!(report.checked, cfg.max_coords.min(report.total_scalars));
    assert!(report.ok(), "{:?}", report.worst);
}

#[test]
fn audit_sees_every_tensor() {
    // a budget smaller than the tensor count still audits one coordinate each
    let (_, w) = Models::build::<f64>(ModelConfig::micro(), 0).unwrap();
    let tensors: usize = w.stores().iter().map(|s| s.len()).sum();
    let cfg = GradcheckConfig {
        max_coords: 1,
        ..Default::default()
    };
    let report = audit_micro(&cfg).unwrap();
    assert_eq!(report.checked, tensors);
}

#[test]
fn wrong_gradient_is_caught() {
    let (_, mut w) = Models::build::<f64>(ModelConfig::micro(), 1).unwrap();
    let cfg = GradcheckConfig {
        max_coords: 50,
        ..Default::default()
    };
    // the analytic pass reads the weight as a constant, so its reverse-mode
    // gradient is zero while the finite differences are not
    let report = check(&mut w, &cfg, |tape, b| {
        let v = b.den_low.vars()[0];
        let analytic_pass = v.requires_grad();
        let x = if analytic_pass { tape.constant(v.value()) } else { v };
        Ok(x.square().sum())
    })
    .unwrap();
    assert!(!report.ok());
    assert!(report.failures.iter().all(|f| f.param.starts_with("den_low")));
}
