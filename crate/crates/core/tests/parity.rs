use std::path::PathBuf;

use legrad_core::fixtures::check_parity;
use legrad_core::tensor::TensorContainer;
use legrad_core::Error;
use serde_json::json;

const TOL: f64 = 1e-4;

fn fixture(name: &str) -> TensorContainer {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name);
    TensorContainer::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn f64_fixtures_match_reference_forward() {
    for name in ["parity_cls_f64.lgtc", "parity_pool_f64.lgtc"] {
        let report = check_parity::<f64>(&fixture(name)).unwrap();
        assert!(report.max_abs() <= TOL, "{name}: {report:?}");
        // Both sides ran in double precision.
        assert!(report.max_abs() < 1e-10, "{name}: {report:?}");
    }
}

#[test]
fn f32_fixtures_match_reference_forward() {
    for name in ["parity_cls_f32.lgtc", "parity_pool_f32.lgtc"] {
        let report = check_parity::<f32>(&fixture(name)).unwrap();
        assert!(report.max_abs() <= TOL, "{name}: {report:?}");
    }
}

#[test]
fn f32_weights_run_at_f64() {
    for name in ["parity_cls_f32.lgtc", "parity_pool_f32.lgtc"] {
        let report = check_parity::<f64>(&fixture(name)).unwrap();
        assert!(report.max_abs() <= TOL, "{name}: {report:?}");
    }
}

#[test]
fn width_mismatch_is_a_schema_error() {
    let mut c = fixture("parity_cls_f64.lgtc");
    c.metadata["model"]["width"] = json!(16);
    c.metadata["model"]["heads"] = json!(2);
    match check_parity::<f64>(&c) {
        Err(Error::WeightShape {
            name,
            expected,
            actual,
        }) => {
            assert_eq!(name, "patch_embed.weight");
            assert_eq!(expected, vec![16, 3, 4, 4]);
            assert_eq!(actual, vec![8, 3, 4, 4]);
        }
        other => panic!("expected WeightShape, got {other:?}"),
    }
}

#[test]
fn tampered_reference_is_detected() {
    let mut c = fixture("parity_pool_f64.lgtc");
    let tensors: Vec<_> = c.tensors().to_vec();
    let mut rebuilt = TensorContainer::new(c.metadata.clone());
    for (name, t) in tensors {
        let t = if name == "parity.logits" {
            let mut v = t.to_scalar::<f64>();
            v.data_mut()[1] += 1e-3;
            v.into()
        } else {
            t
        };
        rebuilt.push(name, t).unwrap();
    }
    c = rebuilt;
    let report = check_parity::<f64>(&c).unwrap();
    assert!((report.logits_max_abs - 1e-3).abs() < 1e-9, "{report:?}");
    assert!(report.tokens_max_abs < 1e-10);
}
