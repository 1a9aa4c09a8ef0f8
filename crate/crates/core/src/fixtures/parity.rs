//! Cross-implementation parity check.
//!
//! A parity container is an ordinary weight container carrying three extra
//! tensors produced by an independent reference forward: `parity.input`
//! (the preprocessed image), `parity.z_final` (`Z^L`) and `parity.logits`
//! (scores of the classifier named in `metadata.parity.classifier`).

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::{Scalar, Tensor, TensorContainer};

pub const PARITY_INPUT: &str = "parity.input";
pub const PARITY_TOKENS: &str = "parity.z_final";
pub const PARITY_LOGITS: &str = "parity.logits";

#[derive(Debug, Clone, Serialize)]
pub struct ParityReport {
    pub provenance: String,
    pub tokens_max_abs: f64,
    pub logits_max_abs: f64,
}

impl ParityReport {
    pub fn max_abs(&self) -> f64 {
        self.tokens_max_abs.max(self.logits_max_abs)
    }
}

fn reference<T: Scalar>(container: &TensorContainer, name: &str) -> Result<Tensor<T>> {
    container
        .get(name)
        .map(|t| t.to_scalar())
        .ok_or_else(|| Error::MissingTensor(name.into()))
}

fn max_abs<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Runs the engine at precision `T` on the stored input and compares against
/// the stored references.
pub fn check_parity<T: Scalar>(container: &TensorContainer) -> Result<ParityReport> {
    let bundle = ModelBundle::<T>::from_container(container)?;
    let input: Tensor<T> = reference(container, PARITY_INPUT)?;
    let tokens: Tensor<T> = reference(container, PARITY_TOKENS)?;
    let logits: Tensor<T> = reference(container, PARITY_LOGITS)?;
    let classifier = container
        .metadata
        .get("parity")
        .and_then(|p| p.get("classifier"))
        .and_then(Value::as_str);
    let classifier = bundle.classifier(classifier)?;

    let z0 = bundle.embed(&input)?;
    let trace = bundle.forward_trace(&z0)?;
    let z_final = trace.final_tokens();
    if z_final.shape() != tokens.shape() {
        return Err(Error::WeightShape {
            name: PARITY_TOKENS.into(),
            expected: z_final.shape().to_vec(),
            actual: tokens.shape().to_vec(),
        });
    }
    let embedding = &trace.heads.last().expect("trace holds Z^L").embedding;
    let scores = bundle.classify(embedding, classifier)?;
    if scores.len() != logits.len() {
        return Err(Error::WeightShape {
            name: PARITY_LOGITS.into(),
            expected: vec![scores.len()],
            actual: logits.shape().to_vec(),
        });
    }
    Ok(ParityReport {
        provenance: bundle.provenance.clone(),
        tokens_max_abs: max_abs(z_final.data(), tokens.data()),
        logits_max_abs: max_abs(&scores, logits.data()),
    })
}
