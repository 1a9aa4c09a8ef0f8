use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, ModelBundle};
use crate::tensor::{Scalar, Tensor};

/// Erasure steps `k / 10` for `k = 0..10`.
pub const STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// Most relevant pixels first.
    Positive,
    /// Least relevant pixels first.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSource {
    Predicted,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub mode: PerturbMode,
    pub class_source: ClassSource,
    pub reference_class: usize,
    pub fractions: Vec<f64>,
    pub accuracies: Vec<f64>,
    /// Argmax class after each erasure step.
    pub predictions: Vec<usize>,
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |best, (i, &s)| {
            if s > best.1 {
                (i, s)
            } else {
                best
            }
        })
        .0
}

/// Pixel indices in erasure order. The sort is stable, so ties keep
/// row-major order in both modes.
pub fn erasure_order(heat: &[f64], mode: PerturbMode) -> Vec<usize> {
    let mut order: Vec<usize> = (0..heat.len()).collect();
    match mode {
        PerturbMode::Positive => order.sort_by(|&a, &b| heat[b].total_cmp(&heat[a])),
        PerturbMode::Negative => order.sort_by(|&a, &b| heat[a].total_cmp(&heat[b])),
    }
    order
}

/// Erases the `floor(k W H / 10)` highest-ranked pixels (all channels set to
/// zero in normalized space) for each step `k` and records whether the
/// model's argmax still equals `reference_class`.
pub fn perturb_curve<T: Scalar>(
    bundle: &ModelBundle<T>,
    classifier: &Classifier<T>,
    image: &Tensor<T>,
    heat: &[f64],
    mode: PerturbMode,
    class_source: ClassSource,
    reference_class: usize,
) -> Result<PerturbationCurve> {
    let size = bundle.config.image_size;
    let pixels = size * size;
    if heat.len() != pixels || image.shape() != [3, size, size] {
        return Err(Error::Eval(format!(
            "heatmap of {} values and image {:?} do not match a {size}x{size} model input",
            heat.len(),
            image.shape()
        )));
    }
    let order = erasure_order(heat, mode);
    let mut fractions = Vec::with_capacity(STEPS);
    let mut accuracies = Vec::with_capacity(STEPS);
    let mut predictions = Vec::with_capacity(STEPS);
    let mut erased = image.clone();
    let mut done = 0;
    for k in 0..STEPS {
        let count = k * pixels / STEPS;
        for &p in &order[done..count] {
            for c in 0..3 {
                erased.data_mut()[c * pixels + p] = T::zero();
            }
        }
        done = count;
        let scores = bundle.classify(&bundle.image_embedding(&erased)?, classifier)?;
        let predicted = argmax(&scores);
        fractions.push(k as f64 / STEPS as f64);
        accuracies.push(if predicted == reference_class {
            1.0
        } else {
            0.0
        });
        predictions.push(predicted);
    }
    Ok(PerturbationCurve {
        mode,
        class_source,
        reference_class,
        fractions,
        accuracies,
        predictions,
    })
}

/// Rectangle rule: the mean of the per-step accuracies.
pub fn auc(accuracies: &[f64]) -> f64 {
    if accuracies.is_empty() {
        return 0.0;
    }
    accuracies.iter().sum::<f64>() / accuracies.len() as f64
}

/// Trapezoid rule over the fractions, divided by their span.
pub fn auc_trapezoid(fractions: &[f64], accuracies: &[f64]) -> f64 {
    if fractions.len() < 2 {
        return auc(accuracies);
    }
    let area: f64 = fractions
        .windows(2)
        .zip(accuracies.windows(2))
        .map(|(f, a)| (f[1] - f[0]) * (a[0] + a[1]) / 2.0)
        .sum();
    area / (fractions[fractions.len() - 1] - fractions[0])
}
