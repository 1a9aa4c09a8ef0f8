//! Analytic attention gradients against central differences over a grid of
//! tiny f64 models.

use rayon::prelude::*;
use serde::Serialize;

use super::{make_tiny_vit, random_image, TinySpec, TINY_LABELS};
use crate::error::Result;
use crate::explain::{fd_grad_attention, grad_attention, Query};
use crate::model::{ForwardTrace, ModelBundle, Pooling, ScoreHead};
use crate::tensor::Tensor;

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
pub const FD_EPS: f64 = 1e-4;

/// One model of the battery and the class it is probed with.
#[derive(Debug, Clone, PartialEq)]
pub struct BatteryConfig {
    pub spec: TinySpec,
    pub class_index: usize,
}

/// Twenty models covering both poolings, `L <= 3`, `h <= 2`, `d <= 16`,
/// `n <= 16`.
pub fn default_battery() -> Vec<BatteryConfig> {
    let widths = [4, 8, 12, 16];
    let patches = [1, 4, 9, 16];
    (0..20u64)
        .map(|i| {
            let layers = 1 + (i as usize % 3);
            let heads = 1 + (i as usize / 3 % 2);
            let width = widths[i as usize % 4];
            let n = patches[(i as usize / 2) % 4];
            let pooling = if i % 2 == 0 {
                Pooling::ClsToken
            } else {
                Pooling::AttnPooler
            };
            BatteryConfig {
                spec: TinySpec::new(100 + i, layers, heads, width, n, pooling),
                class_index: i as usize % TINY_LABELS.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryRow {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patches: usize,
    pub pooling: &'static str,
    pub layer: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryReport {
    pub rows: Vec<BatteryRow>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `max_i |a_i - f_i| / max(|f_i|, floor)` and `max_i |a_i - f_i|`.
pub fn relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> (f64, f64) {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold((0.0f64, 0.0f64), |(rel, abs), (&a, &f)| {
            let diff = (a - f).abs();
            (rel.max(diff / f.abs().max(REL_ERROR_FLOOR)), abs.max(diff))
        })
}

pub type AnalyticGrad = dyn Fn(&ModelBundle<f64>, &ForwardTrace<f64>, usize, &ScoreHead<f64>) -> Result<Tensor<f64>>
    + Sync;

/// Battery against [`grad_attention`]; fails when any error reaches `tolerance`.
pub fn run_fd_battery(configs: &[BatteryConfig], tolerance: f64) -> Result<BatteryReport> {
    run_fd_battery_with(configs, tolerance, &|b, t, l, h| grad_attention(b, t, l, h))
}

/// Battery against an arbitrary analytic gradient, every layer of every model.
/// Models run in parallel; row order follows `configs`.
pub fn run_fd_battery_with(
    configs: &[BatteryConfig],
    tolerance: f64,
    analytic: &AnalyticGrad,
) -> Result<BatteryReport> {
    let per_model = configs
        .par_iter()
        .map(|cfg| {
            let bundle = make_tiny_vit::<f64>(&cfg.spec)?;
            let head = bundle.score_head(&Query::class_index(cfg.class_index))?;
            let image = random_image::<f64>(cfg.spec.seed, bundle.config.image_size)?;
            let z0 = bundle.embed(&image)?;
            let trace = bundle.forward_trace(&z0)?;
            (1..=bundle.config.layers)
                .map(|l| {
                    let a = analytic(&bundle, &trace, l, &head)?;
                    let f = fd_grad_attention(&bundle, &z0, l, &head, FD_EPS)?;
                    let (max_rel_error, max_abs_error) = relative_error(&a, &f);
                    Ok(BatteryRow {
                        seed: cfg.spec.seed,
                        layers: cfg.spec.layers,
                        heads: cfg.spec.heads,
                        width: cfg.spec.width,
                        patches: cfg.spec.patches,
                        pooling: cfg.spec.pooling.name(),
                        layer: l,
                        entries: a.len(),
                        max_rel_error,
                        max_abs_error,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<BatteryRow> = per_model.into_iter().flatten().collect();
    let max_rel_error = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(BatteryReport {
        passed: !rows.is_empty() && rows.iter().all(|r| r.max_rel_error < tolerance),
        rows,
        max_rel_error,
        tolerance,
    })
}

/// Largest change of the finite-difference estimate when the step is halved.
pub fn fd_step_sensitivity(cfg: &BatteryConfig) -> Result<f64> {
    let bundle = make_tiny_vit::<f64>(&cfg.spec)?;
    let head = bundle.score_head(&Query::class_index(cfg.class_index))?;
    let z0 = bundle.embed(&random_image::<f64>(
        cfg.spec.seed,
        bundle.config.image_size,
    )?)?;
    let mut worst = 0.0f64;
    for l in 1..=bundle.config.layers {
        let full = fd_grad_attention(&bundle, &z0, l, &head, FD_EPS)?;
        let half = fd_grad_attention(&bundle, &z0, l, &head, FD_EPS / 2.0)?;
        worst = worst.max(relative_error(&half, &full).1);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_battery_shape() {
        let configs = default_battery();
        assert_eq!(configs.len(), 20);
        assert!(configs.iter().any(|c| c.spec.pooling == Pooling::ClsToken));
        assert!(configs
            .iter()
            .any(|c| c.spec.pooling == Pooling::AttnPooler));
        for c in &configs {
            let s = &c.spec;
            assert!(s.layers <= 3 && s.heads <= 2 && s.width <= 16 && s.patches <= 16);
            assert_eq!(s.width % s.heads, 0);
        }
    }

    #[test]
    fn default_battery_passes() {
        let report = run_fd_battery(&default_battery(), 1e-4).unwrap();
        for r in &report.rows {
            eprintln!("{r:?}");
        }
        assert!(report.passed, "max relative error {}", report.max_rel_error);
    }

    #[test]
    fn sign_flipped_backward_fails() {
        let flipped: &AnalyticGrad = &|b, t, l, h| Ok(grad_attention(b, t, l, h)?.scale(-1.0));
        let report = run_fd_battery_with(&default_battery()[..4], 1e-4, flipped).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn halving_the_step_is_stable() {
        for cfg in default_battery().iter().take(6) {
            assert!(fd_step_sensitivity(cfg).unwrap() < 1e-6);
        }
    }
}
