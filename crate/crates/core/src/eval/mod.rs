//! Segmentation, point-localization and perturbation benchmarks.

mod bench;
mod metrics;
mod perturb;

pub use bench::{
    run_benchmark, Aggregate, BenchParams, ClassPointIou, EvalReport, Manifest, ManifestEntry,
    PointSet, Protocol, SampleMetrics, SampleOutcome,
};
pub use metrics::{average_precision, binarize, point_iou, seg_metrics, SegMetrics};
pub use perturb::{
    argmax, auc, auc_trapezoid, erasure_order, perturb_curve, ClassSource, PerturbMode,
    PerturbationCurve, STEPS,
};
