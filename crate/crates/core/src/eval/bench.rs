//! Manifest-driven benchmark runs and their reports.
//!
//! A manifest is JSON lines, one sample per line, with paths relative to
//! the manifest's directory:
//!
//! ```text
//! {"image": "img/0.png", "mask": "mask/0.png", "label": "cat"}
//! {"image": "img/1.png", "points": {"dog": {"pos": [[3, 4]], "neg": [[0, 0]]}}}
//! {"image": "img/2.png", "class_index": 3}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, binarize, point_iou, seg_metrics};
use super::perturb::{
    argmax, auc, auc_trapezoid, perturb_curve, ClassSource, PerturbMode, PerturbationCurve, STEPS,
};
use crate::error::{Error, Result};
use crate::explain::{explain, ExplainParams, Query, Target};
use crate::imaging::Raster;
use crate::model::{preprocess, ModelBundle, Preprocessed};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    #[serde(default)]
    pub pos: Vec<[f64; 2]>,
    #[serde(default)]
    pub neg: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<BTreeMap<String, PointSet>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_index: Option<usize>,
}

/// Parsed manifest. Lines that fail to parse stay in place as errors so they
/// are reported as skipped samples.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<std::result::Result<ManifestEntry, String>>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let entries: Vec<_> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| format!("manifest line {}: {e}", n + 1))
            })
            .collect();
        if entries.is_empty() {
            return Err(Error::Eval("no samples".into()));
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Protocol {
    Segmentation {
        threshold: f64,
    },
    Points {
        threshold: f64,
    },
    Perturbation {
        mode: PerturbMode,
        class_source: ClassSource,
        trapezoid: bool,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchParams {
    pub protocol: Protocol,
    pub explain: ExplainParams,
    pub classifier: Option<String>,
    pub limit: Option<usize>,
    /// Thread count; results do not depend on it, so it is not serialized.
    #[serde(skip, default = "one")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPointIou {
    pub class: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMetrics {
    Segmentation {
        pixel_acc: f64,
        miou: f64,
        /// `None` when the mask has no foreground.
        ap: Option<f64>,
    },
    Points {
        p_iou: f64,
        classes: Vec<ClassPointIou>,
    },
    Perturbation {
        curve: PerturbationCurve,
        auc: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SampleOutcome {
    Ok {
        index: usize,
        image: String,
        metrics: SampleMetrics,
    },
    Skipped {
        index: usize,
        image: String,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_curve: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub params: BenchParams,
    pub aggregate: Aggregate,
    pub samples: Vec<SampleOutcome>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let luma = img.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Ok((w, h, luma.pixels().map(|p| (p.0[0] > 0) as u8).collect()))
}

struct Runner<'a, T> {
    bundle: &'a ModelBundle<T>,
    params: &'a BenchParams,
    root: &'a Path,
}

impl<T: Scalar> Runner<'_, T> {
    fn query(&self, target: Target) -> Query {
        Query {
            classifier: self.params.classifier.clone(),
            target,
        }
    }

    fn load(&self, entry: &ManifestEntry) -> Result<(Raster, Preprocessed<T>)> {
        let raster = Raster::open(self.root.join(&entry.image))?;
        let pre = preprocess(
            &raster,
            &self.bundle.preprocess,
            self.bundle.config.image_size,
        )?;
        Ok((raster, pre))
    }

    fn predicted(&self, pre: &Preprocessed<T>) -> Result<usize> {
        let classifier = self.bundle.classifier(self.params.classifier.as_deref())?;
        let embedding = self.bundle.image_embedding(&pre.tensor)?;
        Ok(argmax(&self.bundle.classify(&embedding, classifier)?))
    }

    /// Explicit label or class index of the entry, if any.
    fn target(entry: &ManifestEntry) -> Option<Target> {
        entry
            .label
            .clone()
            .map(Target::Label)
            .or(entry.class_index.map(Target::ClassIndex))
    }

    fn run(&self, entry: &ManifestEntry) -> Result<SampleMetrics> {
        match self.params.protocol {
            Protocol::Segmentation { threshold } => self.segmentation(entry, threshold),
            Protocol::Points { threshold } => self.points(entry, threshold),
            Protocol::Perturbation {
                mode,
                class_source,
                trapezoid,
            } => self.perturbation(entry, mode, class_source, trapezoid),
        }
    }

    fn segmentation(&self, entry: &ManifestEntry, threshold: f64) -> Result<SampleMetrics> {
        let mask_path = entry
            .mask
            .as_ref()
            .ok_or_else(|| Error::Eval("sample has no mask".into()))?;
        let (raster, pre) = self.load(entry)?;
        let (w, h, mask) = load_mask(&self.root.join(mask_path))?;
        if (w, h) != (raster.width, raster.height) {
            return Err(Error::Eval(format!(
                "mask is {w}x{h}, image is {}x{}",
                raster.width, raster.height
            )));
        }
        let gt: Vec<bool> = pre
            .geometry
            .resize_mask_nearest(&mask)
            .iter()
            .map(|&m| m > 0)
            .collect();
        let target = match Self::target(entry) {
            Some(t) => t,
            None => Target::ClassIndex(self.predicted(&pre)?),
        };
        let heat = explain(
            self.bundle,
            &pre.tensor,
            &self.query(target),
            &self.params.explain,
        )?
        .heatmap;
        let m = seg_metrics(&binarize(&heat.values, threshold), &gt)?;
        Ok(SampleMetrics::Segmentation {
            pixel_acc: m.pixel_acc,
            miou: m.miou,
            ap: average_precision(&heat.values, &gt)?,
        })
    }

    fn points(&self, entry: &ManifestEntry, threshold: f64) -> Result<SampleMetrics> {
        let sets = entry
            .points
            .as_ref()
            .ok_or_else(|| Error::Eval("sample has no points".into()))?;
        let (_, pre) = self.load(entry)?;
        let map = |pts: &[[f64; 2]]| -> Vec<(usize, usize)> {
            pts.iter()
                .filter_map(|p| pre.geometry.map_point(p[0], p[1]))
                .collect()
        };
        let size = self.bundle.config.image_size;
        let mut classes = Vec::with_capacity(sets.len());
        for (class, set) in sets {
            let positives = map(&set.pos);
            if positives.is_empty() {
                classes.push(ClassPointIou {
                    class: class.clone(),
                    iou: None,
                    skipped: Some("no positive points inside the crop".into()),
                });
                continue;
            }
            let query = self.query(Target::Label(class.clone()));
            let heat = explain(self.bundle, &pre.tensor, &query, &self.params.explain)?.heatmap;
            let iou = point_iou(
                &binarize(&heat.values, threshold),
                size,
                &positives,
                &map(&set.neg),
            )?;
            classes.push(ClassPointIou {
                class: class.clone(),
                iou: Some(iou),
                skipped: None,
            });
        }
        let p_iou = mean(classes.iter().filter_map(|c| c.iou))
            .ok_or_else(|| Error::Eval("no class has positive points inside the crop".into()))?;
        Ok(SampleMetrics::Points { p_iou, classes })
    }

    fn perturbation(
        &self,
        entry: &ManifestEntry,
        mode: PerturbMode,
        class_source: ClassSource,
        trapezoid: bool,
    ) -> Result<SampleMetrics> {
        let (_, pre) = self.load(entry)?;
        let classifier = self.bundle.classifier(self.params.classifier.as_deref())?;
        let reference = match class_source {
            ClassSource::Predicted => self.predicted(&pre)?,
            ClassSource::Target => {
                let target = Self::target(entry).ok_or_else(|| {
                    Error::Eval("target class source needs a label or class_index".into())
                })?;
                match target {
                    Target::Label(l) => classifier.label_index(&l).ok_or(Error::UnknownLabel(l))?,
                    Target::ClassIndex(i) if i < classifier.num_classes() => i,
                    Target::ClassIndex(i) => {
                        return Err(Error::ClassIndex {
                            index: i,
                            classes: classifier.num_classes(),
                        })
                    }
                    Target::EmbeddingName(n) => return Err(Error::UnknownEmbedding(n)),
                }
            }
        };
        let query = self.query(Target::ClassIndex(reference));
        let heat = explain(self.bundle, &pre.tensor, &query, &self.params.explain)?.heatmap;
        let curve = perturb_curve(
            self.bundle,
            classifier,
            &pre.tensor,
            &heat.values,
            mode,
            class_source,
            reference,
        )?;
        let area = if trapezoid {
            auc_trapezoid(&curve.fractions, &curve.accuracies)
        } else {
            auc(&curve.accuracies)
        };
        Ok(SampleMetrics::Perturbation { curve, auc: area })
    }
}

fn aggregate(samples: &[SampleOutcome], trapezoid: bool) -> Aggregate {
    let metrics: Vec<&SampleMetrics> = samples
        .iter()
        .filter_map(|s| match s {
            SampleOutcome::Ok { metrics, .. } => Some(metrics),
            SampleOutcome::Skipped { .. } => None,
        })
        .collect();
    let mut agg = Aggregate {
        images: metrics.len(),
        skipped: samples.len() - metrics.len(),
        ..Aggregate::default()
    };
    if metrics.is_empty() {
        return agg;
    }
    match metrics[0] {
        SampleMetrics::Segmentation { .. } => {
            let seg = || {
                metrics.iter().filter_map(|m| match m {
                    SampleMetrics::Segmentation {
                        pixel_acc,
                        miou,
                        ap,
                    } => Some((*pixel_acc, *miou, *ap)),
                    _ => None,
                })
            };
            agg.pixel_acc = mean(seg().map(|s| s.0));
            agg.miou = mean(seg().map(|s| s.1));
            agg.map = mean(seg().filter_map(|s| s.2));
        }
        SampleMetrics::Points { .. } => {
            agg.p_miou = mean(metrics.iter().filter_map(|m| match m {
                SampleMetrics::Points { p_iou, .. } => Some(*p_iou),
                _ => None,
            }));
        }
        SampleMetrics::Perturbation { .. } => {
            let curves: Vec<&PerturbationCurve> = metrics
                .iter()
                .filter_map(|m| match m {
                    SampleMetrics::Perturbation { curve, .. } => Some(curve),
                    _ => None,
                })
                .collect();
            let mean_curve: Vec<f64> = (0..STEPS)
                .map(|k| mean(curves.iter().map(|c| c.accuracies[k])).unwrap_or(0.0))
                .collect();
            agg.auc = Some(if trapezoid {
                auc_trapezoid(&curves[0].fractions, &mean_curve)
            } else {
                auc(&mean_curve)
            });
            agg.mean_curve = Some(mean_curve);
        }
    }
    agg
}

/// Evaluates every manifest sample (up to `limit`) on a pool of `workers`
/// threads. Samples that cannot be evaluated are kept as skipped with their
/// reason; the report is independent of the worker count.
pub fn run_benchmark<T: Scalar>(
    bundle: &ModelBundle<T>,
    manifest: &Manifest,
    params: &BenchParams,
) -> Result<EvalReport> {
    let take = params
        .limit
        .unwrap_or(usize::MAX)
        .min(manifest.entries.len());
    let entries = &manifest.entries[..take];
    if entries.is_empty() {
        return Err(Error::Eval("no samples".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.workers.max(1))
        .build()
        .map_err(|e| Error::Eval(e.to_string()))?;
    let runner = Runner {
        bundle,
        params,
        root: &manifest.root,
    };
    let samples: Vec<SampleOutcome> = pool.install(|| {
        entries
            .par_iter()
            .enumerate()
            .map(|(index, entry)| match entry {
                Err(reason) => SampleOutcome::Skipped {
                    index,
                    image: String::new(),
                    reason: reason.clone(),
                },
                Ok(e) => match runner.run(e) {
                    Ok(metrics) => SampleOutcome::Ok {
                        index,
                        image: e.image.clone(),
                        metrics,
                    },
                    Err(err) => SampleOutcome::Skipped {
                        index,
                        image: e.image.clone(),
                        reason: err.to_string(),
                    },
                },
            })
            .collect()
    });
    let trapezoid = matches!(
        params.protocol,
        Protocol::Perturbation {
            trapezoid: true,
            ..
        }
    );
    Ok(EvalReport {
        model: bundle.provenance.clone(),
        params: params.clone(),
        aggregate: aggregate(&samples, trapezoid),
        samples,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One summary row, columns depending on the protocol.
    pub fn to_csv(&self) -> String {
        let a = &self.aggregate;
        let method = self.params.explain.method;
        let mut out = String::new();
        match self.params.protocol {
            Protocol::Segmentation { .. } => {
                out.push_str("method,images,skipped,pixel_acc,miou,map\n");
                let _ = writeln!(
                    out,
                    "{method},{},{},{},{},{}",
                    a.images,
                    a.skipped,
                    fmt_opt(a.pixel_acc),
                    fmt_opt(a.miou),
                    fmt_opt(a.map)
                );
            }
            Protocol::Points { .. } => {
                out.push_str("method,images,skipped,p_miou\n");
                let _ = writeln!(
                    out,
                    "{method},{},{},{}",
                    a.images,
                    a.skipped,
                    fmt_opt(a.p_miou)
                );
            }
            Protocol::Perturbation {
                mode, class_source, ..
            } => {
                out.push_str("method,mode,class_source,images,skipped,auc");
                for k in 0..STEPS {
                    let _ = write!(out, ",acc_{}", k * 100 / STEPS);
                }
                out.push('\n');
                let mode = serde_json::to_value(mode)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from));
                let source = serde_json::to_value(class_source)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from));
                let _ = write!(
                    out,
                    "{method},{},{},{},{},{}",
                    mode.unwrap_or_default(),
                    source.unwrap_or_default(),
                    a.images,
                    a.skipped,
                    fmt_opt(a.auc)
                );
                for v in a.mean_curve.iter().flatten() {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        Ok(())
    }
}
