use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use legrad_core::model::{ClassifierKind, ModelBundle, Pooling, ViTConfig};
use legrad_core::tensor::TensorContainer;
use legrad_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Scalar type the engine runs at. Weights are converted on load.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}, expected f32 or f64")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone)]
pub enum Bundle {
    F32(ModelBundle<f32>),
    F64(ModelBundle<f64>),
}

/// Evaluates `$body` with `$m` bound to the concrete `ModelBundle<T>`.
#[macro_export]
macro_rules! with_bundle {
    ($bundle:expr, $m:ident => $body:expr) => {
        match $bundle {
            $crate::Bundle::F32($m) => $body,
            $crate::Bundle::F64($m) => $body,
        }
    };
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifierSummary {
    pub name: String,
    pub kind: ClassifierKind,
    pub classes: usize,
}

/// One `/v1/models` entry. `status` is `"ok"` or `"invalid"`; an invalid
/// entry carries only `id`, `status` and `error`.
#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub id: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub info: Option<ModelInfo>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub provenance: String,
    pub precision: Precision,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patches: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub pooling: Pooling,
    pub class_token: bool,
    pub classifiers: Vec<ClassifierSummary>,
    pub embeddings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VocabEntry {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Vocab {
    pub model: String,
    pub classifier: String,
    pub kind: ClassifierKind,
    /// Label strings in column order; empty for an unlabeled learned head.
    pub labels: Vec<String>,
    pub classes: Vec<VocabEntry>,
}

impl Bundle {
    pub fn load(path: impl AsRef<Path>, precision: Precision) -> Result<Self> {
        let container = TensorContainer::load(path)?;
        Self::from_container(&container, precision)
    }

    pub fn from_container(container: &TensorContainer, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::F32 => Bundle::F32(ModelBundle::from_container(container)?),
            Precision::F64 => Bundle::F64(ModelBundle::from_container(container)?),
        })
    }

    pub fn precision(&self) -> Precision {
        match self {
            Bundle::F32(_) => Precision::F32,
            Bundle::F64(_) => Precision::F64,
        }
    }

    pub fn config(&self) -> &ViTConfig {
        with_bundle!(self, m => &m.config)
    }

    pub fn provenance(&self) -> &str {
        with_bundle!(self, m => &m.provenance)
    }

    pub fn info(&self) -> ModelInfo {
        let c = self.config();
        let (classifiers, embeddings) = with_bundle!(self, m => (
            m.classifiers
                .iter()
                .map(|k| ClassifierSummary { name: k.name.clone(), kind: k.kind, classes: k.num_classes() })
                .collect(),
            m.embeddings.iter().map(|(n, _)| n.clone()).collect(),
        ));
        ModelInfo {
            provenance: self.provenance().to_string(),
            precision: self.precision(),
            layers: c.layers,
            heads: c.heads,
            width: c.width,
            patches: c.num_patches(),
            patch_size: c.patch_size,
            image_size: c.image_size,
            pooling: c.pooling,
            class_token: c.class_token,
            classifiers,
            embeddings,
        }
    }

    pub fn vocab(&self, id: &str, classifier: Option<&str>) -> Result<Vocab> {
        with_bundle!(self, m => {
            let k = m.classifier(classifier)?;
            Ok(Vocab {
                model: id.to_string(),
                classifier: k.name.clone(),
                kind: k.kind,
                labels: k.labels.clone(),
                classes: (0..k.num_classes())
                    .map(|index| VocabEntry { index, label: k.labels.get(index).cloned() })
                    .collect(),
            })
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub id: String,
    pub path: Option<PathBuf>,
    pub bundle: std::result::Result<Arc<Bundle>, String>,
}

impl ModelEntry {
    pub fn summary(&self) -> ModelSummary {
        match &self.bundle {
            Ok(b) => ModelSummary {
                id: self.id.clone(),
                status: "ok",
                error: None,
                info: Some(b.info()),
            },
            Err(e) => ModelSummary {
                id: self.id.clone(),
                status: "invalid",
                error: Some(e.clone()),
                info: None,
            },
        }
    }
}

/// Bundles loaded once and shared read-only by every request.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entries: Vec<ModelEntry>,
}

impl Registry {
    /// Loads every `*.lgtc` file directly inside `dir`, ordered by id (the
    /// file stem). A file that fails to load becomes an invalid entry.
    pub fn load_dir(dir: impl AsRef<Path>, precision: Precision) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for entry in
            std::fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?
        {
            let path = entry?.path();
            if path.is_file() && path.extension().is_some_and(|e| e == "lgtc") {
                paths.push(path);
            }
        }
        paths.sort();
        let entries = paths
            .into_iter()
            .map(|path| {
                let id = path
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                let bundle = Bundle::load(&path, precision)
                    .map(Arc::new)
                    .map_err(|e| e.to_string());
                if let Err(e) = &bundle {
                    tracing::warn!(model = %id, error = %e, "model failed to load");
                }
                ModelEntry {
                    id,
                    path: Some(path),
                    bundle,
                }
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn insert(&mut self, id: impl Into<String>, bundle: Bundle) {
        let id = id.into();
        self.entries.retain(|e| e.id != id);
        self.entries.push(ModelEntry {
            id,
            path: None,
            bundle: Ok(Arc::new(bundle)),
        });
        self.entries.sort_by(|a, b| a.id.cmp(&b.id));
    }

    pub fn get(&self, id: &str) -> Option<&ModelEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn entries(&self) -> &[ModelEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
