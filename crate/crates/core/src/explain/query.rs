use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassifierKind, ModelBundle, ScoreHead};
use crate::tensor::Scalar;

/// What the explained activation is taken against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Label(String),
    ClassIndex(usize),
    /// A free-standing embedding stored in the bundle, e.g. `"empty"`.
    EmbeddingName(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    /// Classifier name; `None` picks the bundle's first classifier.
    pub classifier: Option<String>,
    pub target: Target,
}

impl Query {
    pub fn label(label: impl Into<String>) -> Self {
        Self {
            classifier: None,
            target: Target::Label(label.into()),
        }
    }

    pub fn class_index(index: usize) -> Self {
        Self {
            classifier: None,
            target: Target::ClassIndex(index),
        }
    }

    pub fn embedding(name: impl Into<String>) -> Self {
        Self {
            classifier: None,
            target: Target::EmbeddingName(name.into()),
        }
    }
}

impl<T: Scalar> ModelBundle<T> {
    /// Resolves a query into the linear readout `s = normalize?(z_bar) . c`.
    /// Stored embeddings are treated like text columns (normalized readout).
    pub fn score_head(&self, query: &Query) -> Result<ScoreHead<T>> {
        match &query.target {
            Target::EmbeddingName(name) => {
                let e = self
                    .embedding(name)
                    .ok_or_else(|| Error::UnknownEmbedding(name.clone()))?;
                if e.len() != self.embed_dim() {
                    return Err(Error::Classifier {
                        name: name.clone(),
                        reason: format!("embedding width {} != {}", e.len(), self.embed_dim()),
                    });
                }
                Ok(ScoreHead {
                    column: e.data().to_vec(),
                    normalize: true,
                })
            }
            Target::Label(label) => {
                let classifier = self.classifier(query.classifier.as_deref())?;
                let index = classifier
                    .label_index(label)
                    .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
                Ok(ScoreHead {
                    column: classifier.column(index),
                    normalize: classifier.kind == ClassifierKind::TextEmbeddings,
                })
            }
            Target::ClassIndex(index) => {
                let classifier = self.classifier(query.classifier.as_deref())?;
                if *index >= classifier.num_classes() {
                    return Err(Error::ClassIndex {
                        index: *index,
                        classes: classifier.num_classes(),
                    });
                }
                Ok(ScoreHead {
                    column: classifier.column(*index),
                    normalize: classifier.kind == ClassifierKind::TextEmbeddings,
                })
            }
        }
    }

    /// All labels of the selected classifier, for suggestions on a miss.
    pub fn labels(&self, classifier: Option<&str>) -> Result<Vec<String>> {
        Ok(self.classifier(classifier)?.labels.clone())
    }
}
