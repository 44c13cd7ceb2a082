use std::path::PathBuf;

use crate::ir::LayerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("shape error{}: {msg}", fmt_layer(.layer))]
    Shape { layer: Option<LayerId>, msg: String },

    #[error("layer {layer}: missing weight tensor `{name}`")]
    MissingWeight { layer: LayerId, name: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("layer {0} is not a vertex of the connectivity graph")]
    UnknownVertex(LayerId),

    #[error("layer {0}: criterion needs a BatchNorm2D directly after the convolution")]
    MissingBatchNorm(LayerId),

    #[error("layer {layer}: rate {rate} would remove every filter")]
    RateTooHigh { layer: LayerId, rate: f64 },

    #[error("invalid pruning rate {0}: expected a value in [0, 1)")]
    InvalidRate(f64),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("plan does not match the connectivity graph: {0}")]
    PlanGraphMismatch(String),

    #[error("batch norm layer {0} does not directly follow a convolution it can be folded into")]
    OrphanBatchNorm(LayerId),

    #[error("models do not match: {0}")]
    MismatchedModels(String),

    #[error("corrupt trace: {0}")]
    CorruptTrace(String),

    #[error("unknown criterion `{0}` (valid: smallest_l2, smallest_l1, random, smallest_l1_bn, bn_scale, largest_l2)")]
    UnknownCriterion(String),

    /// A post-condition failed inside the library. Always a bug.
    #[error("internal error: {0}")]
    Internal(String),
}

fn fmt_layer(layer: &Option<LayerId>) -> String {
    match layer {
        Some(id) => format!(" at layer {id}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(layer: impl Into<Option<LayerId>>, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input rather than a library defect.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Internal(_))
    }
}
