use alloc::string::String;

/// Errors raised by the numeric core.
///
/// Every variant maps onto a stable name (see [`Error::name`]) that the
/// command-line front end prints verbatim.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot canonize graph: {0}")]
    Canonize(String),
    #[error("training diverged: {0}")]
    Train(String),
    #[error("activation trace incomplete: {0}")]
    Trace(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("unusable data: {0}")]
    Data(String),
    #[error("degenerate concept vector: {0}")]
    Vector(String),
    #[error("unknown name: {0}")]
    Name(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
}

impl Error {
    /// Stable error name, e.g. `"ShapeError"`.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::Canonize(_) => "CanonizeError",
            Error::Train(_) => "TrainError",
            Error::Trace(_) => "TraceError",
            Error::Index(_) => "IndexError",
            Error::Data(_) => "DataError",
            Error::Vector(_) => "VectorError",
            Error::Name(_) => "NameError",
            Error::UndefinedMetric(_) => "UndefinedMetric",
            Error::Generation(_) => "GenerationError",
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
