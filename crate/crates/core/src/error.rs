//! Error type shared by every stage of the engine.

use std::fmt;
use std::path::PathBuf;

use crate::catalog::CoarseClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage a provider failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        })
    }
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Provider,
    Data,
}

/// Failures of the binary embedding-store and feature-cache formats.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(&'static str),
    #[error("invalid payload: {0}")]
    Invalid(String),
}

/// Failures of HTTP-backed providers.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RemoteError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("http status {status}")]
    Http { status: u16 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("no endpoint configured (set SHELFMATCH_REMOTE_URL or the config endpoint)")]
    NoEndpoint,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("duplicate product_id {0:?}")]
    DuplicateProductId(String),
    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),
    #[error("unknown view label {0:?}")]
    UnknownViewLabel(String),
    #[error("product {product:?} has an invalid view list: {reason}")]
    InvalidViews { product: String, reason: String },
    #[error("missing asset file {0}")]
    MissingAsset(PathBuf),
    #[error("catalog is empty")]
    EmptyCatalog,
    #[error("unknown product {0:?}")]
    UnknownProduct(String),
    #[error("unknown image {0:?}")]
    UnknownImage(String),

    #[error("image error for {path}: {message}")]
    Image { path: String, message: String },
    #[error("expected a 3-channel image, got {0} channel(s)")]
    ChannelCount(u8),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no embedding for image {0:?}")]
    MissingEmbedding(String),
    #[error("embedding vector is not normalizable: {0}")]
    InvalidVector(String),
    #[error("embedding store format: {0}")]
    StoreFormat(#[source] FormatError),
    #[error("feature cache format: {0}")]
    CacheFormat(#[source] FormatError),
    #[error("no products in class {0:?}")]
    EmptyClass(CoarseClass),
    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("bounding box {0:?} out of image bounds {1}x{2}")]
    BoxOutOfBounds([u32; 4], u32, u32),
    #[error("invalid detection: {0}")]
    InvalidDetection(String),
    #[error("no mask available for image {0:?}")]
    MissingMask(String),

    #[error("descriptor length mismatch: {0} vs {1}")]
    DescriptorLength(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("remote provider: {0}")]
    Remote(#[source] RemoteError),
    #[error("{stage} provider failure: {source}")]
    Provider {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("no matches to score")]
    NoMatches,
    #[error("no label for query {0:?}")]
    LabelMissing(String),
    #[error("unknown report format {0:?}")]
    UnknownFormat(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Provider { .. } => e,
            other => Error::Provider {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::UnknownFormat(_) => {
                ErrorClass::Config
            }
            Error::Remote(_) => ErrorClass::Provider,
            Error::Provider { source, .. } => match source.class() {
                ErrorClass::Config => ErrorClass::Config,
                _ if matches!(**source, Error::Remote(_)) => ErrorClass::Provider,
                ErrorClass::Provider => ErrorClass::Provider,
                ErrorClass::Data => ErrorClass::Data,
            },
            _ => ErrorClass::Data,
        }
    }

    /// Short machine-parsable tag for the error variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::ManifestParse(_) => "manifest_parse",
            Error::DuplicateProductId(_) => "duplicate_product_id",
            Error::DuplicateImageId(_) => "duplicate_image_id",
            Error::UnknownViewLabel(_) => "unknown_view_label",
            Error::InvalidViews { .. } => "invalid_views",
            Error::MissingAsset(_) => "missing_asset",
            Error::EmptyCatalog => "empty_catalog",
            Error::UnknownProduct(_) => "unknown_product",
            Error::UnknownImage(_) => "unknown_image",
            Error::Image { .. } => "image",
            Error::ChannelCount(_) => "channel_count",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::InvalidVector(_) => "invalid_vector",
            Error::StoreFormat(_) => "store_format",
            Error::CacheFormat(_) => "cache_format",
            Error::EmptyClass(_) => "empty_class",
            Error::EmptyCandidates => "empty_candidates",
            Error::BoxOutOfBounds(..) => "box_out_of_bounds",
            Error::InvalidDetection(_) => "invalid_detection",
            Error::MissingMask(_) => "missing_mask",
            Error::DescriptorLength(..) => "descriptor_length",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::Remote(RemoteError::Timeout { .. }) => "remote_timeout",
            Error::Remote(RemoteError::Http { .. }) => "remote_http",
            Error::Remote(RemoteError::Transport(_)) => "remote_transport",
            Error::Remote(RemoteError::Schema(_)) => "remote_schema",
            Error::Remote(RemoteError::NoEndpoint) => "remote_endpoint",
            Error::Provider { source, .. } => source.code(),
            Error::NoMatches => "no_matches",
            Error::LabelMissing(_) => "label_missing",
            Error::UnknownFormat(_) => "unknown_format",
            Error::Dataset(_) => "dataset",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

impl From<RemoteError> for Error {
    fn from(e: RemoteError) -> Self {
        Error::Remote(e)
    }
}
