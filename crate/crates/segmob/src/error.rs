use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: malformed row: {msg}")]
    MalformedRow {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("ses map: {0}")]
    SesMap(String),

    #[error("region {region_id} is missing property {property}")]
    MissingProperty {
        region_id: String,
        property: String,
    },

    #[error("duplicate stringency date {0}")]
    DuplicateDate(NaiveDate),

    #[error("spatial: {0}")]
    Spatial(String),

    #[error("decile assignment: {0}")]
    Decile(String),

    #[error("home region {0} absent from SES decile mapping")]
    UnknownHomeRegion(String),

    #[error("segmentation: {0}")]
    Segmentation(String),

    #[error("visit network is empty")]
    EmptyNetwork,

    #[error("degenerate matrix: {0}")]
    DegenerateMatrix(String),

    #[error("matrix dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("regression: {0}")]
    Regression(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("unknown visit filter `{0}`")]
    UnknownFilter(String),

    #[error("synthetic generator: {0}")]
    Synth(String),

    #[error("stage {stage}: missing prerequisite output from stage {prerequisite}")]
    MissingPrerequisite {
        stage: String,
        prerequisite: String,
    },

    #[error("pipeline stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
