use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single rejected input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    /// 1-based line number in the source file (the header is line 1).
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{} rejected row(s): {}", .0.len(), summarize_rows(.0))]
    Rows(Vec<RowError>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no national total for {year}-{month:02} ({kind})")]
    MissingTotal { year: i32, month: u32, kind: String },

    #[error("degenerate month {year}-{month:02}: zonal sum is 0 but national total is {total}")]
    DegenerateMonth { year: i32, month: u32, total: f64 },

    #[error("missing model file {}; run `train` first", .0.display())]
    MissingModel(std::path::PathBuf),

    #[error("coverage gap: {0}")]
    Coverage(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("model serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

fn summarize_rows(rows: &[RowError]) -> String {
    const SHOWN: usize = 5;
    let mut parts: Vec<String> = rows.iter().take(SHOWN).map(ToString::to_string).collect();
    if rows.len() > SHOWN {
        parts.push(format!("... and {} more", rows.len() - SHOWN));
    }
    parts.join("; ")
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
