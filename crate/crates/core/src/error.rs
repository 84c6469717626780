use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("loss function is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("AU {au} never occurs in the label set")]
    DegenerateLabel { au: u32 },

    #[error("AU {au} has a zero occurrence rate")]
    DegenerateRate { au: u32 },

    #[error("AU {au} is missing from the relation matrix AU order")]
    Mapping { au: u32 },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("a 3-fold subject split needs at least 3 subjects, found {0}")]
    TooFewSubjects(usize),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged in stage {stage} at epoch {epoch}: loss = {loss}")]
    Diverged { stage: u8, epoch: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("relation fixture: {0}")]
    Fixture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
