use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("column `{0}` has no observed values")]
    FullyMissingColumn(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("no class has at least {min_per_class} training samples")]
    NoEligibleClass { min_per_class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("task has {found} classes but the hypernetwork supports at most {max}")]
    TooManyClasses { found: usize, max: usize },

    #[error("class {0} has no support samples")]
    EmptyClass(usize),

    #[error("PCA needs at least 2 support rows, got {0}")]
    TooFewRows(usize),

    #[error("nearest-neighbour anchor set is empty")]
    NoAnchors,

    #[error("non-finite loss on task `{task}`")]
    NonFiniteLoss { task: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
