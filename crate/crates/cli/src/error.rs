use std::fmt;
use std::io;

/// Failure class reported on stderr as `error[<category>]` and through the exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Format,
    Dimension,
    Batch,
    Range,
    Clustering,
    NonFinite,
    InvalidArgument,
    Acceptance,
    Usage,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Io => "io",
            Category::Format => "format",
            Category::Dimension => "dimension",
            Category::Batch => "batch",
            Category::Range => "range",
            Category::Clustering => "clustering",
            Category::NonFinite => "non-finite",
            Category::InvalidArgument => "invalid-argument",
            Category::Acceptance => "check-failed",
            Category::Usage => "usage",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Io => 3,
            Category::Format => 4,
            Category::Dimension => 5,
            Category::Batch => 6,
            Category::Range => 7,
            Category::Clustering => 8,
            Category::NonFinite => 9,
            Category::InvalidArgument => 10,
            Category::Acceptance => 11,
            Category::Usage => 64,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self { category, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn format(message: impl Into<String>) -> Self {
        Self::new(Category::Format, message)
    }

    /// Prefixes the message with what was being done.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category.name(), self.message)
    }
}

impl std::error::Error for CliError {}

impl From<idm_core::Error> for CliError {
    fn from(e: idm_core::Error) -> Self {
        let category = match e.category() {
            "dimension" => Category::Dimension,
            "batch" => Category::Batch,
            "range" => Category::Range,
            "clustering" => Category::Clustering,
            "non-finite" => Category::NonFinite,
            _ => Category::InvalidArgument,
        };
        Self::new(category, e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::new(Category::Io, e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => Self::new(Category::Io, e.to_string()),
            _ => Self::format(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a path or action to an error of any convertible kind.
pub trait Context<T> {
    fn context(self, what: impl fmt::Display) -> CliResult<T>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, what: impl fmt::Display) -> CliResult<T> {
        self.map_err(|e| e.into().context(what))
    }
}
