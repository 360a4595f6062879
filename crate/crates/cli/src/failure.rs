use virtview::ErrorCategory;

/// A command failure, reported as one line and mapped to an exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Data(_) => "data",
            Failure::Numeric(_) => "numeric",
        }
    }

    fn detail(&self) -> &str {
        match self {
            Failure::Config(s) | Failure::Data(s) | Failure::Numeric(s) => s,
        }
    }

    /// `error[<category>]: <detail>` with any line breaks folded away.
    pub fn line(&self) -> String {
        let detail: String = self.detail().split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error[{}]: {detail}", self.category())
    }
}

impl From<virtview::Error> for Failure {
    fn from(e: virtview::Error) -> Self {
        let s = e.to_string();
        match e.category() {
            ErrorCategory::Config => Failure::Config(s),
            ErrorCategory::Data => Failure::Data(s),
            ErrorCategory::Numeric => Failure::Numeric(s),
        }
    }
}

/// Wraps an I/O failure on `path` as a data error.
pub fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}
