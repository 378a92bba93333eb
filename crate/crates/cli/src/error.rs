//! Single-line errors with distinct exit codes.

use std::fmt;

use npunas::arch::ArchError;
use npunas::autodiff::AutodiffError;
use npunas::latency::LatencyError;
use npunas::network::NetworkError;
use npunas::postprocess::PostprocessError;
use npunas::scale::ScaleError;
use npunas::search::SearchError;
use npunas::synth::SynthError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Infeasible,
    Invariant,
    Divergence,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Infeasible => 3,
            ErrorKind::Invariant => 4,
            ErrorKind::Divergence => 5,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Infeasible => "infeasible",
            ErrorKind::Invariant => "invariant",
            ErrorKind::Divergence => "divergence",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl fmt::Display for CliError {
    /// `error kind=<kind> code=<n>: <message>` on one line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, "error kind={} code={}: {msg}", self.kind.name(), self.kind.exit_code())
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }
}

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        let kind = match e {
            ArchError::Malformed(_) | ArchError::UnknownVersion(_) | ArchError::BadConfigId(_) | ArchError::BadExpansion(_) => {
                ErrorKind::Config
            }
            _ => ErrorKind::Invariant,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        let kind = match e {
            AutodiffError::NonFinite { .. } => ErrorKind::Divergence,
            AutodiffError::Checkpoint(_) => ErrorKind::Config,
            AutodiffError::ShapeMismatch { .. } => ErrorKind::Invariant,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<LatencyError> for CliError {
    fn from(e: LatencyError) -> Self {
        let kind = match e {
            LatencyError::InvalidParams(_) | LatencyError::File(_) | LatencyError::NonCanonicalKey(_) => ErrorKind::Config,
            _ => ErrorKind::Invariant,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Arch(a) => a.into(),
            NetworkError::Autodiff(a) => a.into(),
            NetworkError::Diverged { .. } => Self::new(ErrorKind::Divergence, e.to_string()),
            NetworkError::Config(m) => Self::config(m),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Network(n) => n.into(),
            SearchError::Latency(l) => l.into(),
            SearchError::Arch(a) => a.into(),
            SearchError::Infeasible(m) => Self::new(ErrorKind::Infeasible, m),
            SearchError::Config(m) => Self::config(m),
        }
    }
}

impl From<ScaleError> for CliError {
    fn from(e: ScaleError) -> Self {
        match e {
            ScaleError::Config(m) => Self::config(m),
            ScaleError::Infeasible(m) => Self::new(ErrorKind::Infeasible, m),
            ScaleError::Arch(a) => a.into(),
            ScaleError::Latency(l) => l.into(),
        }
    }
}

impl From<PostprocessError> for CliError {
    fn from(e: PostprocessError) -> Self {
        match e {
            PostprocessError::Network(n) => n.into(),
            PostprocessError::BadKeepFraction(_) | PostprocessError::TooFewImages(_) => Self::config(e.to_string()),
            _ => Self::new(ErrorKind::Invariant, e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        Self::config(e.to_string())
    }
}
