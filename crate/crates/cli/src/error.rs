use std::path::PathBuf;

use aad_core::pipeline::RunFailure;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or config; nothing was run.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] aad_core::Error),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{} run(s) failed: {}", .0.len(), describe(.0))]
    RunsFailed(Vec<RunFailure>),
}

fn describe(failures: &[RunFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("({}, {}, seed {}): {}", f.pair, f.variant, f.seed, f.error))
        .collect::<Vec<_>>()
        .join("; ")
}

impl CliError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
