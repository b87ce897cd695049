use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid settings; exit status 2.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Run(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }

    /// One JSON line: `{"error": kind, "message": ...}`.
    pub fn line(&self) -> String {
        let (kind, message) = match self {
            CliError::Config(m) => ("config", m.clone()),
            CliError::Run(e) => ("runtime", format!("{e:#}")),
        };
        json!({ "error": kind, "message": one_line(&message) }).to_string()
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn config(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}
