use std::path::{Path, PathBuf};

/// Errors of the command layer. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(tab_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(e) => match e {
                tab_core::Error::Config(_) => 2,
                tab_core::Error::Data(_) => 3,
                tab_core::Error::Numeric(_) => 4,
                _ => 1,
            },
        }
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.as_ref().to_path_buf(),
            detail: detail.into(),
        }
    }
}

impl From<tab_core::Error> for CliError {
    fn from(e: tab_core::Error) -> Self {
        match e {
            tab_core::Error::Config(m) => CliError::Config(m),
            tab_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Core(other),
        }
    }
}

/// Reads a whole file, naming it on failure.
pub fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::format(path, format!("at `{}`: {}", e.path(), e.inner())))
}
