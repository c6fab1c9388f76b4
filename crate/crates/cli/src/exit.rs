use std::fmt;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

pub const USAGE: u8 = 1;
pub const TRANSPORT: u8 = 2;
pub const DATA: u8 = 3;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: USAGE,
        msg: msg.into(),
    }
}

pub fn data(msg: impl Into<String>) -> CliError {
    CliError {
        code: DATA,
        msg: msg.into(),
    }
}

impl From<confex::Error> for CliError {
    fn from(e: confex::Error) -> Self {
        use confex::Error as E;
        let code = match &e {
            E::Transport(_) => TRANSPORT,
            E::InvalidArgument(_) => USAGE,
            E::Io { .. } | E::Parse { .. } | E::NonFinite { .. } | E::DimMismatch(_) | E::Manifest(_) | E::Json(_) => {
                DATA
            }
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        data(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        data(e.to_string())
    }
}
