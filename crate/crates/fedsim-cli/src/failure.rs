//! Error-to-exit-code mapping.

use fedsim::Error;

pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::Io(_) => 1,
            Error::Capacity(_) => 3,
            Error::Validation(_)
            | Error::Dimension(_)
            | Error::Format(_)
            | Error::InsufficientData(_)
            | Error::Json(_) => 2,
        };
        Self::new(code, err.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Self::new(1, err.to_string())
    }
}

pub type CliResult = Result<i32, Failure>;
