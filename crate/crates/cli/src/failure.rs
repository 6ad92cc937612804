use std::fmt;

use sindy_bsde::Error;

/// A categorized command failure; each category has its own exit code.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    MissingInput(String),
    Data(String),
    Model(String),
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 3,
            Failure::MissingInput(_) => 4,
            Failure::Data(_) => 5,
            Failure::Model(_) => 6,
            Failure::Io(_) => 7,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::MissingInput(_) => "missing input",
            Failure::Data(_) => "data",
            Failure::Model(_) => "model",
            Failure::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::MissingInput(m) | Failure::Data(m) | Failure::Model(m) | Failure::Io(m) => m,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category(), self.message())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::InvalidParameter(_) | Error::Config(_) => Failure::Config(m),
            Error::Parse { .. } | Error::Csv(_) | Error::Json(_) => Failure::Data(m),
            Error::Io(_) => Failure::Io(m),
            Error::Domain(_)
            | Error::NonFinite { .. }
            | Error::SigmaRejected(_)
            | Error::DivisorGuard { .. }
            | Error::DegenerateDiscovery(_) => Failure::Model(m),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_nonzero() {
        let all = [
            Failure::Config(String::new()),
            Failure::MissingInput(String::new()),
            Failure::Data(String::new()),
            Failure::Model(String::new()),
            Failure::Io(String::new()),
        ];
        let mut codes: Vec<u8> = all.iter().map(Failure::exit_code).collect();
        codes.sort_unstable();
        codes.dedup();
        assert_eq!(codes.len(), all.len());
        // 1 and 2 belong to generic and usage errors.
        assert!(codes.iter().all(|&c| c > 2));
    }

    #[test]
    fn core_errors_map_to_categories() {
        assert_eq!(Failure::from(Error::Parse { row: 3, message: "x".into() }).exit_code(), 5);
        assert_eq!(Failure::from(Error::DegenerateDiscovery("x".into())).exit_code(), 6);
        assert_eq!(Failure::from(Error::InvalidParameter("x".into())).exit_code(), 3);
    }
}
