//! Experiment driver for degradation-type unlearning: corpus generation,
//! pretraining, unlearning, baselines and reporting.

pub mod commands;
pub mod config;

pub use config::{Config, ConfigError};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;
}

/// Maps an error chain to the exit code of its most specific cause.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return exit::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<forgetir_core::Error>() {
            if e.is_divergence() {
                return exit::DIVERGENCE;
            }
            if e.is_config() {
                return exit::CONFIG;
            }
            if e.is_io() {
                return exit::IO;
            }
        }
        if cause.is::<std::io::Error>() {
            return exit::IO;
        }
    }
    exit::FAILURE
}

#[cfg(test)]
mod tests {
    use super::*;
    use forgetir_core::Error;

    #[test]
    fn exit_codes_follow_the_cause() {
        let div = anyhow::Error::new(Error::Divergence { step: 3, detail: "nan".into() });
        assert_eq!(exit_code(&div), exit::DIVERGENCE);
        let cfg = anyhow::Error::new(ConfigError("x".into())).context("loading");
        assert_eq!(exit_code(&cfg), exit::CONFIG);
        let io = anyhow::Error::new(std::io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&io), exit::IO);
        let digest = anyhow::Error::new(Error::Digest { path: "c".into() });
        assert_eq!(exit_code(&digest), exit::IO);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), exit::FAILURE);
    }
}
