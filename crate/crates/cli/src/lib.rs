//! Command-line front end: configuration presets and the
//! simulate / train / optimize / verify / benchmark pipeline.

pub mod commands;
pub mod config;

use curedesign_core::Error;

/// Process exit status for a failed command: 1 for numerical failures,
/// 2 for configuration and input errors.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Domain(_)
                | Error::Unstable(_)
                | Error::Diverged(_)
                | Error::NonFiniteGradient { .. } => 1,
                _ => 2,
            };
        }
    }
    2
}
