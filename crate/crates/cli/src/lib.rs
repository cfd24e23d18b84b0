//! Configuration and subcommands behind the `awmf` binary.

pub mod commands;
pub mod config;

use awmf_core::Error;

/// Process exit status for an error: 2 for configuration or checkpoint
/// problems, 3 for unreadable or invalid data, 4 for divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::CheckpointMismatch(_)
        | Error::UnsupportedVersion(_)
        | Error::BadMagic
        | Error::Truncated(_)
        | Error::Shape { .. } => 2,
        Error::Io { .. }
        | Error::Manifest { .. }
        | Error::MalformedHeader(_)
        | Error::UnexpectedEof
        | Error::ExtentOverflow { .. }
        | Error::EmptyClass(_)
        | Error::InvalidArgument { .. } => 3,
        Error::Divergence { .. } | Error::NonFinite(_) | Error::NonFiniteGradient(_) => 4,
        _ => 1,
    }
}
