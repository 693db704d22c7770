//! Library half of the `minivlm` binary: the run configuration and the
//! subcommand implementations, split out so integration tests can drive
//! them in-process as well as through the executable.

pub mod commands;
pub mod config;

use minivlm::Error;

/// The exit-code contract shared by every subcommand: configuration and
/// data problems are the caller's to fix (2), unreadable or unwritable
/// files are environmental (3), and numeric failures mean the run itself
/// went bad (4).
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Shape { .. } => 2,
        Error::Io { .. } | Error::Format(_) => 3,
        Error::Numeric(_) | Error::State(_) => 4,
    }
}
