//! Command implementations behind the `nests6` binary.

pub mod commands;
pub mod config;

use nests6_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::MemoryMode(_) => EXIT_USAGE,
        Error::Data(_) | Error::Format(_) | Error::Io(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::GradCheck(_) => EXIT_NUMERIC,
    }
}
