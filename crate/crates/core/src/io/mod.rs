//! On-disk formats: stage and label CSVs, report CSVs, and the chain file.
//!
//! Every float is written with Rust's shortest round-trip rendering, so
//! parsing a file back yields the exact in-memory values.

mod chain_file;
mod tables;

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use chain_file::{load_chain, read_chain, render_chain, save_chain, LoadedChain, CHAIN_VERSION};
pub use tables::{
    parse_stages, read_curve_csv, read_decision_log, read_evaluation_csv, read_labels,
    read_stage_dir, read_stage_file, write_curve_csv, write_decision_log, write_evaluation_csv,
    write_labels, write_stage_dir, write_stage_file,
};

use crate::error::{Error, Result};

/// Shortest decimal that parses back to exactly `v`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn parse_f64(text: &str) -> Option<f64> {
    text.trim().parse().ok()
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
