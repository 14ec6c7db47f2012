//! Feature files, dataset manifests, synthetic data, checkpoints and CSV helpers.

mod checkpoint;
mod dataset;
mod features;
mod manifest;
mod synth;

use std::io::{Read, Write};

use thiserror::Error;

pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{Dataset, Split, Video};
pub use features::{load_features, read_features, save_features, segment_pool, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{DatasetManifest, ManifestHeader, ManifestVideo};
pub use synth::{generate_synthetic, synthesize, write_synthetic, SynthConfig, SynthVideo};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("file ends early: {0}")]
    Truncated(String),
    #[error("unrecognized file signature {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Prefix of the fingerprint comment line that opens every CSV artifact.
pub const FINGERPRINT_PREFIX: &str = "# config-fingerprint: ";

/// Writes the fingerprint comment and header, returning a writer for the rows.
pub fn csv_writer<W: Write>(mut out: W, fingerprint: &str, header: &[&str]) -> Result<csv::Writer<W>, DataError> {
    writeln!(out, "{FINGERPRINT_PREFIX}{fingerprint}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

/// Reader that skips `#` comment lines and consumes the header row.
pub fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(input)
}

/// Hex SHA-256 of `bytes`, truncated to 16 characters.
pub fn fingerprint(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}
