//! Binary clip-feature files.
//!
//! Layout (little-endian): 4-byte magic `DAKF`, `u32` version, `u32` clip
//! count, `u32` width, then `count × width` `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DataError;
use crate::diffcore::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"DAKF";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features<W: Write>(mut out: W, clips: &Tensor) -> Result<(), DataError> {
    if clips.rank() != 2 {
        return Err(DataError::Format(format!("feature matrix must be 2-D, got {:?}", clips.shape())));
    }
    let rows = u32::try_from(clips.rows()).map_err(|_| DataError::Format("too many clips".into()))?;
    let cols = u32::try_from(clips.cols()).map_err(|_| DataError::Format("feature width too large".into()))?;
    out.write_all(&FEATURE_MAGIC)?;
    out.write_all(&FEATURE_VERSION.to_le_bytes())?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    let mut buf = Vec::with_capacity(clips.numel() * 4);
    for &v in clips.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

fn read_exact_or(input: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), DataError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => DataError::Truncated(what.to_string()),
        _ => DataError::Io(e),
    })
}

fn read_u32(input: &mut impl Read, what: &str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact_or(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_features<R: Read>(mut input: R) -> Result<Tensor, DataError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "header")?;
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: FEATURE_MAGIC,
        });
    }
    let version = read_u32(&mut input, "header")?;
    if version != FEATURE_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let rows = read_u32(&mut input, "header")? as usize;
    let cols = read_u32(&mut input, "header")? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Format(format!("empty feature matrix {rows}×{cols}")));
    }
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::Format("feature dimensions overflow".into()))?;
    let mut body = Vec::new();
    input.by_ref().take(len as u64).read_to_end(&mut body)?;
    if body.len() < len {
        return Err(DataError::Truncated(format!(
            "expected {len} payload bytes, found {}",
            body.len()
        )));
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(DataError::Format("trailing bytes after feature payload".into()));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(DataError::Format("non-finite feature value".into()));
    }
    Tensor::new(vec![rows, cols], data).map_err(|e| DataError::Format(e.to_string()))
}

pub fn save_features(path: &Path, clips: &Tensor) -> Result<(), DataError> {
    write_features(BufWriter::new(File::create(path)?), clips)
}

pub fn load_features(path: &Path) -> Result<Tensor, DataError> {
    read_features(BufReader::new(File::open(path)?))
}

/// Averages `n_c` clip rows into `n_s` segments.
///
/// Segment `i` covers clips `[⌊i·n_c/n_s⌋, ⌊(i+1)·n_c/n_s⌋)`; when that range
/// is empty (fewer clips than segments) it takes the single clip at its start,
/// clamped to the last clip.
pub fn segment_pool(clips: &Tensor, segments: usize) -> Result<Tensor, DataError> {
    if clips.rank() != 2 || segments == 0 {
        return Err(DataError::Format(format!(
            "cannot pool {:?} into {segments} segments",
            clips.shape()
        )));
    }
    let (n_c, d) = (clips.rows(), clips.cols());
    let mut out = Vec::with_capacity(segments * d);
    for i in 0..segments {
        let mut start = i * n_c / segments;
        let mut end = (i + 1) * n_c / segments;
        if end <= start {
            start = start.min(n_c - 1);
            end = start + 1;
        }
        let mut acc = vec![0.0; d];
        for c in start..end {
            for (a, v) in acc.iter_mut().zip(clips.row(c)) {
                *a += v;
            }
        }
        let count = (end - start) as f64;
        out.extend(acc.into_iter().map(|a| a / count));
    }
    Tensor::new(vec![segments, d], out).map_err(|e| DataError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let t = Tensor::from_rows(&[vec![1.5, -2.25, 0.0], vec![3.0, 1e-3f32 as f64, 7.0]]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert_eq!(&buf[..4], b"DAKF");
        assert_eq!(read_features(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_features(&mut buf, &t).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_features(bad.as_slice()), Err(DataError::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_features(bad.as_slice()), Err(DataError::VersionMismatch { found: 9, .. })));

        assert!(matches!(read_features(&buf[..buf.len() - 1]), Err(DataError::Truncated(_))));
        assert!(matches!(read_features(&buf[..6]), Err(DataError::Truncated(_))));

        let mut bad = buf.clone();
        bad.push(0);
        assert!(matches!(read_features(bad.as_slice()), Err(DataError::Format(_))));

        let mut bad = buf;
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(read_features(bad.as_slice()).is_err());
    }

    #[test]
    fn pooling_examples() {
        let clips = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        assert_eq!(segment_pool(&clips, 2).unwrap().data(), &[1.0, 5.0]);
        assert_eq!(segment_pool(&clips, 4).unwrap().data(), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(segment_pool(&clips, 1).unwrap().data(), &[3.0]);
        // fewer clips than segments: empty ranges reuse the starting clip
        let short = Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(segment_pool(&short, 4).unwrap().data(), &[1.0, 1.0, 3.0, 3.0]);
        assert!(segment_pool(&short, 0).is_err());
    }
}
