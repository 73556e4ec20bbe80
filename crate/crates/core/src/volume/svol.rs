//! The `svol` container: magic line, one JSON header line, raw little-endian
//! payload in channel-major C order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldKind, GridShape, LabelSemantics, LabelVolume, ScalarField4D, Volume};
use crate::error::{Error, Result, SvolError};

pub const MAGIC: &[u8] = b"SVOL1\n";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    channels: usize,
    dtype: String,
    spacing: [f64; 3],
    semantics: String,
}

/// Serializes a volume. Real fields are stored as f32, so values that are not
/// exactly representable in f32 are rounded.
pub fn encode_svol(volume: &Volume) -> Vec<u8> {
    let shape = volume.shape();
    let (dtype, semantics) = match volume {
        Volume::Field(f) => ("f32", f.kind().as_str()),
        Volume::Labels(l) => ("u8", l.semantics().as_str()),
    };
    let header = Header {
        dims: shape.dims(),
        channels: shape.channels(),
        dtype: dtype.to_string(),
        spacing: shape.spacing(),
        semantics: semantics.to_string(),
    };
    let header = serde_json::to_string(&header).expect("header serializes");
    let payload_len = match volume {
        Volume::Field(f) => 4 * f.data().len(),
        Volume::Labels(l) => l.data().len(),
    };
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    match volume {
        Volume::Field(f) => {
            for &v in f.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Volume::Labels(l) => out.extend_from_slice(l.data()),
    }
    out
}

fn malformed(msg: impl Into<String>) -> SvolError {
    SvolError::MalformedHeader(msg.into())
}

/// Parses an svol buffer. Structural problems come back as [`SvolError`];
/// content problems (label ranges, non-finite values) as the matching
/// [`Error`] variants.
pub fn decode_svol(bytes: &[u8]) -> std::result::Result<Result<Volume>, SvolError> {
    let rest = bytes.strip_prefix(MAGIC).ok_or(SvolError::BadMagic)?;
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("header line is not terminated"))?;
    let header: Header = serde_json::from_slice(&rest[..newline])
        .map_err(|e| malformed(e.to_string()))?;
    let payload = &rest[newline + 1..];

    let width = match header.dtype.as_str() {
        "u8" => 1,
        "f32" => 4,
        other => return Err(SvolError::UnknownDtype(other.to_string())),
    };
    let shape = GridShape::new(header.channels, header.dims, header.spacing)
        .map_err(|e| malformed(e.to_string()))?;
    let expected = shape
        .dims()
        .iter()
        .try_fold(shape.channels(), |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| malformed("dimensions overflow"))?;
    if payload.len() != expected {
        return Err(SvolError::PayloadMismatch {
            expected,
            found: payload.len(),
        });
    }

    let volume = if width == 1 {
        let semantics = parse_semantics::<LabelSemantics>(&header.semantics)?;
        if shape.channels() != 1 {
            return Err(malformed("u8 volumes must have one channel"));
        }
        LabelVolume::from_vec(shape, semantics, payload.to_vec()).map(Volume::Labels)
    } else {
        let kind = parse_semantics::<FieldKind>(&header.semantics)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        ScalarField4D::from_vec(shape, kind, data).map(Volume::Field)
    };
    Ok(volume)
}

fn parse_semantics<T: for<'de> Deserialize<'de>>(s: &str) -> std::result::Result<T, SvolError> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| SvolError::UnknownSemantics(s.to_string()))
}

pub fn read_svol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_svol(&bytes).map_err(|source| Error::Svol {
        path: path.to_path_buf(),
        source,
    })?
}

pub fn write_svol(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_svol(volume)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(dims: [usize; 3], data: Vec<u8>) -> Volume {
        LabelVolume::from_vec(
            GridShape::cube(1, dims).unwrap(),
            LabelSemantics::SegmentPartition,
            data,
        )
        .unwrap()
        .into()
    }

    fn payload(bytes: &[u8]) -> &[u8] {
        let rest = &bytes[MAGIC.len()..];
        let nl = rest.iter().position(|&b| b == b'\n').unwrap();
        &rest[nl + 1..]
    }

    #[test]
    fn u8_payload_is_identity() {
        let bytes = encode_svol(&labels([1, 2, 2], vec![0, 1, 2, 3]));
        assert_eq!(payload(&bytes), &[0, 1, 2, 3]);
    }

    #[test]
    fn f32_payload_is_little_endian() {
        let f = ScalarField4D::from_vec(
            GridShape::cube(1, [1, 1, 1]).unwrap(),
            FieldKind::Field,
            vec![1.0],
        )
        .unwrap();
        let bytes = encode_svol(&f.into());
        assert_eq!(payload(&bytes), &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_svol(&labels([1, 1, 2], vec![0, 0]));
        let text = String::from_utf8(bytes[..bytes.len() - 2].to_vec()).unwrap();
        assert_eq!(
            text,
            "SVOL1\n{\"dims\":[1,1,2],\"channels\":1,\"dtype\":\"u8\",\"spacing\":[1.0,1.0,1.0],\"semantics\":\"segment_partition\"}\n"
        );
    }

    #[test]
    fn zeros_round_trip() {
        let v = labels([2, 2, 2], vec![0; 8]);
        let back = decode_svol(&encode_svol(&v)).unwrap().unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn short_payload_is_mismatch() {
        let mut bytes = encode_svol(&labels([2, 2, 2], vec![0; 8]));
        bytes.pop();
        assert!(matches!(
            decode_svol(&bytes),
            Err(SvolError::PayloadMismatch {
                expected: 8,
                found: 7
            })
        ));
    }

    #[test]
    fn distinct_parse_errors() {
        assert!(matches!(decode_svol(b"SVOL2\n{}\n"), Err(SvolError::BadMagic)));
        assert!(matches!(
            decode_svol(b"SVOL1\n{not json}\n"),
            Err(SvolError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_svol(b"SVOL1\n{\"dims\":[1,1,1]"),
            Err(SvolError::MalformedHeader(_))
        ));
        let bad_dtype = b"SVOL1\n{\"dims\":[1,1,1],\"channels\":1,\"dtype\":\"f64\",\"spacing\":[1,1,1],\"semantics\":\"field\"}\n";
        assert!(matches!(
            decode_svol(bad_dtype),
            Err(SvolError::UnknownDtype(d)) if d == "f64"
        ));
        let bad_sem = b"SVOL1\n{\"dims\":[1,1,1],\"channels\":1,\"dtype\":\"u8\",\"spacing\":[1,1,1],\"semantics\":\"logits\"}\n\x00";
        assert!(matches!(
            decode_svol(bad_sem),
            Err(SvolError::UnknownSemantics(_))
        ));
    }

    #[test]
    fn out_of_range_label_is_content_error() {
        let bytes = b"SVOL1\n{\"dims\":[1,1,1],\"channels\":1,\"dtype\":\"u8\",\"spacing\":[1,1,1],\"semantics\":\"lobe_labels\"}\n\x07";
        let inner = decode_svol(bytes).unwrap();
        assert!(matches!(inner, Err(Error::LabelOutOfRange { label: 7, .. })));
    }

    #[test]
    fn file_round_trip_19_channel_field() {
        let shape = GridShape::new(19, [4, 4, 4], [0.7, 0.7, 1.25]).unwrap();
        let data: Vec<f64> = (0..shape.len())
            .map(|i| ((i as f32) * 0.37).sin() as f64)
            .collect();
        let f: Volume = ScalarField4D::from_vec(shape, FieldKind::Logits, data)
            .unwrap()
            .into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.svol");
        write_svol(&f, &path).unwrap();
        let original = fs::read(&path).unwrap();
        let back = read_svol(&path).unwrap();
        assert_eq!(back, f);
        let reencoded = encode_svol(&back);
        assert_eq!(payload(&reencoded), payload(&original));
        assert_eq!(reencoded, original);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_svol("/nonexistent/x.svol").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
