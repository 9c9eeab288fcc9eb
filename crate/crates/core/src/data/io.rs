//! FSPC1 cloud files and ASCII PLY export.
//!
//! An FSPC1 file is one text header line `FSPC1 <M> <f> <has_labels>` followed
//! by `M·f` little-endian `f32` coordinates and, when labeled, `M`
//! little-endian `i32` class ids.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{LabeledCloud, PointCloud};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CLOUD_MAGIC: &str = "FSPC1";

/// Serializes a cloud (and optional labels) into FSPC1 bytes.
pub fn write_cloud<T: Scalar>(cloud: &PointCloud<T>, labels: Option<&[u32]>) -> Vec<u8> {
    let (m, f) = cloud.points().shape();
    let header = format!("{CLOUD_MAGIC} {m} {f} {}\n", u8::from(labels.is_some()));
    let mut out = Vec::with_capacity(header.len() + m * f * 4 + m * 4);
    out.extend_from_slice(header.as_bytes());
    for v in cloud.points().as_slice() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    if let Some(labels) = labels {
        for &l in labels {
            out.extend_from_slice(&(l as i32).to_le_bytes());
        }
    }
    out
}

/// Parses FSPC1 bytes; `path` only labels error messages.
pub fn read_cloud(bytes: &[u8], path: &Path) -> Result<(PointCloud<f32>, Option<Vec<u32>>)> {
    let newline = bytes.iter().position(|&b| b == b'\n');
    let header_end = match newline {
        Some(i) => i,
        None => {
            let head = String::from_utf8_lossy(&bytes[..bytes.len().min(16)]).into_owned();
            if !head.starts_with(CLOUD_MAGIC) {
                return Err(bad_magic(path, head));
            }
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: "missing header terminator".into(),
            });
        }
    };
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::MalformedHeader {
        path: path.into(),
        reason: "header is not UTF-8".into(),
    })?;
    let mut fields = header.split_ascii_whitespace();
    let magic = fields.next().unwrap_or("");
    if magic != CLOUD_MAGIC {
        return Err(bad_magic(path, magic.to_string()));
    }
    let mut next_num = |name: &str| -> Result<usize> {
        fields
            .next()
            .ok_or_else(|| Error::MalformedHeader {
                path: path.into(),
                reason: format!("missing {name}"),
            })?
            .parse::<usize>()
            .map_err(|_| Error::MalformedHeader {
                path: path.into(),
                reason: format!("{name} is not a non-negative integer"),
            })
    };
    let m = next_num("point count")?;
    let f = next_num("channel count")?;
    let has_labels = match next_num("label flag")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: format!("label flag must be 0 or 1, got {other}"),
            })
        }
    };
    if fields.next().is_some() {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "trailing header fields".into(),
        });
    }

    let payload = &bytes[header_end + 1..];
    let point_bytes = m * f * 4;
    if payload.len() < point_bytes {
        return Err(Error::Truncated {
            path: path.into(),
            expected: point_bytes,
            found: payload.len(),
        });
    }
    let data: Vec<f32> = payload[..point_bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rest = &payload[point_bytes..];
    let labels = if has_labels {
        if rest.len() != m * 4 {
            return Err(Error::CountMismatch {
                path: path.into(),
                reason: format!("{m} points but {} label bytes", rest.len()),
            });
        }
        let labels = rest
            .chunks_exact(4)
            .map(|c| {
                let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                u32::try_from(v).map_err(|_| Error::CountMismatch {
                    path: path.into(),
                    reason: format!("negative label {v}"),
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        Some(labels)
    } else {
        if !rest.is_empty() {
            return Err(Error::CountMismatch {
                path: path.into(),
                reason: format!("{} unexpected trailing bytes", rest.len()),
            });
        }
        None
    };
    let cloud = PointCloud::new(Matrix::from_vec(m, f, data)).map_err(|e| Error::MalformedHeader {
        path: path.into(),
        reason: e.to_string(),
    })?;
    Ok((cloud, labels))
}

fn bad_magic(path: &Path, found: String) -> Error {
    Error::BadMagic {
        path: path.into(),
        expected: CLOUD_MAGIC,
        found,
    }
}

pub fn save_cloud<T: Scalar>(path: &Path, cloud: &LabeledCloud<T>) -> Result<()> {
    let bytes = write_cloud(&cloud.cloud, Some(&cloud.labels));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a labeled FSPC1 file.
pub fn load_cloud(path: &Path) -> Result<LabeledCloud<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cloud, labels) = read_cloud(&bytes, path)?;
    let labels = labels.ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        reason: "file carries no labels".into(),
    })?;
    LabeledCloud::new(cloud, labels)
}

const PALETTE: [[u8; 3]; 8] = [
    [160, 160, 160],
    [228, 26, 28],
    [55, 126, 184],
    [77, 175, 74],
    [152, 78, 163],
    [255, 127, 0],
    [255, 255, 51],
    [166, 86, 40],
];

/// Writes an ASCII PLY with one colour per class label.
pub fn write_ply<T: Scalar>(path: &Path, cloud: &PointCloud<T>, labels: &[u32]) -> Result<()> {
    if labels.len() != cloud.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} points",
            labels.len(),
            cloud.len()
        )));
    }
    let mut out = Vec::new();
    let io = |e| Error::io(path, e);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    )
    .map_err(io)?;
    for (i, &l) in labels.iter().enumerate() {
        let [x, y, z] = cloud.xyz(i);
        let [r, g, b] = PALETTE[l as usize % PALETTE.len()];
        writeln!(out, "{} {} {} {r} {g} {b}", x.as_f64() as f32, y.as_f64() as f32, z.as_f64() as f32).map_err(io)?;
    }
    fs::write(path, out).map_err(io)
}
