//! Parameter archives.
//!
//! Layout: a `FSCK1` line, a `manifest key=value ...` line, then for each
//! tensor a `tensor <name> <rows> <cols>` line followed by `rows·cols`
//! little-endian `f64` values, and a final `end` line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &str = "FSCK1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub manifest: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix<f64>)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_manifest(mut self, key: &str, value: impl ToString) -> Self {
        self.manifest.insert(key.to_string(), value.to_string());
        self
    }

    /// Appends every parameter of `module`, names prefixed with `prefix`.
    pub fn add_module<T: Scalar, M: Module<T> + ?Sized>(&mut self, prefix: &str, module: &M) {
        module.visit(&mut |name, m| self.tensors.push((format!("{prefix}{name}"), m.cast())));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Overwrites every parameter of `module` from tensors named `prefix + name`.
    pub fn load_module<T: Scalar, M: Module<T> + ?Sized>(&self, prefix: &str, module: &mut M) -> Result<()> {
        let mut err = None;
        module.visit_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            let key = format!("{prefix}{name}");
            match self.get(&key) {
                Some(src) if src.shape() == m.shape() => *m = src.cast(),
                Some(src) => {
                    err = Some(Error::Config(format!(
                        "checkpoint tensor {key} has shape {:?}, expected {:?}",
                        src.shape(),
                        m.shape()
                    )))
                }
                None => err = Some(Error::Config(format!("checkpoint is missing tensor {key}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn manifest_usize(&self, key: &str) -> Result<usize> {
        self.manifest
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks {key}")))?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint manifest field {key} is not an integer")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(format!("{MAGIC}\nmanifest").as_bytes());
        for (k, v) in &self.manifest {
            out.extend_from_slice(format!(" {k}={v}").as_bytes());
        }
        out.push(b'\n');
        for (name, m) in &self.tensors {
            out.extend_from_slice(format!("tensor {name} {} {}\n", m.rows(), m.cols()).as_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(b"end\n");
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.into(),
            reason,
        };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| malformed("unterminated line".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| malformed("non UTF-8 line".into()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        let magic = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: MAGIC,
                found: magic,
            });
        }
        let manifest_line = next_line(&mut pos)?;
        let mut fields = manifest_line.split_ascii_whitespace();
        if fields.next() != Some("manifest") {
            return Err(malformed("missing manifest line".into()));
        }
        let mut manifest = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| malformed(format!("bad manifest field {f:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let mut tensors = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_ascii_whitespace().collect();
            let [tag, name, rows, cols] = parts.as_slice() else {
                return Err(malformed(format!("bad tensor line {line:?}")));
            };
            if *tag != "tensor" {
                return Err(malformed(format!("bad tensor line {line:?}")));
            }
            let rows: usize = rows.parse().map_err(|_| malformed(format!("bad row count in {line:?}")))?;
            let cols: usize = cols.parse().map_err(|_| malformed(format!("bad column count in {line:?}")))?;
            let n = rows * cols * 8;
            if bytes.len() < pos + n {
                return Err(Error::Truncated {
                    path: path.into(),
                    expected: n,
                    found: bytes.len() - pos,
                });
            }
            let data = bytes[pos..pos + n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            pos += n;
            tensors.push((name.to_string(), Matrix::from_vec(rows, cols, data)));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
