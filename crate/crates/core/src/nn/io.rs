//! The `LLNK` weight container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "LLNK" | version: u32 | body
//! ```
//!
//! A plain network body is `layer_count: u32` followed by, per layer,
//! `in: u32 | out: u32 | activation tag: u8 | weight (out×in, row-major f64) | bias (out f64)`.
//! Composite models (generator, flow, codec, feature net) append further
//! blocks after the header; their loaders know the expected order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{Activation, Dense, Mlp};
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"LLNK";
pub const WEIGHT_VERSION: u32 = 1;

/// Little-endian writer that tags failures with the destination path.
pub struct BinWriter<W: Write> {
    inner: W,
    path: PathBuf,
}

impl BinWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufWriter::new(file), path))
    }
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(|e| Error::io(&self.path, e))
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        self.bytes(magic)?;
        self.u32(version)
    }

    pub fn mlp(&mut self, net: &Mlp) -> Result<()> {
        self.u32(net.layers().len() as u32)?;
        for l in net.layers() {
            self.u32(l.in_dim() as u32)?;
            self.u32(l.out_dim() as u32)?;
            self.u8(l.activation.tag())?;
            self.f64s(l.weight.iter())?;
            self.f64s(l.bias.iter())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.inner)
    }
}

/// Little-endian reader matching [`BinWriter`].
pub struct BinReader<R: Read> {
    inner: R,
    path: PathBuf,
}

impl BinReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(file), path))
    }
}

// Refuse absurd sizes before allocating.
const MAX_DIM: u32 = 1 << 24;

impl<R: Read> BinReader<R> {
    pub fn new(inner: R, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
        }
    }

    pub fn format_error(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    pub fn bytes(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                self.format_error("unexpected end of file")
            } else {
                Error::io(&self.path, e)
            }
        })
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.bytes(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()?;
        if v > MAX_DIM {
            return Err(self.format_error(format!("{what} = {v} is implausibly large")));
        }
        Ok(v as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        (0..count).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.dim("string length")?;
        let mut buf = vec![0u8; len];
        self.bytes(&mut buf)?;
        String::from_utf8(buf).map_err(|_| self.format_error("string is not UTF-8"))
    }

    pub fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let mut m = [0u8; 4];
        self.bytes(&mut m)?;
        if &m != magic {
            return Err(self.format_error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != version {
            return Err(self.format_error(format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    pub fn mlp(&mut self) -> Result<Mlp> {
        let count = self.dim("layer count")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let in_dim = self.dim("layer input dim")?;
            let out_dim = self.dim("layer output dim")?;
            let tag = self.u8()?;
            let activation = Activation::from_tag(tag)
                .ok_or_else(|| self.format_error(format!("layer {i}: unknown activation tag {tag}")))?;
            let weight = Array2::from_shape_vec((out_dim, in_dim), self.f64s(out_dim * in_dim)?)
                .map_err(|e| self.format_error(e.to_string()))?;
            let bias = Array1::from(self.f64s(out_dim)?);
            layers.push(Dense {
                weight,
                bias,
                activation,
            });
        }
        Mlp::from_layers(layers).map_err(|e| self.format_error(e.to_string()))
    }

    /// Errors unless the stream is exhausted.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.format_error("trailing bytes after model body")),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

/// Writes a standalone network file.
pub fn save_mlp(net: &Mlp, path: &Path) -> Result<()> {
    let mut w = BinWriter::create(path)?;
    w.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
    w.mlp(net)?;
    w.finish()?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let mut r = BinReader::open(path)?;
    r.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
    let net = r.mlp()?;
    r.expect_end()?;
    Ok(net)
}

/// In-memory encoding of a standalone network file.
pub fn mlp_to_bytes(net: &Mlp) -> Vec<u8> {
    let mut w = BinWriter::new(Vec::new(), "<memory>");
    w.header(WEIGHT_MAGIC, WEIGHT_VERSION).expect("vec write");
    w.mlp(net).expect("vec write");
    w.finish().expect("vec write")
}

pub fn mlp_from_bytes(bytes: &[u8]) -> Result<Mlp> {
    let mut r = BinReader::new(bytes, "<memory>");
    r.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
    let net = r.mlp()?;
    r.expect_end()?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Rng;

    #[test]
    fn header_layout() {
        let net = Mlp::identity(2);
        let bytes = mlp_to_bytes(&net);
        assert_eq!(&bytes[0..4], b"LLNK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(bytes[20], Activation::Identity.tag());
        assert_eq!(f64::from_le_bytes(bytes[21..29].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 21 + 8 * (4 + 2));
    }

    #[test]
    fn truncated_and_corrupt_files_rejected() {
        let net = Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Sigmoid, &mut Rng::new(1)).unwrap();
        let bytes = mlp_to_bytes(&net);
        assert!(mlp_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(mlp_from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(mlp_from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.llnk");
        let net = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut Rng::new(2)).unwrap();
        save_mlp(&net, &path).unwrap();
        assert_eq!(load_mlp(&path).unwrap(), net);
        let missing = load_mlp(&dir.path().join("nope")).unwrap_err();
        assert!(missing.to_string().contains("nope"));
    }
}
