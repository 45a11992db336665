use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

pub const MAGIC: &[u8; 4] = b"ESPR";
pub const VERSION: u8 = 0x01;

/// Frame features `[T × P × D_v]` as produced by a frozen per-frame image
/// encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVideo {
    features: Tensor,
}

impl FeatureVideo {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 3 {
            return Err(Error::invalid(
                "feature video",
                format!("expected [T, P, D] features, got {:?}", features.shape()),
            ));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("feature video".into()));
        }
        Ok(Self { features })
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn into_features(self) -> Tensor {
        self.features
    }

    /// Frames `[start, start + len)`.
    pub fn frame_range(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            features: self.features.narrow(0, start, len)?,
        })
    }

    /// Concatenate videos along time.
    pub fn concat_frames(parts: &[&FeatureVideo]) -> Result<Self> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.features).collect();
        Self::new(ops::concat(&tensors, 0)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(17 + 4 * self.features.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        for extent in [self.frames(), self.patches(), self.dim()] {
            buf.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for &v in self.features.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::invalid("feature video file", reason.to_string());
        let mut header = [0u8; 17];
        r.read_exact(&mut header)
            .map_err(|_| bad("truncated header"))?;
        if &header[..4] != MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        if header[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", header[4])));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(header[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize
        };
        let shape = [dim(0), dim(1), dim(2)];
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)
            .map_err(|_| bad("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(Tensor::new(&shape, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::files::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            Error::InvalidArgument { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}
