//! Binary netpbm: P5 (gray) and P6 (RGB), 8-bit samples.

use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("expected magic {expected}, found {found:?}")]
    Magic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("unsupported maxval {0} (only 255)")]
    Maxval(u32),
    #[error("pixel data truncated: {got} of {need} bytes")]
    Truncated { got: usize, need: usize },
}

/// Interleaved 8-bit samples, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            channels: 1,
            data,
        }
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], channels: usize) -> Result<Self, PnmError> {
        let expected = if channels == 3 { "P6" } else { "P5" };
        let mut pos = 0;
        let magic = token(bytes, &mut pos).ok_or(PnmError::Header("missing magic"))?;
        if magic != expected.as_bytes() {
            return Err(PnmError::Magic {
                expected,
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let width = number(bytes, &mut pos, "bad width")?;
        let height = number(bytes, &mut pos, "bad height")?;
        let maxval = number(bytes, &mut pos, "bad maxval")?;
        if width == 0 || height == 0 {
            return Err(PnmError::Header("zero extent"));
        }
        if maxval != 255 {
            return Err(PnmError::Maxval(maxval as u32));
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(PnmError::Header("missing separator before raster")),
        }
        let need = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or(PnmError::Header("extent overflow"))?;
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(PnmError::Truncated { got: raster.len(), need });
        }
        Ok(Image {
            width,
            height,
            channels,
            data: raster[..need].to_vec(),
        })
    }

    pub fn read(path: &Path, channels: usize) -> Result<Self, PnmError> {
        Self::decode(&fs::read(path)?, channels)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, self.encode())
    }
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while bytes.get(*pos).is_some_and(u8::is_ascii_whitespace) {
            *pos += 1;
        }
        if bytes.get(*pos) == Some(&b'#') {
            while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#') {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &'static str) -> Result<usize, PnmError> {
    token(bytes, pos)
        .and_then(|t| std::str::from_utf8(t).ok())
        .and_then(|s| s.parse().ok())
        .ok_or(PnmError::Header(what))
}
