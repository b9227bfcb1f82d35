//! Binary PPM (P6) with 8-bit samples.

use std::fs;
use std::path::Path;

use mgc_core::image::Image;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("not a binary PPM (magic {0:?})")]
    Magic(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported max value {0} (only 8-bit samples are supported)")]
    Unsupported(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
}

/// Decoded P6 file with the raw samples kept for exact re-encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub data: Vec<u8>,
}

impl Ppm {
    pub fn to_image(&self) -> Image {
        let scale = 1.0 / self.maxval as f64;
        let data = self.data.iter().map(|&b| b as f64 * scale).collect();
        Image::from_vec(self.width, self.height, data).expect("decoder checked the payload size")
    }

    pub fn from_image(img: &Image) -> Self {
        Self { width: img.width, height: img.height, maxval: 255, data: img.to_rgb8() }
    }
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], PpmError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::Header("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, PpmError> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| PpmError::Header(format!("{what} is not a number: {:?}", String::from_utf8_lossy(t))))
}

pub fn decode(bytes: &[u8]) -> Result<Ppm, PpmError> {
    let mut pos = 0;
    let magic = token(bytes, &mut pos).map_err(|_| PpmError::Magic(String::new()))?;
    if magic != b"P6" {
        return Err(PpmError::Magic(String::from_utf8_lossy(magic).into_owned()));
    }
    let width = number(bytes, &mut pos, "width")? as usize;
    let height = number(bytes, &mut pos, "height")? as usize;
    let maxval = number(bytes, &mut pos, "max value")?;
    if width == 0 || height == 0 {
        return Err(PpmError::Header(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PpmError::Unsupported(maxval));
    }
    // exactly one whitespace byte separates the header from the samples
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PpmError::Header("missing whitespace after max value".into()));
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated { expected, got: payload.len() });
    }
    Ok(Ppm { width, height, maxval, data: payload[..expected].to_vec() })
}

pub fn encode(ppm: &Ppm) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n{}\n", ppm.width, ppm.height, ppm.maxval).into_bytes();
    out.extend_from_slice(&ppm.data);
    out
}

pub fn read_image(path: &Path) -> anyhow::Result<Image> {
    let bytes = fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    let ppm = decode(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(ppm.to_image())
}

pub fn write_image(path: &Path, img: &Image) -> anyhow::Result<()> {
    fs::write(path, encode(&Ppm::from_image(img))).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}
