//! 8-bit binary PGM (P5) and PPM (P6) images, held in memory as row-major
//! interleaved `f64` in `[0, 1]`. Values are scaled by the file's maxval
//! on load and rounded-clamped back to bytes on save.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{DenseTensor, TensorError};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a binary PGM/PPM file (magic {0:?})")]
    BadMagic(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 8-bit images)")]
    BadMaxval(u32),
    #[error("payload truncated")]
    Truncated,
    #[error("image/tensor shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// In-memory image: `data[(r * width + c) * channels + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn get(&self, r: usize, c: usize, b: usize) -> f64 {
        self.data[(r * self.width + c) * self.channels + b]
    }

    pub fn set(&mut self, r: usize, c: usize, b: usize, v: f64) {
        self.data[(r * self.width + c) * self.channels + b] = v;
    }

    /// Convert to a dense tensor with dims `[height, width]` (grayscale)
    /// or `[height, width, channels]`.
    pub fn to_tensor(&self) -> DenseTensor {
        let dims = if self.channels == 1 {
            vec![self.height, self.width]
        } else {
            vec![self.height, self.width, self.channels]
        };
        let mut t = DenseTensor::zeros(dims).expect("image dims positive");
        for r in 0..self.height {
            for c in 0..self.width {
                for b in 0..self.channels {
                    let idx: Vec<usize> =
                        if self.channels == 1 { vec![r, c] } else { vec![r, c, b] };
                    t.set(&idx, self.get(r, c, b));
                }
            }
        }
        t
    }

    pub fn from_tensor(t: &DenseTensor) -> Result<Self, ImageError> {
        let dims = t.dims();
        let (h, w, ch) = match dims.len() {
            2 => (dims[0], dims[1], 1),
            3 => (dims[0], dims[1], dims[2]),
            _ => return Err(ImageError::Shape(format!("order {} tensor", dims.len()))),
        };
        let mut img = ImageBuf::new(h, w, ch);
        for r in 0..h {
            for c in 0..w {
                for b in 0..ch {
                    let idx: Vec<usize> = if ch == 1 { vec![r, c] } else { vec![r, c, b] };
                    img.set(r, c, b, t.get(&idx));
                }
            }
        }
        Ok(img)
    }
}

fn next_token<R: Read>(r: &mut R) -> Result<String, ImageError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(ImageError::Truncated);
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

pub fn read_image(path: &Path) -> Result<ImageBuf, ImageError> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = next_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ImageError::BadMagic(other.into())),
    };
    let parse = |s: String| {
        s.parse::<u32>()
            .map_err(|_| ImageError::BadHeader(format!("bad integer {s:?}")))
    };
    let width = parse(next_token(&mut r)?)? as usize;
    let height = parse(next_token(&mut r)?)? as usize;
    let maxval = parse(next_token(&mut r)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::BadMaxval(maxval));
    }
    let n = height * width * channels;
    let mut raw = vec![0u8; n];
    r.read_exact(&mut raw).map_err(|_| ImageError::Truncated)?;
    let data = raw.into_iter().map(|b| b as f64 / maxval as f64).collect();
    Ok(ImageBuf { height, width, channels, data })
}

pub fn write_image(path: &Path, img: &ImageBuf) -> Result<(), ImageError> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        other => return Err(ImageError::Shape(format!("{other} channels"))),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n255\n", img.width, img.height)?;
    let raw: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&raw)?;
    w.flush()?;
    Ok(())
}
