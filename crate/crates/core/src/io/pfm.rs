//! Portable float map: `PF\n<w> <h>\n<scale>\n` then bottom-to-top rows of
//! RGB 32-bit floats. A negative scale means little-endian samples.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::header::{read_token, HeaderReader};
use crate::linear_image::RgbImage;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub little_endian: bool,
    /// Top-to-bottom, interleaved RGB.
    pub data: Vec<f32>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "pfm",
        msg: msg.into(),
    }
}

impl PfmImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(bad("zero-size image"));
        }
        if data.len() != width * height * 3 {
            return Err(bad(format!("{} samples for {width}x{height}x3", data.len())));
        }
        Ok(PfmImage {
            width,
            height,
            little_endian: true,
            data,
        })
    }

    /// Rounds each value to the nearest `f32`.
    pub fn from_image(image: &RgbImage) -> Result<Self> {
        Self::new(image.width(), image.height(), image.data().iter().map(|&v| v as f32).collect())
    }

    pub fn to_image(&self) -> Result<RgbImage> {
        RgbImage::new(self.width, self.height, self.data.iter().map(|&v| f64::from(v)).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(bad("zero-size image"));
        }
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("PFM payload"));
        }
        let scale = if self.little_endian { "-1.0" } else { "1.0" };
        write!(w, "PF\n{} {}\n{scale}\n", self.width, self.height)?;
        let row = self.width * 3;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for &v in &self.data[y * row..(y + 1) * row] {
                let bytes = if self.little_endian { v.to_le_bytes() } else { v.to_be_bytes() };
                buf.extend_from_slice(&bytes);
            }
        }
        w.write_all(&buf)?;
        Ok(w.flush()?)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut hr = HeaderReader::new(r);
        let magic = read_token(&mut hr, "pfm")?;
        match magic.as_str() {
            "PF" => {}
            "Pf" => return Err(bad("greyscale PFM is not supported")),
            other => return Err(bad(format!("bad magic '{other}'"))),
        }
        let width: usize = read_token(&mut hr, "pfm")?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = read_token(&mut hr, "pfm")?.parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = read_token(&mut hr, "pfm")?.parse().map_err(|_| bad("bad scale"))?;
        if width == 0 || height == 0 {
            return Err(bad("zero-size image"));
        }
        if scale == 0.0 || !scale.is_finite() {
            return Err(bad("scale must be non-zero and finite"));
        }
        let little_endian = scale < 0.0;
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(12))
            .ok_or_else(|| bad("image too large"))?;
        let mut raw = vec![0u8; n];
        hr.into_inner().read_exact(&mut raw).map_err(|_| bad("truncated payload"))?;
        let row = width * 3;
        let mut data = vec![0f32; width * height * 3];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little_endian { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = v;
        }
        Ok(PfmImage {
            width,
            height,
            little_endian,
            data,
        })
    }
}

pub fn write_pfm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let file = std::fs::File::create(path)?;
    PfmImage::from_image(image)?.write_to(std::io::BufWriter::new(file))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let file = std::fs::File::open(path)?;
    PfmImage::read_from(BufReader::new(file))?.to_image()
}
