//! Binary PPM (P6). Writing always uses 16-bit big-endian samples.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::header::{read_token, HeaderReader};
use crate::linear_image::RgbImage;
use crate::{Error, Result};

pub const MAX16: u16 = u16::MAX;

fn bad(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "ppm",
        msg: msg.into(),
    }
}

/// `round_half_even(v · 65535)`; `v` must lie in `[0, 1]`.
pub fn quantize16(v: f64) -> Result<u16> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("display value {v} outside [0, 1]")));
    }
    Ok((v * f64::from(MAX16)).round_ties_even() as u16)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmSamples {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl PpmSamples {
    pub fn from_image(image: &RgbImage) -> Result<Self> {
        Ok(PpmSamples {
            width: image.width(),
            height: image.height(),
            maxval: MAX16,
            samples: image.data().iter().map(|&v| quantize16(v)).collect::<Result<_>>()?,
        })
    }

    pub fn to_image(&self) -> Result<RgbImage> {
        let m = f64::from(self.maxval);
        RgbImage::new(self.width, self.height, self.samples.iter().map(|&s| f64::from(s) / m).collect())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(bad("zero-size image"));
        }
        write!(w, "P6\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        let mut buf = Vec::with_capacity(self.samples.len() * 2);
        for &s in &self.samples {
            if self.maxval > 255 {
                buf.extend_from_slice(&s.to_be_bytes());
            } else {
                buf.push(s as u8);
            }
        }
        w.write_all(&buf)?;
        Ok(w.flush()?)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut hr = HeaderReader::new(r);
        let magic = read_token(&mut hr, "ppm")?;
        if magic != "P6" {
            return Err(bad(format!("unsupported magic '{magic}'")));
        }
        let width: usize = read_token(&mut hr, "ppm")?.parse().map_err(|_| bad("bad width"))?;
        let height: usize = read_token(&mut hr, "ppm")?.parse().map_err(|_| bad("bad height"))?;
        let maxval: u16 = read_token(&mut hr, "ppm")?.parse().map_err(|_| bad("bad maxval"))?;
        if width == 0 || height == 0 || maxval == 0 {
            return Err(bad("zero-size image or maxval"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| bad("image too large"))?;
        let bytes = if maxval > 255 { 2 } else { 1 };
        let mut raw = vec![0u8; n * bytes];
        hr.into_inner().read_exact(&mut raw).map_err(|_| bad("truncated payload"))?;
        let samples: Vec<u16> = if bytes == 2 {
            raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raw.iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(s) = samples.iter().find(|&&s| s > maxval) {
            return Err(bad(format!("sample {s} exceeds maxval {maxval}")));
        }
        Ok(PpmSamples {
            width,
            height,
            maxval,
            samples,
        })
    }
}

pub fn write_ppm16(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let file = std::fs::File::create(path)?;
    PpmSamples::from_image(image)?.write_to(std::io::BufWriter::new(file))
}

/// Reads an 8- or 16-bit P6 file into `[0, 1]` values.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let file = std::fs::File::open(path)?;
    PpmSamples::read_from(BufReader::new(file))?.to_image()
}
