//! Image tensors and the raw tensor file format.
//!
//! A tensor file is a 16-byte header followed by little-endian `f32`
//! payload:
//!
//! | bytes | field                      |
//! |-------|----------------------------|
//! | 0..4  | magic `CAVT`               |
//! | 4..8  | height (u32 LE)            |
//! | 8..12 | width (u32 LE)             |
//! | 12..16| channels (u32 LE)          |
//!
//! The payload holds one or more HWC images back to back; the image count
//! is the payload length divided by `height * width * channels * 4`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"CAVT";
pub const HEADER_LEN: usize = 16;

/// An `H x W x 3` image with intensities in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn zeros(height: usize, width: usize) -> Self {
        ImageTensor {
            height,
            width,
            data: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let o = (row * self.width + col) * Self::CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Raw little-endian bytes of the payload, used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut encoder = png::Encoder::new(file, self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        encoder
            .write_header()
            .and_then(|mut w| w.write_image_data(&bytes))
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn write_tensor_file(path: &Path, images: &[ImageTensor]) -> Result<()> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&TENSOR_MAGIC)?;
    for v in [h, w, ImageTensor::CHANNELS] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for image in images {
        if image.height != h || image.width != w {
            return Err(Error::DimensionMismatch {
                expected: h * w,
                found: image.height * image.width,
            });
        }
        for v in &image.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Vec<ImageTensor>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || bytes[..4] != TENSOR_MAGIC {
        return Err(Error::format(path, "missing CAVT header"));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (field(1), field(2), field(3));
    if c != ImageTensor::CHANNELS {
        return Err(Error::format(
            path,
            format!("expected 3 channels, found {c}"),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let per_image = h * w * c * 4;
    if per_image == 0 {
        return Ok(Vec::new());
    }
    if payload.len() % per_image != 0 {
        return Err(Error::format(
            path,
            "payload is not a whole number of images",
        ));
    }
    Ok(payload
        .chunks_exact(per_image)
        .map(|chunk| ImageTensor {
            height: h,
            width: w,
            data: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.cavt");
        let mut a = ImageTensor::zeros(2, 3);
        a.data[4] = 0.25;
        let b = ImageTensor::zeros(2, 3);
        write_tensor_file(&path, &[a.clone(), b.clone()]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"CAVT");
        assert_eq!(bytes.len(), 16 + 2 * 18 * 4);
        assert_eq!(read_tensor_file(&path).unwrap(), vec![a, b]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_tensor_file(&path).is_err());
    }
}
