//! Row-major `H x W x C` floating-point images and PNG / raw-float I/O.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Parse(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let at = (y * self.width + x) * self.channels;
        &mut self.data[at..at + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Loads an 8-bit PNG as RGB in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Scene(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(w as usize, h as usize, 3, data)
    }

    /// Writes an 8-bit RGB PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Parse(format!(
                "PNG output needs 3 channels, image has {}",
                self.channels
            )));
        }
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    /// Writes little-endian `f32` values plus a `key = value` manifest next
    /// to them (`<path>.txt`).
    pub fn save_float_dump(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, bytes).map_err(Error::at(path))?;
        let manifest = format!(
            "format = viewagg-float-image/1\ndtype = f32\nlayout = hwc\nwidth = {}\nheight = {}\nchannels = {}\n",
            self.width, self.height, self.channels
        );
        let manifest_path = path.with_extension("txt");
        fs::write(&manifest_path, manifest).map_err(Error::at(manifest_path))?;
        Ok(())
    }

    /// Reads a dump written by [`Image::save_float_dump`].
    pub fn load_float_dump(path: &Path) -> Result<Self> {
        let manifest_path = path.with_extension("txt");
        let text = fs::read_to_string(&manifest_path).map_err(Error::at(&manifest_path))?;
        let field = |key: &str| -> Result<usize> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .and_then(|(_, v)| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("float dump manifest lacks `{key}`")))
        };
        let (w, h, c) = (field("width")?, field("height")?, field("channels")?);
        let bytes = fs::read(path).map_err(Error::at(path))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::new(w, h, c, data)
    }
}

/// `[0, 1]` float to 8-bit with rounding.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
