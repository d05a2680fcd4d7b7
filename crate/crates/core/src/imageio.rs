//! Float RGB images with 8-bit PNG and binary PPM (P6) I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major, values nominally in `[0, 1]`.
    pub pixels: Vec<Vec3>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: Vec3) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; (width * height) as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Vec3 {
        self.pixels[(y * self.width + x) as usize]
    }

    fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Self {
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Self { width, height, pixels }
    }

    /// Values after an 8-bit encode/decode round trip.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8())
    }

    /// Write as PNG or PPM depending on the extension (`.ppm` → P6, else PNG).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_rgb8();
        if is_ppm(path) {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            write!(f, "P6\n{} {}\n255\n", self.width, self.height).map_err(|e| Error::io(path, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            Ok(())
        } else {
            image::save_buffer_with_format(
                path,
                &bytes,
                self.width,
                self.height,
                image::ExtendedColorType::Rgb8,
                image::ImageFormat::Png,
            )
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        if is_ppm(path) {
            let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_ppm(&data).ok_or_else(|| Error::Image {
                path: path.to_path_buf(),
                message: "malformed P6 file".into(),
            })
        } else {
            let img = image::open(path)
                .map_err(|e| Error::Image {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            Ok(Image::from_rgb8(img.width(), img.height(), img.as_raw()))
        }
    }
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn parse_ppm(data: &[u8]) -> Option<Image> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&data[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let width: u32 = fields[1].parse().ok()?;
    let height: u32 = fields[2].parse().ok()?;
    let body = data.get(pos + 1..)?;
    let n = (width * height * 3) as usize;
    if body.len() < n {
        return None;
    }
    Some(Image::from_rgb8(width, height, &body[..n]))
}
