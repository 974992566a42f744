//! File formats: portable float maps, 8-bit PNG masks and previews.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::camera::PixelMask;
use crate::metrics::HeightMap;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed PFM {path}: {reason}")]
    Pfm { path: String, reason: String },
    #[error("png error on {path}: {reason}")]
    Png { path: String, reason: String },
    #[error("json error on {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    fn pfm(path: &Path, reason: impl Into<String>) -> Self {
        Self::Pfm { path: path.display().to_string(), reason: reason.into() }
    }

    fn png(path: &Path, reason: impl ToString) -> Self {
        Self::Png { path: path.display().to_string(), reason: reason.to_string() }
    }
}

/// Float image, rows stored top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            [p[0] as f64; 3]
        } else {
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    }
}

/// Writes a little-endian PFM (scale -1.0); rows are stored bottom to top as the format requires.
pub fn write_pfm(path: &Path, img: &Image) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    let mut bytes = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row_len = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row_len..(y + 1) * row_len] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

fn read_token(r: &mut impl BufRead, path: &Path) -> Result<String, IoError> {
    let mut tok = Vec::new();
    loop {
        let mut b = [0u8; 1];
        let n = r.read(&mut b).map_err(|e| IoError::io(path, e))?;
        if n == 0 {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b[0]);
    }
    if tok.is_empty() {
        return Err(IoError::pfm(path, "truncated header"));
    }
    String::from_utf8(tok).map_err(|_| IoError::pfm(path, "non-ASCII header"))
}

pub fn read_pfm(path: &Path) -> Result<Image, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut r = BufReader::new(file);
    let channels = match read_token(&mut r, path)?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(IoError::pfm(path, format!("unknown tag {other:?}"))),
    };
    let parse = |s: String| s.parse::<usize>().map_err(|_| IoError::pfm(path, format!("bad dimension {s:?}")));
    let width = parse(read_token(&mut r, path)?)?;
    let height = parse(read_token(&mut r, path)?)?;
    let scale: f64 = read_token(&mut r, path)?.parse().map_err(|_| IoError::pfm(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(IoError::pfm(path, "zero scale"));
    }
    let little = scale < 0.0;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| IoError::io(path, e))?;
    let row_len = width * channels;
    if raw.len() != 4 * row_len * height {
        return Err(IoError::pfm(path, format!("expected {} data bytes, found {}", 4 * row_len * height, raw.len())));
    }
    let mut data = vec![0f32; row_len * height];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / row_len, i % row_len);
        data[(height - 1 - file_row) * row_len + col] = v;
    }
    Ok(Image { width, height, channels, data })
}

/// Height map as a single-channel image (map row `r` becomes image row `r`).
pub fn heightmap_to_image(map: &HeightMap) -> Image {
    Image { width: map.cols, height: map.rows, channels: 1, data: map.values.iter().map(|&v| v as f32).collect() }
}

pub fn image_to_heightmap(img: &Image, cell_size: f64, origin: [f64; 2]) -> HeightMap {
    let values = (0..img.width * img.height).map(|i| img.data[i * img.channels] as f64).collect();
    HeightMap::new(img.height, img.width, cell_size, origin, values)
}

pub fn write_heightmap_pfm(path: &Path, map: &HeightMap) -> Result<(), IoError> {
    write_pfm(path, &heightmap_to_image(map))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| IoError::png(path, e))?;
    writer.write_image_data(data).map_err(|e| IoError::png(path, e))?;
    writer.finish().map_err(|e| IoError::png(path, e))
}

pub fn write_mask_png(path: &Path, mask: &PixelMask) -> Result<(), IoError> {
    let data: Vec<u8> = mask.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
    write_png(path, mask.width as usize, mask.height as usize, png::ColorType::Grayscale, &data)
}

/// Reads an 8-bit PNG mask; any nonzero sample marks the pixel valid.
pub fn read_mask_png(path: &Path) -> Result<PixelMask, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| IoError::png(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| IoError::png(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| IoError::png(path, e))?;
    let samples = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let valid = (0..w * h)
        .map(|i| {
            let px = &buf[i * samples..(i + 1) * samples];
            // Alpha is ignored; any nonzero color sample counts.
            let color = if samples == 2 || samples == 4 { &px[..samples - 1] } else { px };
            color.iter().any(|&v| v != 0)
        })
        .collect();
    Ok(PixelMask { width: info.width, height: info.height, valid })
}

fn srgb_encode(linear: f32) -> u8 {
    let c = linear.clamp(0.0, 1.0);
    let s = if c <= 0.003_130_8 { 12.92 * c } else { 1.055 * c.powf(1.0 / 2.4) - 0.055 };
    (s * 255.0 + 0.5) as u8
}

/// Gamma-encoded 8-bit preview of a linear RGB (or gray) image.
pub fn write_preview_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let (color, data): (png::ColorType, Vec<u8>) = match img.channels {
        1 => (png::ColorType::Grayscale, img.data.iter().map(|&v| srgb_encode(v)).collect()),
        _ => (png::ColorType::Rgb, img.data.iter().map(|&v| srgb_encode(v)).collect()),
    };
    write_png(path, img.width, img.height, color, &data)
}

/// Diverging preview of `pred - gt`: blue below, red above, white at zero,
/// saturating at `limit`; cells invalid in either map are black.
pub fn write_difference_png(path: &Path, pred: &HeightMap, gt: &HeightMap, limit: f64) -> Result<(), IoError> {
    let mut data = Vec::with_capacity(pred.values.len() * 3);
    for (p, g) in pred.values.iter().zip(&gt.values) {
        let d = p - g;
        if !d.is_finite() {
            data.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let t = (d / limit.max(1e-12)).clamp(-1.0, 1.0);
        let fade = (255.0 * (1.0 - t.abs())).round() as u8;
        if t >= 0.0 {
            data.extend_from_slice(&[255, fade, fade]);
        } else {
            data.extend_from_slice(&[fade, fade, 255]);
        }
    }
    write_png(path, pred.cols, pred.rows, png::ColorType::Rgb, &data)
}

/// Grayscale preview of a height map, min-max normalized over valid cells.
pub fn write_heightmap_png(path: &Path, map: &HeightMap) -> Result<(), IoError> {
    let valid: Vec<f64> = map.values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data: Vec<u8> = map.values.iter().map(|&v| if v.is_finite() { (255.0 * (v - lo) / span).round() as u8 } else { 0 }).collect();
    write_png(path, map.cols, map.rows, png::ColorType::Grayscale, &data)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::Json { path: path.display().to_string(), source: e })?;
    std::fs::write(path, text + "\n").map_err(|e| IoError::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.display().to_string(), source: e })
}
