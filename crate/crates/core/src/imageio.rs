//! Single-image files: raw little-endian `f32` planes (`3×N×N`, channel
//! major, the layout used inside dataset payloads) and 8-bit PNG export.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub fn write_image_blob(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a square 3-channel blob; the side is implied by the file length.
pub fn read_image_blob(path: &Path) -> Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let corrupt = |reason: String| Error::CorruptedPayload {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() % 12 != 0 || bytes.is_empty() {
        return Err(corrupt(format!("{} bytes is not a 3-channel f32 image", bytes.len())));
    }
    let area = bytes.len() / 12;
    let n = (area as f64).sqrt().round() as usize;
    if n * n != area {
        return Err(corrupt(format!("{area} pixels per channel is not a square image")));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite pixel".into()));
    }
    ImageTensor::from_vec(3, n, n, data)
}

/// Lossless 8-bit export; values are clamped to `[0,1]` and rounded.
pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::shape(format!("png export needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                buf.push((img.get(c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized to image");
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 16).map(|k| k as f32 / 47.0).collect();
        let img = ImageTensor::from_vec(3, 4, 4, data).unwrap();
        let p = dir.path().join("a.bin");
        write_image_blob(&p, &img).unwrap();
        assert_eq!(read_image_blob(&p).unwrap(), img);
    }

    #[test]
    fn bad_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        fs::write(&p, vec![0u8; 13]).unwrap();
        assert!(read_image_blob(&p).is_err());
        fs::write(&p, vec![0u8; 12 * 5]).unwrap();
        assert!(read_image_blob(&p).is_err());
        assert!(matches!(read_image_blob(&dir.path().join("none")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn png_written() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::filled(3, 8, 8, 0.5);
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        let back = image::open(&p).unwrap().to_rgb8();
        assert_eq!(back.get_pixel(3, 3).0, [128, 128, 128]);
    }
}
