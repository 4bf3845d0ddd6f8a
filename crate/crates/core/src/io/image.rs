//! 8-bit grayscale PNG at the service and CLI boundary. Training and
//! evaluation never see quantized pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[1,H,W]` image with values in `[0,1]`.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::Dimension(format!("PNG export needs one channel, got {c}")));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let pixels: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&pixels).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a PNG into a `[1,H,W]` tensor in `[0,1]`. Color images are
/// reduced to their first channel.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("PNG: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let stride = info.line_size;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * stride..];
        for x in 0..w {
            data.push(row[x * channels] as f32 / 255.0);
        }
    }
    Tensor::new(&[1, h, w], data)
}

pub fn write_png(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Tiles equally sized `[1,H,W]` images left to right, `columns` per row.
/// A single image comes back unchanged.
pub fn image_grid(images: &[Tensor<f32>], columns: usize) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Contract("no images to tile".into()))?;
    let (_, h, w) = first.chw()?;
    let cols = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let width = cols * w;
    let mut data = vec![0.0f32; rows * h * width];
    for (k, img) in images.iter().enumerate() {
        img.ensure_shape(first.shape(), "grid image")?;
        let (r, c) = (k / cols, k % cols);
        for y in 0..h {
            let dst = (r * h + y) * width + c * w;
            data[dst..dst + w].copy_from_slice(&img.data()[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(&[1, rows * h, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let img = Tensor::new(&[1, 2, 3], vec![0.0, 0.2, 0.5, 1.0, 1.5, -0.1]).unwrap();
        let bytes = encode_png(&img).unwrap();
        let back = decode_png(&bytes).unwrap();
        assert_eq!(back.shape(), &[1, 2, 3]);
        let expect = [0u8, 51, 128, 255, 255, 0];
        for (v, e) in back.data().iter().zip(expect) {
            assert_eq!(*v, e as f32 / 255.0);
        }
        // decoding then re-encoding is stable
        assert_eq!(encode_png(&back).unwrap(), bytes);
        assert!(matches!(decode_png(b"nope"), Err(Error::Format(_))));
    }

    #[test]
    fn grid_layout() {
        let a = Tensor::new(&[1, 1, 2], vec![0.1, 0.2]).unwrap();
        let b = Tensor::new(&[1, 1, 2], vec![0.3, 0.4]).unwrap();
        let c = Tensor::new(&[1, 1, 2], vec![0.5, 0.6]).unwrap();
        let g = image_grid(&[a.clone(), b, c], 2).unwrap();
        assert_eq!(g.shape(), &[1, 2, 4]);
        assert_eq!(g.data(), &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.0, 0.0]);
        assert_eq!(image_grid(std::slice::from_ref(&a), 8).unwrap(), a);
    }
}
