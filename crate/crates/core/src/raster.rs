//! Raster I/O: binary PPM (bit-exact, hand-written) and PNG.
//!
//! 8-bit samples decode to `v / 255`; encoding multiplies by 255 and rounds
//! half to even.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::colorspace::Image;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ppm,
    Png,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" | "pnm" => Some(Format::Ppm),
            "png" => Some(Format::Png),
            _ => None,
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
    let px = bytes.chunks_exact(3).map(|c| [dequantize(c[0]), dequantize(c[1]), dequantize(c[2])]).collect();
    Image::new(height, width, px)
}

pub fn to_rgb8(img: &Image) -> Vec<u8> {
    img.pixels().iter().flat_map(|p| p.map(quantize)).collect()
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(to_rgb8(img));
    out
}

fn ppm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let mut pos = 2;
    let mut vals = Vec::with_capacity(count);
    while vals.len() < count {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        let v = std::str::from_utf8(&bytes[start..pos]).unwrap().parse().map_err(|e| Error::Format(format!("PPM header: {e}")))?;
        vals.push(v);
    }
    Ok((vals, pos))
}

/// Decode a binary (`P6`) or ASCII (`P3`) PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'6' || bytes[1] == b'3') {
        return Err(Error::Format("not a P6/P3 PPM".into()));
    }
    let (hdr, pos) = ppm_tokens(bytes, 3)?;
    let (w, h, maxval) = (hdr[0], hdr[1], hdr[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let n = w.checked_mul(h).and_then(|v| v.checked_mul(3)).ok_or_else(|| Error::Format("PPM too large".into()))?;
    if bytes[1] == b'6' {
        let data = bytes.get(pos + 1..pos + 1 + n).ok_or_else(|| Error::Format("truncated PPM data".into()))?;
        from_rgb8(w, h, data)
    } else {
        let text = std::str::from_utf8(&bytes[pos..]).map_err(|_| Error::Format("P3 body is not ASCII".into()))?;
        let vals: Vec<u8> = text
            .split_ascii_whitespace()
            .take(n)
            .map(|t| t.parse::<u8>().map_err(|e| Error::Format(format!("P3 sample: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(Error::Format("truncated PPM data".into()));
        }
        from_rgb8(w, h, &vals)
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("PNG too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => data.to_vec(),
        png::ColorType::Rgba => data.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => data.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Format("palette PNG was not expanded".into())),
    };
    from_rgb8(w, h, &rgb)
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(&to_rgb8(img)).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decode by content: `P3`/`P6` magic is PPM, otherwise PNG.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P3") {
        decode_ppm(bytes)
    } else {
        decode_png(bytes)
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode(&std::fs::read(path).map_err(crate::error::at(path))?)
}

/// Write as PNG or PPM according to the file extension (PNG if unknown).
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let bytes = match Format::from_path(path) {
        Some(Format::Ppm) => encode_ppm(img),
        _ => encode_png(img)?,
    };
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantization_rounds_half_to_even() {
        // 0.5/255 sits exactly between 0 and 1; 1.5/255 between 1 and 2.
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(2.5 / 255.0), 2);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.3), 0);
    }

    #[test]
    fn ascii_ppm_with_comment() {
        let img = decode_ppm(b"P3\n# hi\n2 1\n255\n255 0 0  0 0 255\n").unwrap();
        assert_eq!(img.pixels(), &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn truncated_and_foreign_inputs() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 2\n65535\n").is_err());
        assert!(decode(b"GIF89a").is_err());
    }

    #[test]
    fn png_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 2, vec![[0.0, 0.2, 1.0], [1.0, 1.0, 1.0], [0.4, 0.4, 0.4], [0.0; 3]]).unwrap();
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &img).unwrap();
            let back = read_image(&p).unwrap();
            assert_eq!(to_rgb8(&back), to_rgb8(&img));
        }
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 3 * 6)) {
            let img = from_rgb8(3, 2, &bytes).unwrap();
            prop_assert_eq!(to_rgb8(&img), bytes.clone());
            prop_assert_eq!(to_rgb8(&decode_ppm(&encode_ppm(&img)).unwrap()), bytes.clone());
            prop_assert_eq!(to_rgb8(&decode_png(&encode_png(&img).unwrap()).unwrap()), bytes);
        }
    }
}
