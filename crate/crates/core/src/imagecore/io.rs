//! 8-bit grayscale PNG and binary PGM (P5, maxval 255).
//!
//! Stored byte = `round(value * 255)`; decoded value = `byte / 255`.

use std::io::Cursor;
use std::path::Path;

use super::{Image, ImageError};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Pgm,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(Self::Png),
            "pgm" => Some(Self::Pgm),
            _ => None,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_image(&bytes)
}

/// Decodes PNG or PGM, sniffing the format from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageError> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pgm(bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(ImageError::Unsupported(format!(
            "netpbm variant P{}",
            bytes[1] as char
        )))
    } else {
        Err(ImageError::Unsupported("unrecognized file signature".into()))
    }
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path).ok_or_else(|| {
        ImageError::Unsupported(format!("output extension of {}", path.display()))
    })?;
    let bytes = match format {
        ImageFormat::Png => encode_png(img)?,
        ImageFormat::Pgm => encode_pgm(img),
    };
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn quantize(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Image, ImageError> {
    Image::new(
        height,
        width,
        bytes.iter().map(|b| *b as f64 / 255.0).collect(),
    )
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let malformed = |e: png::DecodingError| ImageError::Malformed {
        format: "PNG",
        reason: e.to_string(),
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(malformed)?;
    let info = reader.info();
    match info.color_type {
        png::ColorType::Grayscale => {}
        png::ColorType::GrayscaleAlpha => {
            return Err(ImageError::Unsupported("grayscale+alpha image".into()))
        }
        _ => return Err(ImageError::Unsupported("color image".into())),
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Unsupported(format!(
            "bit depth {}",
            info.bit_depth as u8
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or_else(|| ImageError::Malformed {
        format: "PNG",
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(malformed)?;
    let mut pixels = Vec::with_capacity(width * height);
    for row in buf.chunks(frame.line_size).take(height) {
        pixels.extend_from_slice(&row[..width]);
    }
    from_bytes(height, width, &pixels)
}

fn encode_png(img: &Image) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    let err = |e: png::EncodingError| ImageError::Malformed {
        format: "PNG",
        reason: e.to_string(),
    };
    {
        let mut encoder = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(err)?;
        writer.write_image_data(&quantize(img)).map_err(err)?;
    }
    Ok(out)
}

fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(quantize(img));
    out
}

fn decode_pgm(bytes: &[u8]) -> Result<Image, ImageError> {
    let malformed = |reason: &str| ImageError::Malformed {
        format: "PGM",
        reason: reason.to_string(),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments may separate header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(malformed("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header field out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ImageError::Unsupported(format!("PGM maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(malformed("missing separator after maxval"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| malformed("dimensions overflow"))?;
    let data = bytes
        .get(pos..pos + n)
        .ok_or_else(|| malformed("truncated pixel data"))?;
    from_bytes(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_fn(64, 64, |r, c| (r * 64 + c) as f64 / 4095.0).unwrap()
    }

    #[test]
    fn round_trip_both_formats_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp();
        for name in ["ramp.png", "ramp.pgm"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.height(), 64);
            let max = img
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max <= 1.0 / 255.0, "{name}: {max}");
        }
    }

    #[test]
    fn pgm_values_are_k_over_255() {
        let mut bytes = b"P5\n# comment\n3 1\n255\n".to_vec();
        bytes.extend([0u8, 128, 255]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn stored_byte_is_rounded_value() {
        let img = Image::new(1, 3, vec![0.5, 0.2, 1.0]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 51, 255]);
    }

    #[test]
    fn rgb_png_is_rejected() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 2);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 12]).unwrap();
        }
        let err = decode_image(&out).unwrap_err();
        assert_eq!(err.to_string(), "unsupported: color image");
    }

    #[test]
    fn sixteen_bit_png_names_bit_depth() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0u8; 2]).unwrap();
        }
        let err = decode_image(&out).unwrap_err();
        assert!(err.to_string().contains("bit depth 16"), "{err}");
    }

    #[test]
    fn pgm_maxval_and_truncation_errors() {
        let mut bytes = b"P5 1 1 65535\n".to_vec();
        bytes.extend([0u8, 0]);
        assert!(decode_image(&bytes).unwrap_err().to_string().contains("maxval 65535"));
        assert!(decode_image(b"P5 4 4 255\n\x00").is_err());
        assert!(decode_image(b"P2 1 1 255\n0").is_err());
        assert!(decode_image(b"garbage").is_err());
    }
}
