//! Image ingestion (binary PGM/PPM and raw f32 blobs) and PGM output.
//!
//! Raw blobs are `RF32`, then channels, height and width as `u32`, then the
//! `C·H·W` little-endian f32 values. They are taken verbatim (already
//! normalized). PGM/PPM pixels are scaled to `[0, 1]` and normalized per
//! channel with `(v - mean) / std`; grayscale images are replicated to three
//! channels.

use std::path::{Path, PathBuf};

use crate::arch::Normalization;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"RF32";

/// Decoded PNM pixels scaled to `[0, 1]`, `[C, H, W]` with C = 1 or 3.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated PNM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Image(format!("unsupported PNM kind `{other}` (expected P5 or P6)"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        token()?
            .parse()
            .map_err(|_| Error::Image(format!("bad PNM {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Image(format!("bad PNM geometry {w}x{h}, maxval {maxval}")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let bpp = if maxval < 256 { 1 } else { 2 };
    let n = w * h * channels;
    if data.len() < n * bpp {
        return Err(Error::Image(format!("PNM payload truncated: {} of {} bytes", data.len(), n * bpp)));
    }
    let sample = |i: usize| -> f32 {
        let v = if bpp == 1 {
            data[i] as u32
        } else {
            u16::from_be_bytes([data[2 * i], data[2 * i + 1]]) as u32
        };
        v as f32 / maxval as f32
    };
    Tensor::from_fn(&[channels, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        sample(p * channels + c)
    })
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Image("not an RF32 blob".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if n == 0 || bytes.len() != 16 + 4 * n {
        return Err(Error::Image(format!("RF32 blob of shape {shape:?} has {} payload bytes", bytes.len() - 16)));
    }
    let data = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    Tensor::new(&shape, data)
}

pub fn encode_raw(image: &Tensor) -> Result<Vec<u8>> {
    image.expect_rank("encode_raw", 3)?;
    let mut out = RAW_MAGIC.to_vec();
    for &d in image.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Normalizes `[C, H, W]` intensities in `[0, 1]` to three normalized
/// channels.
pub fn normalize(pixels: &Tensor, norm: &Normalization) -> Result<Tensor> {
    let [c, h, w] = match pixels.shape() {
        &[c, h, w] if c == 1 || c == 3 => [c, h, w],
        s => return Err(Error::shape("normalize", "[1 or 3, H, W]", format!("{s:?}"))),
    };
    Tensor::from_fn(&[3, h, w], |i| {
        let ch = i / (h * w);
        let src = if c == 1 { i % (h * w) } else { i };
        (pixels.data()[src] - norm.mean[ch]) / norm.std[ch]
    })
}

/// Loads one image file as a normalized `[3, H, W]` tensor.
pub fn load_image(path: &Path, norm: &Normalization) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let ctx = |e: Error| Error::Image(format!("{}: {e}", path.display()));
    if bytes.starts_with(RAW_MAGIC) {
        return decode_raw(&bytes).map_err(ctx);
    }
    normalize(&decode_pnm(&bytes).map_err(ctx)?, norm).map_err(ctx)
}

/// Image files (`.pgm`, `.ppm`, `.pnm`, `.f32`) in `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "ppm" | "pnm" | "f32"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// 8-bit binary PGM of a non-negative map, scaled so its maximum is 255.
/// With `log` the display value is `ln(1 + 1000·v/max) / ln(1001)`.
pub fn encode_pgm(map: &Tensor, log: bool) -> Result<Vec<u8>> {
    let [h, w] = map.dims2()?;
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        let r = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let r = if log { (1.0 + 1000.0 * r).ln() / 1001f32.ln() } else { r };
        (r * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn encode_pnm(pixels: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = match pixels.shape() {
        &[c, h, w] if c == 1 || c == 3 => [c, h, w],
        s => return Err(Error::shape("encode_pnm", "[1 or 3, H, W]", format!("{s:?}"))),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    for p in 0..h * w {
        for ch in 0..c {
            out.push((pixels.data()[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| (i % 7) as f32 / 6.0).unwrap();
        let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.51 / 255.0);
        let gray = decode_pnm(b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(gray.shape(), &[1, 1, 2]);
        assert_eq!(gray.data(), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_and_errors() {
        let img = decode_pnm(b"P5 1 1 65535\n\xff\xff").unwrap();
        assert_eq!(img.data(), &[1.0]);
        assert!(decode_pnm(b"P5 2 2 255\n\x00").is_err());
        assert!(decode_pnm(b"P3 1 1 255\n0").is_err());
    }

    #[test]
    fn raw_round_trip_and_normalization() {
        let t = Tensor::from_fn(&[3, 2, 2], |i| i as f32 - 3.5).unwrap();
        assert_eq!(decode_raw(&encode_raw(&t).unwrap()).unwrap(), t);
        let gray = Tensor::full(&[1, 2, 2], 0.485).unwrap();
        let n = normalize(&gray, &Normalization::default()).unwrap();
        assert_eq!(n.shape(), &[3, 2, 2]);
        assert!(n.data()[..4].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn pgm_is_max_normalized() {
        let map = Tensor::new(&[1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let bytes = encode_pgm(&map, false).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }
}
