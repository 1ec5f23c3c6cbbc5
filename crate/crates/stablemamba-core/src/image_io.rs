//! Image files: PNG (via the `png` crate) and binary PPM, both as
//! `[3,H,W]` float tensors in [0,1].

use crate::tensor::{Result, Tensor, TensorError};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

fn to_u8(v: f32) -> u8 {
    (f64::from(v) * 255.0).round().clamp(0.0, 255.0) as u8
}

fn rgb_bytes(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        s => {
            return Err(TensorError::Invalid {
                op: "rgb_bytes",
                msg: format!("expected [3,H,W], got {s:?}"),
            })
        }
    };
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        out.push(to_u8(d[i]));
        out.push(to_u8(d[plane + i]));
        out.push(to_u8(d[2 * plane + i]));
    }
    Ok((h, w, out))
}

fn planes_from_rgb(h: usize, w: usize, rgb: &[u8]) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        data[i] = f32::from(rgb[3 * i]) / 255.0;
        data[plane + i] = f32::from(rgb[3 * i + 1]) / 255.0;
        data[2 * plane + i] = f32::from(rgb[3 * i + 2]) / 255.0;
    }
    Tensor::new(&[3, h, w], data)
}

pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = rgb_bytes(img)?;
    let file = File::create(path).map_err(|e| TensorError::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| TensorError::io(path.display().to_string(), e))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| TensorError::io(path.display().to_string(), e))
}

pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| TensorError::io(path.display().to_string(), e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| TensorError::io(path.display().to_string(), e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| TensorError::io(path.display().to_string(), e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(TensorError::io(
            path.display().to_string(),
            format!("unsupported bit depth {:?}", info.bit_depth),
        ));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let n = h * w;
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf[..3 * n].to_vec(),
        png::ColorType::Rgba => {
            let mut v = Vec::with_capacity(3 * n);
            for px in buf[..4 * n].chunks_exact(4) {
                v.extend_from_slice(&px[..3]);
            }
            v
        }
        png::ColorType::Grayscale => {
            let mut v = Vec::with_capacity(3 * n);
            for &g in &buf[..n] {
                v.extend_from_slice(&[g, g, g]);
            }
            v
        }
        other => {
            return Err(TensorError::io(
                path.display().to_string(),
                format!("unsupported color type {other:?}"),
            ))
        }
    };
    Ok(planes_from_rgb(h, w, &rgb))
}

/// Binary (P6) PPM, maxval 255.
pub fn save_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (h, w, rgb) = rgb_bytes(img)?;
    let file = File::create(path).map_err(|e| TensorError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let write = |r: std::io::Result<()>| r.map_err(|e| TensorError::io(path.display().to_string(), e));
    write(out.write_all(format!("P6\n{w} {h}\n255\n").as_bytes()))?;
    write(out.write_all(&rgb))
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TensorError::io(path.display().to_string(), e))?;
    let bad = |msg: &str| TensorError::io(path.display().to_string(), msg);

    // Header: magic, width, height, maxval — whitespace separated, with
    // comment lines allowed.
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(&bytes).ok_or_else(|| bad("truncated header"))?;
    if magic != "P6" {
        return Err(bad(&format!("expected P6, got {magic}")));
    }
    let w: usize = next_token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad width"))?;
    let h: usize = next_token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad height"))?;
    let maxval: usize = next_token(&bytes)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates header and pixel data.
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok(planes_from_rgb(h, w, &bytes[pos..pos + need]))
}

/// Load by extension: `.png`, `.ppm`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_png(path),
        Some("ppm") => load_ppm(path),
        _ => Err(TensorError::io(
            path.display().to_string(),
            "unsupported image extension (expected .png or .ppm)",
        )),
    }
}
