//! JPEG-style compression round-trip implemented from scratch.
//!
//! The full pipeline on float images in [0,1]: 8-bit quantization, BT.601
//! full-range YCbCr conversion, optional 2×2 chroma subsampling, reflect
//! padding to block multiples, orthonormal 8×8 DCT-II, quantization with the
//! standard luminance/chrominance tables scaled by a quality factor,
//! dequantization, inverse DCT, upsampling and conversion back. No entropy
//! coding — only the lossy stages matter for corruption behavior, and an own
//! implementation keeps severity behavior bit-reproducible across platforms.

use crate::tensor::{Result, Tensor, TensorError};

/// Standard luminance quantization table (row-major 8×8).
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance quantization table (row-major 8×8).
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JpegOptions {
    /// Quality 1..=100, scaling the base tables per the common library rule.
    pub quality: u8,
    /// 2×2 chroma subsampling (4:2:0) when true; full-resolution chroma
    /// (4:4:4) otherwise.
    pub chroma_420: bool,
}

impl JpegOptions {
    pub fn new(quality: u8) -> Self {
        JpegOptions {
            quality,
            chroma_420: true,
        }
    }
}

/// Scale a base table by quality: factor 5000/q below 50, else 200 − 2q;
/// each entry becomes clamp(⌊(base·factor + 50)/100⌋, 1, 255).
pub fn scaled_table(base: &[u16; 64], quality: u8) -> Result<[u16; 64]> {
    if quality == 0 || quality > 100 {
        return Err(TensorError::Invalid {
            op: "scaled_table",
            msg: format!("quality {quality} outside 1..=100"),
        });
    }
    let q = quality as u32;
    let factor = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * factor + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(out)
}

/// Orthonormal 8×8 DCT-II matrix, row-major.
pub fn dct_matrix() -> [f64; 64] {
    let mut m = [0.0; 64];
    for i in 0..8 {
        let scale = if i == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for j in 0..8 {
            m[i * 8 + j] = scale * ((2 * j + 1) as f64 * i as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

/// `C = M·B·Mᵀ` on one 8×8 block.
pub fn dct2_8x8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    mat8(&m, &mat8_t(block, &m))
}

/// `B = Mᵀ·C·M` on one 8×8 block.
pub fn idct2_8x8(coeffs: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    let mt = transpose8(&m);
    mat8(&mt, &mat8_t(coeffs, &mt))
}

fn transpose8(a: &[f64; 64]) -> [f64; 64] {
    let mut t = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            t[j * 8 + i] = a[i * 8 + j];
        }
    }
    t
}

fn mat8(a: &[f64; 64], b: &[f64; 64]) -> [f64; 64] {
    let mut c = [0.0; 64];
    for i in 0..8 {
        for k in 0..8 {
            let aik = a[i * 8 + k];
            for j in 0..8 {
                c[i * 8 + j] += aik * b[k * 8 + j];
            }
        }
    }
    c
}

/// `A·Bᵀ` for row-major 8×8.
fn mat8_t(a: &[f64; 64], b: &[f64; 64]) -> [f64; 64] {
    let mut c = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                s += a[i * 8 + k] * b[j * 8 + k];
            }
            c[i * 8 + j] = s;
        }
    }
    c
}

/// One plane in the 0..255 float domain, row-major.
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        // Half-sample symmetric reflection (edge repeats).
        let yy = reflect_index(y, self.h);
        let xx = reflect_index(x, self.w);
        self.data[yy * self.w + xx]
    }
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let mut i = i;
    // Period of the reflected signal is 2n; fold into it, then mirror.
    i = i.rem_euclid(2 * n);
    if i >= n {
        i = 2 * n - 1 - i;
    }
    i as usize
}

/// Pad to multiples of `m` by reflection.
fn pad_to_multiple(p: &Plane, m: usize) -> Plane {
    let h = p.h.div_ceil(m) * m;
    let w = p.w.div_ceil(m) * m;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = p.at(y as isize, x as isize);
        }
    }
    Plane { h, w, data }
}

/// DCT → quantize → dequantize → IDCT over all 8×8 blocks of a plane whose
/// dims are multiples of 8. Values are level-shifted by −128 around zero.
fn transform_plane(p: &mut Plane, table: &[u16; 64]) {
    let mut block = [0.0f64; 64];
    for by in (0..p.h).step_by(8) {
        for bx in (0..p.w).step_by(8) {
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = p.data[(by + y) * p.w + bx + x] - 128.0;
                }
            }
            let mut c = dct2_8x8(&block);
            for (v, &t) in c.iter_mut().zip(table) {
                let step = t as f64;
                *v = (*v / step).round() * step;
            }
            let back = idct2_8x8(&c);
            for y in 0..8 {
                for x in 0..8 {
                    p.data[(by + y) * p.w + bx + x] = back[y * 8 + x] + 128.0;
                }
            }
        }
    }
}

fn downsample_2x2(p: &Plane) -> Plane {
    let h = p.h.div_ceil(2);
    let w = p.w.div_ceil(2);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += p.at((2 * y + dy) as isize, (2 * x + dx) as isize);
                }
            }
            data[y * w + x] = s / 4.0;
        }
    }
    Plane { h, w, data }
}

/// Nearest-neighbor upsample back to `(h, w)`.
fn upsample_nearest(p: &Plane, h: usize, w: usize) -> Plane {
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = p.data[(y / 2).min(p.h - 1) * p.w + (x / 2).min(p.w - 1)];
        }
    }
    Plane { h, w, data }
}

/// Compress and decompress an RGB image `[3,H,W]` with values in [0,1].
/// The output is quantized to 8-bit levels, as a decoded image would be.
pub fn jpeg_roundtrip(img: &Tensor<f32>, opts: JpegOptions) -> Result<Tensor<f32>> {
    let s = img.shape();
    let (h, w) = match s {
        [3, h, w] => (*h, *w),
        _ => {
            return Err(TensorError::Invalid {
                op: "jpeg_roundtrip",
                msg: format!("expected [3,H,W], got {s:?}"),
            })
        }
    };
    let luma_q = scaled_table(&LUMA_TABLE, opts.quality)?;
    let chroma_q = scaled_table(&CHROMA_TABLE, opts.quality)?;

    // To 8-bit levels in the 0..255 float domain.
    let n = h * w;
    let to_255 = |v: f32| -> f64 { (f64::from(v) * 255.0).round().clamp(0.0, 255.0) };
    let mut y_p = Plane { h, w, data: vec![0.0; n] };
    let mut cb_p = Plane { h, w, data: vec![0.0; n] };
    let mut cr_p = Plane { h, w, data: vec![0.0; n] };
    let d = img.data();
    for i in 0..n {
        let r = to_255(d[i]);
        let g = to_255(d[n + i]);
        let b = to_255(d[2 * n + i]);
        y_p.data[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb_p.data[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
        cr_p.data[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
    }

    // Pad so the luma grid is a multiple of 16 — then subsampled chroma is a
    // multiple of 8 as well.
    let mut y_pad = pad_to_multiple(&y_p, 16);
    transform_plane(&mut y_pad, &luma_q);

    let chroma_pass = |plane: &Plane| -> Plane {
        if opts.chroma_420 {
            let padded = pad_to_multiple(plane, 16);
            let mut small = downsample_2x2(&padded);
            transform_plane(&mut small, &chroma_q);
            upsample_nearest(&small, h, w)
        } else {
            let mut padded = pad_to_multiple(plane, 16);
            transform_plane(&mut padded, &chroma_q);
            Plane {
                h,
                w,
                data: crop(&padded, h, w),
            }
        }
    };
    let cb_done = chroma_pass(&cb_p);
    let cr_done = chroma_pass(&cr_p);
    let y_done = Plane {
        h,
        w,
        data: crop(&y_pad, h, w),
    };

    let mut out = vec![0.0f32; 3 * n];
    for i in 0..n {
        let y = y_done.data[i];
        let cb = cb_done.data[i] - 128.0;
        let cr = cr_done.data[i] - 128.0;
        let r = y + 1.402 * cr;
        let g = y - 0.344136 * cb - 0.714136 * cr;
        let b = y + 1.772 * cb;
        out[i] = quantize_255(r);
        out[n + i] = quantize_255(g);
        out[2 * n + i] = quantize_255(b);
    }
    Ok(Tensor::new(&[3, h, w], out))
}

fn crop(p: &Plane, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&p.data[y * p.w..y * p.w + w]);
    }
    out
}

fn quantize_255(v: f64) -> f32 {
    (v.round().clamp(0.0, 255.0) / 255.0) as f32
}

/// Peak signal-to-noise ratio in dB between two same-shape images in [0,1].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "psnr shapes differ");
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn dct_matrix_is_orthonormal() {
        let m = dct_matrix();
        let mt = transpose8(&m);
        let prod = mat8(&m, &mt);
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 8 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dct_roundtrip_is_identity() {
        let mut r = ChaCha20Rng::seed_from_u64(60);
        let noise = Tensor::<f64>::rand_uniform(&[64], -100.0, 150.0, &mut r);
        let mut block = [0.0; 64];
        block.copy_from_slice(noise.data());
        let back = idct2_8x8(&dct2_8x8(&block));
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4, "dct roundtrip err {}", (a - b).abs());
        }
    }

    #[test]
    fn dct_constant_block_is_dc_only() {
        let block = [57.0; 64];
        let c = dct2_8x8(&block);
        assert!((c[0] - 8.0 * 57.0).abs() < 1e-10, "dc {}", c[0]);
        for (i, &v) in c.iter().enumerate().skip(1) {
            assert!(v.abs() < 1e-10, "ac coeff {i} = {v}");
        }
    }

    #[test]
    fn table_scaling_follows_quality_rule() {
        // q=50 keeps the base table; q=100 degenerates to all ones.
        assert_eq!(scaled_table(&LUMA_TABLE, 50).unwrap(), LUMA_TABLE);
        assert!(scaled_table(&LUMA_TABLE, 100).unwrap().iter().all(|&v| v == 1));
        // q=10 → factor 500: spot-check the first entry 16 → 80.
        assert_eq!(scaled_table(&LUMA_TABLE, 10).unwrap()[0], 80);
        assert!(scaled_table(&LUMA_TABLE, 0).is_err());
        assert!(scaled_table(&LUMA_TABLE, 101).is_err());
    }

    #[test]
    fn reflect_index_mirrors_with_edge_repeat() {
        assert_eq!(reflect_index(0, 5), 0);
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(4, 5), 4);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
    }

    #[test]
    fn uniform_midgray_roundtrips_at_every_quality() {
        // Constant blocks carry DC only; mid-gray sits at the level-shift
        // zero, so even the coarsest DC step leaves it fixed.
        let img = Tensor::<f32>::full(&[3, 24, 24], 0.5);
        for q in [7, 10, 15, 18, 25, 50, 90, 100] {
            let out = jpeg_roundtrip(&img, JpegOptions::new(q)).unwrap();
            let max_err = img.max_abs_diff(&out);
            assert!(
                max_err <= 2.0 / 255.0 + 1e-7,
                "quality {q}: max err {max_err}"
            );
        }
    }

    #[test]
    fn quality_100_full_chroma_is_near_lossless() {
        let mut r = ChaCha20Rng::seed_from_u64(61);
        let img = Tensor::<f32>::rand_uniform(&[3, 40, 56], 0.0, 1.0, &mut r);
        let out = jpeg_roundtrip(
            &img,
            JpegOptions {
                quality: 100,
                chroma_420: false,
            },
        )
        .unwrap();
        let db = psnr(&img, &out);
        assert!(db > 45.0, "psnr {db} dB");
    }

    #[test]
    fn roundtrip_handles_non_multiple_dims() {
        let mut r = ChaCha20Rng::seed_from_u64(62);
        let img = Tensor::<f32>::rand_uniform(&[3, 17, 29], 0.0, 1.0, &mut r);
        let out = jpeg_roundtrip(&img, JpegOptions::new(25)).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn roundtrip_is_deterministic() {
        let mut r = ChaCha20Rng::seed_from_u64(63);
        let img = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut r);
        let a = jpeg_roundtrip(&img, JpegOptions::new(10)).unwrap();
        let b = jpeg_roundtrip(&img, JpegOptions::new(10)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_bad_shapes() {
        let img = Tensor::<f32>::zeros(&[1, 8, 8]);
        assert!(jpeg_roundtrip(&img, JpegOptions::new(50)).is_err());
    }
}
