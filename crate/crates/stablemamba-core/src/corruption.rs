//! Evaluation-time corruptions with graded severities: Gaussian blur and
//! JPEG-style compression, plus the accuracy-vs-severity sweep.

use crate::jpeg::{jpeg_roundtrip, reflect_index, JpegOptions};
use crate::parallel::par_map;
use crate::tensor::{Result, Tensor, TensorError};

/// Blur σ per severity 1..=5 (reference corruption-benchmark constants).
pub const BLUR_SIGMA: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 6.0];
/// JPEG quality per severity 1..=5 (reference corruption-benchmark constants).
pub const JPEG_QUALITY: [u8; 5] = [25, 18, 15, 10, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionKind {
    GaussianBlur,
    Jpeg,
}

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Jpeg => "jpeg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" | "blur" => Ok(CorruptionKind::GaussianBlur),
            "jpeg" => Ok(CorruptionKind::Jpeg),
            other => Err(TensorError::Invalid {
                op: "CorruptionKind::parse",
                msg: format!("unknown corruption kind {other:?}"),
            }),
        }
    }

    /// The underlying knob value at a severity, as printed in sweep CSVs
    /// (empty at severity 0, the identity).
    pub fn param_string(self, severity: u8) -> String {
        if severity == 0 {
            return String::new();
        }
        match self {
            CorruptionKind::GaussianBlur => format!("{}", BLUR_SIGMA[severity as usize - 1]),
            CorruptionKind::Jpeg => format!("{}", JPEG_QUALITY[severity as usize - 1]),
        }
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if severity > 5 {
        return Err(TensorError::Invalid {
            op: "apply_corruption",
            msg: format!("severity {severity} outside 0..=5"),
        });
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps over radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur on `[C,H,W]` with edge-repeating reflection at
/// the borders. All accumulation in 64-bit for platform-stable output.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let s = img.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(TensorError::Invalid {
                op: "gaussian_blur",
                msg: format!("expected [C,H,W], got {s:?}"),
            })
        }
    };
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let plane = h * w;
    let mut mid = vec![0.0f64; c * plane];
    let d = img.data();
    // Horizontal pass.
    for ch in 0..c {
        for y in 0..h {
            let row = ch * plane + y * w;
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in k.iter().enumerate() {
                    let xx = reflect_index(x as isize + ki as isize - radius, w);
                    acc += kv * f64::from(d[row + xx]);
                }
                mid[row + x] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; c * plane];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in k.iter().enumerate() {
                    let yy = reflect_index(y as isize + ki as isize - radius, h);
                    acc += kv * mid[ch * plane + yy * w + x];
                }
                out[ch * plane + y * w + x] = acc as f32;
            }
        }
    }
    Ok(Tensor::new(&[c, h, w], out))
}

/// Apply a corruption at a severity. Severity 0 returns the input bit-exact.
pub fn apply_corruption(
    img: &Tensor<f32>,
    kind: CorruptionKind,
    severity: u8,
) -> Result<Tensor<f32>> {
    check_severity(severity)?;
    if severity == 0 {
        return Ok(img.clone());
    }
    match kind {
        CorruptionKind::GaussianBlur => gaussian_blur(img, BLUR_SIGMA[severity as usize - 1]),
        CorruptionKind::Jpeg => {
            jpeg_roundtrip(img, JpegOptions::new(JPEG_QUALITY[severity as usize - 1]))
        }
    }
}

/// One row of an accuracy-vs-severity curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub severity: u8,
    pub accuracy: f64,
    pub n_correct: usize,
    pub n_total: usize,
    /// Underlying σ or quality; empty at severity 0.
    pub param: String,
}

/// Classify every image under every severity of `kind`; classification may
/// run across threads, counts are aggregated in index order.
pub fn severity_sweep<F>(
    images: &[Tensor<f32>],
    labels: &[usize],
    kind: CorruptionKind,
    classify: F,
) -> Result<Vec<SweepRow>>
where
    F: Fn(&Tensor<f32>) -> usize + Sync,
{
    if images.len() != labels.len() || images.is_empty() {
        return Err(TensorError::Invalid {
            op: "severity_sweep",
            msg: format!("{} images vs {} labels", images.len(), labels.len()),
        });
    }
    let mut rows = Vec::with_capacity(6);
    for severity in 0..=5u8 {
        let preds = par_map(images, |img| {
            let corrupted = apply_corruption(img, kind, severity).expect("valid severity");
            classify(&corrupted)
        });
        let n_correct = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        rows.push(SweepRow {
            severity,
            accuracy: n_correct as f64 / images.len() as f64,
            n_correct,
            n_total: images.len(),
            param: kind.param_string(severity),
        });
    }
    Ok(rows)
}

/// Render sweep rows as CSV: `severity,accuracy,n_correct,n_total,param`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("severity,accuracy,n_correct,n_total,param\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{},{},{}\n",
            r.severity, r.accuracy, r.n_correct, r.n_total, r.param
        ));
    }
    out
}

/// Deterministic smooth-plus-texture test image: color gradients, sine
/// texture, and a sharp-edged disc — enough frequency content for
/// compression quality to degrade monotonically with severity.
pub fn procedural_test_image(h: usize, w: usize) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * h * w];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / h as f64;
            let fx = x as f64 / w as f64;
            let dy = fy - 0.55;
            let dx = fx - 0.45;
            let disc = if (dx * dx + dy * dy).sqrt() < 0.22 { 0.35 } else { 0.0 };
            let tex = 0.12 * (24.0 * fx).sin() * (19.0 * fy).cos();
            let r = 0.25 + 0.5 * fx + tex + disc;
            let g = 0.3 + 0.4 * fy - 0.5 * tex + 0.5 * disc;
            let b = 0.55 - 0.3 * fx + 0.2 * (31.0 * (fx + fy)).sin();
            data[y * w + x] = r.clamp(0.0, 1.0) as f32;
            data[plane + y * w + x] = g.clamp(0.0, 1.0) as f32;
            data[2 * plane + y * w + x] = b.clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jpeg::psnr;

    #[test]
    fn severity_zero_is_bit_exact_identity() {
        let img = procedural_test_image(24, 28);
        for kind in [CorruptionKind::GaussianBlur, CorruptionKind::Jpeg] {
            let out = apply_corruption(&img, kind, 0).unwrap();
            assert_eq!(out.data(), img.data());
        }
    }

    #[test]
    fn severity_out_of_range_is_rejected() {
        let img = procedural_test_image(8, 8);
        assert!(apply_corruption(&img, CorruptionKind::Jpeg, 6).is_err());
    }

    #[test]
    fn blur_kernel_sums_to_one() {
        for sigma in BLUR_SIGMA {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            let s: f64 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "sigma {sigma}: sum {s}");
        }
    }

    #[test]
    fn blur_impulse_response_sums_to_one() {
        let mut img = Tensor::<f32>::zeros(&[1, 31, 31]);
        img.data_mut()[15 * 31 + 15] = 1.0;
        let out = gaussian_blur(&img, 2.0).unwrap();
        let s: f64 = out.data().iter().map(|&v| f64::from(v)).sum();
        assert!((s - 1.0).abs() < 1e-6, "impulse mass {s}");
        // Peak stays at the center.
        let peak = out
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 15 * 31 + 15);
    }

    #[test]
    fn blur_leaves_constant_image_unchanged() {
        let img = Tensor::<f32>::full(&[3, 20, 20], 0.42);
        let out = gaussian_blur(&img, 3.0).unwrap();
        let err = img.max_abs_diff(&out);
        assert!(err < 1e-6, "constant image changed by {err}");
    }

    #[test]
    fn blur_preserves_mean() {
        let img = procedural_test_image(33, 41);
        let out = gaussian_blur(&img, 2.0).unwrap();
        let mean = |t: &Tensor<f32>| {
            t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / t.numel() as f64
        };
        assert!((mean(&img) - mean(&out)).abs() < 1e-5);
    }

    #[test]
    fn blur_severity_strictly_smooths() {
        // Higher σ keeps less high-frequency energy: PSNR against the clean
        // image decreases strictly over severities.
        let img = procedural_test_image(48, 48);
        let mut last = f64::INFINITY;
        for sev in 1..=5u8 {
            let out = apply_corruption(&img, CorruptionKind::GaussianBlur, sev).unwrap();
            let db = psnr(&img, &out);
            assert!(db < last, "severity {sev}: psnr {db} not below {last}");
            last = db;
        }
    }

    #[test]
    fn jpeg_psnr_strictly_decreases_over_severities() {
        let img = procedural_test_image(64, 64);
        let mut last = f64::INFINITY;
        for sev in 1..=5u8 {
            let out = apply_corruption(&img, CorruptionKind::Jpeg, sev).unwrap();
            let db = psnr(&img, &out);
            assert!(db < last, "severity {sev}: psnr {db} not below {last}");
            last = db;
        }
    }

    #[test]
    fn corruptions_are_deterministic() {
        let img = procedural_test_image(32, 32);
        for kind in [CorruptionKind::GaussianBlur, CorruptionKind::Jpeg] {
            let a = apply_corruption(&img, kind, 3).unwrap();
            let b = apply_corruption(&img, kind, 3).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn sweep_counts_and_csv_format() {
        // Classifier keyed on mean brightness: blur barely moves the mean,
        // so rows stay populated and severity 0 matches clean evaluation.
        let images: Vec<Tensor<f32>> = (0..8)
            .map(|i| Tensor::full(&[3, 16, 16], 0.1 + 0.1 * i as f32))
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| usize::from(i >= 4)).collect();
        let classify = |img: &Tensor<f32>| -> usize {
            let m: f32 = img.data().iter().sum::<f32>() / img.numel() as f32;
            usize::from(m > 0.45)
        };
        let rows =
            severity_sweep(&images, &labels, CorruptionKind::GaussianBlur, classify).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].severity, 0);
        assert_eq!(rows[0].n_total, 8);
        assert_eq!(rows[0].n_correct, 8);
        assert_eq!(rows[0].param, "");
        assert_eq!(rows[3].param, "3");
        let csv = sweep_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "severity,accuracy,n_correct,n_total,param");
        assert_eq!(lines.next().unwrap(), "0,1.000000,8,8,");
    }

    #[test]
    fn sweep_param_column_reports_quality() {
        let images = vec![procedural_test_image(16, 16)];
        let labels = vec![0usize];
        let rows = severity_sweep(&images, &labels, CorruptionKind::Jpeg, |_| 0).unwrap();
        let params: Vec<&str> = rows.iter().map(|r| r.param.as_str()).collect();
        assert_eq!(params, ["", "25", "18", "15", "10", "7"]);
    }
}
