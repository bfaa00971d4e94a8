//! Image quality metrics (PSNR, SSIM), the input-gradient activation
//! map, and CSV report emission.
//!
//! PSNR and SSIM run on RGB floats in [0, 1] without quantization or
//! border shaving by default. Since parts of the SR literature measure
//! on the luma channel with shaved borders instead, both knobs exist
//! (`MetricSpace`, `shave`) and every report row records which setting
//! produced it.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::generator::{forward_2x_t, forward_4x_t, GeneratorParams};
use crate::image::ImageTensor;
use crate::losses::{reconstruction_loss_t, LossConfig};
use crate::params::Binder;
use crate::tensor::Tensor;

/// PSNR sentinel used in reports when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSpace {
    Rgb,
    /// BT.601 luma of the RGB image.
    Y,
}

impl MetricSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricSpace::Rgb => "rgb",
            MetricSpace::Y => "y",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(MetricSpace::Rgb),
            "y" => Ok(MetricSpace::Y),
            other => Err(Error::Config(format!(
                "unknown metric space '{}' (expected rgb|y)",
                other
            ))),
        }
    }
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Geometry(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; +inf when the images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let n = a.tensor().numel() as f64;
    let mse: f64 = a
        .tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR with the +inf sentinel replaced by the 100 dB table cap.
pub fn psnr_capped(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    Ok(psnr(a, b, peak)?.min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        total += *wi;
    }
    for wi in &mut w {
        *wi /= total;
    }
    w
}

/// Separable valid-mode Gaussian filtering of one channel plane.
fn gauss_filter_plane(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                acc += wt * plane[(y + t) * w + x];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                acc += wt * tmp[y * w + x + t];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local structural similarity over valid 11x11 Gaussian windows,
/// computed per channel and averaged. Peak value 1.0.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Geometry(format!(
            "image {}x{} smaller than the {}px SSIM window",
            h, w, SSIM_WINDOW
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut channel_means = Vec::with_capacity(c);
    for ch in 0..c {
        let plane_a: Vec<f64> = (0..h * w).map(|i| a.tensor().data()[i * c + ch]).collect();
        let plane_b: Vec<f64> = (0..h * w).map(|i| b.tensor().data()[i * c + ch]).collect();
        let aa: Vec<f64> = plane_a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = plane_b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = plane_a.iter().zip(&plane_b).map(|(x, y)| x * y).collect();
        let mu_a = gauss_filter_plane(&plane_a, h, w);
        let mu_b = gauss_filter_plane(&plane_b, h, w);
        let e_aa = gauss_filter_plane(&aa, h, w);
        let e_bb = gauss_filter_plane(&bb, h, w);
        let e_ab = gauss_filter_plane(&ab, h, w);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            acc += num / den;
        }
        channel_means.push(acc / mu_a.len() as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / c as f64)
}

/// BT.601 luma (digital range) of an RGB image, in [0, 1].
pub fn to_luma(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::Geometry(format!(
            "luma conversion expects RGB, got {} channels",
            img.channels()
        )));
    }
    Ok(ImageTensor::from_fn(img.height(), img.width(), 1, |y, x, _| {
        let (r, g, b) = (img.pixel(y, x, 0), img.pixel(y, x, 1), img.pixel(y, x, 2));
        (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    }))
}

/// Drop `n` pixels from every border.
pub fn shave_border(img: &ImageTensor, n: usize) -> Result<ImageTensor> {
    if 2 * n >= img.height() || 2 * n >= img.width() {
        return Err(Error::Geometry(format!(
            "cannot shave {}px from a {}x{} image",
            n,
            img.height(),
            img.width()
        )));
    }
    Ok(img.crop(n, n, img.height() - 2 * n, img.width() - 2 * n))
}

/// Min-max normalize a map to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Tensor) -> Tensor {
    let min = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - min) / (max - min))
}

/// Input-gradient activation map: the gradient of the reconstruction
/// cost between the reference and the generated image, taken at the
/// low-resolution input, reduced over channels by max |.| and min-max
/// normalized to [0, 1]. Shape `[h, w]` of the input.
pub fn visual_activation_map(
    gen: &GeneratorParams,
    x_r: &ImageTensor,
    y_r: &ImageTensor,
    loss_cfg: &LossConfig,
    scale: usize,
) -> Result<Tensor> {
    let (h, w) = (x_r.height(), x_r.width());
    if !matches!(scale, 2 | 4) {
        return Err(Error::Config(format!("scale must be 2 or 4, got {}", scale)));
    }
    if y_r.height() != scale * h || y_r.width() != scale * w {
        return Err(Error::Geometry(format!(
            "reference {}x{} is not {}x the input {}x{}",
            y_r.height(),
            y_r.width(),
            scale,
            h,
            w
        )));
    }
    if h % (2 * gen.k) != 0 || w % (2 * gen.k) != 0 {
        return Err(Error::Geometry(format!(
            "input {}x{} must be divisible by 2k = {}",
            h,
            w,
            2 * gen.k
        )));
    }
    let mut tape = Tape::new();
    let x = tape.param(x_r.tensor().clone());
    let vars = gen.bind(&mut tape, &mut Binder::Frozen);
    let (y_s, x_up) = match scale {
        2 => {
            let y = forward_2x_t(&mut tape, &vars, x, h, w, None);
            let up = tape.bilinear(x, 2 * h, 2 * w);
            (y, up)
        }
        _ => {
            let y = forward_4x_t(&mut tape, &vars, x, h, w, None);
            let up2 = tape.bilinear(x, 2 * h, 2 * w);
            let up4 = tape.bilinear(up2, 4 * h, 4 * w);
            (y, up4)
        }
    };
    let y_ref = tape.constant(y_r.tensor().clone());
    let loss = reconstruction_loss_t(&mut tape, y_ref, y_s, x_up, loss_cfg);
    let grads = tape.backward(loss);
    let g = grads
        .get(x)
        .ok_or_else(|| Error::Numeric("no gradient reached the input image".into()))?;
    let mut map = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for xx in 0..w {
            let mut m = 0.0f64;
            for c in 0..3 {
                m = m.max(g.data()[(y * w + xx) * 3 + c].abs());
            }
            map.data_mut()[y * w + xx] = m;
        }
    }
    Ok(min_max_normalize(&map))
}

/// One evaluation report row.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub image_id: String,
    pub scale: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub metric_space: MetricSpace,
    pub shave: usize,
}

/// Per-image rows plus the dataset-mean row for (reference, candidate)
/// pairs, honoring the metric space and border shave settings.
pub fn metric_rows(
    pairs: &[(String, ImageTensor, ImageTensor)],
    scale: usize,
    space: MetricSpace,
    shave: usize,
) -> Result<Vec<MetricRow>> {
    if pairs.is_empty() {
        return Err(Error::Data("no image pairs to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len() + 1);
    let (mut psnr_acc, mut ssim_acc) = (0.0, 0.0);
    for (id, reference, candidate) in pairs {
        let (mut a, mut b) = (reference.clone(), candidate.clone());
        if shave > 0 {
            a = shave_border(&a, shave)?;
            b = shave_border(&b, shave)?;
        }
        if space == MetricSpace::Y {
            a = to_luma(&a)?;
            b = to_luma(&b)?;
        }
        let p = psnr_capped(&b, &a, 1.0)?;
        let s = ssim(&b, &a)?;
        psnr_acc += p;
        ssim_acc += s;
        rows.push(MetricRow {
            image_id: id.clone(),
            scale,
            psnr_db: p,
            ssim: s,
            metric_space: space,
            shave,
        });
    }
    let n = pairs.len() as f64;
    rows.push(MetricRow {
        image_id: "mean".to_string(),
        scale,
        psnr_db: psnr_acc / n,
        ssim: ssim_acc / n,
        metric_space: space,
        shave,
    });
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write rows as CSV with a header line.
pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "image_id,scale,psnr_db,ssim,metric_space,shave")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9},{:.9},{},{}",
            csv_field(&r.image_id),
            r.scale,
            r.psnr_db,
            r.ssim,
            r.metric_space.as_str(),
            r.shave
        )?;
    }
    Ok(())
}
