//! Image-quality metrics for images with values in `[0, 1]`.

use crate::raster::Image;
use crate::{Error, Result};

/// Reported PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Config(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `-10 log10(MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.data
        .chunks(img.channels)
        .map(|px| px.iter().sum::<f64>() / img.channels as f64)
        .collect()
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filtering over all fully contained windows.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| k[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of the channel-averaged images over all 11x11 Gaussian
/// windows (sigma 1.5). Images smaller than the window use the largest odd
/// window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width, a.height);
    if w == 0 || h == 0 {
        return Err(Error::Config("SSIM of an empty image".into()));
    }
    let mut size = SSIM_WINDOW.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian(size);
    let (ga, gb) = (grayscale(a), grayscale(b));
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, ow, oh) = filter_valid(&ga, w, h, &k);
    let (mu_b, _, _) = filter_valid(&gb, w, h, &k);
    let (aa, _, _) = filter_valid(&prod(&ga, &ga), w, h, &k);
    let (bb, _, _) = filter_valid(&prod(&gb, &gb), w, h, &k);
    let (ab, _, _) = filter_valid(&prod(&ga, &gb), w, h, &k);
    let mut total = 0.0;
    for i in 0..ow * oh {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / (ow * oh) as f64)
}
