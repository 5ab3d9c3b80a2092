//! Imperceptibility constraints: SSIM heatmap attenuation followed by a
//! PSNR clamp.
//!
//! The embedding loop keeps its pixel perturbation admissible by projecting
//! it at the top of every iteration:
//!
//! 1. the perturbation is scaled pixel-wise by the SSIM heatmap of the
//!    current image against the original (normalized to `[0, 1]` by its
//!    maximum), which concentrates the watermark energy in textured areas
//!    where it is least visible;
//! 2. if the resulting PSNR falls short of the target, the perturbation is
//!    rescaled by the unique scalar that lands exactly on the target;
//! 3. the perturbed image is clamped back into `[0, 1]`.
//!
//! SSIM maps use a sliding 17×17 uniform window with `C1 = 0.01²`,
//! `C2 = 0.03²`, per channel, summed across channels and clamped at zero.
//! The valid interior map is replicated outward to full resolution.

use crate::error::{Error, Result};
use crate::imageio::{mse_raw, psnr_from_mse, Image, PixelDelta, CHANNELS};

/// SSIM window side length.
pub const SSIM_WINDOW: usize = 17;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// A per-pixel non-negative weight map, same spatial shape as its source
/// image (single map per image; channels are already summed).
#[derive(Debug, Clone)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }
}

/// Local SSIM heatmap of `img` against `original`: per-channel sliding
/// 17×17 maps, summed across channels and clamped at zero.
pub fn ssim_heatmap(img: &Image, original: &Image) -> Result<Heatmap> {
    if img.height() != original.height() || img.width() != original.width() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            img.height(),
            img.width(),
            original.height(),
            original.width()
        )));
    }
    let data = ssim_heatmap_raw(img.data(), original.data(), img.height(), img.width())?;
    Ok(Heatmap {
        height: img.height(),
        width: img.width(),
        data,
    })
}

/// Heatmap over raw planar buffers (the embedding loop evaluates it on
/// not-yet-clamped images).
pub(crate) fn ssim_heatmap_raw(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::UndersizedImage(format!(
            "{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut full = vec![0.0; h * w];
    let vh = h - (SSIM_WINDOW - 1);
    let vw = w - (SSIM_WINDOW - 1);
    let mut valid = vec![0.0; vh * vw];
    for c in 0..CHANNELS {
        let pa = &a[c * h * w..(c + 1) * h * w];
        let pb = &b[c * h * w..(c + 1) * h * w];
        accumulate_channel_ssim(pa, pb, h, w, &mut valid);
    }
    for v in &mut valid {
        *v = v.max(0.0);
    }
    // replicate the valid interior outward: pixel (y, x) takes the value of
    // the window centered at the clamped interior position
    let r = SSIM_WINDOW / 2;
    for y in 0..h {
        let vy = y.clamp(r, h - 1 - r) - r;
        for x in 0..w {
            let vx = x.clamp(r, w - 1 - r) - r;
            full[y * w + x] = valid[vy * vw + vx];
        }
    }
    Ok(full)
}

/// Add one channel's sliding-window SSIM to `out` (length `vh·vw`).
fn accumulate_channel_ssim(a: &[f64], b: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let sa = integral(a, h, w);
    let sb = integral(b, h, w);
    let saa = integral_of(|i| a[i] * a[i], h, w);
    let sbb = integral_of(|i| b[i] * b[i], h, w);
    let sab = integral_of(|i| a[i] * b[i], h, w);

    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let vh = h - (SSIM_WINDOW - 1);
    let vw = w - (SSIM_WINDOW - 1);
    for ty in 0..vh {
        for tx in 0..vw {
            let mu_a = window_sum(&sa, w, ty, tx) / n;
            let mu_b = window_sum(&sb, w, ty, tx) / n;
            let var_a = window_sum(&saa, w, ty, tx) / n - mu_a * mu_a;
            let var_b = window_sum(&sbb, w, ty, tx) / n - mu_b * mu_b;
            let cov = window_sum(&sab, w, ty, tx) / n - mu_a * mu_b;
            let ssim = ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2))
                / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2));
            out[ty * vw + tx] += ssim;
        }
    }
}

/// Summed-area table with a zero top row and left column.
fn integral(vals: &[f64], h: usize, w: usize) -> Vec<f64> {
    integral_of(|i| vals[i], h, w)
}

fn integral_of(f: impl Fn(usize) -> f64, h: usize, w: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut s = vec![0.0; (h + 1) * stride];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y * w + x);
            s[(y + 1) * stride + x + 1] = s[y * stride + x + 1] + row;
        }
    }
    s
}

#[inline]
fn window_sum(s: &[f64], w: usize, ty: usize, tx: usize) -> f64 {
    let stride = w + 1;
    let (y1, x1) = (ty + SSIM_WINDOW, tx + SSIM_WINDOW);
    s[y1 * stride + x1] - s[ty * stride + x1] - s[y1 * stride + tx] + s[ty * stride + tx]
}

/// Project a perturbation onto the admissible set around `original`:
/// heatmap attenuation, then minimum-PSNR rescale, then `[0, 1]` clamping
/// of the perturbed image. A zero perturbation passes through unchanged.
pub fn apply_constraints(delta: &PixelDelta, original: &Image, target_psnr: f64) -> PixelDelta {
    assert!(target_psnr.is_finite(), "target PSNR must be finite");
    let (h, w) = (original.height(), original.width());
    assert_eq!(delta.height, h, "delta/image shape mismatch");
    assert_eq!(delta.width, w, "delta/image shape mismatch");

    // step 1: attenuate by the normalized SSIM heatmap of the current image
    let current: Vec<f64> = original
        .data()
        .iter()
        .zip(&delta.data)
        .map(|(o, d)| o + d)
        .collect();
    let heat = ssim_heatmap_raw(&current, original.data(), h, w)
        .expect("image sizes are checked at embed entry");
    let peak = heat.iter().cloned().fold(0.0, f64::max);
    let mut out = delta.data.clone();
    if peak > 0.0 {
        for c in 0..CHANNELS {
            for (i, &hv) in heat.iter().enumerate() {
                out[c * h * w + i] *= hv / peak;
            }
        }
    }

    // step 2: enforce the minimum PSNR with an exact global rescale
    let perturbed: Vec<f64> = original
        .data()
        .iter()
        .zip(&out)
        .map(|(o, d)| o + d)
        .collect();
    let p = psnr_from_mse(mse_raw(&perturbed, original.data()));
    if p < target_psnr {
        let factor = 10.0_f64.powf((p - target_psnr) / 20.0);
        for v in &mut out {
            *v *= factor;
        }
    }

    // step 3: keep the perturbed image inside [0, 1]
    for (i, v) in out.iter_mut().enumerate() {
        let o = original.data()[i];
        *v = (o + *v).clamp(0.0, 1.0) - o;
    }
    PixelDelta::from_data(h, w, out)
}
