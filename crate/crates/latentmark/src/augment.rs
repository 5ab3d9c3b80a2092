//! Marking-time image transformations: random sampling, differentiable
//! application, and the adjoint (vector-Jacobian) backward pass.
//!
//! The transformation set holds identity, rotation, blur, crop and resize.
//! Parameters follow fixed distributions: the rotation angle is Von Mises
//! (μ = 0, κ = 1) divided by two, crop/resize area scales are uniform in
//! `[0.2, 1.0]`, the crop aspect ratio uniform in `[3/4, 4/3]`, the blur
//! kernel size uniform over the odd numbers 1..15 with `σ = 0.15·b + 0.35`,
//! and a horizontal flip with probability 1/2 composes on top of the
//! sampled kind.
//!
//! Every transform is linear in the pixel values (bilinear resampling and
//! convolution), so the backward pass is the exact adjoint of the forward
//! resampling. The final `[0, 1]` clamp is excluded from the adjoint
//! (straight-through); it is inert anyway for in-range inputs because all
//! resampling weights are convex.
//!
//! Geometry conventions: resampling uses half-pixel centers
//! (`src = (dst + 0.5)·scale − 0.5`), rotation is about the image center
//! with zero padding, blur uses reflected borders, and crop/resize scales
//! are **area** fractions (each edge scales by √s). Marking-time crops and
//! resizes are mapped back to the source resolution so the feature
//! extractor always sees a fixed-size image.

use rand::Rng;

use crate::error::{Error, Result};
use crate::imageio::{Image, PixelDelta, CHANNELS};

/// One transformation drawn from the marking distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSample {
    pub kind: TransformKind,
    pub hflip: bool,
}

impl TransformSample {
    pub fn identity() -> Self {
        TransformSample {
            kind: TransformKind::Identity,
            hflip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransformKind {
    Identity,
    /// Rotation about the image center, radians, zero-padded.
    Rotation { angle: f64 },
    /// Separable Gaussian blur with reflected borders.
    Blur { kernel_size: usize, sigma: f64 },
    /// Window of `scale`·area with the given aspect ratio at a fractional
    /// position, resized back to the source resolution.
    Crop {
        scale: f64,
        aspect: f64,
        pos_x: f64,
        pos_y: f64,
    },
    /// Bilinear downscale to `scale`·area, then upscale back.
    Resize { scale: f64 },
}

/// Which kinds a marking run samples from, and the flip probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSet {
    pub kinds: Vec<KindTag>,
    pub hflip_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindTag {
    Identity,
    Rotation,
    Blur,
    Crop,
    Resize,
}

impl Default for AugmentationSet {
    fn default() -> Self {
        AugmentationSet {
            kinds: vec![
                KindTag::Identity,
                KindTag::Rotation,
                KindTag::Blur,
                KindTag::Crop,
                KindTag::Resize,
            ],
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationSet {
    /// No augmentation at all: identity kind, no flip.
    pub fn none() -> Self {
        AugmentationSet {
            kinds: vec![KindTag::Identity],
            hflip_prob: 0.0,
        }
    }

    /// Restrict to the given kinds (no flip unless requested separately).
    pub fn with_kinds(kinds: &[KindTag], hflip_prob: f64) -> Self {
        assert!(!kinds.is_empty(), "augmentation set cannot be empty");
        AugmentationSet {
            kinds: kinds.to_vec(),
            hflip_prob,
        }
    }

    /// Draw one transformation.
    pub fn sample(&self, rng: &mut impl Rng) -> TransformSample {
        let tag = self.kinds[rng.random_range(0..self.kinds.len())];
        let kind = match tag {
            KindTag::Identity => TransformKind::Identity,
            KindTag::Rotation => TransformKind::Rotation {
                angle: sample_von_mises(rng, 1.0) / 2.0,
            },
            KindTag::Blur => {
                let kernel_size = 2 * rng.random_range(0..8usize) + 1; // odd in [1, 15]
                TransformKind::Blur {
                    kernel_size,
                    sigma: 0.15 * kernel_size as f64 + 0.35,
                }
            }
            KindTag::Crop => TransformKind::Crop {
                scale: 0.2 + 0.8 * rng.random::<f64>(),
                aspect: 0.75 + (4.0 / 3.0 - 0.75) * rng.random::<f64>(),
                pos_x: rng.random(),
                pos_y: rng.random(),
            },
            KindTag::Resize => TransformKind::Resize {
                scale: 0.2 + 0.8 * rng.random::<f64>(),
            },
        };
        TransformSample {
            kind,
            hflip: rng.random::<f64>() < self.hflip_prob,
        }
    }
}

/// Draw one transformation from the full default distribution.
pub fn sample_transform(rng: &mut impl Rng) -> TransformSample {
    AugmentationSet::default().sample(rng)
}

/// Von Mises sampler with μ = 0 (Best–Fisher rejection scheme). Returns an
/// angle in `[−π, π]`.
pub fn sample_von_mises(rng: &mut impl Rng, kappa: f64) -> f64 {
    assert!(kappa > 0.0);
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let z = (std::f64::consts::PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let angle = f.clamp(-1.0, 1.0).acos();
            return if u3 < 0.5 { -angle } else { angle };
        }
    }
}

/// Apply a transformation. Output dimensions equal the input's and values
/// are clamped to `[0, 1]`.
pub fn apply_transform(img: &Image, t: &TransformSample) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let mut data = forward_linear(img.data(), h, w, &t.kind)?;
    if t.hflip {
        data = hflip(&data, h, w);
    }
    Ok(Image::from_raw_clamped(h, w, data))
}

/// Adjoint of [`apply_transform`] at `img`: returns `Jᵀ·cotangent`. The
/// transforms are linear in the pixels, so `img` only fixes the geometry;
/// the `[0, 1]` clamp is treated as the identity.
pub fn transform_vjp(img: &Image, t: &TransformSample, cotangent: &PixelDelta) -> Result<PixelDelta> {
    let (h, w) = (img.height(), img.width());
    if cotangent.height != h || cotangent.width != w {
        return Err(Error::ShapeMismatch(format!(
            "cotangent {}x{} vs image {}x{}",
            cotangent.height, cotangent.width, h, w
        )));
    }
    let cot = if t.hflip {
        hflip(&cotangent.data, h, w)
    } else {
        cotangent.data.clone()
    };
    let grad = adjoint_linear(&cot, h, w, &t.kind)?;
    Ok(PixelDelta::from_data(h, w, grad))
}

fn forward_linear(data: &[f64], h: usize, w: usize, kind: &TransformKind) -> Result<Vec<f64>> {
    match kind {
        TransformKind::Identity => Ok(data.to_vec()),
        TransformKind::Rotation { angle } => {
            let map = rotation_map(*angle, h, w);
            Ok(warp_forward(data, h, w, h, w, map))
        }
        TransformKind::Blur { kernel_size, sigma } => {
            let k = gaussian_kernel(*kernel_size, *sigma);
            let tmp = blur_axis_forward(data, h, w, &k, Axis::X);
            Ok(blur_axis_forward(&tmp, h, w, &k, Axis::Y))
        }
        TransformKind::Crop {
            scale,
            aspect,
            pos_x,
            pos_y,
        } => {
            let win = crop_window(h, w, *scale, *aspect, *pos_x, *pos_y)?;
            let map = crop_map(win, h, w);
            Ok(warp_forward(data, h, w, h, w, map))
        }
        TransformKind::Resize { scale } => {
            let (rh, rw) = resize_dims(h, w, *scale);
            let down = scale_map(h, w, rh, rw);
            let up = scale_map(rh, rw, h, w);
            let tmp = warp_forward(data, h, w, rh, rw, down);
            Ok(warp_forward(&tmp, rh, rw, h, w, up))
        }
    }
}

fn adjoint_linear(cot: &[f64], h: usize, w: usize, kind: &TransformKind) -> Result<Vec<f64>> {
    match kind {
        TransformKind::Identity => Ok(cot.to_vec()),
        TransformKind::Rotation { angle } => {
            let map = rotation_map(*angle, h, w);
            Ok(warp_adjoint(cot, h, w, h, w, map))
        }
        TransformKind::Blur { kernel_size, sigma } => {
            let k = gaussian_kernel(*kernel_size, *sigma);
            let tmp = blur_axis_adjoint(cot, h, w, &k, Axis::Y);
            Ok(blur_axis_adjoint(&tmp, h, w, &k, Axis::X))
        }
        TransformKind::Crop {
            scale,
            aspect,
            pos_x,
            pos_y,
        } => {
            let win = crop_window(h, w, *scale, *aspect, *pos_x, *pos_y)?;
            let map = crop_map(win, h, w);
            Ok(warp_adjoint(cot, h, w, h, w, map))
        }
        TransformKind::Resize { scale } => {
            let (rh, rw) = resize_dims(h, w, *scale);
            let down = scale_map(h, w, rh, rw);
            let up = scale_map(rh, rw, h, w);
            let tmp = warp_adjoint(cot, h, w, rh, rw, up);
            Ok(warp_adjoint(&tmp, rh, rw, h, w, down))
        }
    }
}

// ---- geometry ----

/// Inverse map of a rotation about the image center.
fn rotation_map(angle: f64, h: usize, w: usize) -> impl Fn(usize, usize) -> (f64, f64) {
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    move |oy, ox| {
        let dy = oy as f64 - cy;
        let dx = ox as f64 - cx;
        let sx = cx + cos * dx + sin * dy;
        let sy = cy - sin * dx + cos * dy;
        (sy, sx)
    }
}

/// Integer crop window: top-left corner and size.
#[derive(Debug, Clone, Copy)]
struct CropWindow {
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
}

fn crop_window(
    h: usize,
    w: usize,
    scale: f64,
    aspect: f64,
    pos_x: f64,
    pos_y: f64,
) -> Result<CropWindow> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Domain(format!("crop scale {scale} outside (0, 1]")));
    }
    let area = scale * (h * w) as f64;
    // keep the window inside the frame: the feasible aspect range at this
    // area is [scale·w/h · h²/.. ] — derived from cw ≤ w and ch ≤ h
    let lo = scale * w as f64 / h as f64;
    let hi = w as f64 / (scale * h as f64);
    let r = aspect.clamp(lo, hi);
    let cw_f = (area * r).sqrt();
    let ch_f = (area / r).sqrt();
    if cw_f < 0.5 || ch_f < 0.5 {
        return Err(Error::Domain(format!(
            "degenerate crop window {cw_f:.3}x{ch_f:.3} px"
        )));
    }
    let cw = (cw_f.round() as usize).clamp(1, w);
    let ch = (ch_f.round() as usize).clamp(1, h);
    let x0 = (pos_x.clamp(0.0, 1.0) * (w - cw) as f64).round() as usize;
    let y0 = (pos_y.clamp(0.0, 1.0) * (h - ch) as f64).round() as usize;
    Ok(CropWindow { y0, x0, ch, cw })
}

/// Map for reading a crop window resized back to (`oh`, `ow`).
fn crop_map(win: CropWindow, oh: usize, ow: usize) -> impl Fn(usize, usize) -> (f64, f64) {
    let sy_scale = win.ch as f64 / oh as f64;
    let sx_scale = win.cw as f64 / ow as f64;
    let (y0, x0) = (win.y0 as f64, win.x0 as f64);
    move |oy, ox| {
        let sy = y0 + (oy as f64 + 0.5) * sy_scale - 0.5;
        let sx = x0 + (ox as f64 + 0.5) * sx_scale - 0.5;
        (sy, sx)
    }
}

/// Map for a plain bilinear resize from (`ih`, `iw`) to (`oh`, `ow`).
fn scale_map(ih: usize, iw: usize, oh: usize, ow: usize) -> impl Fn(usize, usize) -> (f64, f64) {
    let sy_scale = ih as f64 / oh as f64;
    let sx_scale = iw as f64 / ow as f64;
    move |oy, ox| {
        (
            (oy as f64 + 0.5) * sy_scale - 0.5,
            (ox as f64 + 0.5) * sx_scale - 0.5,
        )
    }
}

/// Edge lengths after an area-fraction resize.
fn resize_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let edge = scale.max(0.0).sqrt();
    (
        ((h as f64 * edge).round() as usize).max(1),
        ((w as f64 * edge).round() as usize).max(1),
    )
}

// ---- resampling kernels ----

/// Enumerate the bilinear taps of source position (`sy`, `sx`) with zero
/// padding: out-of-frame taps are skipped.
#[inline]
fn bilinear_taps(sy: f64, sx: f64, ih: usize, iw: usize, mut f: impl FnMut(usize, usize, f64)) {
    let y_floor = sy.floor();
    let x_floor = sx.floor();
    let fy = sy - y_floor;
    let fx = sx - x_floor;
    let y0 = y_floor as i64;
    let x0 = x_floor as i64;
    for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1, fy)] {
        if wy == 0.0 || yy < 0 || yy >= ih as i64 {
            continue;
        }
        for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1, fx)] {
            if wx == 0.0 || xx < 0 || xx >= iw as i64 {
                continue;
            }
            f(yy as usize, xx as usize, wy * wx);
        }
    }
}

fn warp_forward(
    input: &[f64],
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    map: impl Fn(usize, usize) -> (f64, f64),
) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow * CHANNELS];
    for oy in 0..oh {
        for ox in 0..ow {
            let (sy, sx) = map(oy, ox);
            bilinear_taps(sy, sx, ih, iw, |ty, tx, wgt| {
                for c in 0..CHANNELS {
                    out[(c * oh + oy) * ow + ox] += wgt * input[(c * ih + ty) * iw + tx];
                }
            });
        }
    }
    out
}

/// Exact adjoint of [`warp_forward`] with the same `map`: scatters the
/// cotangent through the same taps.
fn warp_adjoint(
    cot: &[f64],
    oh: usize,
    ow: usize,
    ih: usize,
    iw: usize,
    map: impl Fn(usize, usize) -> (f64, f64),
) -> Vec<f64> {
    let mut grad = vec![0.0; ih * iw * CHANNELS];
    for oy in 0..oh {
        for ox in 0..ow {
            let (sy, sx) = map(oy, ox);
            bilinear_taps(sy, sx, ih, iw, |ty, tx, wgt| {
                for c in 0..CHANNELS {
                    grad[(c * ih + ty) * iw + tx] += wgt * cot[(c * oh + oy) * ow + ox];
                }
            });
        }
    }
    grad
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    assert!(size % 2 == 1, "kernel size must be odd");
    if size == 1 {
        return vec![1.0];
    }
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Reflect an index into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect(mut i: i64, n: i64) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

enum Axis {
    X,
    Y,
}

fn blur_axis_forward(input: &[f64], h: usize, w: usize, kernel: &[f64], axis: Axis) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; input.len()];
    for c in 0..CHANNELS {
        let plane = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &wgt) in kernel.iter().enumerate() {
                    let off = k as i64 - r;
                    let (sy, sx) = match axis {
                        Axis::X => (y, reflect(x as i64 + off, w as i64)),
                        Axis::Y => (reflect(y as i64 + off, h as i64), x),
                    };
                    acc += wgt * input[plane + sy * w + sx];
                }
                out[plane + y * w + x] = acc;
            }
        }
    }
    out
}

fn blur_axis_adjoint(cot: &[f64], h: usize, w: usize, kernel: &[f64], axis: Axis) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut grad = vec![0.0; cot.len()];
    for c in 0..CHANNELS {
        let plane = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let g = cot[plane + y * w + x];
                for (k, &wgt) in kernel.iter().enumerate() {
                    let off = k as i64 - r;
                    let (sy, sx) = match axis {
                        Axis::X => (y, reflect(x as i64 + off, w as i64)),
                        Axis::Y => (reflect(y as i64 + off, h as i64), x),
                    };
                    grad[plane + sy * w + sx] += wgt * g;
                }
            }
        }
    }
    grad
}

fn hflip(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for c in 0..CHANNELS {
        let plane = c * h * w;
        for y in 0..h {
            for x in 0..w {
                out[plane + y * w + x] = data[plane + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Image {
        let data: Vec<f64> = (0..h * w * CHANNELS).map(|_| rng.random()).collect();
        Image::new(h, w, data).unwrap()
    }

    fn random_delta(rng: &mut ChaCha12Rng, h: usize, w: usize) -> PixelDelta {
        PixelDelta::from_data(
            h,
            w,
            (0..h * w * CHANNELS).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    // 99th percentiles of the chi-square distribution
    const CHI2_99_DF4: f64 = 13.2767;
    const CHI2_99_DF7: f64 = 18.4753;
    const CHI2_99_DF9: f64 = 21.6660;
    const CHI2_99_DF11: f64 = 24.7250;

    #[test]
    fn fixed_seed_reproduces_the_sample_sequence() {
        let mut a = ChaCha12Rng::seed_from_u64(99);
        let mut b = ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            assert_eq!(sample_transform(&mut a), sample_transform(&mut b));
        }
    }

    #[test]
    fn kind_frequencies_are_uniform() {
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let t = sample_transform(&mut rng);
            let i = match t.kind {
                TransformKind::Identity => 0,
                TransformKind::Rotation { .. } => 1,
                TransformKind::Blur { .. } => 2,
                TransformKind::Crop { .. } => 3,
                TransformKind::Resize { .. } => 4,
            };
            counts[i] += 1;
        }
        let mut chi2 = 0.0;
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.2).abs() < 0.01, "kind frequency {freq}");
            let e = n as f64 / 5.0;
            chi2 += (c as f64 - e).powi(2) / e;
        }
        assert!(chi2 < CHI2_99_DF4, "chi2 = {chi2}");
    }

    #[test]
    fn rotation_angles_bounded_and_peaked_at_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let n = 100_000;
        let mut small = 0usize;
        let mut mid = 0usize;
        for _ in 0..n {
            let a = sample_von_mises(&mut rng, 1.0) / 2.0;
            assert!(a.abs() <= std::f64::consts::FRAC_PI_2 + 1e-12);
            if a.abs() <= std::f64::consts::PI / 8.0 {
                small += 1;
            } else if a.abs() <= std::f64::consts::PI / 4.0 {
                mid += 1;
            }
        }
        assert!(
            small > mid,
            "density should decrease away from zero: {small} vs {mid}"
        );
    }

    #[test]
    fn rotation_angles_match_von_mises_density() {
        // Numerically integrate the halved Von Mises density as the
        // expected bin mass, then chi-square against the sampler.
        let kappa = 1.0;
        let bins = 12;
        let n = 100_000;
        let lo = -std::f64::consts::FRAC_PI_2;
        let hi = std::f64::consts::FRAC_PI_2;

        // density of α = V/2 on [−π/2, π/2] is 2·f(2α) with f the VM pdf;
        // integrate the unnormalized pdf by Simpson's rule per bin
        let unnorm = |alpha: f64| (kappa * (2.0 * alpha).cos()).exp() * 2.0;
        let simpson = |a: f64, b: f64| {
            let m = 200;
            let hstep = (b - a) / m as f64;
            let mut s = unnorm(a) + unnorm(b);
            for i in 1..m {
                let x = a + i as f64 * hstep;
                s += if i % 2 == 1 { 4.0 } else { 2.0 } * unnorm(x);
            }
            s * hstep / 3.0
        };
        let total = simpson(lo, hi);
        let mut expected = Vec::with_capacity(bins);
        for b in 0..bins {
            let a0 = lo + (hi - lo) * b as f64 / bins as f64;
            let a1 = lo + (hi - lo) * (b + 1) as f64 / bins as f64;
            expected.push(simpson(a0, a1) / total * n as f64);
        }

        let mut rng = ChaCha12Rng::seed_from_u64(102);
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let a = sample_von_mises(&mut rng, kappa) / 2.0;
            let mut b = ((a - lo) / (hi - lo) * bins as f64) as usize;
            if b >= bins {
                b = bins - 1;
            }
            counts[b] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum();
        assert!(chi2 < CHI2_99_DF11, "chi2 = {chi2}");
    }

    #[test]
    fn blur_sizes_uniform_over_odd_values() {
        let mut rng = ChaCha12Rng::seed_from_u64(103);
        let set = AugmentationSet::with_kinds(&[KindTag::Blur], 0.0);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            match set.sample(&mut rng).kind {
                TransformKind::Blur { kernel_size, sigma } => {
                    assert!(kernel_size % 2 == 1 && (1..=15).contains(&kernel_size));
                    assert!((sigma - (0.15 * kernel_size as f64 + 0.35)).abs() < 1e-12);
                    counts[(kernel_size - 1) / 2] += 1;
                }
                other => panic!("unexpected kind {other:?}"),
            }
        }
        let e = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < CHI2_99_DF7, "chi2 = {chi2}");
    }

    #[test]
    fn crop_scale_uniform_on_its_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(104);
        let set = AugmentationSet::with_kinds(&[KindTag::Crop], 0.0);
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            match set.sample(&mut rng).kind {
                TransformKind::Crop { scale, aspect, .. } => {
                    assert!((0.2..=1.0).contains(&scale));
                    assert!((0.75..=4.0 / 3.0).contains(&aspect));
                    let b = (((scale - 0.2) / 0.8) * 10.0).min(9.999) as usize;
                    counts[b] += 1;
                }
                other => panic!("unexpected kind {other:?}"),
            }
        }
        let e = n as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < CHI2_99_DF9, "chi2 = {chi2}");
    }

    #[test]
    fn identity_without_flip_is_bit_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(105);
        let img = random_image(&mut rng, 20, 22);
        let out = apply_transform(&img, &TransformSample::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn hflip_twice_restores_the_image() {
        let mut rng = ChaCha12Rng::seed_from_u64(106);
        let img = random_image(&mut rng, 12, 17);
        let t = TransformSample {
            kind: TransformKind::Identity,
            hflip: true,
        };
        let once = apply_transform(&img, &t).unwrap();
        assert_ne!(once, img);
        let twice = apply_transform(&once, &t).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn quarter_turn_moves_a_lit_pixel_to_the_rotated_coordinate() {
        // On a square image, the inverse map at α = π/2 sends source (r, c)
        // to output (c, n−1−r).
        let n = 24;
        let (r, c) = (3usize, 5usize);
        let img = Image::from_fn(n, n, |_, y, x| if y == r && x == c { 1.0 } else { 0.0 });
        let t = TransformSample {
            kind: TransformKind::Rotation {
                angle: std::f64::consts::FRAC_PI_2,
            },
            hflip: false,
        };
        let out = apply_transform(&img, &t).unwrap();
        for ch in 0..CHANNELS {
            for y in 0..n {
                for x in 0..n {
                    let expected = if y == c && x == n - 1 - r { 1.0 } else { 0.0 };
                    let got = out.get(ch, y, x);
                    assert!(
                        (got - expected).abs() < 1e-6,
                        "pixel ({y},{x}) = {got}, expected {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let mut rng = ChaCha12Rng::seed_from_u64(107);
        let img = random_image(&mut rng, 20, 20);
        for _ in 0..50 {
            let t = sample_transform(&mut rng);
            let out = apply_transform(&img, &t).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{t:?}");
        }
    }

    #[test]
    fn identity_vjp_returns_the_cotangent() {
        let mut rng = ChaCha12Rng::seed_from_u64(108);
        let img = random_image(&mut rng, 10, 11);
        let cot = random_delta(&mut rng, 10, 11);
        let g = transform_vjp(&img, &TransformSample::identity(), &cot).unwrap();
        assert_eq!(g.data, cot.data);
    }

    #[test]
    fn adjoint_identity_holds_for_every_kind() {
        // ⟨T(u), v⟩ = ⟨u, Tᵀ(v)⟩ for random u, v
        let mut rng = ChaCha12Rng::seed_from_u64(109);
        let (h, w) = (21, 19);
        for trial in 0..100 {
            let t = sample_transform(&mut rng);
            let u = random_image(&mut rng, h, w);
            let v = random_delta(&mut rng, h, w);
            let fu = apply_transform(&u, &t).unwrap();
            let jtv = transform_vjp(&u, &t, &v).unwrap();
            let lhs = dot(fu.data(), &v.data);
            let rhs = dot(u.data(), &jtv.data);
            assert!(
                (lhs - rhs).abs() < 1e-8,
                "trial {trial} {t:?}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn blur_adjoint_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(110);
        let (h, w) = (15, 14);
        let img = Image::from_fn(h, w, |_, _, _| 0.3 + 0.4 * rng.random::<f64>());
        let t = TransformSample {
            kind: TransformKind::Blur {
                kernel_size: 7,
                sigma: 0.15 * 7.0 + 0.35,
            },
            hflip: false,
        };
        let cot = random_delta(&mut rng, h, w);
        let grad = transform_vjp(&img, &t, &cot).unwrap();

        let loss = |im: &Image| dot(apply_transform(im, &t).unwrap().data(), &cot.data);
        let step = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..img.data().len());
            let mut plus = img.data().to_vec();
            let mut minus = img.data().to_vec();
            plus[i] += step;
            minus[i] -= step;
            let fd = (loss(&Image::from_raw_clamped(h, w, plus))
                - loss(&Image::from_raw_clamped(h, w, minus)))
                / (2.0 * step);
            let rel = (grad.data[i] - fd).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-5, "sample {i}: analytic {} vs fd {fd}", grad.data[i]);
        }
    }

    #[test]
    fn degenerate_crop_window_errors() {
        let img = Image::splat(20, 20, 0.5);
        let t = TransformSample {
            kind: TransformKind::Crop {
                scale: 1e-6,
                aspect: 1.0,
                pos_x: 0.5,
                pos_y: 0.5,
            },
            hflip: false,
        };
        assert!(matches!(apply_transform(&img, &t), Err(Error::Domain(_))));
    }
}
