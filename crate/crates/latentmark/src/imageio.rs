//! Image representation, lossless file I/O and fidelity metrics.
//!
//! # Format contract
//!
//! Pixels are stored **planar, channel-major**: `data[(c·H + y)·W + x]` with
//! `c ∈ {0,1,2}` (RGB), values in `[0, 1]`. Files are 8-bit: loading maps a
//! sample `v` to `v / 255`; saving quantizes with round-half-away-from-zero,
//! `clamp(round(v·255), 0, 255)`. PNG (8-bit RGB) and binary PPM (P6,
//! maxval 255) are supported; grayscale PNGs are replicated to three
//! channels at load. MSE and PSNR are reported on the 8-bit scale
//! (peak 255) regardless of the internal `[0, 1]` storage.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};

/// Channel count is fixed; color management is out of scope.
pub const CHANNELS: usize = 3;

/// An RGB image with real-valued samples in `[0, 1]`. Immutable after
/// construction, so it can be shared read-only across parallel workers.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Build from planar channel-major data; every value must be finite and
    /// inside `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch("empty image".into()));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}x{} = {} samples, got {}",
                height,
                width,
                CHANNELS,
                height * width * CHANNELS,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch(
                "pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Build from raw data, clamping every sample into `[0, 1]`.
    pub fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * CHANNELS);
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Constant-valued image.
    pub fn splat(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Image {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    /// Build pixel-by-pixel from `f(channel, y, x)`; values are clamped.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; height * width * CHANNELS];
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data[(c * height + y) * width + x] = f(c, y, x).clamp(0.0, 1.0);
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    /// Snap every sample onto the 8-bit grid `k/255`, the value it will hold
    /// after a save/load roundtrip.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Interleaved 8-bit RGB rows, as used by the file codecs.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0u8; h * w * CHANNELS];
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    out[(y * w + x) * CHANNELS + c] = quantize_u8(self.get(c, y, x));
                }
            }
        }
        out
    }

    /// Inverse of [`Image::to_u8_interleaved`].
    pub fn from_u8_interleaved(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bytes, got {}",
                height * width * CHANNELS,
                bytes.len()
            )));
        }
        let mut data = vec![0.0; height * width * CHANNELS];
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data[(c * height + y) * width + x] =
                        bytes[(y * width + x) * CHANNELS + c] as f64 / 255.0;
                }
            }
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }
}

/// Quantize one sample to a byte: round-half-away-from-zero, then clamp.
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// A pixel-wise perturbation. Same planar layout as [`Image`], values
/// unbounded in sign and magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDelta {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelDelta {
    pub fn zeros(height: usize, width: usize) -> Self {
        PixelDelta {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * CHANNELS);
        PixelDelta {
            height,
            width,
            data,
        }
    }

    /// `img − base`, the perturbation carrying `base` onto `img`.
    pub fn between(img: &Image, base: &Image) -> Result<Self> {
        check_same_shape(img, base)?;
        let data = img
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(PixelDelta {
            height: base.height,
            width: base.width,
            data,
        })
    }
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Mean squared error on the 8-bit scale: mean over all samples of
/// `(255·(a−b))²`. Zero iff the arrays are equal.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(mse_raw(a.data(), b.data()))
}

pub(crate) fn mse_raw(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = 255.0 * (x - y);
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// Peak signal-to-noise ratio in dB with peak 255. Identical images yield
/// the `+∞` sentinel.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(psnr_from_mse(mse_raw(a.data(), b.data())))
}

pub(crate) fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Load a PNG (8-bit RGB or grayscale) or binary PPM (P6) file.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{}: not a PNG or binary PPM file",
            path.display()
        )))
    }
}

/// Save as PNG or PPM according to the file extension.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => {
            let buf = image::RgbImage::from_raw(
                img.width as u32,
                img.height as u32,
                img.to_u8_interleaved(),
            )
            .expect("buffer dimensions are consistent");
            buf.save_with_format(path, ImageFormat::Png)
                .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))
        }
        "ppm" => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.to_u8_interleaved());
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        other => Err(Error::UnsupportedFormat(format!(
            "cannot write extension {other:?}, use .png or .ppm"
        ))),
    }
}

/// Dump a single-channel map as an 8-bit grayscale PNG (values clamped to
/// `[0, 1]`); used for heatmap debugging.
pub fn save_grayscale_png(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "expected {} values, got {}",
            height * width,
            values.len()
        )));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| quantize_u8(v.clamp(0.0, 1.0))).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer dimensions are consistent");
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let dyn_img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::UnsupportedFormat(format!("png decode: {e}")))?;
    match dyn_img {
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Image::from_u8_interleaved(h, w, rgb.as_raw())
        }
        DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let raw = gray.as_raw();
            Ok(Image::from_fn(h, w, |_, y, x| raw[y * w + x] as f64 / 255.0))
        }
        DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageRgba16(_)
        | DynamicImage::ImageLumaA16(_) => {
            Err(Error::UnsupportedFormat("unsupported bit depth".into()))
        }
        other => Err(Error::UnsupportedFormat(format!(
            "unsupported channel layout: {other:?}"
        ))),
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2; // past "P6"
    let mut next_token = |bytes: &[u8]| -> Result<u64> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::UnsupportedFormat("ppm: malformed header".into()));
        }
        std::str::from_utf8(&bytes[start..pos])
            .expect("digits are ASCII")
            .parse()
            .map_err(|_| Error::UnsupportedFormat("ppm: bad header number".into()))
    };

    let width = next_token(bytes)? as usize;
    let height = next_token(bytes)? as usize;
    let maxval = next_token(bytes)?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat("unsupported bit depth".into()));
    }
    // exactly one whitespace byte separates header and raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::UnsupportedFormat("ppm: malformed header".into()));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != height * width * CHANNELS {
        return Err(Error::UnsupportedFormat(format!(
            "ppm: expected {} raster bytes, got {}",
            height * width * CHANNELS,
            raster.len()
        )));
    }
    Image::from_u8_interleaved(height, width, raster)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(rng: &mut ChaCha12Rng, h: usize, w: usize) -> Image {
        let data: Vec<f64> = (0..h * w * CHANNELS).map(|_| rng.random()).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn ppm_load_scales_bytes_to_unit_interval() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[
            0, 128, 255, 10, 20, 30, //
            40, 50, 60, 70, 80, 90,
        ]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(1, 0, 0), 128.0 / 255.0);
        assert_eq!(img.get(2, 0, 0), 1.0);
        assert_eq!(img.get(0, 1, 1), 70.0 / 255.0);
    }

    #[test]
    fn ppm_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut bytes = b"P6\n5 4\n255\n".to_vec();
        bytes.extend((0..5 * 4 * 3).map(|_| rng.random::<u8>()));
        std::fs::write(&p, &bytes).unwrap();

        let img = load_image(&p).unwrap();
        let q = dir.path().join("copy.ppm");
        save_image(&img, &q).unwrap();
        assert_eq!(std::fs::read(&q).unwrap(), bytes);
    }

    #[test]
    fn png_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 9, 7);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf = image::ImageBuffer::<image::Rgb<u16>, _>::from_pixel(
            4,
            4,
            image::Rgb([1000u16, 2000, 3000]),
        );
        buf.save_with_format(&p, ImageFormat::Png).unwrap();
        match load_image(&p) {
            Err(Error::UnsupportedFormat(msg)) => {
                assert!(msg.contains("bit depth"), "message: {msg}")
            }
            other => panic!("expected bit-depth error, got {other:?}"),
        }
    }

    #[test]
    fn grayscale_png_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        let buf = image::GrayImage::from_fn(3, 3, |x, y| image::Luma([(x * 40 + y) as u8]));
        buf.save_with_format(&p, ImageFormat::Png).unwrap();
        let img = load_image(&p).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let v = img.get(0, y, x);
                assert_eq!(img.get(1, y, x), v);
                assert_eq!(img.get(2, y, x), v);
            }
        }
    }

    #[test]
    fn quantizer_rounds_half_away_and_clamps() {
        assert_eq!(quantize_u8(0.5), 128); // 127.5 rounds up
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(-0.001), 0); // clamp below
        assert_eq!(quantize_u8(1.5), 255); // clamp above
    }

    #[test]
    fn mse_of_identical_images_is_zero() {
        let img = Image::splat(4, 4, 0.25);
        assert_eq!(mse(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn mse_of_one_level_shift_is_one() {
        let a = Image::from_fn(4, 5, |c, y, x| ((c + y + x) % 200) as f64 / 255.0);
        let b = Image::new(
            4,
            5,
            a.data().iter().map(|v| v + 1.0 / 255.0).collect(),
        )
        .unwrap();
        let m = mse(&a, &b).unwrap();
        assert!((m - 1.0).abs() < 1e-9, "mse = {m}");
    }

    #[test]
    fn mse_matches_elementwise_reference_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let a = random_image(&mut rng, 8, 6);
        let b = random_image(&mut rng, 8, 6);
        // independent oracle: accumulate squared differences one by one
        let mut acc = 0.0;
        let mut n = 0usize;
        for c in 0..CHANNELS {
            for y in 0..8 {
                for x in 0..6 {
                    let d = 255.0 * (a.get(c, y, x) - b.get(c, y, x));
                    acc += d * d;
                    n += 1;
                }
            }
        }
        let expected = acc / n as f64;
        let got = mse(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn mse_shape_mismatch_errors() {
        let a = Image::splat(4, 4, 0.5);
        let b = Image::splat(4, 5, 0.5);
        assert!(mse(&a, &b).is_err());
    }

    #[test]
    fn psnr_of_one_level_shift() {
        let a = Image::from_fn(5, 5, |c, y, x| ((c * 31 + y * 7 + x) % 120) as f64 / 255.0);
        let b = Image::new(5, 5, a.data().iter().map(|v| v + 1.0 / 255.0).collect()).unwrap();
        let p = psnr(&a, &b).unwrap();
        let expected = 20.0 * 255.0_f64.log10(); // MSE = 1
        assert!((p - expected).abs() < 1e-6, "psnr = {p}, expected {expected}");
    }

    #[test]
    fn halving_the_delta_gains_six_db() {
        let base = Image::splat(6, 6, 0.5);
        let delta = 0.04;
        let b1 = Image::new(6, 6, base.data().iter().map(|v| v + delta).collect()).unwrap();
        let b2 = Image::new(6, 6, base.data().iter().map(|v| v + delta / 2.0).collect()).unwrap();
        let gain = psnr(&base, &b2).unwrap() - psnr(&base, &b1).unwrap();
        let expected = 20.0 * 2.0_f64.log10();
        assert!((gain - expected).abs() < 1e-9, "gain = {gain}");
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = Image::splat(4, 4, 0.7);
        assert!(psnr(&img, &img).unwrap().is_infinite());
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..20 {
            let a = random_image(&mut rng, 5, 7);
            let b = random_image(&mut rng, 5, 7);
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }

    #[test]
    fn quantize_dequantize_moves_samples_at_most_half_a_level() {
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let img = random_image(&mut rng, 10, 10);
        let q = img.quantized();
        for (a, b) in img.data().iter().zip(q.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12, "{a} vs {b}");
        }
    }
}
