//! Image tensors, PNG/JPEG I/O, cropping, and the additive rain arithmetic.
//!
//! The additive model `O = B + R` is the backbone of the whole pipeline, so
//! the arithmetic here never clamps: `compose_rainy` and `extract_rain` are
//! exact mutual inverses. Clamping and quantization happen only at the save
//! boundary.

use crate::error::{Error, Result};
use ndarray::{Array3, Zip};
use rand::Rng;
use std::path::Path;

/// Channels-first float image: `(channels, height, width)`.
///
/// Displayable images live in the nominal `[0, 1]` range; rain layers and
/// unclamped composites may exceed it. Every element is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps an array, enforcing the type invariants: 1 or 3 channels,
    /// non-empty spatial extent, all elements finite.
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if !(c == 1 || c == 3) {
            return Err(Error::Dimension(format!(
                "expected 1 or 3 channels, got {c}"
            )));
        }
        if h < 1 || w < 1 {
            return Err(Error::Dimension(format!("empty image {h}x{w}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("image contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    /// Constant-valued image.
    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::from_array(Array3::from_elem((channels, height, width), value))
            .expect("constant image is always valid")
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::constant(channels, height, width, 0.0)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Per-element clamp to `[0, 1]`.
    pub fn clamped01(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Channel-mean grayscale (1-channel) version.
    pub fn to_gray(&self) -> ImageTensor {
        let (c, h, w) = self.data.dim();
        let mut out = Array3::<f32>::zeros((1, h, w));
        for ch in 0..c {
            Zip::from(out.index_axis_mut(ndarray::Axis(0), 0))
                .and(self.data.index_axis(ndarray::Axis(0), ch))
                .for_each(|o, &v| *o += v);
        }
        out.mapv_inplace(|v| v / c as f32);
        ImageTensor { data: out }
    }

    /// Replicates a 1-channel image across `channels`.
    pub fn broadcast_channels(&self, channels: usize) -> Result<ImageTensor> {
        if self.channels() != 1 {
            return Err(Error::Dimension(format!(
                "broadcast source must have 1 channel, got {}",
                self.channels()
            )));
        }
        let (_, h, w) = self.data.dim();
        let mut out = Array3::<f32>::zeros((channels, h, w));
        for ch in 0..channels {
            out.index_axis_mut(ndarray::Axis(0), ch)
                .assign(&self.data.index_axis(ndarray::Axis(0), 0));
        }
        ImageTensor::from_array(out)
    }
}

fn check_same_shape(a: &ImageTensor, b: &ImageTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `O = B + R`, element-wise and unclamped so the decomposition stays exact.
pub fn compose_rainy(background: &ImageTensor, rain: &ImageTensor) -> Result<ImageTensor> {
    check_same_shape(background, rain, "compose_rainy")?;
    ImageTensor::from_array(&background.data + &rain.data)
}

/// `R = O - B`, the exact inverse of [`compose_rainy`].
pub fn extract_rain(rainy: &ImageTensor, background: &ImageTensor) -> Result<ImageTensor> {
    check_same_shape(rainy, background, "extract_rain")?;
    ImageTensor::from_array(&rainy.data - &background.data)
}

/// Square crop at offsets drawn uniformly from the valid range.
pub fn random_crop(img: &ImageTensor, size: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    let (off_y, off_x) = draw_crop_offsets(img, size, rng)?;
    crop_at(img, size, size, off_y, off_x)
}

/// Draws the offsets used by [`random_crop`]; exposed so paired rainy/clean
/// samples can share one crop window.
pub fn draw_crop_offsets(
    img: &ImageTensor,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize)> {
    let (_, h, w) = img.shape();
    if h < size || w < size {
        return Err(Error::Size(format!(
            "image {h}x{w} smaller than crop {size}"
        )));
    }
    let off_y = rng.random_range(0..=h - size);
    let off_x = rng.random_range(0..=w - size);
    Ok((off_y, off_x))
}

/// Deterministic crop of `ch x cw` at a fixed offset.
pub fn crop_at(
    img: &ImageTensor,
    ch: usize,
    cw: usize,
    off_y: usize,
    off_x: usize,
) -> Result<ImageTensor> {
    let (_, h, w) = img.shape();
    if off_y + ch > h || off_x + cw > w {
        return Err(Error::Size(format!(
            "crop {ch}x{cw} at ({off_y},{off_x}) exceeds image {h}x{w}"
        )));
    }
    let view = img
        .data
        .slice(ndarray::s![.., off_y..off_y + ch, off_x..off_x + cw]);
    ImageTensor::from_array(view.to_owned())
}

/// Loads an 8-bit PNG or JPEG. Grayscale maps to 1 channel, RGB to 3;
/// values are scaled from `{0..255}` to `[0, 1]` by division by 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    use image::DynamicImage::*;
    let (channels, raw, h, w): (usize, Vec<u8>, usize, usize) = match img {
        ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (1, g.into_raw(), h, w)
        }
        ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            (3, rgb.into_raw(), h, w)
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "unsupported pixel layout {:?} (need 8-bit grayscale or RGB, no alpha)",
                    other.color()
                ),
            })
        }
    };
    // Interleaved HWC bytes -> planar CHW floats.
    let mut data = Array3::<f32>::zeros((channels, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c, y, x)] = f32::from(raw[(y * w + x) * channels + c]) / 255.0;
            }
        }
    }
    ImageTensor::from_array(data)
}

/// Quantizes one float to an 8-bit level: clamp then round, ties half up.
pub fn quantize_u8(v: f32) -> u8 {
    // f32::round rounds ties away from zero; after the clamp all values are
    // non-negative, so this is exactly ties-half-up.
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves as 8-bit PNG (grayscale or RGB), clamping to `[0, 1]` and rounding
/// ties half up. `load_image(save_image(x))` differs from `clamp(x)` by at
/// most 1/510 per element.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let (c, h, w) = img.shape();
    let mut raw = vec![0u8; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                raw[(y * w + x) * c + ch] = quantize_u8(img.data[(ch, y, x)]);
            }
        }
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &raw,
        w as u32,
        h as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Reflection-pads (border excluded, "reflect101") to `(h + pad_bottom, w + pad_right)`.
/// Used to make arbitrary sizes divisible by the network stride.
pub fn pad_reflect(img: &ImageTensor, pad_bottom: usize, pad_right: usize) -> Result<ImageTensor> {
    let (c, h, w) = img.shape();
    if pad_bottom >= h || pad_right >= w {
        return Err(Error::Size(format!(
            "reflection pad ({pad_bottom},{pad_right}) too large for {h}x{w}"
        )));
    }
    let mut out = Array3::<f32>::zeros((c, h + pad_bottom, w + pad_right));
    for ch in 0..c {
        for y in 0..h + pad_bottom {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for x in 0..w + pad_right {
                let sx = if x < w { x } else { 2 * w - 2 - x };
                out[(ch, y, x)] = img.data[(ch, sy, sx)];
            }
        }
    }
    ImageTensor::from_array(out)
}

/// Box-filter (area-average) resize to `(out_h, out_w)`. Exact block mean for
/// integer downscale factors; used for rain-layer feature extraction.
pub fn resize_area(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    let (c, h, w) = img.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Size("resize target must be non-empty".into()));
    }
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for ch in 0..c {
        for oy in 0..out_h {
            let y0 = (oy as f64 * sy).floor() as usize;
            let y1 = (((oy + 1) as f64 * sy).ceil() as usize).min(h).max(y0 + 1);
            for ox in 0..out_w {
                let x0 = (ox as f64 * sx).floor() as usize;
                let x1 = (((ox + 1) as f64 * sx).ceil() as usize).min(w).max(x0 + 1);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += f64::from(img.data[(ch, y, x)]);
                    }
                }
                out[(ch, oy, ox)] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
            }
        }
    }
    ImageTensor::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use ndarray::Array3;
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = rng_from_seed(seed);
        ImageTensor::from_array(Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>()))
            .unwrap()
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(ImageTensor::from_array(Array3::zeros((2, 4, 4))).is_err());
        assert!(ImageTensor::from_array(Array3::zeros((3, 0, 4))).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Array3::zeros((1, 2, 2));
        a[(0, 0, 0)] = f32::NAN;
        assert!(ImageTensor::from_array(a).is_err());
    }

    #[test]
    fn load_save_round_trip_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(3, 9, 7, 1);
        let path = dir.path().join("t.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        let clamped = img.clamped01();
        let max_err = clamped
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 510.0 + 1e-7, "round-trip err {max_err}");
    }

    #[test]
    fn white_and_black_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let white = ImageTensor::constant(3, 1, 1, 1.0);
        let p = dir.path().join("w.png");
        save_image(&white, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.data().iter().copied().collect::<Vec<_>>(), vec![1.0; 3]);

        let black = ImageTensor::constant(3, 1, 1, 0.0);
        save_image(&black, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gray_128_scales_exactly() {
        // 2x2 gray(128) PNG -> every element 128/255.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::save_buffer_with_format(
            &p,
            &[128u8; 4],
            2,
            2,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), (1, 2, 2));
        let expected = 128.0f32 / 255.0;
        assert!(img.data().iter().all(|&v| (v - expected).abs() < 1e-7));
    }

    #[test]
    fn rejects_16_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf: Vec<u8> = vec![0u8; 2 * 2 * 2];
        image::save_buffer_with_format(
            &p,
            &buf,
            2,
            2,
            image::ExtendedColorType::L16,
            image::ImageFormat::Png,
        )
        .unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/nope.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn quantization_ties_round_half_up() {
        assert_eq!(quantize_u8(0.5), 128); // 127.5 -> 128
        assert_eq!(quantize_u8(1.3), 255);
        assert_eq!(quantize_u8(-0.2), 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        save_image(&ImageTensor::constant(1, 2, 2, 0.5), &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back
            .data()
            .iter()
            .all(|&v| (v - 128.0 / 255.0).abs() < 1e-7));
    }

    #[test]
    fn compose_extract_are_inverse() {
        let b = random_image(3, 8, 8, 2);
        let o = random_image(3, 8, 8, 3);
        let r = extract_rain(&o, &b).unwrap();
        let o2 = compose_rainy(&b, &r).unwrap();
        let max_err = o
            .data()
            .iter()
            .zip(o2.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-6, "round trip err {max_err}");
    }

    #[test]
    fn compose_constants_and_no_clamp() {
        let b = ImageTensor::constant(3, 4, 4, 0.4);
        let r = ImageTensor::constant(3, 4, 4, 0.3);
        let o = compose_rainy(&b, &r).unwrap();
        assert!(o.data().iter().all(|&v| (v - 0.7).abs() < 1e-7));

        let b = ImageTensor::constant(3, 4, 4, 0.9);
        let r = ImageTensor::constant(3, 4, 4, 0.4);
        let o = compose_rainy(&b, &r).unwrap();
        assert!(o.data().iter().all(|&v| (v - 1.3).abs() < 1e-6));

        let z = ImageTensor::zeros(3, 4, 4);
        let o = compose_rainy(&b, &z).unwrap();
        assert_eq!(o.data(), b.data());
        let r0 = extract_rain(&b, &b).unwrap();
        assert!(r0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = ImageTensor::zeros(3, 4, 4);
        let b = ImageTensor::zeros(3, 5, 4);
        assert!(matches!(compose_rainy(&a, &b), Err(Error::Dimension(_))));
        assert!(matches!(extract_rain(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn crop_identity_and_determinism() {
        let img = random_image(3, 16, 16, 4);
        let mut rng = rng_from_seed(9);
        let c = random_crop(&img, 16, &mut rng).unwrap();
        assert_eq!(c.data(), img.data());

        let mut r1 = rng_from_seed(5);
        let mut r2 = rng_from_seed(5);
        let a = random_crop(&img, 8, &mut r1).unwrap();
        let b = random_crop(&img, 8, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn crop_too_small_errors() {
        let img = random_image(3, 8, 8, 4);
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            random_crop(&img, 9, &mut rng),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn crop_offsets_uniform_chi_square() {
        // 17x17 image, crop 16 -> 4 equally likely offsets; 10^4 draws must
        // land within 3 sigma of p = 0.25 each.
        let img = random_image(1, 17, 17, 4);
        let mut rng = rng_from_seed(123);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (oy, ox) = draw_crop_offsets(&img, 16, &mut rng).unwrap();
            counts[oy * 2 + ox] += 1;
        }
        let p = 0.25f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "offset count {c} deviates {dev:.1}");
        }
    }

    #[test]
    fn pad_reflect_shape_and_values() {
        let img = random_image(1, 3, 3, 8);
        let p = pad_reflect(&img, 2, 1).unwrap();
        assert_eq!(p.shape(), (1, 5, 4));
        // reflect101: row 3 mirrors row 1, row 4 mirrors row 0.
        assert_eq!(p.data()[(0, 3, 0)], img.data()[(0, 1, 0)]);
        assert_eq!(p.data()[(0, 4, 2)], img.data()[(0, 0, 2)]);
        assert_eq!(p.data()[(0, 1, 3)], img.data()[(0, 1, 1)]);
    }

    #[test]
    fn resize_area_block_mean() {
        let mut a = Array3::<f32>::zeros((1, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                a[(0, y, x)] = (y * 4 + x) as f32;
            }
        }
        let img = ImageTensor::from_array(a).unwrap();
        let r = resize_area(&img, 2, 2).unwrap();
        // top-left block {0,1,4,5} -> 2.5
        assert!((r.data()[(0, 0, 0)] - 2.5).abs() < 1e-6);
        assert!((r.data()[(0, 1, 1)] - 12.5).abs() < 1e-6);
    }

    #[test]
    fn gray_is_channel_mean() {
        let mut a = Array3::<f32>::zeros((3, 1, 1));
        a[(0, 0, 0)] = 0.3;
        a[(1, 0, 0)] = 0.6;
        a[(2, 0, 0)] = 0.9;
        let g = ImageTensor::from_array(a).unwrap().to_gray();
        assert!((g.data()[(0, 0, 0)] - 0.6).abs() < 1e-7);
    }
}
