//! Paired RGB-D view augmentation.
//!
//! Geometry (resized crop, horizontal flip) is shared by both modalities of a
//! view; color jitter and grayscale touch RGB only; gaussian blur applies to
//! both. RGB is resampled bilinearly, depth with nearest neighbour so no
//! depth values are invented across object boundaries by the resize.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{unit_depth, DepthImage, PairSample, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    /// Network input `[height, width]`.
    pub output_size: [usize; 2],
    /// Fraction of the source area kept by the random crop.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio range (width / height, relative to the source).
    pub crop_ratio: [f64; 2],
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub flip_prob: f64,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            output_size: [64, 64],
            crop_scale: [0.4, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            flip_prob: 0.5,
        }
    }
}

impl TransformSpec {
    /// Resize-only: every stochastic branch disabled and the crop fixed to
    /// the full frame.
    pub fn identity(output_size: [usize; 2]) -> Self {
        Self {
            output_size,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.jitter_prob, self.grayscale_prob, self.blur_prob, self.flip_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augment: probabilities must lie in [0,1]".into()));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] > 0.0;
        if !ordered(self.crop_scale) || self.crop_scale[1] > 1.0 || !ordered(self.crop_ratio) {
            return Err(Error::Config("augment: crop ranges must be ordered and positive, scale ≤ 1".into()));
        }
        if !ordered(self.blur_sigma) {
            return Err(Error::Config("augment: blur sigma range must be ordered and positive".into()));
        }
        if self.output_size.contains(&0) {
            return Err(Error::Config("augment: output size must be positive".into()));
        }
        if self.brightness < 0.0 || self.contrast < 0.0 || self.saturation < 0.0 || !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config("augment: jitter strengths out of range".into()));
        }
        Ok(())
    }
}

/// Crop window in fractions of the source frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl CropWindow {
    pub const FULL: CropWindow = CropWindow {
        x: 0.0,
        y: 0.0,
        width: 1.0,
        height: 1.0,
    };
}

/// Geometry shared by the RGB and depth channels of one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub crop: CropWindow,
    pub flip: bool,
    pub output_size: [usize; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// A fully resolved draw from a [`TransformSpec`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub geometry: Geometry,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

impl Transform {
    pub fn identity(output_size: [usize; 2]) -> Self {
        Self {
            geometry: Geometry {
                crop: CropWindow::FULL,
                flip: false,
                output_size,
            },
            jitter: None,
            grayscale: false,
            blur_sigma: None,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    // draw unconditionally so the stream position is independent of `p`
    let u: f64 = rng.gen();
    u < p
}

pub fn sample_transform<R: Rng + ?Sized>(spec: &TransformSpec, rng: &mut R) -> Transform {
    let mut crop = CropWindow::FULL;
    for _ in 0..10 {
        let area = uniform(rng, spec.crop_scale);
        let log_ratio = uniform(rng, [spec.crop_ratio[0].ln(), spec.crop_ratio[1].ln()]);
        let ratio = log_ratio.exp();
        let w = (area * ratio).sqrt();
        let h = (area / ratio).sqrt();
        if w <= 1.0 && h <= 1.0 {
            let x = uniform(rng, [0.0, 1.0 - w]);
            let y = uniform(rng, [0.0, 1.0 - h]);
            crop = CropWindow {
                x,
                y,
                width: w,
                height: h,
            };
            break;
        }
    }
    let flip = bernoulli(rng, spec.flip_prob);
    let jitter_on = bernoulli(rng, spec.jitter_prob);
    let factor = |rng: &mut R, s: f64| uniform(rng, [(1.0 - s).max(0.0), 1.0 + s]);
    let jitter = Jitter {
        brightness: factor(rng, spec.brightness),
        contrast: factor(rng, spec.contrast),
        saturation: factor(rng, spec.saturation),
        hue: uniform(rng, [-spec.hue, spec.hue]),
    };
    let grayscale = bernoulli(rng, spec.grayscale_prob);
    let blur_on = bernoulli(rng, spec.blur_prob);
    let sigma = uniform(rng, spec.blur_sigma);
    Transform {
        geometry: Geometry {
            crop,
            flip,
            output_size: spec.output_size,
        },
        jitter: jitter_on.then_some(jitter),
        grayscale,
        blur_sigma: blur_on.then_some(sigma),
    }
}

/// One augmented view at network resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `[3,H,W]`, values in `[0,1]`.
    pub rgb: Tensor<f32>,
    /// `[1,H,W]`, unit-scaled depth.
    pub depth: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPair {
    pub view1: View,
    pub view2: View,
}

/// Source coordinate (in pixels, pixel centres at `i + 0.5`) sampled by
/// output pixel `o` along one axis.
#[inline]
fn source_coord(o: usize, start: f64, extent: f64, src_len: usize, out_len: usize) -> f64 {
    start * src_len as f64 + (o as f64 + 0.5) * extent * src_len as f64 / out_len as f64
}

/// Bilinear resample of planar data `[C,H,W]` through a crop window.
fn resample_bilinear(src: &[f64], c: usize, h: usize, w: usize, g: &Geometry) -> Vec<f64> {
    let [oh, ow] = g.output_size;
    let mut out = vec![0.0; c * oh * ow];
    let axis = |o: usize, start: f64, extent: f64, len: usize, olen: usize| {
        let s = (source_coord(o, start, extent, len, olen) - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..ow).map(|o| axis(o, g.crop.x, g.crop.width, w, ow)).collect();
    let ys: Vec<_> = (0..oh).map(|o| axis(o, g.crop.y, g.crop.height, h, oh)).collect();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn resample_nearest(src: &[f64], h: usize, w: usize, g: &Geometry) -> Vec<f64> {
    let [oh, ow] = g.output_size;
    let pick = |o: usize, start: f64, extent: f64, len: usize, olen: usize| {
        (source_coord(o, start, extent, len, olen).floor().max(0.0) as usize).min(len - 1)
    };
    let xs: Vec<usize> = (0..ow).map(|o| pick(o, g.crop.x, g.crop.width, w, ow)).collect();
    let ys: Vec<usize> = (0..oh).map(|o| pick(o, g.crop.y, g.crop.height, h, oh)).collect();
    let mut out = vec![0.0; oh * ow];
    for (oy, &sy) in ys.iter().enumerate() {
        for (ox, &sx) in xs.iter().enumerate() {
            out[oy * ow + ox] = src[sy * w + sx];
        }
    }
    out
}

fn flip_horizontal(data: &mut [f64], planes: usize, h: usize, w: usize) {
    for row in data[..planes * h * w].chunks_mut(w) {
        row.reverse();
    }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn apply_jitter(rgb: &mut [f64], plane: usize, j: &Jitter) {
    let clamp = |v: &mut f64| *v = v.clamp(0.0, 1.0);
    for v in rgb.iter_mut() {
        *v *= j.brightness;
        clamp(v);
    }
    let mean = (0..plane).map(|i| gray(rgb[i], rgb[plane + i], rgb[2 * plane + i])).sum::<f64>() / plane as f64;
    for v in rgb.iter_mut() {
        *v = (*v - mean) * j.contrast + mean;
        clamp(v);
    }
    for i in 0..plane {
        let g = gray(rgb[i], rgb[plane + i], rgb[2 * plane + i]);
        for c in 0..3 {
            let v = &mut rgb[c * plane + i];
            *v = (*v - g) * j.saturation + g;
            clamp(v);
        }
    }
    if j.hue != 0.0 {
        for i in 0..plane {
            let (h, s, v) = rgb_to_hsv(rgb[i], rgb[plane + i], rgb[2 * plane + i]);
            let (r, g, b) = hsv_to_rgb(h + j.hue, s, v);
            rgb[i] = r;
            rgb[plane + i] = g;
            rgb[2 * plane + i] = b;
        }
    }
}

fn apply_grayscale(rgb: &mut [f64], plane: usize) {
    for i in 0..plane {
        let g = gray(rgb[i], rgb[plane + i], rgb[2 * plane + i]);
        for c in 0..3 {
            rgb[c * plane + i] = g;
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable gaussian blur with replicated borders.
fn blur(data: &mut [f64], planes: usize, h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for p in 0..planes {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let sx = (x as isize + ki as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let sy = (y as isize + ki as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

/// Applies `t` to one RGB-D frame.
pub fn apply(t: &Transform, rgb: &RgbImage, depth: &DepthImage) -> Result<View> {
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(Error::Dataset("augment: rgb and depth sizes differ".into()));
    }
    let c = &t.geometry.crop;
    assert!(
        c.x >= 0.0 && c.y >= 0.0 && c.width > 0.0 && c.height > 0.0 && c.x + c.width <= 1.0 + 1e-9 && c.y + c.height <= 1.0 + 1e-9,
        "crop window outside the image: {c:?}"
    );
    let (h, w) = (rgb.height, rgb.width);
    let [oh, ow] = t.geometry.output_size;
    let plane = h * w;
    let mut src = vec![0.0; 3 * plane];
    for (i, px) in rgb.data.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            src[ch * plane + i] = px[ch] as f64 / 255.0;
        }
    }
    let mut out_rgb = resample_bilinear(&src, 3, h, w, &t.geometry);
    let dsrc: Vec<f64> = depth.data.iter().map(|&d| unit_depth(d)).collect();
    let mut out_depth = resample_nearest(&dsrc, h, w, &t.geometry);
    if t.geometry.flip {
        flip_horizontal(&mut out_rgb, 3, oh, ow);
        flip_horizontal(&mut out_depth, 1, oh, ow);
    }
    let oplane = oh * ow;
    if let Some(j) = &t.jitter {
        apply_jitter(&mut out_rgb, oplane, j);
    }
    if t.grayscale {
        apply_grayscale(&mut out_rgb, oplane);
    }
    if let Some(sigma) = t.blur_sigma {
        blur(&mut out_rgb, 3, oh, ow, sigma);
        blur(&mut out_depth, 1, oh, ow, sigma);
    }
    Ok(View {
        rgb: Tensor::from_vec(&[3, oh, ow], out_rgb.into_iter().map(|v| v as f32).collect()),
        depth: Tensor::from_vec(&[1, oh, ow], out_depth.into_iter().map(|v| v as f32).collect()),
    })
}

/// Samples independent transforms for the two frames of `pair`.
pub fn make_views<R: Rng + ?Sized>(pair: &PairSample<'_>, spec: &TransformSpec, rng: &mut R) -> Result<AugmentedPair> {
    let t1 = sample_transform(spec, rng);
    let t2 = sample_transform(spec, rng);
    Ok(AugmentedPair {
        view1: apply(&t1, &pair.view1.rgb, &pair.view1.depth)?,
        view2: apply(&t2, &pair.view2.rgb, &pair.view2.depth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::data::DEPTH_SCALE_MM as DEPTH_SCALE;

    fn gradient_frame(w: usize, h: usize) -> (RgbImage, DepthImage) {
        let mut rgb = RgbImage::new(w, h);
        let mut depth = DepthImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                rgb.put(x, y, [(x * 255 / (w - 1)) as u8, (y * 255 / (h - 1)) as u8, ((x + y) * 3 % 256) as u8]);
                depth.data[y * w + x] = (1000 + 37 * x + 101 * y) as u16;
            }
        }
        (rgb, depth)
    }

    #[test]
    fn identity_spec_gives_identity_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = sample_transform(&TransformSpec::identity([32, 32]), &mut rng);
        assert_eq!(t, Transform::identity([32, 32]));
    }

    #[test]
    fn forced_flip() {
        let spec = TransformSpec {
            flip_prob: 1.0,
            ..TransformSpec::identity([16, 16])
        };
        let t = sample_transform(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(t.geometry.flip);
    }

    #[test]
    fn fixed_seed_repeats() {
        let spec = TransformSpec::default();
        let a = sample_transform(&spec, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_transform(&spec, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn identity_at_native_size_reproduces_input() {
        let (rgb, depth) = gradient_frame(20, 12);
        let v = apply(&Transform::identity([12, 20]), &rgb, &depth).unwrap();
        for (a, b) in v.rgb.data().iter().zip(rgb.to_planar::<f32>().data()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(v.depth, depth.to_unit::<f32>());
    }

    #[test]
    fn flip_twice_is_identity() {
        let (rgb, depth) = gradient_frame(9, 7);
        let mut t = Transform::identity([7, 9]);
        t.geometry.flip = true;
        let once = apply(&t, &rgb, &depth).unwrap();
        let plane = once.rgb.data();
        let base = rgb.to_planar::<f32>();
        for y in 0..7 {
            for x in 0..9 {
                assert!((plane[y * 9 + x] - base.data()[y * 9 + (8 - x)]).abs() < 1e-6);
            }
        }
        let mut back = once.rgb.data().to_vec();
        for row in back.chunks_mut(9) {
            row.reverse();
        }
        assert!(back.iter().zip(base.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn photometric_ops_leave_depth_untouched() {
        let (rgb, depth) = gradient_frame(24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = TransformSpec {
            output_size: [16, 16],
            blur_prob: 0.0,
            ..TransformSpec::default()
        };
        for _ in 0..20 {
            let t = sample_transform(&spec, &mut rng);
            let reference = apply(&t, &rgb, &depth).unwrap();
            let mut varied = t;
            varied.jitter = Some(Jitter {
                brightness: 1.7,
                contrast: 0.3,
                saturation: 0.0,
                hue: 0.4,
            });
            varied.grayscale = !t.grayscale;
            let other = apply(&varied, &rgb, &depth).unwrap();
            assert_eq!(reference.depth, other.depth);
        }
    }

    /// Tent-kernel formulation of bilinear sampling, summed over every source pixel.
    fn tent_oracle(img: &RgbImage, crop: CropWindow, oh: usize, ow: usize) -> Vec<f64> {
        let (w, h) = (img.width, img.height);
        let mut out = vec![0.0; 3 * oh * ow];
        for c in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let u = (crop.x * w as f64 + (ox as f64 + 0.5) * crop.width * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let v = (crop.y * h as f64 + (oy as f64 + 0.5) * crop.height * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                    let mut acc = 0.0;
                    for sy in 0..h {
                        for sx in 0..w {
                            let k = (1.0 - (u - sx as f64).abs()).max(0.0) * (1.0 - (v - sy as f64).abs()).max(0.0);
                            acc += k * img.get(sx, sy)[c] as f64 / 255.0;
                        }
                    }
                    out[(c * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn bilinear_matches_tent_oracle() {
        let (rgb, depth) = gradient_frame(23, 17);
        let crop = CropWindow {
            x: 0.13,
            y: 0.21,
            width: 0.61,
            height: 0.7,
        };
        let mut t = Transform::identity([11, 14]);
        t.geometry.crop = crop;
        let v = apply(&t, &rgb, &depth).unwrap();
        let oracle = tent_oracle(&rgb, crop, 11, 14);
        let diff = v.rgb.data().iter().zip(&oracle).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{diff}");
    }

    #[test]
    fn geometry_is_shared_by_both_modalities() {
        // depth encodes the source column; red encodes it too, so a synchronized
        // crop/flip keeps the two within one source pixel of each other
        let (w, h) = (32, 32);
        let mut rgb = RgbImage::new(w, h);
        let mut depth = DepthImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                rgb.put(x, y, [(x * 8) as u8, 0, 0]);
                depth.data[y * w + x] = (x * 100) as u16;
            }
        }
        let spec = TransformSpec {
            output_size: [16, 16],
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..TransformSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = sample_transform(&spec, &mut rng);
            let v = apply(&t, &rgb, &depth).unwrap();
            for i in 0..256 {
                let col_rgb = v.rgb.data()[i] as f64 * 255.0 / 8.0;
                let col_depth = v.depth.data()[i] as f64 * DEPTH_SCALE / 100.0;
                assert!((col_rgb - col_depth).abs() <= 1.0 + 1e-4, "{col_rgb} vs {col_depth} under {t:?}");
            }
        }
    }

    #[test]
    fn identical_frames_and_identity_spec_give_identical_views() {
        let (rgb, depth) = gradient_frame(16, 16);
        let f = crate::data::Frame::new(rgb, depth, "s", 0).unwrap();
        let pair = PairSample { view1: &f, view2: &f };
        let views = make_views(&pair, &TransformSpec::identity([16, 16]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(views.view1, views.view2);
        let views = make_views(&pair, &TransformSpec::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_ne!(views.view1, views.view2);
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.1, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.9, 0.8, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = TransformSpec {
            flip_prob: 1.5,
            ..TransformSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(TransformSpec::default().validate().is_ok());
    }
}
