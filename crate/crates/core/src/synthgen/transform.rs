//! Geometric transformation and the noise stack.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{GrayImage, TransformRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Elastic {
    pub alpha: f64,
    pub sigma: f64,
    pub probability: f64,
}

/// A noise op applied with `probability`, at a magnitude drawn uniformly
/// from `[0, magnitude]` (or `[-magnitude, magnitude]` for brightness).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseOp {
    pub probability: f64,
    pub magnitude: f64,
}

impl NoiseOp {
    fn off() -> Self {
        Self {
            probability: 0.0,
            magnitude: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformSpec {
    /// Rotation is drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Isotropic scale range; aspect ratio is always preserved.
    pub scale: [f64; 2],
    pub elastic: Option<Elastic>,
    /// Additive gaussian noise; magnitude is the largest sigma.
    pub gaussian_noise: NoiseOp,
    /// 3×3 gaussian blur; magnitude unused.
    pub blur: NoiseOp,
    /// 3×3 box blur; magnitude unused.
    pub average_blur: NoiseOp,
    /// Unsharp masking amount.
    pub sharpen: NoiseOp,
    /// Additive brightness shift.
    pub brightness: NoiseOp,
}

impl Default for TransformSpec {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            scale: [1.0, 1.0],
            elastic: Some(Elastic {
                alpha: 2.0,
                sigma: 4.0,
                probability: 0.5,
            }),
            gaussian_noise: NoiseOp {
                probability: 0.5,
                magnitude: 0.05,
            },
            blur: NoiseOp {
                probability: 0.2,
                magnitude: 0.0,
            },
            average_blur: NoiseOp {
                probability: 0.1,
                magnitude: 0.0,
            },
            sharpen: NoiseOp {
                probability: 0.2,
                magnitude: 0.5,
            },
            brightness: NoiseOp {
                probability: 0.5,
                magnitude: 0.1,
            },
        }
    }
}

impl TransformSpec {
    /// Every stage turned off.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: [1.0, 1.0],
            elastic: None,
            gaussian_noise: NoiseOp::off(),
            blur: NoiseOp::off(),
            average_blur: NoiseOp::off(),
            sharpen: NoiseOp::off(),
            brightness: NoiseOp::off(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("transform.{what} is out of range")));
        if !(0.0..=5.0).contains(&self.rotation_deg) {
            return bad("rotation_deg (must lie in [0, 5])");
        }
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return bad("scale");
        }
        if let Some(e) = &self.elastic {
            if !(e.alpha >= 0.0 && e.sigma > 0.0 && (0.0..=1.0).contains(&e.probability)) {
                return bad("elastic");
            }
        }
        for (name, op) in [
            ("gaussian_noise", &self.gaussian_noise),
            ("blur", &self.blur),
            ("average_blur", &self.average_blur),
            ("sharpen", &self.sharpen),
            ("brightness", &self.brightness),
        ] {
            if !(0.0..=1.0).contains(&op.probability) || !(op.magnitude >= 0.0) {
                return bad(name);
            }
        }
        Ok(())
    }
}

/// Bilinear lookup with edge clamping.
fn sample_bilinear(img: &GrayImage, x: f64, y: f64) -> f64 {
    let max_x = (img.width - 1) as f64;
    let max_y = (img.height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
    let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotates by `degrees` and scales by `scale` about the image centre.
pub fn rotate_scale(img: &GrayImage, degrees: f64, scale: f64) -> GrayImage {
    let (cx, cy) = ((img.width as f64 - 1.0) / 2.0, (img.height as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            out.set(x, y, sample_bilinear(img, sx, sy));
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with edge clamping.
fn separable(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * data[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Displaces pixels by `alpha · G_sigma * U(-1, 1)`, a uniform noise field
/// smoothed by a gaussian of width `sigma`, independently along x and y.
pub fn elastic<R: Rng + ?Sized>(img: &GrayImage, alpha: f64, sigma: f64, rng: &mut R) -> GrayImage {
    let (w, h) = (img.width, img.height);
    let kernel = gaussian_kernel(sigma);
    let mut field = || {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let smooth = separable(&raw, w, h, &kernel);
        smooth.into_iter().map(|v| alpha * v).collect::<Vec<f64>>()
    };
    let (fx, fy) = (field(), field());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            out.set(x, y, sample_bilinear(img, x as f64 + fx[i], y as f64 + fy[i]));
        }
    }
    out
}

const GAUSS3: [f64; 3] = [0.25, 0.5, 0.25];
const BOX3: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

fn fires<R: Rng + ?Sized>(op: &NoiseOp, rng: &mut R) -> bool {
    op.probability > 0.0 && rng.gen_bool(op.probability.min(1.0))
}

/// Applies rotation, scale, optional elastic distortion and the enabled noise
/// ops, in that order. Output is clamped to `[0, 1]`.
pub fn transform_and_noise<R: Rng + ?Sized>(
    image: &GrayImage,
    t: &TransformSpec,
    rng: &mut R,
) -> (GrayImage, TransformRecord) {
    let mut rec = TransformRecord {
        scale: 1.0,
        ..TransformRecord::default()
    };
    let mut img = image.clone();
    if t.rotation_deg > 0.0 {
        rec.rotation_deg = rng.gen_range(-t.rotation_deg..=t.rotation_deg);
    }
    if t.scale[1] > t.scale[0] {
        rec.scale = rng.gen_range(t.scale[0]..=t.scale[1]);
    } else {
        rec.scale = t.scale[0];
    }
    if rec.rotation_deg != 0.0 || rec.scale != 1.0 {
        img = rotate_scale(&img, rec.rotation_deg, rec.scale);
    }
    if let Some(e) = &t.elastic {
        if e.probability > 0.0 && e.alpha > 0.0 && rng.gen_bool(e.probability.min(1.0)) {
            img = elastic(&img, e.alpha, e.sigma, rng);
            rec.elastic = true;
        }
    }
    let (w, h) = (img.width, img.height);
    if fires(&t.blur, rng) {
        img.data = separable(&img.data, w, h, &GAUSS3);
        rec.blur = Some("gaussian".into());
    } else if fires(&t.average_blur, rng) {
        img.data = separable(&img.data, w, h, &BOX3);
        rec.blur = Some("average".into());
    }
    if fires(&t.sharpen, rng) {
        let amount = rng.gen_range(0.0..=t.sharpen.magnitude);
        let soft = separable(&img.data, w, h, &BOX3);
        for (v, s) in img.data.iter_mut().zip(soft) {
            *v += amount * (*v - s);
        }
        rec.sharpen = Some(amount);
    }
    if fires(&t.brightness, rng) {
        let delta = rng.gen_range(-t.brightness.magnitude..=t.brightness.magnitude);
        img.data.iter_mut().for_each(|v| *v += delta);
        rec.brightness = Some(delta);
    }
    if fires(&t.gaussian_noise, rng) {
        let sigma = rng.gen_range(0.0..=t.gaussian_noise.magnitude);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive sigma");
            img.data.iter_mut().for_each(|v| *v += normal.sample(rng));
        }
        rec.gaussian_sigma = Some(sigma);
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (img, rec)
}
