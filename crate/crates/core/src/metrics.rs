//! Gram-matrix style loss and SSIM on `[channels, height, width]` images.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayView3, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Turns an image into one or more `[positions, dims]` feature matrices.
pub trait FeatureDescriptor {
    fn levels(&self, image: ArrayView3<f64>) -> Vec<Array2<f64>>;
}

/// Raw pixels plus seeded projections of non-overlapping square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDescriptor {
    pub raw: bool,
    pub patch: usize,
    pub dims: usize,
    pub seed: u64,
}

impl Default for PatchDescriptor {
    fn default() -> Self {
        PatchDescriptor { raw: true, patch: 4, dims: 16, seed: 0 }
    }
}

impl PatchDescriptor {
    pub fn raw_only() -> Self {
        PatchDescriptor { raw: true, patch: 0, dims: 0, seed: 0 }
    }

    fn projection(&self, input: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = 1.0 / (input as f64).sqrt();
        Array2::from_shape_fn((input, self.dims), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
    }
}

impl FeatureDescriptor for PatchDescriptor {
    fn levels(&self, image: ArrayView3<f64>) -> Vec<Array2<f64>> {
        let (c, h, w) = image.dim();
        let mut out = Vec::new();
        if self.raw {
            out.push(Array2::from_shape_fn((h * w, c), |(i, ch)| image[[ch, i / w, i % w]]));
        }
        let p = self.patch;
        if p > 0 && self.dims > 0 && h >= p && w >= p {
            let (ph, pw) = (h / p, w / p);
            let mut patches = Array2::zeros((ph * pw, c * p * p));
            for i in 0..ph * pw {
                let (r0, c0) = ((i / pw) * p, (i % pw) * p);
                let flat = image.slice(s![.., r0..r0 + p, c0..c0 + p]);
                for (j, v) in flat.iter().enumerate() {
                    patches[[i, j]] = *v;
                }
            }
            out.push(patches.dot(&self.projection(c * p * p)));
        }
        out
    }
}

/// `F^T F / n` for a `[n, d]` feature matrix.
pub fn gram(features: ArrayView2<f64>) -> Array2<f64> {
    let n = features.nrows().max(1) as f64;
    features.t().dot(&features) / n
}

/// Mean over descriptor levels of the mean squared Gram difference.
pub fn gram_loss(a: ArrayView3<f64>, b: ArrayView3<f64>, descriptor: &dyn FeatureDescriptor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (la, lb) = (descriptor.levels(a), descriptor.levels(b));
    if la.is_empty() {
        return Err(Error::Config("feature descriptor produced no levels".into()));
    }
    let mut total = 0.0;
    for (fa, fb) in la.iter().zip(&lb) {
        let d = gram(fa.view()) - gram(fb.view());
        total += d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    }
    Ok(total / la.len() as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Array1<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let g = Array1::from_shape_fn(size, |i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp());
    let sum = g.sum();
    g / sum
}

/// Valid-region separable filtering of one plane.
fn filter(plane: ArrayView2<f64>, taps: &Array1<f64>) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..k).map(|j| taps[j] * plane[[r, c + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..k).map(|j| taps[j] * rows[[r + j, c]]).sum();
        }
    }
    out
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("images {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w, window: SSIM_WINDOW });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut sum = 0.0;
    for ch in 0..c {
        let (x, y) = (a.index_axis(Axis(0), ch), b.index_axis(Axis(0), ch));
        let mx = filter(x, &taps);
        let my = filter(y, &taps);
        let mxx = filter((&x * &x).view(), &taps);
        let myy = filter((&y * &y).view(), &taps);
        let mxy = filter((&x * &y).view(), &taps);
        let mut acc = 0.0;
        Zip::from(&mx)
            .and(&my)
            .and(&mxx)
            .and(&myy)
            .and(&mxy)
            .for_each(|&ux, &uy, &sxx, &syy, &sxy| {
                let vx = sxx - ux * ux;
                let vy = syy - uy * uy;
                let cov = sxy - ux * uy;
                acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            });
        sum += acc / mx.len() as f64;
    }
    Ok(sum / c as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub gram_loss: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_max_abs: Option<f64>,
    pub notes: Vec<String>,
}

/// Gram loss against the style image and SSIM against the structure image.
pub fn metric_report(
    output: ArrayView3<f64>,
    style: ArrayView3<f64>,
    structure: ArrayView3<f64>,
    descriptor: &dyn FeatureDescriptor,
) -> Result<MetricReport> {
    let mut notes = Vec::new();
    if output.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        notes.push("output has values outside [0, 1]".into());
    }
    Ok(MetricReport {
        gram_loss: gram_loss(output, style, descriptor)?,
        ssim: ssim(output, structure)?,
        recon_max_abs: None,
        notes,
    })
}

/// Largest absolute difference between two arrays of equal shape.
pub fn max_abs_diff(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(Zip::from(a).and(b).fold(0.0f64, |m, x, y| m.max((x - y).abs())))
}
