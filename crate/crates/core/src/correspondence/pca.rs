//! Top-three principal components of a feature map rendered as RGB.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::denoiser::FeatureMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaImage {
    /// `[rows, cols, 3]` in `[0, 1]`.
    pub rgb: Array3<f64>,
    /// Variance along each retained component, zero when missing.
    pub explained: [f64; 3],
    /// `[3, channels]` unit directions, zero rows when missing.
    pub components: Array2<f64>,
}

/// PCA of one `[channels, rows, cols]` frame.
pub fn pca_visualize_frame(frame: ArrayView3<f64>) -> Result<PcaImage> {
    let (c, h, w) = frame.dim();
    let n = h * w;
    if n < 3 {
        return Err(Error::ImageTooSmall { height: h, width: w, window: 3 });
    }
    let x = frame
        .to_shape((c, n))
        .map_err(|e| Error::Shape(e.to_string()))?
        .t()
        .to_owned();
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(c, c, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = order.first().map(|&i| eig.eigenvalues[i].max(0.0)).unwrap_or(0.0);

    let mut explained = [0.0; 3];
    let mut components = Array2::zeros((3, c));
    for (slot, &idx) in order.iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > 1e-10 * top) || top == 0.0 {
            continue;
        }
        explained[slot] = lambda;
        let v = eig.eigenvectors.column(idx);
        // fix the sign: the largest-magnitude entry is positive
        let pivot = (0..c).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for ch in 0..c {
            components[[slot, ch]] = sign * v[ch];
        }
    }

    let proj = centered.dot(&components.t());
    let mut rgb = Array3::zeros((h, w, 3));
    for k in 0..3 {
        if explained[k] == 0.0 {
            continue;
        }
        let col = proj.column(k);
        let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let span = hi - lo;
        for i in 0..n {
            rgb[[i / w, i % w, k]] = if span > 0.0 { ((col[i] - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Ok(PcaImage { rgb, explained, components })
}

/// One visualisation per frame.
pub fn pca_visualize(features: &FeatureMap) -> Result<Vec<PcaImage>> {
    features
        .data
        .outer_iter()
        .map(pca_visualize_frame)
        .collect()
}
