//! k-means foreground masks from self-attention profiles.

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansOptions { k, seed, max_iter: 100, tol: 1e-6 }
    }
}

/// Foreground mask `[frames, rows, cols]`; `degenerate[f]` is set when all
/// profiles of frame `f` coincide and the full grid was returned.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMask {
    pub mask: Array3<bool>,
    pub degenerate: Vec<bool>,
}

fn sq(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a k-means++ start. Returns the label of every row.
fn kmeans(points: ArrayView2<f64>, opts: &KMeansOptions) -> Vec<usize> {
    let n = points.nrows();
    let k = opts.k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut centers = Array2::zeros((k, points.ncols()));
    centers.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq(points.row(i), centers.row(c)));
        }
    }

    let mut labels = vec![0; n];
    for _ in 0..opts.max_iter {
        for (i, label) in labels.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for c in 0..k {
                let d = sq(points.row(i), centers.row(c));
                if d < best.0 {
                    best = (d, c);
                }
            }
            *label = best.1;
        }
        let mut next = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            next.row_mut(l).scaled_add(1.0, &points.row(i));
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq(points.row(a), centers.row(labels[a]));
                        let db = sq(points.row(b), centers.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                next.row_mut(c).assign(&points.row(far));
            } else {
                next.row_mut(c).mapv_inplace(|v| v / counts[c] as f64);
            }
        }
        let shift = (0..k).map(|c| sq(next.row(c), centers.row(c)).sqrt()).fold(0.0, f64::max);
        centers = next;
        if shift < opts.tol {
            break;
        }
    }
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let d = sq(points.row(i), centers.row(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        *label = best.1;
    }
    labels
}

/// Clusters the head-averaged attention rows of each frame and keeps the
/// cluster whose positions receive the largest mean attention.
///
/// `self_attn` is `[frames, heads, tokens, tokens]` over a `rows x cols` grid.
pub fn cluster_masks(self_attn: &Array4<f64>, rows: usize, cols: usize, opts: &KMeansOptions) -> Result<ClusterMask> {
    let (frames, heads, n, m) = self_attn.dim();
    if n != m || n != rows * cols || heads == 0 {
        return Err(Error::Shape(format!("self-attention {:?} does not fit a {rows}x{cols} grid", self_attn.dim())));
    }
    if opts.k == 0 {
        return Err(Error::Config("k-means needs at least one cluster".into()));
    }
    let mut mask = Array3::from_elem((frames, rows, cols), true);
    let mut degenerate = vec![false; frames];
    for f in 0..frames {
        let profiles = self_attn.index_axis(Axis(0), f).mean_axis(Axis(0)).expect("heads > 0");
        if opts.k == 1 {
            continue;
        }
        let first = profiles.row(0);
        if (1..n).all(|i| sq(profiles.row(i), first) == 0.0) {
            log::warn!("self-attention profiles of frame {f} are identical, using the full mask");
            degenerate[f] = true;
            continue;
        }
        let labels = kmeans(profiles.view(), opts);
        let received = profiles.mean_axis(Axis(0)).expect("tokens > 0");
        let k = opts.k.min(n);
        let mut score = vec![(0.0, 0usize); k];
        for (j, &l) in labels.iter().enumerate() {
            score[l].0 += received[j];
            score[l].1 += 1;
        }
        let mut chosen = None;
        let mut best = f64::NEG_INFINITY;
        for (c, &(sum, count)) in score.iter().enumerate() {
            if count > 0 && sum / count as f64 > best {
                best = sum / count as f64;
                chosen = Some(c);
            }
        }
        let chosen = chosen.expect("at least one cluster is populated");
        for (j, &l) in labels.iter().enumerate() {
            mask[[f, j / cols, j % cols]] = l == chosen;
        }
    }
    Ok(ClusterMask { mask, degenerate })
}

/// Nearest-neighbour resampling of a mask onto another grid.
pub fn resample_mask(mask: &Array3<bool>, rows: usize, cols: usize) -> Array3<bool> {
    let (frames, h, w) = mask.dim();
    let mut out = Array3::from_shape_fn((frames, rows, cols), |(f, r, c)| mask[[f, r * h / rows, c * w / cols]]);
    for f in 0..frames {
        if !out.index_axis(Axis(0), f).iter().any(|&v| v) {
            // a thin region can vanish when downsampling
            out.index_axis_mut(Axis(0), f).fill(true);
        }
    }
    out
}
