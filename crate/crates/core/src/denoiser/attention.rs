//! Multi-head scaled dot-product attention on token-major matrices, with the
//! matching reverse pass.

use ndarray::{s, Array2, ArrayView2, Axis};

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Per-head forward products kept for the reverse pass.
pub(crate) struct AttnForward {
    /// `[tokens, dim]`, heads concatenated along columns.
    pub out: Array2<f64>,
    /// One `[queries, keys]` probability matrix per head.
    pub probs: Vec<Array2<f64>>,
}

fn head<'a>(m: &'a Array2<f64>, h: usize, dh: usize) -> ArrayView2<'a, f64> {
    m.slice(s![.., h * dh..(h + 1) * dh])
}

/// `softmax(q_h k_h^T / sqrt(dh)) v_h` for every head.
pub(crate) fn forward(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> AttnForward {
    let dh = q.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    let dv = v.ncols() / heads;
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut p = head(q, h, dh).dot(&head(k, h, dh).t()) * scale;
        softmax_rows(&mut p);
        out.slice_mut(s![.., h * dv..(h + 1) * dv])
            .assign(&p.dot(&head(v, h, dv)));
        probs.push(p);
    }
    AttnForward { out, probs }
}

pub(crate) struct AttnGrads {
    pub dq: Array2<f64>,
    pub dk: Array2<f64>,
    pub dv: Array2<f64>,
}

/// Reverse pass. `d_probs` adds external cotangents on the probability maps
/// (one per head), e.g. from a loss on the attention map itself.
pub(crate) fn backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    fwd: &AttnForward,
    d_out: &Array2<f64>,
    d_probs: Option<&[Array2<f64>]>,
) -> AttnGrads {
    let heads = fwd.probs.len();
    let dh = q.ncols() / heads;
    let dvh = v.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for h in 0..heads {
        let p = &fwd.probs[h];
        let d_out_h = d_out.slice(s![.., h * dvh..(h + 1) * dvh]);
        let mut dp = d_out_h.dot(&head(v, h, dvh).t());
        if let Some(extra) = d_probs {
            dp += &extra[h];
        }
        dv.slice_mut(s![.., h * dvh..(h + 1) * dvh])
            .assign(&p.t().dot(&d_out_h));
        // softmax reverse: P * (dP - rowsum(dP * P))
        let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = p * &(dp - &inner) * scale;
        dq.slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&ds.dot(&head(k, h, dh)));
        dk.slice_mut(s![.., h * dh..(h + 1) * dh])
            .assign(&ds.t().dot(&head(q, h, dh)));
    }
    AttnGrads { dq, dk, dv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&mut rng, 5, 4), random(&mut rng, 7, 4), random(&mut rng, 7, 4));
        let f = forward(&q, &k, &v, 2);
        for p in &f.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (random(&mut rng, 4, 6), random(&mut rng, 5, 6), random(&mut rng, 5, 6));
        let w_out = random(&mut rng, 4, 6);
        let w_probs: Vec<_> = (0..2).map(|_| random(&mut rng, 4, 5)).collect();
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            let f = forward(q, k, v, 2);
            (&f.out * &w_out).sum()
                + f.probs.iter().zip(&w_probs).map(|(p, w)| (p * w).sum()).sum::<f64>()
        };
        let f = forward(&q, &k, &v, 2);
        let g = backward(&q, &k, &v, &f, &w_out, Some(&w_probs));
        let h = 1e-6;
        for (which, grad) in [(0, &g.dq), (1, &g.dk), (2, &g.dv)] {
            let base = [&q, &k, &v][which];
            for idx in ndarray::indices(base.raw_dim()) {
                let mut plus = [q.clone(), k.clone(), v.clone()];
                let mut minus = [q.clone(), k.clone(), v.clone()];
                plus[which][idx] += h;
                minus[which][idx] -= h;
                let fd = (loss(&plus[0], &plus[1], &plus[2]) - loss(&minus[0], &minus[1], &minus[2])) / (2.0 * h);
                assert!((fd - grad[idx]).abs() < 1e-7, "arg {which} {idx:?}: fd {fd} vs {}", grad[idx]);
            }
        }
    }
}
