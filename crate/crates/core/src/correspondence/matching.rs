use ndarray::{Array2, Array4, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CorrespondenceMap, RegionMask};
use crate::denoiser::FeatureMap;
use crate::error::{Error, Result};

fn sq_dist(a: &ArrayView3<f64>, ai: (usize, usize), b: &ArrayView3<f64>, bi: (usize, usize)) -> f64 {
    let mut d = 0.0;
    for ch in 0..a.dim().0 {
        let diff = a[[ch, ai.0, ai.1]] - b[[ch, bi.0, bi.1]];
        d += diff * diff;
    }
    d
}

fn ref_frame(frames_ref: usize, f: usize) -> usize {
    if frames_ref == 1 {
        0
    } else {
        f
    }
}

fn check_frames(context: usize, reference: usize) -> Result<()> {
    if reference != context && reference != 1 {
        return Err(Error::Shape(format!("{context} context frames vs {reference} reference frames")));
    }
    Ok(())
}

/// Nearest reference position (squared L2) for every masked context position,
/// frame by frame. Ties go to the smallest linear index.
pub fn match_features(context: &FeatureMap, reference: &FeatureMap, masks: &RegionMask) -> Result<CorrespondenceMap> {
    let (frames, c, h, w) = context.data.dim();
    let (rf, rc, rh, rw) = reference.data.dim();
    if c != rc {
        return Err(Error::Shape(format!("{c} context channels vs {rc} reference channels")));
    }
    check_frames(frames, rf)?;
    let mf = |m: &ndarray::Array3<bool>, f: usize| ref_frame(m.dim().0, f);
    if (masks.context.dim().1, masks.context.dim().2) != (h, w) || (masks.reference.dim().1, masks.reference.dim().2) != (rh, rw) {
        return Err(Error::Shape(format!(
            "mask grids {:?}/{:?} vs features {h}x{w}/{rh}x{rw}",
            masks.context.dim(),
            masks.reference.dim()
        )));
    }
    check_frames(frames, masks.context.dim().0)?;
    check_frames(frames, masks.reference.dim().0)?;

    let n = h * w;
    let mut assignment = Array2::zeros((frames, n));
    let mut distances = Array2::zeros((frames, n));
    let mut valid = Array2::from_elem((frames, n), false);
    for f in 0..frames {
        let a = context.data.index_axis(ndarray::Axis(0), f);
        let b = reference.data.index_axis(ndarray::Axis(0), ref_frame(rf, f));
        let cm = masks.context.index_axis(ndarray::Axis(0), mf(&masks.context, f));
        let rm = masks.reference.index_axis(ndarray::Axis(0), mf(&masks.reference, f));
        let candidates: Vec<usize> = (0..rh * rw).filter(|&j| rm[[j / rw, j % rw]]).collect();
        if candidates.is_empty() {
            return Err(Error::EmptyMask("reference"));
        }
        if !cm.iter().any(|&v| v) {
            return Err(Error::EmptyMask("context"));
        }
        for i in 0..n {
            let pi = (i / w, i % w);
            if !cm[pi] {
                continue;
            }
            let mut best = (f64::INFINITY, 0);
            for &j in &candidates {
                let d = sq_dist(&a, pi, &b, (j / rw, j % rw));
                if d < best.0 {
                    best = (d, j);
                }
            }
            assignment[[f, i]] = best.1;
            distances[[f, i]] = best.0;
            valid[[f, i]] = true;
        }
    }
    Ok(CorrespondenceMap {
        assignment,
        distances,
        valid,
        rows: h,
        cols: w,
    })
}

/// Gathers reference vectors onto the context grid; invalid positions are zero.
pub fn rearrange(reference: &FeatureMap, map: &CorrespondenceMap) -> Result<FeatureMap> {
    let (rf, c, rh, rw) = reference.data.dim();
    let frames = map.frames();
    check_frames(frames, rf)?;
    let mut out = Array4::zeros((frames, c, map.rows, map.cols));
    for f in 0..frames {
        let b = reference.data.index_axis(ndarray::Axis(0), ref_frame(rf, f));
        for i in 0..map.positions() {
            if !map.valid[[f, i]] {
                continue;
            }
            let j = map.assignment[[f, i]];
            if j >= rh * rw {
                return Err(Error::Shape(format!("assignment {j} outside a {rh}x{rw} reference")));
            }
            for ch in 0..c {
                out[[f, ch, i / map.cols, i % map.cols]] = b[[ch, j / rw, j % rw]];
            }
        }
    }
    Ok(FeatureMap {
        data: out,
        block: reference.block,
        timestep: reference.timestep,
    })
}

/// Distances of the current assignment, recomputed from the features.
pub fn recompute_distances(map: &CorrespondenceMap, context: &FeatureMap, reference: &FeatureMap) -> Result<Array2<f64>> {
    let rf = reference.data.dim().0;
    let rw = reference.cols();
    check_frames(map.frames(), rf)?;
    let mut d = Array2::zeros(map.distances.raw_dim());
    for f in 0..map.frames() {
        let a = context.data.index_axis(ndarray::Axis(0), f);
        let b = reference.data.index_axis(ndarray::Axis(0), ref_frame(rf, f));
        for i in 0..map.positions() {
            if map.valid[[f, i]] {
                let j = map.assignment[[f, i]];
                d[[f, i]] = sq_dist(&a, (i / map.cols, i % map.cols), &b, (j / rw, j % rw));
            }
        }
    }
    Ok(d)
}

/// Permutes the valid targets of each frame with a seeded shuffle and
/// recomputes the distances against the new targets.
pub fn shuffle_assignment(
    map: &CorrespondenceMap,
    context: &FeatureMap,
    reference: &FeatureMap,
    seed: u64,
) -> Result<CorrespondenceMap> {
    let mut out = map.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for f in 0..map.frames() {
        let slots: Vec<usize> = (0..map.positions()).filter(|&i| map.valid[[f, i]]).collect();
        let mut targets: Vec<usize> = slots.iter().map(|&i| map.assignment[[f, i]]).collect();
        targets.shuffle(&mut rng);
        for (&i, t) in slots.iter().zip(targets) {
            out.assignment[[f, i]] = t;
        }
    }
    out.distances = recompute_distances(&out, context, reference)?;
    Ok(out)
}
