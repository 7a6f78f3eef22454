//! Fixed sinusoidal position fields.

use ndarray::{s, Array4, Zip};

use super::PeMode;
use crate::denoiser::FeatureMap;
use crate::error::{Error, Result};

/// `weight * data` is added to a feature map; `data` is `[frames, c, h, w]`
/// with a single frame in 2d mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalField {
    pub data: Array4<f64>,
    pub mode: PeMode,
    pub weight: f64,
}

impl PositionalField {
    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.dim().2, self.data.dim().3)
    }
}

/// Writes the transformer encoding of `pos` into `m` consecutive channels
/// starting at `first`: pairs `(sin, cos)` of `pos * 1e4^(-2k/m)`.
fn encode_axis(field: &mut Array4<f64>, first: usize, m: usize, pos_of: impl Fn(usize, usize, usize) -> f64) {
    let (frames, _, h, w) = field.dim();
    for j in 0..m {
        let freq = 1e4_f64.powf(-((j / 2 * 2) as f64) / m as f64);
        for f in 0..frames {
            for r in 0..h {
                for c in 0..w {
                    let angle = pos_of(f, r, c) * freq;
                    field[[f, first + j, r, c]] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                }
            }
        }
    }
}

/// Builds the field for a `channels x rows x cols` grid.
///
/// 2d: the first half of the channels encodes the row index, the second half
/// the column index. 3d: channels are split into row, column and frame thirds
/// (rounded, the frame axis takes the remainder) and `frames` entries are
/// produced.
pub fn make_positional_field(
    channels: usize,
    rows: usize,
    cols: usize,
    mode: PeMode,
    frames: Option<usize>,
    weight: f64,
) -> Result<PositionalField> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::Shape(format!("positional field needs an even channel count, got {channels}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("empty positional grid {rows}x{cols}")));
    }
    let data = match mode {
        PeMode::TwoD => {
            let mut d = Array4::zeros((1, channels, rows, cols));
            let half = channels / 2;
            encode_axis(&mut d, 0, half, |_, r, _| r as f64);
            encode_axis(&mut d, half, half, |_, _, c| c as f64);
            d
        }
        PeMode::ThreeD => {
            let n = frames.unwrap_or(1).max(1);
            let third = (channels as f64 / 3.0).round() as usize;
            let rest = channels - 2 * third;
            let mut d = Array4::zeros((n, channels, rows, cols));
            encode_axis(&mut d, 0, third, |_, r, _| r as f64);
            encode_axis(&mut d, third, third, |_, _, c| c as f64);
            encode_axis(&mut d, 2 * third, rest, |f, _, _| f as f64);
            d
        }
    };
    Ok(PositionalField { data, mode, weight })
}

/// `F + weight * pe` for every frame; a single-frame field is broadcast.
pub fn add_positional_encoding(features: &FeatureMap, pe: &PositionalField) -> Result<FeatureMap> {
    let (frames, c, h, w) = features.data.dim();
    let (pf, pc, ph, pw) = pe.data.dim();
    if (pc, ph, pw) != (c, h, w) || (pf != 1 && pf != frames) {
        return Err(Error::Shape(format!(
            "positional field {:?} does not fit features {:?}",
            pe.data.dim(),
            features.data.dim()
        )));
    }
    let mut out = features.clone();
    if pe.weight == 0.0 {
        return Ok(out);
    }
    for f in 0..frames {
        let src = pe.data.slice(s![if pf == 1 { 0 } else { f }, .., .., ..]);
        Zip::from(out.data.slice_mut(s![f, .., .., ..]))
            .and(src)
            .for_each(|o, &p| *o += pe.weight * p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::BlockId;

    fn fmap(data: Array4<f64>) -> FeatureMap {
        FeatureMap { data, block: BlockId(2), timestep: 10 }
    }

    #[test]
    fn zero_weight_is_identity() {
        let f = fmap(Array4::from_shape_fn((2, 4, 3, 3), |(a, b, c, d)| (a + 2 * b + 3 * c + 5 * d) as f64 * 0.1));
        let pe = make_positional_field(4, 3, 3, PeMode::TwoD, None, 0.0).unwrap();
        assert_eq!(add_positional_encoding(&f, &pe).unwrap(), f);
    }

    #[test]
    fn deterministic_and_distinct() {
        let a = make_positional_field(8, 8, 8, PeMode::TwoD, None, 3.0).unwrap();
        let b = make_positional_field(8, 8, 8, PeMode::TwoD, None, 3.0).unwrap();
        assert_eq!(a, b);
        let mut min = f64::INFINITY;
        for p in 0..64 {
            for q in p + 1..64 {
                let (pr, pc, qr, qc) = (p / 8, p % 8, q / 8, q % 8);
                let d: f64 = (0..8).map(|ch| (a.data[[0, ch, pr, pc]] - a.data[[0, ch, qr, qc]]).powi(2)).sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn column_channels_are_translation_structured() {
        let pe = make_positional_field(12, 6, 7, PeMode::TwoD, None, 1.0).unwrap();
        for ch in 6..12 {
            for j in 0..6 {
                let d0 = pe.data[[0, ch, 0, j]] - pe.data[[0, ch, 0, j + 1]];
                for i in 1..6 {
                    assert_eq!(pe.data[[0, ch, i, j]] - pe.data[[0, ch, i, j + 1]], d0);
                }
            }
        }
    }

    #[test]
    fn three_d_varies_over_frames() {
        let pe = make_positional_field(12, 4, 4, PeMode::ThreeD, Some(3), 1.0).unwrap();
        assert_eq!(pe.data.dim(), (3, 12, 4, 4));
        assert_ne!(pe.data.slice(s![0, 8.., .., ..]), pe.data.slice(s![1, 8.., .., ..]));
        assert_eq!(pe.data.slice(s![0, ..8, .., ..]), pe.data.slice(s![2, ..8, .., ..]));
    }

    #[test]
    fn rejects_mismatch_and_odd_channels() {
        let f = fmap(Array4::zeros((1, 4, 3, 3)));
        let pe = make_positional_field(4, 3, 4, PeMode::TwoD, None, 1.0).unwrap();
        assert!(add_positional_encoding(&f, &pe).is_err());
        assert!(make_positional_field(5, 3, 3, PeMode::TwoD, None, 1.0).is_err());
    }

    #[test]
    fn broadcast_leaves_input_untouched() {
        let f = fmap(Array4::ones((2, 4, 2, 2)));
        let pe = make_positional_field(4, 2, 2, PeMode::TwoD, None, 3.0).unwrap();
        let g = add_positional_encoding(&f, &pe).unwrap();
        assert!(f.data.iter().all(|&v| v == 1.0));
        for fr in 0..2 {
            for idx in ndarray::indices((4, 2, 2)) {
                let (c, r, k) = idx;
                assert_eq!(g.data[[fr, c, r, k]], 1.0 + 3.0 * pe.data[[0, c, r, k]]);
            }
        }
    }
}
