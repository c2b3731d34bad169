//! Evaluation of generated exposure stacks.

use crate::linear_image::{BracketSet, RgbImage};
use crate::{Error, Result};

/// Rec. 709 luminance.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

pub fn mean_luminance(frame: &RgbImage) -> f64 {
    let n = frame.width() * frame.height();
    frame.pixels().map(luminance).sum::<f64>() / n as f64
}

/// Below this the darkest frame is treated as black and LS is reported as infinite.
pub const LS_FLOOR: f64 = 1e-9;

/// Mean luminance of the brightest frame over that of the darkest.
pub fn luminance_scale(brackets: &BracketSet) -> Result<f64> {
    if brackets.len() < 2 {
        return Err(Error::InvalidArgument("luminance scale needs at least two frames".into()));
    }
    let frames = brackets.frames();
    let dark = mean_luminance(&frames[0]);
    let bright = mean_luminance(&frames[frames.len() - 1]);
    if dark <= LS_FLOOR {
        return Ok(f64::INFINITY);
    }
    Ok(bright / dark)
}

/// `Σ_k mean |I_k / 2^{ev_k} − I_{k0}|` with `k0` the 0 EV frame.
///
/// Evaluated in the same element order as the training loss so the two agree
/// to rounding.
pub fn bracket_consistency_error(brackets: &BracketSet) -> f64 {
    let base = brackets.base_index();
    let frames = brackets.frames();
    let reference = frames[base].data();
    let n = reference.len() as f64;
    brackets
        .ev_list()
        .iter()
        .zip(frames)
        .map(|(ev, frame)| {
            let gain = (-ev).exp2();
            frame
                .data()
                .iter()
                .zip(reference)
                .map(|(v, r)| (v * gain - r).abs())
                .sum::<f64>()
                / n
        })
        .sum()
}

/// Fraction of pixels whose luminance never decreases with exposure.
pub fn exposure_monotonicity(brackets: &BracketSet) -> f64 {
    let frames = brackets.frames();
    if frames.len() < 2 {
        return 1.0;
    }
    let lums: Vec<Vec<f64>> = frames.iter().map(|f| f.pixels().map(luminance).collect()).collect();
    let n = lums[0].len();
    let ok = (0..n)
        .filter(|&i| lums.windows(2).all(|w| w[1][i] >= w[0][i]))
        .count();
    ok as f64 / n as f64
}

/// Mean absolute error in log10 units.
pub fn radiance_mae(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("MAE of an empty set".into()));
    }
    Ok(predicted.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / predicted.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ls: f64,
    pub bracket_l1: f64,
    pub monotonicity_rate: f64,
    /// Absolute log10 error for one sample, MAE for an aggregate.
    pub radiance_mae: f64,
}

impl EvalReport {
    pub fn for_sample(brackets: &BracketSet, predicted_log: f64, true_log: f64) -> Result<Self> {
        Ok(EvalReport {
            ls: luminance_scale(brackets)?,
            bracket_l1: bracket_consistency_error(brackets),
            monotonicity_rate: exposure_monotonicity(brackets),
            radiance_mae: (predicted_log - true_log).abs(),
        })
    }

    /// Mean of each field over per-sample reports.
    pub fn aggregate(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("no reports to aggregate".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            ls: mean(|r| r.ls),
            bracket_l1: mean(|r| r.bracket_l1),
            monotonicity_rate: mean(|r| r.monotonicity_rate),
            radiance_mae: mean(|r| r.radiance_mae),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_image::{bracket_decompose, LinearImage};

    fn ramp(max: f64) -> LinearImage {
        LinearImage::new(
            RgbImage::from_fn(8, 4, |x, y| {
                let v = max * (1 + x + 8 * y) as f64 / 32.0;
                [v, 0.9 * v, 0.7 * v]
            })
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn ls_of_unclipped_six_stop_stack() {
        let b = bracket_decompose(&ramp(0.2), &[-4.0, -2.0, 0.0, 2.0]).unwrap();
        assert!((luminance_scale(&b).unwrap() - 64.0).abs() < 0.64);
    }

    #[test]
    fn ls_of_identical_frames() {
        let f = ramp(0.5).into_image();
        let b = BracketSet::new(vec![0.0, 2.0], vec![f.clone(), f]).unwrap();
        assert_eq!(luminance_scale(&b).unwrap(), 1.0);
    }

    #[test]
    fn ls_black_darkest_frame_is_infinite() {
        let black = RgbImage::filled(2, 2, [0.0; 3]).unwrap();
        let grey = RgbImage::filled(2, 2, [0.5; 3]).unwrap();
        let b = BracketSet::new(vec![0.0, 2.0], vec![black, grey]).unwrap();
        assert!(luminance_scale(&b).unwrap().is_infinite());
    }

    #[test]
    fn consistency_zero_on_unclipped() {
        let b = bracket_decompose(&ramp(0.2), &[-4.0, -2.0, 0.0, 2.0]).unwrap();
        assert!(bracket_consistency_error(&b) <= 1e-9);
    }

    #[test]
    fn consistency_matches_brute_force_on_clipped() {
        let img = ramp(8.0);
        let evs = [-4.0, -2.0, 0.0, 2.0];
        let b = bracket_decompose(&img, &evs).unwrap();
        let got = bracket_consistency_error(&b);
        // Direct evaluation from the linear image, pixel by pixel.
        let mut expect = 0.0;
        for ev in evs {
            let mut s = 0.0;
            for &v in img.data() {
                let frame = (v * f64::powf(2.0, ev)).clamp(0.0, 1.0);
                s += (frame / f64::powf(2.0, ev) - v.clamp(0.0, 1.0)).abs();
            }
            expect += s / img.data().len() as f64;
        }
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn consistency_noise_perturbation() {
        let evs = [-2.0, 0.0, 2.0];
        let b = bracket_decompose(&ramp(0.1), &evs).unwrap();
        let eps = 0.01;
        let mut frames = b.frames().to_vec();
        frames[0] = frames[0].map(|v| v + eps).unwrap();
        let noisy = BracketSet::new(evs.to_vec(), frames).unwrap();
        let delta = bracket_consistency_error(&noisy) - bracket_consistency_error(&b);
        assert!((delta - eps * 4.0).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_cases() {
        let b = bracket_decompose(&ramp(3.0), &[-4.0, -2.0, 0.0, 2.0]).unwrap();
        assert_eq!(exposure_monotonicity(&b), 1.0);
        let mut frames = b.frames().to_vec();
        frames.reverse();
        let shuffled = BracketSet::new(vec![-4.0, -2.0, 0.0, 2.0], frames).unwrap();
        assert!(exposure_monotonicity(&shuffled) < 0.5);
    }

    #[test]
    fn mae_cases() {
        assert_eq!(radiance_mae(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert!((radiance_mae(&[1.5, -1.5], &[1.0, -2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(radiance_mae(&[1.0], &[1.0, 2.0]).is_err());
    }
}
