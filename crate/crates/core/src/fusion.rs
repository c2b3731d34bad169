//! Hierarchical merge of an exposure stack into one linear image.
//!
//! Starting from the brightest frame, each darker frame is aligned to the
//! brightest exposure with the product of adjacent per-channel ratios and
//! blended in through a soft mask that selects where the running result is
//! saturated.

use crate::linear_image::{validate_ev_list, BracketSet, LinearImage, RgbImage};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// A pixel takes part in ratio estimation only if both frames are below
    /// this in every channel.
    pub saturation_threshold: f64,
    pub feather_low: f64,
    pub feather_high: f64,
    /// Half-width of the box filter applied to the mask, in pixels.
    pub blur_radius: usize,
    /// Below this fraction of jointly valid pixels the nominal `2^Δev` ratio is used.
    pub min_valid_fraction: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            saturation_threshold: 0.98,
            feather_low: 0.85,
            feather_high: 0.98,
            blur_radius: 2,
            min_valid_fraction: 0.01,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.feather_low && self.feather_low < self.feather_high && self.feather_high <= 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "feather band [{}, {}] must satisfy 0 < low < high <= 1",
                self.feather_low, self.feather_high
            )));
        }
        if !(self.saturation_threshold > 0.0 && self.saturation_threshold <= 1.0) {
            return Err(Error::InvalidArgument("saturation threshold must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return Err(Error::InvalidArgument("min valid fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-channel brightness ratio between a frame and the next brighter one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRatio {
    pub rgb: [f64; 3],
    /// True when too few valid pixels forced the nominal exposure ratio.
    pub fallback: bool,
}

/// Mean of each channel of `brighter` over jointly unsaturated pixels divided
/// by the same mean in `darker`.
pub fn channel_ratio(
    darker: &RgbImage,
    brighter: &RgbImage,
    nominal: f64,
    cfg: &FusionConfig,
) -> Result<ChannelRatio> {
    if !darker.same_size(brighter) {
        return Err(Error::Shape("ratio frames differ in size".into()));
    }
    let thr = cfg.saturation_threshold;
    let mut sum_dark = [0.0; 3];
    let mut sum_bright = [0.0; 3];
    let mut valid = 0usize;
    for (d, b) in darker.pixels().zip(brighter.pixels()) {
        if d.iter().chain(&b).all(|&v| v < thr) {
            valid += 1;
            for c in 0..3 {
                sum_dark[c] += d[c];
                sum_bright[c] += b[c];
            }
        }
    }
    let total = darker.width() * darker.height();
    let enough = valid > 0 && valid as f64 >= cfg.min_valid_fraction * total as f64;
    let ratios = std::array::from_fn(|c| {
        if enough && sum_dark[c] > 0.0 && sum_bright[c] > 0.0 {
            Some(sum_bright[c] / sum_dark[c])
        } else {
            None
        }
    });
    if ratios.iter().all(Option::is_some) {
        Ok(ChannelRatio {
            rgb: ratios.map(|r: Option<f64>| r.expect("checked")),
            fallback: false,
        })
    } else {
        log::warn!(
            "only {valid} of {total} pixels usable for ratio estimation, using nominal ratio {nominal}"
        );
        Ok(ChannelRatio {
            rgb: [nominal; 3],
            fallback: true,
        })
    }
}

fn smoothstep(lo: f64, hi: f64, x: f64) -> f64 {
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Weight for taking content from the next darker frame.
///
/// `reference` is the running fused result expressed at the exposure of the
/// frame it was last updated from, so saturation is judged in that frame's
/// own `[0, 1]` range. The smoothstep weight on each pixel's max channel is
/// box-blurred and then combined with the unblurred weight by `max`, which
/// feathers the transition outward while keeping saturated pixels at full
/// weight.
pub fn soft_mask(reference: &RgbImage, cfg: &FusionConfig) -> Result<RgbImage> {
    cfg.validate()?;
    let (w, h) = (reference.width(), reference.height());
    let raw: Vec<f64> = reference
        .pixels()
        .map(|p| smoothstep(cfg.feather_low, cfg.feather_high, p[0].max(p[1]).max(p[2])))
        .collect();
    let r = cfg.blur_radius as isize;
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            let mut count = 0usize;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    sum += raw[yy as usize * w + xx as usize];
                    count += 1;
                }
            }
            let m = raw[y as usize * w + x as usize].max(sum / count as f64);
            data.extend_from_slice(&[m; 3]);
        }
    }
    RgbImage::new(w, h, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fused {
    /// Merged radiance at the brightest frame's exposure; may exceed 1.
    pub image: RgbImage,
    /// `ratios[k]` relates frame `k` to frame `k + 1`.
    pub ratios: Vec<ChannelRatio>,
    pub ev_max: f64,
}

pub fn fuse(brackets: &BracketSet, cfg: &FusionConfig) -> Result<Fused> {
    cfg.validate()?;
    let frames = brackets.frames();
    let evs = brackets.ev_list();
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("fusion needs at least two brackets".into()));
    }
    let k_top = frames.len() - 1;
    let mut ratios = vec![
        ChannelRatio {
            rgb: [1.0; 3],
            fallback: false
        };
        k_top
    ];
    for k in 0..k_top {
        let nominal = (evs[k + 1] - evs[k]).exp2();
        ratios[k] = channel_ratio(&frames[k], &frames[k + 1], nominal, cfg)?;
    }

    let (w, h) = (brackets.width(), brackets.height());
    let mut fused = frames[k_top].data().to_vec();
    // Gain aligning the most recently merged frame to the brightest exposure.
    let mut align_prev = [1.0; 3];
    for k in (0..k_top).rev() {
        let align: [f64; 3] = std::array::from_fn(|c| align_prev[c] * ratios[k].rgb[c]);
        let reference: Vec<f64> = fused
            .iter()
            .enumerate()
            .map(|(i, v)| v / align_prev[i % 3])
            .collect();
        let mask = soft_mask(&RgbImage::new(w, h, reference)?, cfg)?;
        for (i, (f, (&m, &dark))) in fused
            .iter_mut()
            .zip(mask.data().iter().zip(frames[k].data()))
            .enumerate()
        {
            *f = *f * (1.0 - m) + dark * align[i % 3] * m;
        }
        align_prev = align;
    }
    Ok(Fused {
        image: RgbImage::new(w, h, fused)?,
        ratios,
        ev_max: evs[k_top],
    })
}

/// Brings a fused map back to the normalized linear domain by dividing by `2^{ev_max}`.
pub fn to_linear(fused: &RgbImage, ev_max: f64) -> Result<LinearImage> {
    if !ev_max.is_finite() {
        return Err(Error::NonFinite("ev_max"));
    }
    let gain = (-ev_max).exp2();
    LinearImage::new(fused.map(|v| v * gain)?)
}

/// `fuse` followed by `to_linear`.
pub fn reconstruct(brackets: &BracketSet, cfg: &FusionConfig) -> Result<LinearImage> {
    validate_ev_list(brackets.ev_list())?;
    let fused = fuse(brackets, cfg)?;
    to_linear(&fused.image, fused.ev_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_image::bracket_decompose;

    fn img(w: usize, h: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> RgbImage {
        RgbImage::from_fn(w, h, f).unwrap()
    }

    #[test]
    fn ideal_pair_ratio() {
        let dark = img(8, 8, |x, y| [0.01 + 0.01 * x as f64, 0.02 + 0.005 * y as f64, 0.1]);
        let bright = dark.map(|v| v * 4.0).unwrap();
        let r = channel_ratio(&dark, &bright, 4.0, &FusionConfig::default()).unwrap();
        assert!(!r.fallback);
        for c in r.rgb {
            assert!((c - 4.0).abs() < 0.04);
        }
    }

    #[test]
    fn identical_frames_ratio_one() {
        let f = img(4, 4, |x, _| [0.2, 0.3 + 0.01 * x as f64, 0.5]);
        let r = channel_ratio(&f, &f, 4.0, &FusionConfig::default()).unwrap();
        assert_eq!(r.rgb, [1.0; 3]);
    }

    #[test]
    fn saturated_frame_falls_back() {
        let dark = img(4, 4, |_, _| [0.5; 3]);
        let bright = img(4, 4, |_, _| [1.0; 3]);
        let r = channel_ratio(&dark, &bright, 4.0, &FusionConfig::default()).unwrap();
        assert!(r.fallback);
        assert_eq!(r.rgb, [4.0; 3]);
    }

    #[test]
    fn mask_cases() {
        let cfg = FusionConfig::default();
        let low = img(5, 5, |_, _| [0.5; 3]);
        assert!(soft_mask(&low, &cfg).unwrap().data().iter().all(|&m| m == 0.0));
        let sat = img(5, 5, |_, _| [1.0; 3]);
        assert!(soft_mask(&sat, &cfg).unwrap().data().iter().all(|&m| m == 1.0));
        let ramp = img(9, 3, |x, _| [x as f64 / 8.0, 0.0, 0.2]);
        let m = soft_mask(&ramp, &cfg).unwrap();
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // The feathered edge reaches into pixels below the band.
        assert!(m.pixel(6, 1)[0] > 0.0);
        assert_eq!(m.pixel(8, 1)[0], 1.0);
    }

    #[test]
    fn zero_mask_keeps_brightest() {
        let dark = img(6, 6, |x, y| [0.01 * x as f64, 0.01 * y as f64, 0.05]);
        let bright = dark.map(|v| v * 4.0).unwrap();
        let set = BracketSet::new(vec![-2.0, 0.0], vec![dark, bright.clone()]).unwrap();
        let fused = fuse(&set, &FusionConfig::default()).unwrap();
        assert_eq!(fused.image, bright);
    }

    #[test]
    fn two_frame_pair_recovers_highlights() {
        let linear = LinearImage::new(img(10, 10, |x, y| {
            let v = 0.02 + 0.06 * x as f64 + 0.01 * y as f64;
            [v, v * 0.8, v * 1.1]
        }))
        .unwrap();
        let set = bracket_decompose(&linear, &[0.0, 2.0]).unwrap();
        let fused = fuse(&set, &FusionConfig::default()).unwrap();
        for (f, l) in fused.image.data().iter().zip(linear.data()) {
            let truth = l * 4.0;
            assert!((f - truth).abs() <= 0.01 * truth, "{f} vs {truth}");
        }
    }

    #[test]
    fn to_linear_divides_by_exposure() {
        let f = img(2, 2, |_, _| [8.0, 4.0, 0.0]);
        assert_eq!(to_linear(&f, 2.0).unwrap().pixel(0, 0), [2.0, 1.0, 0.0]);
        assert_eq!(to_linear(&f, 0.0).unwrap().image(), &f);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = FusionConfig {
            feather_low: 0.99,
            feather_high: 0.9,
            ..FusionConfig::default()
        };
        assert!(soft_mask(&img(2, 2, |_, _| [0.0; 3]), &cfg).is_err());
    }
}
