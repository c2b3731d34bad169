//! Scene-referred image data: exposure inversion, percentile radiance
//! normalization, bracket decomposition and display rendering.

use crate::{Error, Result};

/// Mid-grey target for the median-based scale candidate.
pub const MID_GREY: f64 = 0.18;
/// Target for the 90th-percentile highlight scale candidate.
pub const HIGHLIGHT_TARGET: f64 = 0.8;
/// Display gamma used for previews.
pub const DISPLAY_GAMMA: f64 = 2.2;

/// Interleaved RGB float image, row-major from the top-left pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape("image must have non-zero size".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage::new(width, height, data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        RgbImage::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn same_size(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Applies `f` to every sample, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<RgbImage> {
        RgbImage::new(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Normalized scene-referred image: non-negative, finite, unbounded above 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage(RgbImage);

/// Physical radiance before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceMap(RgbImage);

macro_rules! non_negative_image {
    ($name:ident) => {
        impl $name {
            pub fn new(image: RgbImage) -> Result<Self> {
                if image.min_value() < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "{} values must be non-negative",
                        stringify!($name)
                    )));
                }
                Ok($name(image))
            }

            pub fn image(&self) -> &RgbImage {
                &self.0
            }

            pub fn into_image(self) -> RgbImage {
                self.0
            }
        }

        impl std::ops::Deref for $name {
            type Target = RgbImage;
            fn deref(&self) -> &RgbImage {
                &self.0
            }
        }
    };
}

non_negative_image!(LinearImage);
non_negative_image!(RadianceMap);

/// Capture settings used to invert a sensor signal back to radiance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorMeta {
    /// Exposure time in seconds.
    pub exposure_time: f64,
    pub iso: f64,
    pub f_number: f64,
    /// Exposure compensation in stops.
    pub ev_comp: f64,
}

impl SensorMeta {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("exposure time", self.exposure_time),
            ("ISO", self.iso),
            ("f-number", self.f_number),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidMeta(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.ev_comp.is_finite() {
            return Err(Error::InvalidMeta("exposure compensation must be finite".into()));
        }
        Ok(())
    }

    /// Multiplier taking a sensor value to radiance: `F² / (t · ISO) · 2^(−EV)`.
    pub fn radiance_factor(&self) -> f64 {
        self.f_number * self.f_number / (self.exposure_time * self.iso) * (-self.ev_comp).exp2()
    }
}

/// Recovers scene radiance from a processed linear sensor signal.
pub fn invert_exposure(signal: &RgbImage, meta: &SensorMeta) -> Result<RadianceMap> {
    meta.validate()?;
    let k = meta.radiance_factor();
    RadianceMap::new(signal.map(|v| v * k)?)
}

/// Linearly interpolated order statistic at rank `q·(n−1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile rank {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// The two scale candidates and the chosen scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceScale {
    pub median: f64,
    pub highlight: f64,
    pub from_median: f64,
    pub from_highlight: f64,
    pub scale: f64,
}

impl RadianceScale {
    pub fn log10(&self) -> f64 {
        self.scale.log10()
    }
}

/// Percentiles are taken over all channel values jointly.
pub fn radiance_scale_stats(radiance: &RgbImage) -> Result<RadianceScale> {
    let values = radiance.data();
    if values.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument("radiance must be non-negative".into()));
    }
    let median = percentile(values, 0.5)?;
    let highlight = percentile(values, 0.9)?;
    let from_median = median / MID_GREY;
    let from_highlight = highlight / HIGHLIGHT_TARGET;
    let scale = from_median.max(from_highlight);
    if scale <= 0.0 {
        return Err(Error::ZeroImage);
    }
    Ok(RadianceScale {
        median,
        highlight,
        from_median,
        from_highlight,
        scale,
    })
}

pub fn compute_radiance_scale(radiance: &RadianceMap) -> Result<f64> {
    Ok(radiance_scale_stats(radiance)?.scale)
}

pub fn normalize(radiance: &RadianceMap, scale: f64) -> Result<LinearImage> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("radiance scale must be positive, got {scale}")));
    }
    LinearImage::new(radiance.map(|v| v / scale)?)
}

pub fn denormalize(image: &LinearImage, scale: f64) -> Result<RadianceMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("radiance scale must be positive, got {scale}")));
    }
    RadianceMap::new(image.map(|v| v * scale)?)
}

/// The paper-default bracket exposures, darkest first.
pub const DEFAULT_EV_LIST: [f64; 4] = [-4.0, -2.0, 0.0, 2.0];

/// Checks an exposure list: at least one entry, strictly increasing, finite and containing 0.
pub fn validate_ev_list(ev_list: &[f64]) -> Result<usize> {
    if ev_list.is_empty() {
        return Err(Error::InvalidEvList("empty".into()));
    }
    if ev_list.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidEvList("non-finite stop".into()));
    }
    if ev_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidEvList(format!("{ev_list:?} is not strictly increasing")));
    }
    ev_list
        .iter()
        .position(|&e| e == 0.0)
        .ok_or_else(|| Error::InvalidEvList(format!("{ev_list:?} has no 0 EV base exposure")))
}

/// `K` clipped renditions of one linear image, darkest first.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketSet {
    ev_list: Vec<f64>,
    frames: Vec<RgbImage>,
}

impl BracketSet {
    /// Frames must be the same size with every sample in `[0, 1]`.
    pub fn new(ev_list: Vec<f64>, frames: Vec<RgbImage>) -> Result<Self> {
        validate_ev_list(&ev_list)?;
        if ev_list.len() != frames.len() {
            return Err(Error::Shape(format!(
                "{} exposures for {} frames",
                ev_list.len(),
                frames.len()
            )));
        }
        if frames.iter().any(|f| !f.same_size(&frames[0])) {
            return Err(Error::Shape("bracket frames differ in size".into()));
        }
        if frames.iter().any(|f| f.min_value() < 0.0 || f.max_value() > 1.0) {
            return Err(Error::InvalidArgument("bracket samples must lie in [0, 1]".into()));
        }
        Ok(BracketSet { ev_list, frames })
    }

    pub fn ev_list(&self) -> &[f64] {
        &self.ev_list
    }

    pub fn frames(&self) -> &[RgbImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the 0 EV frame.
    pub fn base_index(&self) -> usize {
        self.ev_list.iter().position(|&e| e == 0.0).expect("validated on construction")
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

/// `I_k = clip(I · 2^{ev_k}, 0, 1)` for every exposure in `ev_list`.
pub fn bracket_decompose(image: &LinearImage, ev_list: &[f64]) -> Result<BracketSet> {
    validate_ev_list(ev_list)?;
    let frames = ev_list
        .iter()
        .map(|ev| {
            let gain = ev.exp2();
            image.map(|v| (v * gain).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    BracketSet::new(ev_list.to_vec(), frames)
}

/// Global Reinhard `x / (1 + x)` followed by `1/gamma` encoding.
pub fn tonemap_display(image: &RgbImage, gamma: f64) -> Result<RgbImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if image.min_value() < 0.0 {
        return Err(Error::InvalidArgument("tone mapping needs non-negative input".into()));
    }
    image.map(|x| (x / (1.0 + x)).powf(1.0 / gamma))
}
