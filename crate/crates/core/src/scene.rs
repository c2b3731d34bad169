//! Procedural HDR scenes with descriptor captions.
//!
//! Each scene is rendered in arbitrary radiance units, normalized with its
//! own percentile radiance scale, and paired with a log radiance label drawn
//! uniformly over a configurable range. The lighting word in the caption is a
//! function of that label, which makes the label predictable from text.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linear_image::{
    bracket_decompose, compute_radiance_scale, normalize, BracketSet, LinearImage, RadianceMap,
    RgbImage,
};
use crate::{Error, Result};

/// Scene descriptors. Indices are caption token ids.
pub const VOCABULARY: [&str; 16] = [
    "moonlit", "night", "candlelit", "dim", "indoor", "dusk", "overcast", "sunlit", // lighting
    "sky", "sun", "disks", "room", "window", "street", "lamp", "bright",
];

/// Number of lighting words; they occupy the first ids and split the label
/// range into equal-width bands, darkest first.
pub const LIGHTING_WORDS: usize = 8;

/// Padding id used to fill captions to a fixed length.
pub const PAD_TOKEN: usize = VOCABULARY.len();

pub fn token_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

/// Parses a space- or comma-separated descriptor list.
pub fn parse_prompt(prompt: &str) -> Result<Vec<usize>> {
    let ids = prompt
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .map(|w| {
            token_id(&w.to_lowercase())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown descriptor '{w}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    Ok(ids)
}

/// Pads or truncates a caption to `len` tokens.
pub fn pad_caption(ids: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = ids.iter().copied().take(len).collect();
    out.resize(len, PAD_TOKEN);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    SkyGradient,
    LightDisks,
    IndoorWindow,
    NightLamps,
}

impl Layout {
    pub const ALL: [Layout; 4] = [
        Layout::SkyGradient,
        Layout::LightDisks,
        Layout::IndoorWindow,
        Layout::NightLamps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layout::SkyGradient => "sky-gradient",
            Layout::LightDisks => "light-disks",
            Layout::IndoorWindow => "indoor-window",
            Layout::NightLamps => "night-lamps",
        }
    }

    fn words(self) -> &'static [&'static str] {
        match self {
            Layout::SkyGradient => &["sky", "sun"],
            Layout::LightDisks => &["disks"],
            Layout::IndoorWindow => &["room", "window"],
            Layout::NightLamps => &["street", "lamp"],
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layout kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Layout,
    pub width: usize,
    pub height: usize,
    /// Log10 radiance label.
    pub log_radiance: f64,
    /// Peak highlight relative to the scene's base level, at most `2^6`.
    pub highlight_gain: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: usize,
    pub spec: SceneSpec,
    pub image: LinearImage,
    pub log_radiance: f64,
    /// Descriptor ids, unpadded.
    pub caption: Vec<usize>,
    pub brackets: BracketSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub log_radiance_min: f64,
    pub log_radiance_max: f64,
    pub ev_list: Vec<f64>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 32,
            height: 32,
            log_radiance_min: -5.0,
            log_radiance_max: 3.5,
            ev_list: crate::linear_image::DEFAULT_EV_LIST.to_vec(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let lo = crate::radiance_codec::LOG_RADIANCE_MIN;
        let hi = crate::radiance_codec::LOG_RADIANCE_MAX;
        if !(lo <= self.log_radiance_min && self.log_radiance_min < self.log_radiance_max
            && self.log_radiance_max <= hi)
        {
            return Err(Error::InvalidArgument(format!(
                "label range [{}, {}] must be increasing inside [{lo}, {hi}]",
                self.log_radiance_min, self.log_radiance_max
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("scene size must be non-zero".into()));
        }
        crate::linear_image::validate_ev_list(&self.ev_list)?;
        Ok(())
    }

    /// Lighting word id for a label.
    pub fn lighting_word(&self, log_radiance: f64) -> usize {
        let span = self.log_radiance_max - self.log_radiance_min;
        let band = ((log_radiance - self.log_radiance_min) / span * LIGHTING_WORDS as f64).floor();
        band.clamp(0.0, (LIGHTING_WORDS - 1) as f64) as usize
    }

    /// Center of a lighting word's label band.
    pub fn lighting_center(&self, word: usize) -> f64 {
        let span = self.log_radiance_max - self.log_radiance_min;
        self.log_radiance_min + (word as f64 + 0.5) * span / LIGHTING_WORDS as f64
    }

    /// Draws a scene description from a seed.
    pub fn spec(&self, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::ALL[rng.gen_range(0..Layout::ALL.len())];
        SceneSpec {
            seed,
            layout,
            width: self.width,
            height: self.height,
            log_radiance: rng.gen_range(self.log_radiance_min..self.log_radiance_max),
            highlight_gain: 2f64.powf(rng.gen_range(3.0..=6.0)),
        }
    }

    pub fn caption(&self, spec: &SceneSpec) -> Vec<usize> {
        let mut ids = vec![self.lighting_word(spec.log_radiance)];
        ids.extend(spec.layout.words().iter().map(|w| token_id(w).expect("layout word")));
        if spec.highlight_gain >= 32.0 {
            ids.push(token_id("bright").expect("vocabulary word"));
        }
        ids
    }
}

fn tint(rng: &mut ChaCha8Rng, spread: f64) -> [f64; 3] {
    std::array::from_fn(|_| 1.0 + rng.gen_range(-spread..spread))
}

fn disk(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    // Soft edge one pixel wide.
    (r + 0.5 - d).clamp(0.0, 1.0)
}

/// Renders radiance in arbitrary units.
fn render(spec: &SceneSpec) -> Result<RgbImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let gain = spec.highlight_gain;
    let texture_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let texture_freq: f64 = rng.gen_range(0.2..0.8);
    let texture = move |x: f64, y: f64| 1.0 + 0.15 * (texture_freq * x + texture_phase).sin() * (0.7 * texture_freq * y).cos();

    let field: Box<dyn Fn(f64, f64) -> [f64; 3]> = match spec.layout {
        Layout::SkyGradient => {
            let horizon = h * rng.gen_range(0.45..0.7);
            let sky = tint(&mut rng, 0.2);
            let ground = tint(&mut rng, 0.3);
            let (sx, sy) = (rng.gen_range(0.15..0.85) * w, rng.gen_range(0.1..0.35) * h);
            let sr = rng.gen_range(0.06..0.12) * w;
            Box::new(move |x, y| {
                let base = if y < horizon {
                    1.0 - 0.6 * y / horizon
                } else {
                    0.08 * texture(x, y)
                };
                let t = if y < horizon { sky } else { ground };
                let sun = disk(x, y, sx, sy, sr) * gain;
                std::array::from_fn(|c| base * t[c] + sun)
            })
        }
        Layout::LightDisks => {
            let n = rng.gen_range(1..=3);
            let disks: Vec<_> = (0..n)
                .map(|i| {
                    let level = if i == 0 { gain } else { gain * rng.gen_range(0.1..0.6) };
                    (
                        rng.gen_range(0.15..0.85) * w,
                        rng.gen_range(0.15..0.85) * h,
                        rng.gen_range(0.08..0.2) * w,
                        level,
                        tint(&mut rng, 0.3),
                    )
                })
                .collect();
            let bg = tint(&mut rng, 0.3);
            let level = rng.gen_range(0.3..1.0);
            Box::new(move |x, y| {
                let mut v: [f64; 3] = std::array::from_fn(|c| level * bg[c] * texture(x, y));
                for &(cx, cy, r, l, t) in &disks {
                    let m = disk(x, y, cx, cy, r);
                    for c in 0..3 {
                        v[c] += m * l * t[c];
                    }
                }
                v
            })
        }
        Layout::IndoorWindow => {
            let (x0, y0) = (rng.gen_range(0.1..0.5) * w, rng.gen_range(0.1..0.4) * h);
            let (x1, y1) = (x0 + rng.gen_range(0.25..0.45) * w, y0 + rng.gen_range(0.25..0.45) * h);
            let wall = tint(&mut rng, 0.2);
            let outside = tint(&mut rng, 0.15);
            Box::new(move |x, y| {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                // Light falls off away from the window.
                let dist = ((x - (x0 + x1) / 2.0).powi(2) + (y - (y0 + y1) / 2.0).powi(2)).sqrt() / w;
                let room = 0.4 / (1.0 + 4.0 * dist) * texture(x, y);
                std::array::from_fn(|c| if inside { gain * outside[c] * (0.8 + 0.2 * y / h) } else { room * wall[c] })
            })
        }
        Layout::NightLamps => {
            let n = rng.gen_range(2..=4);
            let lamps: Vec<_> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.1..0.9) * w,
                        rng.gen_range(0.2..0.6) * h,
                        rng.gen_range(0.03..0.07) * w,
                        tint(&mut rng, 0.25),
                    )
                })
                .collect();
            let ground = h * rng.gen_range(0.6..0.8);
            Box::new(move |x, y| {
                let mut v = [0.05 * texture(x, y); 3];
                if y > ground {
                    v = [0.12 * texture(x, y); 3];
                }
                for &(cx, cy, r, t) in &lamps {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    let glow = 2.0 / (1.0 + d2 / (4.0 * r * r));
                    let core = disk(x, y, cx, cy, r) * gain;
                    for c in 0..3 {
                        v[c] += (glow + core) * t[c];
                    }
                }
                v
            })
        }
    };
    RgbImage::from_fn(spec.width, spec.height, |x, y| field(x as f64 + 0.5, y as f64 + 0.5))
}

pub fn generate_scene(id: usize, spec: &SceneSpec, cfg: &SceneConfig) -> Result<DatasetRecord> {
    cfg.validate()?;
    let raw = RadianceMap::new(render(spec)?)?;
    let scale = compute_radiance_scale(&raw)?;
    let image = normalize(&raw, scale)?;
    let brackets = bracket_decompose(&image, &cfg.ev_list)?;
    Ok(DatasetRecord {
        id,
        spec: spec.clone(),
        image,
        log_radiance: spec.log_radiance,
        caption: cfg.caption(spec),
        brackets,
    })
}

/// SplitMix64 step, used to derive distinct per-record seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` distinct scene seeds in a reproducible shuffled order.
pub fn record_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut seeds: Vec<u64> = (0..n as u64).map(|i| mix(seed.wrapping_mul(0x1000_0000_01b3) ^ i)).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut extra = n as u64;
    while seeds.len() < n {
        seeds.push(mix(seed ^ extra));
        extra += 1;
        seeds.sort_unstable();
        seeds.dedup();
    }
    seeds.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    seeds
}

/// Lazily generated stream of `n` records.
pub fn dataset_iter(
    n: usize,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<impl Iterator<Item = Result<DatasetRecord>> + '_> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one record".into()));
    }
    cfg.validate()?;
    Ok(record_seeds(n, seed)
        .into_iter()
        .enumerate()
        .map(move |(i, s)| generate_scene(i, &cfg.spec(s), cfg)))
}

/// A fixed train / held-out split of one seeded stream.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<DatasetRecord>,
    pub held_out: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn generate(train: usize, held_out: usize, seed: u64, cfg: &SceneConfig) -> Result<Self> {
        let mut records = dataset_iter(train + held_out, seed, cfg)?.collect::<Result<Vec<_>>>()?;
        let held = records.split_off(train);
        Ok(Dataset {
            train: records,
            held_out: held,
        })
    }
}
