//! Seeded multispectral augmentation: geometric and channel techniques over
//! `C x H x W` patches with values in `[0, 255]`, plus percentile scaling of
//! raw reflectances.
//!
//! Each pipeline position draws from its own ChaCha substream keyed by
//! `(seed, position)`, so changing one spec's probability or parameters
//! never shifts the randomness seen by the others.

pub mod ops;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugError {
    #[error("invalid augmentation parameter: {0}")]
    Param(String),
    #[error("patch data length {len} does not match {c}x{h}x{w}")]
    Shape {
        c: usize,
        h: usize,
        w: usize,
        len: usize,
    },
    #[error("patch contains a non-finite value")]
    NonFinite,
    #[error("percentile for channel {channel} must be positive, got {value}")]
    Percentile { channel: usize, value: f32 },
    #[error("cannot parse pipeline: {0}")]
    Parse(String),
}

/// Channel-major image, `data[(c * H + y) * W + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self, AugError> {
        if c == 0 || h == 0 || w == 0 || data.len() != c * h * w {
            return Err(AugError::Shape {
                c,
                h,
                w,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AugError::NonFinite);
        }
        Ok(Self { c, h, w, data })
    }

    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self { c, h, w, data }
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f32 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, ch: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sub_patch(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        Self::from_fn(self.c, h, w, |ch, y, x| self.at(ch, top + y, left + x))
    }

    /// Centered crop; errors if the crop exceeds the patch.
    pub fn center_crop(&self, h: usize, w: usize) -> Result<Self, AugError> {
        if h == 0 || w == 0 || h > self.h || w > self.w {
            return Err(AugError::Param(format!(
                "center crop {h}x{w} of {}x{}",
                self.h, self.w
            )));
        }
        Ok(self.sub_patch((self.h - h) / 2, (self.w - w) / 2, h, w))
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=ops::MAX_VALUE).contains(v))
    }
}

/// `clip(value / p_c, 0, 1) * 255` per channel.
pub fn percentile_normalize(
    raw: &[f32],
    c: usize,
    h: usize,
    w: usize,
    percentiles: &[f32],
) -> Result<Patch, AugError> {
    if percentiles.len() != c {
        return Err(AugError::Param(format!(
            "{} percentiles for {c} channels",
            percentiles.len()
        )));
    }
    for (channel, &value) in percentiles.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(AugError::Percentile { channel, value });
        }
    }
    if raw.len() != c * h * w {
        return Err(AugError::Shape {
            c,
            h,
            w,
            len: raw.len(),
        });
    }
    let n = h * w;
    let data = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / percentiles[i / n]).clamp(0.0, 1.0) * ops::MAX_VALUE)
        .collect();
    Patch::new(c, h, w, data)
}

fn unit_interval(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

/// One technique and its strength parameters. Field names double as the
/// pipeline file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "technique", rename_all = "snake_case", deny_unknown_fields)]
pub enum Technique {
    /// Random resized crop. `size` defaults to the input size.
    Rrc {
        scale: (f64, f64),
        ratio: (f64, f64),
        #[serde(default)]
        size: Option<(usize, usize)>,
    },
    Hflip,
    Vflip,
    /// Horizontal, vertical or both, chosen uniformly.
    Flip,
    /// `k` quarter turns with `k` uniform in `0..4`.
    Rr90,
    /// Additive offset `U(-limit, limit) * 255`.
    Brightness {
        limit: f64,
    },
    /// Gain `1 + U(-limit, limit)`.
    Contrast {
        limit: f64,
    },
    /// Unsharp-mask amount `U(0, alpha)`.
    Sharpness {
        alpha: f64,
    },
    /// Standard deviation `U(0.1, sigma)` in pixels.
    GaussianBlur {
        sigma: f64,
    },
    /// Per-value noise with variance `U(0, var)`.
    GaussianNoise {
        var: f64,
    },
    Solarize {
        threshold: f64,
    },
    Posterize {
        bits: u8,
    },
    Grayscale,
    /// Hole of at most `max_edge * H` by `max_edge * W` pixels.
    Cutout {
        max_edge: f64,
    },
    /// Permutes the cells of a `grid x grid` tiling.
    GridShuffle {
        grid: usize,
    },
    /// Horizontal shear, angle `U(-angle, angle)` degrees.
    Shear {
        angle: f64,
    },
    /// Shift by up to `percent` of each side.
    Translate {
        percent: f64,
    },
}

impl Technique {
    pub fn name(&self) -> &'static str {
        match self {
            Technique::Rrc { .. } => "rrc",
            Technique::Hflip => "hflip",
            Technique::Vflip => "vflip",
            Technique::Flip => "flip",
            Technique::Rr90 => "rr90",
            Technique::Brightness { .. } => "brightness",
            Technique::Contrast { .. } => "contrast",
            Technique::Sharpness { .. } => "sharpness",
            Technique::GaussianBlur { .. } => "gaussian_blur",
            Technique::GaussianNoise { .. } => "gaussian_noise",
            Technique::Solarize { .. } => "solarize",
            Technique::Posterize { .. } => "posterize",
            Technique::Grayscale => "grayscale",
            Technique::Cutout { .. } => "cutout",
            Technique::GridShuffle { .. } => "grid_shuffle",
            Technique::Shear { .. } => "shear",
            Technique::Translate { .. } => "translate",
        }
    }

    /// Every technique name accepted by [`Technique::with_strength`].
    pub const NAMES: [&'static str; 14] = [
        "brightness",
        "contrast",
        "sharpness",
        "gaussian_blur",
        "gaussian_noise",
        "solarize",
        "posterize",
        "grayscale",
        "rrc",
        "cutout",
        "grid_shuffle",
        "shear",
        "translate",
        "rr90",
    ];

    /// Base parameters scaled by the strength multiplier `beta`. Thresholds
    /// and bit depths do not scale. A stronger crop means a smaller minimum
    /// scale, so `rrc` divides its lower bound by `beta`.
    pub fn with_strength(name: &str, beta: f64) -> Result<Self, AugError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(AugError::Param(format!("strength {beta} must be > 0")));
        }
        Ok(match name {
            "brightness" => Technique::Brightness { limit: 0.1 * beta },
            "contrast" => Technique::Contrast { limit: 0.1 * beta },
            "sharpness" => Technique::Sharpness { alpha: 0.1 * beta },
            "gaussian_blur" => Technique::GaussianBlur { sigma: 1.5 * beta },
            "gaussian_noise" => Technique::GaussianNoise { var: 30.0 * beta },
            "solarize" => Technique::Solarize { threshold: 128.0 },
            "posterize" => Technique::Posterize { bits: 4 },
            "grayscale" => Technique::Grayscale,
            "rrc" => Technique::Rrc {
                scale: (0.2 / beta, 1.0),
                ratio: (0.75, 1.33),
                size: None,
            },
            "cutout" => Technique::Cutout {
                max_edge: 0.2 * beta,
            },
            "grid_shuffle" => Technique::GridShuffle {
                grid: (2.0 * beta).round() as usize,
            },
            "shear" => Technique::Shear { angle: 10.0 * beta },
            "translate" => Technique::Translate {
                percent: 10.0 * beta,
            },
            "rr90" => Technique::Rr90,
            other => return Err(AugError::Param(format!("unknown technique {other}"))),
        })
    }

    pub fn validate(&self) -> Result<(), AugError> {
        let bad = |what: String| Err(AugError::Param(what));
        match *self {
            Technique::Rrc { scale, ratio, size } => {
                if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
                    return bad(format!("rrc scale {scale:?}"));
                }
                if !(ratio.0 > 0.0 && ratio.0 <= ratio.1 && ratio.1.is_finite()) {
                    return bad(format!("rrc ratio {ratio:?}"));
                }
                if let Some((h, w)) = size {
                    if h == 0 || w == 0 {
                        return bad(format!("rrc size {h}x{w}"));
                    }
                }
            }
            Technique::Brightness { limit } | Technique::Contrast { limit } => {
                if !(0.0..=1.0).contains(&limit) {
                    return bad(format!("{} limit {limit} not in [0, 1]", self.name()));
                }
            }
            Technique::Sharpness { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return bad(format!("sharpness alpha {alpha} not in [0, 1]"));
                }
            }
            Technique::GaussianBlur { sigma } => {
                if !(sigma > 0.0 && sigma <= 10.0) {
                    return bad(format!("blur sigma {sigma} not in (0, 10]"));
                }
            }
            Technique::GaussianNoise { var } => {
                if !(0.0..=1e4).contains(&var) {
                    return bad(format!("noise variance {var} not in [0, 1e4]"));
                }
            }
            Technique::Solarize { threshold } => {
                if !(0.0..=255.0).contains(&threshold) {
                    return bad(format!("solarize threshold {threshold} not in [0, 255]"));
                }
            }
            Technique::Posterize { bits } => {
                if !(1..=8).contains(&bits) {
                    return bad(format!("posterize bits {bits} not in 1..=8"));
                }
            }
            Technique::Cutout { max_edge } => {
                if !(max_edge > 0.0 && max_edge <= 1.0) {
                    return bad(format!("cutout max_edge {max_edge} not in (0, 1]"));
                }
            }
            Technique::GridShuffle { grid } => {
                if grid < 1 {
                    return bad("grid_shuffle grid must be >= 1".into());
                }
            }
            Technique::Shear { angle } => {
                if !(0.0..80.0).contains(&angle) {
                    return bad(format!("shear angle {angle} not in [0, 80)"));
                }
            }
            Technique::Translate { percent } => {
                if !(0.0..=100.0).contains(&percent) {
                    return bad(format!("translate percent {percent} not in [0, 100]"));
                }
            }
            Technique::Hflip
            | Technique::Vflip
            | Technique::Flip
            | Technique::Rr90
            | Technique::Grayscale => {}
        }
        Ok(())
    }

    /// Draws this technique's random parameters from `rng` and applies it.
    pub fn transform(&self, patch: &Patch, rng: &mut ChaCha8Rng) -> Result<Patch, AugError> {
        let (_, h, w) = patch.dims();
        Ok(match *self {
            Technique::Rrc { scale, ratio, size } => {
                let (out_h, out_w) = size.unwrap_or((h, w));
                let (top, left, ch, cw) = rrc_window(h, w, scale, ratio, rng);
                ops::resized_crop(patch, top, left, ch, cw, out_h, out_w)?
            }
            Technique::Hflip => ops::hflip(patch),
            Technique::Vflip => ops::vflip(patch),
            Technique::Flip => match rng.random_range(0..3u8) {
                0 => ops::hflip(patch),
                1 => ops::vflip(patch),
                _ => ops::rot90(patch, 2),
            },
            Technique::Rr90 => ops::rot90(patch, rng.random_range(0..4u8)),
            Technique::Brightness { limit } => {
                let b = symmetric(rng, limit);
                ops::brightness(patch, (b * ops::MAX_VALUE as f64) as f32)
            }
            Technique::Contrast { limit } => {
                ops::contrast(patch, (1.0 + symmetric(rng, limit)) as f32)
            }
            Technique::Sharpness { alpha } => {
                ops::sharpen(patch, rng.random_range(0.0..=alpha) as f32)
            }
            Technique::GaussianBlur { sigma } => {
                let lo = sigma.min(0.1);
                ops::gaussian_blur(patch, rng.random_range(lo..=sigma))
            }
            Technique::GaussianNoise { var } => {
                let std = rng.random_range(0.0..=var).sqrt();
                let noise: Vec<f32> = if std > 0.0 {
                    let normal =
                        Normal::new(0.0, std).map_err(|e| AugError::Param(e.to_string()))?;
                    (0..patch.data().len())
                        .map(|_| normal.sample(rng) as f32)
                        .collect()
                } else {
                    vec![0.0; patch.data().len()]
                };
                ops::add_noise(patch, &noise)?
            }
            Technique::Solarize { threshold } => ops::solarize(patch, threshold as f32),
            Technique::Posterize { bits } => ops::posterize(patch, bits)?,
            Technique::Grayscale => ops::grayscale(patch),
            Technique::Cutout { max_edge } => {
                let max_h = ((max_edge * h as f64).floor() as usize).max(1).min(h);
                let max_w = ((max_edge * w as f64).floor() as usize).max(1).min(w);
                let hh = rng.random_range(1..=max_h);
                let hw = rng.random_range(1..=max_w);
                let top = rng.random_range(0..=h - hh);
                let left = rng.random_range(0..=w - hw);
                ops::cutout(patch, top, left, hh, hw)
            }
            Technique::GridShuffle { grid } => {
                let g = grid.min(h).min(w);
                let perm = grid_permutation(h, w, g, rng);
                ops::grid_shuffle(patch, g, &perm)?
            }
            Technique::Shear { angle } => ops::shear(patch, symmetric(rng, angle)),
            Technique::Translate { percent } => {
                let f = percent / 100.0;
                let dy = (symmetric(rng, f) * h as f64).round() as isize;
                let dx = (symmetric(rng, f) * w as f64).round() as isize;
                ops::translate(patch, dy, dx)
            }
        })
    }
}

fn symmetric(rng: &mut ChaCha8Rng, limit: f64) -> f64 {
    if limit == 0.0 {
        0.0
    } else {
        rng.random_range(-limit..=limit)
    }
}

/// Crop window following the usual area/aspect rejection sampler with a
/// center-crop fallback after ten attempts.
fn rrc_window(
    h: usize,
    w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = rng.random_range(lr0..=lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        ((w as f64 / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, (h as f64 * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Random permutation that only exchanges equal-sized cells.
fn grid_permutation(h: usize, w: usize, g: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rows = ops::bands(h, g);
    let cols = ops::bands(w, g);
    let sizes: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|r| cols.iter().map(move |c| (r.1 - r.0, c.1 - c.0)))
        .collect();
    let mut perm: Vec<usize> = (0..sizes.len()).collect();
    let mut classes: Vec<(usize, usize)> = sizes.clone();
    classes.sort_unstable();
    classes.dedup();
    for class in classes {
        let slots: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] == class).collect();
        let mut shuffled = slots.clone();
        shuffled.shuffle(rng);
        for (s, t) in slots.iter().zip(shuffled) {
            perm[*s] = t;
        }
    }
    perm
}

/// A technique that fires with probability `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugSpec {
    pub p: f64,
    #[serde(flatten)]
    pub technique: Technique,
}

impl AugSpec {
    pub fn new(technique: Technique, p: f64) -> Result<Self, AugError> {
        let spec = Self { p, technique };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), AugError> {
        if !unit_interval(self.p) {
            return Err(AugError::Param(format!(
                "probability {} not in [0, 1]",
                self.p
            )));
        }
        self.technique.validate()
    }
}

/// Ordered list of specs applied left to right.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugPipeline {
    #[serde(default)]
    pub spec: Vec<AugSpec>,
}

impl AugPipeline {
    pub fn new(spec: Vec<AugSpec>) -> Result<Self, AugError> {
        let p = Self { spec };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AugError> {
        self.spec.iter().try_for_each(AugSpec::validate)
    }

    /// Crop, flips and quarter turns: the remote-sensing default.
    pub fn geometric(size: Option<(usize, usize)>) -> Self {
        Self {
            spec: vec![
                AugSpec {
                    p: 1.0,
                    technique: Technique::Rrc {
                        scale: (0.2, 1.0),
                        ratio: (0.75, 1.33),
                        size,
                    },
                },
                AugSpec {
                    p: 0.75,
                    technique: Technique::Flip,
                },
                AugSpec {
                    p: 0.75,
                    technique: Technique::Rr90,
                },
            ],
        }
    }

    /// The natural-image default: crop, colour jitter, blur, grayscale and
    /// horizontal flips.
    pub fn standard(size: Option<(usize, usize)>) -> Self {
        let spec = |p, technique| AugSpec { p, technique };
        Self {
            spec: vec![
                spec(
                    1.0,
                    Technique::Rrc {
                        scale: (0.2, 1.0),
                        ratio: (0.75, 1.33),
                        size,
                    },
                ),
                spec(0.8, Technique::Contrast { limit: 0.4 }),
                spec(0.8, Technique::Brightness { limit: 0.4 }),
                spec(0.2, Technique::Grayscale),
                spec(0.5, Technique::GaussianBlur { sigma: 2.0 }),
                spec(0.5, Technique::Hflip),
            ],
        }
    }

    /// Appends one technique, the ablation protocol's unit of change.
    pub fn with(mut self, spec: AugSpec) -> Result<Self, AugError> {
        spec.validate()?;
        self.spec.push(spec);
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, AugError> {
        let p: Self = toml::from_str(text).map_err(|e| AugError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml_string(&self) -> Result<String, AugError> {
        toml::to_string(self).map_err(|e| AugError::Parse(e.to_string()))
    }

    /// Applies every spec in order; position `i` uses substream `i` of the
    /// generator seeded with `seed`.
    pub fn apply(&self, patch: &Patch, seed: u64) -> Result<Patch, AugError> {
        let mut out = patch.clone();
        for (i, spec) in self.spec.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let fire = rng.random::<f64>() < spec.p;
            if fire {
                out = spec.technique.transform(&out, &mut rng)?;
            }
        }
        Ok(out)
    }
}

/// SplitMix64 finalizer folded over `parts`; derives independent seeds for
/// (run, step, item, view) tuples.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
