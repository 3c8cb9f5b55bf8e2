//! Seeded geo-tagged multispectral datasets where nearby locations share
//! semantics, stored in the GSD1 layout:
//!
//! * `manifest.json`: counts, shapes, class names, per-channel 99th
//!   percentiles, split membership and per-record coordinates, timestamps,
//!   labels, locations and regions.
//! * `patches.bin`: little-endian `f32`, record-major `[N * T, C, H, W]`,
//!   record `loc * T + t`.
//!
//! A patch is the sum of a class signature, a region variation, a smooth
//! location field, a seasonal offset, a per-image illumination offset, a
//! region texture and pixel noise, in raw reflectance-like units. Class,
//! region and field terms are spectral shapes (zero mean across channels);
//! season and illumination shift every channel equally.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{mix_seed, percentile_normalize, AugError, Patch};
use crate::geo::{GeoCoordinate, EARTH_RADIUS_KM};

pub const FORMAT: &str = "GSD1";
pub const VERSION: u32 = 1;
/// Files of a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATCHES_FILE: &str = "patches.bin";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset configuration: {0}")]
    Config(String),
    #[error("blocked split needs a class spanning at least two regions")]
    NoBlockableClass,
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Aug(#[from] AugError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Locations split at random, stratified by class.
    #[default]
    Random,
    /// Whole regions held out: train and test share no region.
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_locations: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub regions: usize,
    pub timestamps: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Correlation length of the smooth location field, km.
    pub length_scale_km: f64,
    pub seed: u64,
    pub split: SplitKind,
    pub test_fraction: f64,
    pub base_level: f64,
    pub class_amplitude: f64,
    pub region_amplitude: f64,
    pub field_amplitude: f64,
    pub season_amplitude: f64,
    /// Per-image illumination offset, shared by all channels and pixels.
    pub instance_amplitude: f64,
    pub texture_amplitude: f64,
    /// Great-circle harmonics summed for the location field.
    pub harmonics: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_locations: 4096,
            channels: 4,
            height: 16,
            width: 16,
            classes: 5,
            regions: 8,
            timestamps: 4,
            noise: 50.0,
            length_scale_km: 2000.0,
            seed: 0,
            split: SplitKind::Random,
            test_fraction: 0.2,
            base_level: 1500.0,
            class_amplitude: 300.0,
            region_amplitude: 150.0,
            field_amplitude: 300.0,
            season_amplitude: 500.0,
            instance_amplitude: 400.0,
            texture_amplitude: 100.0,
            harmonics: 24,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        for (name, v) in [
            ("n_locations", self.n_locations),
            ("channels", self.channels),
            ("height", self.height),
            ("width", self.width),
            ("classes", self.classes),
            ("regions", self.regions),
            ("timestamps", self.timestamps),
            ("harmonics", self.harmonics),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.regions < self.classes {
            return bad(format!(
                "{} regions cannot cover {} classes",
                self.regions, self.classes
            ));
        }
        if !(self.length_scale_km > 0.0 && self.length_scale_km.is_finite()) {
            return bad(format!(
                "length_scale_km {} must be > 0",
                self.length_scale_km
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction {} not in (0, 1)",
                self.test_fraction
            ));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("base_level", self.base_level),
            ("class_amplitude", self.class_amplitude),
            ("region_amplitude", self.region_amplitude),
            ("field_amplitude", self.field_amplitude),
            ("season_amplitude", self.season_amplitude),
            ("instance_amplitude", self.instance_amplitude),
            ("texture_amplitude", self.texture_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Typical diameter of one region cell, `4R / sqrt(regions)`.
    pub fn region_diameter_km(&self) -> f64 {
        4.0 * EARTH_RADIUS_KM / (self.regions as f64).sqrt()
    }

    pub fn n_records(&self) -> usize {
        self.n_locations * self.timestamps
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Uniform points on the sphere: longitude uniform, sine of latitude uniform.
pub fn sample_locations(n: usize, seed: u64) -> Vec<GeoCoordinate> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x10c]));
    (0..n)
        .map(|_| {
            let lon = rng.random_range(-PI..PI);
            let lat = rng.random_range(-1.0f64..=1.0).asin();
            GeoCoordinate::new(lon, lat).expect("sampled coordinate in range")
        })
        .collect()
}

/// Removes the mean across entries. A single channel is left unchanged.
fn centered(mut v: Vec<f64>) -> Vec<f64> {
    if v.len() > 1 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= m);
    }
    v
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ];
        let n = dot3(v, v).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Dataset-wide random structure derived from the seed: region seeds,
/// class and region signatures, field harmonics and seasonal offsets.
#[derive(Debug, Clone)]
pub struct World {
    cfg: SynthConfig,
    region_seeds: Vec<[f64; 3]>,
    region_class: Vec<usize>,
    class_levels: Vec<Vec<f64>>,
    /// Texture frequency of each region prototype, cycles per patch side.
    region_freq: Vec<f64>,
    region_levels: Vec<Vec<f64>>,
    /// Per harmonic: direction, phase, per-channel weights.
    harmonics: Vec<([f64; 3], f64, Vec<f64>)>,
    /// Brightness shift of each timestamp.
    season: Vec<f64>,
}

impl World {
    pub fn new(cfg: &SynthConfig) -> Result<Self, SynthError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x3041d]));
        let c = cfg.channels;
        let levels = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..c).map(|_| rng.random_range(-1.0..=1.0)).collect())
                .collect()
        };
        // land-cover signatures are spectral shapes: zero mean across channels
        let shapes = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            levels(rng, n).into_iter().map(centered).collect()
        };
        let region_seeds = (0..cfg.regions).map(|_| random_unit(&mut rng)).collect();
        // every class gets at least one region, the rest are drawn at random
        let mut region_class: Vec<usize> = (0..cfg.regions)
            .map(|r| {
                if r < cfg.classes {
                    r
                } else {
                    rng.random_range(0..cfg.classes)
                }
            })
            .collect();
        region_class.shuffle(&mut rng);
        let class_levels = shapes(&mut rng, cfg.classes);
        let region_levels = shapes(&mut rng, cfg.regions);
        let kappa = EARTH_RADIUS_KM / cfg.length_scale_km;
        let harmonics = (0..cfg.harmonics)
            .map(|_| {
                let dir = random_unit(&mut rng);
                let phase = rng.random_range(0.0..2.0 * PI);
                let w = centered(
                    (0..c)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
                let dir = [dir[0] * kappa, dir[1] * kappa, dir[2] * kappa];
                (dir, phase, w)
            })
            .collect();
        let region_freq = (0..cfg.regions)
            .map(|_| rng.random_range(1.0..4.0))
            .collect();
        let season = (0..cfg.timestamps)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            region_seeds,
            region_class,
            class_levels,
            region_freq,
            region_levels,
            harmonics,
            season,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Spherical Voronoi cell containing `loc` (ties to the lower index).
    pub fn region_of(&self, loc: GeoCoordinate) -> usize {
        let p = loc.unit_vector();
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (r, s) in self.region_seeds.iter().enumerate() {
            let d = dot3(p, *s);
            if d > best_dot {
                best = r;
                best_dot = d;
            }
        }
        best
    }

    pub fn class_of_region(&self, region: usize) -> usize {
        self.region_class[region]
    }

    pub fn label_of(&self, loc: GeoCoordinate) -> usize {
        self.region_class[self.region_of(loc)]
    }

    /// Smooth per-channel field with unit-order variance.
    pub fn field(&self, loc: GeoCoordinate) -> Vec<f64> {
        let p = loc.unit_vector();
        let mut out = vec![0.0; self.cfg.channels];
        for (dir, phase, w) in &self.harmonics {
            let v = (dot3(*dir, p) + phase).cos();
            for (o, wc) in out.iter_mut().zip(w) {
                *o += wc * v;
            }
        }
        let norm = (2.0 / self.harmonics.len() as f64).sqrt();
        out.iter_mut().for_each(|o| *o *= norm);
        out
    }

    /// Raw patch for location index `loc_index` at timestamp `t`.
    pub fn render(&self, loc_index: usize, loc: GeoCoordinate, t: usize) -> Vec<f32> {
        let cfg = &self.cfg;
        let region = self.region_of(loc);
        let class = self.region_class[region];
        let field = self.field(loc);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, loc_index as u64, t as u64]));
        let illumination: f64 = rng.sample(StandardNormal);
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let freq = 2.0 * PI * self.region_freq[region] / cfg.height.max(cfg.width) as f64;
        let (st, ct) = theta.sin_cos();
        let mut out = Vec::with_capacity(cfg.patch_len());
        for c in 0..cfg.channels {
            let level = cfg.base_level
                + cfg.class_amplitude * self.class_levels[class][c]
                + cfg.region_amplitude * self.region_levels[region][c]
                + cfg.field_amplitude * field[c]
                + cfg.season_amplitude * self.season[t % self.season.len()]
                + cfg.instance_amplitude * illumination;
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let tex = (freq * (x as f64 * ct + y as f64 * st) + phase).cos();
                    let n: f64 = rng.sample(StandardNormal);
                    let v = level + cfg.texture_amplitude * tex + cfg.noise * n;
                    out.push(v.max(0.0) as f32);
                }
            }
        }
        out
    }
}

/// Convenience wrapper: `World::new(cfg)?.render(...)`.
pub fn render_patch(
    loc_index: usize,
    loc: GeoCoordinate,
    t: usize,
    cfg: &SynthConfig,
) -> Result<Vec<f32>, SynthError> {
    Ok(World::new(cfg)?.render(loc_index, loc, t))
}

/// Dataset description persisted as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub n_locations: usize,
    pub timestamps: usize,
    pub n_records: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub regions: usize,
    pub class_names: Vec<String>,
    /// Per-channel 99th percentile of raw values.
    pub percentiles: Vec<f32>,
    pub split: SplitKind,
    /// Record indices.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Per-record longitude and latitude, radians.
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
    pub timestamp: Vec<usize>,
    pub label: Vec<usize>,
    pub location: Vec<usize>,
    pub region: Vec<usize>,
    pub config: SynthConfig,
}

/// One record with its normalized patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub patch: Patch,
    pub location: GeoCoordinate,
    pub timestamp: usize,
    pub label: usize,
}

/// Manifest plus raw patches held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: Manifest,
    raw: Vec<f32>,
}

fn percentile_99(values: &mut [f32]) -> f32 {
    if values.is_empty() {
        return 1.0;
    }
    let idx = ((values.len() - 1) as f64 * 0.99).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, f32::total_cmp);
    if *v > 0.0 {
        *v
    } else {
        1.0
    }
}

fn split_records(
    cfg: &SynthConfig,
    world: &World,
    loc_labels: &[usize],
    loc_regions: &[usize],
) -> Result<Vec<bool>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5b17]));
    let mut is_test = vec![false; cfg.n_locations];
    match cfg.split {
        SplitKind::Random => {
            for k in 0..cfg.classes {
                let mut locs: Vec<usize> = (0..cfg.n_locations)
                    .filter(|&i| loc_labels[i] == k)
                    .collect();
                locs.shuffle(&mut rng);
                let n_test = (locs.len() as f64 * cfg.test_fraction).round() as usize;
                // keep at least one training location per populated class
                let n_test = n_test.min(locs.len().saturating_sub(1));
                for &i in &locs[..n_test] {
                    is_test[i] = true;
                }
            }
        }
        SplitKind::Blocked => {
            let mut held = vec![false; cfg.regions];
            let mut any = false;
            for k in 0..cfg.classes {
                let regions: Vec<usize> = (0..cfg.regions)
                    .filter(|&r| world.class_of_region(r) == k && loc_regions.contains(&r))
                    .collect();
                if regions.len() >= 2 {
                    held[*regions.choose(&mut rng).expect("non-empty")] = true;
                    any = true;
                }
            }
            if !any {
                return Err(SynthError::NoBlockableClass);
            }
            for i in 0..cfg.n_locations {
                is_test[i] = held[loc_regions[i]];
            }
        }
    }
    Ok(is_test)
}

/// Builds the dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset, SynthError> {
    let world = World::new(cfg)?;
    let locs = sample_locations(cfg.n_locations, cfg.seed);
    let loc_regions: Vec<usize> = locs.iter().map(|l| world.region_of(*l)).collect();
    let loc_labels: Vec<usize> = loc_regions
        .iter()
        .map(|&r| world.class_of_region(r))
        .collect();
    let is_test = split_records(cfg, &world, &loc_labels, &loc_regions)?;

    let t_count = cfg.timestamps;
    let n = cfg.n_records();
    let mut raw = Vec::with_capacity(n * cfg.patch_len());
    let (mut lon, mut lat, mut timestamp, mut label, mut location, mut region) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, loc) in locs.iter().enumerate() {
        for t in 0..t_count {
            let rec = i * t_count + t;
            raw.extend(world.render(i, *loc, t));
            lon.push(loc.lon());
            lat.push(loc.lat());
            timestamp.push(t);
            label.push(loc_labels[i]);
            location.push(i);
            region.push(loc_regions[i]);
            if is_test[i] {
                test.push(rec);
            } else {
                train.push(rec);
            }
        }
    }

    let plane = cfg.height * cfg.width;
    let percentiles = (0..cfg.channels)
        .map(|c| {
            let mut vals: Vec<f32> = (0..n)
                .flat_map(|r| {
                    let off = r * cfg.patch_len() + c * plane;
                    raw[off..off + plane].iter().copied()
                })
                .collect();
            percentile_99(&mut vals)
        })
        .collect();

    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        n_locations: cfg.n_locations,
        timestamps: t_count,
        n_records: n,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        classes: cfg.classes,
        regions: cfg.regions,
        class_names: (0..cfg.classes).map(|k| format!("class_{k}")).collect(),
        percentiles,
        split: cfg.split,
        train,
        test,
        lon,
        lat,
        timestamp,
        label,
        location,
        region,
        config: cfg.clone(),
    };
    Ok(Dataset { manifest, raw })
}

impl Dataset {
    /// Validates the manifest against itself and the patch buffer.
    pub fn from_parts(manifest: Manifest, raw: Vec<f32>) -> Result<Self, SynthError> {
        let m = &manifest;
        let fail = |msg: String| Err(SynthError::Format(msg));
        if m.format != FORMAT || m.version != VERSION {
            return fail(format!("unsupported format {} v{}", m.format, m.version));
        }
        let n = m.n_records;
        if n != m.n_locations * m.timestamps {
            return fail(format!(
                "{n} records for {} x {}",
                m.n_locations, m.timestamps
            ));
        }
        for (name, len) in [
            ("lon", m.lon.len()),
            ("lat", m.lat.len()),
            ("timestamp", m.timestamp.len()),
            ("label", m.label.len()),
            ("location", m.location.len()),
            ("region", m.region.len()),
        ] {
            if len != n {
                return fail(format!("{name} has {len} entries, expected {n}"));
            }
        }
        if m.percentiles.len() != m.channels || m.percentiles.iter().any(|p| !(*p > 0.0)) {
            return fail("percentiles must be positive, one per channel".into());
        }
        if m.class_names.len() != m.classes || m.label.iter().any(|&l| l >= m.classes) {
            return fail("labels out of range".into());
        }
        let mut seen = vec![false; n];
        for &r in m.train.iter().chain(&m.test) {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return fail(format!("split index {r} repeated or out of range"));
            }
        }
        let expected = n * m.channels * m.height * m.width;
        if raw.len() != expected {
            return fail(format!(
                "patch store has {} values, expected {expected}",
                raw.len()
            ));
        }
        for i in 0..n {
            GeoCoordinate::new(m.lon[i], m.lat[i])
                .map_err(|e| SynthError::Format(format!("record {i}: {e}")))?;
        }
        Ok(Self { manifest, raw })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.n_records
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let m = &self.manifest;
        (m.channels, m.height, m.width)
    }

    pub fn patch_len(&self) -> usize {
        let (c, h, w) = self.dims();
        c * h * w
    }

    pub fn raw_patch(&self, record: usize) -> &[f32] {
        let n = self.patch_len();
        &self.raw[record * n..(record + 1) * n]
    }

    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    /// Percentile-normalized patch in `[0, 255]`.
    pub fn patch(&self, record: usize) -> Result<Patch, SynthError> {
        let (c, h, w) = self.dims();
        Ok(percentile_normalize(
            self.raw_patch(record),
            c,
            h,
            w,
            &self.manifest.percentiles,
        )?)
    }

    pub fn coord(&self, record: usize) -> GeoCoordinate {
        GeoCoordinate::new(self.manifest.lon[record], self.manifest.lat[record])
            .expect("validated on load")
    }

    pub fn label(&self, record: usize) -> usize {
        self.manifest.label[record]
    }

    pub fn sample(&self, record: usize) -> Result<SampleRecord, SynthError> {
        Ok(SampleRecord {
            patch: self.patch(record)?,
            location: self.coord(record),
            timestamp: self.manifest.timestamp[record],
            label: self.label(record),
        })
    }

    /// Record index of `location` at timestamp `t`.
    pub fn record_of(&self, location: usize, t: usize) -> usize {
        location * self.manifest.timestamps + t
    }

    /// Writes `manifest.json` and `patches.bin` into `dir` (created if
    /// missing).
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mpath = dir.join(MANIFEST_FILE);
        let mut mf = BufWriter::new(File::create(&mpath).map_err(io_err(&mpath))?);
        serde_json::to_writer(&mut mf, &self.manifest)?;
        mf.flush().map_err(io_err(&mpath))?;
        let ppath = dir.join(PATCHES_FILE);
        let mut pf = BufWriter::new(File::create(&ppath).map_err(io_err(&ppath))?);
        for v in &self.raw {
            pf.write_all(&v.to_le_bytes()).map_err(io_err(&ppath))?;
        }
        pf.flush().map_err(io_err(&ppath))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: Manifest =
            serde_json::from_reader(BufReader::new(File::open(&mpath).map_err(io_err(&mpath))?))?;
        let ppath = dir.join(PATCHES_FILE);
        let mut bytes = Vec::new();
        File::open(&ppath)
            .map_err(io_err(&ppath))?
            .read_to_end(&mut bytes)
            .map_err(io_err(&ppath))?;
        if bytes.len() % 4 != 0 {
            return Err(SynthError::Format(format!(
                "{PATCHES_FILE} length {} is not a multiple of 4",
                bytes.len()
            )));
        }
        let raw = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_parts(manifest, raw)
    }
}
