//! Procedural person dataset, PK batch sampling and training augmentation.
//!
//! Identities carry head-shoulder attributes (hair, skin, glasses, shoulder
//! width) and clothing colors. A configurable share of identities wears
//! near-black clothing, so only the head-shoulder region tells them apart.

mod io;
mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use io::{read_manifest, read_ppm, write_manifest, write_ppm, MANIFEST_FILE};
pub use render::{
    is_black_slot, luminance, quantize, render_sample, sample_identities, IdentitySpec, PersonSample,
    BLACK_LUMINANCE, ILLUMINATION,
};
pub(crate) use render::render_with_layout;
#[cfg(test)]
pub(crate) use render::torso_luminance;

/// A 3-channel image in channel-major layout with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn flip_horizontal(&mut self) {
        for row in self.data.chunks_mut(self.width) {
            row.reverse();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Image path relative to the dataset directory.
    pub path: String,
    pub id: usize,
    pub camera: u8,
    pub black: bool,
    pub bbox: [f64; 4],
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub num_ids: usize,
    pub num_black: usize,
    pub samples_per_id: usize,
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of identities used for training; the rest form query and gallery.
    pub train_fraction: f64,
    pub queries_per_id: usize,
    /// Minimum head-shoulder attribute separation within the black cohort.
    pub min_separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_ids: 120,
            num_black: 48,
            samples_per_id: 10,
            cameras: 6,
            height: 96,
            width: 32,
            train_fraction: 0.5,
            queries_per_id: 2,
            min_separation: 0.15,
        }
    }
}

impl DataConfig {
    pub fn num_train_ids(&self) -> usize {
        (self.num_ids as f64 * self.train_fraction).round() as usize
    }

    pub fn camera_of(&self, id: usize, sample: usize) -> u8 {
        ((sample + id) % self.cameras + 1) as u8
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(Error::invalid(format!("unsatisfiable dataset config: {why}")));
        if self.num_black > self.num_ids {
            return fail(format!("{} black identities among {}", self.num_black, self.num_ids));
        }
        if self.cameras < 2 || self.cameras > ILLUMINATION.len() {
            return fail(format!("cameras must be in 2..={}, got {}", ILLUMINATION.len(), self.cameras));
        }
        if self.height < 8 || self.width < 4 {
            return fail(format!("image size {}x{} is too small", self.height, self.width));
        }
        let train = self.num_train_ids();
        if train < 2 || train >= self.num_ids {
            return fail(format!(
                "train fraction {} leaves {train} training and {} test identities",
                self.train_fraction,
                self.num_ids.saturating_sub(train)
            ));
        }
        if self.samples_per_id < 2 {
            return fail("at least 2 samples per identity are needed".into());
        }
        let q = self.queries_per_id;
        if q == 0 || q >= self.samples_per_id {
            return fail(format!("{q} queries per identity with {} samples", self.samples_per_id));
        }
        // each query camera needs a gallery image under another camera
        for j in 0..q {
            let cam = self.camera_of(0, j);
            if !(q..self.samples_per_id).any(|g| self.camera_of(0, g) != cam) {
                return fail(format!("query sample {j} has no gallery image under another camera"));
            }
        }
        Ok(())
    }
}

/// Rows plus decoded images, aligned by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub images: Vec<Image>,
}

fn sample_seed(master: u64, id: usize, sample: usize) -> u64 {
    use rand::RngCore;
    rng::stream(master, rng::SAMPLES, ((id as u64) << 20) | sample as u64).next_u64()
}

pub fn image_path(id: usize, sample: usize) -> String {
    format!("images/{id:04}_{sample:02}.ppm")
}

/// Generates the dataset in memory. Pure function of `(config, seed)`.
pub fn generate(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let specs = sample_identities(seed, config.num_ids, config.num_black, config.min_separation)?;
    let n_train = config.num_train_ids();
    let mut records = Vec::new();
    let mut images = Vec::new();
    for (id, spec) in specs.iter().enumerate() {
        for j in 0..config.samples_per_id {
            let camera = config.camera_of(id, j);
            let (image, layout) =
                render_with_layout(spec, camera, sample_seed(seed, id, j), config.height, config.width)?;
            let split = if id < n_train {
                Split::Train
            } else if j < config.queries_per_id {
                Split::Query
            } else {
                Split::Gallery
            };
            records.push(Record {
                path: image_path(id, j),
                id,
                camera,
                black: spec.black(),
                bbox: layout.head_shoulder_box().map(|v| (v * 1e6).round() / 1e6),
                split,
            });
            images.push(image);
        }
    }
    Ok(Dataset { records, images })
}

/// Generates the dataset and writes images plus manifest under `dir`.
pub fn generate_dataset(config: &DataConfig, seed: u64, dir: &Path) -> Result<Dataset> {
    let ds = generate(config, seed)?;
    ds.write(dir)?;
    Ok(ds)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (r, img) in self.records.iter().zip(&self.images) {
            write_ppm(&dir.join(&r.path), img)?;
        }
        write_manifest(&dir.join(MANIFEST_FILE), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let images = records
            .iter()
            .map(|r| read_ppm(&dir.join(&r.path)))
            .collect::<Result<Vec<_>>>()?;
        let ds = Self { records, images };
        ds.check_integrity()?;
        Ok(ds)
    }

    /// Query identities must all appear in the gallery; boxes must be well formed.
    pub fn check_integrity(&self) -> Result<()> {
        crate::losses::validate_boxes(&self.records.iter().map(|r| r.bbox).collect::<Vec<_>>())?;
        let gallery: std::collections::BTreeSet<usize> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Gallery)
            .map(|r| r.id)
            .collect();
        if let Some(r) = self.records.iter().find(|r| r.split == Split::Query && !gallery.contains(&r.id)) {
            return Err(Error::format("manifest", format!("query identity {} has no gallery images", r.id)));
        }
        if let Some(img) = self.images.iter().find(|i| (i.height, i.width) != (self.images[0].height, self.images[0].width)) {
            return Err(Error::format("manifest", format!("mixed image sizes, found {}x{}", img.height, img.width)));
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Stacks the chosen images into an `[n, 3, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        batch_images(indices.iter().map(|&i| &self.images[i]))
    }

    /// Maps the identities of `indices` onto dense labels `0..k` in sorted order.
    pub fn label_map(&self, indices: &[usize]) -> BTreeMap<usize, usize> {
        let ids: std::collections::BTreeSet<usize> = indices.iter().map(|&i| self.records[i].id).collect();
        ids.into_iter().enumerate().map(|(k, id)| (id, k)).collect()
    }
}

pub fn batch_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = None;
    for img in images {
        if *hw.get_or_insert((img.height, img.width)) != (img.height, img.width) {
            return Err(Error::invalid("batch_images: images differ in size"));
        }
        data.extend_from_slice(&img.data);
        n += 1;
    }
    let (h, w) = hw.ok_or_else(|| Error::invalid("batch_images: empty batch"))?;
    Tensor::new(&[n, 3, h, w], data)
}

/// Identity-balanced sampling over a pool of records.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_id: BTreeMap<usize, Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `pool` holds `(record index, identity)` pairs.
    pub fn new(pool: &[(usize, usize)], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::invalid("pk sampling needs P >= 1 and K >= 1"));
        }
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(idx, id) in pool {
            by_id.entry(id).or_default().push(idx);
        }
        let eligible = by_id.values().filter(|v| v.len() >= k).count();
        if eligible < p {
            return Err(Error::invalid(format!(
                "pk sampling: only {eligible} identities have at least {k} samples, need {p}"
            )));
        }
        Ok(Self { by_id, p, k })
    }

    pub fn from_dataset(ds: &Dataset, split: Split, p: usize, k: usize) -> Result<Self> {
        let pool: Vec<(usize, usize)> = ds.indices(split).into_iter().map(|i| (i, ds.records[i].id)).collect();
        Self::new(&pool, p, k)
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// One batch: `P` distinct identities with `K` distinct samples each, grouped by identity.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let eligible: Vec<&Vec<usize>> = self.by_id.values().filter(|v| v.len() >= self.k).collect();
        let mut out = Vec::with_capacity(self.batch_size());
        for members in eligible.choose_multiple(rng, self.p) {
            out.extend(members.choose_multiple(rng, self.k).copied());
        }
        out
    }

    /// One epoch of batches drawing each sample at most once. Stops when fewer
    /// than `P` identities have `K` unused samples left.
    pub fn epoch<R: Rng>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut queues: Vec<Vec<usize>> = self
            .by_id
            .values()
            .map(|v| {
                let mut v = v.clone();
                v.shuffle(rng);
                v
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut ready: Vec<usize> = (0..queues.len()).filter(|&i| queues[i].len() >= self.k).collect();
            if ready.len() < self.p {
                return batches;
            }
            // fullest queues first so identities run out together
            ready.shuffle(rng);
            ready.sort_by_key(|&i| std::cmp::Reverse(queues[i].len()));
            let mut batch = Vec::with_capacity(self.batch_size());
            for &q in &ready[..self.p] {
                let at = queues[q].len() - self.k;
                batch.extend(queues[q].drain(at..));
            }
            batches.push(batch);
        }
    }
}

/// Draw `P·K` samples from `pool` (see [`PkSampler::sample`]).
pub fn pk_sample<R: Rng>(pool: &[(usize, usize)], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(PkSampler::new(pool, p, k)?.sample(rng))
}

/// Erased rectangle as `(top, left, height, width)` in pixels.
pub type EraseRect = (usize, usize, usize, usize);

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentReport {
    pub flipped: bool,
    pub erased: Option<EraseRect>,
}

pub const ERASE_AREA: (f64, f64) = (0.02, 0.2);
pub const ERASE_ASPECT: (f64, f64) = (0.3, 3.3);

/// Flips a box horizontally in normalized coordinates.
pub fn flip_box(b: [f64; 4]) -> [f64; 4] {
    [1.0 - b[2], b[1], 1.0 - b[0], b[3]]
}

/// Random horizontal flip and random erasing, each with probability 0.5.
pub fn augment<R: Rng>(image: &mut Image, bbox: &mut [f64; 4], rng: &mut R) -> AugmentReport {
    let mut report = AugmentReport::default();
    if rng.gen_bool(0.5) {
        image.flip_horizontal();
        *bbox = flip_box(*bbox);
        report.flipped = true;
    }
    if rng.gen_bool(0.5) {
        report.erased = random_erase(image, rng);
    }
    report
}

/// Augments a training sample; other splits are rejected.
pub fn augment_sample<R: Rng>(sample: &mut PersonSample, rng: &mut R) -> Result<AugmentReport> {
    if sample.split != Split::Train {
        return Err(Error::invalid(format!("augmentation applies to training samples, got {}", sample.split)));
    }
    Ok(augment(&mut sample.image, &mut sample.bbox, rng))
}

fn random_erase<R: Rng>(image: &mut Image, rng: &mut R) -> Option<EraseRect> {
    const ATTEMPTS: usize = 100;
    let (h, w) = (image.height, image.width);
    let area = (h * w) as f64;
    for _ in 0..ATTEMPTS {
        let target = rng.gen_range(ERASE_AREA.0..ERASE_AREA.1) * area;
        let aspect = rng.gen_range(ERASE_ASPECT.0..ERASE_ASPECT.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        let frac = (eh * ew) as f64 / area;
        if eh == 0 || ew == 0 || eh >= h || ew >= w || !(ERASE_AREA.0..=ERASE_AREA.1).contains(&frac) {
            continue;
        }
        let top = rng.gen_range(0..=h - eh);
        let left = rng.gen_range(0..=w - ew);
        for c in 0..3 {
            for y in top..top + eh {
                for x in left..left + ew {
                    image.data[(c * h + y) * w + x] = rng.gen();
                }
            }
        }
        return Some((top, left, eh, ew));
    }
    None
}

/// Upper bound on [`CohortStats::black_torso_variance`] for default data.
pub const TORSO_VARIANCE_CEILING: f64 = 1e-3;
/// Lower bound on [`CohortStats::black_min_head_distance`] for default data.
pub const HEAD_DISTANCE_FLOOR: f64 = 0.01;

/// Per-cohort summary used to check the generator's premise.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortStats {
    /// Variance across black identities of their mean torso color, averaged over channels.
    pub black_torso_variance: f64,
    /// Smallest mean absolute head-region pixel difference between two black identities.
    pub black_min_head_distance: f64,
}

/// Renders every black identity once under a fixed camera and layout seed and
/// compares torso and head regions across identities.
pub fn cohort_stats(config: &DataConfig, seed: u64) -> Result<CohortStats> {
    let specs = sample_identities(seed, config.num_ids, config.num_black, config.min_separation)?;
    let black: Vec<&IdentitySpec> = specs.iter().filter(|s| s.black()).collect();
    let mut torso_means = Vec::new();
    let mut heads = Vec::new();
    for spec in &black {
        let (img, layout) = render_with_layout(spec, 5, seed, config.height, config.width)?;
        let torso: Vec<f64> = (0..3)
            .map(|c| region_mean(&img, c, layout.shoulder_y + 0.06, layout.hip_y - 0.02, layout.cx, 0.2))
            .collect();
        torso_means.push(torso);
        heads.push(region_pixels(&img, 0.03, 0.3, 0.2, 0.8));
    }
    let n = torso_means.len() as f64;
    let mut var = 0.0;
    for c in 0..3 {
        let mean = torso_means.iter().map(|t| t[c]).sum::<f64>() / n;
        var += torso_means.iter().map(|t| (t[c] - mean).powi(2)).sum::<f64>() / n;
    }
    let mut min_dist = f64::INFINITY;
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            let d = heads[i].iter().zip(&heads[j]).map(|(a, b)| (a - b).abs()).sum::<f64>() / heads[i].len() as f64;
            min_dist = min_dist.min(d);
        }
    }
    Ok(CohortStats {
        black_torso_variance: var / 3.0,
        black_min_head_distance: min_dist,
    })
}

fn region_mean(img: &Image, c: usize, v0: f64, v1: f64, cx: f64, half: f64) -> f64 {
    let (mut s, mut n) = (0.0, 0);
    for y in 0..img.height {
        let v = (y as f64 + 0.5) / img.height as f64;
        for x in 0..img.width {
            let u = (x as f64 + 0.5) / img.width as f64;
            if v >= v0 && v < v1 && (u - cx).abs() < half {
                s += img.data[(c * img.height + y) * img.width + x] as f64;
                n += 1;
            }
        }
    }
    s / n.max(1) as f64
}

fn region_pixels(img: &Image, v0: f64, v1: f64, u0: f64, u1: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..3 {
        for y in 0..img.height {
            let v = (y as f64 + 0.5) / img.height as f64;
            for x in 0..img.width {
                let u = (x as f64 + 0.5) / img.width as f64;
                if v >= v0 && v < v1 && u >= u0 && u < u1 {
                    out.push(img.data[(c * img.height + y) * img.width + x] as f64);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
