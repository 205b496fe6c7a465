//! Synthetic long-tailed detection benchmarks.
//!
//! Each instance is a ground-truth box, a proposal obtained by jittering it,
//! and a proposal feature produced by a per-class linear generative model
//!
//! ```text
//! feature = M_c * t + b_c + noise,   M_c = w * M_0 + (1 - w) * M_c_private
//! ```
//!
//! where `t` is the encoded offset from proposal to ground truth and `w` is
//! [`DatasetConfig::shared_map_weight`]. Offsets `b_c` are mixed with the same
//! weight and scaled by [`DatasetConfig::offset_scale`], so at `w = 1` the
//! map from feature to target is class independent.
//! Class image frequencies decay as `rank^-exponent`; validation scales of
//! tail classes are shifted upward to model train/val scale shift.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::geometry::{encode_delta, iou, BBox, Delta};

pub const DATASET_FORMAT: &str = "tailreg-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Maximum IoU tolerated between two ground-truth boxes of one image.
const MAX_GT_OVERLAP: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 64;
/// Log-normal spread of object aspect ratios.
const ASPECT_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub frequency_exponent: f64,
    /// Mean number of distinct classes per image; scales all image counts.
    pub classes_per_image: f64,
    /// Each (class, image) occurrence holds between 1 and this many instances.
    pub max_instances_per_occurrence: usize,
    /// Floor on the number of validation images per class.
    pub min_val_images: usize,
    pub image_size: f64,
    /// Mean object side length per class on the train split, pixels.
    pub scale_means: Vec<f64>,
    /// Log-normal spread of object scale around the class mean.
    pub scale_spread: f64,
    /// Validation mean-scale increase for the rarest class; ramps linearly
    /// from zero at rank 0.
    pub scale_shift_rare: f64,
    pub feature_dim: usize,
    pub shared_map_weight: f64,
    /// Multiplier on the class offsets `b_c`, mixed with the same weight as
    /// the maps.
    pub offset_scale: f64,
    pub noise_sigma: f64,
    /// Proposal jitter, as a fraction of box width/height.
    pub proposal_jitter_sigma: f64,
    pub seed: u64,
}

impl DatasetConfig {
    /// The `lt60` preset.
    pub fn lt60(seed: u64) -> Self {
        let num_classes = 60;
        Self {
            num_classes,
            train_images: 2000,
            val_images: 500,
            frequency_exponent: 1.2,
            classes_per_image: 1.8,
            max_instances_per_occurrence: 2,
            min_val_images: 3,
            image_size: 640.0,
            scale_means: default_scale_means(num_classes),
            scale_spread: 0.25,
            scale_shift_rare: 8.0,
            feature_dim: 16,
            shared_map_weight: 0.85,
            offset_scale: 0.15,
            noise_sigma: 0.05,
            proposal_jitter_sigma: 0.15,
            seed,
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "lt60" => Ok(Self::lt60(seed)),
            "lt60-clean" => Ok(Self {
                noise_sigma: 0.0,
                proposal_jitter_sigma: 0.0,
                ..Self::lt60(seed)
            }),
            other => Err(Error::config(
                "preset",
                format!("unknown dataset preset `{other}`"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes;
        if c < 3 {
            return Err(Error::config("num_classes", "need at least 3 classes"));
        }
        if self.train_images == 0 {
            return Err(Error::config("train_images", "must be positive"));
        }
        if self.val_images == 0 {
            return Err(Error::config("val_images", "must be positive"));
        }
        if !(self.frequency_exponent > 0.0 && self.frequency_exponent.is_finite()) {
            return Err(Error::config(
                "frequency_exponent",
                "must be a positive real",
            ));
        }
        if !(self.classes_per_image > 0.0 && self.classes_per_image.is_finite()) {
            return Err(Error::config(
                "classes_per_image",
                "must be a positive real",
            ));
        }
        if self.max_instances_per_occurrence == 0 {
            return Err(Error::config(
                "max_instances_per_occurrence",
                "must be at least 1",
            ));
        }
        if !(self.image_size > 0.0 && self.image_size.is_finite()) {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.scale_means.len() != c {
            return Err(Error::config(
                "scale_means",
                format!("expected {c} entries, got {}", self.scale_means.len()),
            ));
        }
        if let Some(bad) = self
            .scale_means
            .iter()
            .position(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(Error::config(
                "scale_means",
                format!("entry {bad} is not positive"),
            ));
        }
        if !(self.scale_spread >= 0.0 && self.scale_spread.is_finite()) {
            return Err(Error::config("scale_spread", "must be non-negative"));
        }
        if !(self.scale_shift_rare >= 0.0 && self.scale_shift_rare.is_finite()) {
            return Err(Error::config("scale_shift_rare", "must be non-negative"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.shared_map_weight) {
            return Err(Error::config("shared_map_weight", "must lie in [0, 1]"));
        }
        if !(self.offset_scale >= 0.0 && self.offset_scale.is_finite()) {
            return Err(Error::config("offset_scale", "must be non-negative"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if !(self.proposal_jitter_sigma >= 0.0 && self.proposal_jitter_sigma.is_finite()) {
            return Err(Error::config(
                "proposal_jitter_sigma",
                "must be non-negative",
            ));
        }
        Ok(())
    }

    /// Normalized class probabilities, proportional to `(rank + 1)^-exponent`.
    pub fn class_probabilities(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_classes)
            .map(|c| ((c + 1) as f64).powf(-self.frequency_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }

    /// Number of images each class appears in, per split.
    pub fn image_counts(&self, split: Split) -> Vec<usize> {
        let (images, floor) = match split {
            Split::Train => (self.train_images, 1),
            Split::Val => (self.val_images, self.min_val_images.max(1)),
        };
        let slots = images as f64 * self.classes_per_image;
        self.class_probabilities()
            .iter()
            .map(|p| ((slots * p).round() as usize).max(floor).min(images))
            .collect()
    }

    /// Mean object scale of `class` on `split`, after the tail shift.
    pub fn split_scale_mean(&self, class: usize, split: Split) -> f64 {
        let base = self.scale_means[class];
        match split {
            Split::Train => base,
            Split::Val => base + self.scale_shift_rare * tail_weight(class, self.num_classes),
        }
    }
}

/// 0 for the most frequent class, 1 for the rarest, linear in between.
fn tail_weight(class: usize, num_classes: usize) -> f64 {
    class as f64 / (num_classes - 1) as f64
}

/// Per-class mean scales spread over roughly 24..136 px with a low-discrepancy
/// sequence, so scale is uncorrelated with frequency rank.
pub fn default_scale_means(num_classes: usize) -> Vec<f64> {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    (0..num_classes)
        .map(|c| {
            let u = ((c + 1) as f64 * GOLDEN).fract();
            24.0 * 2f64.powf(2.5 * u)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub image_id: usize,
    pub class_id: usize,
    pub gt_box: BBox,
    pub proposal_box: BBox,
    pub feature: Vec<f64>,
    pub target_delta: Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
}

/// Per-class statistics of the train split, used to sort classes for clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStat {
    pub instance_count: usize,
    pub mean_scale: f64,
}

/// Generative parameters, drawn once per dataset.
struct FeatureModel {
    dim: usize,
    /// Row-major `dim x 4` per class.
    maps: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl FeatureModel {
    fn draw(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.feature_dim;
        let w = cfg.shared_map_weight;
        let mut gauss =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let shared_map = gauss(d * 4);
        let shared_offset = gauss(d);
        let mut maps = Vec::with_capacity(cfg.num_classes);
        let mut offsets = Vec::with_capacity(cfg.num_classes);
        for _ in 0..cfg.num_classes {
            let private_map = gauss(d * 4);
            let private_offset = gauss(d);
            maps.push(mix(&shared_map, &private_map, w));
            let mut offset = mix(&shared_offset, &private_offset, w);
            offset.iter_mut().for_each(|v| *v *= cfg.offset_scale);
            offsets.push(offset);
        }
        Self {
            dim: d,
            maps,
            offsets,
        }
    }

    fn feature(&self, class: usize, t: &Delta, noise: &[f64]) -> Vec<f64> {
        let t = t.to_array();
        let m = &self.maps[class];
        (0..self.dim)
            .map(|i| {
                let row = &m[i * 4..i * 4 + 4];
                let lin = row[0] * t[0] + row[1] * t[1] + row[2] * t[2] + row[3] * t[3];
                lin + self.offsets[class][i] + noise[i]
            })
            .collect()
    }
}

fn mix(shared: &[f64], private: &[f64], w: f64) -> Vec<f64> {
    shared
        .iter()
        .zip(private)
        .map(|(s, p)| w * s + (1.0 - w) * p)
        .collect()
}

/// Generates a dataset. Deterministic in `config` (including its seed).
pub fn generate(config: &DatasetConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = FeatureModel::draw(config, &mut rng);
    let train = generate_split(config, &model, Split::Train, &mut rng)?;
    let val = generate_split(config, &model, Split::Val, &mut rng)?;
    Ok(SyntheticDataset {
        config: config.clone(),
        train,
        val,
    })
}

fn generate_split(
    cfg: &DatasetConfig,
    model: &FeatureModel,
    split: Split,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Instance>> {
    let images = match split {
        Split::Train => cfg.train_images,
        Split::Val => cfg.val_images,
    };
    // image -> list of class ids, one entry per instance
    let mut objects: Vec<Vec<usize>> = vec![Vec::new(); images];
    for (class, &count) in cfg.image_counts(split).iter().enumerate() {
        let mut chosen = index::sample(rng, images, count).into_vec();
        chosen.sort_unstable();
        for image in chosen {
            let copies = rng.random_range(1..=cfg.max_instances_per_occurrence);
            objects[image].extend(std::iter::repeat_n(class, copies));
        }
    }

    let size = cfg.image_size;
    let jitter = cfg.proposal_jitter_sigma;
    let mut out = Vec::new();
    for (image_id, classes) in objects.iter().enumerate() {
        let mut placed: Vec<BBox> = Vec::with_capacity(classes.len());
        for &class_id in classes {
            let mean = cfg.split_scale_mean(class_id, split);
            let gt_box = place_box(rng, mean, cfg.scale_spread, size, &placed)?;
            placed.push(gt_box);

            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let proposal_box = if jitter == 0.0 {
                gt_box
            } else {
                let (cx, cy) = gt_box.center();
                let (w, h) = (gt_box.width(), gt_box.height());
                BBox::from_center(
                    cx + jitter * z[0] * w,
                    cy + jitter * z[1] * h,
                    w * (jitter * z[2]).exp(),
                    h * (jitter * z[3]).exp(),
                )?
            };
            let target_delta = encode_delta(&proposal_box, &gt_box);
            let noise: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let feature = model.feature(class_id, &target_delta, &noise);
            out.push(Instance {
                image_id,
                class_id,
                gt_box,
                proposal_box,
                feature,
                target_delta,
            });
        }
    }
    Ok(out)
}

fn place_box(
    rng: &mut ChaCha8Rng,
    mean_scale: f64,
    spread: f64,
    image_size: f64,
    placed: &[BBox],
) -> Result<BBox> {
    let max_side = 0.9 * image_size;
    let mut candidate = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let s = mean_scale * (spread * rng.sample::<f64, _>(StandardNormal)).exp();
        let a = ASPECT_SIGMA * rng.sample::<f64, _>(StandardNormal);
        let w = (s * (0.5 * a).exp()).min(max_side);
        let h = (s * (-0.5 * a).exp()).min(max_side);
        let x1 = rng.random::<f64>() * (image_size - w);
        let y1 = rng.random::<f64>() * (image_size - h);
        let b = BBox::new(x1, y1, x1 + w, y1 + h)?;
        let clear = placed.iter().all(|p| iou(p, &b) <= MAX_GT_OVERLAP);
        candidate = Some(b);
        if clear {
            break;
        }
    }
    Ok(candidate.expect("at least one placement attempt"))
}

impl SyntheticDataset {
    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn num_images(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.train_images,
            Split::Val => self.config.val_images,
        }
    }

    /// Number of distinct images of `split` containing each class.
    pub fn class_image_counts(&self, split: Split) -> Vec<usize> {
        let mut seen = vec![std::collections::BTreeSet::new(); self.num_classes()];
        for inst in self.split(split) {
            seen[inst.class_id].insert(inst.image_id);
        }
        seen.iter().map(|s| s.len()).collect()
    }

    pub fn class_instance_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for inst in self.split(split) {
            counts[inst.class_id] += 1;
        }
        counts
    }

    /// Mean `sqrt(area)` per class, `None` where the class is absent.
    pub fn class_mean_scales(&self, split: Split) -> Vec<Option<f64>> {
        let mut sums = vec![(0.0, 0usize); self.num_classes()];
        for inst in self.split(split) {
            let e = &mut sums[inst.class_id];
            e.0 += inst.gt_box.scale();
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(s, n)| (n > 0).then(|| s / n as f64))
            .collect()
    }

    /// Train-split instance count and mean scale per class.
    pub fn class_stats(&self) -> Vec<ClassStat> {
        let counts = self.class_instance_counts(Split::Train);
        let scales = self.class_mean_scales(Split::Train);
        counts
            .into_iter()
            .zip(scales)
            .map(|(instance_count, s)| ClassStat {
                instance_count,
                mean_scale: s.unwrap_or(0.0),
            })
            .collect()
    }

    /// Serializes to the line-delimited format: a header record echoing the
    /// config and the digest of the body, then one record per instance.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut body = String::new();
        for (split, items) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            for inst in items {
                let rec = InstanceRecord {
                    split,
                    image_id: inst.image_id,
                    class_id: inst.class_id,
                    gt: inst.gt_box,
                    proposal: inst.proposal_box,
                    delta: inst.target_delta.to_array(),
                    feature: inst.feature.clone(),
                };
                body.push_str(&serde_json::to_string(&rec)?);
                body.push('\n');
            }
        }
        let header = Header {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            train_instances: self.train.len(),
            val_instances: self.val.len(),
            digest: sha256_hex(body.as_bytes()),
            config: self.config.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        out.push_str(&body);
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let fmt_err = |line: usize, reason: String| Error::Format {
            what: "dataset file",
            line,
            reason,
        };
        let (head, body) = text
            .split_once('\n')
            .ok_or_else(|| fmt_err(1, "missing header record".into()))?;
        let header: Header = serde_json::from_str(head).map_err(|e| fmt_err(1, e.to_string()))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(fmt_err(
                1,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        let found = sha256_hex(body.as_bytes());
        if found != header.digest {
            return Err(fmt_err(
                1,
                format!(
                    "body digest {found} does not match header {}",
                    header.digest
                ),
            ));
        }
        header.config.validate()?;
        let mut train = Vec::with_capacity(header.train_instances);
        let mut val = Vec::with_capacity(header.val_instances);
        for (i, line) in body.lines().enumerate() {
            let rec: InstanceRecord =
                serde_json::from_str(line).map_err(|e| fmt_err(i + 2, e.to_string()))?;
            if rec.class_id >= header.config.num_classes {
                return Err(fmt_err(
                    i + 2,
                    format!("class id {} out of range", rec.class_id),
                ));
            }
            if rec.feature.len() != header.config.feature_dim {
                return Err(fmt_err(
                    i + 2,
                    format!("feature has {} entries", rec.feature.len()),
                ));
            }
            let inst = Instance {
                image_id: rec.image_id,
                class_id: rec.class_id,
                gt_box: rec.gt,
                proposal_box: rec.proposal,
                feature: rec.feature,
                target_delta: Delta::from_array(rec.delta),
            };
            match rec.split {
                Split::Train => train.push(inst),
                Split::Val => val.push(inst),
            }
        }
        if train.len() != header.train_instances || val.len() != header.val_instances {
            return Err(fmt_err(1, "instance counts do not match header".into()));
        }
        Ok(Self {
            config: header.config,
            train,
            val,
        })
    }

    /// Writes the dataset and returns the digest of the written file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_jsonl()?;
        crate::digest::write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    train_instances: usize,
    val_instances: usize,
    digest: String,
    config: DatasetConfig,
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    split: Split,
    image_id: usize,
    class_id: usize,
    gt: BBox,
    proposal: BBox,
    delta: [f64; 4],
    feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqGroup {
    Rare,
    Common,
    Frequent,
}

impl FreqGroup {
    pub const ALL: [FreqGroup; 3] = [FreqGroup::Rare, FreqGroup::Common, FreqGroup::Frequent];

    pub fn as_str(&self) -> &'static str {
        match self {
            FreqGroup::Rare => "rare",
            FreqGroup::Common => "common",
            FreqGroup::Frequent => "frequent",
        }
    }

    pub fn letter(&self) -> char {
        match self {
            FreqGroup::Rare => 'r',
            FreqGroup::Common => 'c',
            FreqGroup::Frequent => 'f',
        }
    }
}

/// Image-count cutoffs: `[0, rare_max]` rare, `(rare_max, common_max]`
/// common, above that frequent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyThresholds {
    pub rare_max: usize,
    pub common_max: usize,
}

impl Default for FrequencyThresholds {
    fn default() -> Self {
        Self {
            rare_max: 10,
            common_max: 100,
        }
    }
}

impl FrequencyThresholds {
    pub fn classify(&self, images: usize) -> FreqGroup {
        if images <= self.rare_max {
            FreqGroup::Rare
        } else if images <= self.common_max {
            FreqGroup::Common
        } else {
            FreqGroup::Frequent
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPartition {
    pub groups: Vec<FreqGroup>,
    pub thresholds: FrequencyThresholds,
}

impl FrequencyPartition {
    pub fn from_image_counts(counts: &[usize], thresholds: FrequencyThresholds) -> Self {
        Self {
            groups: counts.iter().map(|&n| thresholds.classify(n)).collect(),
            thresholds,
        }
    }

    pub fn group_of(&self, class: usize) -> FreqGroup {
        self.groups[class]
    }

    pub fn members(&self, group: FreqGroup) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == group)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn sizes(&self) -> BTreeMap<FreqGroup, usize> {
        let mut m: BTreeMap<FreqGroup, usize> = FreqGroup::ALL.iter().map(|g| (*g, 0)).collect();
        for g in &self.groups {
            *m.entry(*g).or_default() += 1;
        }
        m
    }
}

/// Partition from the train split.
pub fn partition_by_frequency(
    dataset: &SyntheticDataset,
    thresholds: FrequencyThresholds,
) -> FrequencyPartition {
    partition_from_split(dataset, Split::Train, thresholds)
}

/// Partition recomputed from an arbitrary split, for partition-shift analysis.
pub fn partition_from_split(
    dataset: &SyntheticDataset,
    split: Split,
    thresholds: FrequencyThresholds,
) -> FrequencyPartition {
    FrequencyPartition::from_image_counts(&dataset.class_image_counts(split), thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScaleRow {
    pub class_id: usize,
    pub train_mean: Option<f64>,
    pub val_mean: Option<f64>,
    /// `-(train - val)`; absent when either split lacks the class.
    pub delta: Option<f64>,
}

pub fn class_scale_report(dataset: &SyntheticDataset) -> Vec<ClassScaleRow> {
    let train = dataset.class_mean_scales(Split::Train);
    let val = dataset.class_mean_scales(Split::Val);
    train
        .into_iter()
        .zip(val)
        .enumerate()
        .map(|(class_id, (t, v))| ClassScaleRow {
            class_id,
            train_mean: t,
            val_mean: v,
            delta: t.zip(v).map(|(t, v)| -(t - v)),
        })
        .collect()
}

pub fn scale_report_csv(rows: &[ClassScaleRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("class_id,train_mean_scale,val_mean_scale,delta\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.class_id,
            opt(r.train_mean),
            opt(r.val_mean),
            opt(r.delta)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetConfig {
        DatasetConfig {
            num_classes: 6,
            train_images: 60,
            val_images: 20,
            scale_means: default_scale_means(6),
            ..DatasetConfig::lt60(seed)
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_decay() {
        let p = DatasetConfig::lt60(1).class_probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn lt60_partition_has_all_groups() {
        let cfg = DatasetConfig::lt60(7);
        let part = FrequencyPartition::from_image_counts(
            &cfg.image_counts(Split::Train),
            FrequencyThresholds::default(),
        );
        let sizes = part.sizes();
        assert_eq!(sizes.values().sum::<usize>(), 60);
        assert!(sizes[&FreqGroup::Rare] >= 10, "{sizes:?}");
        assert!(sizes[&FreqGroup::Frequent] >= 5, "{sizes:?}");
    }

    #[test]
    fn zero_noise_zero_jitter_gives_zero_deltas() {
        let cfg = DatasetConfig {
            noise_sigma: 0.0,
            proposal_jitter_sigma: 0.0,
            ..small(3)
        };
        let ds = generate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = FeatureModel::draw(&cfg, &mut rng);
        for inst in ds.train.iter().chain(&ds.val) {
            assert_eq!(inst.target_delta, Delta::ZERO);
            assert_eq!(inst.proposal_box, inst.gt_box);
            assert_eq!(inst.feature, model.offsets[inst.class_id]);
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = DatasetConfig {
            num_classes: 2,
            ..small(1)
        };
        match generate(&bad) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "num_classes"),
            other => panic!("unexpected {other:?}"),
        }
        let mut bad = small(1);
        bad.scale_means[2] = -1.0;
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "scale_means"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = DatasetConfig {
            shared_map_weight: 1.5,
            ..small(1)
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "shared_map_weight")
        );
    }

    #[test]
    fn partition_boundaries() {
        let t = FrequencyThresholds::default();
        assert_eq!(t.classify(5), FreqGroup::Rare);
        assert_eq!(t.classify(10), FreqGroup::Rare);
        assert_eq!(t.classify(11), FreqGroup::Common);
        assert_eq!(t.classify(100), FreqGroup::Common);
        assert_eq!(t.classify(101), FreqGroup::Frequent);
        let all_one = FrequencyPartition::from_image_counts(&[1, 1, 1, 1], t);
        assert!(all_one.groups.iter().all(|g| *g == FreqGroup::Rare));
    }

    #[test]
    fn instances_are_well_formed() {
        let ds = generate(&small(11)).unwrap();
        assert!(!ds.train.is_empty() && !ds.val.is_empty());
        for inst in ds.train.iter().chain(&ds.val) {
            assert!(inst.class_id < 6);
            assert_eq!(inst.feature.len(), 16);
            assert!(inst.target_delta.is_finite());
            let again = encode_delta(&inst.proposal_box, &inst.gt_box);
            assert_eq!(again, inst.target_delta);
        }
        // image counts follow the configured allocation exactly
        assert_eq!(
            ds.class_image_counts(Split::Train),
            ds.config.image_counts(Split::Train)
        );
    }

    #[test]
    fn jsonl_roundtrip_and_tamper_detection() {
        let ds = generate(&small(5)).unwrap();
        let text = ds.to_jsonl().unwrap();
        let back = SyntheticDataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl().unwrap(), text);
        let tampered = text.replacen("\"class_id\":0", "\"class_id\":1", 1);
        assert!(SyntheticDataset::from_jsonl(&tampered).is_err());
    }

    #[test]
    fn scale_report_conventions() {
        let mut ds = generate(&small(2)).unwrap();
        ds.val = ds.train.clone();
        for row in class_scale_report(&ds) {
            assert_eq!(row.delta, Some(0.0));
        }
        let g = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let one = Instance {
            image_id: 0,
            class_id: 1,
            gt_box: g,
            proposal_box: g,
            feature: vec![0.0; 16],
            target_delta: Delta::ZERO,
        };
        ds.train = vec![one.clone()];
        ds.val = vec![];
        let rows = class_scale_report(&ds);
        assert_eq!(rows[1].train_mean, Some(10.0));
        assert_eq!(rows[1].val_mean, None);
        assert_eq!(rows[1].delta, None);
        assert_eq!(rows[0].train_mean, None);
    }
}
