//! Regression-head parameterizations and the linear classifier.
//!
//! Every variant is a set of affine maps `feature -> Delta` plus a total
//! mapping from class id to head index:
//!
//! | variant            | heads                  | effective head of class `i`        |
//! |--------------------|------------------------|------------------------------------|
//! | `specific`         | one per class          | `W_i`                              |
//! | `agnostic`         | one                    | `W_0`                              |
//! | `cab:α`            | one per class plus `W_0` | `α W_0 + (1 - α) W_i`            |
//! | `cluster:K:key`    | `K`                    | head of the class's sorted group   |
//! | `merge:rc` etc.    | one per merged block plus one per unmerged class | mapped head |

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassStat, FreqGroup, FrequencyPartition};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::geometry::Delta;

pub const HEADS_FORMAT: &str = "tailreg-heads";
pub const HEADS_VERSION: u32 = 1;

/// Standard deviation of the Gaussian used for weight initialization.
pub const INIT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortKey {
    InstanceCount,
    MeanScale,
}

impl SortKey {
    fn token(&self) -> &'static str {
        match self {
            SortKey::InstanceCount => "num",
            SortKey::MeanScale => "scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub sort_key: SortKey,
}

/// A regression-head variant, written as a token such as `cab:0.5`,
/// `cluster:10:scale` or `merge:rc`.
///
/// Merge blocks are separated by `/`; letters (or comma-separated letters)
/// inside one block share a single head, so `merge:r,c` and `merge:rc` are the
/// same variant while `merge:r/c` gives rare and common one head each.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadVariant {
    Specific,
    Agnostic,
    Cab { alpha: f64 },
    Clustered(ClusterConfig),
    Merged { blocks: Vec<BTreeSet<FreqGroup>> },
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadVariant::Specific => write!(f, "specific"),
            HeadVariant::Agnostic => write!(f, "agnostic"),
            HeadVariant::Cab { alpha } => write!(f, "cab:{alpha}"),
            HeadVariant::Clustered(c) => write!(f, "cluster:{}:{}", c.k, c.sort_key.token()),
            HeadVariant::Merged { blocks } => {
                let parts: Vec<String> = blocks
                    .iter()
                    .map(|b| b.iter().map(|g| g.letter()).collect())
                    .collect();
                write!(f, "merge:{}", parts.join("/"))
            }
        }
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let fail = |reason: &str| Error::VariantParse {
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = token.trim().splitn(2, ':');
        let kind = parts.next().unwrap_or_default();
        let rest = parts.next();
        match (kind, rest) {
            ("specific", None) => Ok(HeadVariant::Specific),
            ("agnostic", None) => Ok(HeadVariant::Agnostic),
            ("cab", Some(a)) => {
                let alpha: f64 = a.parse().map_err(|_| fail("alpha is not a number"))?;
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(fail("alpha must lie in [0, 1]"));
                }
                // normalize -0 so the token round-trips
                Ok(HeadVariant::Cab { alpha: alpha + 0.0 })
            }
            ("cluster", Some(r)) => {
                let (k, key) = r
                    .split_once(':')
                    .ok_or_else(|| fail("expected cluster:K:key"))?;
                let k: usize = k.parse().map_err(|_| fail("K is not a positive integer"))?;
                if k == 0 {
                    return Err(fail("K must be positive"));
                }
                let sort_key = match key {
                    "num" | "count" | "instance_count" => SortKey::InstanceCount,
                    "scale" | "mean_scale" => SortKey::MeanScale,
                    _ => return Err(fail("key must be `num` or `scale`")),
                };
                Ok(HeadVariant::Clustered(ClusterConfig { k, sort_key }))
            }
            ("merge", Some(r)) => {
                let mut blocks: Vec<BTreeSet<FreqGroup>> = Vec::new();
                let mut seen = BTreeSet::new();
                for block in r.split('/').filter(|b| !b.is_empty()) {
                    let mut set = BTreeSet::new();
                    for ch in block.chars().filter(|c| *c != ',' && !c.is_whitespace()) {
                        let g = match ch {
                            'r' => FreqGroup::Rare,
                            'c' => FreqGroup::Common,
                            'f' => FreqGroup::Frequent,
                            _ => return Err(fail("merge groups are r, c and f")),
                        };
                        if !seen.insert(g) {
                            return Err(fail("a group appears twice"));
                        }
                        set.insert(g);
                    }
                    if !set.is_empty() {
                        blocks.push(set);
                    }
                }
                blocks.sort();
                Ok(HeadVariant::Merged { blocks })
            }
            _ => Err(fail("unknown variant")),
        }
    }
}

impl Serialize for HeadVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HeadVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Affine map `feature -> 4 offsets`. `weight` is row-major `4 x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineHead {
    pub weight: Vec<f64>,
    pub bias: [f64; 4],
}

impl AffineHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![0.0; 4 * dim],
            bias: [0.0; 4],
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len() / 4
    }

    pub fn apply(&self, feature: &[f64]) -> [f64; 4] {
        let d = self.dim();
        debug_assert_eq!(feature.len(), d);
        std::array::from_fn(|k| {
            let row = &self.weight[k * d..(k + 1) * d];
            row.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>() + self.bias[k]
        })
    }

    /// `alpha * shared + (1 - alpha) * private`, elementwise on weights and bias.
    pub fn blend(shared: &AffineHead, private: &AffineHead, alpha: f64) -> AffineHead {
        let beta = 1.0 - alpha;
        AffineHead {
            weight: shared
                .weight
                .iter()
                .zip(&private.weight)
                .map(|(s, p)| alpha * s + beta * p)
                .collect(),
            bias: std::array::from_fn(|k| alpha * shared.bias[k] + beta * private.bias[k]),
        }
    }

    fn gaussian(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: (0..4 * dim)
                .map(|_| INIT_SIGMA * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            bias: [0.0; 4],
        }
    }
}

/// Sorts classes by `key` (descending, ties by ascending id) and cuts the
/// sequence into `k` contiguous groups; the first `C mod K` groups get one
/// extra class.
pub fn cluster_heads(stats: &[ClassStat], cfg: &ClusterConfig) -> Result<Vec<usize>> {
    let c = stats.len();
    if cfg.k == 0 || cfg.k > c {
        return Err(Error::config(
            "k",
            format!("K = {} must lie in [1, {c}]", cfg.k),
        ));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let primary = match cfg.sort_key {
            SortKey::InstanceCount => stats[b].instance_count.cmp(&stats[a].instance_count),
            SortKey::MeanScale => stats[b].mean_scale.total_cmp(&stats[a].mean_scale),
        };
        primary.then(a.cmp(&b))
    });
    let (base, extra) = (c / cfg.k, c % cfg.k);
    let mut mapping = vec![0; c];
    let mut pos = 0;
    for group in 0..cfg.k {
        let size = base + usize::from(group < extra);
        for &class in &order[pos..pos + size] {
            mapping[class] = group;
        }
        pos += size;
    }
    Ok(mapping)
}

/// Classes in a merged block share that block's head; every other class keeps
/// a private head. Heads are numbered by first appearance in class-id order.
pub fn merge_heads(partition: &FrequencyPartition, blocks: &[BTreeSet<FreqGroup>]) -> Vec<usize> {
    let block_of = |g: FreqGroup| blocks.iter().position(|b| b.contains(&g));
    let mut block_head: Vec<Option<usize>> = vec![None; blocks.len()];
    let mut next = 0;
    partition
        .groups
        .iter()
        .map(|&g| match block_of(g) {
            Some(b) => *block_head[b].get_or_insert_with(|| {
                next += 1;
                next - 1
            }),
            None => {
                next += 1;
                next - 1
            }
        })
        .collect()
}

/// Class-to-head mapping for `variant`. Clustering needs `stats`, merging
/// needs `partition`.
pub fn head_layout(
    variant: &HeadVariant,
    num_classes: usize,
    stats: &[ClassStat],
    partition: &FrequencyPartition,
) -> Result<Vec<usize>> {
    Ok(match variant {
        HeadVariant::Specific | HeadVariant::Cab { .. } => (0..num_classes).collect(),
        HeadVariant::Agnostic => vec![0; num_classes],
        HeadVariant::Clustered(cfg) => cluster_heads(stats, cfg)?,
        HeadVariant::Merged { blocks } => merge_heads(partition, blocks),
    })
}

/// Trained (or trainable) regression heads of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadBank {
    variant: HeadVariant,
    feature_dim: usize,
    class_to_head: Vec<usize>,
    heads: Vec<AffineHead>,
    /// The shared class-agnostic head `W_0`; present only for `cab`.
    agnostic: Option<AffineHead>,
    /// Weights digest, set once training has finished.
    digest: Option<String>,
}

impl HeadBank {
    /// A bank with all-zero weights. Validates the mapping against the variant.
    pub fn zeros(
        variant: HeadVariant,
        class_to_head: Vec<usize>,
        feature_dim: usize,
    ) -> Result<Self> {
        let head_count = class_to_head.iter().max().map_or(0, |m| m + 1);
        let bank = Self {
            agnostic: matches!(variant, HeadVariant::Cab { .. })
                .then(|| AffineHead::zeros(feature_dim)),
            heads: vec![AffineHead::zeros(feature_dim); head_count],
            variant,
            feature_dim,
            class_to_head,
            digest: None,
        };
        bank.check_layout()?;
        Ok(bank)
    }

    /// Gaussian initialization with a pinned stream order: one slot per class
    /// is drawn first, then the shared slot. A head serving exactly one class
    /// starts from that class's slot; a head serving several classes (and the
    /// `cab` shared head) starts from the shared slot.
    pub fn initialize(
        variant: HeadVariant,
        class_to_head: Vec<usize>,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut bank = Self::zeros(variant, class_to_head, feature_dim)?;
        let class_slots: Vec<AffineHead> = (0..bank.num_classes())
            .map(|_| AffineHead::gaussian(feature_dim, rng))
            .collect();
        let shared_slot = AffineHead::gaussian(feature_dim, rng);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); bank.heads.len()];
        for (class, &h) in bank.class_to_head.iter().enumerate() {
            members[h].push(class);
        }
        for (head, m) in bank.heads.iter_mut().zip(&members) {
            *head = match m.as_slice() {
                [only] => class_slots[*only].clone(),
                _ => shared_slot.clone(),
            };
        }
        if let Some(w0) = bank.agnostic.as_mut() {
            *w0 = shared_slot;
        }
        Ok(bank)
    }

    fn check_layout(&self) -> Result<()> {
        let c = self.class_to_head.len();
        let n = self.heads.len();
        let bad = |reason: String| Err(Error::Contract(format!("{} bank: {reason}", self.variant)));
        if c == 0 {
            return bad("no classes".into());
        }
        let mut used = vec![false; n];
        for &h in &self.class_to_head {
            used[h] = true;
        }
        if used.iter().any(|u| !u) {
            return bad("class-to-head mapping is not surjective".into());
        }
        if self
            .heads
            .iter()
            .chain(&self.agnostic)
            .any(|h| h.weight.len() != 4 * self.feature_dim)
        {
            return bad("weight shape does not match the feature dimension".into());
        }
        let identity = self.class_to_head.iter().enumerate().all(|(i, &h)| i == h);
        match &self.variant {
            HeadVariant::Specific | HeadVariant::Cab { .. } if !identity => {
                bad("expected identity mapping".into())
            }
            HeadVariant::Agnostic if n != 1 => bad(format!("expected 1 head, found {n}")),
            HeadVariant::Cab { .. } if self.agnostic.is_none() => bad("missing shared head".into()),
            HeadVariant::Clustered(cfg) if n != cfg.k.min(c) => {
                bad(format!("expected {} heads, found {n}", cfg.k))
            }
            _ => Ok(()),
        }
    }

    pub fn variant(&self) -> &HeadVariant {
        &self.variant
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_head.len()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn class_to_head(&self) -> &[usize] {
        &self.class_to_head
    }

    pub fn heads(&self) -> &[AffineHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [AffineHead] {
        self.digest = None;
        &mut self.heads
    }

    pub fn agnostic(&self) -> Option<&AffineHead> {
        self.agnostic.as_ref()
    }

    pub fn agnostic_mut(&mut self) -> Option<&mut AffineHead> {
        self.digest = None;
        self.agnostic.as_mut()
    }

    /// `α` for `cab` banks.
    pub fn alpha(&self) -> Option<f64> {
        match self.variant {
            HeadVariant::Cab { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn effective_weight(&self, class_id: usize) -> Cow<'_, AffineHead> {
        let private = &self.heads[self.class_to_head[class_id]];
        match (&self.variant, &self.agnostic) {
            (HeadVariant::Cab { alpha }, Some(w0)) => {
                Cow::Owned(AffineHead::blend(w0, private, *alpha))
            }
            _ => Cow::Borrowed(private),
        }
    }

    pub fn predict(&self, class_id: usize, feature: &[f64]) -> Result<Delta> {
        if class_id >= self.num_classes() {
            return Err(Error::Contract(format!("class id {class_id} out of range")));
        }
        if feature.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                got: feature.len(),
            });
        }
        Ok(Delta::from_array(
            self.effective_weight(class_id).apply(feature),
        ))
    }

    /// Digest over variant, mapping and weights.
    pub fn weights_digest(&self) -> String {
        let unsealed = Self {
            digest: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&unsealed).expect("head bank serializes");
        sha256_hex(&bytes)
    }

    /// Marks the bank as trained by recording its weights digest.
    pub fn seal(&mut self) -> &str {
        let d = self.weights_digest();
        self.digest.insert(d)
    }

    pub fn digest(&self) -> Option<&str> {
        self.digest.as_deref()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = HeadFile {
            format: HEADS_FORMAT.into(),
            version: HEADS_VERSION,
            bank: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HeadFile = serde_json::from_str(text)?;
        let fmt_err = |reason: String| Error::Format {
            what: "head bank",
            line: 1,
            reason,
        };
        if file.format != HEADS_FORMAT || file.version != HEADS_VERSION {
            return Err(fmt_err(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let bank = file.bank;
        bank.check_layout()?;
        if let Some(d) = &bank.digest {
            let found = bank.weights_digest();
            if &found != d {
                return Err(fmt_err(format!(
                    "weights digest {found} does not match recorded {d}"
                )));
            }
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        crate::digest::write_file(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    format: String,
    version: u32,
    bank: HeadBank,
}

/// Plain linear classifier over proposal features. `weight` is row-major `C x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            num_classes,
            feature_dim,
            weight: vec![0.0; num_classes * feature_dim],
            bias: vec![0.0; num_classes],
        }
    }

    pub fn initialize(num_classes: usize, feature_dim: usize, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(num_classes, feature_dim);
        for w in &mut c.weight {
            *w = INIT_SIGMA * rng.sample::<f64, _>(StandardNormal);
        }
        c
    }

    pub(crate) fn scores_unchecked(&self, feature: &[f64]) -> Vec<f64> {
        let d = self.feature_dim;
        (0..self.num_classes)
            .map(|c| {
                let row = &self.weight[c * d..(c + 1) * d];
                row.iter().zip(feature).map(|(w, x)| w * x).sum::<f64>() + self.bias[c]
            })
            .collect()
    }
}

/// Raw class scores (logits) for one feature vector.
pub fn classify(classifier: &LinearClassifier, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != classifier.feature_dim {
        return Err(Error::Dimension {
            expected: classifier.feature_dim,
            got: feature.len(),
        });
    }
    Ok(classifier.scores_unchecked(feature))
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
