//! Losses, closed-form gradients and the SGD loop for affine heads.
//!
//! Regression loss is smooth-L1 summed over the four offsets and averaged
//! over the batch; each sample contributes only through the effective head of
//! its own class. For `cab` banks the gradient of the effective weight is
//! routed `α` to the shared head and `1 - α` to the class head.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    partition_by_frequency, FreqGroup, FrequencyPartition, FrequencyThresholds, Instance, Split,
    SyntheticDataset,
};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::geometry::Delta;
use crate::heads::{head_layout, softmax, AffineHead, HeadBank, HeadVariant, LinearClassifier};

/// RNG stream ids derived from the training seed.
const STREAM_HEAD_INIT: u64 = 1;
const STREAM_CLASSIFIER_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Classifier and regression heads trained together.
    Joint,
    /// Classifier bypassed; heads selected by ground-truth class.
    RegressionOnlyGt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub momentum: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub smooth_l1_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.02,
            warmup_steps: 100,
            momentum: 0.9,
            seed: 1,
            mode: TrainMode::RegressionOnlyGt,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.lambda_cls > 0.0 && self.lambda_reg > 0.0) {
            return Err(Error::config(
                "lambda_cls/lambda_reg",
                "loss weights must be positive",
            ));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth_l1_beta", "must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }
}

/// Smooth-L1 summed over the four coordinates.
pub fn smooth_l1(residual: &Delta, beta: f64) -> f64 {
    residual
        .to_array()
        .iter()
        .map(|&x| smooth_l1_scalar(x, beta))
        .sum()
}

fn smooth_l1_scalar(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// One regression training example.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample<'a> {
    pub class_id: usize,
    pub feature: &'a [f64],
    pub target: Delta,
}

impl<'a> From<&'a Instance> for RegressionSample<'a> {
    fn from(i: &'a Instance) -> Self {
        Self {
            class_id: i.class_id,
            feature: &i.feature,
            target: i.target_delta,
        }
    }
}

/// Gradients shaped like a [`HeadBank`], plus the batch loss they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub heads: Vec<AffineHead>,
    pub agnostic: Option<AffineHead>,
    pub loss: f64,
}

impl HeadGrads {
    fn zeros_like(bank: &HeadBank) -> Self {
        let d = bank.feature_dim();
        Self {
            heads: vec![AffineHead::zeros(d); bank.head_count()],
            agnostic: bank.agnostic().map(|_| AffineHead::zeros(d)),
            loss: 0.0,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.heads
            .iter()
            .chain(&self.agnostic)
            .flat_map(|h| h.weight.iter().chain(&h.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn accumulate(head: &mut AffineHead, g: &[f64; 4], feature: &[f64]) {
    let d = feature.len();
    for k in 0..4 {
        let row = &mut head.weight[k * d..(k + 1) * d];
        for (w, x) in row.iter_mut().zip(feature) {
            *w += g[k] * x;
        }
        head.bias[k] += g[k];
    }
}

/// Exact gradients of the mean smooth-L1 batch loss with respect to every
/// head parameter.
pub fn grad_head(bank: &HeadBank, batch: &[RegressionSample<'_>], beta: f64) -> HeadGrads {
    assert!(!batch.is_empty(), "grad_head needs a non-empty batch");
    let mut grads = HeadGrads::zeros_like(bank);
    let inv_n = 1.0 / batch.len() as f64;
    let alpha = bank.alpha();
    let mut loss = 0.0;
    for s in batch {
        let eff = bank.effective_weight(s.class_id);
        let pred = eff.apply(s.feature);
        let t = s.target.to_array();
        let r: [f64; 4] = std::array::from_fn(|k| pred[k] - t[k]);
        loss += smooth_l1(&Delta::from_array(r), beta);
        let g: [f64; 4] = std::array::from_fn(|k| smooth_l1_grad(r[k], beta) * inv_n);
        let head = bank.class_to_head()[s.class_id];
        match (alpha, grads.agnostic.as_mut()) {
            (Some(a), Some(shared)) => {
                let to_shared: [f64; 4] = std::array::from_fn(|k| a * g[k]);
                let to_private: [f64; 4] = std::array::from_fn(|k| (1.0 - a) * g[k]);
                accumulate(shared, &to_shared, s.feature);
                accumulate(&mut grads.heads[head], &to_private, s.feature);
            }
            _ => accumulate(&mut grads.heads[head], &g, s.feature),
        }
    }
    grads.loss = loss * inv_n;
    grads
}

/// Mean batch regression loss, without gradients.
pub fn batch_loss(bank: &HeadBank, batch: &[RegressionSample<'_>], beta: f64) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let p = bank.effective_weight(s.class_id).apply(s.feature);
            let t = s.target.to_array();
            smooth_l1(
                &Delta::from_array(std::array::from_fn(|k| p[k] - t[k])),
                beta,
            )
        })
        .sum();
    total / batch.len() as f64
}

/// Classification gradient of mean softmax cross-entropy.
fn grad_classifier(
    clf: &LinearClassifier,
    batch: &[RegressionSample<'_>],
) -> (LinearClassifier, f64) {
    let mut g = LinearClassifier::zeros(clf.num_classes, clf.feature_dim);
    let d = clf.feature_dim;
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for s in batch {
        let p = softmax(&clf.scores_unchecked(s.feature));
        loss -= p[s.class_id].max(f64::MIN_POSITIVE).ln();
        for (c, pc) in p.iter().enumerate() {
            let dl = (pc - f64::from(u8::from(c == s.class_id))) * inv_n;
            let row = &mut g.weight[c * d..(c + 1) * d];
            for (w, x) in row.iter_mut().zip(s.feature) {
                *w += dl * x;
            }
            g.bias[c] += dl;
        }
    }
    (g, loss * inv_n)
}

fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn sgd_head(
    head: &mut AffineHead,
    vel: &mut AffineHead,
    grad: &AffineHead,
    lr: f64,
    momentum: f64,
) {
    sgd_step(
        &mut head.weight,
        &mut vel.weight,
        &grad.weight,
        lr,
        momentum,
    );
    sgd_step(&mut head.bias, &mut vel.bias, &grad.bias, lr, momentum);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub epoch: usize,
    pub split: Split,
    pub class_id: usize,
    pub group: FreqGroup,
    /// `None` when the class has no samples on this split.
    pub mean_reg_loss: Option<f64>,
    pub mean_cls_loss: Option<f64>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub epoch: usize,
    pub split: Split,
    pub group: FreqGroup,
    pub mean_reg_loss: Option<f64>,
    pub n_samples: usize,
}

/// Per-epoch, per-class loss records of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLedger {
    pub variant: String,
    pub epochs: usize,
    pub classes: Vec<ClassRecord>,
    pub groups: Vec<GroupRecord>,
    /// Mean training regression loss over all samples, per epoch.
    pub epoch_train_loss: Vec<f64>,
    pub weights_digest: String,
}

impl TrainLedger {
    pub fn records(&self, split: Split, epoch: usize) -> impl Iterator<Item = &ClassRecord> {
        self.classes
            .iter()
            .filter(move |r| r.split == split && r.epoch == epoch)
    }

    pub fn final_epoch(&self) -> usize {
        self.epochs - 1
    }

    /// Final-epoch per-class mean regression loss.
    pub fn final_class_losses(&self, split: Split) -> Vec<Option<f64>> {
        self.records(split, self.final_epoch())
            .map(|r| r.mean_reg_loss)
            .collect()
    }

    /// Group curve over epochs.
    pub fn group_curve(&self, split: Split, group: FreqGroup) -> Vec<Option<f64>> {
        self.groups
            .iter()
            .filter(|g| g.split == split && g.group == group)
            .map(|g| g.mean_reg_loss)
            .collect()
    }

    /// `epoch,class_id,group,mean_reg_loss,n_samples` for one split.
    pub fn to_csv(&self, split: Split) -> String {
        let mut s = String::from("epoch,class_id,group,mean_reg_loss,n_samples\n");
        for r in self.classes.iter().filter(|r| r.split == split) {
            let loss = r.mean_reg_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.class_id,
                r.group.as_str(),
                loss,
                r.n_samples
            );
        }
        s
    }

    /// `epoch,split,group,mean_reg_loss,n_samples` for both splits.
    pub fn groups_csv(&self) -> String {
        let mut s = String::from("epoch,split,group,mean_reg_loss,n_samples\n");
        for g in &self.groups {
            let loss = g.mean_reg_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                g.epoch,
                g.split.as_str(),
                g.group.as_str(),
                loss,
                g.n_samples
            );
        }
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("ledger serializes"))
    }
}

/// Per-class loss sums of one split under the current weights.
fn evaluate_split(
    bank: &HeadBank,
    classifier: Option<&LinearClassifier>,
    items: &[Instance],
    num_classes: usize,
    beta: f64,
) -> Vec<(f64, f64, usize)> {
    let effective: Vec<AffineHead> = (0..num_classes)
        .map(|c| bank.effective_weight(c).into_owned())
        .collect();
    let mut sums = vec![(0.0, 0.0, 0usize); num_classes];
    for inst in items {
        let p = effective[inst.class_id].apply(&inst.feature);
        let t = inst.target_delta.to_array();
        let reg = smooth_l1(
            &Delta::from_array(std::array::from_fn(|k| p[k] - t[k])),
            beta,
        );
        let cls = classifier.map_or(0.0, |clf| {
            let prob = softmax(&clf.scores_unchecked(&inst.feature));
            -prob[inst.class_id].max(f64::MIN_POSITIVE).ln()
        });
        let e = &mut sums[inst.class_id];
        e.0 += reg;
        e.1 += cls;
        e.2 += 1;
    }
    sums
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bank: HeadBank,
    pub classifier: Option<LinearClassifier>,
    pub ledger: TrainLedger,
    pub partition: FrequencyPartition,
}

/// Trains `variant` on the train split, recording per-class train and val
/// losses after every epoch. Deterministic in `(dataset, variant, config)`.
pub fn train(
    dataset: &SyntheticDataset,
    variant: &HeadVariant,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Contract(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let c = dataset.num_classes();
    let d = dataset.feature_dim();
    let partition = partition_by_frequency(dataset, FrequencyThresholds::default());
    let layout = head_layout(variant, c, &dataset.class_stats(), &partition)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(STREAM_HEAD_INIT);
    let mut bank = HeadBank::initialize(variant.clone(), layout, d, &mut init_rng)?;
    let mut classifier = match config.mode {
        TrainMode::Joint => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(STREAM_CLASSIFIER_INIT);
            Some(LinearClassifier::initialize(c, d, &mut rng))
        }
        TrainMode::RegressionOnlyGt => None,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);

    let mut vel = HeadGrads::zeros_like(&bank);
    let mut clf_vel = classifier
        .as_ref()
        .map(|k| LinearClassifier::zeros(k.num_classes, k.feature_dim));
    let beta = config.smooth_l1_beta;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut step = 0;
    let mut classes = Vec::with_capacity(config.epochs * c * 2);
    let mut groups = Vec::with_capacity(config.epochs * 6);
    let mut epoch_train_loss = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<RegressionSample<'_>> =
                chunk.iter().map(|&i| (&dataset.train[i]).into()).collect();
            let lr = config.lr_at(step);
            let mut g = grad_head(&bank, &batch, beta);
            if config.lambda_reg != 1.0 {
                for h in g.heads.iter_mut().chain(g.agnostic.iter_mut()) {
                    h.weight
                        .iter_mut()
                        .chain(h.bias.iter_mut())
                        .for_each(|v| *v *= config.lambda_reg);
                }
            }
            for ((head, v), gh) in bank
                .heads_mut()
                .iter_mut()
                .zip(&mut vel.heads)
                .zip(&g.heads)
            {
                sgd_head(head, v, gh, lr, config.momentum);
            }
            if let (Some(w0), Some(v0), Some(g0)) = (
                bank.agnostic_mut(),
                vel.agnostic.as_mut(),
                g.agnostic.as_ref(),
            ) {
                sgd_head(w0, v0, g0, lr, config.momentum);
            }
            if let (Some(clf), Some(cv)) = (classifier.as_mut(), clf_vel.as_mut()) {
                let (mut cg, _) = grad_classifier(clf, &batch);
                if config.lambda_cls != 1.0 {
                    cg.weight
                        .iter_mut()
                        .chain(cg.bias.iter_mut())
                        .for_each(|v| *v *= config.lambda_cls);
                }
                sgd_step(
                    &mut clf.weight,
                    &mut cv.weight,
                    &cg.weight,
                    lr,
                    config.momentum,
                );
                sgd_step(&mut clf.bias, &mut cv.bias, &cg.bias, lr, config.momentum);
            }
            step += 1;
        }

        for split in [Split::Train, Split::Val] {
            let sums = evaluate_split(&bank, classifier.as_ref(), dataset.split(split), c, beta);
            let mut group_sums: BTreeMap<FreqGroup, (f64, usize)> = BTreeMap::new();
            for (class_id, &(reg, cls, n)) in sums.iter().enumerate() {
                let group = partition.group_of(class_id);
                let e = group_sums.entry(group).or_default();
                e.0 += reg;
                e.1 += n;
                classes.push(ClassRecord {
                    epoch,
                    split,
                    class_id,
                    group,
                    mean_reg_loss: (n > 0).then(|| reg / n as f64),
                    mean_cls_loss: (n > 0 && classifier.is_some()).then(|| cls / n as f64),
                    n_samples: n,
                });
            }
            for group in FreqGroup::ALL {
                let (reg, n) = group_sums.get(&group).copied().unwrap_or_default();
                groups.push(GroupRecord {
                    epoch,
                    split,
                    group,
                    mean_reg_loss: (n > 0).then(|| reg / n as f64),
                    n_samples: n,
                });
            }
            if split == Split::Train {
                let total: f64 = sums.iter().map(|s| s.0).sum();
                let mean = total / dataset.train.len() as f64;
                if !mean.is_finite() {
                    return Err(Error::Diverged { epoch, loss: mean });
                }
                epoch_train_loss.push(mean);
            }
        }
        log::debug!(
            "{variant} epoch {epoch}: train reg loss {:.6e}",
            epoch_train_loss[epoch]
        );
    }

    let weights_digest = bank.seal().to_string();
    let ledger = TrainLedger {
        variant: variant.to_string(),
        epochs: config.epochs,
        classes,
        groups,
        epoch_train_loss,
        weights_digest,
    };
    Ok(TrainOutcome {
        bank,
        classifier,
        ledger,
        partition,
    })
}

/// Mean final-epoch val regression loss over rare classes divided by the same
/// over frequent classes. Classes without val samples are skipped; `None`
/// when either group is empty.
pub fn bias_ratio(ledger: &TrainLedger, partition: &FrequencyPartition) -> Option<f64> {
    let losses = ledger.final_class_losses(Split::Val);
    let group_mean = |g: FreqGroup| {
        let vals: Vec<f64> = partition
            .members(g)
            .into_iter()
            .filter_map(|c| losses.get(c).copied().flatten())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let rare = group_mean(FreqGroup::Rare)?;
    let frequent = group_mean(FreqGroup::Frequent)?;
    Some(rare / frequent)
}
