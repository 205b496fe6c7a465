//! Inference over proposals and COCO-style average precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{FreqGroup, FrequencyPartition, Instance, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::geometry::{decode_delta_clamped, iou, nms, score_order, BBox, DEFAULT_DELTA_CLAMP};
use crate::heads::{softmax, HeadBank, LinearClassifier};
use crate::training::{bias_ratio, TrainLedger};

/// Number of recall points of the interpolated precision-recall curve.
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections_per_image: usize,
    /// Replace predicted labels by ground truth (score 1.0).
    pub oracle_gt_class: bool,
    pub delta_clamp: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections_per_image: 100,
            oracle_gt_class: true,
            delta_clamp: DEFAULT_DELTA_CLAMP,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::config(
                "iou_thresholds",
                "need at least one threshold",
            ));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::config(
                "iou_thresholds",
                "thresholds must lie in (0, 1)",
            ));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "iou_thresholds",
                "thresholds must be strictly ascending",
            ));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::config("nms_threshold", "must lie in (0, 1)"));
        }
        if self.max_detections_per_image == 0 {
            return Err(Error::config(
                "max_detections_per_image",
                "must be positive",
            ));
        }
        if !(self.delta_clamp > 0.0) {
            return Err(Error::config("delta_clamp", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

impl From<&Instance> for GroundTruth {
    fn from(i: &Instance) -> Self {
        Self {
            image_id: i.image_id,
            class_id: i.class_id,
            bbox: i.gt_box,
        }
    }
}

/// Runs the heads (and, outside oracle mode, the classifier) over every
/// proposal of `split`, then per-class NMS and a per-image top-k cut.
///
/// Output is ordered by image id, then by descending score.
pub fn run_inference(
    bank: &HeadBank,
    classifier: Option<&LinearClassifier>,
    dataset: &SyntheticDataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if bank.digest().is_none() {
        return Err(Error::Contract(
            "head bank has not been trained (no weights digest)".into(),
        ));
    }
    if bank.feature_dim() != dataset.feature_dim() || bank.num_classes() != dataset.num_classes() {
        return Err(Error::Contract(
            "head bank does not match the dataset shape".into(),
        ));
    }
    let classifier = match (cfg.oracle_gt_class, classifier) {
        (true, _) => None,
        (false, Some(c)) => Some(c),
        (false, None) => {
            return Err(Error::Contract(
                "non-oracle inference needs a classifier".into(),
            ))
        }
    };
    let items = dataset.split(split);
    if items.is_empty() {
        return Err(Error::Contract(format!(
            "{} split is empty",
            split.as_str()
        )));
    }
    let extent = Some((dataset.config.image_size, dataset.config.image_size));
    let effective: Vec<_> = (0..bank.num_classes())
        .map(|c| bank.effective_weight(c).into_owned())
        .collect();

    let mut per_image: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for inst in items {
        let candidates = per_image.entry(inst.image_id).or_default();
        let mut emit = |class_id: usize, score: f64| {
            if score < cfg.score_threshold {
                return;
            }
            let delta =
                crate::geometry::Delta::from_array(effective[class_id].apply(&inst.feature));
            let bbox = decode_delta_clamped(&inst.proposal_box, &delta, cfg.delta_clamp, extent);
            candidates.push(Detection {
                image_id: inst.image_id,
                class_id,
                score,
                bbox,
            });
        };
        match classifier {
            None => emit(inst.class_id, 1.0),
            Some(clf) => {
                let probs = softmax(&clf.scores_unchecked(&inst.feature));
                for (c, p) in probs.into_iter().enumerate() {
                    emit(c, p);
                }
            }
        }
    }

    let mut out = Vec::new();
    for (_, candidates) in per_image {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, d) in candidates.iter().enumerate() {
            by_class.entry(d.class_id).or_default().push(i);
        }
        let mut kept: Vec<usize> = Vec::new();
        for idx in by_class.values() {
            let dets: Vec<(BBox, f64)> = idx
                .iter()
                .map(|&i| (candidates[i].bbox, candidates[i].score))
                .collect();
            kept.extend(nms(&dets, cfg.nms_threshold).into_iter().map(|k| idx[k]));
        }
        kept.sort_unstable();
        let order = score_order(kept.iter().map(|&i| candidates[i].score));
        out.extend(
            order
                .into_iter()
                .take(cfg.max_detections_per_image)
                .map(|o| candidates[kept[o]]),
        );
    }
    Ok(out)
}

/// Per-class AP at one IoU threshold; `None` for classes without ground truth.
///
/// Detections of a class are ranked by descending score (ties by input
/// order); each one matches the unmatched ground truth of the same image with
/// the highest IoU, provided that IoU reaches `iou_threshold`. AP is the mean
/// interpolated precision at 101 evenly spaced recall levels.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
    num_classes: usize,
) -> Vec<Option<f64>> {
    let mut gt_by_class: Vec<BTreeMap<usize, Vec<BBox>>> = vec![BTreeMap::new(); num_classes];
    for g in ground_truth {
        gt_by_class[g.class_id]
            .entry(g.image_id)
            .or_default()
            .push(g.bbox);
    }
    let mut det_by_class: Vec<Vec<&Detection>> = vec![Vec::new(); num_classes];
    for d in detections {
        det_by_class[d.class_id].push(d);
    }
    (0..num_classes)
        .map(|c| {
            let gts = &gt_by_class[c];
            let n_gt: usize = gts.values().map(Vec::len).sum();
            (n_gt > 0).then(|| class_ap(&det_by_class[c], gts, n_gt, iou_threshold))
        })
        .collect()
}

fn class_ap(dets: &[&Detection], gts: &BTreeMap<usize, Vec<BBox>>, n_gt: usize, thr: f64) -> f64 {
    let order = score_order(dets.iter().map(|d| d.score));
    let mut matched: BTreeMap<usize, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        let d = dets[i];
        if let (Some(boxes), Some(used)) = (gts.get(&d.image_id), matched.get_mut(&d.image_id)) {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in boxes.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
                tp += 1;
            }
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    interpolated_ap(&recall, &precision)
}

/// 101-point interpolated AP from a ranked precision/recall sequence.
pub fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    let mut pos = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while pos < recall.len() && recall[pos] < level {
            pos += 1;
        }
        if pos < recall.len() {
            total += envelope[pos];
        }
    }
    total / RECALL_POINTS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub oracle_gt_class: bool,
    pub iou_thresholds: Vec<f64>,
    /// Mean over thresholds of the class-mean AP, in `[0, 1]`.
    pub ap: f64,
    pub ap_per_threshold: Vec<f64>,
    /// Threshold-averaged AP per class; `None` for classes without val GT.
    pub ap_per_class: Vec<Option<f64>>,
    pub ap_per_group: BTreeMap<FreqGroup, Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub bias_ratio: Option<f64>,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    pub classification_accuracy: f64,
}

impl EvalReport {
    pub fn group_ap(&self, g: FreqGroup) -> Option<f64> {
        self.ap_per_group.get(&g).copied().flatten()
    }

    /// AP at the threshold closest to `t`.
    pub fn ap_at(&self, t: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|x| (x - t).abs() < 1e-9)
            .map(|i| self.ap_per_threshold[i])
    }

    pub const CSV_HEADER: &'static str = "variant,AP,APr,APc,APf,AP50,AP75";

    /// One row in table layout, values x100.
    pub fn csv_row(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.variant,
            pct(Some(self.ap)),
            pct(self.group_ap(FreqGroup::Rare)),
            pct(self.group_ap(FreqGroup::Common)),
            pct(self.group_ap(FreqGroup::Frequent)),
            pct(self.ap_at(0.5)),
            pct(self.ap_at(0.75)),
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Evaluates a trained bank on the val split.
pub fn report(
    bank: &HeadBank,
    classifier: Option<&LinearClassifier>,
    dataset: &SyntheticDataset,
    cfg: &EvalConfig,
    partition: &FrequencyPartition,
    ledger: Option<&TrainLedger>,
) -> Result<(EvalReport, Vec<Detection>)> {
    let detections = run_inference(bank, classifier, dataset, Split::Val, cfg)?;
    let gts: Vec<GroundTruth> = dataset.val.iter().map(GroundTruth::from).collect();
    let report = report_from_detections(
        &bank.variant().to_string(),
        &detections,
        &gts,
        dataset.num_classes(),
        cfg,
        partition,
    );
    let classification_accuracy = match (cfg.oracle_gt_class, classifier) {
        (false, Some(clf)) => {
            let hits = dataset
                .val
                .iter()
                .filter(|i| {
                    let s = clf.scores_unchecked(&i.feature);
                    score_order(s.into_iter()).first() == Some(&i.class_id)
                })
                .count();
            hits as f64 / dataset.val.len() as f64
        }
        _ => 1.0,
    };
    Ok((
        EvalReport {
            bias_ratio: ledger.and_then(|l| bias_ratio(l, partition)),
            classification_accuracy,
            ..report
        },
        detections,
    ))
}

/// Assembles AP tables from precomputed detections.
pub fn report_from_detections(
    variant: &str,
    detections: &[Detection],
    gts: &[GroundTruth],
    num_classes: usize,
    cfg: &EvalConfig,
    partition: &FrequencyPartition,
) -> EvalReport {
    let per_threshold: Vec<Vec<Option<f64>>> = cfg
        .iou_thresholds
        .iter()
        .map(|&t| average_precision(detections, gts, t, num_classes))
        .collect();
    let ap_per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let vals: Option<Vec<f64>> = per_threshold.iter().map(|row| row[c]).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let ap_per_threshold: Vec<f64> = per_threshold
        .iter()
        .map(|row| mean(&mut row.iter().flatten().copied()).unwrap_or(0.0))
        .collect();
    let ap = mean(&mut ap_per_class.iter().flatten().copied()).unwrap_or(0.0);
    let ap_per_group = FreqGroup::ALL
        .iter()
        .map(|&g| {
            let m = mean(
                &mut partition
                    .members(g)
                    .into_iter()
                    .filter_map(|c| ap_per_class[c]),
            );
            (g, m)
        })
        .collect();
    EvalReport {
        variant: variant.to_string(),
        oracle_gt_class: cfg.oracle_gt_class,
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap,
        ap_per_threshold,
        excluded_classes: (0..num_classes)
            .filter(|&c| ap_per_class[c].is_none())
            .collect(),
        ap_per_class,
        ap_per_group,
        bias_ratio: None,
        num_detections: detections.len(),
        num_ground_truth: gts.len(),
        classification_accuracy: 1.0,
    }
}

pub const DETECTIONS_HEADER: &str = "image_id,class_id,score,x1,y1,x2,y2";

pub fn detections_to_csv(dets: &[Detection]) -> String {
    let mut s = String::with_capacity(64 * dets.len() + 40);
    s.push_str(DETECTIONS_HEADER);
    s.push('\n');
    for d in dets {
        let [x1, y1, x2, y2] = d.bbox.to_array();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            d.image_id, d.class_id, d.score, x1, y1, x2, y2
        );
    }
    s
}

pub fn detections_from_csv(text: &str) -> Result<Vec<Detection>> {
    let bad = |line: usize, reason: String| Error::Format {
        what: "detections file",
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == DETECTIONS_HEADER => {}
        _ => return Err(bad(1, "missing header".into())),
    }
    lines
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(i + 1, format!("expected 7 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(i + 1, e.to_string()));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 1, e.to_string()));
            Ok(Detection {
                image_id: int(f[0])?,
                class_id: int(f[1])?,
                score: num(f[2])?,
                bbox: BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?)?,
            })
        })
        .collect()
}

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<String> {
    crate::digest::write_file(path, detections_to_csv(dets).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![
            GroundTruth {
                image_id: 0,
                class_id: 0,
                bbox: bx(0.0, 0.0, 10.0, 10.0),
            },
            GroundTruth {
                image_id: 1,
                class_id: 0,
                bbox: bx(5.0, 5.0, 20.0, 20.0),
            },
        ];
        let dets: Vec<Detection> = gts
            .iter()
            .map(|g| Detection {
                image_id: g.image_id,
                class_id: 0,
                score: 1.0,
                bbox: g.bbox,
            })
            .collect();
        assert_eq!(
            average_precision(&dets, &gts, 0.5, 2),
            vec![Some(1.0), None]
        );
        assert_eq!(average_precision(&[], &gts, 0.5, 1), vec![Some(0.0)]);
    }

    #[test]
    fn half_recall() {
        let gts = vec![
            GroundTruth {
                image_id: 0,
                class_id: 0,
                bbox: bx(0.0, 0.0, 10.0, 10.0),
            },
            GroundTruth {
                image_id: 0,
                class_id: 0,
                bbox: bx(50.0, 50.0, 60.0, 60.0),
            },
        ];
        let dets = vec![Detection {
            image_id: 0,
            class_id: 0,
            score: 0.9,
            bbox: bx(0.0, 0.0, 10.0, 10.0),
        }];
        // precision 1 for recall levels 0..=0.5 (51 of 101 points)
        let ap = average_precision(&dets, &gts, 0.5, 1)[0].unwrap();
        assert!((ap - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![GroundTruth {
            image_id: 3,
            class_id: 1,
            bbox: g,
        }];
        let dets = vec![
            Detection {
                image_id: 3,
                class_id: 1,
                score: 0.4,
                bbox: g,
            },
            Detection {
                image_id: 3,
                class_id: 1,
                score: 0.9,
                bbox: g,
            },
        ];
        assert_eq!(average_precision(&dets, &gts, 0.5, 2)[1], Some(1.0));
        // wrong image never matches
        let elsewhere = vec![Detection {
            image_id: 4,
            class_id: 1,
            score: 0.9,
            bbox: g,
        }];
        assert_eq!(average_precision(&elsewhere, &gts, 0.5, 2)[1], Some(0.0));
    }

    #[test]
    fn detections_csv_roundtrip() {
        let dets = vec![
            Detection {
                image_id: 2,
                class_id: 7,
                score: 0.123_456_789_012_345_67,
                bbox: bx(0.1, 0.2, 10.3, 20.000_000_000_000_004),
            },
            Detection {
                image_id: 9,
                class_id: 0,
                score: 1.0,
                bbox: bx(1.0, 2.0, 3.0, 4.0),
            },
        ];
        let text = detections_to_csv(&dets);
        assert_eq!(detections_from_csv(&text).unwrap(), dets);
        assert!(detections_from_csv("nope\n").is_err());
        assert!(detections_from_csv(&format!("{DETECTIONS_HEADER}\n1,2,3\n")).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = EvalConfig::default();
        assert_eq!(ok.iou_thresholds.len(), 10);
        assert_eq!(ok.iou_thresholds[9], 0.95);
        assert!(ok.validate().is_ok());
        let unsorted = EvalConfig {
            iou_thresholds: vec![0.7, 0.5],
            ..ok.clone()
        };
        assert!(unsorted.validate().is_err());
        let out_of_range = EvalConfig {
            iou_thresholds: vec![0.5, 1.0],
            ..ok
        };
        assert!(out_of_range.validate().is_err());
    }
}
