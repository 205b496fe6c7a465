#![allow(dead_code)]

//! Reference oracles shared by the integration tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tailreg_core::dataset::{default_scale_means, generate, DatasetConfig, SyntheticDataset};
use tailreg_core::evaluation::{Detection, GroundTruth};
use tailreg_core::geometry::{iou, BBox, Delta};
use tailreg_core::heads::{AffineHead, ClusterConfig, HeadBank, HeadVariant, SortKey};
use tailreg_core::training::{batch_loss, HeadGrads, RegressionSample};

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x = rng.random_range(0.0..extent);
    let y = rng.random_range(0.0..extent);
    let w = rng.random_range(1.0..extent / 2.0);
    let h = rng.random_range(1.0..extent / 2.0);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Intersection over union from first principles, independent of the
/// library's area helpers.
pub fn reference_iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.to_array();
    let [bx1, by1, bx2, by2] = b.to_array();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)
}

/// Quadratic suppressor: a box survives iff no earlier-ranked survivor
/// overlaps it by more than the threshold.
pub fn reference_nms(dets: &[(BBox, f64)], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n - 1 - i {
            let (a, b) = (rank[j], rank[j + 1]);
            if dets[b].1 > dets[a].1 {
                rank.swap(j, j + 1);
            }
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &rank {
        if kept
            .iter()
            .all(|&k| reference_iou(&dets[k].0, &dets[i].0) <= thr)
        {
            kept.push(i);
        }
    }
    kept
}

/// Reference evaluator for one class. Enumerates every partial one-to-one
/// assignment of detections to same-image ground truth with IoU at least
/// `thr`, keeps the unique one consistent with the greedy rule, and reads AP
/// straight off its definition (best precision at or beyond each recall).
pub fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let eligible: Vec<Vec<bool>> = order
        .iter()
        .map(|&d| {
            gts.iter()
                .map(|g| dets[d].image_id == g.image_id && iou(&dets[d].bbox, &g.bbox) >= thr)
                .collect()
        })
        .collect();

    fn assignments(
        k: usize,
        eligible: &[Vec<bool>],
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if k == eligible.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        assignments(k + 1, eligible, used, cur, out);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && eligible[k][g] {
                used[g] = true;
                cur.push(Some(g));
                assignments(k + 1, eligible, used, cur, out);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let mut all = Vec::new();
    assignments(
        0,
        &eligible,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut all,
    );

    let greedy_consistent = |a: &[Option<usize>]| {
        let mut taken = vec![false; gts.len()];
        for (rank, &d) in order.iter().enumerate() {
            let best = (0..gts.len())
                .filter(|&g| !taken[g] && eligible[rank][g])
                .fold(None, |best: Option<usize>, g| match best {
                    Some(b)
                        if iou(&dets[d].bbox, &gts[b].bbox) >= iou(&dets[d].bbox, &gts[g].bbox) =>
                    {
                        Some(b)
                    }
                    _ => Some(g),
                });
            if a[rank] != best {
                return false;
            }
            if let Some(g) = best {
                taken[g] = true;
            }
        }
        true
    };
    let chosen: Vec<&Vec<Option<usize>>> = all.iter().filter(|a| greedy_consistent(a)).collect();
    assert_eq!(
        chosen.len(),
        1,
        "greedy rule must pick exactly one assignment"
    );
    let a = chosen[0];

    let n = gts.len() as f64;
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (rank, m) in a.iter().enumerate() {
        if m.is_some() {
            tp += 1.0;
        }
        points.push((tp / n, tp / (rank + 1) as f64));
    }
    let total: f64 = (0..=100)
        .map(|r| {
            let level = r as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

pub fn random_ap_instance(
    rng: &mut ChaCha8Rng,
    n_gt: usize,
    n_det: usize,
) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.random_range(1..3);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
            let (w, h) = (rng.random_range(5.0..20.0), rng.random_range(5.0..20.0));
            GroundTruth {
                image_id: rng.random_range(0..images),
                class_id: 0,
                bbox: bx(x, y, x + w, y + h),
            }
        })
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            // perturb a random GT so matches are common
            let g = &gts[rng.random_range(0..n_gt)];
            let [x1, y1, x2, y2] = g.bbox.to_array();
            let mut j = || rng.random_range(-3.0..3.0);
            let (a, b, c, d) = (x1 + j(), y1 + j(), x2 + j(), y2 + j());
            Detection {
                image_id: if rng.random_bool(0.85) {
                    g.image_id
                } else {
                    rng.random_range(0..images)
                },
                class_id: 0,
                score: (rng.random_range(0..5) as f64) / 5.0,
                bbox: bx(
                    a.min(c - 1.0),
                    b.min(d - 1.0),
                    c.max(a + 1.0),
                    d.max(b + 1.0),
                ),
            }
        })
        .collect();
    (dets, gts)
}

pub const CLASSES: usize = 6;
pub const DIM: usize = 5;

pub fn small_dataset(seed: u64) -> SyntheticDataset {
    generate(&DatasetConfig {
        num_classes: 12,
        train_images: 300,
        val_images: 80,
        scale_means: default_scale_means(12),
        ..DatasetConfig::lt60(seed)
    })
    .unwrap()
}

/// One bank per head kind, with weights large enough that residuals land on
/// both branches of smooth-L1.
pub fn random_bank(kind: usize, rng: &mut ChaCha8Rng) -> HeadBank {
    let (variant, mapping) = match kind {
        0 => (HeadVariant::Specific, (0..CLASSES).collect()),
        1 => (HeadVariant::Agnostic, vec![0; CLASSES]),
        2 => (
            HeadVariant::Cab {
                alpha: rng.random_range(0.05..0.95),
            },
            (0..CLASSES).collect(),
        ),
        3 => (
            HeadVariant::Clustered(ClusterConfig {
                k: 3,
                sort_key: SortKey::InstanceCount,
            }),
            vec![0, 0, 1, 1, 2, 2],
        ),
        _ => ("merge:rc".parse().unwrap(), vec![0, 0, 0, 1, 2, 3]),
    };
    let mut bank = HeadBank::zeros(variant, mapping, DIM).unwrap();
    let mut fill = |h: &mut AffineHead| {
        for v in h.weight.iter_mut().chain(h.bias.iter_mut()) {
            *v = 0.7 * rng.sample::<f64, _>(StandardNormal);
        }
    };
    bank.heads_mut().iter_mut().for_each(&mut fill);
    if let Some(w0) = bank.agnostic_mut() {
        fill(w0);
    }
    bank
}

pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub classes: Vec<usize>,
    pub targets: Vec<Delta>,
}

impl Batch {
    pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let mut gauss = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let features = (0..n)
            .map(|_| (0..DIM).map(|_| gauss(1.0)).collect())
            .collect();
        let targets = (0..n)
            .map(|_| Delta::new(gauss(1.0), gauss(1.0), gauss(0.5), gauss(0.5)))
            .collect();
        let classes = (0..n).map(|i| i % CLASSES).collect();
        Self {
            features,
            classes,
            targets,
        }
    }

    pub fn samples(&self) -> Vec<RegressionSample<'_>> {
        (0..self.classes.len())
            .map(|i| RegressionSample {
                class_id: self.classes[i],
                feature: &self.features[i],
                target: self.targets[i],
            })
            .collect()
    }
}

/// Address of one scalar parameter: head slot (`None` = shared head),
/// flat index into weight then bias.
pub type Param = (Option<usize>, usize);

pub fn param_mut(bank: &mut HeadBank, (slot, i): Param) -> &mut f64 {
    let head = match slot {
        Some(h) => &mut bank.heads_mut()[h],
        None => bank.agnostic_mut().unwrap(),
    };
    let nw = head.weight.len();
    if i < nw {
        &mut head.weight[i]
    } else {
        &mut head.bias[i - nw]
    }
}

pub fn analytic(g: &HeadGrads, (slot, i): Param) -> f64 {
    let head = match slot {
        Some(h) => &g.heads[h],
        None => g.agnostic.as_ref().unwrap(),
    };
    let nw = head.weight.len();
    if i < nw {
        head.weight[i]
    } else {
        head.bias[i - nw]
    }
}

pub fn numeric(bank: &HeadBank, batch: &[RegressionSample<'_>], p: Param, h: f64) -> f64 {
    let mut plus = bank.clone();
    *param_mut(&mut plus, p) += h;
    let mut minus = bank.clone();
    *param_mut(&mut minus, p) -= h;
    (batch_loss(&plus, batch, 1.0) - batch_loss(&minus, batch, 1.0)) / (2.0 * h)
}

/// Relative error with a floor of 1e-4 on the scale. Exact zeros (opposite
/// linear-branch residuals cancelling) read back as roundoff of about
/// `eps * loss / h`, roughly 1e-10 here.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

pub fn all_params(bank: &HeadBank) -> Vec<Param> {
    let per = 4 * DIM + 4;
    let mut ps: Vec<Param> = (0..bank.head_count())
        .flat_map(|h| (0..per).map(move |i| (Some(h), i)))
        .collect();
    if bank.agnostic().is_some() {
        ps.extend((0..per).map(|i| (None, i)));
    }
    ps
}
