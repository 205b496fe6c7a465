//! Static SVG and CSV renderings of sweep results.
//!
//! Every SVG is drawn from the same in-memory table that is written to the
//! matching CSV, and each plotted point carries its exact value in a
//! `data-value` attribute.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{FreqGroup, Split};
use crate::digest::write_file;
use crate::error::Result;
use crate::experiments::{variant_dir, SweepResult};
use crate::heads::HeadVariant;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#d62728", "#ff7f0e", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b",
];

/// One row of the per-group loss-curve table.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub variant: String,
    pub split: Split,
    pub group: FreqGroup,
    pub epoch: usize,
    /// Mean over seeds of the group's mean regression loss.
    pub loss: f64,
}

/// Group loss curves of every variant, averaged over seeds. Points where
/// some seed has no sample in the group are dropped.
pub fn curve_table(result: &SweepResult) -> Vec<CurvePoint> {
    let mut rows = Vec::new();
    for v in &result.spec.variants {
        let cells: Vec<_> = result.cells.iter().filter(|c| &c.variant == v).collect();
        for split in [Split::Train, Split::Val] {
            for group in FreqGroup::ALL {
                let curves: Vec<Vec<Option<f64>>> = cells
                    .iter()
                    .map(|c| c.ledger.group_curve(split, group))
                    .collect();
                let epochs = curves.iter().map(Vec::len).min().unwrap_or(0);
                for epoch in 0..epochs {
                    let vals: Option<Vec<f64>> = curves.iter().map(|c| c[epoch]).collect();
                    if let Some(vals) = vals {
                        rows.push(CurvePoint {
                            variant: v.to_string(),
                            split,
                            group,
                            epoch,
                            loss: vals.iter().sum::<f64>() / vals.len() as f64,
                        });
                    }
                }
            }
        }
    }
    rows
}

pub fn curve_csv(rows: &[CurvePoint]) -> String {
    let mut s = String::from("variant,split,group,epoch,mean_reg_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.variant,
            r.split.as_str(),
            r.group.as_str(),
            r.epoch,
            r.loss
        );
    }
    s
}

/// Per-class final val loss of a baseline and a comparison variant, sorted
/// by descending baseline loss. One row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLossRow {
    pub class_id: usize,
    pub group: FreqGroup,
    pub before: Option<f64>,
    pub after: Option<f64>,
}

/// The pair compared by the before/after plots: `specific` (else the first
/// variant) against `cab:0.5` (else the best other variant by mean AP).
pub fn comparison_pair(result: &SweepResult) -> Option<(HeadVariant, HeadVariant)> {
    let variants = &result.spec.variants;
    let before = variants
        .iter()
        .find(|v| **v == HeadVariant::Specific)
        .or(variants.first())?
        .clone();
    let cab = HeadVariant::Cab { alpha: 0.5 };
    let after = if variants.contains(&cab) && cab != before {
        cab
    } else {
        result
            .summary
            .iter()
            .filter(|s| s.variant != before)
            .max_by(|a, b| a.ap.mean.total_cmp(&b.ap.mean))?
            .variant
            .clone()
    };
    Some((before, after))
}

fn mean_final_losses(result: &SweepResult, v: &HeadVariant) -> Vec<Option<f64>> {
    let per_seed: Vec<Vec<Option<f64>>> = result
        .cells
        .iter()
        .filter(|c| &c.variant == v)
        .map(|c| c.ledger.final_class_losses(Split::Val))
        .collect();
    let classes = per_seed.iter().map(Vec::len).min().unwrap_or(0);
    (0..classes)
        .map(|k| {
            let vals: Option<Vec<f64>> = per_seed.iter().map(|s| s[k]).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

pub fn class_loss_table(
    result: &SweepResult,
    before: &HeadVariant,
    after: &HeadVariant,
) -> Vec<ClassLossRow> {
    let b = mean_final_losses(result, before);
    let a = mean_final_losses(result, after);
    let groups: Vec<FreqGroup> = result
        .cells
        .iter()
        .find(|c| &c.variant == before)
        .map(|c| {
            c.ledger
                .records(Split::Val, c.ledger.final_epoch())
                .map(|r| r.group)
                .collect()
        })
        .unwrap_or_default();
    let mut rows: Vec<ClassLossRow> = (0..b.len())
        .map(|k| ClassLossRow {
            class_id: k,
            group: groups[k],
            before: b[k],
            after: a.get(k).copied().flatten(),
        })
        .collect();
    rows.sort_by(|x, y| {
        let key = |r: &ClassLossRow| r.before.unwrap_or(f64::NEG_INFINITY);
        key(y).total_cmp(&key(x)).then(x.class_id.cmp(&y.class_id))
    });
    rows
}

pub fn class_loss_csv(rows: &[ClassLossRow], before: &HeadVariant, after: &HeadVariant) -> String {
    let mut s = format!("rank,class_id,group,{before},{after}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (rank, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            "{rank},{},{},{},{}",
            r.class_id,
            r.group.as_str(),
            opt(r.before),
            opt(r.after)
        );
    }
    s
}

/// AP at each IoU threshold (x100, mean over seeds) for the pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ApDeltaRow {
    pub threshold: f64,
    pub before: f64,
    pub after: f64,
}

impl ApDeltaRow {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

pub fn ap_delta_table(
    result: &SweepResult,
    before: &HeadVariant,
    after: &HeadVariant,
) -> Vec<ApDeltaRow> {
    let profile = |v: &HeadVariant| -> (Vec<f64>, Vec<f64>) {
        let cells: Vec<_> = result.cells.iter().filter(|c| &c.variant == v).collect();
        let Some(first) = cells.first() else {
            return (Vec::new(), Vec::new());
        };
        let thr = first.report.iou_thresholds.clone();
        let means = (0..thr.len())
            .map(|i| {
                100.0
                    * cells
                        .iter()
                        .map(|c| c.report.ap_per_threshold[i])
                        .sum::<f64>()
                    / cells.len() as f64
            })
            .collect();
        (thr, means)
    };
    let (thr, b) = profile(before);
    let (_, a) = profile(after);
    thr.iter()
        .zip(b.iter().zip(&a))
        .map(|(&threshold, (&before, &after))| ApDeltaRow {
            threshold,
            before,
            after,
        })
        .collect()
}

pub fn ap_delta_csv(rows: &[ApDeltaRow], before: &HeadVariant, after: &HeadVariant) -> String {
    let mut s = format!("iou_threshold,{before},{after},delta\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.threshold, r.before, r.after, r.delta());
    }
    s
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let widen = |a: f64, b: f64| {
            if (b - a).abs() < 1e-12 {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, xlabel: &str, ylabel: &str, frame: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        esc(title)
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        esc(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        esc(ylabel)
    );
    for (v, y) in [(frame.y0, b), (frame.y1, t)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            l - 4.0,
            y + 4.0,
            v
        );
    }
    for (v, x) in [(frame.x0, l), (frame.x1, r)] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#,
            b + 16.0
        );
    }
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Val-split group loss against epoch for one variant.
pub fn curve_svg(rows: &[CurvePoint], variant: &str) -> String {
    let pts: Vec<&CurvePoint> = rows
        .iter()
        .filter(|r| r.variant == variant && r.split == Split::Val)
        .collect();
    let (ylo, yhi) = range(pts.iter().map(|p| p.loss));
    let (xlo, xhi) = range(pts.iter().map(|p| p.epoch as f64));
    let frame = if pts.is_empty() {
        Frame::new(0.0, 1.0, 0.0, 1.0)
    } else {
        Frame::new(xlo, xhi, ylo.min(0.0), yhi)
    };
    let mut s = svg_open(
        &format!("val regression loss by group: {variant}"),
        "epoch",
        "mean regression loss",
        &frame,
    );
    for (gi, group) in FreqGroup::ALL.into_iter().enumerate() {
        let series: Vec<&&CurvePoint> = pts.iter().filter(|p| p.group == group).collect();
        let color = COLORS[gi];
        let path: Vec<String> = series
            .iter()
            .map(|p| format!("{:.2},{:.2}", frame.x(p.epoch as f64), frame.y(p.loss)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            path.join(" ")
        );
        for p in &series {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-series="{}" data-x="{}" data-value="{}"/>"#,
                frame.x(p.epoch as f64),
                frame.y(p.loss),
                group.as_str(),
                p.epoch,
                p.loss
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 70.0,
            MARGIN + 16.0 * gi as f64,
            group.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn bar_svg(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    labels: &[String],
    series: &[(String, Vec<Option<f64>>)],
) -> String {
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().flatten().copied()));
    let frame = if lo.is_finite() {
        Frame::new(0.0, labels.len() as f64, lo.min(0.0), hi.max(0.0))
    } else {
        Frame::new(0.0, 1.0, 0.0, 1.0)
    };
    let mut s = svg_open(title, xlabel, ylabel, &frame);
    let slot = (frame.x(1.0) - frame.x(0.0)) / series.len().max(1) as f64;
    for (si, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[(si + 2) % COLORS.len()];
        for (i, v) in vals.iter().enumerate() {
            let Some(v) = *v else { continue };
            let x = frame.x(i as f64) + slot * si as f64;
            let (ya, yb) = (frame.y(v.max(0.0)), frame.y(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{color}" data-series="{}" data-x="{}" data-value="{v}"/>"#,
                (slot * 0.9).max(0.5),
                (yb - ya).max(0.0),
                esc(name),
                esc(&labels[i])
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 140.0,
            MARGIN + 16.0 * si as f64,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn class_loss_svg(rows: &[ClassLossRow], before: &HeadVariant, after: &HeadVariant) -> String {
    let labels: Vec<String> = rows.iter().map(|r| r.class_id.to_string()).collect();
    bar_svg(
        "final val regression loss per class (sorted by baseline)",
        "class",
        "mean regression loss",
        &labels,
        &[
            (before.to_string(), rows.iter().map(|r| r.before).collect()),
            (after.to_string(), rows.iter().map(|r| r.after).collect()),
        ],
    )
}

pub fn ap_delta_svg(rows: &[ApDeltaRow], before: &HeadVariant, after: &HeadVariant) -> String {
    let labels: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.threshold)).collect();
    bar_svg(
        &format!("AP gain of {after} over {before}"),
        "IoU threshold",
        "delta AP (x100)",
        &labels,
        &[(
            format!("{after} - {before}"),
            rows.iter().map(|r| Some(r.delta())).collect(),
        )],
    )
}

/// Writes all plots of `result` into `dir`; returns the written paths.
pub fn emit_plots(result: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    let curves = curve_table(result);
    put("loss_curves.csv".into(), curve_csv(&curves))?;
    for v in &result.spec.variants {
        put(
            format!("loss_curves_{}.svg", variant_dir(v)),
            curve_svg(&curves, &v.to_string()),
        )?;
    }
    if let Some((before, after)) = comparison_pair(result) {
        let rows = class_loss_table(result, &before, &after);
        put(
            "class_losses.csv".into(),
            class_loss_csv(&rows, &before, &after),
        )?;
        put(
            "class_losses.svg".into(),
            class_loss_svg(&rows, &before, &after),
        )?;
        let deltas = ap_delta_table(result, &before, &after);
        put(
            "ap_delta.csv".into(),
            ap_delta_csv(&deltas, &before, &after),
        )?;
        put(
            "ap_delta.svg".into(),
            ap_delta_svg(&deltas, &before, &after),
        )?;
    }
    Ok(written)
}
