//! Depth-error metrics and mask-quality scoring.
//!
//! The seven standard monocular depth columns: Abs Rel, Sq Rel, RMSE,
//! RMSE_log, and the three delta thresholds. Median scaling (on by default in
//! fit evaluation) resolves the monocular scale ambiguity by multiplying the
//! prediction with `median(gt) / median(pred)` computed over the whole image;
//! a region argument restricts only the metric aggregation, matching how
//! restricted-region tables are produced. Predictions are clamped to
//! `[1e-3, 80]` scene units before scoring.

use serde::{Deserialize, Serialize};

use crate::field::DepthMap;
use crate::masks::MaskStack;
use crate::{Error, Result};

pub const DEPTH_CAP_MIN: f64 = 1e-3;
pub const DEPTH_CAP_MAX: f64 = 80.0;

/// Boolean pixel set used to restrict evaluation (e.g. moving regions).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl RegionMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        RegionMask {
            width,
            height,
            data,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        RegionMask::new(width, height, vec![true; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// The seven-column depth evaluation row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3
        )
    }
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Depth metrics of `pred` against `gt`, optionally restricted to a region
/// and median-scaled. Scaling medians are always taken over the whole image;
/// the region only restricts which pixels are aggregated.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    region: Option<&RegionMask>,
    median_scale: bool,
) -> Result<DepthMetrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::Shape("depth metric shape mismatch".into()));
    }
    if let Some(r) = region {
        if r.width() != gt.width() || r.height() != gt.height() {
            return Err(Error::Shape("region shape mismatch".into()));
        }
        if r.count() == 0 {
            return Err(Error::Domain("evaluation region is empty".into()));
        }
    }
    let scale = if median_scale {
        let mut gts: Vec<f64> = gt.data().to_vec();
        let mut preds: Vec<f64> = pred.data().to_vec();
        median(&mut gts) / median(&mut preds)
    } else {
        1.0
    };

    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut d1 = 0usize;
    let mut d2 = 0usize;
    let mut d3 = 0usize;
    let mut n = 0usize;
    for (i, (&p_raw, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if let Some(r) = region {
            if !r.data()[i] {
                continue;
            }
        }
        let p = (p_raw * scale).clamp(DEPTH_CAP_MIN, DEPTH_CAP_MAX);
        let diff = p - g;
        abs_rel += diff.abs() / g;
        sq_rel += diff * diff / g;
        sq += diff * diff;
        sq_log += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        // Strict thresholds: a ratio of exactly 1.25 does not count.
        if ratio < 1.25 {
            d1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1;
        }
        n += 1;
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
    })
}

/// Best overlap between thresholded mask channels and a ground-truth moving
/// region, over single channels and unions of two (a single object may split
/// across components).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskIouReport {
    pub best_iou: f64,
    /// Channel achieving the best single-channel IoU.
    pub best_channel: usize,
    pub best_single_iou: f64,
    /// Present when a two-channel union beats every single channel.
    pub best_pair: Option<(usize, usize)>,
}

pub fn mask_iou(pred: &MaskStack<f64>, gt_moving: &RegionMask, threshold: f64) -> Result<MaskIouReport> {
    if pred.width != gt_moving.width() || pred.height != gt_moving.height() {
        return Err(Error::Shape("mask IoU shape mismatch".into()));
    }
    let n = pred.width * pred.height;
    let k = pred.k;
    let binary: Vec<Vec<bool>> = (0..k)
        .map(|i| (0..n).map(|px| pred.data[px * k + i] > threshold).collect())
        .collect();
    let iou_of = |channels: &[usize]| -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for px in 0..n {
            let p = channels.iter().any(|&i| binary[i][px]);
            let g = gt_moving.data()[px];
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    };

    let mut best_single = (0usize, 0.0f64);
    for i in 0..k {
        let iou = iou_of(&[i]);
        if iou > best_single.1 {
            best_single = (i, iou);
        }
    }
    let mut best = best_single.1;
    let mut best_pair = None;
    for i in 0..k {
        for j in (i + 1)..k {
            let iou = iou_of(&[i, j]);
            if iou > best {
                best = iou;
                best_pair = Some((i, j));
            }
        }
    }
    Ok(MaskIouReport {
        best_iou: best,
        best_channel: best_single.0,
        best_single_iou: best_single.1,
        best_pair,
    })
}
