//! Lane metrics: stripe IoU, one-to-one matching with precision, recall,
//! F1 and mIoU, and the flickering / missing rates over GT tracks.

use serde::{Deserialize, Serialize};

use crate::eigenlane::LaneCurve;
use crate::geometry::LaneGeometry;
use crate::raster::{self, Raster};
use crate::scenegen::GtLane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Stripe width in pixels of a 640-column image; scaled to the actual width.
    pub stripe_width: f64,
    /// A prediction is correct when its IoU with a GT lane exceeds this.
    pub iou_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            stripe_width: 30.0,
            iou_threshold: 0.5,
        }
    }
}

impl MetricConfig {
    /// Stripe half-width in image pixels of `geom`.
    pub fn half_width(&self, geom: &LaneGeometry) -> f64 {
        0.5 * self.stripe_width * geom.width_scale()
    }
}

fn stripe(curve: &LaneCurve, geom: &LaneGeometry, half: f64) -> Vec<bool> {
    raster::stripe_mask(geom, &Raster::image(geom), &curve.xs, curve.valid, half)
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of the two curves rasterized as stripes of half-width `half` on the
/// image raster. Two empty stripes give 0.
pub fn lane_iou(pred: &LaneCurve, gt: &LaneCurve, geom: &LaneGeometry, half: f64) -> f64 {
    mask_iou(&stripe(pred, geom, half), &stripe(gt, geom, half))
}

/// `ious[p][g]` for every prediction/GT pair.
pub fn iou_matrix(preds: &[LaneCurve], gts: &[GtLane], geom: &LaneGeometry, half: f64) -> Vec<Vec<f64>> {
    let gm: Vec<Vec<bool>> = gts.iter().map(|g| stripe(&g.curve, geom, half)).collect();
    preds
        .iter()
        .map(|p| {
            let pm = stripe(p, geom, half);
            gm.iter().map(|g| mask_iou(&pm, g)).collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub track_id: u32,
    pub iou: f64,
}

/// One-to-one matching of a frame.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMatch {
    pub matches: Vec<Match>,
    /// Unmatched prediction indices.
    pub false_positives: Vec<usize>,
    /// Track IDs of unmatched GT lanes.
    pub false_negatives: Vec<u32>,
}

/// Greedy matching: repeatedly take the highest-IoU unused pair above the
/// threshold. Ties go to the lower prediction, then the lower GT index.
pub fn greedy_match(ious: &[Vec<f64>], track_ids: &[u32], threshold: f64) -> FrameMatch {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (p, row) in ious.iter().enumerate() {
        for (g, &v) in row.iter().enumerate() {
            if v > threshold {
                pairs.push((p, g, v));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; ious.len()];
    let mut gt_used = vec![false; track_ids.len()];
    let mut matches = Vec::new();
    for (p, g, v) in pairs {
        if !pred_used[p] && !gt_used[g] {
            pred_used[p] = true;
            gt_used[g] = true;
            matches.push(Match {
                pred: p,
                track_id: track_ids[g],
                iou: v,
            });
        }
    }
    matches.sort_by_key(|m| m.pred);
    FrameMatch {
        matches,
        false_positives: (0..ious.len()).filter(|&p| !pred_used[p]).collect(),
        false_negatives: (0..track_ids.len()).filter(|&g| !gt_used[g]).map(|g| track_ids[g]).collect(),
    }
}

/// Largest number of one-to-one pairs above the threshold, by exhaustive search.
pub fn exhaustive_max_matches(ious: &[Vec<f64>], threshold: f64) -> usize {
    fn go(ious: &[Vec<f64>], p: usize, used: &mut Vec<bool>, threshold: f64) -> usize {
        if p == ious.len() {
            return 0;
        }
        let mut best = go(ious, p + 1, used, threshold);
        for g in 0..used.len() {
            if !used[g] && ious[p][g] > threshold {
                used[g] = true;
                best = best.max(1 + go(ious, p + 1, used, threshold));
                used[g] = false;
            }
        }
        best
    }
    let n_gt = ious.first().map_or(0, Vec::len);
    go(ious, 0, &mut vec![false; n_gt], threshold)
}

pub fn match_frame(preds: &[LaneCurve], gts: &[GtLane], geom: &LaneGeometry, cfg: &MetricConfig) -> FrameMatch {
    let ious = iou_matrix(preds, gts, geom, cfg.half_width(geom));
    let ids: Vec<u32> = gts.iter().map(|g| g.track_id).collect();
    greedy_match(&ious, &ids, cfg.iou_threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean IoU of the true positives; absent without any.
    pub miou: Option<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn image_scores(c: Counts, iou_sum: f64) -> ImageScores {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ImageScores {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        miou: (c.tp > 0).then(|| iou_sum / tp),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityCounts {
    pub n: usize,
    pub stable: usize,
    pub flickering: usize,
    pub missing: usize,
}

impl StabilityCounts {
    pub fn add(&mut self, o: &StabilityCounts) {
        self.n += o.n;
        self.stable += o.stable;
        self.flickering += o.flickering;
        self.missing += o.missing;
    }

    pub fn r_f(&self) -> Option<f64> {
        (self.n > 0).then(|| self.flickering as f64 / self.n as f64)
    }

    pub fn r_m(&self) -> Option<f64> {
        (self.n > 0).then(|| self.missing as f64 / self.n as f64)
    }
}

/// Classify each GT lane whose track also exists in the previous frame as
/// stable (detected in both frames), flickering (in one), or missing (in neither).
pub fn temporal_stability(frames: &[FrameMatch], tracks: &[Vec<u32>]) -> StabilityCounts {
    let detected = |t: usize, id: u32| frames[t].matches.iter().any(|m| m.track_id == id);
    let mut s = StabilityCounts::default();
    for t in 1..frames.len().min(tracks.len()) {
        for &id in &tracks[t] {
            if !tracks[t - 1].contains(&id) {
                continue;
            }
            s.n += 1;
            match (detected(t - 1, id), detected(t, id)) {
                (true, true) => s.stable += 1,
                (false, false) => s.missing += 1,
                _ => s.flickering += 1,
            }
        }
    }
    s
}

/// Metrics of one clip (or pooled over many).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub counts: Counts,
    pub iou_sum: f64,
    pub scores: ImageScores,
    pub stability: StabilityCounts,
    pub r_f: Option<f64>,
    pub r_m: Option<f64>,
}

impl Summary {
    pub fn new(counts: Counts, iou_sum: f64, stability: StabilityCounts) -> Self {
        Summary {
            counts,
            iou_sum,
            scores: image_scores(counts, iou_sum),
            stability,
            r_f: stability.r_f(),
            r_m: stability.r_m(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub name: String,
    pub summary: Summary,
    pub frames: Vec<FrameMatch>,
}

/// Match every frame of a clip and summarize it.
pub fn evaluate_clip(
    name: &str,
    preds: &[Vec<LaneCurve>],
    gts: &[Vec<GtLane>],
    geom: &LaneGeometry,
    cfg: &MetricConfig,
) -> ClipReport {
    let frames: Vec<FrameMatch> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_frame(p, g, geom, cfg))
        .collect();
    let tracks: Vec<Vec<u32>> = gts.iter().map(|g| g.iter().map(|l| l.track_id).collect()).collect();
    let mut counts = Counts::default();
    let mut iou_sum = 0.0;
    for f in &frames {
        counts.tp += f.matches.len();
        counts.fp += f.false_positives.len();
        counts.fn_ += f.false_negatives.len();
        iou_sum += f.matches.iter().map(|m| m.iou).sum::<f64>();
    }
    let stability = temporal_stability(&frames, &tracks);
    ClipReport {
        name: name.to_string(),
        summary: Summary::new(counts, iou_sum, stability),
        frames,
    }
}

/// Pooled metrics over clips: counts, IoU sums, and stability counts add up.
pub fn pool(clips: &[ClipReport]) -> Summary {
    let mut counts = Counts::default();
    let mut iou_sum = 0.0;
    let mut stability = StabilityCounts::default();
    for c in clips {
        counts.tp += c.summary.counts.tp;
        counts.fp += c.summary.counts.fp;
        counts.fn_ += c.summary.counts.fn_;
        iou_sum += c.summary.iou_sum;
        stability.add(&c.summary.stability);
    }
    Summary::new(counts, iou_sum, stability)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    pub dataset_sha256: String,
    pub checkpoint_sha256: String,
    pub metric: MetricConfig,
    pub overall: Summary,
    pub clips: Vec<ClipReport>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precision_recall_f1_arithmetic() {
        let s = image_scores(Counts { tp: 3, fp: 1, fn_: 2 }, 2.4);
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.recall, 0.6);
        assert!((s.f1 - 2.0 * 0.45 / 1.35).abs() < 1e-12);
        assert!((s.miou.unwrap() - 0.8).abs() < 1e-12);
        let z = image_scores(Counts::default(), 0.0);
        assert_eq!((z.precision, z.recall, z.f1, z.miou), (0.0, 0.0, 0.0, None));
    }

    #[test]
    fn stability_rates() {
        let s = StabilityCounts {
            n: 10,
            stable: 8,
            flickering: 1,
            missing: 1,
        };
        assert_eq!((s.r_f(), s.r_m()), (Some(0.1), Some(0.1)));
        assert_eq!(StabilityCounts::default().r_f(), None);
    }

    #[test]
    fn alternating_detection_flickers_every_frame() {
        let hit = FrameMatch {
            matches: vec![Match {
                pred: 0,
                track_id: 7,
                iou: 0.9,
            }],
            ..FrameMatch::default()
        };
        let miss = FrameMatch {
            false_negatives: vec![7],
            ..FrameMatch::default()
        };
        let frames = vec![hit.clone(), miss.clone(), hit.clone(), miss, hit];
        let tracks = vec![vec![7]; 5];
        let s = temporal_stability(&frames, &tracks);
        assert_eq!((s.n, s.stable, s.flickering, s.missing), (4, 0, 4, 0));
    }

    #[test]
    fn greedy_takes_highest_iou_first() {
        let ious = vec![vec![0.9, 0.6], vec![0.8, 0.0]];
        let m = greedy_match(&ious, &[10, 11], 0.5);
        assert_eq!(m.matches.len(), 1);
        assert_eq!(m.matches[0].track_id, 10);
        assert_eq!((m.false_positives, m.false_negatives), (vec![1], vec![11]));
        // The optimum pairs 0-11 and 1-10; greedy only equals it when lanes are separated.
        assert_eq!(exhaustive_max_matches(&ious, 0.5), 2);
    }
}
