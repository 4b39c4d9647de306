//! Inference with fixed parameters and COCO-style evaluation.
//!
//! Novel categories are detected from support prototypes alone: nothing in
//! this module takes the model mutably.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{sample_support_sets_excluding, DatasetSplit, ImageRecord, ImageSource, SupportSet};
use crate::error::{Error, Result};
use crate::features::{roi_extract, support_prototype, SupportFeature};
use crate::geometry::{decode_delta, default_delta_clamp, iou, nms, BBox, Detection};
use crate::heads::{comparison_score, distance_score, softmax, ClassifierHead};
use crate::model::Detector;
use crate::nn::Tensor3;
use crate::ss_rpn::{propose, rpn_forward};
use crate::training::episode_rng;

/// Averaged prototypes for each support set.
pub fn support_features(
    model: &Detector,
    sets: &[SupportSet],
    images: &dyn ImageSource,
) -> Result<Vec<SupportFeature>> {
    if sets.is_empty() {
        return Err(Error::Empty("no support sets given".into()));
    }
    let r = model.config.heads.roi_size;
    sets.iter()
        .map(|set| {
            if set.items.is_empty() {
                return Err(Error::Empty(format!("support set for category {} is empty", set.category)));
            }
            let mut feats = Vec::with_capacity(set.items.len());
            for it in &set.items {
                let fm = model.backbone.forward(&images.load(it.image_id, &it.file_name)?)?;
                feats.push(roi_extract(&fm, &it.bbox, r)?);
            }
            support_prototype(&feats, set.category)
        })
        .collect()
}

/// Detects the support categories in `image` with the model's inference head.
pub fn detect(model: &Detector, image: &Tensor3, supports: &[SupportFeature]) -> Result<Vec<Detection>> {
    detect_with_head(model, image, supports, model.config.classifier.infer_head())
}

/// Full pipeline: features, proposals, RoI pooling, per-support scoring,
/// support-conditioned box refinement, threshold, per-category NMS.
pub fn detect_with_head(
    model: &Detector,
    image: &Tensor3,
    supports: &[SupportFeature],
    head: ClassifierHead,
) -> Result<Vec<Detection>> {
    if supports.is_empty() {
        return Err(Error::Empty("no support features given".into()));
    }
    let cfg = &model.config;
    let heads = cfg.effective_heads();
    let fm = model.backbone.forward(image)?;
    let anchors = model.anchors(fm.values.h, fm.values.w);
    let out = rpn_forward(&model.rpn, &fm.values, &anchors)?;
    let (w, h) = (image.w as f64, image.h as f64);
    let proposals = propose(&out.objectness, &out.deltas, &anchors, &cfg.rpn, w, h);
    let mut dets = Vec::new();
    for p in &proposals {
        let x = roi_extract(&fm, &p.bbox, heads.roi_size)?;
        let multi = if head == ClassifierHead::Multi {
            Some(softmax(&model.multi.logits(&x)))
        } else {
            None
        };
        for c in supports {
            let score = match head {
                ClassifierHead::Distance => distance_score(&x, c, &heads)?,
                ClassifierHead::Comparison => comparison_score(&x, c, &model.comparison, cfg.pixel_contrast)?,
                ClassifierHead::Multi => match model.multi.slot(c.category) {
                    Some(s) => multi.as_ref().unwrap()[s],
                    // the head has no output for this category
                    None => continue,
                },
            };
            if score < heads.score_threshold {
                continue;
            }
            let (delta, _) = model.regressor.forward(&x, c)?;
            let b = decode_delta(&p.bbox, &delta, default_delta_clamp()).clip(w, h);
            if b.width() > 0.0 && b.height() > 0.0 {
                dets.push(Detection {
                    bbox: b,
                    category: c.category,
                    score,
                });
            }
        }
    }
    let mut kept = nms(&dets, heads.nms_threshold);
    kept.truncate(heads.max_detections);
    Ok(kept)
}

/// The twelve summary numbers. Entries that COCO marks undefined (no
/// ground truth in a size bucket) are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 12] = [
        "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR1", "AR10", "AR100", "AR_S", "AR_M", "AR_L",
    ];

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.ar1, self.ar10,
            self.ar100, self.ar_s, self.ar_m, self.ar_l,
        ]
    }

    pub fn from_array(a: [f64; 12]) -> Self {
        Metrics {
            ap: a[0],
            ap50: a[1],
            ap75: a[2],
            ap_s: a[3],
            ap_m: a[4],
            ap_l: a[5],
            ar1: a[6],
            ar10: a[7],
            ar100: a[8],
            ar_s: a[9],
            ar_m: a[10],
            ar_l: a[11],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metrics: Metrics,
    /// Half-width of the 95% interval per metric; absent for a single episode.
    pub ci95: Option<Metrics>,
    pub episodes: usize,
    pub seconds_per_episode: f64,
}

impl EvalResult {
    /// One `name value` line per metric, with `± half-width` when known.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ci = self.ci95.map(|c| c.to_array());
        for (i, (name, v)) in Metrics::NAMES.iter().zip(self.metrics.to_array()).enumerate() {
            match ci {
                Some(c) => s.push_str(&format!("{name} {v:.4} ± {:.4}\n", c[i])),
                None => s.push_str(&format!("{name} {v:.4}\n")),
            }
        }
        s.push_str(&format!("episodes {}\n", self.episodes));
        s.push_str(&format!("seconds_per_episode {:.4}\n", self.seconds_per_episode));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub category: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: u64,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApParams {
    pub iou_thresholds: Vec<f64>,
    /// all, small, medium, large (inclusive pixel-area bounds).
    pub area_ranges: [(f64, f64); 4],
    pub max_dets: [usize; 3],
}

impl Default for ApParams {
    fn default() -> Self {
        ApParams {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            area_ranges: [
                (0.0, 1e10),
                (0.0, 32.0 * 32.0),
                (32.0 * 32.0, 96.0 * 96.0),
                (96.0 * 96.0, 1e10),
            ],
            max_dets: [1, 10, 100],
        }
    }
}

// per (image, category, area range): match flags per IoU threshold
struct ImageEval {
    scores: Vec<f64>,
    matched: Vec<Vec<bool>>,
    ignored: Vec<Vec<bool>>,
    n_gt: usize,
}

fn evaluate_image(
    dets: &[(f64, BBox)],
    gts: &[BBox],
    range: (f64, f64),
    thresholds: &[f64],
    max_det: usize,
) -> ImageEval {
    let outside = |a: f64| a < range.0 || a > range.1;
    // non-ignored ground truth first
    let mut gt: Vec<(BBox, bool)> = gts.iter().map(|g| (*g, outside(g.area()))).collect();
    gt.sort_by_key(|g| g.1);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.partial_cmp(&dets[a].0).unwrap());
    order.truncate(max_det);
    let mut matched = vec![vec![false; order.len()]; thresholds.len()];
    let mut ignored = vec![vec![false; order.len()]; thresholds.len()];
    for (ti, &t) in thresholds.iter().enumerate() {
        let mut gt_used = vec![false; gt.len()];
        for (di, &d) in order.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, (g, ig)) in gt.iter().enumerate() {
                if gt_used[gi] {
                    continue;
                }
                if let Some(mi) = m {
                    if !gt[mi].1 && *ig {
                        break;
                    }
                }
                let v = iou(&dets[d].1, g);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(gi);
            }
            match m {
                Some(gi) => {
                    gt_used[gi] = true;
                    matched[ti][di] = true;
                    ignored[ti][di] = gt[gi].1;
                }
                None => ignored[ti][di] = outside(dets[d].1.area()),
            }
        }
    }
    ImageEval {
        scores: order.iter().map(|&d| dets[d].0).collect(),
        matched,
        ignored,
        n_gt: gt.iter().filter(|g| !g.1).count(),
    }
}

/// `(precision at the 101 recall points, final recall)` per IoU threshold,
/// or `None` when there is no non-ignored ground truth.
fn accumulate(evals: &[ImageEval], n_thr: usize, max_det: usize) -> Option<Vec<(Vec<f64>, f64)>> {
    let n_gt: usize = evals.iter().map(|e| e.n_gt).sum();
    if n_gt == 0 {
        return None;
    }
    let mut entries: Vec<(f64, usize, usize)> = Vec::new();
    for (ei, e) in evals.iter().enumerate() {
        for di in 0..e.scores.len().min(max_det) {
            entries.push((e.scores[di], ei, di));
        }
    }
    // stable descending sort
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let rec_thrs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let mut out = Vec::with_capacity(n_thr);
    for t in 0..n_thr {
        let (mut tp, mut fp) = (0.0, 0.0);
        let mut rc = Vec::new();
        let mut pr = Vec::new();
        for &(_, ei, di) in &entries {
            let e = &evals[ei];
            if e.ignored[t][di] {
                continue;
            }
            if e.matched[t][di] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            rc.push(tp / n_gt as f64);
            pr.push(tp / (tp + fp));
        }
        let recall = rc.last().copied().unwrap_or(0.0);
        for i in (1..pr.len()).rev() {
            if pr[i] > pr[i - 1] {
                pr[i - 1] = pr[i];
            }
        }
        let q: Vec<f64> = rec_thrs
            .iter()
            .map(|&r| {
                let idx = rc.partition_point(|&v| v < r);
                if idx < pr.len() {
                    pr[idx]
                } else {
                    0.0
                }
            })
            .collect();
        out.push((q, recall));
    }
    Some(out)
}

/// COCO-style AP/AR over `categories`. Images are those appearing in either
/// list.
pub fn compute_ap(
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    categories: &[u32],
    params: &ApParams,
) -> Metrics {
    let images: BTreeSet<u64> = dets.iter().map(|d| d.image_id).chain(gts.iter().map(|g| g.image_id)).collect();
    let mut by_key_det: BTreeMap<(u64, u32), Vec<(f64, BBox)>> = BTreeMap::new();
    for d in dets {
        by_key_det
            .entry((d.image_id, d.detection.category))
            .or_default()
            .push((d.detection.score, d.detection.bbox));
    }
    let mut by_key_gt: BTreeMap<(u64, u32), Vec<BBox>> = BTreeMap::new();
    for g in gts {
        by_key_gt.entry((g.image_id, g.category)).or_default().push(g.bbox);
    }
    let n_thr = params.iou_thresholds.len();
    let max_all = *params.max_dets.iter().max().unwrap();
    // [area][max_det][category] -> per-threshold (precision curve, recall)
    let mut table: Vec<Vec<Vec<Option<Vec<(Vec<f64>, f64)>>>>> = vec![vec![Vec::new(); 3]; 4];
    for &cat in categories {
        for (ai, &range) in params.area_ranges.iter().enumerate() {
            let evals: Vec<ImageEval> = images
                .iter()
                .map(|&img| {
                    let d = by_key_det.get(&(img, cat)).map(Vec::as_slice).unwrap_or(&[]);
                    let g = by_key_gt.get(&(img, cat)).map(Vec::as_slice).unwrap_or(&[]);
                    evaluate_image(d, g, range, &params.iou_thresholds, max_all)
                })
                .collect();
            for (mi, &md) in params.max_dets.iter().enumerate() {
                table[ai][mi].push(accumulate(&evals, n_thr, md));
            }
        }
    }
    let mean = |vals: Vec<f64>| if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
    let ap = |area: usize, thr: Option<usize>| {
        let mut vals = Vec::new();
        for per_cat in table[area][2].iter().flatten() {
            for (t, (q, _)) in per_cat.iter().enumerate() {
                if thr.is_none_or(|x| x == t) {
                    vals.extend_from_slice(q);
                }
            }
        }
        mean(vals)
    };
    let ar = |area: usize, md: usize| {
        let vals: Vec<f64> = table[area][md]
            .iter()
            .flatten()
            .flat_map(|per_cat| per_cat.iter().map(|(_, r)| *r))
            .collect();
        mean(vals)
    };
    let thr_index = |v: f64| params.iou_thresholds.iter().position(|&t| (t - v).abs() < 1e-9);
    let at = |v: f64| match thr_index(v) {
        Some(i) => ap(0, Some(i)),
        None => 0.0,
    };
    Metrics {
        ap: ap(0, None),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_s: ap(1, None),
        ap_m: ap(2, None),
        ap_l: ap(3, None),
        ar1: ar(0, 0),
        ar10: ar(0, 1),
        ar100: ar(0, 2),
        ar_s: ar(1, 2),
        ar_m: ar(2, 2),
        ar_l: ar(3, 2),
    }
}

/// Ground truth of `categories` in `records`.
pub fn ground_truth(records: &[&ImageRecord], categories: &BTreeSet<u32>) -> Vec<GroundTruth> {
    records
        .iter()
        .flat_map(|r| {
            r.annotations.iter().filter(|a| categories.contains(&a.category)).map(|a| GroundTruth {
                image_id: r.id,
                category: a.category,
                bbox: a.bbox,
            })
        })
        .collect()
}

/// Half-width `1.96 * s / sqrt(n)` of the normal-approximation 95% interval
/// (sample standard deviation); `None` below two values.
pub fn confidence_half_width(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Some(1.96 * var.sqrt() / (n as f64).sqrt())
}

fn detect_records(
    model: &Detector,
    records: &[&ImageRecord],
    supports: &[SupportFeature],
    images: &dyn ImageSource,
) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
    for r in records {
        let img = images.load_record(r)?;
        for d in detect(model, &img, supports)? {
            out.push(ImageDetection {
                image_id: r.id,
                detection: d,
            });
        }
    }
    Ok(out)
}

/// Detects every novel category over the whole test split at once.
pub fn one_time_protocol(
    model: &Detector,
    supports: &[SupportSet],
    test: &DatasetSplit,
    images: &dyn ImageSource,
) -> Result<(EvalResult, Vec<ImageDetection>)> {
    let have: BTreeSet<u32> = supports.iter().map(|s| s.category).collect();
    if let Some(c) = test.novel_categories.iter().find(|c| !have.contains(c)) {
        return Err(Error::Data(format!("no support set for novel category {c}")));
    }
    let start = Instant::now();
    let feats = support_features(model, supports, images)?;
    let records: Vec<&ImageRecord> = test.records.iter().collect();
    let dets = detect_records(model, &records, &feats, images)?;
    let gts = ground_truth(&records, &test.novel_categories);
    let cats: Vec<u32> = test.novel_categories.iter().copied().collect();
    let metrics = compute_ap(&dets, &gts, &cats, &ApParams::default());
    Ok((
        EvalResult {
            metrics,
            ci95: None,
            episodes: 1,
            seconds_per_episode: start.elapsed().as_secs_f64(),
        },
        dets,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaEpisode {
    pub categories: Vec<u32>,
    pub supports: Vec<SupportSet>,
    pub queries: Vec<u64>,
}

/// The `index`-th N-way K-shot episode under `seed`. Query images are
/// distinct within an episode; support instances never come from them.
pub fn sample_meta_episode(
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    queries_per_category: usize,
    seed: u64,
    index: u64,
) -> Result<MetaEpisode> {
    let mut rng = episode_rng(seed, index);
    let pool: Vec<u32> = split.novel_categories.iter().copied().collect();
    if n_way == 0 || n_way > pool.len() {
        return Err(Error::Data(format!(
            "{n_way}-way episodes need that many novel categories, split has {}",
            pool.len()
        )));
    }
    let mut picks = sample(&mut rng, pool.len(), n_way).into_vec();
    picks.sort_unstable();
    let categories: Vec<u32> = picks.into_iter().map(|i| pool[i]).collect();
    let mut chosen: Vec<u64> = Vec::new();
    let mut taken: HashSet<u64> = HashSet::new();
    for &c in &categories {
        let cands: Vec<u64> = split
            .records
            .iter()
            .filter(|r| !taken.contains(&r.id) && r.annotations.iter().any(|a| a.category == c))
            .map(|r| r.id)
            .collect();
        if cands.len() < queries_per_category {
            return Err(Error::Data(format!(
                "category {c} has {} free query images, {queries_per_category} needed",
                cands.len()
            )));
        }
        let mut idx = sample(&mut rng, cands.len(), queries_per_category).into_vec();
        idx.sort_unstable();
        for i in idx {
            taken.insert(cands[i]);
            chosen.push(cands[i]);
        }
    }
    let supports = sample_support_sets_excluding(split, &categories, k_shot, &taken, &mut rng)?;
    Ok(MetaEpisode {
        categories,
        supports,
        queries: chosen,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaResult {
    pub summary: EvalResult,
    pub per_episode: Vec<Metrics>,
}

/// Mean and 95% interval of per-episode metrics.
pub fn summarize_episodes(per_episode: &[Metrics], seconds: f64) -> EvalResult {
    let n = per_episode.len();
    let cols: Vec<Vec<f64>> = (0..12)
        .map(|i| per_episode.iter().map(|m| m.to_array()[i]).collect())
        .collect();
    let mean: Vec<f64> = cols
        .iter()
        .map(|c| if c.is_empty() { 0.0 } else { c.iter().sum::<f64>() / c.len() as f64 })
        .collect();
    let ci = (n >= 2).then(|| {
        let hw: Vec<f64> = cols.iter().map(|c| confidence_half_width(c).unwrap()).collect();
        Metrics::from_array(hw.try_into().unwrap())
    });
    EvalResult {
        metrics: Metrics::from_array(mean.try_into().unwrap()),
        ci95: ci,
        episodes: n,
        seconds_per_episode: if n == 0 { 0.0 } else { seconds / n as f64 },
    }
}

/// Repeated N-way K-shot episodes over the novel categories of `split`.
pub fn meta_testing(
    model: &Detector,
    split: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    queries_per_category: usize,
    seed: u64,
    images: &dyn ImageSource,
) -> Result<MetaResult> {
    if episodes == 0 {
        return Err(Error::Config("meta-testing needs at least one episode".into()));
    }
    let mut per_episode = Vec::with_capacity(episodes);
    let start = Instant::now();
    for i in 0..episodes {
        let ep = sample_meta_episode(split, n_way, k_shot, queries_per_category, seed, i as u64)?;
        let feats = support_features(model, &ep.supports, images)?;
        let records: Vec<&ImageRecord> = ep
            .queries
            .iter()
            .map(|id| split.record(*id).expect("query drawn from split"))
            .collect();
        let dets = detect_records(model, &records, &feats, images)?;
        let cats: BTreeSet<u32> = ep.categories.iter().copied().collect();
        let gts = ground_truth(&records, &cats);
        per_episode.push(compute_ap(&dets, &gts, &ep.categories, &ApParams::default()));
    }
    Ok(MetaResult {
        summary: summarize_episodes(&per_episode, start.elapsed().as_secs_f64()),
        per_episode,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn to_coco_results(dets: &[ImageDetection]) -> Vec<CocoResult> {
    dets.iter()
        .map(|d| CocoResult {
            image_id: d.image_id,
            category_id: d.detection.category,
            bbox: d.detection.bbox.to_xywh(),
            score: d.detection.score,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes_dataset, ShapesSpec, SplitView};
    use crate::features::BackboneConfig;
    use crate::model::ModelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image_id: u64, category: u32, bbox: BBox, score: f64) -> ImageDetection {
        ImageDetection {
            image_id,
            detection: Detection { bbox, category, score },
        }
    }

    fn gt(image_id: u64, category: u32, bbox: BBox) -> GroundTruth {
        GroundTruth { image_id, category, bbox }
    }

    /// Plain PR-curve AP and final recall at one IoU threshold, over all
    /// sizes, for one category.
    fn oracle(dets: &[ImageDetection], gts: &[GroundTruth], cat: u32, t: f64, max_det: usize) -> Option<(f64, f64)> {
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == cat).collect();
        if g.is_empty() {
            return None;
        }
        let mut imgs: Vec<u64> = dets.iter().map(|d| d.image_id).chain(gts.iter().map(|g| g.image_id)).collect();
        imgs.sort_unstable();
        imgs.dedup();
        // per image: keep the top max_det by score
        let mut d: Vec<&ImageDetection> = Vec::new();
        for img in imgs {
            let mut mine: Vec<&ImageDetection> =
                dets.iter().filter(|x| x.image_id == img && x.detection.category == cat).collect();
            mine.sort_by(|a, b| b.detection.score.partial_cmp(&a.detection.score).unwrap());
            mine.truncate(max_det);
            d.extend(mine);
        }
        d.sort_by(|a, b| b.detection.score.partial_cmp(&a.detection.score).unwrap());
        let mut used = vec![false; g.len()];
        let mut tp = 0.0;
        let mut points = Vec::new();
        for (k, x) in d.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, y) in g.iter().enumerate() {
                if used[j] || y.image_id != x.image_id {
                    continue;
                }
                let v = iou(&x.detection.bbox, &y.bbox);
                if v >= t && best.is_none_or(|(_, b)| v >= b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1.0;
            }
            points.push((tp / g.len() as f64, tp / (k + 1) as f64));
        }
        let mut ap = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            ap += points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
        }
        Some((ap / 101.0, points.last().map_or(0.0, |p| p.0)))
    }

    fn oracle_metrics(dets: &[ImageDetection], gts: &[GroundTruth], cats: &[u32]) -> (f64, f64, f64) {
        let thrs: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
        let (mut ap, mut ap50, mut ar) = (Vec::new(), Vec::new(), Vec::new());
        for &c in cats {
            for (ti, &t) in thrs.iter().enumerate() {
                if let Some((a, r)) = oracle(dets, gts, c, t, 100) {
                    ap.push(a);
                    ar.push(r);
                    if ti == 0 {
                        ap50.push(a);
                    }
                }
            }
        }
        let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean(ap), mean(ap50), mean(ar))
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![
            gt(1, 1, bx(0.0, 0.0, 10.0, 10.0)),
            gt(1, 2, bx(20.0, 20.0, 60.0, 70.0)),
            gt(2, 1, bx(5.0, 5.0, 150.0, 150.0)),
        ];
        let dets: Vec<ImageDetection> = gts.iter().map(|g| det(g.image_id, g.category, g.bbox, 1.0)).collect();
        let m = compute_ap(&dets, &gts, &[1, 2], &ApParams::default());
        assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
        assert_eq!((m.ap_s, m.ap_m, m.ap_l), (1.0, 1.0, 1.0));
        assert_eq!((m.ar1, m.ar10, m.ar100), (1.0, 1.0, 1.0));
        let empty = compute_ap(&[], &gts, &[1, 2], &ApParams::default());
        assert_eq!(empty.to_array(), [0.0; 12]);
    }

    #[test]
    fn hand_case_matches_oracle() {
        let gts = vec![
            gt(1, 1, bx(10.0, 10.0, 30.0, 30.0)),
            gt(1, 1, bx(40.0, 40.0, 60.0, 60.0)),
            gt(2, 1, bx(0.0, 0.0, 20.0, 20.0)),
        ];
        let dets = vec![
            det(1, 1, bx(11.0, 11.0, 31.0, 31.0), 0.9),
            det(1, 1, bx(10.0, 12.0, 30.0, 30.0), 0.8),
            det(2, 1, bx(2.0, 1.0, 20.0, 22.0), 0.7),
            det(2, 1, bx(50.0, 50.0, 70.0, 70.0), 0.6),
            det(1, 1, bx(40.0, 44.0, 60.0, 64.0), 0.3),
        ];
        let m = compute_ap(&dets, &gts, &[1], &ApParams::default());
        let (ap, ap50, ar) = oracle_metrics(&dets, &gts, &[1]);
        assert!((m.ap - ap).abs() < 1e-6);
        assert!((m.ap50 - ap50).abs() < 1e-6);
        assert!((m.ar100 - ar).abs() < 1e-6);
        // at 0.5 the PR points are (1/3,1) (1/3,.5) (2/3,2/3) (2/3,.5) (1,.6)
        let by_hand = (34.0 * 1.0 + 33.0 * (2.0 / 3.0) + 34.0 * 0.6) / 101.0;
        assert!((m.ap50 - by_hand).abs() < 1e-9, "{} vs {by_hand}", m.ap50);
    }

    fn random_instance(seed: u64) -> (Vec<ImageDetection>, Vec<GroundTruth>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_img = rng.gen_range(1..=5);
        let rb = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
            let (w, h) = (rng.gen_range(4.0..30.0), rng.gen_range(4.0..30.0));
            bx(x, y, x + w, y + h)
        };
        let mut gts = Vec::new();
        for _ in 0..rng.gen_range(0..=10) {
            let img = rng.gen_range(0..n_img) as u64;
            gts.push(gt(img, rng.gen_range(1..=2), rb(&mut rng)));
        }
        let mut dets = Vec::new();
        for _ in 0..rng.gen_range(0..=10) {
            let img = rng.gen_range(0..n_img) as u64;
            // half of the detections are perturbed copies of a ground truth
            let b = if !gts.is_empty() && rng.gen_bool(0.5) {
                let g: &GroundTruth = &gts[rng.gen_range(0..gts.len())];
                let j = |rng: &mut ChaCha8Rng| rng.gen_range(-1.5..1.5);
                let (a, b, c, d) = (j(&mut rng), j(&mut rng), j(&mut rng), j(&mut rng));
                dets.push(det(g.image_id, g.category, bx(g.bbox.x1 + a, g.bbox.y1 + b, g.bbox.x2 + c, g.bbox.y2 + d), rng.gen()));
                continue;
            } else {
                rb(&mut rng)
            };
            dets.push(det(img, rng.gen_range(1..=2), b, rng.gen()));
        }
        (dets, gts)
    }

    proptest! {
        #[test]
        fn random_instances_match_oracle(seed in any::<u64>()) {
            let (dets, gts) = random_instance(seed);
            let m = compute_ap(&dets, &gts, &[1, 2], &ApParams::default());
            let (ap, ap50, ar) = oracle_metrics(&dets, &gts, &[1, 2]);
            prop_assert!((m.ap - ap).abs() < 1e-6, "AP {} vs {}", m.ap, ap);
            prop_assert!((m.ap50 - ap50).abs() < 1e-6);
            prop_assert!((m.ar100 - ar).abs() < 1e-6);
            prop_assert!(m.ap <= m.ap50 + 1e-12);
            prop_assert!(m.to_array().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn monotone_rescaling_invariant(seed in any::<u64>(), a in 0.01f64..10.0, b in -5.0f64..5.0) {
            let (dets, gts) = random_instance(seed);
            let m = compute_ap(&dets, &gts, &[1, 2], &ApParams::default());
            let moved: Vec<ImageDetection> = dets
                .iter()
                .map(|d| {
                    let mut d = *d;
                    d.detection.score = (a * d.detection.score + b).exp();
                    d
                })
                .collect();
            prop_assert_eq!(m, compute_ap(&moved, &gts, &[1, 2], &ApParams::default()));
        }
    }

    #[test]
    fn max_det_limits_recall() {
        let gts: Vec<GroundTruth> = (0..3).map(|i| gt(1, 1, bx(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0))).collect();
        let dets: Vec<ImageDetection> = gts.iter().map(|g| det(1, 1, g.bbox, 0.5)).collect();
        let m = compute_ap(&dets, &gts, &[1], &ApParams::default());
        assert!((m.ar1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.ar10, 1.0);
    }

    #[test]
    fn confidence_interval_scaling() {
        assert_eq!(confidence_half_width(&[0.3]), None);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.gen::<f64>()).collect() };
        let a = confidence_half_width(&draw(100, &mut rng)).unwrap();
        let b = confidence_half_width(&draw(400, &mut rng)).unwrap();
        let ratio = b / a;
        assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
        let v = [1.0, 3.0];
        assert!((confidence_half_width(&v).unwrap() - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        let one = summarize_episodes(&[Metrics::default()], 2.0);
        assert!(one.ci95.is_none());
        assert_eq!(one.seconds_per_episode, 2.0);
    }

    fn small_world() -> (Detector, DatasetSplit, crate::data::MemoryImages) {
        let spec = ShapesSpec {
            num_images: 40,
            ..ShapesSpec::default()
        };
        let ds = generate_shapes_dataset(&spec, 3).unwrap();
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                channels: vec![4, 8, 8],
                strides: vec![2, 2, 2],
            },
            ..ModelConfig::default()
        };
        (Detector::new(cfg, 1).unwrap(), ds.split(SplitView::Novel).unwrap(), ds.memory_images())
    }

    #[test]
    fn detection_never_writes_parameters() {
        let (model, split, imgs) = small_world();
        let before = model.param_digest();
        let ep = sample_meta_episode(&split, 2, 2, 2, 0, 0).unwrap();
        let feats = support_features(&model, &ep.supports, &imgs).unwrap();
        for id in &ep.queries {
            let img = imgs.load(*id, "").unwrap();
            for head in [ClassifierHead::Distance, ClassifierHead::Comparison, ClassifierHead::Multi] {
                for d in detect_with_head(&model, &img, &feats, head).unwrap() {
                    assert!((0.0..=1.0).contains(&d.score));
                }
            }
        }
        assert_eq!(model.param_digest(), before);
        assert!(detect(&model, &imgs.load(ep.queries[0], "").unwrap(), &[]).is_err());
    }

    #[test]
    fn no_proposals_no_detections() {
        let (mut model, split, imgs) = small_world();
        model.config.rpn.min_proposal_size = 1e6;
        let ep = sample_meta_episode(&split, 2, 2, 1, 0, 0).unwrap();
        let feats = support_features(&model, &ep.supports, &imgs).unwrap();
        assert!(detect(&model, &imgs.load(ep.queries[0], "").unwrap(), &feats).unwrap().is_empty());
    }

    #[test]
    fn multi_head_never_detects_unknown_categories() {
        let (mut model, split, imgs) = small_world();
        model.config.heads.score_threshold = 0.0;
        let ep = sample_meta_episode(&split, 2, 2, 2, 0, 1).unwrap();
        let feats = support_features(&model, &ep.supports, &imgs).unwrap();
        for id in &ep.queries {
            let img = imgs.load(*id, "").unwrap();
            assert!(detect_with_head(&model, &img, &feats, ClassifierHead::Multi).unwrap().is_empty());
            assert!(!detect_with_head(&model, &img, &feats, ClassifierHead::Distance).unwrap().is_empty());
        }
    }

    #[test]
    fn meta_episodes_reproducible_and_disjoint() {
        let (_, split, _) = small_world();
        for i in 0..20 {
            let a = sample_meta_episode(&split, 2, 3, 3, 7, i).unwrap();
            assert_eq!(a, sample_meta_episode(&split, 2, 3, 3, 7, i).unwrap());
            let q: HashSet<u64> = a.queries.iter().copied().collect();
            assert_eq!(q.len(), 6);
            assert!(a.supports.iter().all(|s| s.k() == 3 && s.items.iter().all(|it| !q.contains(&it.image_id))));
            assert!(a.categories.iter().all(|c| split.novel_categories.contains(c)));
        }
        assert!(sample_meta_episode(&split, 3, 1, 1, 0, 0).is_err());
        assert!(sample_meta_episode(&split, 2, 1, 1000, 0, 0).is_err());
    }

    #[test]
    fn one_time_protocol_rules() {
        let (model, split, imgs) = small_world();
        let ep = sample_meta_episode(&split, 2, 2, 1, 0, 0).unwrap();
        let before = model.param_digest();
        let (a, da) = one_time_protocol(&model, &ep.supports, &split, &imgs).unwrap();
        let (b, db) = one_time_protocol(&model, &ep.supports, &split, &imgs).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(da, db);
        assert_eq!(model.param_digest(), before);
        assert!(one_time_protocol(&model, &ep.supports[..1], &split, &imgs).is_err());
        // a test set without novel instances has nothing to find
        let mut empty = split.clone();
        empty.records.retain(|r| r.annotations.is_empty());
        let (c, _) = one_time_protocol(&model, &ep.supports, &empty, &imgs).unwrap();
        assert_eq!(c.metrics.ap, 0.0);
        assert_eq!(c.metrics.ap50, 0.0);
    }

    #[test]
    fn meta_testing_reproducible() {
        let (model, split, imgs) = small_world();
        let a = meta_testing(&model, &split, 2, 2, 3, 2, 4, &imgs).unwrap();
        let b = meta_testing(&model, &split, 2, 2, 3, 2, 4, &imgs).unwrap();
        assert_eq!(a.per_episode, b.per_episode);
        assert_eq!(a.summary.metrics, b.summary.metrics);
        assert_eq!(a.summary.episodes, 3);
        assert!(a.summary.ci95.is_some());
        let one = meta_testing(&model, &split, 2, 2, 1, 2, 4, &imgs).unwrap();
        assert!(one.summary.ci95.is_none());
    }
}
