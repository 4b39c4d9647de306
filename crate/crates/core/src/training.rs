//! Two-way contrastive episode training.
//!
//! Each step pairs a query image with a support set of a category it
//! contains (`c1`) and one of a base category it does not contain (`c2`).
//! RoIs are classified against both prototypes; only RoIs matched to `c1`
//! train the box regressor.
//!
//! A step is split into a forward pass, a plan (every random or
//! data-dependent choice: anchor labels and samples, RoIs and their targets)
//! and a loss/backward pass under that plan. Holding the plan fixed makes
//! the loss a smooth function of the parameters, which is what the
//! finite-difference checks rely on.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_support_sets_excluding, DatasetSplit, ImageRecord, ImageSource, SupportSet};
use crate::error::{Error, Result};
use crate::features::{
    roi_backward, roi_extract_with_samples, support_prototype, BackboneCache, FeatureMap,
    RegionFeature, RoiSamples,
};
use crate::geometry::{encode_delta, iou, BBox, BoxDelta};
use crate::heads::{distance_logit_with_grad, softmax, ClassifierHead};
use crate::model::Detector;
use crate::nn::{bce_with_logit, smooth_l1, Parameterized, Tensor3};
use crate::ss_rpn::{
    assign_pseudo_labels, label_anchors, propose, rpn_forward, rpn_loss, sample_batch, AnchorBatch,
    RpnOutput, SampledAnchors,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEpisode {
    pub query: ImageRecord,
    pub c1: u32,
    pub c2: u32,
    pub positive: SupportSet,
    pub negative: SupportSet,
}

impl ContrastiveEpisode {
    pub fn c1_boxes(&self) -> Vec<BBox> {
        self.query.boxes_of(self.c1)
    }
}

/// Why an image could not host an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeSkip {
    /// No category in the image has `k` instances elsewhere.
    NoPositive,
    /// No absent base category has `k` instances.
    NoNegative,
}

impl fmt::Display for EpisodeSkip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpisodeSkip::NoPositive => write!(f, "no eligible positive category"),
            EpisodeSkip::NoNegative => write!(f, "no eligible negative category"),
        }
    }
}

/// Builds an episode around `record`. Supports never come from the query
/// image itself.
pub fn build_contrastive_episode<R: Rng>(
    record: &ImageRecord,
    base: &DatasetSplit,
    k: usize,
    rng: &mut R,
) -> std::result::Result<ContrastiveEpisode, EpisodeSkip> {
    let exclude: HashSet<u64> = [record.id].into();
    let available = |c: u32| {
        base.instances_of(c)
            .into_iter()
            .filter(|&(ri, _)| base.records[ri].id != record.id)
            .count()
            >= k
    };
    let present: BTreeSet<u32> = record
        .categories()
        .into_iter()
        .filter(|c| base.base_categories.contains(c))
        .collect();
    let pos: Vec<u32> = present.iter().copied().filter(|&c| available(c)).collect();
    if pos.is_empty() {
        return Err(EpisodeSkip::NoPositive);
    }
    let neg: Vec<u32> = base
        .base_categories
        .iter()
        .copied()
        .filter(|c| !present.contains(c) && available(*c))
        .collect();
    if neg.is_empty() {
        return Err(EpisodeSkip::NoNegative);
    }
    let c1 = pos[rng.gen_range(0..pos.len())];
    let c2 = neg[rng.gen_range(0..neg.len())];
    let mut sets = sample_support_sets_excluding(base, &[c1, c2], k, &exclude, rng)
        .expect("availability checked above");
    let negative = sets.pop().unwrap();
    let positive = sets.pop().unwrap();
    Ok(ContrastiveEpisode {
        query: record.clone(),
        c1,
        c2,
        positive,
        negative,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationLoss {
    pub loss: f64,
    pub grad_c1: Vec<f64>,
    pub grad_c2: Vec<f64>,
}

/// Mean binary cross-entropy over both pairings: every RoI against `c1`
/// (label 1 when matched to a `c1` box) and against `c2` (label 0).
pub fn roi_classification_loss(c1_logits: &[f64], c1_labels: &[bool], c2_logits: &[f64]) -> ClassificationLoss {
    let n = c1_logits.len() + c2_logits.len();
    let mut out = ClassificationLoss {
        loss: 0.0,
        grad_c1: vec![0.0; c1_logits.len()],
        grad_c2: vec![0.0; c2_logits.len()],
    };
    if n == 0 {
        return out;
    }
    for (i, (&l, &y)) in c1_logits.iter().zip(c1_labels).enumerate() {
        let (v, g) = bce_with_logit(l, if y { 1.0 } else { 0.0 });
        out.loss += v;
        out.grad_c1[i] = g / n as f64;
    }
    for (i, &l) in c2_logits.iter().enumerate() {
        let (v, g) = bce_with_logit(l, 0.0);
        out.loss += v;
        out.grad_c2[i] = g / n as f64;
    }
    out.loss /= n as f64;
    out
}

/// Mean softmax cross-entropy, used when training the multi-class head.
pub fn multi_class_loss(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            let p = softmax(l);
            loss -= p[y].max(1e-300).ln();
            p.iter()
                .enumerate()
                .map(|(j, &pj)| (pj - if j == y { 1.0 } else { 0.0 }) / n as f64)
                .collect()
        })
        .collect();
    (loss / n as f64, grads)
}

/// Smooth-L1 over the four delta coordinates, summed per RoI and averaged
/// over RoIs with a target. RoIs without a target contribute nothing.
pub fn roi_regression_loss(pred: &[BoxDelta], targets: &[Option<BoxDelta>]) -> (f64, Vec<[f64; 4]>) {
    let matched = targets.iter().filter(|t| t.is_some()).count();
    let mut grads = vec![[0.0; 4]; pred.len()];
    if matched == 0 {
        return (0.0, grads);
    }
    let mut loss = 0.0;
    for (i, (p, t)) in pred.iter().zip(targets).enumerate() {
        if let Some(t) = t {
            let (p, t) = (p.as_array(), t.as_array());
            for j in 0..4 {
                let (l, g) = smooth_l1(p[j] - t[j]);
                loss += l;
                grads[i][j] = g / matched as f64;
            }
        }
    }
    (loss / matched as f64, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
}

pub fn total_loss(rpn_cls: f64, rpn_reg: f64, l_cls: f64, l_reg: f64) -> Result<LossBundle> {
    let parts = [("rpn_cls", rpn_cls), ("rpn_reg", rpn_reg), ("cls", l_cls), ("reg", l_reg)];
    if let Some((name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numerical(format!("loss component {name} is {v}")));
    }
    let l_rpn = rpn_cls + rpn_reg;
    Ok(LossBundle {
        rpn_cls,
        rpn_reg,
        l_rpn,
        l_cls,
        l_reg,
        total: l_rpn + l_cls + l_reg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Episodes whose gradients are averaged per step.
    pub batch_size: usize,
    /// Linear warmup length in iterations (0 disables).
    pub warmup: usize,
    pub seed: u64,
    /// Instances per support set.
    pub shots: usize,
    /// RoIs per episode fed to the heads.
    pub roi_batch: usize,
    pub roi_positive_fraction: f64,
    /// Iterations of plain RPN training before pseudo-labels switch on. A
    /// fresh RPN scores every anchor near 0.5, above any useful threshold,
    /// so labeling from the first step turns every negative positive.
    pub pseudo_label_start: usize,
    /// Global gradient norm cap applied before each update (0 disables).
    #[serde(default)]
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            learning_rate: 0.01,
            milestones: vec![3500, 4500],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 1,
            warmup: 100,
            seed: 0,
            shots: 10,
            roi_batch: 32,
            roi_positive_fraction: 0.5,
            pseudo_label_start: 1000,
            max_grad_norm: 10.0,
        }
    }
}

impl TrainConfig {
    /// The long schedule for full-size data.
    pub fn full_scale() -> Self {
        TrainConfig {
            iterations: 120_000,
            learning_rate: 0.003,
            milestones: vec![80_000, 110_000],
            warmup: 500,
            pseudo_label_start: 10_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 || self.batch_size == 0 || self.shots == 0 || self.roi_batch == 0 {
            return bad("train iterations, batch_size, shots and roi_batch must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be positive");
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return bad("train.max_grad_norm must be finite and non-negative");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("train.gamma must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("train.momentum must lie in [0, 1) and weight_decay be nonnegative");
        }
        if !(self.roi_positive_fraction > 0.0 && self.roi_positive_fraction <= 1.0) {
            return bad("train.roi_positive_fraction must lie in (0, 1]");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.contains(&0) {
            return bad("train.milestones must be positive and increasing");
        }
        Ok(())
    }

    /// Learning rate used at (0-based) iteration `it`.
    pub fn lr_at(&self, it: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| it >= m).count();
        let mut lr = self.learning_rate * self.gamma.powi(decays as i32);
        if it < self.warmup {
            lr *= (it + 1) as f64 / self.warmup as f64;
        }
        lr
    }
}

/// Normalized pixels of the query and of every distinct support image.
#[derive(Debug, Clone)]
pub struct EpisodeImages {
    pub query: Tensor3,
    pub supports: HashMap<u64, Tensor3>,
}

impl EpisodeImages {
    pub fn load(ep: &ContrastiveEpisode, source: &dyn ImageSource) -> Result<Self> {
        let query = source.load_record(&ep.query)?;
        let mut supports = HashMap::new();
        for it in ep.positive.items.iter().chain(&ep.negative.items) {
            if !supports.contains_key(&it.image_id) {
                supports.insert(it.image_id, source.load(it.image_id, &it.file_name)?);
            }
        }
        Ok(EpisodeImages { query, supports })
    }
}

pub struct EpisodeForward {
    query_fm: FeatureMap,
    query_cache: BackboneCache,
    rpn: RpnOutput,
    anchors: Vec<BBox>,
    supports: HashMap<u64, (FeatureMap, BackboneCache)>,
    image_w: f64,
    image_h: f64,
}

impl EpisodeForward {
    pub fn objectness(&self) -> &[f64] {
        &self.rpn.objectness
    }
}

pub fn forward_episode(model: &Detector, images: &EpisodeImages) -> Result<EpisodeForward> {
    let (query_fm, query_cache) = model.backbone.forward_cached(&images.query)?;
    let anchors = model.anchors(query_fm.values.h, query_fm.values.w);
    let rpn = rpn_forward(&model.rpn, &query_fm.values, &anchors)?;
    let mut supports = HashMap::new();
    let mut ids: Vec<_> = images.supports.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        supports.insert(id, model.backbone.forward_cached(&images.supports[&id])?);
    }
    Ok(EpisodeForward {
        query_fm,
        query_cache,
        rpn,
        anchors,
        supports,
        image_w: images.query.w as f64,
        image_h: images.query.h as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRoi {
    pub bbox: BBox,
    /// Matched `c1` box, if any.
    pub c1_target: Option<BBox>,
    /// Multi-class head target slot (background is the last slot).
    pub class_slot: usize,
}

/// Every choice a step makes before computing its loss.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub matched_gt: Vec<Option<BBox>>,
    pub sampled: SampledAnchors,
    pub rois: Vec<PlannedRoi>,
}

fn best_match(b: &BBox, gts: &[BBox]) -> Option<(usize, f64)> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| (i, iou(b, g)))
        .fold(None, |acc, (i, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((i, v)),
        })
}

pub fn plan_step<R: Rng>(
    model: &Detector,
    ep: &ContrastiveEpisode,
    fwd: &EpisodeForward,
    cfg: &TrainConfig,
    iteration: usize,
    rng: &mut R,
) -> Result<StepPlan> {
    let rpn_cfg = &model.config.rpn;
    let heads = &model.config.heads;
    let all_gt: Vec<(u32, BBox)> = ep.query.annotations.iter().map(|a| (a.category, a.bbox)).collect();
    let gt_boxes: Vec<BBox> = all_gt.iter().map(|g| g.1).collect();
    let (labels, matched_gt) = label_anchors(&fwd.anchors, &gt_boxes, rpn_cfg);
    let mut batch = AnchorBatch {
        anchors: fwd.anchors.clone(),
        labels,
        matched_gt,
        objectness: fwd.rpn.objectness.clone(),
        deltas: fwd.rpn.deltas.clone(),
    };
    if rpn_cfg.enabled && iteration >= cfg.pseudo_label_start {
        batch = assign_pseudo_labels(batch, rpn_cfg.tau);
    }
    let sampled = sample_batch(&batch.labels, rpn_cfg.caps, rng)?;

    let mut candidates: Vec<BBox> = propose(
        &fwd.rpn.objectness,
        &fwd.rpn.deltas,
        &fwd.anchors,
        rpn_cfg,
        fwd.image_w,
        fwd.image_h,
    )
    .into_iter()
    .map(|p| p.bbox)
    .collect();
    candidates.extend(gt_boxes.iter().copied());

    let c1_boxes = ep.c1_boxes();
    let background = model.multi.categories.len();
    let multi = model.config.classifier.train_head() == ClassifierHead::Multi;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in candidates {
        let c1_target = match best_match(&b, &c1_boxes) {
            Some((i, v)) if v >= heads.roi_pos_iou => Some(c1_boxes[i]),
            _ => None,
        };
        let class_slot = match best_match(&b, &gt_boxes) {
            Some((i, v)) if v >= heads.roi_pos_iou => model.multi.slot(all_gt[i].0).unwrap_or(background),
            _ => background,
        };
        let is_fg = if multi { class_slot != background } else { c1_target.is_some() };
        let roi = PlannedRoi {
            bbox: b,
            c1_target,
            class_slot,
        };
        if is_fg {
            fg.push(roi);
        } else {
            bg.push(roi);
        }
    }
    let n_fg = fg
        .len()
        .min((cfg.roi_batch as f64 * cfg.roi_positive_fraction).round() as usize);
    let n_bg = bg.len().min(cfg.roi_batch - n_fg);
    let mut pick = |pool: Vec<PlannedRoi>, n: usize| -> Vec<PlannedRoi> {
        let mut idx = sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };
    let mut rois = pick(fg, n_fg);
    rois.extend(pick(bg, n_bg));
    Ok(StepPlan {
        matched_gt: batch.matched_gt,
        sampled,
        rois,
    })
}

fn zeros_like(t: &Tensor3) -> Tensor3 {
    Tensor3::zeros(t.c, t.h, t.w)
}

/// Gradient on an `r x r` map from a gradient on its `1 x 1` global average.
fn spread_global(g: &Tensor3, r: usize) -> Tensor3 {
    let n = (r * r) as f64;
    let mut out = Tensor3::zeros(g.c, r, r);
    for c in 0..g.c {
        out.data[c * r * r..(c + 1) * r * r]
            .iter_mut()
            .for_each(|v| *v = g.data[c] / n);
    }
    out
}

struct SupportBranch {
    prototype: crate::features::SupportFeature,
    // (image id, pooling taps) per instance
    taps: Vec<(u64, RoiSamples)>,
}

fn support_branch(set: &SupportSet, fwd: &EpisodeForward, r: usize) -> Result<SupportBranch> {
    let mut feats = Vec::with_capacity(set.items.len());
    let mut taps = Vec::with_capacity(set.items.len());
    for it in &set.items {
        let (fm, _) = fwd
            .supports
            .get(&it.image_id)
            .ok_or_else(|| Error::Data(format!("support image {} was not forwarded", it.image_id)))?;
        let (f, s) = roi_extract_with_samples(fm, &it.bbox, r)?;
        feats.push(f);
        taps.push((it.image_id, s));
    }
    Ok(SupportBranch {
        prototype: support_prototype(&feats, set.category)?,
        taps,
    })
}

/// Loss of one episode under a fixed plan. With `backward` set, parameter
/// gradients are accumulated into `model` (not zeroed first).
pub fn episode_loss(
    model: &mut Detector,
    ep: &ContrastiveEpisode,
    fwd: &EpisodeForward,
    plan: &StepPlan,
    backward: bool,
) -> Result<LossBundle> {
    let r = model.config.heads.roi_size;
    let heads = model.config.effective_heads();
    let pixel = model.config.pixel_contrast;
    let rl = rpn_loss(
        &fwd.rpn.logits,
        &fwd.rpn.deltas,
        &fwd.anchors,
        &plan.matched_gt,
        &plan.sampled,
    )?;

    let pos = support_branch(&ep.positive, fwd, r)?;
    let neg = support_branch(&ep.negative, fwd, r)?;
    let mut regions: Vec<(RegionFeature, RoiSamples)> = Vec::with_capacity(plan.rois.len());
    for roi in &plan.rois {
        regions.push(roi_extract_with_samples(&fwd.query_fm, &roi.bbox, r)?);
    }
    let mut g_region: Vec<Tensor3> = regions.iter().map(|(x, _)| zeros_like(&x.map)).collect();
    let mut g_pos = zeros_like(&pos.prototype.feature.map);
    let mut g_neg = zeros_like(&neg.prototype.feature.map);

    let l_cls = match model.config.classifier.train_head() {
        ClassifierHead::Comparison => {
            let pick = |f: &RegionFeature| if pixel { f.map.clone() } else { f.global_only().map };
            let (p_map, n_map) = (pick(&pos.prototype.feature), pick(&neg.prototype.feature));
            let mut c1 = Vec::new();
            let mut c2 = Vec::new();
            for (x, _) in &regions {
                let xm = pick(x);
                c1.push(model.comparison.logit(&xm, &p_map)?);
                c2.push(model.comparison.logit(&xm, &n_map)?);
            }
            let labels: Vec<bool> = plan.rois.iter().map(|r| r.c1_target.is_some()).collect();
            let l1: Vec<f64> = c1.iter().map(|c| c.0).collect();
            let l2: Vec<f64> = c2.iter().map(|c| c.0).collect();
            let cl = roi_classification_loss(&l1, &labels, &l2);
            if backward {
                let lift = |g: Tensor3| if pixel { g } else { spread_global(&g, r) };
                for i in 0..regions.len() {
                    for (cache, g, gp) in [
                        (&c1[i].1, cl.grad_c1[i], &mut g_pos),
                        (&c2[i].1, cl.grad_c2[i], &mut g_neg),
                    ] {
                        let (gx, gc) = model.comparison.backward(cache, g);
                        g_region[i].add_assign(&lift(gx));
                        gp.add_assign(&lift(gc));
                    }
                }
            }
            cl.loss
        }
        ClassifierHead::Distance => {
            let mut l1 = Vec::new();
            let mut l2 = Vec::new();
            let mut grads = Vec::new();
            for (x, _) in &regions {
                let (a, ga) = distance_logit_with_grad(x, &pos.prototype, &heads)?;
                let (b, gb) = distance_logit_with_grad(x, &neg.prototype, &heads)?;
                l1.push(a);
                l2.push(b);
                grads.push((ga, gb));
            }
            let labels: Vec<bool> = plan.rois.iter().map(|r| r.c1_target.is_some()).collect();
            let cl = roi_classification_loss(&l1, &labels, &l2);
            if backward {
                for (i, (ga, gb)) in grads.iter().enumerate() {
                    axpy(&mut g_region[i], cl.grad_c1[i], &ga.region);
                    axpy(&mut g_region[i], cl.grad_c2[i], &gb.region);
                    axpy(&mut g_pos, cl.grad_c1[i], &ga.support);
                    axpy(&mut g_neg, cl.grad_c2[i], &gb.support);
                }
            }
            cl.loss
        }
        ClassifierHead::Multi => {
            let logits: Vec<Vec<f64>> = regions.iter().map(|(x, _)| model.multi.logits(x)).collect();
            let labels: Vec<usize> = plan.rois.iter().map(|r| r.class_slot).collect();
            let (loss, grads) = multi_class_loss(&logits, &labels);
            if backward {
                for (i, g) in grads.iter().enumerate() {
                    let gv = model.multi.fc.backward(&regions[i].0.v, g);
                    crate::features::region_grad_to_map(&mut g_region[i], Some(&gv), None);
                }
            }
            loss
        }
    };

    let mut preds = Vec::new();
    let mut targets = Vec::new();
    let mut caches = Vec::new();
    for (i, roi) in plan.rois.iter().enumerate() {
        if let Some(t) = roi.c1_target {
            let (d, cache) = model.regressor.forward(&regions[i].0, &pos.prototype)?;
            preds.push(d);
            targets.push(Some(encode_delta(&t, &roi.bbox)?));
            caches.push((i, cache));
        }
    }
    let (l_reg, reg_grads) = roi_regression_loss(&preds, &targets);

    let bundle = total_loss(rl.cls, rl.reg, l_cls, l_reg)?;
    if !backward {
        return Ok(bundle);
    }

    for ((i, cache), g) in caches.iter().zip(&reg_grads) {
        let (gx, gc) = model.regressor.backward(cache, *g);
        g_region[*i].add_assign(&gx);
        g_pos.add_assign(&gc);
    }

    let mut g_query = model.rpn.backward(&fwd.rpn, &rl.grad_logits, &rl.grad_deltas);
    for ((_, taps), g) in regions.iter().zip(&g_region) {
        roi_backward(taps, g, &mut g_query);
    }
    let mut g_support: HashMap<u64, Tensor3> = HashMap::new();
    for (branch, g) in [(&pos, &g_pos), (&neg, &g_neg)] {
        let k = branch.taps.len() as f64;
        let mut scaled = g.clone();
        scaled.data.iter_mut().for_each(|v| *v /= k);
        for (id, taps) in &branch.taps {
            let fm = &fwd.supports[id].0.values;
            let dst = g_support.entry(*id).or_insert_with(|| zeros_like(fm));
            roi_backward(taps, &scaled, dst);
        }
    }
    model.backbone.backward(&fwd.query_cache, &g_query);
    let mut ids: Vec<_> = g_support.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        model.backbone.backward(&fwd.supports[&id].1, &g_support[&id]);
    }
    Ok(bundle)
}

fn axpy(dst: &mut Tensor3, a: f64, x: &Tensor3) {
    if a != 0.0 {
        dst.data.iter_mut().zip(&x.data).for_each(|(d, v)| *d += a * v);
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// `grad_scale` multiplies the accumulated gradients (e.g. `1/batch`).
    pub fn step(&mut self, model: &mut Detector, lr: f64, cfg: &TrainConfig, grad_scale: f64) {
        let mut params = model.params_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let mut scale = grad_scale;
        if cfg.max_grad_norm > 0.0 {
            let norm = params
                .iter()
                .flat_map(|p| p.grad.iter())
                .map(|g| (g * grad_scale).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > cfg.max_grad_norm {
                scale *= cfg.max_grad_norm / norm;
            }
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            for i in 0..p.value.len() {
                let g = scale * p.grad[i] + cfg.weight_decay * p.value[i];
                v[i] = cfg.momentum * v[i] + g;
                p.value[i] -= lr * v[i];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub skipped: usize,
}

/// Rng for the `n`-th episode drawn under `seed`.
pub fn episode_rng(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

struct Cached<'a> {
    source: &'a dyn ImageSource,
    cache: HashMap<u64, Tensor3>,
}

impl ImageSource for Cached<'_> {
    fn load(&self, image_id: u64, file_name: &str) -> Result<Tensor3> {
        match self.cache.get(&image_id) {
            Some(t) => Ok(t.clone()),
            None => self.source.load(image_id, file_name),
        }
    }
}

impl Cached<'_> {
    fn warm(&mut self, ep: &ContrastiveEpisode) -> Result<()> {
        let ids = std::iter::once((ep.query.id, ep.query.file_name.as_str())).chain(
            ep.positive
                .items
                .iter()
                .chain(&ep.negative.items)
                .map(|i| (i.image_id, i.file_name.as_str())),
        );
        for (id, name) in ids {
            if !self.cache.contains_key(&id) {
                let t = self.source.load(id, name)?;
                self.cache.insert(id, t);
            }
        }
        Ok(())
    }
}

/// Trains `model` in place on the base-category view `base`. Images are
/// visited in a seeded shuffled order; images that cannot host an episode
/// are skipped and counted.
pub fn train(
    model: &mut Detector,
    base: &DatasetSplit,
    images: &dyn ImageSource,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if base.records.is_empty() {
        return Err(Error::Empty("training split has no images".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..base.records.len()).collect();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;
    let mut drawn = 0u64;
    let mut opt = Sgd::default();
    let mut source = Cached {
        source: images,
        cache: HashMap::new(),
    };
    let mut out = TrainOutcome::default();
    for it in 0..cfg.iterations {
        model.zero_grad();
        let mut sum = [0.0; 4];
        for _ in 0..cfg.batch_size {
            let mut misses = 0;
            let (ep, mut rng) = loop {
                if cursor == order.len() {
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                let rec = &base.records[order[cursor]];
                cursor += 1;
                let mut rng = episode_rng(cfg.seed, drawn);
                drawn += 1;
                match build_contrastive_episode(rec, base, cfg.shots, &mut rng) {
                    Ok(ep) => break (ep, rng),
                    Err(_) => {
                        out.skipped += 1;
                        misses += 1;
                        if misses > base.records.len() {
                            return Err(Error::Data(
                                "no image in the training split can host a contrastive episode".into(),
                            ));
                        }
                    }
                }
            };
            source.warm(&ep)?;
            let imgs = EpisodeImages::load(&ep, &source)?;
            let fwd = forward_episode(model, &imgs)?;
            let plan = plan_step(model, &ep, &fwd, cfg, it, &mut rng)?;
            let b = episode_loss(model, &ep, &fwd, &plan, true).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("diverged at iteration {it}: {m}")),
                other => other,
            })?;
            sum[0] += b.l_rpn;
            sum[1] += b.l_cls;
            sum[2] += b.l_reg;
            sum[3] += b.total;
        }
        let n = cfg.batch_size as f64;
        let lr = cfg.lr_at(it);
        opt.step(model, lr, cfg, 1.0 / n);
        let rec = LogRecord {
            iteration: it,
            l_rpn: sum[0] / n,
            l_cls: sum[1] / n,
            l_reg: sum[2] / n,
            total: sum[3] / n,
            lr,
        };
        on_log(&rec);
        out.log.push(rec);
    }
    Ok(out)
}

/// Training log as newline-delimited JSON.
pub fn log_to_ndjson(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

/// Central finite differences of [`episode_loss`] under a fixed plan against
/// the analytic gradient, over every parameter. Returns the norm-wise
/// relative error `|a - n| / (|a| + |n|)`.
pub fn gradient_check(
    model: &mut Detector,
    ep: &ContrastiveEpisode,
    images: &EpisodeImages,
    plan: &StepPlan,
    step: f64,
) -> Result<f64> {
    model.zero_grad();
    let fwd = forward_episode(model, images)?;
    episode_loss(model, ep, &fwd, plan, true)?;
    let analytic: Vec<f64> = model.params().iter().flat_map(|p| p.grad.clone()).collect();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (pi, &n) in shapes.iter().enumerate() {
        for j in 0..n {
            let orig = model.params()[pi].value[j];
            let eval = |v: f64, m: &mut Detector| -> Result<f64> {
                m.params_mut()[pi].value[j] = v;
                let f = forward_episode(m, images)?;
                Ok(episode_loss(m, ep, &f, plan, false)?.total)
            };
            let up = eval(orig + step, model)?;
            let down = eval(orig - step, model)?;
            model.params_mut()[pi].value[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let denom = norm(&analytic) + norm(&numeric);
    Ok(if denom == 0.0 { 0.0 } else { norm(&diff) / denom })
}
