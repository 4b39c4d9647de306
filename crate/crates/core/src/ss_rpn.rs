//! Region proposal network trained with pseudo-positive anchors.
//!
//! Negative anchors whose predicted objectness exceeds `tau` are relabeled
//! pseudo-positive and contribute to the objectness loss as positives. They
//! never receive a regression target.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    argsort_desc, decode_delta, default_delta_clamp, encode_delta, iou, nms_indices, BBox, BoxDelta,
};
use crate::nn::{
    bce_with_logit, relu_backward, relu_inplace, sigmoid, smooth_l1, Conv2d, Param, Parameterized,
    Tensor3,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsRpnConfig {
    pub tau: f64,
    pub neg_iou: f64,
    pub pos_iou: f64,
    /// Sample caps for (positive, negative, pseudo-positive) anchors.
    pub caps: [usize; 3],
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub proposal_nms_threshold: f64,
    /// Proposals narrower or shorter than this many pixels after clipping are dropped.
    pub min_proposal_size: f64,
    pub head_channels: usize,
    /// Disables pseudo-labeling entirely (standard RPN training).
    pub enabled: bool,
}

impl Default for SsRpnConfig {
    fn default() -> Self {
        SsRpnConfig {
            tau: 0.25,
            neg_iou: 0.3,
            pos_iou: 0.7,
            caps: [128, 128, 128],
            anchor_scales: vec![16.0, 24.0, 32.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            pre_nms_top_n: 200,
            post_nms_top_n: 50,
            proposal_nms_threshold: 0.7,
            min_proposal_size: 1.0,
            head_channels: 64,
            enabled: true,
        }
    }
}

impl SsRpnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau < 1.0) && !(self.tau == 1.0) {
            return bad("rpn.tau must lie in (0, 1) (1.0 disables pseudo-labels)");
        }
        if !(self.neg_iou < self.pos_iou) {
            return bad("rpn.neg_iou must be below rpn.pos_iou");
        }
        if self.caps.contains(&0) {
            return bad("rpn.caps must be positive");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return bad("rpn anchor scales and ratios must be nonempty");
        }
        if self
            .anchor_scales
            .iter()
            .chain(&self.anchor_ratios)
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return bad("rpn anchor scales and ratios must be positive");
        }
        if self.pre_nms_top_n == 0 || self.post_nms_top_n == 0 || self.head_channels == 0 {
            return bad("rpn top-n values and head channels must be positive");
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

/// One anchor per (cell, scale, ratio), indexed `((y * w + x) * scales + s) * ratios + r`.
/// Anchors are centered at `((x + 0.5) * stride, (y + 0.5) * stride)` with
/// side lengths `scale / sqrt(ratio)` by `scale * sqrt(ratio)` (ratio is h/w).
pub fn generate_anchors(
    fm_h: usize,
    fm_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<BBox> {
    let mut out = Vec::with_capacity(fm_h * fm_w * scales.len() * ratios.len());
    let s = stride as f64;
    for y in 0..fm_h {
        for x in 0..fm_w {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &scale in scales {
                for &ratio in ratios {
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    out.push(BBox {
                        x1: cx - 0.5 * w,
                        y1: cy - 0.5 * h,
                        x2: cx + 0.5 * w,
                        y2: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    PseudoPositive,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub anchors: Vec<BBox>,
    pub labels: Vec<AnchorLabel>,
    pub matched_gt: Vec<Option<BBox>>,
    pub objectness: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
}

impl AnchorBatch {
    pub fn count(&self, label: AnchorLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// IoU-based anchor labeling. Anchors below `neg_iou` are negative, above
/// `pos_iou` positive (matched to their best GT), the rest ignored. The
/// best anchor(s) of every GT are forced positive.
pub fn label_anchors(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    cfg: &SsRpnConfig,
) -> (Vec<AnchorLabel>, Vec<Option<BBox>>) {
    if gt_boxes.is_empty() {
        return (vec![AnchorLabel::Negative; anchors.len()], vec![None; anchors.len()]);
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt_boxes.iter().map(|g| iou(a, g)).collect())
        .collect();
    let mut labels = Vec::with_capacity(anchors.len());
    let mut matched = Vec::with_capacity(anchors.len());
    for row in &ious {
        let (best_g, best) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc });
        if best < cfg.neg_iou {
            labels.push(AnchorLabel::Negative);
            matched.push(None);
        } else if best > cfg.pos_iou {
            labels.push(AnchorLabel::Positive);
            matched.push(Some(gt_boxes[best_g]));
        } else {
            labels.push(AnchorLabel::Ignore);
            matched.push(None);
        }
    }
    for g in 0..gt_boxes.len() {
        let best = ious.iter().map(|row| row[g]).fold(0.0, f64::max);
        if best <= 0.0 {
            continue;
        }
        for (a, row) in ious.iter().enumerate() {
            if row[g] == best {
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                    .0;
                labels[a] = AnchorLabel::Positive;
                matched[a] = Some(gt_boxes[argmax]);
            }
        }
    }
    (labels, matched)
}

/// Relabels every negative anchor with objectness strictly above `tau` as
/// pseudo-positive. Other labels are untouched.
pub fn assign_pseudo_labels(mut batch: AnchorBatch, tau: f64) -> AnchorBatch {
    for (label, &p) in batch.labels.iter_mut().zip(&batch.objectness) {
        if *label == AnchorLabel::Negative && p > tau {
            *label = AnchorLabel::PseudoPositive;
        }
    }
    batch
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SampledAnchors {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub pseudo_positive: Vec<usize>,
}

impl SampledAnchors {
    pub fn total(&self) -> usize {
        self.positive.len() + self.negative.len() + self.pseudo_positive.len()
    }
}

fn pick<R: Rng>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let n = n.min(pool.len());
    let mut chosen: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// Uniform sampling without replacement under per-label caps. Shortfalls in
/// positives or pseudo-positives are backfilled with extra negatives.
pub fn sample_batch<R: Rng>(
    labels: &[AnchorLabel],
    caps: [usize; 3],
    rng: &mut R,
) -> Result<SampledAnchors> {
    let by = |l: AnchorLabel| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == l)
            .map(|(i, _)| i)
            .collect()
    };
    let (pos, neg, pseudo) = (
        by(AnchorLabel::Positive),
        by(AnchorLabel::Negative),
        by(AnchorLabel::PseudoPositive),
    );
    if pos.is_empty() && neg.is_empty() && pseudo.is_empty() {
        return Err(Error::Empty("no anchors available for sampling".into()));
    }
    let positive = pick(&pos, caps[0], rng);
    let pseudo_positive = pick(&pseudo, caps[2], rng);
    let deficit = (caps[0] - positive.len()) + (caps[2] - pseudo_positive.len());
    let negative = pick(&neg, caps[1] + deficit, rng);
    Ok(SampledAnchors {
        positive,
        negative,
        pseudo_positive,
    })
}

/// Objectness and box-delta head on top of the shared feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub anchors_per_cell: usize,
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    pub objectness: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
    hidden: Tensor3,
    input: Tensor3,
}

impl RpnHead {
    pub fn new<R: Rng>(in_ch: usize, cfg: &SsRpnConfig, rng: &mut R) -> Self {
        let a = cfg.anchors_per_cell();
        RpnHead {
            conv: Conv2d::he("rpn.conv", in_ch, cfg.head_channels, 3, 1, rng),
            cls: Conv2d::new("rpn.cls", cfg.head_channels, a, 1, 1, 0.01, rng),
            reg: Conv2d::new("rpn.reg", cfg.head_channels, 4 * a, 1, 1, 0.01, rng),
            anchors_per_cell: a,
        }
    }

    pub fn forward(&self, fm: &Tensor3) -> RpnOutput {
        let mut hidden = self.conv.forward(fm);
        relu_inplace(&mut hidden.data);
        let cls = self.cls.forward(&hidden);
        let reg = self.reg.forward(&hidden);
        let a = self.anchors_per_cell;
        let n = fm.h * fm.w * a;
        let mut logits = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for y in 0..fm.h {
            for x in 0..fm.w {
                for k in 0..a {
                    logits.push(cls.at(k, y, x));
                    deltas.push(BoxDelta::new(
                        reg.at(4 * k, y, x),
                        reg.at(4 * k + 1, y, x),
                        reg.at(4 * k + 2, y, x),
                        reg.at(4 * k + 3, y, x),
                    ));
                }
            }
        }
        let objectness = logits.iter().map(|&l| sigmoid(l)).collect();
        RpnOutput {
            logits,
            objectness,
            deltas,
            hidden,
            input: fm.clone(),
        }
    }

    /// Backpropagates per-anchor gradients; returns the feature-map gradient.
    pub fn backward(&mut self, out: &RpnOutput, grad_logits: &[f64], grad_deltas: &[[f64; 4]]) -> Tensor3 {
        let (h, w, a) = (out.hidden.h, out.hidden.w, self.anchors_per_cell);
        let mut gcls = Tensor3::zeros(a, h, w);
        let mut greg = Tensor3::zeros(4 * a, h, w);
        for y in 0..h {
            for x in 0..w {
                for k in 0..a {
                    let i = (y * w + x) * a + k;
                    let ci = gcls.idx(k, y, x);
                    gcls.data[ci] = grad_logits[i];
                    for j in 0..4 {
                        let ri = greg.idx(4 * k + j, y, x);
                        greg.data[ri] = grad_deltas[i][j];
                    }
                }
            }
        }
        let mut gh = self.cls.backward(&out.hidden, &gcls);
        gh.add_assign(&self.reg.backward(&out.hidden, &greg));
        relu_backward(&out.hidden.data, &mut gh.data);
        self.conv.backward(&out.input, &gh)
    }
}

impl Parameterized for RpnHead {
    fn params(&self) -> Vec<&Param> {
        [&self.conv, &self.cls, &self.reg]
            .into_iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.conv, &mut self.cls, &mut self.reg]
            .into_iter()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

/// Runs the head and checks its output count against the anchor grid.
pub fn rpn_forward(head: &RpnHead, fm: &Tensor3, anchors: &[BBox]) -> Result<RpnOutput> {
    let out = head.forward(fm);
    if out.logits.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "rpn produced {} predictions for {} anchors",
            out.logits.len(),
            anchors.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub cls: f64,
    pub reg: f64,
    pub grad_logits: Vec<f64>,
    pub grad_deltas: Vec<[f64; 4]>,
}

/// Objectness BCE over the sample (positives and pseudo-positives as 1,
/// negatives as 0) averaged over the sample size, plus smooth-L1 box loss
/// over true positives averaged over their count.
pub fn rpn_loss(
    logits: &[f64],
    deltas: &[BoxDelta],
    anchors: &[BBox],
    matched_gt: &[Option<BBox>],
    sampled: &SampledAnchors,
) -> Result<RpnLoss> {
    let n = logits.len();
    let mut grad_logits = vec![0.0; n];
    let mut grad_deltas = vec![[0.0; 4]; n];
    let total = sampled.total();
    let mut cls = 0.0;
    if total > 0 {
        let targets = sampled
            .positive
            .iter()
            .chain(&sampled.pseudo_positive)
            .map(|&i| (i, 1.0))
            .chain(sampled.negative.iter().map(|&i| (i, 0.0)));
        for (i, t) in targets {
            let (l, g) = bce_with_logit(logits[i], t);
            cls += l;
            grad_logits[i] += g / total as f64;
        }
        cls /= total as f64;
    }
    let mut reg = 0.0;
    let npos = sampled.positive.len();
    for &i in &sampled.positive {
        let gt = matched_gt[i]
            .ok_or_else(|| Error::Data(format!("positive anchor {i} has no matched box")))?;
        let target = encode_delta(&gt, &anchors[i])?.as_array();
        let pred = deltas[i].as_array();
        for j in 0..4 {
            let (l, g) = smooth_l1(pred[j] - target[j]);
            reg += l;
            grad_deltas[i][j] = g / npos as f64;
        }
    }
    if npos > 0 {
        reg /= npos as f64;
    }
    Ok(RpnLoss {
        cls,
        reg,
        grad_logits,
        grad_deltas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Top-`pre_nms_top_n` by objectness, decoded, clipped to the image, small
/// boxes dropped, NMS, then top-`post_nms_top_n`.
pub fn propose(
    objectness: &[f64],
    deltas: &[BoxDelta],
    anchors: &[BBox],
    cfg: &SsRpnConfig,
    image_w: f64,
    image_h: f64,
) -> Vec<Proposal> {
    let order = argsort_desc(objectness);
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for &i in order.iter().take(cfg.pre_nms_top_n) {
        let b = decode_delta(&anchors[i], &deltas[i], default_delta_clamp()).clip(image_w, image_h);
        if b.width() >= cfg.min_proposal_size && b.height() >= cfg.min_proposal_size {
            boxes.push(b);
            scores.push(objectness[i]);
        }
    }
    nms_indices(&boxes, &scores, cfg.proposal_nms_threshold)
        .into_iter()
        .take(cfg.post_nms_top_n)
        .map(|i| Proposal {
            bbox: boxes[i],
            objectness: scores[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_counts_and_grid() {
        assert_eq!(generate_anchors(2, 2, 8, &[16.0], &[1.0]).len(), 4);
        let a = generate_anchors(1, 1, 8, &[20.0], &[1.0]);
        assert!((a[0].width() - 20.0).abs() < 1e-12 && (a[0].height() - 20.0).abs() < 1e-12);

        let scales = [16.0, 24.0, 32.0];
        let ratios = [0.5, 1.0, 2.0];
        let anchors = generate_anchors(8, 8, 8, &scales, &ratios);
        assert_eq!(anchors.len(), 576);
        let mut i = 0;
        for y in 0..8 {
            for x in 0..8 {
                for s in scales {
                    for r in ratios {
                        let (cx, cy) = anchors[i].center();
                        assert!((cx - (8 * x + 4) as f64).abs() < 1e-9);
                        assert!((cy - (8 * y + 4) as f64).abs() < 1e-9);
                        let area = anchors[i].area();
                        assert!((area - s * s).abs() < 1e-9);
                        assert!((anchors[i].height() / anchors[i].width() - r).abs() < 1e-9);
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn labeling_rules() {
        let cfg = SsRpnConfig::default();
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        // IoU 0.2, 0.8, 0.5 (plus a perfect match that takes the forced slot)
        let a_low = BBox::new(0.0, 0.0, 10.0, 2.0).unwrap();
        let a_high = BBox::new(0.0, 0.0, 10.0, 8.0).unwrap();
        let a_mid = BBox::new(0.0, 0.0, 10.0, 5.0).unwrap();
        let (labels, matched) = label_anchors(&[a_low, a_high, a_mid, gt], &[gt], &cfg);
        assert_eq!(
            labels,
            vec![
                AnchorLabel::Negative,
                AnchorLabel::Positive,
                AnchorLabel::Ignore,
                AnchorLabel::Positive
            ]
        );
        assert_eq!(matched[1], Some(gt));
        assert_eq!(matched[0], None);

        let (labels, _) = label_anchors(&[a_low, a_mid], &[], &cfg);
        assert!(labels.iter().all(|&l| l == AnchorLabel::Negative));

        // forced positive for a GT without any anchor above pos_iou
        let (labels, matched) = label_anchors(&[a_low, a_mid], &[gt], &cfg);
        assert_eq!(labels[1], AnchorLabel::Positive);
        assert_eq!(matched[1], Some(gt));
    }

    fn batch_with(labels: Vec<AnchorLabel>, objectness: Vec<f64>) -> AnchorBatch {
        let n = labels.len();
        AnchorBatch {
            anchors: vec![BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(); n],
            labels,
            matched_gt: vec![None; n],
            objectness,
            deltas: vec![BoxDelta::default(); n],
        }
    }

    #[test]
    fn pseudo_label_rules() {
        use AnchorLabel::*;
        let b = batch_with(
            vec![Negative, Negative, Positive, Ignore],
            vec![0.3, 0.25, 0.1, 0.9],
        );
        let out = assign_pseudo_labels(b, 0.25);
        assert_eq!(out.labels, vec![PseudoPositive, Negative, Positive, Ignore]);
    }

    #[test]
    fn sampling_caps_and_backfill() {
        use AnchorLabel::*;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut labels = vec![Negative; 500];
        labels.extend(vec![Positive; 200]);
        labels.extend(vec![PseudoPositive; 200]);
        let s = sample_batch(&labels, [128, 128, 128], &mut rng).unwrap();
        assert_eq!((s.positive.len(), s.negative.len(), s.pseudo_positive.len()), (128, 128, 128));

        let mut labels = vec![Negative; 500];
        labels.extend(vec![Positive; 10]);
        let s = sample_batch(&labels, [128, 128, 128], &mut rng).unwrap();
        assert_eq!((s.positive.len(), s.negative.len(), s.pseudo_positive.len()), (10, 374, 0));
        assert_eq!(s.total(), 384);

        let a = sample_batch(&labels, [128, 128, 128], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&labels, [128, 128, 128], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);

        assert!(sample_batch(&[Ignore, Ignore], [1, 1, 1], &mut rng).is_err());
    }

    #[test]
    fn zero_head_gives_half_objectness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SsRpnConfig {
            head_channels: 4,
            ..SsRpnConfig::default()
        };
        let mut head = RpnHead::new(3, &cfg, &mut rng);
        head.cls.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let fm = Tensor3::from_vec(3, 2, 3, (0..18).map(|i| i as f64).collect());
        let anchors = generate_anchors(2, 3, 8, &cfg.anchor_scales, &cfg.anchor_ratios);
        let out = rpn_forward(&head, &fm, &anchors).unwrap();
        assert_eq!(out.objectness.len(), anchors.len());
        assert!(out.objectness.iter().all(|&p| p == 0.5));
        assert!(rpn_forward(&head, &fm, &anchors[1..]).is_err());
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let anchors = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            BBox::new(5.0, 5.0, 20.0, 20.0).unwrap(),
            BBox::new(30.0, 30.0, 40.0, 40.0).unwrap(),
        ];
        let gt = BBox::new(1.0, 2.0, 12.0, 11.0).unwrap();
        let logits = [0.7, -0.3, 1.2];
        let deltas = [
            BoxDelta::new(0.1, -0.2, 0.05, 1.5),
            BoxDelta::default(),
            BoxDelta::default(),
        ];
        let matched = [Some(gt), None, None];
        let sampled = SampledAnchors {
            positive: vec![0],
            negative: vec![1],
            pseudo_positive: vec![2],
        };
        let loss = rpn_loss(&logits, &deltas, &anchors, &matched, &sampled).unwrap();

        let p = |x: f64| 1.0 / (1.0 + (-x).exp());
        let cls = (-(p(0.7)).ln() - (1.0 - p(-0.3)).ln() - p(1.2).ln()) / 3.0;
        // target deltas by hand: anchor center (5,5) size 10; gt center (6.5,6.5) size (11,9)
        let t = [0.15, 0.15, (1.1f64).ln(), (0.9f64).ln()];
        let pred = [0.1, -0.2, 0.05, 1.5];
        let mut reg = 0.0;
        for j in 0..4 {
            let x: f64 = pred[j] - t[j];
            reg += if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
        }
        assert!((loss.cls - cls).abs() < 1e-6);
        assert!((loss.reg - reg).abs() < 1e-6);

        // pseudo positives add nothing to the box loss
        let no_pseudo = SampledAnchors {
            pseudo_positive: vec![],
            ..sampled.clone()
        };
        let l2 = rpn_loss(&logits, &deltas, &anchors, &matched, &no_pseudo).unwrap();
        assert_eq!(l2.reg, loss.reg);

        let none_pos = SampledAnchors {
            positive: vec![],
            ..sampled
        };
        assert_eq!(rpn_loss(&logits, &deltas, &anchors, &matched, &none_pos).unwrap().reg, 0.0);

        let perfect = rpn_loss(&[60.0, -60.0, 60.0], &deltas, &anchors, &matched, &no_pseudo).unwrap();
        assert!(perfect.cls < 1e-20);
    }

    #[test]
    fn rpn_head_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = SsRpnConfig {
            head_channels: 3,
            anchor_scales: vec![8.0],
            anchor_ratios: vec![0.5, 2.0],
            ..SsRpnConfig::default()
        };
        let mut head = RpnHead::new(2, &cfg, &mut rng);
        for p in head.params_mut() {
            p.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
        let fm = Tensor3::from_vec(2, 3, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let anchors = generate_anchors(3, 3, 4, &cfg.anchor_scales, &cfg.anchor_ratios);
        let gt = BBox::new(1.0, 1.0, 7.0, 9.0).unwrap();
        let (labels, matched) = label_anchors(&anchors, &[gt], &cfg);
        let sampled = sample_batch(&labels, [4, 4, 4], &mut rng).unwrap();
        assert!(!sampled.positive.is_empty());
        let loss_of = |h: &RpnHead| {
            let o = h.forward(&fm);
            let l = rpn_loss(&o.logits, &o.deltas, &anchors, &matched, &sampled).unwrap();
            l.cls + l.reg
        };
        let out = head.forward(&fm);
        let l = rpn_loss(&out.logits, &out.deltas, &anchors, &matched, &sampled).unwrap();
        head.zero_grad();
        head.backward(&out, &l.grad_logits, &l.grad_deltas);
        let analytic: Vec<f64> = head.params().iter().flat_map(|p| p.grad.clone()).collect();
        let mut numeric = Vec::new();
        for pi in 0..head.params().len() {
            for k in 0..head.params()[pi].len() {
                let mut h = head.clone();
                h.params_mut()[pi].value[k] += 1e-6;
                let up = loss_of(&h);
                h.params_mut()[pi].value[k] -= 2e-6;
                numeric.push((up - loss_of(&h)) / 2e-6);
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    fn brute_propose(obj: &[f64], deltas: &[BoxDelta], anchors: &[BBox], cfg: &SsRpnConfig) -> Vec<BBox> {
        let mut idx: Vec<usize> = (0..obj.len()).collect();
        // stable sort keeps lower index first on ties
        idx.sort_by(|&a, &b| obj[b].partial_cmp(&obj[a]).unwrap());
        let cand: Vec<(BBox, f64)> = idx
            .into_iter()
            .take(cfg.pre_nms_top_n)
            .map(|i| (decode_delta(&anchors[i], &deltas[i], default_delta_clamp()).clip(64.0, 64.0), obj[i]))
            .filter(|(b, _)| b.width() >= cfg.min_proposal_size && b.height() >= cfg.min_proposal_size)
            .collect();
        let mut kept: Vec<BBox> = Vec::new();
        for (b, _) in &cand {
            if kept.iter().all(|k| iou(k, b) <= cfg.proposal_nms_threshold) {
                kept.push(*b);
            }
        }
        kept.truncate(cfg.post_nms_top_n);
        kept
    }

    #[test]
    fn propose_matches_reference_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = SsRpnConfig {
            pre_nms_top_n: 30,
            post_nms_top_n: 10,
            proposal_nms_threshold: 0.5,
            ..SsRpnConfig::default()
        };
        let anchors: Vec<BBox> = (0..50)
            .map(|_| {
                BBox::from_xywh(rng.gen_range(-5.0..55.0), rng.gen_range(-5.0..55.0), rng.gen_range(4.0..30.0), rng.gen_range(4.0..30.0))
                    .unwrap()
            })
            .collect();
        let obj: Vec<f64> = (0..50).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
        let deltas: Vec<BoxDelta> = (0..50)
            .map(|_| BoxDelta::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
            .collect();
        let got: Vec<BBox> = propose(&obj, &deltas, &anchors, &cfg, 64.0, 64.0).iter().map(|p| p.bbox).collect();
        assert_eq!(got, brute_propose(&obj, &deltas, &anchors, &cfg));

        let mut dom = vec![0.1; 50];
        dom[17] = 0.99;
        let zero = vec![BoxDelta::default(); 50];
        let first = propose(&dom, &zero, &anchors, &cfg, 64.0, 64.0)[0].bbox;
        assert_eq!(first, anchors[17].clip(64.0, 64.0));

        let flat = vec![0.5; 50];
        assert_eq!(
            propose(&flat, &zero, &anchors, &cfg, 64.0, 64.0),
            propose(&flat, &zero, &anchors, &cfg, 64.0, 64.0)
        );
    }

    fn arb_labels() -> impl Strategy<Value = Vec<AnchorLabel>> {
        proptest::collection::vec(
            prop_oneof![
                Just(AnchorLabel::Positive),
                Just(AnchorLabel::Negative),
                Just(AnchorLabel::PseudoPositive),
                Just(AnchorLabel::Ignore)
            ],
            1..400,
        )
    }

    proptest! {
        #[test]
        fn sample_respects_caps(labels in arb_labels(), seed in 0u64..1000, cp in 1usize..64, cn in 1usize..64, cq in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = |l| labels.iter().filter(|&&x| x == l).count();
            match sample_batch(&labels, [cp, cn, cq], &mut rng) {
                Err(_) => prop_assert_eq!(n(AnchorLabel::Ignore), labels.len()),
                Ok(s) => {
                    prop_assert!(s.positive.len() <= cp && s.pseudo_positive.len() <= cq);
                    prop_assert_eq!(s.positive.len(), cp.min(n(AnchorLabel::Positive)));
                    prop_assert_eq!(s.pseudo_positive.len(), cq.min(n(AnchorLabel::PseudoPositive)));
                    let want_neg = cn + (cp - s.positive.len()) + (cq - s.pseudo_positive.len());
                    prop_assert_eq!(s.negative.len(), want_neg.min(n(AnchorLabel::Negative)));
                    for &i in &s.positive { prop_assert_eq!(labels[i], AnchorLabel::Positive); }
                    for &i in &s.negative { prop_assert_eq!(labels[i], AnchorLabel::Negative); }
                    let mut all: Vec<usize> = s.positive.iter().chain(&s.negative).chain(&s.pseudo_positive).copied().collect();
                    all.sort_unstable();
                    all.dedup();
                    prop_assert_eq!(all.len(), s.total());
                }
            }
        }

        #[test]
        fn pseudo_labels_only_promote_negatives(
            labels in arb_labels(),
            seed in 0u64..1000,
            tau in 0.01..0.99f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj: Vec<f64> = (0..labels.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let before = batch_with(labels.clone(), obj.clone());
            let after = assign_pseudo_labels(before.clone(), tau);
            let treated = |b: &AnchorBatch| b.count(AnchorLabel::Positive) + b.count(AnchorLabel::PseudoPositive);
            prop_assert!(treated(&after) >= treated(&before));
            for i in 0..labels.len() {
                match labels[i] {
                    AnchorLabel::Negative => {
                        let want = if obj[i] > tau { AnchorLabel::PseudoPositive } else { AnchorLabel::Negative };
                        prop_assert_eq!(after.labels[i], want);
                    }
                    l => prop_assert_eq!(after.labels[i], l),
                }
            }
            let unreachable = assign_pseudo_labels(before.clone(), 1.0);
            prop_assert_eq!(unreachable.labels, before.labels);
        }
    }
}
