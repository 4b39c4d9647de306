//! Second-stage heads: the learned comparison classifier used in training,
//! the parameter-free distance classifier used at inference, the
//! multi-class baseline, and the box regressors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{RegionFeature, SupportFeature};
use crate::geometry::BoxDelta;
use crate::nn::{relu_backward, relu_inplace, sigmoid, Conv2d, Linear, Param, Parameterized, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Weight of the global (GAP) cosine against the flattened-map cosine.
    pub alpha: f64,
    /// Sharpness of the sigmoid applied to the combined cosine.
    pub lambda: f64,
    /// Detections are emitted only above this probability.
    pub score_threshold: f64,
    /// Proposal-to-GT IoU at or above which a RoI counts as foreground.
    pub roi_pos_iou: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// RoI pooling resolution `r`.
    pub roi_size: usize,
    pub comparison_hidden: usize,
    pub regressor_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            alpha: 0.5,
            lambda: 20.0,
            score_threshold: 0.5,
            roi_pos_iou: 0.5,
            nms_threshold: 0.5,
            max_detections: 100,
            roi_size: 7,
            comparison_hidden: 64,
            regressor_hidden: 64,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("heads.alpha must lie in [0, 1]".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("heads.lambda must be positive".into()));
        }
        if self.roi_size == 0 || self.comparison_hidden == 0 || self.regressor_hidden == 0 {
            return Err(Error::Config("heads sizes must be positive".into()));
        }
        Ok(())
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity. Defined as 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine and its gradients with respect to both arguments.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let cos = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    (cos, ga, gb)
}

/// `1 / (1 + exp(-lambda * x))`.
pub fn sharp_sigmoid(x: f64, lambda: f64) -> f64 {
    sigmoid(lambda * x)
}

fn check_pair(x: &RegionFeature, c: &SupportFeature) -> Result<()> {
    if !x.map.same_shape(&c.feature.map) {
        return Err(Error::Shape(format!(
            "region {}x{}x{} vs support {}x{}x{}",
            x.map.c, x.map.h, x.map.w, c.feature.map.c, c.feature.map.h, c.feature.map.w
        )));
    }
    Ok(())
}

/// Combined cosine `(1 - alpha) * cos(f_x, f_c) + alpha * cos(v_x, v_c)`.
pub fn combined_distance(x: &RegionFeature, c: &SupportFeature, alpha: f64) -> Result<f64> {
    check_pair(x, c)?;
    Ok((1.0 - alpha) * cosine(&x.f, &c.feature.f) + alpha * cosine(&x.v, &c.feature.v))
}

/// Probability that region `x` belongs to the category of `c`.
pub fn distance_score(x: &RegionFeature, c: &SupportFeature, cfg: &HeadConfig) -> Result<f64> {
    Ok(sharp_sigmoid(combined_distance(x, c, cfg.alpha)?, cfg.lambda))
}

/// Gradients of the distance-head logit `lambda * combined` with respect to
/// both pooled maps.
#[derive(Debug, Clone)]
pub struct PairGrad {
    pub region: Tensor3,
    pub support: Tensor3,
}

impl PairGrad {
    fn zeros_like(x: &Tensor3) -> Self {
        PairGrad {
            region: Tensor3::zeros(x.c, x.h, x.w),
            support: Tensor3::zeros(x.c, x.h, x.w),
        }
    }
}

pub fn distance_logit_with_grad(
    x: &RegionFeature,
    c: &SupportFeature,
    cfg: &HeadConfig,
) -> Result<(f64, PairGrad)> {
    check_pair(x, c)?;
    let (a, lam) = (cfg.alpha, cfg.lambda);
    let (cf, gxf, gcf) = cosine_with_grad(&x.f, &c.feature.f);
    let (cv, gxv, gcv) = cosine_with_grad(&x.v, &c.feature.v);
    let logit = lam * ((1.0 - a) * cf + a * cv);
    let mut g = PairGrad::zeros_like(&x.map);
    let plane = x.map.h * x.map.w;
    for ch in 0..x.map.c {
        for p in 0..plane {
            let i = ch * plane + p;
            g.region.data[i] = lam * ((1.0 - a) * gxf[i] + a * gxv[ch] / plane as f64);
            g.support.data[i] = lam * ((1.0 - a) * gcf[i] + a * gcv[ch] / plane as f64);
        }
    }
    Ok((logit, g))
}

/// Cosine correspondence between every region pixel and every support
/// pixel: `m[i * n + j] = cos(region pixel i, support pixel j)` with pixels
/// indexed row-major, `n = r * r`. `m` is also the flattened vector `d_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    pub m: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.n + j]
    }

    pub fn flattened(&self) -> &[f64] {
        &self.m
    }
}

fn pixel_vectors(map: &Tensor3) -> Vec<Vec<f64>> {
    let plane = map.h * map.w;
    (0..plane)
        .map(|p| (0..map.c).map(|c| map.data[c * plane + p]).collect())
        .collect()
}

fn normalized(vs: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let norms: Vec<f64> = vs.iter().map(|v| norm(v)).collect();
    let units = vs
        .into_iter()
        .zip(&norms)
        .map(|(v, &n)| if n == 0.0 { vec![0.0; v.len()] } else { v.iter().map(|x| x / n).collect() })
        .collect();
    (units, norms)
}

fn pixel_matrix(x: &Tensor3, c: &Tensor3) -> Result<DistanceMatrix> {
    if !x.same_shape(c) {
        return Err(Error::Shape("distance matrix inputs differ in shape".into()));
    }
    let (ux, _) = normalized(pixel_vectors(x));
    let (uc, _) = normalized(pixel_vectors(c));
    let n = ux.len();
    let mut m = Vec::with_capacity(n * n);
    for xi in &ux {
        for cj in &uc {
            m.push(dot(xi, cj).clamp(-1.0, 1.0));
        }
    }
    Ok(DistanceMatrix { n, m })
}

pub fn distance_matrix(x: &RegionFeature, c: &SupportFeature) -> Result<DistanceMatrix> {
    pixel_matrix(&x.map, &c.feature.map)
}

/// Backpropagates `grad` (same layout as `m`) to both pixel maps.
fn pixel_matrix_backward(x: &Tensor3, c: &Tensor3, grad: &[f64]) -> (Tensor3, Tensor3) {
    let (ux, nx) = normalized(pixel_vectors(x));
    let (uc, nc) = normalized(pixel_vectors(c));
    let (n, d) = (ux.len(), x.c);
    let mut gux = vec![vec![0.0; d]; n];
    let mut guc = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..n {
            let g = grad[i * n + j];
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                gux[i][k] += g * uc[j][k];
                guc[j][k] += g * ux[i][k];
            }
        }
    }
    // through the normalization u = v / |v|
    let project = |u: &[Vec<f64>], gu: &[Vec<f64>], norms: &[f64], like: &Tensor3| {
        let mut out = Tensor3::zeros(like.c, like.h, like.w);
        for p in 0..n {
            if norms[p] == 0.0 {
                continue;
            }
            let along = dot(&gu[p], &u[p]);
            for k in 0..d {
                out.data[k * n + p] = (gu[p][k] - along * u[p][k]) / norms[p];
            }
        }
        out
    };
    (project(&ux, &gux, &nx, x), project(&uc, &guc, &nc, c))
}

/// Learned pixel-wise comparison: concatenate region and support maps per
/// pixel, 1x1 conv, ReLU, global average pool, linear to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonHead {
    pub conv: Conv2d,
    pub fc: Linear,
}

#[derive(Debug, Clone)]
pub struct ComparisonCache {
    input: Tensor3,
    hidden: Tensor3,
    pooled: Vec<f64>,
}

impl ComparisonHead {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        ComparisonHead {
            conv: Conv2d::he("comparison.conv", 2 * dim, hidden, 1, 1, rng),
            fc: Linear::new("comparison.fc", hidden, 1, 0.01, rng),
        }
    }

    pub fn logit(&self, x: &Tensor3, c: &Tensor3) -> Result<(f64, ComparisonCache)> {
        if !x.same_shape(c) || 2 * x.c != self.conv.in_ch {
            return Err(Error::Shape("comparison head input shape".into()));
        }
        let mut data = x.data.clone();
        data.extend_from_slice(&c.data);
        let input = Tensor3::from_vec(2 * x.c, x.h, x.w, data);
        let mut hidden = self.conv.forward(&input);
        relu_inplace(&mut hidden.data);
        let pooled = crate::features::spatial_mean(&hidden);
        let logit = self.fc.forward(&pooled)[0];
        Ok((
            logit,
            ComparisonCache {
                input,
                hidden,
                pooled,
            },
        ))
    }

    /// Accumulates parameter gradients; returns `(d/d region map, d/d support map)`.
    pub fn backward(&mut self, cache: &ComparisonCache, grad_logit: f64) -> (Tensor3, Tensor3) {
        let gp = self.fc.backward(&cache.pooled, &[grad_logit]);
        let h = &cache.hidden;
        let plane = h.h * h.w;
        let mut gh = Tensor3::zeros(h.c, h.h, h.w);
        for (c, g) in gp.iter().enumerate() {
            gh.data[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = g / plane as f64);
        }
        relu_backward(&h.data, &mut gh.data);
        let gin = self.conv.backward(&cache.input, &gh);
        let half = gin.data.len() / 2;
        let d = gin.c / 2;
        (
            Tensor3::from_vec(d, gin.h, gin.w, gin.data[..half].to_vec()),
            Tensor3::from_vec(d, gin.h, gin.w, gin.data[half..].to_vec()),
        )
    }
}

impl Parameterized for ComparisonHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.conv.weight, &self.conv.bias, &self.fc.weight, &self.fc.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.fc.weight,
            &mut self.fc.bias,
        ]
    }
}

/// Probability from the comparison head. With `pixel_contrast` off both maps
/// are collapsed to their global average first.
pub fn comparison_score(
    x: &RegionFeature,
    c: &SupportFeature,
    head: &ComparisonHead,
    pixel_contrast: bool,
) -> Result<f64> {
    check_pair(x, c)?;
    let (logit, _) = if pixel_contrast {
        head.logit(&x.map, &c.feature.map)?
    } else {
        head.logit(&x.global_only().map, &c.feature.global_only().map)?
    };
    Ok(sigmoid(logit))
}

/// Softmax classifier over the base categories plus background (last slot).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiClassHead {
    pub fc: Linear,
    pub categories: Vec<u32>,
}

impl MultiClassHead {
    pub fn new<R: Rng>(dim: usize, categories: &[u32], rng: &mut R) -> Self {
        MultiClassHead {
            fc: Linear::new("multi.fc", dim, categories.len() + 1, 0.01, rng),
            categories: categories.to_vec(),
        }
    }

    pub fn logits(&self, x: &RegionFeature) -> Vec<f64> {
        self.fc.forward(&x.v)
    }

    pub fn slot(&self, category: u32) -> Option<usize> {
        self.categories.iter().position(|&c| c == category)
    }
}

impl Parameterized for MultiClassHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.fc.weight, &self.fc.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.fc.weight, &mut self.fc.bias]
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Distribution over the head's base categories followed by background.
pub fn multi_class_score(x: &RegionFeature, head: &MultiClassHead) -> Vec<f64> {
    softmax(&head.logits(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    /// Distance matrix between region and support pixels plus region GAP.
    SemiExplicit,
    /// Flattened region map only.
    Plain,
}

/// Two-layer box regressor conditioned on the support prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegressor {
    pub kind: RegressorKind,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct RegressorCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
    region: Tensor3,
    support: Tensor3,
}

impl BoxRegressor {
    pub fn input_dim(kind: RegressorKind, dim: usize, r: usize) -> usize {
        match kind {
            RegressorKind::SemiExplicit => r * r * r * r + dim,
            RegressorKind::Plain => dim * r * r,
        }
    }

    pub fn new<R: Rng>(kind: RegressorKind, dim: usize, r: usize, hidden: usize, rng: &mut R) -> Self {
        BoxRegressor {
            kind,
            fc1: Linear::he("regressor.fc1", Self::input_dim(kind, dim, r), hidden, rng),
            // zero output layer: identity regression until trained
            fc2: Linear::new("regressor.fc2", hidden, 4, 0.0, rng),
        }
    }

    pub fn forward(&self, x: &RegionFeature, c: &SupportFeature) -> Result<(BoxDelta, RegressorCache)> {
        check_pair(x, c)?;
        let input = match self.kind {
            RegressorKind::SemiExplicit => {
                let mut v = pixel_matrix(&x.map, &c.feature.map)?.m;
                v.extend_from_slice(&x.v);
                v
            }
            RegressorKind::Plain => x.f.clone(),
        };
        if input.len() != self.fc1.in_dim {
            return Err(Error::Shape(format!(
                "regressor expects {} inputs, got {}",
                self.fc1.in_dim,
                input.len()
            )));
        }
        let mut hidden = self.fc1.forward(&input);
        relu_inplace(&mut hidden);
        let out = self.fc2.forward(&hidden);
        Ok((
            BoxDelta::from_slice(&out),
            RegressorCache {
                input,
                hidden,
                region: x.map.clone(),
                support: c.feature.map.clone(),
            },
        ))
    }

    pub fn backward(&mut self, cache: &RegressorCache, grad: [f64; 4]) -> (Tensor3, Tensor3) {
        let mut gh = self.fc2.backward(&cache.hidden, &grad);
        relu_backward(&cache.hidden, &mut gh);
        let gin = self.fc1.backward(&cache.input, &gh);
        let x = &cache.region;
        match self.kind {
            RegressorKind::SemiExplicit => {
                let nm = x.h * x.w * x.h * x.w;
                let (mut gx, gc) = pixel_matrix_backward(x, &cache.support, &gin[..nm]);
                crate::features::region_grad_to_map(&mut gx, Some(&gin[nm..]), None);
                (gx, gc)
            }
            RegressorKind::Plain => (
                Tensor3::from_vec(x.c, x.h, x.w, gin),
                Tensor3::zeros(x.c, x.h, x.w),
            ),
        }
    }
}

impl Parameterized for BoxRegressor {
    fn params(&self) -> Vec<&Param> {
        vec![&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }
}

pub fn semi_explicit_regress(
    x: &RegionFeature,
    c: &SupportFeature,
    regressor: &BoxRegressor,
) -> Result<BoxDelta> {
    Ok(regressor.forward(x, c)?.0)
}

/// Which classifier scores region/support pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierHead {
    Comparison,
    Distance,
    Multi,
}

/// Train/inference classifier pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Comparison head in training, distance head at inference.
    Dynamic,
    Comparison,
    Distance,
    Multi,
}

impl ClassifierMode {
    pub fn train_head(self) -> ClassifierHead {
        match self {
            ClassifierMode::Dynamic | ClassifierMode::Comparison => ClassifierHead::Comparison,
            ClassifierMode::Distance => ClassifierHead::Distance,
            ClassifierMode::Multi => ClassifierHead::Multi,
        }
    }

    pub fn infer_head(self) -> ClassifierHead {
        match self {
            ClassifierMode::Dynamic | ClassifierMode::Distance => ClassifierHead::Distance,
            ClassifierMode::Comparison => ClassifierHead::Comparison,
            ClassifierMode::Multi => ClassifierHead::Multi,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassifierMode::Dynamic => "dynamic",
            ClassifierMode::Comparison => "comparison",
            ClassifierMode::Distance => "distance",
            ClassifierMode::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// The dynamic classifier: comparison head while training, distance head at
/// inference. The inference path reads no learned parameters.
pub fn classify_dynamic(
    x: &RegionFeature,
    c: &SupportFeature,
    phase: Phase,
    cfg: &HeadConfig,
    head: &ComparisonHead,
) -> Result<f64> {
    match phase {
        Phase::Train => comparison_score(x, c, head, true),
        Phase::Infer => distance_score(x, c, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::support_prototype;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_region(rng: &mut ChaCha8Rng, d: usize, r: usize) -> RegionFeature {
        RegionFeature::from_map(Tensor3::from_vec(
            d,
            r,
            r,
            (0..d * r * r).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ))
    }

    fn proto(x: RegionFeature) -> SupportFeature {
        support_prototype(&[x], 0).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let n = norm(a) + norm(b);
        if n == 0.0 {
            0.0
        } else {
            diff / n
        }
    }

    #[test]
    fn cosine_cases() {
        let a = [0.3, -2.0, 1.1];
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert_eq!(cosine(&a, &[1.0, 2.0, 3.0]), cosine(&[1.0, 2.0, 3.0], &a));
    }

    #[test]
    fn sharp_sigmoid_cases() {
        assert_eq!(sharp_sigmoid(0.0, 7.0), 0.5);
        assert!((sharp_sigmoid(0.3, 20.0) + sharp_sigmoid(-0.3, 20.0) - 1.0).abs() < 1e-15);
        assert!((sharp_sigmoid(0.1, 20.0) - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!((sharp_sigmoid(0.1, 20.0) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn distance_score_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = HeadConfig::default();
        let x = rand_region(&mut rng, 8, 4);
        let c = proto(x.clone());
        let s = distance_score(&x, &c, &cfg).unwrap();
        assert!((s - 1.0 / (1.0 + (-20f64).exp())).abs() < 1e-12);

        let y = rand_region(&mut rng, 8, 4);
        let one = HeadConfig { alpha: 1.0, ..cfg.clone() };
        assert_eq!(
            distance_score(&y, &c, &one).unwrap(),
            sharp_sigmoid(cosine(&y.v, &c.feature.v), 20.0)
        );
        assert!(distance_score(&rand_region(&mut rng, 8, 3), &c, &cfg).is_err());
    }

    #[test]
    fn distance_score_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = HeadConfig::default();
        for _ in 0..50 {
            let x = rand_region(&mut rng, 6, 3);
            let c = proto(rand_region(&mut rng, 6, 3));
            let k = rng.gen_range(0.01..100.0);
            let xs = RegionFeature::from_map(Tensor3::from_vec(6, 3, 3, x.f.iter().map(|v| v * k).collect()));
            let a = distance_score(&x, &c, &cfg).unwrap();
            let b = distance_score(&xs, &c, &cfg).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_matrix_cases() {
        let x = RegionFeature::from_map(Tensor3::from_vec(3, 1, 1, vec![1.0, 2.0, -1.0]));
        let c = proto(RegionFeature::from_map(Tensor3::from_vec(3, 1, 1, vec![0.5, 0.0, 2.0])));
        let m = distance_matrix(&x, &c).unwrap();
        assert_eq!(m.n, 1);
        assert!((m.get(0, 0) - cosine(&x.f, &c.feature.f)).abs() < 1e-15);

        // four mutually orthogonal pixel vectors in 4 channels
        let mut t = Tensor3::zeros(4, 2, 2);
        for p in 0..4 {
            t.data[p * 4 + p] = 1.0 + p as f64;
        }
        let x = RegionFeature::from_map(t);
        let m = distance_matrix(&x, &proto(x.clone())).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_region(&mut rng, 5, 7);
        let c = rand_region(&mut rng, 5, 7);
        let m = distance_matrix(&x, &proto(c.clone())).unwrap();
        assert_eq!(m.flattened().len(), 2401);
        let mt = distance_matrix(&c, &proto(x)).unwrap();
        for i in 0..49 {
            for j in 0..49 {
                assert!((m.get(i, j) - mt.get(j, i)).abs() < 1e-15);
                assert!((-1.0..=1.0).contains(&m.get(i, j)));
            }
        }
    }

    #[test]
    fn multi_class_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = MultiClassHead::new(4, &[1, 2, 3], &mut rng);
        let x = rand_region(&mut rng, 4, 2);
        let p = multi_class_score(&x, &head);
        assert_eq!(p.len(), 4);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(softmax(&[2.0, 2.0, 2.0]), vec![1.0 / 3.0; 3]);
        let s = softmax(&[1.0, 2.0, 3.0]);
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, v) in s.iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
        assert_eq!(head.slot(2), Some(1));
        assert_eq!(head.slot(9), None);
    }

    #[test]
    fn comparison_zero_final_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = ComparisonHead::new(4, 6, &mut rng);
        let x = rand_region(&mut rng, 4, 3);
        let c = proto(rand_region(&mut rng, 4, 3));
        let s = comparison_score(&x, &c, &head, true).unwrap();
        assert!(s > 0.0 && s < 1.0);
        head.fc.weight.value.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(comparison_score(&x, &c, &head, true).unwrap(), 0.5);
        assert_eq!(comparison_score(&x, &c, &head, false).unwrap(), 0.5);
    }

    #[test]
    fn regressor_zero_output_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reg = BoxRegressor::new(RegressorKind::SemiExplicit, 4, 3, 8, &mut rng);
        let x = rand_region(&mut rng, 4, 3);
        let c = proto(rand_region(&mut rng, 4, 3));
        assert_eq!(semi_explicit_regress(&x, &c, &reg).unwrap(), BoxDelta::default());
    }

    #[test]
    fn regressor_invariant_to_support_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut reg = BoxRegressor::new(RegressorKind::SemiExplicit, 4, 2, 8, &mut rng);
        reg.fc2.weight.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x = rand_region(&mut rng, 4, 2);
        let supports: Vec<RegionFeature> = (0..5).map(|_| rand_region(&mut rng, 4, 2)).collect();
        let a = semi_explicit_regress(&x, &support_prototype(&supports, 1).unwrap(), &reg).unwrap();
        let mut rev = supports.clone();
        rev.reverse();
        let b = semi_explicit_regress(&x, &support_prototype(&rev, 1).unwrap(), &reg).unwrap();
        for (p, q) in a.as_array().iter().zip(b.as_array()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_classifier_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = HeadConfig::default();
        let mut head = ComparisonHead::new(4, 6, &mut rng);
        let x = rand_region(&mut rng, 4, 3);
        let c = proto(rand_region(&mut rng, 4, 3));
        let infer = classify_dynamic(&x, &c, Phase::Infer, &cfg, &head).unwrap();
        let train = classify_dynamic(&x, &c, Phase::Train, &cfg, &head).unwrap();
        assert_eq!(train, comparison_score(&x, &c, &head, true).unwrap());
        assert!(infer > 0.0 && infer < 1.0 && train > 0.0 && train < 1.0);
        head.conv.weight.value.iter_mut().for_each(|v| *v += 0.3);
        head.fc.weight.value.iter_mut().for_each(|v| *v -= 0.7);
        assert_eq!(classify_dynamic(&x, &c, Phase::Infer, &cfg, &head).unwrap(), infer);
    }

    fn numeric_param_grad<H: Parameterized + Clone>(head: &H, loss: &dyn Fn(&H) -> f64) -> Vec<f64> {
        let mut out = Vec::new();
        for pi in 0..head.params().len() {
            for k in 0..head.params()[pi].len() {
                let mut h = head.clone();
                h.params_mut()[pi].value[k] += 1e-6;
                let up = loss(&h);
                h.params_mut()[pi].value[k] -= 2e-6;
                out.push((up - loss(&h)) / 2e-6);
            }
        }
        out
    }

    fn numeric_map_grad(t: &Tensor3, loss: &dyn Fn(&Tensor3) -> f64) -> Vec<f64> {
        (0..t.data.len())
            .map(|i| {
                let mut p = t.clone();
                p.data[i] += 1e-6;
                let up = loss(&p);
                p.data[i] -= 2e-6;
                (up - loss(&p)) / 2e-6
            })
            .collect()
    }

    #[test]
    fn comparison_head_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = ComparisonHead::new(3, 5, &mut rng);
        head.fc.weight.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let x = rand_region(&mut rng, 3, 3).map;
        let c = rand_region(&mut rng, 3, 3).map;
        // BCE against label 1 through the logit
        let loss = |h: &ComparisonHead, x: &Tensor3, c: &Tensor3| {
            crate::nn::bce_with_logit(h.logit(x, c).unwrap().0, 1.0).0
        };
        let (logit, cache) = head.logit(&x, &c).unwrap();
        head.zero_grad();
        let (gx, gc) = head.backward(&cache, crate::nn::bce_with_logit(logit, 1.0).1);
        let analytic: Vec<f64> = head.params().iter().flat_map(|p| p.grad.clone()).collect();
        let numeric = numeric_param_grad(&head, &|h| loss(h, &x, &c));
        assert!(rel_err(&analytic, &numeric) < 1e-4);
        assert!(rel_err(&gx.data, &numeric_map_grad(&x, &|t| loss(&head, t, &c))) < 1e-4);
        assert!(rel_err(&gc.data, &numeric_map_grad(&c, &|t| loss(&head, &x, t))) < 1e-4);
    }

    #[test]
    fn regressor_gradient_check() {
        for kind in [RegressorKind::SemiExplicit, RegressorKind::Plain] {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut reg = BoxRegressor::new(kind, 3, 2, 6, &mut rng);
            reg.fc2.weight.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let x = rand_region(&mut rng, 3, 2);
            let c = proto(rand_region(&mut rng, 3, 2));
            let target = [0.3, -0.2, 0.5, 0.1];
            let loss = |r: &BoxRegressor, x: &Tensor3, c: &Tensor3| -> f64 {
                let xr = RegionFeature::from_map(x.clone());
                let cr = proto(RegionFeature::from_map(c.clone()));
                let d = r.forward(&xr, &cr).unwrap().0.as_array();
                (0..4).map(|j| crate::nn::smooth_l1(d[j] - target[j]).0).sum()
            };
            let (d, cache) = reg.forward(&x, &c).unwrap();
            let d = d.as_array();
            let g = [0, 1, 2, 3].map(|j| crate::nn::smooth_l1(d[j] - target[j]).1);
            reg.zero_grad();
            let (gx, gc) = reg.backward(&cache, g);
            let analytic: Vec<f64> = reg.params().iter().flat_map(|p| p.grad.clone()).collect();
            let numeric = numeric_param_grad(&reg, &|r| loss(r, &x.map, &c.feature.map));
            assert!(rel_err(&analytic, &numeric) < 1e-4, "{kind:?} params");
            let nx = numeric_map_grad(&x.map, &|t| loss(&reg, t, &c.feature.map));
            assert!(rel_err(&gx.data, &nx) < 1e-4, "{kind:?} region");
            let nc = numeric_map_grad(&c.feature.map, &|t| loss(&reg, &x.map, t));
            assert!(rel_err(&gc.data, &nc) < 1e-4 || norm(&nc) == 0.0, "{kind:?} support");
        }
    }

    #[test]
    fn distance_logit_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = HeadConfig { alpha: 0.3, ..HeadConfig::default() };
        let x = rand_region(&mut rng, 4, 2);
        let c = proto(rand_region(&mut rng, 4, 2));
        let (_, g) = distance_logit_with_grad(&x, &c, &cfg).unwrap();
        let logit = |xm: &Tensor3, cm: &Tensor3| {
            let xr = RegionFeature::from_map(xm.clone());
            let cr = proto(RegionFeature::from_map(cm.clone()));
            cfg.lambda * combined_distance(&xr, &cr, cfg.alpha).unwrap()
        };
        let nx = numeric_map_grad(&x.map, &|t| logit(t, &c.feature.map));
        let nc = numeric_map_grad(&c.feature.map, &|t| logit(&x.map, t));
        assert!(rel_err(&g.region.data, &nx) < 1e-4);
        assert!(rel_err(&g.support.data, &nc) < 1e-4);
    }
}
