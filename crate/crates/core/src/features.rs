//! Convolutional backbone, bilinear RoI pooling, and support prototypes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{relu_backward, relu_inplace, Conv2d, Param, Parameterized, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Output channels per stage; the last entry is the feature dimension `d`.
    pub channels: Vec<usize>,
    /// Stride per stage; their product is the feature-map stride.
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "backbone.channels and backbone.strides must be nonempty and equally long".into(),
            ));
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("backbone channels and strides must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone output: a `d x h x w` map plus the pixel stride of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor3,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.c
    }
}

/// Stack of 3x3 convolutions shared by the query and support branches.
/// Every stage but the last is followed by a ReLU; the last stage is linear
/// so feature cosines can be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub convs: Vec<Conv2d>,
}

/// Activations kept for the backward pass: input followed by every stage output.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    activations: Vec<Tensor3>,
}

impl Backbone {
    pub fn new<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_ch = 3;
        let mut convs = Vec::new();
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            convs.push(Conv2d::he(&format!("backbone.conv{i}"), in_ch, c, 3, s, rng));
            in_ch = c;
        }
        Ok(Backbone {
            config: config.clone(),
            convs,
        })
    }

    pub fn forward_cached(&self, image: &Tensor3) -> Result<(FeatureMap, BackboneCache)> {
        let stride = self.config.total_stride();
        if image.data.is_empty() {
            return Err(Error::Empty("image has no pixels".into()));
        }
        if image.c != 3 {
            return Err(Error::Shape(format!("expected 3 image channels, got {}", image.c)));
        }
        if image.h < stride || image.w < stride {
            return Err(Error::Shape(format!(
                "image {}x{} smaller than stride {stride}",
                image.w, image.h
            )));
        }
        let mut activations = vec![image.clone()];
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let mut out = conv.forward(activations.last().unwrap());
            if i != last {
                relu_inplace(&mut out.data);
            }
            activations.push(out);
        }
        let fm = FeatureMap {
            values: activations.last().unwrap().clone(),
            stride,
        };
        Ok((fm, BackboneCache { activations }))
    }

    pub fn forward(&self, image: &Tensor3) -> Result<FeatureMap> {
        Ok(self.forward_cached(image)?.0)
    }

    /// Accumulates parameter gradients given the gradient of the feature map.
    pub fn backward(&mut self, cache: &BackboneCache, grad: &Tensor3) {
        let mut g = grad.clone();
        let last = self.convs.len() - 1;
        for i in (0..self.convs.len()).rev() {
            if i != last {
                relu_backward(&cache.activations[i + 1].data, &mut g.data);
            }
            let gin = self.convs[i].backward(&cache.activations[i], &g);
            g = gin;
        }
    }
}

impl Parameterized for Backbone {
    fn params(&self) -> Vec<&Param> {
        self.convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

/// Runs the backbone on a normalized `3 x H x W` image tensor.
pub fn extract_features(image: &Tensor3, backbone: &Backbone) -> Result<FeatureMap> {
    backbone.forward(image)
}

/// Pooled `d x r x r` region map with its global-average vector `v` and its
/// flattening `f`. `f` is channel-major then row-major, i.e. `f[(c*r + i)*r + j]`
/// is channel `c` at output row `i`, column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub map: Tensor3,
    pub v: Vec<f64>,
    pub f: Vec<f64>,
}

impl RegionFeature {
    pub fn from_map(map: Tensor3) -> Self {
        let v = spatial_mean(&map);
        let f = map.data.clone();
        RegionFeature { map, v, f }
    }

    pub fn dim(&self) -> usize {
        self.map.c
    }

    pub fn resolution(&self) -> usize {
        self.map.h
    }

    /// The same feature collapsed to a single global cell.
    pub fn global_only(&self) -> RegionFeature {
        RegionFeature::from_map(Tensor3::from_vec(self.map.c, 1, 1, self.v.clone()))
    }
}

pub fn spatial_mean(map: &Tensor3) -> Vec<f64> {
    let n = (map.h * map.w) as f64;
    (0..map.c)
        .map(|c| map.data[c * map.h * map.w..(c + 1) * map.h * map.w].iter().sum::<f64>() / n)
        .collect()
}

/// Per-category prototype: element-wise mean of `k` support region maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportFeature {
    pub category: u32,
    pub feature: RegionFeature,
    pub k: usize,
}

pub fn support_prototype(instances: &[RegionFeature], category: u32) -> Result<SupportFeature> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Empty(format!("no support instances for category {category}")))?;
    let mut acc = Tensor3::zeros(first.map.c, first.map.h, first.map.w);
    for inst in instances {
        if !inst.map.same_shape(&acc) {
            return Err(Error::Shape("support instances have mismatched shapes".into()));
        }
        acc.add_assign(&inst.map);
    }
    let k = instances.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= k);
    Ok(SupportFeature {
        category,
        feature: RegionFeature::from_map(acc),
        k: instances.len(),
    })
}

/// Bilinear taps for each output cell, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct RoiSamples {
    r: usize,
    // per output cell: four (y*w + x) offsets and weights
    taps: Vec<[(usize, f64); 4]>,
}

fn bilinear_taps(pos: f64, n: usize) -> (usize, usize, f64) {
    let p = pos.clamp(0.0, (n - 1) as f64);
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, p - lo as f64)
}

/// Aligned bilinear RoI pooling: one sample at the center of each of the
/// `r x r` output cells, coordinates clamped to the map.
pub fn roi_extract(fm: &FeatureMap, bbox: &BBox, r: usize) -> Result<RegionFeature> {
    Ok(roi_extract_with_samples(fm, bbox, r)?.0)
}

pub fn roi_extract_with_samples(
    fm: &FeatureMap,
    bbox: &BBox,
    r: usize,
) -> Result<(RegionFeature, RoiSamples)> {
    if r == 0 {
        return Err(Error::Shape("RoI resolution must be at least 1".into()));
    }
    let t = &fm.values;
    if t.h == 0 || t.w == 0 {
        return Err(Error::Empty("feature map".into()));
    }
    let s = fm.stride as f64;
    let bw = (bbox.x2 - bbox.x1).max(0.0);
    let bh = (bbox.y2 - bbox.y1).max(0.0);
    let mut taps = Vec::with_capacity(r * r);
    for i in 0..r {
        let py = (bbox.y1 + (i as f64 + 0.5) * bh / r as f64) / s - 0.5;
        let (y0, y1, ly) = bilinear_taps(py, t.h);
        for j in 0..r {
            let px = (bbox.x1 + (j as f64 + 0.5) * bw / r as f64) / s - 0.5;
            let (x0, x1, lx) = bilinear_taps(px, t.w);
            taps.push([
                (y0 * t.w + x0, (1.0 - ly) * (1.0 - lx)),
                (y0 * t.w + x1, (1.0 - ly) * lx),
                (y1 * t.w + x0, ly * (1.0 - lx)),
                (y1 * t.w + x1, ly * lx),
            ]);
        }
    }
    let plane = t.h * t.w;
    let mut out = Tensor3::zeros(t.c, r, r);
    for c in 0..t.c {
        let src = &t.data[c * plane..(c + 1) * plane];
        for (cell, tap) in taps.iter().enumerate() {
            out.data[c * r * r + cell] = tap.iter().map(|&(o, w)| w * src[o]).sum();
        }
    }
    Ok((RegionFeature::from_map(out), RoiSamples { r, taps }))
}

/// Scatters the gradient of a pooled map back onto the feature map gradient.
pub fn roi_backward(samples: &RoiSamples, grad_map: &Tensor3, grad_fm: &mut Tensor3) {
    let plane = grad_fm.h * grad_fm.w;
    let rr = samples.r * samples.r;
    for c in 0..grad_map.c {
        let dst = &mut grad_fm.data[c * plane..(c + 1) * plane];
        for (cell, tap) in samples.taps.iter().enumerate() {
            let g = grad_map.data[c * rr + cell];
            if g != 0.0 {
                for &(o, w) in tap {
                    dst[o] += w * g;
                }
            }
        }
    }
}

/// Gradient of a [`RegionFeature`] loss split by representation; folds the
/// `v` and `f` parts back onto the pooled map.
pub fn region_grad_to_map(map_grad: &mut Tensor3, v_grad: Option<&[f64]>, f_grad: Option<&[f64]>) {
    if let Some(fg) = f_grad {
        map_grad.data.iter_mut().zip(fg).for_each(|(a, b)| *a += b);
    }
    if let Some(vg) = v_grad {
        let plane = map_grad.h * map_grad.w;
        let n = plane as f64;
        for (c, g) in vg.iter().enumerate() {
            map_grad.data[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|a| *a += g / n);
        }
    }
}
