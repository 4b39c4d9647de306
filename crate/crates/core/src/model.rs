//! The full detector: shared backbone, proposal network, and the RoI heads.

use std::hash::{DefaultHasher, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig};
use crate::geometry::BBox;
use crate::heads::{
    BoxRegressor, ClassifierMode, ComparisonHead, HeadConfig, MultiClassHead, RegressorKind,
};
use crate::nn::{Param, Parameterized};
use crate::ss_rpn::{generate_anchors, RpnHead, SsRpnConfig};

/// Architecture and head settings; enough to rebuild a [`Detector`] from a
/// checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rpn: SsRpnConfig,
    pub heads: HeadConfig,
    pub classifier: ClassifierMode,
    pub regressor: RegressorKind,
    /// Off: only global-average features are compared (alpha forced to 1,
    /// comparison head sees 1x1 maps).
    pub pixel_contrast: bool,
    /// Label set of the multi-class head.
    pub base_categories: Vec<u32>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            rpn: SsRpnConfig::default(),
            heads: HeadConfig::default(),
            classifier: ClassifierMode::Dynamic,
            regressor: RegressorKind::SemiExplicit,
            pixel_contrast: true,
            base_categories: vec![1, 2, 3],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rpn.validate()?;
        self.heads.validate()?;
        if self.base_categories.is_empty() {
            return Err(Error::Config("model needs at least one base category".into()));
        }
        Ok(())
    }

    /// Head settings as actually applied, with the pixel-contrast toggle folded in.
    pub fn effective_heads(&self) -> HeadConfig {
        let mut h = self.heads.clone();
        if !self.pixel_contrast {
            h.alpha = 1.0;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub comparison: ComparisonHead,
    pub multi: MultiClassHead,
    pub regressor: BoxRegressor,
}

impl Detector {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.backbone.feature_dim();
        let h = &config.heads;
        let backbone = Backbone::new(&config.backbone, &mut rng)?;
        let rpn = RpnHead::new(d, &config.rpn, &mut rng);
        let comparison = ComparisonHead::new(d, h.comparison_hidden, &mut rng);
        let multi = MultiClassHead::new(d, &config.base_categories, &mut rng);
        let regressor = BoxRegressor::new(config.regressor, d, h.roi_size, h.regressor_hidden, &mut rng);
        Ok(Detector {
            config,
            backbone,
            rpn,
            comparison,
            multi,
            regressor,
        })
    }

    pub fn anchors(&self, fm_h: usize, fm_w: usize) -> Vec<BBox> {
        let c = &self.config.rpn;
        generate_anchors(
            fm_h,
            fm_w,
            self.config.backbone.total_stride(),
            &c.anchor_scales,
            &c.anchor_ratios,
        )
    }

    /// Hash over every parameter name, shape and value bit pattern.
    pub fn param_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            h.write(p.name.as_bytes());
            for &s in &p.shape {
                h.write_usize(s);
            }
            for v in &p.value {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl Parameterized for Detector {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.rpn.params());
        v.extend(self.comparison.params());
        v.extend(self.multi.params());
        v.extend(self.regressor.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.rpn.params_mut());
        v.extend(self.comparison.params_mut());
        v.extend(self.multi.params_mut());
        v.extend(self.regressor.params_mut());
        v
    }
}
