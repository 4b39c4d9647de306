//! Command-line front end: flat `key = value` configuration, overrides, and
//! the train / detect / eval / make-shapes commands.

use std::collections::{BTreeSet, HashSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_shapes_dataset, image_to_tensor, read_image, sample_support_sets, sample_support_sets_excluding,
    split_from_coco, CocoFile, DiskImages, DatasetSplit, ShapeKind, ShapesSpec, SplitSpec, SplitView,
    SupportItem, SupportSet,
};
use crate::error::{Error, Result};
use crate::eval::{meta_testing, one_time_protocol, support_features, detect, to_coco_results, EvalResult};
use crate::geometry::BBox;
use crate::heads::{ClassifierMode, RegressorKind};
use crate::model::{Detector, ModelConfig};
use crate::training::{log_to_ndjson, train, TrainConfig};

/// Everything a run needs: model, schedule, data locations and ablation
/// toggles, addressed by dotted keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub model_seed: u64,
    /// Dataset directory holding `annotations.json` and the images it names.
    pub data_train: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    /// `metadata` (split stored in the annotation file) or `coco_20_novel`.
    pub data_split: String,
    explicit: HashSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            model_seed: 0,
            data_train: None,
            data_test: None,
            data_split: "metadata".into(),
            explicit: HashSet::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn on_off(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "model.seed" => self.model_seed = parse_num(key, v)?,
            "model.base_categories" => m.base_categories = parse_list(key, v)?,
            "data.train" => self.data_train = Some(PathBuf::from(v)),
            "data.test" => self.data_test = Some(PathBuf::from(v)),
            "data.split" => match v {
                "metadata" | "coco_20_novel" => self.data_split = v.into(),
                _ => return Err(Error::Config(format!("{key}: expected metadata or coco_20_novel, got {v:?}"))),
            },
            "backbone.channels" => m.backbone.channels = parse_list(key, v)?,
            "backbone.strides" => m.backbone.strides = parse_list(key, v)?,
            "rpn.tau" => m.rpn.tau = parse_num(key, v)?,
            "rpn.neg_iou" => m.rpn.neg_iou = parse_num(key, v)?,
            "rpn.pos_iou" => m.rpn.pos_iou = parse_num(key, v)?,
            "rpn.caps" => {
                let c: Vec<usize> = parse_list(key, v)?;
                m.rpn.caps = c
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected three integers")))?;
            }
            "rpn.anchor_scales" => m.rpn.anchor_scales = parse_list(key, v)?,
            "rpn.anchor_ratios" => m.rpn.anchor_ratios = parse_list(key, v)?,
            "rpn.pre_nms_top_n" => m.rpn.pre_nms_top_n = parse_num(key, v)?,
            "rpn.post_nms_top_n" => m.rpn.post_nms_top_n = parse_num(key, v)?,
            "rpn.nms_threshold" => m.rpn.proposal_nms_threshold = parse_num(key, v)?,
            "rpn.min_proposal_size" => m.rpn.min_proposal_size = parse_num(key, v)?,
            "rpn.head_channels" => m.rpn.head_channels = parse_num(key, v)?,
            "heads.alpha" => m.heads.alpha = parse_num(key, v)?,
            "heads.lambda" => m.heads.lambda = parse_num(key, v)?,
            "heads.score_threshold" => m.heads.score_threshold = parse_num(key, v)?,
            "heads.roi_pos_iou" => m.heads.roi_pos_iou = parse_num(key, v)?,
            "heads.nms_threshold" => m.heads.nms_threshold = parse_num(key, v)?,
            "heads.max_detections" => m.heads.max_detections = parse_num(key, v)?,
            "heads.roi_size" => m.heads.roi_size = parse_num(key, v)?,
            "heads.comparison_hidden" => m.heads.comparison_hidden = parse_num(key, v)?,
            "heads.regressor_hidden" => m.heads.regressor_hidden = parse_num(key, v)?,
            "train.iterations" => t.iterations = parse_num(key, v)?,
            "train.learning_rate" => t.learning_rate = parse_num(key, v)?,
            "train.milestones" => t.milestones = parse_list(key, v)?,
            "train.gamma" => t.gamma = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.weight_decay" => t.weight_decay = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.warmup" => t.warmup = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.shots" => t.shots = parse_num(key, v)?,
            "train.roi_batch" => t.roi_batch = parse_num(key, v)?,
            "train.roi_positive_fraction" => t.roi_positive_fraction = parse_num(key, v)?,
            "train.pseudo_label_start" => t.pseudo_label_start = parse_num(key, v)?,
            "train.max_grad_norm" => t.max_grad_norm = parse_num(key, v)?,
            "train.schedule" => {
                let keep_seed = t.seed;
                *t = match v {
                    "desk" => TrainConfig::default(),
                    "full" => TrainConfig::full_scale(),
                    _ => return Err(Error::Config(format!("{key}: expected desk or full, got {v:?}"))),
                };
                t.seed = keep_seed;
            }
            "ablation.ss_rpn" => m.rpn.enabled = parse_bool(key, v)?,
            "ablation.pixel_contrast" => m.pixel_contrast = parse_bool(key, v)?,
            "ablation.regressor" => {
                m.regressor = match v {
                    "semi_explicit" => RegressorKind::SemiExplicit,
                    "plain" => RegressorKind::Plain,
                    _ => return Err(Error::Config(format!("{key}: expected semi_explicit or plain, got {v:?}"))),
                }
            }
            "ablation.classifier" => {
                m.classifier = match v {
                    "dynamic" => ClassifierMode::Dynamic,
                    "comparison" => ClassifierMode::Comparison,
                    "distance" => ClassifierMode::Distance,
                    "multi" => ClassifierMode::Multi,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected dynamic, comparison, distance or multi, got {v:?}"
                        )))
                    }
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        vec![
            ("data.train", path(&self.data_train)),
            ("data.test", path(&self.data_test)),
            ("data.split", self.data_split.clone()),
            ("model.seed", self.model_seed.to_string()),
            ("model.base_categories", join(&m.base_categories)),
            ("backbone.channels", join(&m.backbone.channels)),
            ("backbone.strides", join(&m.backbone.strides)),
            ("rpn.tau", m.rpn.tau.to_string()),
            ("rpn.neg_iou", m.rpn.neg_iou.to_string()),
            ("rpn.pos_iou", m.rpn.pos_iou.to_string()),
            ("rpn.caps", join(&m.rpn.caps)),
            ("rpn.anchor_scales", join(&m.rpn.anchor_scales)),
            ("rpn.anchor_ratios", join(&m.rpn.anchor_ratios)),
            ("rpn.pre_nms_top_n", m.rpn.pre_nms_top_n.to_string()),
            ("rpn.post_nms_top_n", m.rpn.post_nms_top_n.to_string()),
            ("rpn.nms_threshold", m.rpn.proposal_nms_threshold.to_string()),
            ("rpn.min_proposal_size", m.rpn.min_proposal_size.to_string()),
            ("rpn.head_channels", m.rpn.head_channels.to_string()),
            ("heads.alpha", m.heads.alpha.to_string()),
            ("heads.lambda", m.heads.lambda.to_string()),
            ("heads.score_threshold", m.heads.score_threshold.to_string()),
            ("heads.roi_pos_iou", m.heads.roi_pos_iou.to_string()),
            ("heads.nms_threshold", m.heads.nms_threshold.to_string()),
            ("heads.max_detections", m.heads.max_detections.to_string()),
            ("heads.roi_size", m.heads.roi_size.to_string()),
            ("heads.comparison_hidden", m.heads.comparison_hidden.to_string()),
            ("heads.regressor_hidden", m.heads.regressor_hidden.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.milestones", join(&t.milestones)),
            ("train.gamma", t.gamma.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.shots", t.shots.to_string()),
            ("train.roi_batch", t.roi_batch.to_string()),
            ("train.roi_positive_fraction", t.roi_positive_fraction.to_string()),
            ("train.pseudo_label_start", t.pseudo_label_start.to_string()),
            ("train.max_grad_norm", t.max_grad_norm.to_string()),
            ("ablation.ss_rpn", on_off(m.rpn.enabled)),
            ("ablation.pixel_contrast", on_off(m.pixel_contrast)),
            (
                "ablation.regressor",
                match m.regressor {
                    RegressorKind::SemiExplicit => "semi_explicit".into(),
                    RegressorKind::Plain => "plain".into(),
                },
            ),
            ("ablation.classifier", m.classifier.name().into()),
        ]
    }

    /// Resolved configuration as `key = value` lines; parses back to itself.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment. A key may appear
    /// only once per file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !self.model.pixel_contrast
            && self.explicit.contains("heads.alpha")
            && self.model.heads.alpha != 1.0
        {
            return Err(Error::Config(
                "ablation.pixel_contrast = off compares global features only (alpha = 1); \
                 it conflicts with heads.alpha set to another value"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Shapes generator settings under `shapes.*` keys.
pub fn set_shapes_key(spec: &mut ShapesSpec, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    let kinds = |v: &str| -> Result<Vec<ShapeKind>> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| ShapeKind::parse(s.trim())).collect()
    };
    match key {
        "shapes.classes" => spec.classes = kinds(v)?,
        "shapes.novel" => spec.novel = kinds(v)?,
        "shapes.drawn" => spec.drawn = kinds(v)?,
        "shapes.num_images" => spec.num_images = parse_num(key, v)?,
        "shapes.image_size" => spec.image_size = parse_num(key, v)?,
        "shapes.min_instances" => spec.min_instances = parse_num(key, v)?,
        "shapes.max_instances" => spec.max_instances = parse_num(key, v)?,
        "shapes.min_size" => spec.min_size = parse_num(key, v)?,
        "shapes.max_size" => spec.max_size = parse_num(key, v)?,
        "shapes.noise" => spec.noise = parse_num(key, v)?,
        "shapes.first_image_id" => spec.first_image_id = parse_num(key, v)?,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// support directories

/// `supports.json` inside a support directory. Image paths are relative to
/// the directory; boxes are COCO `[x, y, w, h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportManifest {
    pub categories: Vec<SupportCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportCategory {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    pub instances: Vec<SupportInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportInstance {
    pub image: String,
    pub bbox: [f64; 4],
}

pub const SUPPORT_MANIFEST: &str = "supports.json";

/// Reads a support directory into support sets. Image ids are assigned in
/// manifest order, one per distinct file.
pub fn read_support_dir(dir: &Path) -> Result<(Vec<SupportSet>, DiskImages)> {
    let path = dir.join(SUPPORT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SupportManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    let mut ids: Vec<String> = Vec::new();
    let mut sets = Vec::new();
    for c in &manifest.categories {
        if c.instances.is_empty() {
            return Err(Error::Empty(format!("support category {} has no instances", c.id)));
        }
        let mut items = Vec::new();
        for (i, inst) in c.instances.iter().enumerate() {
            let id = match ids.iter().position(|x| x == &inst.image) {
                Some(p) => p,
                None => {
                    ids.push(inst.image.clone());
                    ids.len() - 1
                }
            } as u64;
            items.push(SupportItem {
                image_id: id,
                file_name: inst.image.clone(),
                annotation_id: i as u64,
                bbox: BBox::from_xywh(inst.bbox[0], inst.bbox[1], inst.bbox[2], inst.bbox[3])?,
            });
        }
        sets.push(SupportSet { category: c.id, items });
    }
    if sets.is_empty() {
        return Err(Error::Empty(format!("{} lists no categories", path.display())));
    }
    Ok((sets, DiskImages { root: dir.to_path_buf() }))
}

pub fn write_support_dir(dir: &Path, sets: &[SupportSet], image_prefix: &str, names: &dyn Fn(u32) -> String) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SupportManifest {
        categories: sets
            .iter()
            .map(|s| SupportCategory {
                id: s.category,
                name: names(s.category),
                instances: s
                    .items
                    .iter()
                    .map(|it| SupportInstance {
                        image: format!("{image_prefix}{}", it.file_name),
                        bbox: it.bbox.to_xywh(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let path = dir.join(SUPPORT_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// commands

#[derive(Debug, Parser)]
#[command(name = "irfsod", version, about = "Few-shot object detection without fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Detect every novel category over the whole test set once.
    Onetime,
    /// Repeated N-way K-shot episodes with a 95% interval.
    Meta,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the base categories of `data.train`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set heads.alpha=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Newline-delimited JSON loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print a progress line every this many iterations (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Detect support categories in images; prints COCO results JSON.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `supports.json` and the images it names.
        #[arg(long)]
        support_dir: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate novel-category detection on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory with `annotations.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        protocol: Protocol,
        #[arg(long, default_value_t = 2)]
        way: usize,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Detections (onetime) and metrics are written here as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render a synthetic shapes dataset with COCO annotations.
    MakeShapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override a generator key, e.g. `--set shapes.num_images=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write `supports/` with this many instances per novel category.
        #[arg(long)]
        support_shots: Option<usize>,
    },
}

fn load_dataset(dir: &Path, split_kind: &str, view: SplitView) -> Result<(DatasetSplit, DiskImages)> {
    let coco = CocoFile::read(&dir.join("annotations.json"))?;
    let spec = match split_kind {
        "coco_20_novel" => SplitSpec::coco_20_novel(view),
        _ => {
            let meta = coco.fewshot_split.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "{} has no fewshot_split metadata; set data.split = coco_20_novel",
                    dir.display()
                ))
            })?;
            SplitSpec::from_meta(meta, view)?
        }
    };
    Ok((split_from_coco(&coco, &spec)?, DiskImages { root: dir.to_path_buf() }))
}

fn cmd_train(
    config: Option<&Path>,
    overrides: &[String],
    checkpoint: &Path,
    log: Option<&Path>,
    progress: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    let _ = write!(out, "{}", cfg.to_text());
    let dir = cfg
        .data_train
        .clone()
        .ok_or_else(|| Error::Config("data.train is not set".into()))?;
    let (split, images) = load_dataset(&dir, &cfg.data_split, SplitView::Base)?;
    let mut model_cfg = cfg.model.clone();
    if !cfg.explicit.contains("model.base_categories") {
        model_cfg.base_categories = split.base_categories.iter().copied().collect();
    }
    let mut model = Detector::new(model_cfg, cfg.model_seed)?;
    let start = Instant::now();
    let outcome = train(&mut model, &split, &images, &cfg.train, |r| {
        if progress > 0 && (r.iteration + 1) % progress == 0 {
            eprintln!(
                "iter {} total {:.4} rpn {:.4} cls {:.4} reg {:.4} lr {:.2e}",
                r.iteration + 1,
                r.total,
                r.l_rpn,
                r.l_cls,
                r.l_reg,
                r.lr
            );
        }
    })?;
    save_checkpoint(&model, Some(&cfg.train), checkpoint)?;
    if let Some(p) = log {
        std::fs::write(p, log_to_ndjson(&outcome.log)).map_err(|e| Error::io(p, e))?;
    }
    eprintln!(
        "trained {} iterations in {:.1}s ({} images skipped); checkpoint {}",
        cfg.train.iterations,
        start.elapsed().as_secs_f64(),
        outcome.skipped,
        checkpoint.display()
    );
    Ok(())
}

fn cmd_detect(checkpoint: &Path, support_dir: &Path, output: Option<&Path>, images: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let (sets, support_images) = read_support_dir(support_dir)?;
    let start = Instant::now();
    let feats = support_features(&model, &sets, &support_images)?;
    let mut dets = Vec::new();
    for (i, path) in images.iter().enumerate() {
        let img = image_to_tensor(&read_image(path)?);
        for d in detect(&model, &img, &feats)? {
            dets.push(crate::eval::ImageDetection {
                image_id: i as u64 + 1,
                detection: d,
            });
        }
        eprintln!("image_id {} = {}", i + 1, path.display());
    }
    eprintln!(
        "{} detections on {} images in {:.3}s (no fine-tuning)",
        dets.len(),
        images.len(),
        start.elapsed().as_secs_f64()
    );
    let json = serde_json::to_string_pretty(&to_coco_results(&dets)).expect("results serialize");
    match output {
        Some(p) => std::fs::write(p, json + "\n").map_err(|e| Error::io(p, e))?,
        None => {
            let _ = writeln!(out, "{json}");
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    protocol: &'a str,
    result: &'a EvalResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    detections: Option<Vec<crate::eval::CocoResult>>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    protocol: Protocol,
    way: usize,
    shots: usize,
    episodes: usize,
    queries: usize,
    seed: u64,
    json: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    if shots == 0 || way == 0 || queries == 0 || episodes == 0 {
        return Err(Error::Config("way, shots, episodes and queries must be positive".into()));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let (split, images) = load_dataset(data, "metadata", SplitView::Novel)
        .or_else(|_| load_dataset(data, "coco_20_novel", SplitView::Novel))?;
    let before = model.param_digest();
    let (result, dets, name) = match protocol {
        Protocol::Onetime => {
            let cats: Vec<u32> = split.novel_categories.iter().copied().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sets = sample_support_sets(&split, &cats, shots, &mut rng)?;
            // support images are not scored
            let used: BTreeSet<u64> = sets.iter().flat_map(|s| s.items.iter().map(|i| i.image_id)).collect();
            let mut test = split.clone();
            test.records.retain(|r| !used.contains(&r.id));
            let (r, d) = one_time_protocol(&model, &sets, &test, &images)?;
            (r, Some(to_coco_results(&d)), "onetime")
        }
        Protocol::Meta => {
            let r = meta_testing(&model, &split, way, shots, episodes, queries, seed, &images)?;
            (r.summary, None, "meta")
        }
    };
    if model.param_digest() != before {
        return Err(Error::Numerical("parameters changed during evaluation".into()));
    }
    let _ = writeln!(out, "protocol {name}");
    let _ = write!(out, "{}", result.to_text());
    if let Some(p) = json {
        let report = EvalReport {
            protocol: name,
            result: &result,
            detections: dets,
        };
        std::fs::write(p, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn cmd_make_shapes(out_dir: &Path, seed: u64, overrides: &[String], support_shots: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let mut spec = ShapesSpec::default();
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        set_shapes_key(&mut spec, k.trim(), v)?;
    }
    let ds = generate_shapes_dataset(&spec, seed)?;
    ds.write(out_dir)?;
    if let Some(k) = support_shots {
        let split = ds.split(SplitView::Novel)?;
        let cats: Vec<u32> = split.novel_categories.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sets = sample_support_sets_excluding(&split, &cats, k, &Default::default(), &mut rng)?;
        let names = |c: u32| split.category_names.get(&c).cloned().unwrap_or_default();
        write_support_dir(&out_dir.join("supports"), &sets, "../", &names)?;
    }
    let _ = writeln!(
        out,
        "wrote {} images, {} annotations to {}",
        ds.coco.images.len(),
        ds.coco.annotations.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            checkpoint,
            log,
            progress,
        } => cmd_train(config.as_deref(), &overrides, &checkpoint, log.as_deref(), progress, out),
        Command::Detect {
            checkpoint,
            support_dir,
            output,
            images,
        } => cmd_detect(&checkpoint, &support_dir, output.as_deref(), &images, out),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            way,
            shots,
            episodes,
            queries,
            seed,
            json,
        } => cmd_eval(&checkpoint, &data, protocol, way, shots, episodes, queries, seed, json.as_deref(), out),
        Command::MakeShapes {
            out: dir,
            seed,
            overrides,
            support_shots,
        } => cmd_make_shapes(&dir, seed, &overrides, support_shots, out),
    }
}

/// Parses arguments, runs the command, and returns the process exit code:
/// 0 success, 2 usage or config error, 3 data error, 4 numerical failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
