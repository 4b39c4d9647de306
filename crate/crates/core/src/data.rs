//! COCO-format ingestion, base/novel splitting, support sampling, and the
//! synthetic shapes generator.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::Tensor3;

// ---------------------------------------------------------------------------
// COCO json

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

/// Base/novel assignment stored alongside the standard COCO sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplitMeta {
    pub base_category_ids: Vec<u32>,
    pub novel_category_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fewshot_split: Option<FewShotSplitMeta>,
}

impl CocoFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("coco file serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitView {
    /// Base annotations only: what training may see.
    Base,
    /// Novel annotations only: evaluation ground truth and support pool.
    Novel,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
    pub view: SplitView,
}

/// All 80 COCO category ids.
pub const COCO_CATEGORY_IDS: [u32; 80] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 27, 28,
    31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44, 46, 47, 48, 49, 50, 51, 52, 53, 54,
    55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65, 67, 70, 72, 73, 74, 75, 76, 77, 78, 79, 80, 81,
    82, 84, 85, 86, 87, 88, 89, 90,
];

/// The 20 COCO categories shared with PASCAL VOC, held out as novel.
pub const COCO_NOVEL_IDS: [u32; 20] = [1, 2, 3, 4, 5, 6, 7, 9, 16, 17, 18, 19, 20, 21, 44, 62, 63, 64, 67, 72];

impl SplitSpec {
    pub fn new(base: Vec<u32>, novel: Vec<u32>, view: SplitView) -> Result<Self> {
        let b: HashSet<u32> = base.iter().copied().collect();
        if let Some(c) = novel.iter().find(|c| b.contains(c)) {
            return Err(Error::Config(format!("category {c} is both base and novel")));
        }
        Ok(SplitSpec { base, novel, view })
    }

    /// 60 base / 20 novel COCO split.
    pub fn coco_20_novel(view: SplitView) -> Self {
        let novel: Vec<u32> = COCO_NOVEL_IDS.to_vec();
        let base = COCO_CATEGORY_IDS
            .iter()
            .copied()
            .filter(|c| !novel.contains(c))
            .collect();
        SplitSpec { base, novel, view }
    }

    pub fn from_meta(meta: &FewShotSplitMeta, view: SplitView) -> Result<Self> {
        Self::new(
            meta.base_category_ids.clone(),
            meta.novel_category_ids.clone(),
            view,
        )
    }

    fn visible(&self) -> HashSet<u32> {
        match self.view {
            SplitView::Base => self.base.iter().copied().collect(),
            SplitView::Novel => self.novel.iter().copied().collect(),
            SplitView::All => self.base.iter().chain(&self.novel).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub category: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    pub fn categories(&self) -> BTreeSet<u32> {
        self.annotations.iter().map(|a| a.category).collect()
    }

    pub fn boxes_of(&self, category: u32) -> Vec<BBox> {
        self.annotations
            .iter()
            .filter(|a| a.category == category)
            .map(|a| a.bbox)
            .collect()
    }
}

/// Records restricted to the annotations visible under one view of a
/// base/novel split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub base_categories: BTreeSet<u32>,
    pub novel_categories: BTreeSet<u32>,
    pub category_names: BTreeMap<u32, String>,
    pub view: SplitView,
    pub records: Vec<ImageRecord>,
}

impl DatasetSplit {
    pub fn record(&self, image_id: u64) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == image_id)
    }

    /// `(record index, annotation index)` of every instance of `category`.
    pub fn instances_of(&self, category: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ri, r) in self.records.iter().enumerate() {
            for (ai, a) in r.annotations.iter().enumerate() {
                if a.category == category {
                    out.push((ri, ai));
                }
            }
        }
        out
    }

    /// The same images re-filtered to a stricter view.
    pub fn restrict(&self, view: SplitView) -> DatasetSplit {
        let keep: HashSet<u32> = match view {
            SplitView::Base => self.base_categories.iter().copied().collect(),
            SplitView::Novel => self.novel_categories.iter().copied().collect(),
            SplitView::All => self
                .base_categories
                .iter()
                .chain(&self.novel_categories)
                .copied()
                .collect(),
        };
        let records = self
            .records
            .iter()
            .map(|r| ImageRecord {
                annotations: r
                    .annotations
                    .iter()
                    .filter(|a| keep.contains(&a.category))
                    .cloned()
                    .collect(),
                ..r.clone()
            })
            .collect();
        DatasetSplit {
            view,
            records,
            ..self.clone()
        }
    }
}

/// Converts parsed COCO content into a split. Crowd annotations and
/// annotations outside the view are dropped; boxes become corner form.
pub fn split_from_coco(coco: &CocoFile, spec: &SplitSpec) -> Result<DatasetSplit> {
    let known: HashSet<u32> = coco.categories.iter().map(|c| c.id).collect();
    for c in spec.base.iter().chain(&spec.novel) {
        if !known.contains(c) {
            return Err(Error::Data(format!("split names unknown category id {c}")));
        }
    }
    let visible = spec.visible();
    let mut by_image: HashMap<u64, Vec<Annotation>> = HashMap::new();
    for a in &coco.annotations {
        if !known.contains(&a.category_id) {
            return Err(Error::Data(format!(
                "annotation {} has unknown category id {}",
                a.id, a.category_id
            )));
        }
        if a.iscrowd != 0 || !visible.contains(&a.category_id) {
            continue;
        }
        let [x, y, w, h] = a.bbox;
        let Ok(bbox) = BBox::from_xywh(x, y, w, h) else {
            continue;
        };
        by_image.entry(a.image_id).or_default().push(Annotation {
            id: a.id,
            category: a.category_id,
            bbox,
        });
    }
    let image_ids: HashSet<u64> = coco.images.iter().map(|i| i.id).collect();
    if let Some(orphan) = by_image.keys().find(|id| !image_ids.contains(id)) {
        return Err(Error::Data(format!("annotation refers to unknown image {orphan}")));
    }
    let records = coco
        .images
        .iter()
        .map(|img| ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            annotations: by_image.remove(&img.id).unwrap_or_default(),
        })
        .collect();
    Ok(DatasetSplit {
        base_categories: spec.base.iter().copied().collect(),
        novel_categories: spec.novel.iter().copied().collect(),
        category_names: coco.categories.iter().map(|c| (c.id, c.name.clone())).collect(),
        view: spec.view,
        records,
    })
}

pub fn load_coco_annotations(path: &Path, spec: &SplitSpec) -> Result<DatasetSplit> {
    split_from_coco(&CocoFile::read(path)?, spec)
}

// ---------------------------------------------------------------------------
// support sets

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub image_id: u64,
    pub file_name: String,
    pub annotation_id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub category: u32,
    pub items: Vec<SupportItem>,
}

impl SupportSet {
    pub fn k(&self) -> usize {
        self.items.len()
    }
}

/// Draws `k` distinct instances of each category uniformly at random,
/// skipping instances that live in `exclude_images`.
pub fn sample_support_sets_excluding<R: Rng>(
    split: &DatasetSplit,
    categories: &[u32],
    k: usize,
    exclude_images: &HashSet<u64>,
    rng: &mut R,
) -> Result<Vec<SupportSet>> {
    if k == 0 {
        return Err(Error::Config("support shots must be at least 1".into()));
    }
    categories
        .iter()
        .map(|&c| {
            let pool: Vec<(usize, usize)> = split
                .instances_of(c)
                .into_iter()
                .filter(|&(ri, _)| !exclude_images.contains(&split.records[ri].id))
                .collect();
            if pool.len() < k {
                return Err(Error::Data(format!(
                    "category {c} has {} instances, {k} needed",
                    pool.len()
                )));
            }
            let mut picks: Vec<usize> = sample(rng, pool.len(), k).into_vec();
            picks.sort_unstable();
            let items = picks
                .into_iter()
                .map(|p| {
                    let (ri, ai) = pool[p];
                    let r = &split.records[ri];
                    SupportItem {
                        image_id: r.id,
                        file_name: r.file_name.clone(),
                        annotation_id: r.annotations[ai].id,
                        bbox: r.annotations[ai].bbox,
                    }
                })
                .collect();
            Ok(SupportSet { category: c, items })
        })
        .collect()
}

pub fn sample_support_sets<R: Rng>(
    split: &DatasetSplit,
    categories: &[u32],
    k: usize,
    rng: &mut R,
) -> Result<Vec<SupportSet>> {
    sample_support_sets_excluding(split, categories, k, &HashSet::new(), rng)
}

// ---------------------------------------------------------------------------
// pixels

/// Maps 8-bit RGB to a `3 x H x W` tensor with values in `[-0.5, 0.5]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor3 {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor3::zeros(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.idx(c, y as usize, x as usize);
            t.data[i] = p.0[c] as f64 / 255.0 - 0.5;
        }
    }
    t
}

pub trait ImageSource {
    fn load(&self, image_id: u64, file_name: &str) -> Result<Tensor3>;

    fn load_record(&self, record: &ImageRecord) -> Result<Tensor3> {
        self.load(record.id, &record.file_name)
    }
}

/// Decoded images held in memory, keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct MemoryImages {
    tensors: HashMap<u64, Tensor3>,
}

impl MemoryImages {
    pub fn insert(&mut self, id: u64, img: &RgbImage) {
        self.tensors.insert(id, image_to_tensor(img));
    }

    pub fn merge(&mut self, other: MemoryImages) {
        self.tensors.extend(other.tensors);
    }
}

impl ImageSource for MemoryImages {
    fn load(&self, image_id: u64, _file_name: &str) -> Result<Tensor3> {
        self.tensors
            .get(&image_id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("image {image_id} not in memory")))
    }
}

/// Images decoded from files relative to a root directory.
#[derive(Debug, Clone)]
pub struct DiskImages {
    pub root: PathBuf,
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

impl ImageSource for DiskImages {
    fn load(&self, _image_id: u64, file_name: &str) -> Result<Tensor3> {
        Ok(image_to_tensor(&read_image(&self.root.join(file_name))?))
    }
}

// ---------------------------------------------------------------------------
// synthetic shapes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "circle" => ShapeKind::Circle,
            "square" => ShapeKind::Square,
            "triangle" => ShapeKind::Triangle,
            "star" => ShapeKind::Star,
            "cross" => ShapeKind::Cross,
            other => return Err(Error::Config(format!("unknown shape class '{other}'"))),
        })
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of side `s`.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let h = 0.5 * s;
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= h * h,
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Triangle => dy >= -h && dy <= h && dx.abs() <= 0.5 * (dy + h),
            ShapeKind::Cross => {
                let arm = s / 6.0;
                (dx.abs() <= arm && dy.abs() <= h) || (dy.abs() <= arm && dx.abs() <= h)
            }
            ShapeKind::Star => {
                let verts: Vec<(f64, f64)> = (0..10)
                    .map(|i| {
                        let rad = if i % 2 == 0 { h } else { 0.42 * h };
                        let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                        (rad * a.cos(), rad * a.sin())
                    })
                    .collect();
                point_in_polygon(dx, dy, &verts)
            }
        }
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesSpec {
    pub classes: Vec<ShapeKind>,
    pub novel: Vec<ShapeKind>,
    pub num_images: usize,
    pub image_size: u32,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Per-pixel background noise amplitude in 8-bit levels.
    pub noise: f64,
    pub first_image_id: u64,
    /// Classes actually drawn; empty draws from all of `classes`. Category
    /// ids always follow `classes`, so a base-only training set and a full
    /// test set share ids.
    #[serde(default)]
    pub drawn: Vec<ShapeKind>,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            classes: vec![
                ShapeKind::Circle,
                ShapeKind::Square,
                ShapeKind::Triangle,
                ShapeKind::Star,
                ShapeKind::Cross,
            ],
            novel: vec![ShapeKind::Star, ShapeKind::Cross],
            num_images: 300,
            image_size: 64,
            min_instances: 1,
            max_instances: 3,
            min_size: 12.0,
            max_size: 36.0,
            noise: 12.0,
            first_image_id: 1,
            drawn: Vec::new(),
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes.is_empty() {
            return bad("shapes.classes must be nonempty");
        }
        let distinct: HashSet<_> = self.classes.iter().collect();
        if distinct.len() != self.classes.len() {
            return bad("shapes.classes contains duplicates");
        }
        if self.novel.iter().any(|n| !self.classes.contains(n)) {
            return bad("shapes.novel must be a subset of shapes.classes");
        }
        if self.drawn.iter().any(|n| !self.classes.contains(n)) {
            return bad("shapes.drawn must be a subset of shapes.classes");
        }
        if self.min_instances == 0 || self.min_instances > self.max_instances {
            return bad("shapes instance bounds must satisfy 1 <= min <= max");
        }
        if !(self.min_size >= 4.0 && self.min_size <= self.max_size) {
            return bad("shapes sizes must satisfy 4 <= min_size <= max_size");
        }
        if self.max_size + 2.0 > self.image_size as f64 {
            return bad("shapes.max_size must fit inside the image");
        }
        if self.num_images == 0 {
            return bad("shapes.num_images must be positive");
        }
        Ok(())
    }

    pub fn category_id(&self, kind: ShapeKind) -> u32 {
        self.classes.iter().position(|&k| k == kind).expect("class in spec") as u32 + 1
    }

    pub fn split_meta(&self) -> FewShotSplitMeta {
        let novel: Vec<u32> = self.novel.iter().map(|&k| self.category_id(k)).collect();
        FewShotSplitMeta {
            base_category_ids: self
                .classes
                .iter()
                .map(|&k| self.category_id(k))
                .filter(|c| !novel.contains(c))
                .collect(),
            novel_category_ids: novel,
        }
    }
}

/// A generated dataset: COCO annotations plus rendered pixels.
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub coco: CocoFile,
    pub images: Vec<(u64, RgbImage)>,
}

impl ShapesDataset {
    pub fn split(&self, view: SplitView) -> Result<DatasetSplit> {
        let meta = self.coco.fewshot_split.as_ref().expect("shapes carry split metadata");
        split_from_coco(&self.coco, &SplitSpec::from_meta(meta, view)?)
    }

    pub fn memory_images(&self) -> MemoryImages {
        let mut m = MemoryImages::default();
        for (id, img) in &self.images {
            m.insert(*id, img);
        }
        m
    }

    /// Writes `annotations.json` and `images/*.png` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for ((_, img), meta) in self.images.iter().zip(&self.coco.images) {
            let path = dir.join(&meta.file_name);
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        self.coco.write(&dir.join("annotations.json"))
    }
}

fn luminance(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

/// Renders images of non-overlapping shapes on noisy backgrounds. GT boxes
/// are the tight extents of the rendered pixels.
pub fn generate_shapes_dataset(spec: &ShapesSpec, seed: u64) -> Result<ShapesDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = spec.image_size;
    let mut images = Vec::with_capacity(spec.num_images);
    let mut coco_images = Vec::with_capacity(spec.num_images);
    let mut annotations = Vec::new();
    let mut next_ann = spec.first_image_id * 100 + 1;
    let pool = if spec.drawn.is_empty() { &spec.classes } else { &spec.drawn };
    for n in 0..spec.num_images {
        let id = spec.first_image_id + n as u64;
        let bg = rng.gen_range(30.0..200.0);
        let mut img = RgbImage::new(size, size);
        for p in img.pixels_mut() {
            let v = (bg + rng.gen_range(-spec.noise..=spec.noise)).clamp(0.0, 255.0) as u8;
            let tint = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            p.0 = [0, 1, 2].map(|c| (v as f64 + tint[c]).clamp(0.0, 255.0) as u8);
        }
        let want = rng.gen_range(spec.min_instances..=spec.max_instances);
        let mut placed: Vec<BBox> = Vec::new();
        for _ in 0..want {
            let kind = pool[rng.gen_range(0..pool.len())];
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > 60 {
                    break;
                }
                let s = rng.gen_range(spec.min_size..=spec.max_size);
                let lo = 0.5 * s + 1.0;
                let hi = size as f64 - 0.5 * s - 1.0;
                let (cx, cy) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
                let rough = BBox::new(cx - 0.5 * s - 2.0, cy - 0.5 * s - 2.0, cx + 0.5 * s + 2.0, cy + 0.5 * s + 2.0)?;
                if placed.iter().any(|p| p.intersection_area(&rough) > 0.0) {
                    continue;
                }
                let color = loop {
                    let c = [rng.gen::<u8>(), rng.gen::<u8>(), rng.gen::<u8>()];
                    if (luminance(c) - bg).abs() > 60.0 {
                        break c;
                    }
                };
                let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
                let xs = (rough.x1.floor().max(0.0) as u32)..(rough.x2.ceil().min(size as f64) as u32);
                for y in (rough.y1.floor().max(0.0) as u32)..(rough.y2.ceil().min(size as f64) as u32) {
                    for x in xs.clone() {
                        if kind.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, s) {
                            img.put_pixel(x, y, image::Rgb(color));
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x);
                            y1 = y1.max(y);
                        }
                    }
                }
                if x0 == u32::MAX {
                    continue;
                }
                let tight = BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)?;
                placed.push(rough);
                annotations.push(CocoAnnotation {
                    id: next_ann,
                    image_id: id,
                    category_id: spec.category_id(kind),
                    bbox: tight.to_xywh(),
                    area: tight.area(),
                    iscrowd: 0,
                });
                next_ann += 1;
                break;
            }
        }
        coco_images.push(CocoImage {
            id,
            file_name: format!("images/{id:06}.png"),
            width: size,
            height: size,
        });
        images.push((id, img));
    }
    let categories = spec
        .classes
        .iter()
        .map(|&k| CocoCategory {
            id: spec.category_id(k),
            name: k.name().to_string(),
        })
        .collect();
    Ok(ShapesDataset {
        coco: CocoFile {
            images: coco_images,
            annotations,
            categories,
            fewshot_split: Some(spec.split_meta()),
        },
        images,
    })
}
