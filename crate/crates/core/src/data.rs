//! Dataset schema, validation, proposal pairing, image rendering and the
//! synthetic scene generator.
//!
//! A dataset is one JSON document:
//!
//! ```json
//! { "version": 1,
//!   "categories": { "objects": [{"id": 1, "name": "red"}],
//!                   "actions": [{"id": 0, "name": "hold"}] },
//!   "images":  [{"id": 0, "width": 64, "height": 64,
//!                "source": {"kind": "procedural", "background": 0.1}}],
//!   "humans":  [{"id": 0, "image_id": 0, "box": [x1, y1, x2, y2],
//!                "score": 0.9, "keypoints": [[x, y, conf], ...]}],
//!   "objects": [{"id": 0, "image_id": 0, "box": [...], "class": 1, "score": 0.8}],
//!   "interactions": [{"human_id": 0, "object_id": 0, "actions": [0]}] }
//! ```
//!
//! `box` is the annotated box; an optional `detection_box` holds the
//! detector's (possibly perturbed) box and is what proposals are built from.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, joint_index, BBox, GtPair, HoiProposal, Joint, Pose, NUM_JOINTS};
use crate::scm::COCO_SKELETON;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported dataset version {found} (expected {DATASET_VERSION})")]
    Version { found: u32 },
    #[error("dataset failed validation:\n{}", format_issues(.0))]
    Schema(Vec<SchemaIssue>),
    #[error("unknown image id {0}")]
    UnknownImage(u64),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("image decode failed: {0}")]
    Image(String),
}

fn format_issues(issues: &[SchemaIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {}: {}", i.record, i.message))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One validation failure, naming the offending record.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaIssue {
    pub record: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Categories {
    /// Object classes, ids `1..=C`.
    pub objects: Vec<Category>,
    /// Action classes, ids `0..A`.
    pub actions: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    /// Rendered from the annotations themselves.
    Procedural { background: f64 },
    /// PNG file, relative paths resolved against the dataset file.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub source: ImageSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanRecord {
    pub id: u64,
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_box: Option<[f64; 4]>,
    pub score: f64,
    /// `[x, y, confidence]` per joint, COCO order.
    pub keypoints: Vec<[f64; 3]>,
}

impl HumanRecord {
    pub fn pose(&self) -> Result<Pose, crate::DomainError> {
        Pose::new(
            self.keypoints
                .iter()
                .map(|k| Joint {
                    x: k[0],
                    y: k[1],
                    confidence: Some(k[2]),
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: u64,
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection_box: Option<[f64; 4]>,
    pub class: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub human_id: u64,
    pub object_id: u64,
    pub actions: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub categories: Categories,
    pub images: Vec<ImageRecord>,
    pub humans: Vec<HumanRecord>,
    pub objects: Vec<ObjectRecord>,
    pub interactions: Vec<InteractionRecord>,
}

impl Default for Dataset {
    fn default() -> Self {
        Dataset {
            version: DATASET_VERSION,
            categories: Categories::default(),
            images: Vec::new(),
            humans: Vec::new(),
            objects: Vec::new(),
            interactions: Vec::new(),
        }
    }
}

fn to_box(v: &[f64; 4]) -> BBox {
    BBox {
        x1: v[0],
        y1: v[1],
        x2: v[2],
        y2: v[3],
    }
}

/// Proposal together with the records it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedProposal {
    pub image_id: u64,
    pub human_id: u64,
    pub object_id: u64,
    pub proposal: HoiProposal,
}

/// Annotated pair with its action set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub human_id: u64,
    pub object_id: u64,
    pub pair: GtPair,
    pub object_class: u32,
    pub actions: Vec<u32>,
}

impl Dataset {
    pub fn num_actions(&self) -> usize {
        self.categories.actions.len()
    }

    pub fn num_object_classes(&self) -> u32 {
        self.categories
            .objects
            .iter()
            .map(|c| c.id)
            .max()
            .unwrap_or(0)
    }

    pub fn image(&self, id: u64) -> Result<&ImageRecord, DataError> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or(DataError::UnknownImage(id))
    }

    /// Checks every record and reports all failures at once.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.version != DATASET_VERSION {
            return Err(DataError::Version {
                found: self.version,
            });
        }
        let mut issues = Issues::default();

        let mut images = HashMap::new();
        for img in &self.images {
            if images.insert(img.id, img).is_some() {
                issues.push(format!("image {}", img.id), "duplicate id");
            }
            if img.width == 0 || img.height == 0 {
                issues.push(format!("image {}", img.id), "zero extent");
            }
        }
        let object_classes: HashSet<u32> = self.categories.objects.iter().map(|c| c.id).collect();
        let num_actions = self.num_actions() as u32;
        for (i, a) in self.categories.actions.iter().enumerate() {
            if a.id != i as u32 {
                issues.push(
                    format!("action category {}", a.name),
                    format!("id {} should be {i}", a.id),
                );
            }
        }

        let mut humans = HashSet::new();
        for h in &self.humans {
            let rec = format!("human {}", h.id);
            if !humans.insert(h.id) {
                issues.push(&rec, "duplicate id");
            }
            let img = images.get(&h.image_id).copied();
            if img.is_none() {
                issues.push(&rec, format!("unknown image {}", h.image_id));
            }
            issues.check_box(&rec, "box", &h.bbox, img);
            if let Some(d) = &h.detection_box {
                issues.check_box(&rec, "detection_box", d, img);
            }
            if h.keypoints.len() != NUM_JOINTS {
                issues.push(
                    &rec,
                    format!("has {} keypoints, expected {NUM_JOINTS}", h.keypoints.len()),
                );
            }
            if h.keypoints.iter().flatten().any(|v| !v.is_finite()) {
                issues.push(&rec, "non-finite keypoint");
            }
            if !(0.0..=1.0).contains(&h.score) {
                issues.push(&rec, format!("score {} outside [0, 1]", h.score));
            }
        }
        let mut objects = HashSet::new();
        for o in &self.objects {
            let rec = format!("object {}", o.id);
            if !objects.insert(o.id) {
                issues.push(&rec, "duplicate id");
            }
            let img = images.get(&o.image_id).copied();
            if img.is_none() {
                issues.push(&rec, format!("unknown image {}", o.image_id));
            }
            issues.check_box(&rec, "box", &o.bbox, img);
            if let Some(d) = &o.detection_box {
                issues.check_box(&rec, "detection_box", d, img);
            }
            if !object_classes.contains(&o.class) {
                issues.push(&rec, format!("unknown object class {}", o.class));
            }
            if !(0.0..=1.0).contains(&o.score) {
                issues.push(&rec, format!("score {} outside [0, 1]", o.score));
            }
        }
        let human_img: HashMap<u64, u64> = self.humans.iter().map(|h| (h.id, h.image_id)).collect();
        let object_img: HashMap<u64, u64> =
            self.objects.iter().map(|o| (o.id, o.image_id)).collect();
        for (i, r) in self.interactions.iter().enumerate() {
            let rec = format!("interaction {i}");
            let hi = human_img.get(&r.human_id);
            let oi = object_img.get(&r.object_id);
            if hi.is_none() {
                issues.push(&rec, format!("unknown human {}", r.human_id));
            }
            if oi.is_none() {
                issues.push(&rec, format!("unknown object {}", r.object_id));
            }
            if let (Some(a), Some(b)) = (hi, oi) {
                if a != b {
                    issues.push(&rec, "human and object belong to different images");
                }
            }
            if let Some(a) = r.actions.iter().find(|&&a| a >= num_actions) {
                issues.push(&rec, format!("unknown action {a}"));
            }
        }
        if issues.0.is_empty() {
            Ok(())
        } else {
            Err(DataError::Schema(issues.0))
        }
    }

    /// Every human paired with every object of the image.
    pub fn pair_proposals(&self, image_id: u64) -> Result<Vec<PairedProposal>, DataError> {
        self.image(image_id)?;
        let mut out = Vec::new();
        for h in self.humans.iter().filter(|h| h.image_id == image_id) {
            let pose = h
                .pose()
                .map_err(|e| schema_issue(format!("human {}", h.id), e))?;
            for o in self.objects.iter().filter(|o| o.image_id == image_id) {
                out.push(PairedProposal {
                    image_id,
                    human_id: h.id,
                    object_id: o.id,
                    proposal: HoiProposal {
                        human: to_box(h.detection_box.as_ref().unwrap_or(&h.bbox)),
                        object: to_box(o.detection_box.as_ref().unwrap_or(&o.bbox)),
                        object_class: o.class,
                        human_score: h.score,
                        object_score: o.score,
                        pose: pose.clone(),
                    },
                });
            }
        }
        Ok(out)
    }

    /// Annotated interactions of one image, with their annotated boxes.
    pub fn ground_truth(&self, image_id: u64) -> Result<Vec<LabeledPair>, DataError> {
        self.image(image_id)?;
        let humans: HashMap<u64, &HumanRecord> = self
            .humans
            .iter()
            .filter(|h| h.image_id == image_id)
            .map(|h| (h.id, h))
            .collect();
        let objects: HashMap<u64, &ObjectRecord> = self
            .objects
            .iter()
            .filter(|o| o.image_id == image_id)
            .map(|o| (o.id, o))
            .collect();
        Ok(self
            .interactions
            .iter()
            .filter_map(|r| {
                let h = humans.get(&r.human_id)?;
                let o = objects.get(&r.object_id)?;
                Some(LabeledPair {
                    human_id: h.id,
                    object_id: o.id,
                    pair: GtPair {
                        human: to_box(&h.bbox),
                        object: to_box(&o.bbox),
                    },
                    object_class: o.class,
                    actions: r.actions.clone(),
                })
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset is always serialisable")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.version != DATASET_VERSION {
            return Err(DataError::Version {
                found: header.version,
            });
        }
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn schema_issue(record: String, e: impl std::fmt::Display) -> DataError {
    DataError::Schema(vec![SchemaIssue {
        record,
        message: e.to_string(),
    }])
}

#[derive(Default)]
struct Issues(Vec<SchemaIssue>);

impl Issues {
    fn push(&mut self, record: impl Into<String>, message: impl Into<String>) {
        self.0.push(SchemaIssue {
            record: record.into(),
            message: message.into(),
        });
    }

    fn check_box(&mut self, record: &str, what: &str, v: &[f64; 4], img: Option<&ImageRecord>) {
        let b = to_box(v);
        if let Err(e) = b.validate() {
            self.push(record, format!("{what}: {e}"));
            return;
        }
        if let Some(img) = img {
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > img.width as f64 || b.y2 > img.height as f64 {
                self.push(
                    record,
                    format!("{what} {v:?} outside image {}x{}", img.width, img.height),
                );
            }
        }
    }
}

/// Reads and validates a dataset file.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Dataset::from_json(&text)
}

pub fn pair_proposals(dataset: &Dataset, image_id: u64) -> Result<Vec<PairedProposal>, DataError> {
    dataset.pair_proposals(image_id)
}

const OBJECT_COLORS: [[f64; 3]; 6] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
];

/// Fill colour of an object class (ids start at 1).
pub fn object_color(class: u32) -> [f64; 3] {
    OBJECT_COLORS[(class.max(1) as usize - 1) % OBJECT_COLORS.len()]
}

/// Pixels of an image as an `H x W x 3` array with values in `[0, 1]`.
///
/// Procedural images are drawn from the annotations: skeleton lines and a
/// head disc per human, a class-coloured ellipse per object. File images
/// are decoded from PNG, relative paths resolved against `base_dir`.
pub fn render_image(
    ds: &Dataset,
    image_id: u64,
    base_dir: Option<&Path>,
) -> Result<Array3<f64>, DataError> {
    let img = ds.image(image_id)?;
    let (w, h) = (img.width as usize, img.height as usize);
    match &img.source {
        ImageSource::Procedural { background } => {
            let mut px = Array3::from_elem((h, w, 3), *background);
            for o in ds.objects.iter().filter(|o| o.image_id == image_id) {
                draw_ellipse(&mut px, &to_box(&o.bbox), object_color(o.class));
            }
            for hu in ds.humans.iter().filter(|hu| hu.image_id == image_id) {
                let k = &hu.keypoints;
                if k.len() != NUM_JOINTS {
                    continue;
                }
                let height = to_box(&hu.bbox).height();
                for &(a, b) in COCO_SKELETON.iter() {
                    let color = limb_color(a, b);
                    draw_segment(&mut px, (k[a][0], k[a][1]), (k[b][0], k[b][1]), 0.9, color);
                }
                draw_disc(&mut px, (k[0][0], k[0][1]), 0.06 * height, [0.9, 0.9, 0.9]);
            }
            Ok(px)
        }
        ImageSource::File { path } => {
            let p = Path::new(path);
            let full = match base_dir {
                Some(dir) if p.is_relative() => dir.join(p),
                _ => p.to_path_buf(),
            };
            let decoded = image::open(&full)
                .map_err(|e| DataError::Image(format!("{}: {e}", full.display())))?
                .to_rgb8();
            if decoded.width() != img.width || decoded.height() != img.height {
                return Err(DataError::Image(format!(
                    "{}: is {}x{}, record says {}x{}",
                    full.display(),
                    decoded.width(),
                    decoded.height(),
                    img.width,
                    img.height
                )));
            }
            Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                decoded.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            }))
        }
    }
}

// Left limbs warm, right limbs cool, trunk and face neutral.
fn limb_color(a: usize, b: usize) -> [f64; 3] {
    let side = |j: usize| {
        if j == 0 {
            0
        } else if j % 2 == 1 {
            1
        } else {
            2
        }
    };
    match (side(a), side(b)) {
        (1, 1) => [1.0, 0.6, 0.4],
        (2, 2) => [0.4, 0.6, 1.0],
        _ => [0.85, 0.85, 0.85],
    }
}

fn for_pixels_in(
    px: &mut Array3<f64>,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    mut f: impl FnMut(f64, f64) -> Option<[f64; 3]>,
) {
    let (h, w, _) = px.dim();
    let xa = x0.floor().max(0.0) as usize;
    let ya = y0.floor().max(0.0) as usize;
    let xb = (x1.ceil().max(0.0) as usize).min(w);
    let yb = (y1.ceil().max(0.0) as usize).min(h);
    for y in ya..yb {
        for x in xa..xb {
            if let Some(c) = f(x as f64 + 0.5, y as f64 + 0.5) {
                for k in 0..3 {
                    px[[y, x, k]] = c[k];
                }
            }
        }
    }
}

fn draw_segment(
    px: &mut Array3<f64>,
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
    color: [f64; 3],
) {
    let (x0, x1) = (a.0.min(b.0) - half_width, a.0.max(b.0) + half_width);
    let (y0, y1) = (a.1.min(b.1) - half_width, a.1.max(b.1) + half_width);
    for_pixels_in(px, x0, y0, x1, y1, |x, y| {
        (point_segment_distance((x, y), a, b) <= half_width).then_some(color)
    });
}

fn draw_disc(px: &mut Array3<f64>, c: (f64, f64), r: f64, color: [f64; 3]) {
    for_pixels_in(px, c.0 - r, c.1 - r, c.0 + r, c.1 + r, |x, y| {
        ((x - c.0).powi(2) + (y - c.1).powi(2) <= r * r).then_some(color)
    });
}

fn draw_ellipse(px: &mut Array3<f64>, b: &BBox, color: [f64; 3]) {
    let (cx, cy) = b.center();
    let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
    for_pixels_in(px, b.x1, b.y1, b.x2, b.y2, |x, y| {
        (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0).then_some(color)
    });
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Binds an action to the joint an object must sit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBinding {
    pub action: String,
    pub joint: String,
}

/// Recipe for a procedurally generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_images: usize,
    /// Width and height; both must be multiples of 4.
    pub image_size: [u32; 2],
    pub bindings: Vec<ActionBinding>,
    pub object_classes: Vec<String>,
    pub humans_per_image: [usize; 2],
    pub objects_per_image: [usize; 2],
    /// Figure height as a fraction of image height.
    pub human_height: [f64; 2],
    /// Object side as a fraction of human box height.
    pub object_size: [f64; 2],
    /// Labelling radius as a fraction of human box height.
    pub proximity_radius: f64,
    /// Probability that an object is placed away from every anchor joint.
    pub negative_fraction: f64,
    /// Uniform keypoint noise, in pixels.
    pub keypoint_noise: f64,
    /// Detection boxes move each side by up to this fraction of box size.
    pub box_jitter: f64,
    pub score_range: [f64; 2],
    pub background: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let bind = |a: &str, j: &str| ActionBinding {
            action: a.into(),
            joint: j.into(),
        };
        SyntheticSpec {
            seed: 0,
            num_images: 200,
            image_size: [64, 64],
            bindings: vec![
                bind("hold", "right_wrist"),
                bind("kick", "left_ankle"),
                bind("look", "nose"),
                bind("sit", "left_hip"),
            ],
            object_classes: vec!["red".into(), "green".into(), "blue".into()],
            humans_per_image: [1, 2],
            objects_per_image: [1, 3],
            human_height: [0.55, 0.75],
            object_size: [0.16, 0.22],
            proximity_radius: 0.15,
            negative_fraction: 0.25,
            keypoint_noise: 0.0,
            box_jitter: 0.0,
            score_range: [0.7, 1.0],
            background: [0.0, 0.2],
        }
    }
}

/// Limb lengths of generated figures must stay within
/// `[LIMB_MIN, LIMB_MAX]` times their nominal fraction of figure height.
pub const LIMB_MIN: f64 = 0.75;
pub const LIMB_MAX: f64 = 1.25;

/// Nominal length of each limb as a fraction of figure height.
pub const LIMBS: [(usize, usize, f64); 8] = [
    (5, 7, 0.17),
    (7, 9, 0.15),
    (6, 8, 0.17),
    (8, 10, 0.15),
    (11, 13, 0.22),
    (13, 15, 0.22),
    (12, 14, 0.22),
    (14, 16, 0.22),
];

/// Nominal distance from mid-shoulder to mid-hip as a fraction of figure
/// height; the figure height of a pose is recovered from it.
pub const TORSO: f64 = 0.32;

/// Whether every limb of a keypoint set is within the plausibility bounds,
/// measured against the pose's own torso length.
pub fn plausible_pose(keypoints: &[[f64; 3]]) -> bool {
    if keypoints.len() != NUM_JOINTS {
        return false;
    }
    let mid = |a: usize, b: usize| {
        (
            (keypoints[a][0] + keypoints[b][0]) / 2.0,
            (keypoints[a][1] + keypoints[b][1]) / 2.0,
        )
    };
    let (s, h) = (mid(5, 6), mid(11, 12));
    let height = (s.0 - h.0).hypot(s.1 - h.1) / TORSO;
    height > 0.0
        && LIMBS.iter().all(|&(a, b, frac)| {
            let d = (keypoints[a][0] - keypoints[b][0]).hypot(keypoints[a][1] - keypoints[b][1]);
            d >= LIMB_MIN * frac * height && d <= LIMB_MAX * frac * height
        })
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self, DataError> {
        let spec: SyntheticSpec =
            toml::from_str(text).map_err(|e| DataError::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn anchor_joints(&self) -> Result<Vec<usize>, DataError> {
        self.bindings
            .iter()
            .map(|b| {
                joint_index(&b.joint).ok_or_else(|| {
                    DataError::Spec(format!(
                        "action {} binds unknown joint {}",
                        b.action, b.joint
                    ))
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Spec(m.into()));
        let [w, h] = self.image_size;
        if w == 0 || h == 0 || w % 4 != 0 || h % 4 != 0 {
            return err("image_size must be positive multiples of 4");
        }
        if self.bindings.is_empty() {
            return err("at least one action binding is required");
        }
        let joints = self.anchor_joints()?;
        let unique: HashSet<_> = joints.iter().collect();
        if unique.len() != joints.len() {
            return err("two actions bind the same joint");
        }
        let names: HashSet<_> = self.bindings.iter().map(|b| &b.action).collect();
        if names.len() != self.bindings.len() {
            return err("duplicate action name");
        }
        if self.object_classes.is_empty() {
            return err("at least one object class is required");
        }
        let range_ok = |r: [f64; 2], lo: f64, hi: f64| r[0] >= lo && r[0] <= r[1] && r[1] <= hi;
        if self.humans_per_image[0] == 0 || self.humans_per_image[0] > self.humans_per_image[1] {
            return err("humans_per_image must be a range starting at 1 or more");
        }
        if self.objects_per_image[0] > self.objects_per_image[1] {
            return err("objects_per_image must be an ascending range");
        }
        if !range_ok(self.human_height, 0.1, 0.95) {
            return err("human_height must lie within [0.1, 0.95]");
        }
        if !range_ok(self.object_size, 0.01, 1.0) {
            return err("object_size must lie within (0, 1]");
        }
        if !range_ok(self.score_range, 0.0, 1.0) {
            return err("score_range must lie within [0, 1]");
        }
        if !range_ok(self.background, 0.0, 1.0) {
            return err("background must lie within [0, 1]");
        }
        if !(self.proximity_radius > 0.0) {
            return err("proximity_radius must be positive");
        }
        if !(0.0..=1.0).contains(&self.negative_fraction) {
            return err("negative_fraction must lie in [0, 1]");
        }
        if !(self.keypoint_noise >= 0.0 && self.box_jitter >= 0.0 && self.box_jitter < 0.5) {
            return err("keypoint_noise must be non-negative and box_jitter in [0, 0.5)");
        }
        Ok(())
    }
}

/// Action of a (human, object) pair under the binding rule: the anchor
/// joint nearest to the object centre wins, provided it lies within
/// `radius`.
pub fn nearest_anchor_action(
    keypoints: &[[f64; 3]],
    anchors: &[usize],
    center: (f64, f64),
    radius: f64,
) -> Option<u32> {
    let (best, dist) = anchors
        .iter()
        .enumerate()
        .map(|(a, &j)| {
            (
                a,
                (keypoints[j][0] - center.0).hypot(keypoints[j][1] - center.1),
            )
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))?;
    (dist <= radius).then_some(best as u32)
}

const PLACEMENT_TRIES: usize = 200;
const IMAGE_TRIES: usize = 50;

/// Generates a dataset of stick figures and coloured blobs whose labels
/// follow the nearest-anchor rule.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let anchors = spec.anchor_joints()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // separate stream so that the scenes do not depend on the jitter setting
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    jitter_rng.set_stream(1);
    let mut ds = Dataset {
        categories: Categories {
            objects: spec
                .object_classes
                .iter()
                .enumerate()
                .map(|(i, n)| Category {
                    id: i as u32 + 1,
                    name: n.clone(),
                })
                .collect(),
            actions: spec
                .bindings
                .iter()
                .enumerate()
                .map(|(i, b)| Category {
                    id: i as u32,
                    name: b.action.clone(),
                })
                .collect(),
        },
        ..Dataset::default()
    };
    for image_id in 0..spec.num_images as u64 {
        let scene = (0..IMAGE_TRIES)
            .find_map(|_| generate_scene(spec, &anchors, &mut rng))
            .ok_or_else(|| {
                DataError::Generation(format!("no feasible layout for image {image_id}"))
            })?;
        let background = rng.gen_range(spec.background[0]..=spec.background[1]);
        ds.images.push(ImageRecord {
            id: image_id,
            width: spec.image_size[0],
            height: spec.image_size[1],
            source: ImageSource::Procedural { background },
        });
        let first_human = ds.humans.len() as u64;
        let first_object = ds.objects.len() as u64;
        for (keypoints, bbox) in &scene.humans {
            let detection_box = jitter(spec, bbox, &mut jitter_rng);
            ds.humans.push(HumanRecord {
                id: ds.humans.len() as u64,
                image_id,
                bbox: bbox.to_array(),
                detection_box,
                score: rng.gen_range(spec.score_range[0]..=spec.score_range[1]),
                keypoints: keypoints.clone(),
            });
        }
        for (bbox, class) in &scene.objects {
            let detection_box = jitter(spec, bbox, &mut jitter_rng);
            ds.objects.push(ObjectRecord {
                id: ds.objects.len() as u64,
                image_id,
                bbox: bbox.to_array(),
                detection_box,
                class: *class,
                score: rng.gen_range(spec.score_range[0]..=spec.score_range[1]),
            });
        }
        for (hi, (keypoints, hbox)) in scene.humans.iter().enumerate() {
            let radius = spec.proximity_radius * hbox.height();
            for (oi, (obox, _)) in scene.objects.iter().enumerate() {
                if let Some(a) = nearest_anchor_action(keypoints, &anchors, obox.center(), radius) {
                    ds.interactions.push(InteractionRecord {
                        human_id: first_human + hi as u64,
                        object_id: first_object + oi as u64,
                        actions: vec![a],
                    });
                }
            }
        }
    }
    ds.validate()?;
    Ok(ds)
}

struct Scene {
    humans: Vec<(Vec<[f64; 3]>, BBox)>,
    objects: Vec<(BBox, u32)>,
}

fn jitter(spec: &SyntheticSpec, b: &BBox, rng: &mut ChaCha8Rng) -> Option<[f64; 4]> {
    if spec.box_jitter <= 0.0 {
        return None;
    }
    let (w, h) = (b.width(), b.height());
    let j = spec.box_jitter;
    let mut d = || rng.gen_range(-j..=j);
    let (iw, ih) = (spec.image_size[0] as f64, spec.image_size[1] as f64);
    let x1 = (b.x1 + d() * w).clamp(0.0, iw);
    let y1 = (b.y1 + d() * h).clamp(0.0, ih);
    let x2 = (b.x2 + d() * w).clamp(0.0, iw);
    let y2 = (b.y2 + d() * h).clamp(0.0, ih);
    // jitter below 0.5 keeps each side on its own half, so the box stays valid
    Some([x1, y1, x2, y2])
}

fn stick_figure(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<(Vec<[f64; 3]>, BBox)> {
    let (iw, ih) = (spec.image_size[0] as f64, spec.image_size[1] as f64);
    let height = rng.gen_range(spec.human_height[0]..=spec.human_height[1]) * ih;
    let cx = rng.gen_range(0.0..iw);
    let top = rng.gen_range(0.0..ih);
    let h = height;
    let mut k = vec![[0.0, 0.0, 1.0]; NUM_JOINTS];
    let put = |k: &mut Vec<[f64; 3]>, j: usize, x: f64, y: f64| k[j] = [x, y, 1.0];
    // the figure faces the viewer: its left side is on the image's right
    put(&mut k, 0, cx, top + 0.08 * h);
    put(&mut k, 1, cx + 0.03 * h, top + 0.06 * h);
    put(&mut k, 2, cx - 0.03 * h, top + 0.06 * h);
    put(&mut k, 3, cx + 0.06 * h, top + 0.07 * h);
    put(&mut k, 4, cx - 0.06 * h, top + 0.07 * h);
    put(&mut k, 5, cx + 0.12 * h, top + 0.2 * h);
    put(&mut k, 6, cx - 0.12 * h, top + 0.2 * h);
    put(&mut k, 11, cx + 0.08 * h, top + 0.52 * h);
    put(&mut k, 12, cx - 0.08 * h, top + 0.52 * h);
    // angles from straight down, positive towards the figure's own side
    let limb = |k: &mut Vec<[f64; 3]>, from: usize, to: usize, len: f64, angle: f64, side: f64| {
        let x = k[from][0] + side * len * h * angle.sin();
        let y = k[from][1] + len * h * angle.cos();
        k[to] = [x, y, 1.0];
    };
    for (shoulder, elbow, wrist, side) in [(5, 7, 9, 1.0), (6, 8, 10, -1.0)] {
        let upper = rng.gen_range(0.1..2.6);
        let fore = upper + rng.gen_range(-0.8..0.8);
        limb(&mut k, shoulder, elbow, 0.17, upper, side);
        limb(&mut k, elbow, wrist, 0.15, fore, side);
    }
    for (hip, knee, ankle, side) in [(11, 13, 15, 1.0), (12, 14, 16, -1.0)] {
        let thigh = rng.gen_range(-0.2..0.6);
        let shin = thigh + rng.gen_range(-0.4..0.2);
        limb(&mut k, hip, knee, 0.22, thigh, side);
        limb(&mut k, knee, ankle, 0.22, shin, side);
    }
    if spec.keypoint_noise > 0.0 {
        for p in k.iter_mut() {
            p[0] += rng.gen_range(-spec.keypoint_noise..=spec.keypoint_noise);
            p[1] += rng.gen_range(-spec.keypoint_noise..=spec.keypoint_noise);
        }
    }
    if !plausible_pose(&k) {
        return None;
    }
    let pad = 0.04 * h;
    let x1 = k.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - pad;
    let x2 = k.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + pad;
    let y1 = top;
    let y2 = k.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + pad;
    let inside = x1 >= 0.0 && y1 >= 0.0 && x2 <= iw && y2 <= ih;
    inside.then_some((k, BBox { x1, y1, x2, y2 }))
}

fn generate_scene(spec: &SyntheticSpec, anchors: &[usize], rng: &mut ChaCha8Rng) -> Option<Scene> {
    let (iw, ih) = (spec.image_size[0] as f64, spec.image_size[1] as f64);
    let n_h = rng.gen_range(spec.humans_per_image[0]..=spec.humans_per_image[1]);
    let n_o = rng.gen_range(spec.objects_per_image[0]..=spec.objects_per_image[1]);
    let mut humans: Vec<(Vec<[f64; 3]>, BBox)> = Vec::new();
    for _ in 0..n_h {
        let fig = (0..PLACEMENT_TRIES).find_map(|_| {
            let fig = stick_figure(spec, rng)?;
            let overlaps = humans
                .iter()
                .any(|(_, b)| iou(b, &fig.1).map_or(true, |v| v > 0.3));
            (!overlaps).then_some(fig)
        })?;
        humans.push(fig);
    }
    let mut objects: Vec<(BBox, u32)> = Vec::new();
    for _ in 0..n_o {
        let class = rng.gen_range(1..=spec.object_classes.len() as u32);
        let negative = rng.gen_bool(spec.negative_fraction);
        let target = (
            rng.gen_range(0..humans.len()),
            rng.gen_range(0..anchors.len()),
        );
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            let (hi, ai) = target;
            let hbox = &humans[hi].1;
            let side = rng.gen_range(spec.object_size[0]..=spec.object_size[1]) * hbox.height();
            let center = if negative {
                (rng.gen_range(0.0..iw), rng.gen_range(0.0..ih))
            } else {
                let r = spec.proximity_radius * hbox.height() * 0.5 * rng.gen::<f64>().sqrt();
                let t = rng.gen_range(0.0..std::f64::consts::TAU);
                let j = humans[hi].0[anchors[ai]];
                (j[0] + r * t.cos(), j[1] + r * t.sin())
            };
            let b = BBox::centered(center.0, center.1, side).ok()?;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > iw || b.y2 > ih {
                return None;
            }
            if objects
                .iter()
                .any(|(o, _)| iou(o, &b).map_or(true, |v| v > 0.0))
            {
                return None;
            }
            unambiguous(spec, anchors, &humans, center).then_some(b)
        })?;
        objects.push((placed, class));
    }
    Some(Scene { humans, objects })
}

// Every anchor is either the unique one within the radius or clearly
// outside it, for every human, so labels do not hinge on a hair's breadth.
fn unambiguous(
    spec: &SyntheticSpec,
    anchors: &[usize],
    humans: &[(Vec<[f64; 3]>, BBox)],
    c: (f64, f64),
) -> bool {
    humans.iter().all(|(k, b)| {
        let r = spec.proximity_radius * b.height();
        let mut near = 0;
        for &j in anchors {
            let d = (k[j][0] - c.0).hypot(k[j][1] - c.1);
            if d <= r {
                near += 1;
            } else if d <= 1.5 * r {
                return false;
            }
        }
        near <= 1
    })
}
