//! Boxes, poses and the proposal/ground-truth matching rule.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` over continuous pixel
//! coordinates, with area `(x2 - x1) * (y2 - y1)` (no `+1`).

use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Result};

/// Number of keypoints in a COCO pose.
pub const NUM_JOINTS: usize = 17;

/// COCO keypoint order. Index `k` of a [`Pose`] is `JOINT_NAMES[k]`.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub fn joint_index(name: &str) -> Option<usize> {
    JOINT_NAMES.iter().position(|n| *n == name)
}

/// Axis-aligned box in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// Square box of side `side` centred on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, side: f64) -> Result<Self> {
        let h = side / 2.0;
        BBox::new(cx - h, cy - h, cx + h, cy + h)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |reason| DomainError::InvalidBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            reason,
        };
        if ![self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(err("non-finite coordinate"));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(err("zero or negative extent"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = DomainError;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Errors on a degenerate box.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return Ok(0.0);
    }
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Smallest box containing both arguments.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Joint {
    pub fn new(x: f64, y: f64) -> Self {
        Joint {
            x,
            y,
            confidence: None,
        }
    }
}

/// Exactly [`NUM_JOINTS`] keypoints in COCO order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    joints: Vec<Joint>,
}

impl Pose {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.len() != NUM_JOINTS {
            return Err(DomainError::JointCount {
                expected: NUM_JOINTS,
                found: joints.len(),
            });
        }
        Ok(Pose { joints })
    }

    pub fn from_xy(points: &[(f64, f64)]) -> Result<Self> {
        Pose::new(points.iter().map(|&(x, y)| Joint::new(x, y)).collect())
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint(&self, k: usize) -> &Joint {
        &self.joints[k]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Pose {
        Pose {
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    x: j.x + dx,
                    y: j.y + dy,
                    confidence: j.confidence,
                })
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Pose {
        Pose {
            joints: self
                .joints
                .iter()
                .map(|j| Joint {
                    x: j.x * s,
                    y: j.y * s,
                    confidence: j.confidence,
                })
                .collect(),
        }
    }
}

/// One candidate human-object pair: the unit the relation network classifies.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiProposal {
    pub human: BBox,
    pub object: BBox,
    pub object_class: u32,
    pub human_score: f64,
    pub object_score: f64,
    pub pose: Pose,
}

impl HoiProposal {
    pub fn validate(&self) -> Result<()> {
        self.human.validate()?;
        self.object.validate()?;
        for (name, s) in [("human", self.human_score), ("object", self.object_score)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(DomainError::Invalid(format!(
                    "{name} detection score {s} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn union(&self) -> BBox {
        union_box(&self.human, &self.object)
    }
}

/// Annotated human-object pair used as a matching target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPair {
    pub human: BBox,
    pub object: BBox,
}

/// Image extent `(width, height)` used to clip part boxes.
pub type Extent = (f64, f64);

fn clip_axis(lo: f64, hi: f64, limit: f64) -> (f64, f64) {
    let a = lo.max(0.0);
    let b = hi.min(limit);
    if b > a {
        (a, b)
    } else if hi <= 0.0 {
        (0.0, 1.0_f64.min(limit))
    } else {
        ((limit - 1.0).max(0.0), limit)
    }
}

/// Square part boxes of side `gamma * human.height()` centred on each joint.
///
/// With an extent, boxes are clipped to the image; a box falling entirely
/// outside collapses to a one-pixel box at the nearest border.
pub fn part_boxes(
    pose: &Pose,
    human: &BBox,
    gamma: f64,
    extent: Option<Extent>,
) -> Result<Vec<BBox>> {
    if !(gamma > 0.0) {
        return Err(DomainError::NonPositiveGamma(gamma));
    }
    let height = human.height();
    if !(height > 0.0) {
        return Err(DomainError::NonPositiveHeight(height));
    }
    let side = gamma * height;
    pose.joints()
        .iter()
        .map(|j| {
            let b = BBox::centered(j.x, j.y, side)?;
            match extent {
                None => Ok(b),
                Some((w, h)) => {
                    let (x1, x2) = clip_axis(b.x1, b.x2, w);
                    let (y1, y2) = clip_axis(b.y1, b.y2, h);
                    BBox::new(x1, y1, x2, y2)
                }
            }
        })
        .collect()
}

/// Index of the unmatched ground truth that maximises
/// `min(iou(human), iou(object))` among those passing `thr` on both boxes.
/// Ties resolve to the lowest index.
pub fn match_boxes(
    human: &BBox,
    object: &BBox,
    gts: &[GtPair],
    thr: f64,
    taken: &[bool],
) -> Result<Option<usize>> {
    if !(thr > 0.0 && thr <= 1.0) {
        return Err(DomainError::BadThreshold(thr));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, gt) in gts.iter().enumerate() {
        if taken.get(i).copied().unwrap_or(false) {
            continue;
        }
        let ih = iou(human, &gt.human)?;
        let io = iou(object, &gt.object)?;
        if ih < thr || io < thr {
            continue;
        }
        let q = ih.min(io);
        if best.is_none_or(|(_, bq)| q > bq) {
            best = Some((i, q));
        }
    }
    Ok(best.map(|(i, _)| i))
}

pub fn match_pair(
    pred: &HoiProposal,
    gts: &[GtPair],
    thr: f64,
    taken: &[bool],
) -> Result<Option<usize>> {
    match_boxes(&pred.human, &pred.object, gts, thr, taken)
}
