//! Spatial configuration map: human mask, object mask and a graded skeleton
//! rendering, all in the union frame of the pair rescaled to `m x m`.

use std::io::{Read, Write};

use ndarray::{Array2, Array3};

use crate::error::{DomainError, Result};
use crate::geometry::{union_box, BBox, HoiProposal, Pose, NUM_JOINTS};

/// COCO limb list, zero-based joint indices.
pub const COCO_SKELETON: [(usize, usize); 19] = [
    (15, 13),
    (13, 11),
    (16, 14),
    (14, 12),
    (11, 12),
    (5, 11),
    (6, 12),
    (5, 6),
    (5, 7),
    (6, 8),
    (7, 9),
    (8, 10),
    (1, 2),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

pub const DEFAULT_PEN_WIDTH: f64 = 3.0;

/// Ordered limb list with one render intensity per limb.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    edges: Vec<(usize, usize)>,
    intensities: Vec<f64>,
}

impl Skeleton {
    /// Intensities run uniformly from 0.05 (first edge) to 0.95 (last edge).
    pub fn new(edges: Vec<(usize, usize)>) -> Result<Self> {
        if edges.is_empty() {
            return Err(DomainError::Invalid(
                "skeleton needs at least one edge".into(),
            ));
        }
        if let Some(&(a, b)) = edges
            .iter()
            .find(|(a, b)| *a >= NUM_JOINTS || *b >= NUM_JOINTS)
        {
            return Err(DomainError::Invalid(format!(
                "edge ({a}, {b}) out of range"
            )));
        }
        let e = edges.len();
        let intensities = (0..e)
            .map(|i| {
                if e == 1 {
                    0.05
                } else {
                    0.05 + i as f64 * 0.90 / (e - 1) as f64
                }
            })
            .collect();
        Ok(Skeleton { edges, intensities })
    }

    pub fn coco() -> Self {
        Skeleton::new(COCO_SKELETON.to_vec()).expect("static skeleton is valid")
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Skeleton::coco()
    }
}

/// Affine map from image coordinates into the `m x m` union frame.
#[derive(Debug, Clone, Copy)]
struct UnionFrame {
    union: BBox,
    m: f64,
}

impl UnionFrame {
    fn x(&self, x: f64) -> f64 {
        (x - self.union.x1) / self.union.width() * self.m
    }

    fn y(&self, y: f64) -> f64 {
        (y - self.union.y1) / self.union.height() * self.m
    }
}

/// Binary mask of `bbox` in the union frame. Cell `(r, c)` is set when its
/// centre lies inside the box.
pub fn rasterize_mask(bbox: &BBox, union: &BBox, m: usize) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(DomainError::Invalid("grid side must be at least 1".into()));
    }
    bbox.validate()?;
    union.validate()?;
    let frame = UnionFrame {
        union: *union,
        m: m as f64,
    };
    let (bx1, bx2) = (frame.x(bbox.x1), frame.x(bbox.x2));
    let (by1, by2) = (frame.y(bbox.y1), frame.y(bbox.y2));
    Ok(Array2::from_shape_fn((m, m), |(r, c)| {
        let cx = c as f64 + 0.5;
        let cy = r as f64 + 0.5;
        if cx >= bx1 && cx <= bx2 && cy >= by1 && cy <= by2 {
            1.0
        } else {
            0.0
        }
    }))
}

fn point_segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Renders the skeleton as line segments of width `pen` (in grid cells).
/// Later edges overwrite earlier ones.
pub fn rasterize_pose(
    pose: &Pose,
    union: &BBox,
    m: usize,
    skeleton: &Skeleton,
    pen: f64,
) -> Result<Array2<f64>> {
    if !(pen > 0.0) {
        return Err(DomainError::Invalid(format!(
            "pen width must be positive, got {pen}"
        )));
    }
    union.validate()?;
    let frame = UnionFrame {
        union: *union,
        m: m as f64,
    };
    let half = pen / 2.0;
    let mut grid = Array2::zeros((m, m));
    for (&(a, b), &value) in skeleton.edges().iter().zip(skeleton.intensities()) {
        let (ja, jb) = (pose.joint(a), pose.joint(b));
        let (ax, ay) = (frame.x(ja.x), frame.y(ja.y));
        let (bx, by) = (frame.x(jb.x), frame.y(jb.y));
        // Only cells whose centre can be within `half` of the segment.
        let lo = |v: f64| ((v - half - 0.5).floor().max(0.0)) as usize;
        let hi = |v: f64| ((v + half - 0.5).ceil().min(m as f64 - 1.0)).max(-1.0);
        let (c0, c1) = (lo(ax.min(bx)), hi(ax.max(bx)));
        let (r0, r1) = (lo(ay.min(by)), hi(ay.max(by)));
        if c1 < 0.0 || r1 < 0.0 || !c1.is_finite() || !r1.is_finite() {
            continue;
        }
        for r in r0..=(r1 as usize) {
            for c in c0..=(c1 as usize) {
                let d = point_segment_distance(c as f64 + 0.5, r as f64 + 0.5, ax, ay, bx, by);
                if d <= half {
                    grid[[r, c]] = value;
                }
            }
        }
    }
    Ok(grid)
}

pub const SCM_CHANNELS: [&str; 3] = ["human", "object", "pose"];

/// `m x m x 3` map: channel 0 human mask, 1 object mask, 2 skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConfigurationMap {
    pub grid: Array3<f64>,
}

impl SpatialConfigurationMap {
    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.grid.index_axis(ndarray::Axis(2), c).to_owned()
    }

    /// Row-major `(row, col, channel)` flattening.
    pub fn as_flat(&self) -> &[f64] {
        self.grid.as_slice().expect("standard layout")
    }
}

pub fn build_scm(
    prop: &HoiProposal,
    m: usize,
    skeleton: &Skeleton,
    pen: f64,
) -> Result<SpatialConfigurationMap> {
    prop.human.validate()?;
    prop.object.validate()?;
    let union = union_box(&prop.human, &prop.object);
    let human = rasterize_mask(&prop.human, &union, m)?;
    let object = rasterize_mask(&prop.object, &union, m)?;
    let pose = rasterize_pose(&prop.pose, &union, m, skeleton, pen)?;
    let mut grid = Array3::zeros((m, m, 3));
    for r in 0..m {
        for c in 0..m {
            grid[[r, c, 0]] = human[[r, c]];
            grid[[r, c, 1]] = object[[r, c]];
            grid[[r, c, 2]] = pose[[r, c]];
        }
    }
    Ok(SpatialConfigurationMap { grid })
}

// Raw grid file layout (all integers little-endian):
//   magic   b"PMFGRID\0"
//   u32     version (1)
//   u32     height, u32 width, u32 channels
//   per channel: u8 name length, name bytes (ASCII)
//   payload height*width*channels f32, row-major (row, col, channel)
const GRID_MAGIC: &[u8; 8] = b"PMFGRID\0";
const GRID_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum GridFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a grid file or unsupported version")]
    Format,
    #[error("channel count {channels} does not match {names} channel names")]
    Channels { channels: usize, names: usize },
}

/// Writes an `h x w x c` grid as little-endian f32.
pub fn write_grid<W: Write>(
    out: &mut W,
    grid: &Array3<f64>,
    names: &[&str],
) -> Result<(), GridFileError> {
    let (h, w, c) = grid.dim();
    if names.len() != c {
        return Err(GridFileError::Channels {
            channels: c,
            names: names.len(),
        });
    }
    out.write_all(GRID_MAGIC)?;
    for v in [GRID_VERSION, h as u32, w as u32, c as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for n in names {
        out.write_all(&[n.len() as u8])?;
        out.write_all(n.as_bytes())?;
    }
    for v in grid.iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Reads a grid written by [`write_grid`]; returns values widened to f64
/// together with the channel names.
pub fn read_grid<R: Read>(input: &mut R) -> Result<(Array3<f64>, Vec<String>), GridFileError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(GridFileError::Format);
    }
    let mut u = [0u8; 4];
    let mut next = |input: &mut R| -> std::io::Result<u32> {
        input.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    if next(input)? != GRID_VERSION {
        return Err(GridFileError::Format);
    }
    let h = next(input)? as usize;
    let w = next(input)? as usize;
    let c = next(input)? as usize;
    let mut names = Vec::with_capacity(c);
    for _ in 0..c {
        let mut len = [0u8; 1];
        input.read_exact(&mut len)?;
        let mut buf = vec![0u8; len[0] as usize];
        input.read_exact(&mut buf)?;
        names.push(String::from_utf8(buf).map_err(|_| GridFileError::Format)?);
    }
    let mut payload = vec![0u8; h * w * c * 4];
    input.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let grid = Array3::from_shape_vec((h, w, c), data).map_err(|_| GridFileError::Format)?;
    Ok((grid, names))
}
