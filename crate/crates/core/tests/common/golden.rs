//! Committed SCM fixtures and their golden grids.

use std::path::PathBuf;

use ndarray::Array3;
use pmf_core::scm::{
    build_scm, read_grid, Skeleton, COCO_SKELETON, DEFAULT_PEN_WIDTH, SCM_CHANNELS,
};
use pmf_core::{BBox, HoiProposal, Pose};

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

pub fn prop_of(human: BBox, object: BBox, pose: &[(f64, f64)]) -> HoiProposal {
    HoiProposal {
        human,
        object,
        object_class: 1,
        human_score: 1.0,
        object_score: 1.0,
        pose: Pose::from_xy(pose).unwrap(),
    }
}

pub const STANDING: [(f64, f64); 17] = [
    (20.3, 13.1),
    (21.7, 11.9),
    (18.9, 11.8),
    (23.2, 12.6),
    (17.4, 12.7),
    (25.6, 19.3),
    (14.8, 19.4),
    (28.1, 26.2),
    (12.2, 26.7),
    (30.4, 32.9),
    (10.3, 33.4),
    (23.9, 34.1),
    (16.6, 34.3),
    (24.7, 43.8),
    (15.9, 44.2),
    (25.2, 52.6),
    (15.1, 52.9),
];

/// Named fixture proposals with the expected SCM side.
pub fn fixtures() -> Vec<(&'static str, HoiProposal, usize)> {
    let reaching: Vec<(f64, f64)> = STANDING
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            if k == 10 {
                (41.3, 20.7)
            } else if k == 8 {
                (4.6, 22.2)
            } else {
                (x, y)
            }
        })
        .collect();
    let off_frame: Vec<(f64, f64)> = STANDING
        .iter()
        .map(|&(x, y)| (x * 1.3 - 9.7, y * 0.9 + 3.1))
        .collect();
    vec![
        (
            "box_in_square_union",
            prop_of(
                bx(10.0, 10.0, 30.0, 50.0),
                bx(0.0, 0.0, 64.0, 64.0),
                &STANDING,
            ),
            64,
        ),
        (
            "wide_union_reaching",
            prop_of(
                bx(9.3, 10.1, 32.7, 55.4),
                bx(38.2, 17.6, 46.9, 24.3),
                &reaching,
            ),
            64,
        ),
        (
            "joints_outside_union",
            prop_of(
                bx(6.4, 9.2, 27.3, 40.6),
                bx(20.1, 30.7, 31.9, 44.3),
                &off_frame,
            ),
            32,
        ),
    ]
}

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(format!("scm_{name}.grid"))
}

pub fn oracle(p: &HoiProposal, m: usize) -> Array3<f64> {
    super::scm_oracle(p, m, &COCO_SKELETON, DEFAULT_PEN_WIDTH)
}

fn bits(a: &Array3<f64>) -> Vec<u32> {
    a.iter().map(|&v| (v as f32).to_bits()).collect()
}

/// Compares every fixture with its golden grid; returns a description of
/// the first mismatch.
pub fn check_goldens() -> Result<(), String> {
    let skeleton = Skeleton::coco();
    for (name, p, m) in fixtures() {
        let mut f = std::fs::File::open(fixture_path(name)).map_err(|e| format!("{name}: {e}"))?;
        let (golden, names) = read_grid(&mut f).map_err(|e| format!("{name}: {e}"))?;
        if names != SCM_CHANNELS {
            return Err(format!("{name}: channel names {names:?}"));
        }
        let scm = build_scm(&p, m, &skeleton, DEFAULT_PEN_WIDTH).map_err(|e| e.to_string())?;
        if scm.grid.dim() != golden.dim() {
            return Err(format!(
                "{name}: shape {:?} vs {:?}",
                scm.grid.dim(),
                golden.dim()
            ));
        }
        let (got, want) = (bits(&scm.grid), bits(&golden));
        if let Some(i) = got.iter().zip(&want).position(|(a, b)| a != b) {
            return Err(format!("{name}: first differing value at flat index {i}"));
        }
        if bits(&oracle(&p, m)) != want {
            return Err(format!(
                "{name}: golden file is stale with respect to the oracle"
            ));
        }
    }
    Ok(())
}
