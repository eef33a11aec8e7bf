//! Independent reference implementations used by the integration tests.
//! They favour directness over speed and share no code with the library.

#![allow(dead_code)]

pub mod checks;
pub mod golden;

use ndarray::{Array2, Array3};
use pmf_core::nn::Mlp2;
use pmf_core::{BBox, HoiProposal};

// ---------------------------------------------------------------- geometry

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    inter / (area(a) + area(b) - inter)
}

// ---------------------------------------------------------------- SCM

/// Cell centre mapped back into image coordinates.
fn cell_to_image(union: &BBox, m: usize, r: usize, c: usize) -> (f64, f64) {
    let x = union.x1 + (c as f64 + 0.5) * (union.x2 - union.x1) / m as f64;
    let y = union.y1 + (r as f64 + 0.5) * (union.y2 - union.y1) / m as f64;
    (x, y)
}

pub fn mask_oracle(b: &BBox, union: &BBox, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, m), |(r, c)| {
        let (x, y) = cell_to_image(union, m, r, c);
        (b.x1 <= x && x <= b.x2 && b.y1 <= y && y <= b.y2) as u8 as f64
    })
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    if len2 == 0.0 {
        return ap.0.hypot(ap.1);
    }
    let t = (ap.0 * ab.0 + ap.1 * ab.1) / len2;
    if t <= 0.0 {
        ap.0.hypot(ap.1)
    } else if t >= 1.0 {
        (p.0 - b.0).hypot(p.1 - b.1)
    } else {
        // perpendicular distance via the cross product
        (ab.0 * ap.1 - ab.1 * ap.0).abs() / len2.sqrt()
    }
}

pub fn pose_oracle(
    points: &[(f64, f64)],
    union: &BBox,
    m: usize,
    edges: &[(usize, usize)],
    pen: f64,
) -> Array2<f64> {
    let sx = m as f64 / (union.x2 - union.x1);
    let sy = m as f64 / (union.y2 - union.y1);
    let to_grid = |p: (f64, f64)| ((p.0 - union.x1) * sx, (p.1 - union.y1) * sy);
    let e = edges.len();
    let mut g = Array2::zeros((m, m));
    for r in 0..m {
        for c in 0..m {
            let centre = (c as f64 + 0.5, r as f64 + 0.5);
            for (i, &(a, b)) in edges.iter().enumerate() {
                if dist_to_segment(centre, to_grid(points[a]), to_grid(points[b])) <= pen / 2.0 {
                    g[[r, c]] = if e == 1 {
                        0.05
                    } else {
                        0.05 + 0.9 * i as f64 / (e - 1) as f64
                    };
                }
            }
        }
    }
    g
}

pub fn scm_oracle(prop: &HoiProposal, m: usize, edges: &[(usize, usize)], pen: f64) -> Array3<f64> {
    let (h, o) = (&prop.human, &prop.object);
    let union = BBox {
        x1: h.x1.min(o.x1),
        y1: h.y1.min(o.y1),
        x2: h.x2.max(o.x2),
        y2: h.y2.max(o.y2),
    };
    let points: Vec<(f64, f64)> = prop.pose.joints().iter().map(|j| (j.x, j.y)).collect();
    let hm = mask_oracle(h, &union, m);
    let om = mask_oracle(o, &union, m);
    let pm = pose_oracle(&points, &union, m, edges, pen);
    Array3::from_shape_fn((m, m, 3), |(r, c, k)| {
        [hm[[r, c]], om[[r, c]], pm[[r, c]]][k]
    })
}

// ---------------------------------------------------------------- RoI-Align

/// Bilinear read of `(h, w, d)` data at continuous cell coordinates, with
/// zero outside `[-1, size]` and edge clamping inside it.
pub fn bilinear(data: &Array3<f64>, y: f64, x: f64, ch: usize) -> f64 {
    let (h, w, _) = data.dim();
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = data[[y0, x0, ch]] * (1.0 - fx) + data[[y0, x1, ch]] * fx;
    let bottom = data[[y1, x0, ch]] * (1.0 - fx) + data[[y1, x1, ch]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Averages an `n x n` lattice of bilinear samples in every bin.
pub fn roi_align_dense(
    data: &Array3<f64>,
    stride: f64,
    b: &BBox,
    r: usize,
    n: usize,
) -> Array3<f64> {
    let d = data.dim().2;
    let (x1, y1) = (b.x1 / stride - 0.5, b.y1 / stride - 0.5);
    let bw = (b.x2 - b.x1) / stride / r as f64;
    let bh = (b.y2 - b.y1) / stride / r as f64;
    Array3::from_shape_fn((r, r, d), |(i, j, ch)| {
        let mut acc = 0.0;
        for sy in 0..n {
            for sx in 0..n {
                let y = y1 + bh * (i as f64 + (sy as f64 + 0.5) / n as f64);
                let x = x1 + bw * (j as f64 + (sx as f64 + 0.5) / n as f64);
                acc += bilinear(data, y, x, ch);
            }
        }
        acc / (n * n) as f64
    })
}

// ---------------------------------------------------------------- dense algebra

pub fn affine(w: &Array2<f64>, b: &[f64], x: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.dim();
    assert_eq!(rows, x.len());
    (0..cols)
        .map(|j| {
            let mut s = b[j];
            for i in 0..rows {
                s += x[i] * w[[i, j]];
            }
            s
        })
        .collect()
}

pub fn mlp2(net: &Mlp2, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(&net.fc1.weight, net.fc1.bias.as_slice().unwrap(), x)
        .into_iter()
        .map(|v| if v > 0.0 { v } else { 0.0 })
        .collect();
    affine(&net.fc2.weight, net.fc2.bias.as_slice().unwrap(), &h)
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---------------------------------------------------------------- loss

pub fn bce(t: f64, p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if t == 1.0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone)]
pub struct Det {
    pub image: u64,
    pub human: BBox,
    pub object: BBox,
    pub action: u32,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Gt {
    pub image: u64,
    pub human: BBox,
    pub object: BBox,
    pub action: u32,
}

/// True/false-positive count of the detections scoring at least `t`,
/// matched greedily in score order.
fn counts_at(dets: &[&Det], gts: &[&Gt], t: f64, thr: f64) -> (usize, usize) {
    let mut kept: Vec<&&Det> = dets.iter().filter(|d| d.score >= t).collect();
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; gts.len()];
    let (mut tp, mut fp) = (0, 0);
    for d in kept {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image != d.image {
                continue;
            }
            let q = iou(&d.human, &gt.human).min(iou(&d.object, &gt.object));
            if q >= thr && best.is_none_or(|(_, bq)| q > bq) {
                best = Some((g, q));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
    }
    (tp, fp)
}

/// AP by sweeping every distinct score as a threshold, recomputing the
/// matching from scratch each time. Scores must be distinct.
pub fn ap_threshold_sweep(dets: &[Det], gts: &[Gt], action: u32, thr: f64) -> Option<f64> {
    let d: Vec<&Det> = dets.iter().filter(|d| d.action == action).collect();
    let g: Vec<&Gt> = gts.iter().filter(|g| g.action == action).collect();
    if g.is_empty() {
        return None;
    }
    let mut thresholds: Vec<f64> = d.iter().map(|d| d.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let points: Vec<(usize, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, fp) = counts_at(&d, &g, t, thr);
            (tp, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    // area under the interpolated curve: each new true positive adds
    // 1/npos of recall at the best precision reachable from there on
    let mut sum = 0.0;
    let mut prev_tp = 0;
    for (k, &(tp, _)) in points.iter().enumerate() {
        let best = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        for _ in prev_tp..tp {
            sum += best;
        }
        prev_tp = tp;
    }
    Some(sum / g.len() as f64)
}

/// Proptest settings without failure persistence, which has no source
/// directory to write to for integration tests.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        failure_persistence: None,
        ..proptest::test_runner::Config::with_cases(n)
    }
}
