//! Convolutional feature map, RoI-Align pooling and object-centred
//! coordinate maps.

use ndarray::{Array3, ArrayView3};
use rand::Rng;

use crate::error::{DomainError, Result};
use crate::geometry::{part_boxes, BBox, HoiProposal};
use crate::nn::{avg_pool2, avg_pool2_backward, join, Conv3x3, Parameters, TensorMut, TensorRef};

/// Dense `(h, w, d)` feature tensor at a known stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Result<Self> {
        let (h, w, d) = data.dim();
        if h == 0 || w == 0 || d == 0 || stride == 0 {
            return Err(DomainError::Shape {
                what: "feature map",
                expected: "non-empty tensor and stride >= 1".into(),
                found: format!("{h}x{w}x{d}, stride {stride}"),
            });
        }
        Ok(FeatureMap { data, stride })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    /// Image extent covered by the map.
    pub fn image_extent(&self) -> (f64, f64) {
        (
            (self.width() * self.stride) as f64,
            (self.height() * self.stride) as f64,
        )
    }
}

/// Pre-computed sampling weights for one region: for every output bin the
/// list of `(flat cell index, weight)` pairs it averages. Forward and
/// backward both read from this list.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    resolution: usize,
    height: usize,
    width: usize,
    bins: Vec<Vec<(usize, f64)>>,
}

pub const DEFAULT_SAMPLING: usize = 2;

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
    let (hf, wf) = (h as f64, w as f64);
    if y < -1.0 || y > hf || x < -1.0 || x > wf {
        return;
    }
    let mut y = y.max(0.0);
    let mut x = x.max(0.0);
    let (y_lo, y_hi) = {
        let lo = y.floor() as usize;
        if lo >= h - 1 {
            y = (h - 1) as f64;
            (h - 1, h - 1)
        } else {
            (lo, lo + 1)
        }
    };
    let (x_lo, x_hi) = {
        let lo = x.floor() as usize;
        if lo >= w - 1 {
            x = (w - 1) as f64;
            (w - 1, w - 1)
        } else {
            (lo, lo + 1)
        }
    };
    let ly = y - y_lo as f64;
    let lx = x - x_lo as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    out.push((y_lo * w + x_lo, hy * hx * scale));
    out.push((y_lo * w + x_hi, hy * lx * scale));
    out.push((y_hi * w + x_lo, ly * hx * scale));
    out.push((y_hi * w + x_hi, ly * lx * scale));
}

impl RoiPlan {
    /// Half-pixel aligned RoI-Align: image coordinate `x` maps to feature
    /// coordinate `x / stride - 0.5`, each of the `r x r` bins averages
    /// `sampling x sampling` bilinear samples.
    pub fn new(
        height: usize,
        width: usize,
        stride: usize,
        bbox: &BBox,
        resolution: usize,
        sampling: usize,
    ) -> Result<Self> {
        bbox.validate()?;
        if resolution == 0 || sampling == 0 {
            return Err(DomainError::Invalid(
                "resolution and sampling must be positive".into(),
            ));
        }
        let s = stride as f64;
        let (fx1, fy1, fx2, fy2) = (bbox.x1 / s, bbox.y1 / s, bbox.x2 / s, bbox.y2 / s);
        if fx2 <= 0.0 || fy2 <= 0.0 || fx1 >= width as f64 || fy1 >= height as f64 {
            return Err(DomainError::OutsideFeatureExtent {
                x1: fx1,
                y1: fy1,
                x2: fx2,
                y2: fy2,
            });
        }
        let (x0, y0) = (fx1 - 0.5, fy1 - 0.5);
        let bin_w = (fx2 - fx1) / resolution as f64;
        let bin_h = (fy2 - fy1) / resolution as f64;
        let scale = 1.0 / (sampling * sampling) as f64;
        let mut bins = Vec::with_capacity(resolution * resolution);
        for by in 0..resolution {
            for bx in 0..resolution {
                let mut taps = Vec::with_capacity(4 * sampling * sampling);
                for iy in 0..sampling {
                    let y = y0 + by as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                    for ix in 0..sampling {
                        let x =
                            x0 + bx as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                        bilinear_taps(y, x, height, width, scale, &mut taps);
                    }
                }
                bins.push(taps);
            }
        }
        Ok(RoiPlan {
            resolution,
            height,
            width,
            bins,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    fn check(&self, data: &ArrayView3<f64>) {
        let (h, w, _) = data.dim();
        assert_eq!(
            (h, w),
            (self.height, self.width),
            "plan built for a different map"
        );
    }

    pub fn apply(&self, data: &ArrayView3<f64>) -> Array3<f64> {
        self.check(data);
        let d = data.dim().2;
        let flat = data
            .as_slice()
            .map(std::borrow::Cow::Borrowed)
            .unwrap_or_else(|| std::borrow::Cow::Owned(data.iter().copied().collect()));
        let r = self.resolution;
        let mut out = Array3::zeros((r, r, d));
        let dst = out.as_slice_mut().expect("fresh array");
        for (bin, taps) in self.bins.iter().enumerate() {
            let o = &mut dst[bin * d..(bin + 1) * d];
            for &(cell, wgt) in taps {
                let src = &flat[cell * d..(cell + 1) * d];
                for (a, b) in o.iter_mut().zip(src) {
                    *a += wgt * b;
                }
            }
        }
        out
    }

    /// Scatters `grad_out` (shape `(r, r, d)`) back onto `grad_map`.
    pub fn backward(&self, grad_out: &ArrayView3<f64>, grad_map: &mut Array3<f64>) {
        self.check(&grad_map.view());
        let d = grad_map.dim().2;
        let g = grad_out.as_standard_layout();
        let g = g.as_slice().expect("standard layout");
        let dst = grad_map.as_slice_mut().expect("standard layout");
        for (bin, taps) in self.bins.iter().enumerate() {
            let go = &g[bin * d..(bin + 1) * d];
            for &(cell, wgt) in taps {
                for (a, b) in dst[cell * d..(cell + 1) * d].iter_mut().zip(go) {
                    *a += wgt * b;
                }
            }
        }
    }
}

pub fn roi_align(fm: &FeatureMap, bbox: &BBox, resolution: usize) -> Result<Array3<f64>> {
    roi_align_sampled(fm, bbox, resolution, DEFAULT_SAMPLING)
}

pub fn roi_align_sampled(
    fm: &FeatureMap,
    bbox: &BBox,
    resolution: usize,
    sampling: usize,
) -> Result<Array3<f64>> {
    let plan = RoiPlan::new(
        fm.height(),
        fm.width(),
        fm.stride,
        bbox,
        resolution,
        sampling,
    )?;
    Ok(plan.apply(&fm.data.view()))
}

/// Two-channel map of cell-centre offsets from the object centre, in units
/// of object width (x) and height (y).
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateMap {
    pub data: Array3<f64>,
}

pub fn coordinate_map(
    shape: (usize, usize),
    object: &BBox,
    stride: usize,
) -> Result<CoordinateMap> {
    object.validate()?;
    let (ox, oy) = object.center();
    let (ow, oh) = (object.width(), object.height());
    let s = stride as f64;
    let data = Array3::from_shape_fn((shape.0, shape.1, 2), |(r, c, k)| {
        if k == 0 {
            ((c as f64 + 0.5) * s - ox) / ow
        } else {
            ((r as f64 + 0.5) * s - oy) / oh
        }
    });
    Ok(CoordinateMap { data })
}

/// Part-level crops for one proposal: `K` joint regions plus the object.
#[derive(Debug, Clone)]
pub struct PartCrops {
    pub parts: Vec<Array3<f64>>,
    pub object: Array3<f64>,
    pub part_offsets: Vec<Array3<f64>>,
    pub object_offset: Array3<f64>,
    /// Plans in order parts..., object; reused for the backward pass.
    pub plans: Vec<RoiPlan>,
}

pub fn crop_part_features(
    fm: &FeatureMap,
    cmap: &CoordinateMap,
    prop: &HoiProposal,
    gamma: f64,
    resolution: usize,
    sampling: usize,
) -> Result<PartCrops> {
    let (h, w) = (fm.height(), fm.width());
    if cmap.data.dim() != (h, w, 2) {
        return Err(DomainError::Shape {
            what: "coordinate map",
            expected: format!("{h}x{w}x2"),
            found: format!("{:?}", cmap.data.dim()),
        });
    }
    let boxes = part_boxes(&prop.pose, &prop.human, gamma, Some(fm.image_extent()))?;
    let mut plans = Vec::with_capacity(boxes.len() + 1);
    for b in boxes.iter().chain(std::iter::once(&prop.object)) {
        plans.push(RoiPlan::new(h, w, fm.stride, b, resolution, sampling)?);
    }
    let k = boxes.len();
    let crop = |p: &RoiPlan| p.apply(&fm.data.view());
    let off = |p: &RoiPlan| p.apply(&cmap.data.view());
    Ok(PartCrops {
        parts: plans[..k].iter().map(crop).collect(),
        object: crop(&plans[k]),
        part_offsets: plans[..k].iter().map(off).collect(),
        object_offset: off(&plans[k]),
        plans,
    })
}

/// Small trunk: conv-relu-pool, conv-relu-pool, conv. Output stride 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub conv3: Conv3x3,
}

pub const BACKBONE_STRIDE: usize = 4;

#[derive(Debug, Clone)]
pub struct BackboneCache {
    cols1: ndarray::Array2<f64>,
    act1: Array3<f64>,
    cols2: ndarray::Array2<f64>,
    act2: Array3<f64>,
    cols3: ndarray::Array2<f64>,
}

impl Backbone {
    pub fn new<R: Rng>(channels: (usize, usize), out_dim: usize, rng: &mut R) -> Self {
        Backbone {
            conv1: Conv3x3::new(3, channels.0, rng),
            conv2: Conv3x3::new(channels.0, channels.1, rng),
            conv3: Conv3x3::new(channels.1, out_dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Backbone {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(FeatureMap, BackboneCache)> {
        let (h, w, c) = image.dim();
        if c != 3 || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 || h == 0 || w == 0 {
            return Err(DomainError::Shape {
                what: "backbone input",
                expected: format!("HxWx3 with H, W divisible by {BACKBONE_STRIDE}"),
                found: format!("{h}x{w}x{c}"),
            });
        }
        let (cols1, mut a1) = self.conv1.forward(image);
        a1.mapv_inplace(|v| v.max(0.0));
        let p1 = avg_pool2(&a1);
        let (cols2, mut a2) = self.conv2.forward(&p1);
        a2.mapv_inplace(|v| v.max(0.0));
        let p2 = avg_pool2(&a2);
        let (cols3, out) = self.conv3.forward(&p2);
        let fm = FeatureMap::new(out, BACKBONE_STRIDE)?;
        Ok((
            fm,
            BackboneCache {
                cols1,
                act1: a1,
                cols2,
                act2: a2,
                cols3,
            },
        ))
    }

    pub fn backward(&self, cache: &BackboneCache, grad_fm: &Array3<f64>, grad: &mut Backbone) {
        let gp2 = self
            .conv3
            .backward(&cache.cols3, grad_fm, &mut grad.conv3, true)
            .expect("requested");
        let mut ga2 = avg_pool2_backward(&gp2);
        ndarray::Zip::from(&mut ga2)
            .and(&cache.act2)
            .for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
        let gp1 = self
            .conv2
            .backward(&cache.cols2, &ga2, &mut grad.conv2, true)
            .expect("requested");
        let mut ga1 = avg_pool2_backward(&gp1);
        ndarray::Zip::from(&mut ga1)
            .and(&cache.act1)
            .for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
        self.conv1
            .backward(&cache.cols1, &ga1, &mut grad.conv1, false);
    }
}

impl Parameters for Backbone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.conv1.collect(&join(prefix, "conv1"), out);
        self.conv2.collect(&join(prefix, "conv2"), out);
        self.conv3.collect(&join(prefix, "conv3"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.conv1.collect_mut(&join(prefix, "conv1"), out);
        self.conv2.collect_mut(&join(prefix, "conv2"), out);
        self.conv3.collect_mut(&join(prefix, "conv3"), out);
    }
}
