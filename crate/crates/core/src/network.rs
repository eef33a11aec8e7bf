//! The relation head: holistic, zoom-in and fusion modules on top of the
//! backbone, with every component switchable through [`AblationFlags`].
//!
//! All sub-modules work on whole minibatches. [`PmfNet::forward`] keeps the
//! intermediate activations needed by [`PmfNet::backward`], which
//! accumulates parameter gradients into a zero-initialised `PmfNet` of the
//! same shape.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::config::{AblationFlags, ModelConfig};
use crate::error::{DomainError, Result};
use crate::features::{
    coordinate_map, crop_part_features, Backbone, BackboneCache, FeatureMap, RoiPlan,
};
use crate::geometry::HoiProposal;
use crate::nn::{join, sigmoid, Mlp2, Mlp2Cache, Parameters, TensorMut, TensorRef};
use crate::scm::{build_scm, Skeleton};

/// `s_ho^a = s_L^a * s_G`.
pub fn relation_score(s_l: &[f64], s_g: f64) -> Vec<f64> {
    s_l.iter().map(|&s| s * s_g).collect()
}

/// `R^a = s_ho^a * s_h * s_o`.
pub fn final_score(s_ho: &[f64], s_h: f64, s_o: f64) -> Vec<f64> {
    s_ho.iter().map(|&s| s * s_h * s_o).collect()
}

/// Scores for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationPrediction {
    /// Interaction affinity; exactly 1 when the affinity gate is disabled.
    pub s_g: f64,
    pub s_l: Vec<f64>,
    pub s_ho: Vec<f64>,
    pub r: Vec<f64>,
    /// Part attention, when the attention component is active.
    pub beta: Option<Vec<f64>>,
}

/// One proposal in a batch together with the index of its image.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: usize,
    pub proposal: &'a HoiProposal,
}

/// Output of the holistic module for a batch.
#[derive(Debug, Clone)]
pub struct HolisticFeatures {
    pub human: Array2<f64>,
    pub object: Array2<f64>,
    pub union: Array2<f64>,
    pub spatial: Option<Array2<f64>>,
    /// Concatenation `human | object | union | spatial`.
    pub gamma_hol: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HolisticCache {
    human: Mlp2Cache,
    object: Mlp2Cache,
    union: Mlp2Cache,
    spatial: Option<Mlp2Cache>,
}

/// Inputs and outputs of the zoom-in module for a batch.
#[derive(Debug, Clone)]
pub struct PartFeatures {
    /// `(batch, K + 1, r_p * r_p * C)` aligned crops; the last region is the
    /// object. `C = D + 2` with alignment on, `D` otherwise.
    pub aligned: Array3<f64>,
    /// Per-part multipliers applied to `aligned` (attention times gate).
    pub weights: Array2<f64>,
    pub beta: Option<Array2<f64>>,
    /// Flattened weighted stack fed to the embedding.
    pub f_att: Array2<f64>,
    pub gamma_loc: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ZoomCache {
    attention: Option<Mlp2Cache>,
    gate: Array2<f64>,
    embed: Mlp2Cache,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub affinity_logit: Option<Array1<f64>>,
    pub relation_logits: Array2<f64>,
    pub s_g: Array1<f64>,
    pub s_l: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    input: Array2<f64>,
    relation: Mlp2Cache,
    affinity: Option<Mlp2Cache>,
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    images: Vec<usize>,
    backbone: Vec<BackboneCache>,
    feature_shapes: Vec<(usize, usize, usize)>,
    sample_image: Vec<usize>,
    holistic_plans: Vec<[RoiPlan; 3]>,
    part_plans: Vec<Vec<RoiPlan>>,
    x_human: Array2<f64>,
    x_object: Array2<f64>,
    x_union: Array2<f64>,
    x_spatial: Array2<f64>,
    holistic: HolisticFeatures,
    holistic_cache: HolisticCache,
    parts: Option<(PartFeatures, ZoomCache)>,
    fusion: FusionOutput,
    fusion_cache: FusionCache,
}

impl ForwardCache {
    pub fn holistic(&self) -> &HolisticFeatures {
        &self.holistic
    }

    pub fn parts(&self) -> Option<&PartFeatures> {
        self.parts.as_ref().map(|(p, _)| p)
    }

    pub fn fusion(&self) -> &FusionOutput {
        &self.fusion
    }

    pub fn spatial_input(&self) -> &Array2<f64> {
        &self.x_spatial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmfNet {
    config: ModelConfig,
    flags: AblationFlags,
    skeleton: Skeleton,
    pub backbone: Backbone,
    pub human: Mlp2,
    pub object: Mlp2,
    pub union: Mlp2,
    pub spatial: Option<Mlp2>,
    pub attention: Option<Mlp2>,
    pub zoom: Option<Mlp2>,
    pub affinity: Option<Mlp2>,
    pub relation: Mlp2,
}

impl PmfNet {
    pub fn new<R: Rng>(config: &ModelConfig, flags: AblationFlags, rng: &mut R) -> Result<Self> {
        config.validate().map_err(DomainError::Invalid)?;
        let c = config;
        let d = c.feature_dim;
        let hol_in = c.holistic_resolution * c.holistic_resolution * d;
        let spatial_in = 3 * c.scm_size * c.scm_size;
        let backbone = Backbone::new((c.backbone_channels[0], c.backbone_channels[1]), d, rng);
        let human = Mlp2::new(hol_in, c.holistic_dim, c.holistic_dim, rng);
        let object = Mlp2::new(hol_in, c.holistic_dim, c.holistic_dim, rng);
        let union = Mlp2::new(hol_in, c.holistic_dim, c.holistic_dim, rng);
        let spatial = flags
            .scm
            .then(|| Mlp2::new(spatial_in, c.holistic_dim, c.holistic_dim, rng));
        let attention = flags
            .uses_attention()
            .then(|| Mlp2::new(spatial_in, c.attention_hidden, c.num_joints, rng));
        let part_channels = d + if flags.uses_alignment() { 2 } else { 0 };
        let zoom_in = (c.num_joints + 1) * c.part_resolution * c.part_resolution * part_channels;
        let zoom = flags
            .part_crop
            .then(|| Mlp2::new(zoom_in, c.local_dim, c.local_dim, rng));
        let hol_dim = c.holistic_dim * if flags.scm { 4 } else { 3 };
        let affinity = flags
            .interaction_affinity
            .then(|| Mlp2::new(hol_dim, c.fusion_hidden, 1, rng));
        let loc_dim = if flags.part_crop { c.local_dim } else { 0 };
        let relation = Mlp2::new(loc_dim + hol_dim, c.fusion_hidden, c.num_actions, rng);
        Ok(PmfNet {
            config: c.clone(),
            flags,
            skeleton: Skeleton::coco(),
            backbone,
            human,
            object,
            union,
            spatial,
            attention,
            zoom,
            affinity,
            relation,
        })
    }

    /// Same architecture with every parameter zero; used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        PmfNet {
            config: self.config.clone(),
            flags: self.flags,
            skeleton: self.skeleton.clone(),
            backbone: self.backbone.zeros_like(),
            human: self.human.zeros_like(),
            object: self.object.zeros_like(),
            union: self.union.zeros_like(),
            spatial: self.spatial.as_ref().map(Mlp2::zeros_like),
            attention: self.attention.as_ref().map(Mlp2::zeros_like),
            zoom: self.zoom.as_ref().map(Mlp2::zeros_like),
            affinity: self.affinity.as_ref().map(Mlp2::zeros_like),
            relation: self.relation.zeros_like(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn holistic_dim(&self) -> usize {
        self.config.holistic_dim * if self.flags.scm { 4 } else { 3 }
    }

    fn part_channels(&self) -> usize {
        self.config.feature_dim + if self.flags.uses_alignment() { 2 } else { 0 }
    }

    /// Runs the backbone on one image.
    pub fn features(&self, image: &Array3<f64>) -> Result<FeatureMap> {
        Ok(self.backbone.forward(image)?.0)
    }

    /// Holistic module on flattened `r_h x r_h x D` crops and (optionally)
    /// flattened spatial maps.
    pub fn holistic_forward(
        &self,
        x_human: &ArrayView2<f64>,
        x_object: &ArrayView2<f64>,
        x_union: &ArrayView2<f64>,
        x_spatial: &ArrayView2<f64>,
    ) -> Result<(HolisticFeatures, HolisticCache)> {
        let want = self.human.input_dim();
        for (what, x) in [
            ("human crops", x_human),
            ("object crops", x_object),
            ("union crops", x_union),
        ] {
            if x.ncols() != want {
                return Err(DomainError::Shape {
                    what,
                    expected: format!("{want} columns"),
                    found: format!("{}", x.ncols()),
                });
            }
        }
        let ch = self.human.forward(x_human);
        let co = self.object.forward(x_object);
        let cu = self.union.forward(x_union);
        let cs = match &self.spatial {
            Some(net) => {
                if x_spatial.ncols() != net.input_dim() {
                    return Err(DomainError::Shape {
                        what: "spatial map",
                        expected: format!("{} columns", net.input_dim()),
                        found: format!("{}", x_spatial.ncols()),
                    });
                }
                Some(net.forward(x_spatial))
            }
            None => None,
        };
        let mut parts = vec![ch.output.view(), co.output.view(), cu.output.view()];
        if let Some(cs) = &cs {
            parts.push(cs.output.view());
        }
        let gamma_hol = concatenate(Axis(1), &parts).expect("equal row counts");
        let feats = HolisticFeatures {
            human: ch.output.clone(),
            object: co.output.clone(),
            union: cu.output.clone(),
            spatial: cs.as_ref().map(|c| c.output.clone()),
            gamma_hol,
        };
        Ok((
            feats,
            HolisticCache {
                human: ch,
                object: co,
                union: cu,
                spatial: cs,
            },
        ))
    }

    /// Part attention from flattened spatial maps: values in (0, 1), one
    /// per joint. `None` when the attention component is disabled.
    pub fn semantic_attention(
        &self,
        x_spatial: &ArrayView2<f64>,
    ) -> Option<(Array2<f64>, Mlp2Cache)> {
        let net = self.attention.as_ref()?;
        let cache = net.forward(x_spatial);
        Some((cache.output.mapv(sigmoid), cache))
    }

    /// Zoom-in module. `aligned` holds the `(batch, K + 1, F)` part stack,
    /// `gate` the per-joint confidence mask. `fixed_beta` replaces the
    /// predicted attention with a constant.
    pub fn zoom_in_forward(
        &self,
        aligned: Array3<f64>,
        x_spatial: &ArrayView2<f64>,
        gate: Array2<f64>,
        fixed_beta: Option<f64>,
    ) -> Result<Option<(PartFeatures, ZoomCache)>> {
        let Some(embed) = &self.zoom else {
            return Ok(None);
        };
        let (b, regions, f) = aligned.dim();
        let k = self.config.num_joints;
        if regions != k + 1 || regions * f != embed.input_dim() {
            return Err(DomainError::Shape {
                what: "part stack",
                expected: format!("{} regions x {} values", k + 1, embed.input_dim() / (k + 1)),
                found: format!("{regions} x {f}"),
            });
        }
        let (beta, att_cache) = match fixed_beta {
            Some(v) => (Some(Array2::from_elem((b, k), v)), None),
            None => match self.semantic_attention(x_spatial) {
                Some((beta, cache)) => (Some(beta), Some(cache)),
                None => (None, None),
            },
        };
        let weights = match &beta {
            Some(beta) => beta * &gate,
            None => gate.clone(),
        };
        let mut weighted = aligned.clone();
        for (i, mut sample) in weighted.outer_iter_mut().enumerate() {
            for j in 0..k {
                let w = weights[[i, j]];
                sample.row_mut(j).mapv_inplace(|v| w * v);
            }
        }
        let f_att = weighted
            .into_shape_with_order((b, regions * f))
            .expect("contiguous");
        let embed_cache = embed.forward(&f_att.view());
        let gamma_loc = embed_cache.output.clone();
        Ok(Some((
            PartFeatures {
                aligned,
                weights,
                beta,
                f_att,
                gamma_loc,
            },
            ZoomCache {
                attention: att_cache,
                gate,
                embed: embed_cache,
            },
        )))
    }

    /// Fusion heads. `s_G` is forced to 1 when the affinity gate is off.
    pub fn fusion_forward(
        &self,
        gamma_hol: &Array2<f64>,
        gamma_loc: Option<&Array2<f64>>,
    ) -> (FusionOutput, FusionCache) {
        let input = match gamma_loc {
            Some(loc) => concatenate(Axis(1), &[loc.view(), gamma_hol.view()]).expect("rows match"),
            None => gamma_hol.clone(),
        };
        let relation = self.relation.forward(&input.view());
        let affinity = self
            .affinity
            .as_ref()
            .map(|net| net.forward(&gamma_hol.view()));
        let affinity_logit = affinity.as_ref().map(|c| c.output.column(0).to_owned());
        let s_g = match &affinity_logit {
            Some(l) => l.mapv(sigmoid),
            None => Array1::ones(gamma_hol.nrows()),
        };
        let s_l = relation.output.mapv(sigmoid);
        (
            FusionOutput {
                affinity_logit,
                relation_logits: relation.output.clone(),
                s_g,
                s_l,
            },
            FusionCache {
                input,
                relation,
                affinity,
            },
        )
    }

    fn joint_gate(&self, prop: &HoiProposal) -> Vec<f64> {
        prop.pose
            .joints()
            .iter()
            .map(
                |j| match (self.config.joint_confidence_gate, j.confidence) {
                    (Some(thr), Some(c)) if c < thr => 0.0,
                    _ => 1.0,
                },
            )
            .collect()
    }

    pub fn forward(&self, images: &[Array3<f64>], samples: &[Sample<'_>]) -> Result<ForwardCache> {
        self.forward_with(images, samples, None)
    }

    /// Forward pass with the attention replaced by a constant (used to check
    /// that disabling attention equals unit attention).
    pub fn forward_with(
        &self,
        images: &[Array3<f64>],
        samples: &[Sample<'_>],
        fixed_beta: Option<f64>,
    ) -> Result<ForwardCache> {
        if samples.is_empty() {
            return Err(DomainError::Invalid("empty batch".into()));
        }
        let c = &self.config;
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut image_ids = Vec::new();
        let mut fms = Vec::new();
        let mut bcaches = Vec::new();
        let mut sample_image = Vec::with_capacity(samples.len());
        for s in samples {
            let img = images.get(s.image).ok_or_else(|| {
                DomainError::Invalid(format!("sample refers to missing image {}", s.image))
            })?;
            let idx = match slot.get(&s.image) {
                Some(&i) => i,
                None => {
                    let (fm, cache) = self.backbone.forward(img)?;
                    slot.insert(s.image, fms.len());
                    image_ids.push(s.image);
                    fms.push(fm);
                    bcaches.push(cache);
                    fms.len() - 1
                }
            };
            sample_image.push(idx);
        }

        let b = samples.len();
        let d = c.feature_dim;
        let rh = c.holistic_resolution;
        let rp = c.part_resolution;
        let k = c.num_joints;
        let hol_in = rh * rh * d;
        let spatial_in = 3 * c.scm_size * c.scm_size;
        let pc = self.part_channels();
        let region_len = rp * rp * pc;
        let mut x_human = Array2::zeros((b, hol_in));
        let mut x_object = Array2::zeros((b, hol_in));
        let mut x_union = Array2::zeros((b, hol_in));
        let mut x_spatial = Array2::zeros((b, spatial_in));
        let mut aligned = Array3::zeros((b, k + 1, region_len));
        let mut gate = Array2::ones((b, k));
        let mut holistic_plans = Vec::with_capacity(b);
        let mut part_plans = Vec::with_capacity(b);

        for (i, s) in samples.iter().enumerate() {
            let prop = s.proposal;
            prop.validate()?;
            let fm = &fms[sample_image[i]];
            let (h, w) = (fm.height(), fm.width());
            let union = prop.union();
            let plans = [
                RoiPlan::new(h, w, fm.stride, &prop.human, rh, c.roi_sampling)?,
                RoiPlan::new(h, w, fm.stride, &prop.object, rh, c.roi_sampling)?,
                RoiPlan::new(h, w, fm.stride, &union, rh, c.roi_sampling)?,
            ];
            for (plan, x) in plans
                .iter()
                .zip([&mut x_human, &mut x_object, &mut x_union])
            {
                let crop = plan.apply(&fm.data.view());
                x.row_mut(i)
                    .assign(&ndarray::ArrayView1::from(crop.as_slice().expect("fresh")));
            }
            holistic_plans.push(plans);
            if self.spatial.is_some() || self.attention.is_some() {
                let scm = build_scm(prop, c.scm_size, &self.skeleton, c.pen_width)?;
                x_spatial
                    .row_mut(i)
                    .assign(&ndarray::ArrayView1::from(scm.as_flat()));
            }
            if self.flags.part_crop {
                let cmap = coordinate_map((h, w), &prop.object, fm.stride)?;
                let crops = crop_part_features(fm, &cmap, prop, c.part_scale, rp, c.roi_sampling)?;
                let regions = crops
                    .parts
                    .iter()
                    .zip(&crops.part_offsets)
                    .chain(std::iter::once((&crops.object, &crops.object_offset)));
                for (j, (feat, off)) in regions.enumerate() {
                    let mut row = aligned.slice_mut(s![i, j, ..]);
                    let fs = feat.as_slice().expect("fresh");
                    let os = off.as_slice().expect("fresh");
                    for cell in 0..rp * rp {
                        let dst = cell * pc;
                        for ch in 0..d {
                            row[dst + ch] = fs[cell * d + ch];
                        }
                        if pc > d {
                            row[dst + d] = os[cell * 2];
                            row[dst + d + 1] = os[cell * 2 + 1];
                        }
                    }
                }
                gate.row_mut(i).assign(&Array1::from(self.joint_gate(prop)));
                part_plans.push(crops.plans);
            }
        }

        let (holistic, holistic_cache) = self.holistic_forward(
            &x_human.view(),
            &x_object.view(),
            &x_union.view(),
            &x_spatial.view(),
        )?;
        let parts = self.zoom_in_forward(aligned, &x_spatial.view(), gate, fixed_beta)?;
        let (fusion, fusion_cache) = self.fusion_forward(
            &holistic.gamma_hol,
            parts.as_ref().map(|(p, _)| &p.gamma_loc),
        );

        Ok(ForwardCache {
            images: image_ids,
            backbone: bcaches,
            feature_shapes: fms.iter().map(|f| f.data.dim()).collect(),
            sample_image,
            holistic_plans,
            part_plans,
            x_human,
            x_object,
            x_union,
            x_spatial,
            holistic,
            holistic_cache,
            parts,
            fusion,
            fusion_cache,
        })
    }

    /// Per-proposal scores from a forward pass.
    pub fn predictions(
        &self,
        cache: &ForwardCache,
        samples: &[Sample<'_>],
    ) -> Vec<RelationPrediction> {
        let f = &cache.fusion;
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let s_l = f.s_l.row(i).to_vec();
                let s_g = f.s_g[i];
                let s_ho = relation_score(&s_l, s_g);
                let r = final_score(&s_ho, s.proposal.human_score, s.proposal.object_score);
                let beta = cache
                    .parts
                    .as_ref()
                    .and_then(|(p, _)| p.beta.as_ref())
                    .map(|b| b.row(i).to_vec());
                RelationPrediction {
                    s_g,
                    s_l,
                    s_ho,
                    r,
                    beta,
                }
            })
            .collect()
    }

    pub fn predict(
        &self,
        images: &[Array3<f64>],
        samples: &[Sample<'_>],
    ) -> Result<Vec<RelationPrediction>> {
        let cache = self.forward(images, samples)?;
        Ok(self.predictions(&cache, samples))
    }

    /// Back-propagates loss gradients given with respect to the relation
    /// logits `(batch, A)` and the affinity logits `(batch,)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_relation_logits: &Array2<f64>,
        grad_affinity_logits: Option<&Array1<f64>>,
        grads: &mut PmfNet,
    ) {
        let c = &self.config;
        let b = grad_relation_logits.nrows();
        let hol_dim = self.holistic_dim();
        let fc = &cache.fusion_cache;

        let g_input = self
            .relation
            .backward(
                &fc.input.view(),
                &fc.relation,
                grad_relation_logits,
                &mut grads.relation,
                true,
            )
            .expect("requested");
        let loc_dim = g_input.ncols() - hol_dim;
        let g_loc = g_input.slice(s![.., ..loc_dim]).to_owned();
        let mut g_hol = g_input.slice(s![.., loc_dim..]).to_owned();

        if let (Some(net), Some(ac), Some(g)) = (&self.affinity, &fc.affinity, grad_affinity_logits)
        {
            let g2 = g.clone().insert_axis(Axis(1));
            let gh = net
                .backward(
                    &cache.holistic.gamma_hol.view(),
                    ac,
                    &g2,
                    grads.affinity.as_mut().expect("same architecture"),
                    true,
                )
                .expect("requested");
            g_hol += &gh;
        }

        let mut grad_maps: Vec<Array3<f64>> = cache
            .feature_shapes
            .iter()
            .map(|&s| Array3::zeros(s))
            .collect();

        if let (Some(embed), Some((parts, zc))) = (&self.zoom, &cache.parts) {
            let g_fatt = embed
                .backward(
                    &parts.f_att.view(),
                    &zc.embed,
                    &g_loc,
                    grads.zoom.as_mut().expect("same architecture"),
                    true,
                )
                .expect("requested");
            let (_, regions, f) = parts.aligned.dim();
            let k = regions - 1;
            let g_weighted = g_fatt
                .into_shape_with_order((b, regions, f))
                .expect("contiguous");
            if let (Some(net), Some(ac), Some(beta)) = (&self.attention, &zc.attention, &parts.beta)
            {
                let mut g_logit = Array2::zeros((b, k));
                for i in 0..b {
                    for j in 0..k {
                        let dot =
                            g_weighted
                                .slice(s![i, j, ..])
                                .dot(&parts.aligned.slice(s![i, j, ..]));
                        let bj = beta[[i, j]];
                        g_logit[[i, j]] = dot * zc.gate[[i, j]] * bj * (1.0 - bj);
                    }
                }
                net.backward(
                    &cache.x_spatial.view(),
                    ac,
                    &g_logit,
                    grads.attention.as_mut().expect("same architecture"),
                    false,
                );
            }
            let d = c.feature_dim;
            let rp = c.part_resolution;
            let pc = f / (rp * rp);
            for i in 0..b {
                let gm = &mut grad_maps[cache.sample_image[i]];
                for (j, plan) in cache.part_plans[i].iter().enumerate() {
                    let w = if j < k { parts.weights[[i, j]] } else { 1.0 };
                    if w == 0.0 {
                        continue;
                    }
                    let row = g_weighted.slice(s![i, j, ..]);
                    let g_crop = Array3::from_shape_fn((rp, rp, d), |(y, x, ch)| {
                        w * row[(y * rp + x) * pc + ch]
                    });
                    plan.backward(&g_crop.view(), gm);
                }
            }
        }

        let hc = &cache.holistic_cache;
        let dh = c.holistic_dim;
        let rh = c.holistic_resolution;
        let branches = [
            (
                &self.human,
                &hc.human,
                &cache.x_human,
                &mut grads.human,
                0usize,
            ),
            (
                &self.object,
                &hc.object,
                &cache.x_object,
                &mut grads.object,
                1,
            ),
            (&self.union, &hc.union, &cache.x_union, &mut grads.union, 2),
        ];
        for (net, bc, x, g, slot) in branches {
            let go = g_hol.slice(s![.., slot * dh..(slot + 1) * dh]).to_owned();
            let gx = net
                .backward(&x.view(), bc, &go, g, true)
                .expect("requested");
            for i in 0..b {
                let g_crop = gx
                    .row(i)
                    .to_owned()
                    .into_shape_with_order((rh, rh, c.feature_dim))
                    .expect("row length");
                cache.holistic_plans[i][slot]
                    .backward(&g_crop.view(), &mut grad_maps[cache.sample_image[i]]);
            }
        }
        if let (Some(net), Some(sc)) = (&self.spatial, &hc.spatial) {
            let go = g_hol.slice(s![.., 3 * dh..4 * dh]).to_owned();
            net.backward(
                &cache.x_spatial.view(),
                sc,
                &go,
                grads.spatial.as_mut().expect("same architecture"),
                false,
            );
        }

        for (slot, gm) in grad_maps.iter().enumerate() {
            self.backbone
                .backward(&cache.backbone[slot], gm, &mut grads.backbone);
        }
        debug_assert_eq!(cache.images.len(), grad_maps.len());
    }
}

impl Parameters for PmfNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.backbone.collect(&join(prefix, "backbone"), out);
        self.human.collect(&join(prefix, "holistic.human"), out);
        self.object.collect(&join(prefix, "holistic.object"), out);
        self.union.collect(&join(prefix, "holistic.union"), out);
        if let Some(n) = &self.spatial {
            n.collect(&join(prefix, "holistic.spatial"), out);
        }
        if let Some(n) = &self.attention {
            n.collect(&join(prefix, "zoom.attention"), out);
        }
        if let Some(n) = &self.zoom {
            n.collect(&join(prefix, "zoom.embed"), out);
        }
        if let Some(n) = &self.affinity {
            n.collect(&join(prefix, "fusion.affinity"), out);
        }
        self.relation.collect(&join(prefix, "fusion.relation"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.backbone.collect_mut(&join(prefix, "backbone"), out);
        self.human.collect_mut(&join(prefix, "holistic.human"), out);
        self.object
            .collect_mut(&join(prefix, "holistic.object"), out);
        self.union.collect_mut(&join(prefix, "holistic.union"), out);
        if let Some(n) = &mut self.spatial {
            n.collect_mut(&join(prefix, "holistic.spatial"), out);
        }
        if let Some(n) = &mut self.attention {
            n.collect_mut(&join(prefix, "zoom.attention"), out);
        }
        if let Some(n) = &mut self.zoom {
            n.collect_mut(&join(prefix, "zoom.embed"), out);
        }
        if let Some(n) = &mut self.affinity {
            n.collect_mut(&join(prefix, "fusion.affinity"), out);
        }
        self.relation
            .collect_mut(&join(prefix, "fusion.relation"), out);
    }
}
