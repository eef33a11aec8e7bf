//! Criterion-level checks shared by the topic tests and the acceptance
//! target. Each returns a one-line summary on success and the failing
//! detail otherwise.

use ndarray::{Array1, Array3};
use pmf_core::features::{roi_align_sampled, FeatureMap};
use pmf_core::nn::Parameters;
use pmf_core::training::{hoi_loss, loss_and_gradients, TrainingLabel};
use pmf_core::{AblationFlags, BBox, HoiProposal, ModelConfig, PmfNet, Pose, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::roi_align_dense;

pub type Outcome = Result<String, String>;

/// Random feature map of at most 16x16x8 cells, stride in {1, 2, 4}, with a
/// box that may stick out of the map but overlaps it.
pub fn random_roi_case(rng: &mut ChaCha8Rng) -> (FeatureMap, BBox, usize) {
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let d = rng.gen_range(1..=8);
    let stride = [1usize, 2, 4][rng.gen_range(0..3)];
    let data = Array3::from_shape_fn((h, w, d), |_| rng.gen_range(-1.0..1.0));
    let (ew, eh) = ((w * stride) as f64, (h * stride) as f64);
    let x1 = rng.gen_range(-0.25 * ew..0.9 * ew);
    let y1 = rng.gen_range(-0.25 * eh..0.9 * eh);
    let bw = rng.gen_range(0.05 * ew..1.2 * ew);
    let bh = rng.gen_range(0.05 * eh..1.2 * eh);
    let b = BBox::new(x1, y1, (x1 + bw).max(0.1 * ew), (y1 + bh).max(0.1 * eh)).unwrap();
    let r = [5usize, 7][rng.gen_range(0..2)];
    (FeatureMap::new(data, stride).unwrap(), b, r)
}

/// RoI-Align with 50x50 samples per bin against the dense bilinear oracle.
pub fn roi_align_oracle(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (fm, b, r) = random_roi_case(&mut rng);
        let got = roi_align_sampled(&fm, &b, r, 50).map_err(|e| format!("case {case}: {e}"))?;
        let want = roi_align_dense(&fm.data, fm.stride as f64, &b, r, 50);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        worst = worst.max(err);
        if err > 1e-5 {
            return Err(format!(
                "case {case}: max abs error {err:.3e} for box {b:?}, r {r}"
            ));
        }
    }
    Ok(format!("{cases} cases, max abs error {worst:.2e}"))
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        scm_size: 8,
        holistic_resolution: 2,
        part_resolution: 2,
        part_scale: 0.3,
        feature_dim: 3,
        backbone_channels: [2, 3],
        holistic_dim: 4,
        local_dim: 4,
        attention_hidden: 4,
        fusion_hidden: 5,
        num_actions: 3,
        ..ModelConfig::default()
    }
}

/// Smooth random 16x16 image.
pub fn tiny_image(rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (a, b, c) = (
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.0..6.0),
    );
    Array3::from_shape_fn((16, 16, 3), |(y, x, ch)| {
        0.5 + 0.4 * ((a * x as f64 + c).sin() * (b * y as f64 + ch as f64).cos())
    })
}

pub fn tiny_proposal(rng: &mut ChaCha8Rng) -> HoiProposal {
    let hx = rng.gen_range(1.0..5.0);
    let hy = rng.gen_range(0.5..3.0);
    let human = BBox::new(
        hx,
        hy,
        hx + rng.gen_range(6.0..9.0),
        hy + rng.gen_range(9.0..12.0),
    )
    .unwrap();
    let ox = rng.gen_range(6.0..11.0);
    let oy = rng.gen_range(4.0..11.0);
    let object = BBox::new(
        ox,
        oy,
        ox + rng.gen_range(2.5..4.5),
        oy + rng.gen_range(2.5..4.5),
    )
    .unwrap();
    let pts: Vec<(f64, f64)> = (0..17)
        .map(|_| {
            (
                rng.gen_range(human.x1..human.x2),
                rng.gen_range(human.y1..human.y2),
            )
        })
        .collect();
    HoiProposal {
        human,
        object,
        pose: Pose::from_xy(&pts).unwrap(),
        human_score: rng.gen_range(0.6..1.0),
        object_score: rng.gen_range(0.6..1.0),
        object_class: 0,
    }
}

pub fn tiny_labels() -> Vec<TrainingLabel> {
    vec![
        TrainingLabel {
            y: vec![true, false, true],
        },
        TrainingLabel {
            y: vec![false, false, false],
        },
        TrainingLabel {
            y: vec![false, true, false],
        },
    ]
}

fn batch_loss(
    model: &PmfNet,
    images: &[Array3<f64>],
    samples: &[Sample<'_>],
    labels: &[TrainingLabel],
    mu: f64,
) -> f64 {
    let cache = model.forward(images, samples).unwrap();
    let f = cache.fusion();
    let s_g: Option<&Array1<f64>> = f.affinity_logit.as_ref().map(|_| &f.s_g);
    hoi_loss(&f.s_l, s_g, labels, mu).total
}

/// Central differences on every parameter of a minimal model, relative
/// error floored at 1e-6 in the denominator. A handful of
/// entries can straddle a ReLU or sampling-clamp kink; those are detected
/// by disagreement between two step sizes and reported separately.
pub fn gradient_check(flags: AblationFlags, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PmfNet::new(&tiny_config(), flags, &mut rng).map_err(|e| e.to_string())?;
    let images = vec![tiny_image(&mut rng), tiny_image(&mut rng)];
    let props: Vec<HoiProposal> = (0..3).map(|_| tiny_proposal(&mut rng)).collect();
    let samples: Vec<Sample<'_>> = props
        .iter()
        .enumerate()
        .map(|(i, p)| Sample {
            image: i % 2,
            proposal: p,
        })
        .collect();
    let labels = tiny_labels();
    let mu = 0.7;
    let mut grads = model.zeros_like();
    loss_and_gradients(&model, &images, &samples, &labels, mu, &mut grads)
        .map_err(|e| e.to_string())?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.to_vec()))
        .collect();

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut kinks = 0;
    for (ti, (name, ga)) in analytic.iter().enumerate() {
        for (k, &a) in ga.iter().enumerate() {
            let fd = |model: &mut PmfNet, eps: f64| {
                let orig = model.tensors_mut()[ti].data[k];
                model.tensors_mut()[ti].data[k] = orig + eps;
                let up = batch_loss(model, &images, &samples, &labels, mu);
                model.tensors_mut()[ti].data[k] = orig - eps;
                let down = batch_loss(model, &images, &samples, &labels, mu);
                model.tensors_mut()[ti].data[k] = orig;
                (up - down) / (2.0 * eps)
            };
            let n = fd(&mut model, 1e-5);
            let rel = |x: f64| (a - x).abs() / a.abs().max(x.abs()).max(1e-6);
            let mut err = rel(n);
            if err > 1e-4 {
                // a kink shows up as step-size dependence of the difference
                let n2 = fd(&mut model, 1e-6);
                let n3 = fd(&mut model, 1e-4);
                if (n2 - n3).abs() > 1e-3 * n2.abs().max(n3.abs()).max(1e-7) {
                    kinks += 1;
                    continue;
                }
                err = err.min(rel(n2));
            }
            checked += 1;
            if err > worst.0 {
                worst = (err, format!("{name}[{k}] analytic {a:.6e}"));
            }
        }
    }
    let total = checked + kinks;
    if kinks * 100 > total {
        return Err(format!(
            "{kinks} of {total} entries were non-differentiable"
        ));
    }
    if worst.0 > 1e-4 {
        return Err(format!("relative error {:.3e} at {}", worst.0, worst.1));
    }
    Ok(format!(
        "{checked} parameters, max relative error {:.2e}{}",
        worst.0,
        if kinks > 0 {
            format!(", {kinks} at kinks skipped")
        } else {
            String::new()
        }
    ))
}

// ---------------------------------------------------------------- evaluator

use pmf_core::eval::{evaluate, Detection, EvalOptions, EvalReport, GroundTruth};

use super::{ap_threshold_sweep, Det, Gt};

pub struct EvalFixture {
    pub dets: Vec<Det>,
    pub gts: Vec<Gt>,
    pub num_actions: u32,
}

fn jitter(b: &BBox, rng: &mut ChaCha8Rng, amount: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = || rng.gen_range(-amount..amount);
    BBox::new(
        b.x1 + d() * w,
        b.y1 + d() * h,
        b.x2 + d() * w,
        b.y2 + d() * h,
    )
    .unwrap_or(*b)
}

/// Ground truth on `images` images with true detections (some poorly
/// localised), duplicate detections and injected false positives. Every
/// detection score is distinct.
pub fn eval_fixture(images: u64, seed: u64) -> EvalFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_actions = 3;
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image in 0..images {
        for k in 0..rng.gen_range(1..=3) {
            let x = 60.0 * k as f64 + rng.gen_range(0.0..10.0);
            let human = BBox::new(x, 10.0, x + 20.0, 60.0).unwrap();
            let object = BBox::new(x + 22.0, 30.0, x + 32.0, 40.0).unwrap();
            for action in 0..num_actions {
                if rng.gen_bool(0.5) {
                    gts.push(Gt {
                        image,
                        human,
                        object,
                        action,
                    });
                }
                // detections for every action, true or not
                let n = rng.gen_range(0..=2);
                for _ in 0..n {
                    let amount = if rng.gen_bool(0.2) { 0.4 } else { 0.08 };
                    dets.push(Det {
                        image,
                        human: jitter(&human, &mut rng, amount),
                        object: jitter(&object, &mut rng, amount),
                        action,
                        score: 0.0,
                    });
                }
            }
        }
        // injected false positives away from every pair
        for _ in 0..rng.gen_range(1..=3) {
            let x = rng.gen_range(200.0..300.0);
            dets.push(Det {
                image,
                human: BBox::new(x, 0.0, x + 15.0, 40.0).unwrap(),
                object: BBox::new(x + 5.0, 5.0, x + 12.0, 12.0).unwrap(),
                action: rng.gen_range(0..num_actions),
                score: 0.0,
            });
        }
    }
    // distinct scores in random order
    let n = dets.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    for (d, p) in dets.iter_mut().zip(perm) {
        d.score = (p as f64 + rng.gen_range(0.1..0.9)) / n as f64;
    }
    EvalFixture {
        dets,
        gts,
        num_actions,
    }
}

pub fn to_detections(dets: &[Det]) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection {
            image_id: d.image,
            human_box: d.human,
            object_box: d.object,
            object_class: 0,
            action_id: d.action,
            score: d.score,
        })
        .collect()
}

pub fn to_ground_truth(gts: &[Gt]) -> Vec<GroundTruth> {
    gts.iter()
        .map(|g| GroundTruth {
            image_id: g.image,
            human_box: g.human,
            object_box: g.object,
            object_class: 0,
            action_id: g.action,
        })
        .collect()
}

fn run_eval(dets: &[Det], gts: &[Gt]) -> EvalReport {
    evaluate(
        &to_detections(dets),
        &to_ground_truth(gts),
        EvalOptions::default(),
        &[],
    )
    .unwrap()
}

/// Library mAP against the threshold-sweep oracle, compared bit for bit.
pub fn evaluator_oracle(seed: u64) -> Outcome {
    let fx = eval_fixture(10, seed);
    let report = run_eval(&fx.dets, &fx.gts);
    let mut aps = Vec::new();
    for a in 0..fx.num_actions {
        let want = ap_threshold_sweep(&fx.dets, &fx.gts, a, 0.5);
        let got = report
            .actions
            .iter()
            .find(|r| r.action_id == a)
            .and_then(|r| r.ap);
        if want.map(f64::to_bits) != got.map(f64::to_bits) {
            return Err(format!("action {a}: library {got:?}, oracle {want:?}"));
        }
        aps.extend(want);
    }
    let want_map = aps.iter().sum::<f64>() / aps.len() as f64;
    if report.map != Some(want_map) {
        return Err(format!("mAP {:?} vs oracle {want_map}", report.map));
    }
    let fps = report
        .actions
        .iter()
        .map(|a| a.num_detections - a.true_positives)
        .sum::<usize>();
    Ok(format!(
        "mAP {want_map:.6} equals oracle ({} detections, {fps} false positives)",
        fx.dets.len()
    ))
}

/// Score-order invariance, false-positive monotonicity and single use of
/// every ground truth, over randomized fixtures.
pub fn evaluator_properties(trials: u64, seed: u64) -> Outcome {
    for t in 0..trials {
        let fx = eval_fixture(4, seed.wrapping_add(t));
        let base = run_eval(&fx.dets, &fx.gts);
        let aps = |r: &EvalReport| r.actions.iter().map(|a| a.ap).collect::<Vec<_>>();

        // strictly increasing transform plus shuffled input order
        let mut moved: Vec<Det> = fx
            .dets
            .iter()
            .map(|d| Det {
                score: (3.0 * d.score).exp() - 7.0,
                ..d.clone()
            })
            .collect();
        moved.reverse();
        let r = run_eval(&moved, &fx.gts);
        if aps(&r) != aps(&base) {
            return Err(format!(
                "trial {t}: AP changed under a monotone score transform"
            ));
        }

        for a in &base.actions {
            if a.true_positives > a.num_gt {
                return Err(format!(
                    "trial {t}: action {} matched {} of {} ground truths",
                    a.action_id, a.true_positives, a.num_gt
                ));
            }
        }

        // dropping any one unmatched detection never lowers AP
        let matched = matched_flags(&fx.dets, &fx.gts);
        for (i, _) in matched.iter().enumerate().filter(|(_, m)| !**m) {
            let mut fewer = fx.dets.clone();
            let removed = fewer.remove(i);
            let r = run_eval(&fewer, &fx.gts);
            let (before, after) = (ap_of(&base, removed.action), ap_of(&r, removed.action));
            if after < before {
                return Err(format!(
                    "trial {t}: removing a false positive lowered AP {before} -> {after}"
                ));
            }
        }
    }
    Ok(format!("{trials} randomized trials"))
}

fn ap_of(r: &EvalReport, action: u32) -> f64 {
    r.actions
        .iter()
        .find(|a| a.action_id == action)
        .and_then(|a| a.ap)
        .unwrap_or(0.0)
}

/// Whether each detection is a true positive, from the oracle's greedy
/// matching at the lowest threshold.
fn matched_flags(dets: &[Det], gts: &[Gt]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut out = vec![false; dets.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image != d.image || gt.action != d.action {
                continue;
            }
            let q = super::iou(&d.human, &gt.human).min(super::iou(&d.object, &gt.object));
            if q >= 0.5 && best.is_none_or(|(_, bq)| q > bq) {
                best = Some((g, q));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            out[i] = true;
        }
    }
    out
}

// ---------------------------------------------------------------- loss

/// Objective on hand-built 3-sample batches against scalar arithmetic,
/// plus the single-sample worked case `3 ln 2`.
pub fn loss_oracle(batches: usize, seed: u64) -> Outcome {
    use ndarray::Array2;
    let worked = hoi_loss(
        &Array2::from_elem((1, 2), 0.5),
        Some(&Array1::from_elem(1, 0.5)),
        &[TrainingLabel {
            y: vec![true, false],
        }],
        1.0,
    );
    if (worked.total - 3.0 * std::f64::consts::LN_2).abs() > 1e-12 {
        return Err(format!("worked case gives {}", worked.total));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for n in 0..batches {
        let a = rng.gen_range(1..6);
        let mu = rng.gen_range(0.0..3.0);
        let gated = n % 4 != 3;
        let s_l = Array2::from_shape_fn((3, a), |_| rng.gen_range(1e-9..1.0));
        let s_g = Array1::from_shape_fn(3, |_| rng.gen_range(1e-9..1.0));
        let labels: Vec<TrainingLabel> = (0..3)
            .map(|_| TrainingLabel {
                y: (0..a).map(|_| rng.gen_bool(0.4)).collect(),
            })
            .collect();
        let got = hoi_loss(&s_l, gated.then_some(&s_g), &labels, mu).total;
        let mut want = 0.0;
        for i in 0..3 {
            let mut term = 0.0;
            for k in 0..a {
                term += super::bce(labels[i].y[k] as u8 as f64, s_l[[i, k]]);
            }
            if gated {
                let z = labels[i].y.iter().any(|&y| y);
                term += mu * super::bce(z as u8 as f64, s_g[i]);
            }
            want += term;
        }
        want /= 3.0;
        let err = (got - want).abs();
        worst = worst.max(err);
        if err > 1e-9 {
            return Err(format!("batch {n}: {got} vs {want}"));
        }
    }
    Ok(format!(
        "worked case 3 ln 2 exact, {batches} batches within {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- scores

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Score identities on random inputs and on model outputs with and
/// without the affinity gate.
pub fn score_algebra(trials: usize, seed: u64) -> Outcome {
    use pmf_core::network::{final_score, relation_score};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let a = rng.gen_range(1..10);
        let s_l: Vec<f64> = (0..a).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (s_g, s_h, s_o) = (
            rng.gen_range(1e-6..1.0),
            rng.gen_range(1e-6..1.0),
            rng.gen_range(1e-6..1.0),
        );
        let s_ho = relation_score(&s_l, s_g);
        let r = final_score(&s_ho, s_h, s_o);
        for k in 0..a {
            if s_ho[k] != s_l[k] * s_g {
                return Err(format!("trial {t}: s_ho differs from one rounded product"));
            }
            let exact = s_l[k] * s_g * s_h * s_o;
            if (r[k] - exact).abs() > 2.0 * f64::EPSILON * exact {
                return Err(format!("trial {t}: R off by more than rounding"));
            }
        }
        if argmax(&s_ho) != argmax(&s_l) {
            return Err(format!("trial {t}: argmax changed"));
        }
    }
    let gate_off = AblationFlags {
        interaction_affinity: false,
        ..AblationFlags::full()
    };
    let mut checked = 0;
    for (k, flags) in [AblationFlags::full(), gate_off].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
        let model = PmfNet::new(&tiny_config(), flags, &mut rng).map_err(|e| e.to_string())?;
        let images = vec![tiny_image(&mut rng)];
        let props: Vec<HoiProposal> = (0..8).map(|_| tiny_proposal(&mut rng)).collect();
        let samples: Vec<Sample<'_>> = props
            .iter()
            .map(|p| Sample {
                image: 0,
                proposal: p,
            })
            .collect();
        for p in model
            .predict(&images, &samples)
            .map_err(|e| e.to_string())?
        {
            if !flags.interaction_affinity && p.s_ho != p.s_l {
                return Err("gate off but s_ho != s_L".into());
            }
            if argmax(&p.s_ho) != argmax(&p.s_l) {
                return Err("model argmax of s_ho differs from s_L".into());
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{trials} random score sets and {checked} model outputs"
    ))
}
