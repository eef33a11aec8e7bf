//! Attention overlays: boxes, skeleton and per-joint attention markers on
//! the upscaled image, plus the spatial configuration map of every
//! proposal as grayscale images and a raw grid file.

use std::path::Path;

use anyhow::{anyhow, Context};
use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use pmf_core::data::{object_color, render_image};
use pmf_core::geometry::JOINT_NAMES;
use pmf_core::inference::{predict_image, PairPrediction};
use pmf_core::scm::{build_scm, write_grid, Skeleton, COCO_SKELETON, SCM_CHANNELS};
use pmf_core::BBox;
use serde::Serialize;

use crate::commands::{load_data, load_model, CmdResult};
use crate::{Failure, VisualizeArgs};

/// Joints whose attention exceeds this value are highlighted.
pub const HIGHLIGHT: f64 = 0.7;

#[derive(Serialize)]
struct JointEntry {
    joint: &'static str,
    beta: f64,
    highlighted: bool,
}

#[derive(Serialize)]
struct ProposalEntry {
    human_id: u64,
    object_id: u64,
    overlay: String,
    scm_images: Vec<String>,
    scm_grid: String,
    s_g: f64,
    r: Vec<f64>,
    /// Absent when the model has no attention component.
    joints: Option<Vec<JointEntry>>,
}

#[derive(Serialize)]
struct Legend {
    image_id: u64,
    highlight_threshold: f64,
    scale: u32,
    proposals: Vec<ProposalEntry>,
}

fn to_rgb(pixels: &Array3<f64>, scale: u32) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
        let (r, c) = ((y / scale) as usize, (x / scale) as usize);
        let q = |k: usize| (pixels[[r, c, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

fn rgb(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Blue for low attention through to red for high.
fn beta_color(beta: f64) -> Rgb<u8> {
    let t = beta.clamp(0.0, 1.0);
    rgb([t, 0.2 + 0.3 * (1.0 - (2.0 * t - 1.0).abs()), 1.0 - t])
}

fn put(img: &mut RgbImage, x: i32, y: i32, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_rect(img: &mut RgbImage, (x0, y0): (i32, i32), (x1, y1): (i32, i32), color: Rgb<u8>) {
    for x in x0..=x1 {
        put(img, x, y0, color);
        put(img, x, y1, color);
    }
    for y in y0..=y1 {
        put(img, x0, y, color);
        put(img, x1, y, color);
    }
}

fn draw_box(img: &mut RgbImage, b: &BBox, scale: f64, color: Rgb<u8>) {
    let p0 = ((b.x1 * scale).round() as i32, (b.y1 * scale).round() as i32);
    let p1 = (
        (b.x2 * scale).round() as i32 - 1,
        (b.y2 * scale).round() as i32 - 1,
    );
    // a two-pixel outline
    draw_rect(img, p0, p1, color);
    if p1.0 - p0.0 > 2 && p1.1 - p0.1 > 2 {
        draw_rect(img, (p0.0 + 1, p0.1 + 1), (p1.0 - 1, p1.1 - 1), color);
    }
}

/// Samples the segment at sub-pixel spacing.
fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()) * 2.0)
        .ceil()
        .max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        put(img, x.round() as i32, y.round() as i32, color);
    }
}

/// Filled disc, or a one-pixel ring when `ring` is set.
fn draw_circle(img: &mut RgbImage, (cx, cy): (i32, i32), radius: i32, ring: bool, color: Rgb<u8>) {
    let outer = (radius * radius + radius) as i64;
    let inner = ((radius - 1) * (radius - 1) + (radius - 1)) as i64;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d = (dx * dx + dy * dy) as i64;
            if d <= outer && (!ring || d > inner) {
                put(img, cx + dx, cy + dy, color);
            }
        }
    }
}

fn overlay(base: &RgbImage, p: &PairPrediction, scale: u32) -> RgbImage {
    let mut img = base.clone();
    let s = scale as f64;
    let prop = &p.pair.proposal;
    draw_box(&mut img, &prop.human, s, Rgb([255, 255, 255]));
    draw_box(
        &mut img,
        &prop.object,
        s,
        rgb(object_color(prop.object_class)),
    );
    let joints = prop.pose.joints();
    let at = |k: usize| (joints[k].x * s, joints[k].y * s);
    for &(a, b) in COCO_SKELETON.iter() {
        draw_line(&mut img, at(a), at(b), Rgb([160, 160, 160]));
    }
    let radius = (scale as i32).max(2);
    for k in 0..joints.len() {
        let (x, y) = at(k);
        let c = (x.round() as i32, y.round() as i32);
        match &p.prediction.beta {
            Some(beta) => {
                draw_circle(&mut img, c, radius, false, beta_color(beta[k]));
                if beta[k] > HIGHLIGHT {
                    draw_circle(&mut img, c, radius + 2, true, Rgb([255, 230, 0]));
                }
            }
            None => draw_circle(&mut img, c, radius, false, Rgb([200, 200, 200])),
        }
    }
    img
}

fn gray(channel: &Array2<f64>) -> GrayImage {
    let (h, w) = channel.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(channel[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save_png(img: impl Into<image::DynamicImage>, path: &Path) -> CmdResult {
    img.into()
        .save_with_format(path, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::runtime)
}

pub fn run(args: VisualizeArgs) -> CmdResult {
    if args.scale == 0 {
        return Err(Failure::input(anyhow!("--scale must be positive")));
    }
    let (ds, base) = load_data(&args.data)?;
    let model = load_model(&args.ckpt, &ds)?;
    let pixels = render_image(&ds, args.image, Some(&base)).map_err(Failure::input)?;
    let pairs = ds.pair_proposals(args.image).map_err(Failure::input)?;
    let preds = predict_image(&model, &pixels, pairs).map_err(|e| Failure::runtime(anyhow!(e)))?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::runtime)?;

    let base_img = to_rgb(&pixels, args.scale);
    let cfg = model.config();
    let skeleton = Skeleton::coco();
    let mut entries = Vec::with_capacity(preds.len());
    for p in &preds {
        let stem = format!(
            "image_{}_pair_{}_{}",
            args.image, p.pair.human_id, p.pair.object_id
        );
        let overlay_name = format!("{stem}.png");
        save_png(
            overlay(&base_img, p, args.scale),
            &args.out.join(&overlay_name),
        )?;

        let scm = build_scm(&p.pair.proposal, cfg.scm_size, &skeleton, cfg.pen_width)
            .map_err(|e| Failure::runtime(anyhow!(e)))?;
        let mut scm_images = Vec::with_capacity(SCM_CHANNELS.len());
        for (k, name) in SCM_CHANNELS.iter().enumerate() {
            let file = format!("{stem}_scm_{name}.png");
            save_png(gray(&scm.channel(k)), &args.out.join(&file))?;
            scm_images.push(file);
        }
        let grid_name = format!("{stem}_scm.grid");
        let grid_path = args.out.join(&grid_name);
        let mut f = std::fs::File::create(&grid_path)
            .with_context(|| format!("creating {}", grid_path.display()))
            .map_err(Failure::runtime)?;
        write_grid(&mut f, &scm.grid, &SCM_CHANNELS).map_err(Failure::runtime)?;

        entries.push(ProposalEntry {
            human_id: p.pair.human_id,
            object_id: p.pair.object_id,
            overlay: overlay_name,
            scm_images,
            scm_grid: grid_name,
            s_g: p.prediction.s_g,
            r: p.prediction.r.clone(),
            joints: p.prediction.beta.as_ref().map(|beta| {
                beta.iter()
                    .zip(JOINT_NAMES)
                    .map(|(&b, joint)| JointEntry {
                        joint,
                        beta: b,
                        highlighted: b > HIGHLIGHT,
                    })
                    .collect()
            }),
        });
    }
    let legend = Legend {
        image_id: args.image,
        highlight_threshold: HIGHLIGHT,
        scale: args.scale,
        proposals: entries,
    };
    let json = serde_json::to_string_pretty(&legend)
        .context("serialising legend")
        .map_err(Failure::runtime)?;
    let legend_path = args.out.join("legend.json");
    std::fs::write(&legend_path, format!("{json}\n"))
        .with_context(|| format!("writing {}", legend_path.display()))
        .map_err(Failure::runtime)?;
    println!(
        "wrote {} overlays for image {} to {}",
        preds.len(),
        args.image,
        args.out.display()
    );
    Ok(())
}
