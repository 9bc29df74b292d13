use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::shapes::{template, Vec3, Wireframe, CLASS_NAMES};
use super::SceneParams;
use crate::error::{Error, Result};
use crate::rotations::Quaternion;
use crate::seeding::derive_rng;

/// Projected radius of a unit vertex, as a fraction of the image size.
pub const PROJECTION_SCALE: f64 = 0.4;
pub const LINE_WIDTH: f64 = 1.6;
/// Std of per-vertex positional jitter.
pub const VERTEX_JITTER: f64 = 0.05;
/// Range of the per-axis scale jitter around 1.
pub const SCALE_JITTER: f64 = 0.12;

/// RGB triple with a constant channel sum: `base + amp·cos(2π(h − k/3))`.
pub fn hue_colour(hue: f64, base: f64, amp: f64) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (k, v) in c.iter_mut().enumerate() {
        *v = base + amp * (TAU * (hue - k as f64 / 3.0)).cos();
    }
    c
}

pub fn background_colour(floor_hue: f64) -> [f64; 3] {
    hue_colour(floor_hue, 0.25, 0.15)
}

pub fn line_colour(light_hue: f64) -> [f64; 3] {
    hue_colour(light_hue, 0.7, 0.25)
}

/// Template of `class_id` with the instance jitter drawn from `object_seed`.
pub fn object_wireframe(class_id: usize, object_seed: u64) -> Result<Wireframe> {
    let mut w = template(class_id).ok_or_else(|| {
        Error::Parameter(format!(
            "class id {class_id} outside [0, {})",
            CLASS_NAMES.len()
        ))
    })?;
    let mut rng = derive_rng(object_seed, &[0x5348_4150]);
    let scale: [f64; 3] =
        std::array::from_fn(|_| 1.0 + rng.gen_range(-SCALE_JITTER..=SCALE_JITTER));
    let noise = Normal::new(0.0, VERTEX_JITTER).expect("positive std");
    for v in &mut w.vertices {
        for k in 0..3 {
            v[k] = v[k] * scale[k] + noise.sample(&mut rng);
        }
    }
    Ok(w)
}

/// Orthographic projection after rotating by `q`: pixel `(column, row)` and
/// depth (positive towards the viewer). Pixel centres sit on integer
/// coordinates and the origin lands on `(size/2, size/2)`.
pub fn project(q: &Quaternion, v: Vec3, size: usize) -> (f64, f64, f64) {
    let r = q.rotate(v);
    let s = PROJECTION_SCALE * size as f64;
    let c = (size / 2) as f64;
    (c + s * r[0], c - s * r[1], r[2])
}

/// Renders a wireframe into a `3×size×size` channel-major image.
pub fn rasterise(
    wire: &Wireframe,
    q: &Quaternion,
    floor_hue: f64,
    light_hue: f64,
    size: usize,
) -> Vec<f32> {
    let bg = background_colour(floor_hue);
    let fg = line_colour(light_hue);
    let n = size * size;
    let mut img = vec![0f64; 3 * n];
    for (k, c) in bg.iter().enumerate() {
        img[k * n..(k + 1) * n].fill(*c);
    }
    let pts: Vec<(f64, f64, f64)> = wire.vertices.iter().map(|&v| project(q, v, size)).collect();
    let mut order: Vec<usize> = (0..wire.edges.len()).collect();
    let depth = |e: usize| {
        let (a, b) = wire.edges[e];
        pts[a].2 + pts[b].2
    };
    // painter's order: far edges first
    order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)).then(a.cmp(&b)));
    for e in order {
        let (a, b) = wire.edges[e];
        // nearer edges are brighter, which disambiguates mirrored poses
        let shade = 0.55 + 0.45 * ((depth(e) / 2.0 + 1.0) / 2.0).clamp(0.0, 1.0);
        let colour = fg.map(|c| c * shade);
        draw_segment(&mut img, size, pts[a], pts[b], colour);
    }
    img.into_iter().map(|v| v as f32).collect()
}

fn draw_segment(
    img: &mut [f64],
    size: usize,
    p: (f64, f64, f64),
    q: (f64, f64, f64),
    colour: [f64; 3],
) {
    let half = LINE_WIDTH / 2.0;
    let n = size * size;
    let (x0, y0, x1, y1) = (p.0, p.1, q.0, q.1);
    let lo_x = (x0.min(x1) - half - 1.0).floor().max(0.0) as usize;
    let hi_x = ((x0.max(x1) + half + 1.0).ceil().max(0.0) as usize).min(size - 1);
    let lo_y = (y0.min(y1) - half - 1.0).floor().max(0.0) as usize;
    let hi_y = ((y0.max(y1) + half + 1.0).ceil().max(0.0) as usize).min(size - 1);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    for py in lo_y..=hi_y {
        for px in lo_x..=hi_x {
            let (fx, fy) = (px as f64, py as f64);
            let t = if len2 > 0.0 {
                (((fx - x0) * dx + (fy - y0) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (x0 + t * dx - fx, y0 + t * dy - fy);
            let coverage = (half + 0.5 - (cx * cx + cy * cy).sqrt()).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let idx = py * size + px;
                for (k, c) in colour.iter().enumerate() {
                    let v = &mut img[k * n + idx];
                    *v += coverage * (c - *v);
                }
            }
        }
    }
}

/// Deterministic image for one view.
pub fn render_view(params: &SceneParams, object_seed: u64, size: usize) -> Result<Vec<f32>> {
    params.validate()?;
    if size < 4 {
        return Err(Error::Parameter(format!("image size {size} is too small")));
    }
    let wire = object_wireframe(params.class_id as usize, object_seed)?;
    Ok(rasterise(
        &wire,
        &params.quaternion,
        params.floor_hue,
        params.light_hue,
        size,
    ))
}
