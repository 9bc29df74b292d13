//! Wireframe polyhedron templates, one per class.

use std::f64::consts::TAU;

pub type Vec3 = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Wireframe {
    pub vertices: Vec<Vec3>,
    pub edges: Vec<(usize, usize)>,
}

pub const CLASS_NAMES: [&str; 8] = [
    "tetrahedron",
    "cube",
    "octahedron",
    "triangular-prism",
    "square-pyramid",
    "pentagonal-prism",
    "l-shape",
    "cross",
];

fn prism(sides: usize, radius: f64, half_height: f64, phase: f64) -> Wireframe {
    let mut vertices = Vec::new();
    for &z in &[-half_height, half_height] {
        for k in 0..sides {
            let a = phase + TAU * k as f64 / sides as f64;
            vertices.push([radius * a.cos(), radius * a.sin(), z]);
        }
    }
    let mut edges = Vec::new();
    for k in 0..sides {
        let n = (k + 1) % sides;
        edges.push((k, n));
        edges.push((sides + k, sides + n));
        edges.push((k, sides + k));
    }
    Wireframe { vertices, edges }
}

/// Closed outline of a planar polygon extruded along z.
fn extrude(outline: &[[f64; 2]], half_depth: f64) -> Wireframe {
    let n = outline.len();
    let mut vertices = Vec::with_capacity(2 * n);
    for &z in &[-half_depth, half_depth] {
        vertices.extend(outline.iter().map(|p| [p[0], p[1], z]));
    }
    let mut edges = Vec::new();
    for k in 0..n {
        edges.push((k, (k + 1) % n));
        edges.push((n + k, n + (k + 1) % n));
        edges.push((k, n + k));
    }
    Wireframe { vertices, edges }
}

/// Fixed tilt baked into every template so the unrotated view is not a
/// face-on silhouette.
const TEMPLATE_TILT: (f64, f64) = (0.45, 0.6);

fn tilt(v: Vec3) -> Vec3 {
    let (a, b) = TEMPLATE_TILT;
    let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
    // about x by a, then about y by b
    let (x, y, z) = (v[0], ca * v[1] - sa * v[2], sa * v[1] + ca * v[2]);
    [cb * x + sb * z, y, -sb * x + cb * z]
}

/// Canonical template of `class_id`, centred with circumradius about 1.
pub fn template(class_id: usize) -> Option<Wireframe> {
    let mut w = match class_id {
        0 => {
            let s = 1.0 / 3f64.sqrt();
            Wireframe {
                vertices: vec![[s, s, s], [s, -s, -s], [-s, s, -s], [-s, -s, s]],
                edges: vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
            }
        }
        1 => {
            let s = 1.0 / 3f64.sqrt();
            let vertices: Vec<Vec3> = (0..8)
                .map(|k| {
                    [
                        if k & 1 == 0 { -s } else { s },
                        if k & 2 == 0 { -s } else { s },
                        if k & 4 == 0 { -s } else { s },
                    ]
                })
                .collect();
            let mut edges = Vec::new();
            for a in 0..8usize {
                for bit in [1, 2, 4] {
                    if a & bit == 0 {
                        edges.push((a, a | bit));
                    }
                }
            }
            Wireframe { vertices, edges }
        }
        2 => Wireframe {
            vertices: vec![
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [0.0, 0.0, 1.0],
                [0.0, 0.0, -1.0],
            ],
            edges: vec![
                (0, 2),
                (0, 3),
                (0, 4),
                (0, 5),
                (1, 2),
                (1, 3),
                (1, 4),
                (1, 5),
                (2, 4),
                (2, 5),
                (3, 4),
                (3, 5),
            ],
        },
        3 => prism(3, 0.8, 0.6, 0.0),
        4 => {
            let s = 0.75;
            Wireframe {
                vertices: vec![
                    [s, s, -0.5],
                    [-s, s, -0.5],
                    [-s, -s, -0.5],
                    [s, -s, -0.5],
                    [0.0, 0.0, 0.9],
                ],
                edges: vec![
                    (0, 1),
                    (1, 2),
                    (2, 3),
                    (3, 0),
                    (0, 4),
                    (1, 4),
                    (2, 4),
                    (3, 4),
                ],
            }
        }
        5 => prism(5, 0.75, 0.65, 0.3),
        6 => extrude(
            &[
                [-0.7, -0.8],
                [0.7, -0.8],
                [0.7, -0.3],
                [-0.2, -0.3],
                [-0.2, 0.8],
                [-0.7, 0.8],
            ],
            0.35,
        ),
        7 => {
            let (a, b) = (0.3, 0.85);
            extrude(
                &[
                    [-a, -b],
                    [a, -b],
                    [a, -a],
                    [b, -a],
                    [b, a],
                    [a, a],
                    [a, b],
                    [-a, b],
                    [-a, a],
                    [-b, a],
                    [-b, -a],
                    [-a, -a],
                ],
                0.3,
            )
        }
        _ => return None,
    };
    w.vertices.iter_mut().for_each(|v| *v = tilt(*v));
    Some(w)
}
