//! Procedural glyph prototypes for the letters A to J.
//!
//! Each letter is a list of strokes in a unit box (x right, y down). A style
//! varies stroke weight, slant, width, serifs and curve resolution, so the
//! prototypes of one class look like the same letter in different fonts.

use std::f64::consts::PI;

use crate::tensor::Tensor;

pub const LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

type Pt = (f64, f64);

#[derive(Clone, Copy, Debug)]
pub struct Style {
    /// Stroke width as a fraction of the glyph height.
    pub weight: f64,
    /// Horizontal shift per unit of height (italic slant).
    pub slant: f64,
    /// Glyph width relative to height.
    pub width: f64,
    pub serif: bool,
    /// Segments per half circle; small values give angular curves.
    pub curve_segments: usize,
    /// Glyph height as a fraction of the image height.
    pub height: f64,
}

/// The built-in font styles.
pub const STYLES: [Style; 12] = [
    Style { weight: 0.12, slant: 0.0, width: 0.70, serif: false, curve_segments: 24, height: 0.62 },
    Style { weight: 0.20, slant: 0.0, width: 0.75, serif: false, curve_segments: 24, height: 0.62 },
    Style { weight: 0.09, slant: 0.0, width: 0.65, serif: true, curve_segments: 24, height: 0.64 },
    Style { weight: 0.14, slant: 0.22, width: 0.68, serif: false, curve_segments: 24, height: 0.60 },
    Style { weight: 0.15, slant: 0.0, width: 0.55, serif: false, curve_segments: 24, height: 0.66 },
    Style { weight: 0.13, slant: 0.0, width: 0.90, serif: false, curve_segments: 24, height: 0.56 },
    Style { weight: 0.16, slant: 0.0, width: 0.72, serif: false, curve_segments: 3, height: 0.62 },
    Style { weight: 0.11, slant: 0.15, width: 0.70, serif: true, curve_segments: 24, height: 0.60 },
    Style { weight: 0.24, slant: 0.0, width: 0.80, serif: true, curve_segments: 24, height: 0.60 },
    Style { weight: 0.10, slant: -0.12, width: 0.62, serif: false, curve_segments: 4, height: 0.64 },
    Style { weight: 0.18, slant: 0.10, width: 0.85, serif: false, curve_segments: 2, height: 0.58 },
    Style { weight: 0.08, slant: 0.0, width: 0.75, serif: false, curve_segments: 24, height: 0.68 },
];

/// Elliptical arc around `c` with radii `(rx, ry)` from `a0` to `a1` degrees
/// (0 = right, 90 = down).
fn arc(c: Pt, rx: f64, ry: f64, a0: f64, a1: f64, per_half: usize) -> Vec<Pt> {
    let n = (((a1 - a0).abs() / 180.0) * per_half as f64).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let a = (a0 + (a1 - a0) * k as f64 / n as f64) * PI / 180.0;
            (c.0 + rx * a.cos(), c.1 + ry * a.sin())
        })
        .collect()
}

fn line(a: Pt, b: Pt) -> Vec<Pt> {
    vec![a, b]
}

fn join(parts: Vec<Vec<Pt>>) -> Vec<Pt> {
    parts.into_iter().flatten().collect()
}

/// Polylines of a letter in the unit box.
pub fn strokes(class: usize, curve_segments: usize) -> Vec<Vec<Pt>> {
    let k = curve_segments;
    match class {
        0 => vec![
            vec![(0.0, 1.0), (0.5, 0.0), (1.0, 1.0)],
            line((0.22, 0.62), (0.78, 0.62)),
        ],
        1 => vec![
            line((0.0, 0.0), (0.0, 1.0)),
            join(vec![
                vec![(0.0, 0.0), (0.55, 0.0)],
                arc((0.55, 0.24), 0.4, 0.24, -90.0, 90.0, k),
                vec![(0.0, 0.48)],
            ]),
            join(vec![
                vec![(0.0, 0.48), (0.58, 0.48)],
                arc((0.58, 0.74), 0.42, 0.26, -90.0, 90.0, k),
                vec![(0.0, 1.0)],
            ]),
        ],
        2 => vec![arc((0.55, 0.5), 0.55, 0.5, -40.0, -320.0, k)],
        3 => vec![join(vec![
            vec![(0.0, 1.0), (0.0, 0.0), (0.35, 0.0)],
            arc((0.35, 0.5), 0.65, 0.5, -90.0, 90.0, k),
            vec![(0.0, 1.0)],
        ])],
        4 => vec![
            vec![(1.0, 0.0), (0.0, 0.0), (0.0, 1.0), (1.0, 1.0)],
            line((0.0, 0.5), (0.8, 0.5)),
        ],
        5 => vec![
            vec![(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)],
            line((0.0, 0.5), (0.8, 0.5)),
        ],
        6 => vec![join(vec![
            arc((0.55, 0.5), 0.55, 0.5, -40.0, -330.0, k),
            vec![(1.03, 0.56), (0.6, 0.56)],
        ])],
        7 => vec![
            line((0.0, 0.0), (0.0, 1.0)),
            line((1.0, 0.0), (1.0, 1.0)),
            line((0.0, 0.5), (1.0, 0.5)),
        ],
        8 => vec![
            line((0.5, 0.0), (0.5, 1.0)),
            line((0.2, 0.0), (0.8, 0.0)),
            line((0.2, 1.0), (0.8, 1.0)),
        ],
        9 => vec![
            join(vec![
                vec![(0.85, 0.0), (0.85, 0.68)],
                arc((0.45, 0.68), 0.4, 0.32, 0.0, 180.0, k),
            ]),
            line((0.45, 0.0), (1.0, 0.0)),
        ],
        _ => panic!("class {class} has no glyph"),
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Rasterize a letter in a style into an `h x w` coverage map.
pub fn render(class: usize, style: &Style, h: usize, w: usize) -> Tensor {
    let gh = style.height * h as f64;
    let gw = style.width * gh;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let to_px = |(u, v): Pt| -> Pt {
        let x = cx + (u - 0.5) * gw + style.slant * (0.5 - v) * gh;
        let y = cy + (v - 0.5) * gh;
        (x, y)
    };
    let mut segs: Vec<(Pt, Pt)> = Vec::new();
    for stroke in strokes(class, style.curve_segments) {
        let pts: Vec<Pt> = stroke.iter().map(|&p| to_px(p)).collect();
        for pair in pts.windows(2) {
            segs.push((pair[0], pair[1]));
        }
        if style.serif {
            for &(u, v) in [stroke[0], stroke[stroke.len() - 1]].iter() {
                if v <= 0.0 || v >= 1.0 {
                    let half = 0.12;
                    segs.push((to_px((u - half, v)), to_px((u + half, v))));
                }
            }
        }
    }
    let half_width = 0.5 * style.weight * gh;
    let mut data = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let p = (j as f64, i as f64);
            let d = segs
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            data[i * w + j] = (half_width - d + 0.5).clamp(0.0, 1.0);
        }
    }
    Tensor::from_parts(vec![1, h, w], data)
}
