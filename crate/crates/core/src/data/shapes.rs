//! Synthetic scenes of colored primitives with captions, question/answer pairs and a
//! pixel-level checker that recovers the scene from rendered pixels.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::input::RawImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
const BACKGROUND: [u8; 3] = [16, 16, 16];

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

/// One primitive in a quadrant (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Primitive {
    pub shape: ShapeKind,
    pub color: Color,
    pub quadrant: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub size: usize,
    /// Sorted by quadrant; colors are distinct.
    pub prims: Vec<Primitive>,
    /// Top-left corner of each primitive's box, relative to its quadrant.
    pub offsets: Vec<(usize, usize)>,
}

fn shape_side(size: usize) -> usize {
    (size / 2) * 5 / 8
}

pub fn random_scene<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Result<Scene> {
    if size < 16 || size % 2 != 0 {
        return Err(Error::Config(format!("scene size {size} must be even and at least 16")));
    }
    let count = rng.random_range(1..=3);
    let mut quadrants = [0usize, 1, 2, 3];
    quadrants.shuffle(rng);
    let mut chosen = quadrants[..count].to_vec();
    chosen.sort_unstable();
    let mut colors = COLORS;
    colors.shuffle(rng);
    let half = size / 2;
    let side = shape_side(size);
    let slack = half - side - 2;
    let mut prims = Vec::with_capacity(count);
    let mut offsets = Vec::with_capacity(count);
    for (i, &q) in chosen.iter().enumerate() {
        prims.push(Primitive {
            shape: SHAPES[rng.random_range(0..SHAPES.len())],
            color: colors[i],
            quadrant: q,
        });
        offsets.push((1 + rng.random_range(0..=slack), 1 + rng.random_range(0..=slack)));
    }
    Ok(Scene { size, prims, offsets })
}

fn covers(shape: ShapeKind, side: usize, x: usize, y: usize) -> bool {
    let s = side as f64;
    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
    match shape {
        ShapeKind::Square => true,
        ShapeKind::Circle => {
            let r = s / 2.0;
            (fx - r).powi(2) + (fy - r).powi(2) <= r * r
        }
        ShapeKind::Triangle => {
            // apex at the top center, base along the bottom edge
            let half_width = fy / s * s / 2.0;
            (fx - s / 2.0).abs() <= half_width
        }
    }
}

pub fn render(scene: &Scene) -> Result<RawImage> {
    let mut img = RawImage::filled(scene.size, scene.size, BACKGROUND)?;
    let half = scene.size / 2;
    let side = shape_side(scene.size);
    for (p, &(ox, oy)) in scene.prims.iter().zip(&scene.offsets) {
        let (qx, qy) = ((p.quadrant % 2) * half, (p.quadrant / 2) * half);
        for y in 0..side {
            for x in 0..side {
                if covers(p.shape, side, x, y) {
                    img.set_pixel(qx + ox + x, qy + oy + y, p.color.rgb());
                }
            }
        }
    }
    Ok(img)
}

/// Shapes in quadrant order, e.g. "red square, blue circle".
pub fn caption(prims: &[Primitive]) -> String {
    prims
        .iter()
        .map(|p| format!("{} {}", p.color.name(), p.shape.name()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn count_word(n: usize) -> &'static str {
    ["zero", "one", "two", "three", "four"][n.min(4)]
}

/// A question about the scene and its answer.
pub fn random_qa<R: Rng + ?Sized>(rng: &mut R, scene: &Scene) -> (String, String) {
    let prims = &scene.prims;
    match rng.random_range(0..4) {
        0 => ("describe the image.".into(), caption(prims)),
        1 => ("how many shapes?".into(), count_word(prims.len()).into()),
        2 => {
            let p = prims[rng.random_range(0..prims.len())];
            let same_kind = prims.iter().filter(|q| q.shape == p.shape).count();
            if same_kind == 1 {
                (format!("what color is the {}?", p.shape.name()), p.color.name().into())
            } else {
                ("describe the image.".into(), caption(prims))
            }
        }
        _ => {
            let c = COLORS[rng.random_range(0..COLORS.len())];
            let present = prims.iter().any(|p| p.color == c);
            (
                format!("is there a {} shape?", c.name()),
                if present { "yes" } else { "no" }.into(),
            )
        }
    }
}

fn nearest_color(rgb: [u8; 3]) -> Option<Color> {
    let dist = |a: [u8; 3], b: [u8; 3]| -> i32 { (0..3).map(|i| (a[i] as i32 - b[i] as i32).pow(2)).sum() };
    COLORS
        .iter()
        .copied()
        .map(|c| (dist(rgb, c.rgb()), c))
        .min_by_key(|&(d, _)| d)
        .filter(|&(d, _)| d < 60 * 60)
        .map(|(_, c)| c)
}

/// Recovers primitives from pixels: per quadrant, the dominant palette color and the
/// fill ratio of its bounding box (square ≈ 1, circle ≈ π/4, triangle ≈ 1/2).
pub fn detect(img: &RawImage) -> Vec<Primitive> {
    let half = img.width() / 2;
    let mut out = Vec::new();
    for q in 0..4 {
        let (qx, qy) = ((q % 2) * half, (q / 2) * half);
        let mut hits: Vec<(Color, usize, usize)> = Vec::new();
        for y in qy..qy + half {
            for x in qx..qx + half {
                if let Some(c) = nearest_color(img.pixel(x, y)) {
                    hits.push((c, x, y));
                }
            }
        }
        let Some(color) = COLORS
            .iter()
            .copied()
            .max_by_key(|&c| hits.iter().filter(|h| h.0 == c).count())
            .filter(|&c| hits.iter().filter(|h| h.0 == c).count() >= 8)
        else {
            continue;
        };
        let pts: Vec<_> = hits.iter().filter(|h| h.0 == color).collect();
        let (x0, x1) = (pts.iter().map(|p| p.1).min().unwrap(), pts.iter().map(|p| p.1).max().unwrap());
        let (y0, y1) = (pts.iter().map(|p| p.2).min().unwrap(), pts.iter().map(|p| p.2).max().unwrap());
        let fill = pts.len() as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        let shape = if fill > 0.92 {
            ShapeKind::Square
        } else if fill > 0.66 {
            ShapeKind::Circle
        } else {
            ShapeKind::Triangle
        };
        out.push(Primitive {
            shape,
            color,
            quadrant: q,
        });
    }
    out
}
