//! Procedural shape rasterizer.
//!
//! Ten classes in three semantic families. Classes within a family share a
//! geometry generator: the polygon family is one regular-polygon rasterizer
//! with varying vertex count, the round family one conic rasterizer, and
//! the stroke family thin rectangles / annuli.
//!
//! Masks come from the analytic inside-predicate, not from thresholding the
//! noisy image, so ground truth is independent of the noise level.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BBox, LabeledImage, ShapesDataset};
use crate::error::{Error, Result};
use crate::rngutil;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 10;

/// Smallest image that keeps stroke widths above ~2.5 px.
const MIN_IMAGE_SIZE: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Polygon,
    Round,
    Stroke,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Polygon => "polygon",
            Family::Round => "round",
            Family::Stroke => "stroke",
        }
    }
}

/// Shared geometry generator backing a class; classes in one family use
/// the same generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    RegularPolygon,
    Conic,
    StrokeSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Triangle,
    Square,
    Pentagon,
    Hexagon,
    Circle,
    Ellipse,
    HorizontalBar,
    VerticalBar,
    Cross,
    Ring,
}

pub const ALL_CLASSES: [ShapeClass; NUM_CLASSES] = [
    ShapeClass::Triangle,
    ShapeClass::Square,
    ShapeClass::Pentagon,
    ShapeClass::Hexagon,
    ShapeClass::Circle,
    ShapeClass::Ellipse,
    ShapeClass::HorizontalBar,
    ShapeClass::VerticalBar,
    ShapeClass::Cross,
    ShapeClass::Ring,
];

impl ShapeClass {
    pub fn label(&self) -> usize {
        ALL_CLASSES.iter().position(|c| c == self).unwrap()
    }

    pub fn from_label(label: usize) -> Option<Self> {
        ALL_CLASSES.get(label).copied()
    }

    pub fn family(&self) -> Family {
        match self {
            ShapeClass::Triangle
            | ShapeClass::Square
            | ShapeClass::Pentagon
            | ShapeClass::Hexagon => Family::Polygon,
            ShapeClass::Circle | ShapeClass::Ellipse => Family::Round,
            ShapeClass::HorizontalBar
            | ShapeClass::VerticalBar
            | ShapeClass::Cross
            | ShapeClass::Ring => Family::Stroke,
        }
    }

    pub fn generator(&self) -> GeneratorKind {
        match self.family() {
            Family::Polygon => GeneratorKind::RegularPolygon,
            Family::Round => GeneratorKind::Conic,
            Family::Stroke => GeneratorKind::StrokeSet,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Triangle => "triangle",
            ShapeClass::Square => "square",
            ShapeClass::Pentagon => "pentagon",
            ShapeClass::Hexagon => "hexagon",
            ShapeClass::Circle => "circle",
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::HorizontalBar => "hbar",
            ShapeClass::VerticalBar => "vbar",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
        }
    }
}

pub fn family_of_label(label: usize) -> Option<Family> {
    ShapeClass::from_label(label).map(|c| c.family())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            image_size: 32,
            train_per_class: 500,
            val_per_class: 100,
            test_per_class: 100,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::ImageTooSmall {
                size: self.image_size,
                min: MIN_IMAGE_SIZE,
            });
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidParam(
                "per-class counts must be positive".into(),
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidParam("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Continuous-geometry description of a placed shape.
enum Geometry {
    /// Regular convex polygon: center, circumradius, rotation, vertex count.
    Polygon {
        cy: f64,
        cx: f64,
        radius: f64,
        rotation: f64,
        vertices: usize,
    },
    /// Rotated ellipse (circle when a == b).
    Conic {
        cy: f64,
        cx: f64,
        a: f64,
        b: f64,
        rotation: f64,
    },
    /// Union of rotated rectangles (length, thickness, angle).
    Bars {
        cy: f64,
        cx: f64,
        bars: Vec<(f64, f64, f64)>,
    },
    /// Annulus.
    Annulus {
        cy: f64,
        cx: f64,
        outer: f64,
        inner: f64,
    },
}

impl Geometry {
    fn contains(&self, py: f64, px: f64) -> bool {
        match self {
            Geometry::Polygon {
                cy,
                cx,
                radius,
                rotation,
                vertices,
            } => {
                let n = *vertices;
                let vs: Vec<(f64, f64)> = (0..n)
                    .map(|k| {
                        let ang = rotation + 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                        (cy + radius * ang.sin(), cx + radius * ang.cos())
                    })
                    .collect();
                // convex: point stays on one side of every edge
                let mut sign = 0.0f64;
                for k in 0..n {
                    let (ay, ax) = vs[k];
                    let (by, bx) = vs[(k + 1) % n];
                    let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                    if cross.abs() < 1e-12 {
                        continue;
                    }
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
                true
            }
            Geometry::Conic {
                cy,
                cx,
                a,
                b,
                rotation,
            } => {
                let (dy, dx) = (py - cy, px - cx);
                let (s, c) = rotation.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
            }
            Geometry::Bars { cy, cx, bars } => {
                let (dy, dx) = (py - cy, px - cx);
                bars.iter().any(|&(len, thick, angle)| {
                    let (s, c) = angle.sin_cos();
                    let u = dx * c + dy * s;
                    let v = -dx * s + dy * c;
                    u.abs() <= len / 2.0 && v.abs() <= thick / 2.0
                })
            }
            Geometry::Annulus {
                cy,
                cx,
                outer,
                inner,
            } => {
                let d = ((py - cy) * (py - cy) + (px - cx) * (px - cx)).sqrt();
                d <= *outer && d >= *inner
            }
        }
    }
}

/// Center placement keeping the full extent inside the image with margin.
fn place(extent: f64, size: usize, rng: &mut impl Rng) -> (f64, f64) {
    let lo = extent + 1.0;
    let hi = size as f64 - extent - 1.0;
    (rand_in(lo, hi, rng), rand_in(lo, hi, rng))
}

/// Samples a placed shape for `class`. Extents scale with image size / 32.
fn sample_geometry(class: ShapeClass, size: usize, rng: &mut impl Rng) -> Geometry {
    let unit = size as f64 / 32.0;
    let two_pi = 2.0 * std::f64::consts::PI;
    match class {
        ShapeClass::Triangle | ShapeClass::Square | ShapeClass::Pentagon | ShapeClass::Hexagon => {
            // corner counts need enough pixels to read at 32x32; keeping
            // polygons large and circles strictly smaller separates the
            // near-round classes
            let vertices = match class {
                ShapeClass::Triangle => 3,
                ShapeClass::Square => 4,
                ShapeClass::Pentagon => 5,
                _ => 6,
            };
            let radius = rand_in(9.0 * unit, 12.5 * unit, rng);
            let rotation = rand_in(0.0, two_pi, rng);
            let (cy, cx) = place(radius, size, rng);
            Geometry::Polygon {
                cy,
                cx,
                radius,
                rotation,
                vertices,
            }
        }
        ShapeClass::Circle => {
            let r = rand_in(5.5 * unit, 8.5 * unit, rng);
            let (cy, cx) = place(r, size, rng);
            Geometry::Conic {
                cy,
                cx,
                a: r,
                b: r,
                rotation: 0.0,
            }
        }
        ShapeClass::Ellipse => {
            let a = rand_in(8.0 * unit, 12.0 * unit, rng);
            let b = a * rand_in(0.40, 0.60, rng);
            let rotation = rand_in(0.0, two_pi, rng);
            let (cy, cx) = place(a, size, rng);
            Geometry::Conic {
                cy,
                cx,
                a,
                b,
                rotation,
            }
        }
        ShapeClass::HorizontalBar | ShapeClass::VerticalBar => {
            let len = rand_in(18.0 * unit, 26.0 * unit, rng);
            let thick = rand_in(3.0 * unit, 5.0 * unit, rng);
            let base = if class == ShapeClass::HorizontalBar {
                0.0
            } else {
                std::f64::consts::FRAC_PI_2
            };
            let angle = base + rand_in(-0.25, 0.25, rng);
            let extent = 0.5 * (len * len + thick * thick).sqrt();
            let (cy, cx) = place(extent, size, rng);
            Geometry::Bars {
                cy,
                cx,
                bars: vec![(len, thick, angle)],
            }
        }
        ShapeClass::Cross => {
            let len = rand_in(16.0 * unit, 22.0 * unit, rng);
            let thick = rand_in(3.0 * unit, 5.0 * unit, rng);
            let angle = rand_in(-0.25, 0.25, rng);
            let extent = 0.5 * (len * len + thick * thick).sqrt();
            let (cy, cx) = place(extent, size, rng);
            Geometry::Bars {
                cy,
                cx,
                bars: vec![
                    (len, thick, angle),
                    (len, thick, angle + std::f64::consts::FRAC_PI_2),
                ],
            }
        }
        ShapeClass::Ring => {
            let outer = rand_in(7.0 * unit, 11.0 * unit, rng);
            let inner = outer * rand_in(0.50, 0.65, rng);
            let (cy, cx) = place(outer, size, rng);
            Geometry::Annulus {
                cy,
                cx,
                outer,
                inner,
            }
        }
    }
}

fn rand_in(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn render_sample(
    class: ShapeClass,
    config: &ShapesConfig,
    rng: &mut impl Rng,
) -> LabeledImage {
    let s = config.image_size;
    let geometry = sample_geometry(class, s, rng);
    let intensity = rand_in(0.6, 1.0, rng);
    // 2x2 supersampled coverage; the mask is the majority-coverage pixel
    // set, so it stays analytic and noise-independent
    let mut coverage = vec![0.0f64; s * s];
    let mut mask = vec![false; s * s];
    for r in 0..s {
        for c in 0..s {
            let mut hits = 0;
            for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if geometry.contains(r as f64 + dy, c as f64 + dx) {
                    hits += 1;
                }
            }
            coverage[r * s + c] = hits as f64 / 4.0;
            mask[r * s + c] = hits >= 2;
        }
    }
    let mut pixels = vec![0.0f64; s * s];
    for (p, &cov) in pixels.iter_mut().zip(&coverage) {
        let noise = if config.noise > 0.0 {
            config.noise * rngutil::standard_normal(rng)
        } else {
            0.0
        };
        *p = (intensity * cov + noise).clamp(0.0, 1.0);
    }
    let bbox = BBox::tight(&mask, s, s).expect("placed shape covers at least one pixel");
    LabeledImage {
        image: Tensor::from_vec(&[1, s, s], pixels).unwrap(),
        label: class.label(),
        mask: Some(mask),
        bbox: Some(bbox),
    }
}

fn render_split(config: &ShapesConfig, split_id: u64, per_class: usize) -> Vec<LabeledImage> {
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for idx in 0..per_class {
        for class in ALL_CLASSES {
            let stream =
                (split_id << 40) ^ ((class.label() as u64) << 32) ^ idx as u64;
            let mut rng = rngutil::rng_for(config.seed, 0xD47A_0000 ^ stream);
            out.push(render_sample(class, config, &mut rng));
        }
    }
    out
}

/// Deterministic in the seed; samples within each split interleave classes.
pub fn generate_shapes(config: &ShapesConfig) -> Result<ShapesDataset> {
    config.validate()?;
    Ok(ShapesDataset {
        config: config.clone(),
        train: render_split(config, 1, config.train_per_class),
        val: render_split(config, 2, config.val_per_class),
        test: render_split(config, 3, config.test_per_class),
    })
}
