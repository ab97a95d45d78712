//! Deterministic synthetic scenes with pixel-exact concept masks.
//!
//! Class objects sit near grid-cell centres so that every object claims at
//! least one cell. Concept shapes are scattered freely, or, under a confound,
//! stamped onto objects of one class. Rendering has no anti-aliasing: a pixel
//! belongs to a shape iff its centre does.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};

/// A cell is labelled with a class when that class's shape covers more than
/// this fraction of the cell.
pub const CELL_COVERAGE_THRESHOLD: f32 = 0.25;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Ring,
    Cross,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "disc" => ShapeKind::Disc,
            "rectangle" => ShapeKind::Rectangle,
            "ring" => ShapeKind::Ring,
            "cross" => ShapeKind::Cross,
            _ => return None,
        })
    }
}

/// How to draw one family of shapes. `size` is the radius (half-width for
/// rectangles and crosses) range in pixels; `count` the inclusive range of
/// instances per scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecipe {
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub size: (f32, f32),
    pub count: (u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Confound {
    /// 1-based class id whose objects attract the concept.
    pub class_id: u8,
    pub probability: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub grid: (usize, usize),
    pub background: [u8; 3],
    /// Uniform per-channel noise amplitude added to every pixel.
    pub noise: u8,
    /// Class `i + 1` is drawn from `classes[i]`.
    pub classes: Vec<ShapeRecipe>,
    pub concept_name: String,
    pub concept: ShapeRecipe,
    pub distractors: Vec<ShapeRecipe>,
    pub confound: Option<Confound>,
    pub seed: u64,
}

impl SceneSpec {
    /// 32x32 scenes on a 4x4 grid: blue rectangles (class 1), green crosses
    /// (class 2), red discs as the concept, yellow rings as clutter.
    pub fn standard(seed: u64) -> Self {
        Self {
            width: 32,
            height: 32,
            grid: (4, 4),
            background: [40, 40, 40],
            noise: 12,
            classes: vec![
                ShapeRecipe { kind: ShapeKind::Rectangle, color: [40, 80, 230], size: (2.5, 3.5), count: (0, 2) },
                ShapeRecipe { kind: ShapeKind::Cross, color: [40, 210, 60], size: (2.5, 3.5), count: (0, 2) },
            ],
            concept_name: "disc".into(),
            concept: ShapeRecipe { kind: ShapeKind::Disc, color: [235, 30, 30], size: (1.5, 2.5), count: (0, 1) },
            distractors: vec![ShapeRecipe {
                kind: ShapeKind::Ring,
                color: [220, 200, 40],
                size: (2.0, 3.0),
                count: (0, 1),
            }],
            confound: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let gen = |m: String| Err(Error::Generation(m));
        if self.width == 0 || self.height == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return gen("canvas and grid must be non-empty".into());
        }
        if !self.height.is_multiple_of(self.grid.0) || !self.width.is_multiple_of(self.grid.1) {
            return gen(format!("{}x{} canvas does not tile into a {:?} grid", self.width, self.height, self.grid));
        }
        if self.classes.len() > 254 {
            return gen("too many classes".into());
        }
        if let Some(c) = self.confound {
            if !(0.0..=1.0).contains(&c.probability) {
                return gen(format!("confound probability {} outside [0, 1]", c.probability));
            }
            if c.class_id == 0 || c.class_id as usize > self.classes.len() {
                return gen(format!("confound class {} does not exist", c.class_id));
            }
        }
        let limit = self.width.min(self.height) as f32 / 2.0;
        for r in self.classes.iter().chain(core::iter::once(&self.concept)).chain(&self.distractors) {
            if !(r.size.0 > 0.0 && r.size.0 <= r.size.1) || r.size.1 >= limit {
                return gen(format!("{} size range {:?} does not fit the canvas", r.kind.as_str(), r.size));
            }
            if r.count.0 > r.count.1 {
                return gen(format!("{} count range {:?} is empty", r.kind.as_str(), r.count));
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> (usize, usize) {
        (self.height / self.grid.0, self.width / self.grid.1)
    }
}

/// A shape instance in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
    pub color: [u8; 3],
    pub role: ShapeRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeRole {
    Class(u8),
    Concept,
    Distractor,
}

impl PlacedShape {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f32 + 0.5 - self.cx;
        let dy = y as f32 + 0.5 - self.cy;
        let s = self.size;
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= s * s,
            ShapeKind::Rectangle => dx.abs() <= s && dy.abs() <= 0.75 * s,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= s * s && d2 >= 0.3 * s * s
            }
            ShapeKind::Cross => {
                let arm = (s / 3.0).max(1.0);
                (dx.abs() <= arm && dy.abs() <= s) || (dy.abs() <= arm && dx.abs() <= s)
            }
        }
    }

    /// Half-extent of the axis-aligned bounding box.
    pub fn radius(&self) -> f32 {
        self.size
    }

    fn fits(&self, width: usize, height: usize) -> bool {
        let r = self.radius();
        self.cx - r >= 0.0 && self.cy - r >= 0.0 && self.cx + r <= width as f32 && self.cy + r <= height as f32
    }

    fn overlaps(&self, other: &PlacedShape, gap: f32) -> bool {
        let reach = self.radius() + other.radius() + gap;
        (self.cx - other.cx).abs() < reach && (self.cy - other.cy).abs() < reach
    }
}

/// A rendered scene together with the shapes it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sample: Sample,
    pub shapes: Vec<PlacedShape>,
}

/// Per-scene seed derived from the spec seed and the scene index.
fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_count(rng: &mut ChaCha8Rng, range: (u32, u32)) -> u32 {
    rng.random_range(range.0..=range.1)
}

fn draw_size(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Place a free-floating shape away from `taken`.
fn place_free(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    recipe: &ShapeRecipe,
    role: ShapeRole,
    taken: &[PlacedShape],
) -> Result<PlacedShape> {
    for _ in 0..PLACEMENT_RETRIES {
        let size = draw_size(rng, recipe.size);
        let shape = PlacedShape {
            kind: recipe.kind,
            cx: rng.random_range(size..=spec.width as f32 - size),
            cy: rng.random_range(size..=spec.height as f32 - size),
            size,
            color: recipe.color,
            role,
        };
        if shape.fits(spec.width, spec.height) && taken.iter().all(|t| !shape.overlaps(t, 1.0)) {
            return Ok(shape);
        }
    }
    Err(Error::Generation(format!(
        "no room for a {} after {PLACEMENT_RETRIES} attempts",
        recipe.kind.as_str()
    )))
}

/// Render scene `index` of `spec`.
pub fn render_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, index));
    let (cell_h, cell_w) = spec.cell_size();
    let mut shapes: Vec<PlacedShape> = Vec::new();

    // class objects, at most one per cell
    let mut free_cells: Vec<usize> = (0..spec.grid.0 * spec.grid.1).collect();
    for (i, recipe) in spec.classes.iter().enumerate() {
        let class_id = (i + 1) as u8;
        for _ in 0..draw_count(&mut rng, recipe.count) {
            if free_cells.is_empty() {
                return Err(Error::Generation("more class objects than grid cells".into()));
            }
            let cell = free_cells.swap_remove(rng.random_range(0..free_cells.len()));
            let (row, col) = (cell / spec.grid.1, cell % spec.grid.1);
            let size = draw_size(&mut rng, recipe.size);
            let jitter = cell_w.min(cell_h) as f32 / 8.0;
            let mut shape = PlacedShape {
                kind: recipe.kind,
                cx: (col as f32 + 0.5) * cell_w as f32 + rng.random_range(-jitter..=jitter),
                cy: (row as f32 + 0.5) * cell_h as f32 + rng.random_range(-jitter..=jitter),
                size,
                color: recipe.color,
                role: ShapeRole::Class(class_id),
            };
            shape.cx = shape.cx.clamp(size, spec.width as f32 - size);
            shape.cy = shape.cy.clamp(size, spec.height as f32 - size);
            shapes.push(shape);
        }
    }

    // concept shapes stamped onto confounded objects
    let mut concepts: Vec<PlacedShape> = Vec::new();
    if let Some(confound) = spec.confound {
        for obj in shapes.iter().filter(|s| s.role == ShapeRole::Class(confound.class_id)) {
            if rng.random::<f32>() < confound.probability {
                let size = draw_size(&mut rng, spec.concept.size).min(obj.size * 0.8);
                concepts.push(PlacedShape {
                    kind: spec.concept.kind,
                    cx: obj.cx,
                    cy: obj.cy,
                    size,
                    color: spec.concept.color,
                    role: ShapeRole::Concept,
                });
            }
        }
    }
    for _ in 0..draw_count(&mut rng, spec.concept.count) {
        let taken: Vec<PlacedShape> = shapes.iter().chain(&concepts).copied().collect();
        concepts.push(place_free(&mut rng, spec, &spec.concept, ShapeRole::Concept, &taken)?);
    }
    let mut distractors = Vec::new();
    for recipe in &spec.distractors {
        for _ in 0..draw_count(&mut rng, recipe.count) {
            let taken: Vec<PlacedShape> = shapes.iter().chain(&concepts).chain(&distractors).copied().collect();
            distractors.push(place_free(&mut rng, spec, recipe, ShapeRole::Distractor, &taken)?);
        }
    }

    // paint: distractors, then class objects, then concepts on top
    let (w, h) = (spec.width, spec.height);
    let mut rgb = vec![0u8; w * h * 3];
    let noise = spec.noise as i32;
    let mut paint_order: Vec<PlacedShape> = distractors.clone();
    paint_order.extend(shapes.iter().copied());
    paint_order.extend(concepts.iter().copied());
    let mut mask = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut color = spec.background;
            for s in &paint_order {
                if s.contains(x, y) {
                    color = s.color;
                    if s.role == ShapeRole::Concept {
                        mask[y * w + x] = 1;
                    }
                }
            }
            for c in 0..3 {
                let n = if noise > 0 { rng.random_range(-noise..=noise) } else { 0 };
                rgb[(y * w + x) * 3 + c] = (color[c] as i32 + n).clamp(0, 255) as u8;
            }
        }
    }

    let cells = cell_labels(spec, &shapes);
    let concept_label = u8::from(mask.contains(&1));
    let mut all = shapes;
    all.extend(concepts);
    all.extend(distractors);
    Ok(Scene {
        sample: Sample { id: index, width: w, height: h, rgb, concept_mask: mask, concept_label, cells },
        shapes: all,
    })
}

/// Label each cell with the class covering the largest share of it, if that
/// share exceeds [`CELL_COVERAGE_THRESHOLD`].
fn cell_labels(spec: &SceneSpec, objects: &[PlacedShape]) -> Vec<u8> {
    let (cell_h, cell_w) = spec.cell_size();
    let cell_area = (cell_h * cell_w) as f32;
    let mut best = vec![(0u8, 0usize); spec.grid.0 * spec.grid.1];
    for obj in objects {
        let ShapeRole::Class(class_id) = obj.role else { continue };
        let mut cover = vec![0usize; best.len()];
        for y in 0..spec.height {
            for x in 0..spec.width {
                if obj.contains(x, y) {
                    cover[(y / cell_h) * spec.grid.1 + x / cell_w] += 1;
                }
            }
        }
        for (b, &c) in best.iter_mut().zip(&cover) {
            if c as f32 > CELL_COVERAGE_THRESHOLD * cell_area && c > b.1 {
                *b = (class_id, c);
            }
        }
    }
    best.into_iter().map(|(c, _)| c).collect()
}

/// Render `n` scenes.
pub fn generate(spec: &SceneSpec, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Generation("at least one scene is required".into()));
    }
    let samples = (0..n).map(|i| render_scene(spec, i).map(|s| s.sample)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        concept: spec.concept_name.clone(),
        width: spec.width,
        height: spec.height,
        grid: spec.grid,
        classes: spec.classes.len() + 1,
        samples,
    })
}

/// Empirical `P(concept present | class present)` at image level.
pub fn confound_report(dataset: &Dataset, class_id: u8) -> Result<f32> {
    let with_class: Vec<&Sample> = dataset.samples.iter().filter(|s| s.has_class(class_id)).collect();
    if with_class.is_empty() {
        return Err(Error::UndefinedMetric(format!("class {class_id} never appears")));
    }
    let hits = with_class.iter().filter(|s| s.concept_label == 1).count();
    Ok(hits as f32 / with_class.len() as f32)
}
