//! Deterministic synthetic shapes benchmark.
//!
//! Scenes contain one to a few coloured shapes (circle, square, triangle,
//! cross) on a noisy background. Each shape type is a class and its colour is
//! correlated with the class. All four supervision signals are derived from
//! the visible instance masks.

pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{Allocation, SupervisionKind};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapPolicy {
    /// Painter's algorithm: later shapes occlude earlier ones.
    Allow,
    /// Reject placements whose mask touches an existing instance.
    Avoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Foreground classes; background is class 0 and not counted here.
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub overlap: OverlapPolicy,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 48,
            width: 48,
            num_classes: 4,
            min_instances: 1,
            max_instances: 4,
            min_size: 10,
            max_size: 18,
            overlap: OverlapPolicy::Avoid,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::Config("num_classes must be >= 1 (plus background)".into()));
        }
        if self.num_classes > 254 {
            return Err(Error::Config("num_classes must fit in a byte".into()));
        }
        if self.min_instances < 1 || self.max_instances < self.min_instances {
            return Err(Error::Config(format!(
                "need 1 <= min_instances <= max_instances, got {}..{}",
                self.min_instances, self.max_instances
            )));
        }
        if self.min_size < 3 || self.max_size < self.min_size {
            return Err(Error::Config(format!(
                "need 3 <= min_size <= max_size, got {}..{}",
                self.min_size, self.max_size
            )));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config("image dimensions must be even".into()));
        }
        Ok(())
    }

    fn check_fits(&self) -> Result<()> {
        if self.max_size > self.height || self.max_size > self.width {
            return Err(Error::Generation(format!(
                "shape size {} does not fit in a {}x{} canvas",
                self.max_size, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Binary H×W mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a != 0 && b != 0) as usize;
            union += (a != 0 || b != 0) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Mask as 0.0/1.0 reals.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect()
    }

    /// Tight inclusive box `(top, left, bottom, right)`, or `None` when empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (y, x, y, x),
                        Some((t, l, bo, r)) => (t.min(y), l.min(x), bo.max(y), r.max(x)),
                    });
                }
            }
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub index: u64,
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, 8 bits per channel.
    pub image: Vec<u8>,
    pub instances: Vec<Instance>,
    /// Per-pixel class id, 0 = background.
    pub semantic: Vec<u8>,
}

impl Scene {
    /// Image as reals in [0, 1], H×W×3.
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Rebuilds the semantic mask from the instance list.
    pub fn semantic_from_instances(&self) -> Vec<u8> {
        semantic_from_instances(self.height, self.width, &self.instances)
    }
}

pub fn semantic_from_instances(height: usize, width: usize, instances: &[Instance]) -> Vec<u8> {
    let mut sem = vec![0u8; height * width];
    for inst in instances {
        for (s, &m) in sem.iter_mut().zip(&inst.mask.data) {
            if m != 0 {
                *s = inst.class_id as u8;
            }
        }
    }
    sem
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: usize,
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

/// Every supervision signal for one scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub full: Vec<Instance>,
    pub boxes: Vec<BoundingBox>,
    pub image_level: BTreeSet<usize>,
    pub counts: BTreeMap<usize, usize>,
}

/// The part of a [`LabelSet`] visible at one supervision level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeakLabels {
    ImageLevel(BTreeSet<usize>),
    ImageLevelCounts(BTreeMap<usize, usize>),
    Boxes(Vec<BoundingBox>),
    Full(Vec<Instance>),
}

impl WeakLabels {
    pub fn classes(&self) -> BTreeSet<usize> {
        match self {
            WeakLabels::ImageLevel(s) => s.clone(),
            WeakLabels::ImageLevelCounts(c) => c.keys().copied().collect(),
            WeakLabels::Boxes(b) => b.iter().map(|b| b.class_id).collect(),
            WeakLabels::Full(f) => f.iter().map(|i| i.class_id).collect(),
        }
    }

    pub fn counts(&self) -> Option<BTreeMap<usize, usize>> {
        let mut out = BTreeMap::new();
        match self {
            WeakLabels::ImageLevel(_) => return None,
            WeakLabels::ImageLevelCounts(c) => return Some(c.clone()),
            WeakLabels::Boxes(b) => b.iter().for_each(|b| *out.entry(b.class_id).or_insert(0) += 1),
            WeakLabels::Full(f) => f.iter().for_each(|i| *out.entry(i.class_id).or_insert(0) += 1),
        }
        Some(out)
    }
}

impl LabelSet {
    pub fn restrict(&self, kind: SupervisionKind) -> Option<WeakLabels> {
        match kind {
            SupervisionKind::ImageLevel => Some(WeakLabels::ImageLevel(self.image_level.clone())),
            SupervisionKind::ImageLevelCounts => Some(WeakLabels::ImageLevelCounts(self.counts.clone())),
            SupervisionKind::BoundingBoxes => Some(WeakLabels::Boxes(self.boxes.clone())),
            SupervisionKind::FullMasks => Some(WeakLabels::Full(self.full.clone())),
            SupervisionKind::Unlabeled => None,
        }
    }
}

pub fn derive_labels(scene: &Scene) -> LabelSet {
    let full = scene.instances.clone();
    let boxes = full
        .iter()
        .filter_map(|inst| {
            inst.mask.bounding_box().map(|(top, left, bottom, right)| BoundingBox {
                class_id: inst.class_id,
                top,
                left,
                bottom,
                right,
            })
        })
        .collect();
    let mut counts = BTreeMap::new();
    for inst in &full {
        *counts.entry(inst.class_id).or_insert(0) += 1;
    }
    let image_level = counts.keys().copied().collect();
    LabelSet {
        full,
        boxes,
        image_level,
        counts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

fn shape_for_class(class_id: usize) -> ShapeKind {
    match (class_id - 1) % 4 {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Square,
        2 => ShapeKind::Triangle,
        _ => ShapeKind::Cross,
    }
}

/// Base colour of a class, evenly spaced hues.
pub fn class_color(class_id: usize, num_classes: usize) -> [f64; 3] {
    let h = (class_id - 1) as f64 / num_classes as f64 * 6.0;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rasterize(kind: ShapeKind, top: usize, left: usize, size: usize, h: usize, w: usize) -> Mask {
    let r = size as f64 / 2.0;
    let cy = top as f64 + r;
    let cx = left as f64 + r;
    let arm = (size as f64 / 6.0).max(1.0);
    Mask::from_fn(h, w, |y, x| {
        let py = y as f64 + 0.5;
        let px = x as f64 + 0.5;
        let (dy, dx) = (py - cy, px - cx);
        if dy.abs() > r || dx.abs() > r {
            return false;
        }
        match kind {
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => true,
            ShapeKind::Triangle => {
                let half = r * (py - top as f64) / size as f64;
                dx.abs() <= half
            }
            ShapeKind::Cross => dx.abs() <= arm || dy.abs() <= arm,
        }
    })
}

fn touches(candidate: &Mask, occupied: &Mask) -> bool {
    let (h, w) = (candidate.height, candidate.width);
    for y in 0..h {
        for x in 0..w {
            if !candidate.get(y, x) {
                continue;
            }
            for (dy, dx) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && occupied.get(ny as usize, nx as usize) {
                    return true;
                }
            }
        }
    }
    false
}

/// True when painting `top` would leave one of the `drawn` earlier shapes
/// without a visible pixel.
fn hides_any(top: &Mask, owner: &[Option<usize>], drawn: usize) -> bool {
    let mut still_visible = vec![false; drawn];
    for (o, &t) in owner.iter().zip(&top.data) {
        if let (Some(i), 0) = (o, t) {
            still_visible[*i] = true;
        }
    }
    still_visible.iter().any(|v| !v)
}

/// Standard normal draw (Box–Muller).
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Scene `index` of the dataset described by `config`. Pure in
/// `(config, index)`.
pub fn generate_scene(config: &DataConfig, index: u64) -> Result<Scene> {
    config.validate()?;
    config.check_fits()?;
    let (h, w) = (config.height, config.width);
    let mut rng = rng::stream(config.seed, index, Purpose::Scene);

    let count = rng.gen_range(config.min_instances..=config.max_instances);
    let mut drawn: Vec<(usize, Mask, [f64; 3])> = Vec::with_capacity(count);
    let mut occupied = Mask::zeros(h, w);
    // Painter's algorithm: the last shape owns every pixel it covers.
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for _ in 0..count {
        let class_id = rng.gen_range(1..=config.num_classes);
        let base = class_color(class_id, config.num_classes);
        let color = base.map(|c| (c + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.gen_range(config.min_size..=config.max_size);
            let top = rng.gen_range(0..=h - size);
            let left = rng.gen_range(0..=w - size);
            let mask = rasterize(shape_for_class(class_id), top, left, size, h, w);
            let ok = match config.overlap {
                OverlapPolicy::Allow => !hides_any(&mask, &owner, drawn.len()),
                OverlapPolicy::Avoid => !touches(&mask, &occupied),
            };
            if ok {
                placed = Some(mask);
                break;
            }
        }
        let Some(mask) = placed else {
            break;
        };
        for ((o, own), &m) in occupied.data.iter_mut().zip(owner.iter_mut()).zip(&mask.data) {
            *o |= m;
            if m != 0 {
                *own = Some(drawn.len());
            }
        }
        drawn.push((class_id, mask, color));
    }

    let bg = rng.gen_range(0.1..0.35);
    let mut image = Vec::with_capacity(h * w * 3);
    for o in &owner {
        let c = match o {
            Some(i) => drawn[*i].2,
            None => [bg, bg, bg],
        };
        for ch in c {
            let v = (ch + 0.04 * normal(&mut rng)).clamp(0.0, 1.0);
            image.push((v * 255.0).round() as u8);
        }
    }

    let mut instances = Vec::new();
    for (i, (class_id, _, _)) in drawn.iter().enumerate() {
        let visible = Mask {
            height: h,
            width: w,
            data: owner.iter().map(|o| (*o == Some(i)) as u8).collect(),
        };
        if !visible.is_empty() {
            instances.push(Instance {
                class_id: *class_id,
                mask: visible,
            });
        }
    }
    if instances.len() < config.min_instances {
        return Err(Error::Generation(format!(
            "could only place {} of at least {} shapes in scene {index}",
            instances.len(),
            config.min_instances
        )));
    }
    let semantic = semantic_from_instances(h, w, &instances);
    Ok(Scene {
        index,
        height: h,
        width: w,
        image,
        instances,
        semantic,
    })
}

pub fn generate_scenes(config: &DataConfig, indices: impl IntoIterator<Item = u64>) -> Result<Vec<Scene>> {
    indices.into_iter().map(|i| generate_scene(config, i)).collect()
}

/// Index offset of the held-out evaluation range; training pools never reach it.
pub const HELD_OUT_BASE: u64 = 1 << 40;

/// The shared held-out evaluation scenes.
pub fn held_out_scenes(config: &DataConfig, count: usize) -> Result<Vec<Scene>> {
    generate_scenes(config, (0..count as u64).map(|i| HELD_OUT_BASE + i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub strong: Vec<(Scene, LabelSet)>,
    pub weak: Vec<(Scene, WeakLabels)>,
    pub unlabeled: Vec<Scene>,
}

/// Draws disjoint strong and weak/unlabeled subsets from `scenes`.
pub fn split_dataset(scenes: &[Scene], alloc: &Allocation, split_seed: u64) -> Result<DatasetSplit> {
    let n = alloc.n_strong as usize;
    let m = alloc.m_weak as usize;
    if n + m > scenes.len() {
        return Err(Error::InsufficientScenes {
            needed: n + m,
            available: scenes.len(),
        });
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut rng::stream(split_seed, 0, Purpose::Split));

    let strong = order[..n]
        .iter()
        .map(|&i| (scenes[i].clone(), derive_labels(&scenes[i])))
        .collect();
    let mut weak = Vec::new();
    let mut unlabeled = Vec::new();
    for &i in &order[n..n + m] {
        match derive_labels(&scenes[i]).restrict(alloc.weak_kind) {
            Some(labels) => weak.push((scenes[i].clone(), labels)),
            None => unlabeled.push(scenes[i].clone()),
        }
    }
    Ok(DatasetSplit {
        strong,
        weak,
        unlabeled,
    })
}
