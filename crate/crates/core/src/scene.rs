//! Static box worlds: construction, procedural generation, file I/O,
//! footprint collision and start/goal sampling.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::Pose;
use crate::error::{Error, Result};
use crate::math::{rng_stream, Vec2, Vec3};

pub const SCENE_FILE_VERSION: u32 = 1;

pub const FLOOR_CLASS: u8 = 0;
pub const WALL_CLASS: u8 = 1;
pub const FIRST_OBSTACLE_CLASS: u8 = 2;
pub const OBSTACLE_CLASS_COUNT: u8 = 8;
/// Reserved label for the goal sphere; never valid for a box.
pub const GOAL_CLASS: u8 = 10;

/// Radius of the body's collision disc.
pub const BODY_RADIUS: f64 = 0.30;

const OBSTACLE_COLORS: [[f64; 3]; OBSTACLE_CLASS_COUNT as usize] = [
    [0.12, 0.47, 0.71],
    [0.17, 0.63, 0.17],
    [1.00, 0.50, 0.05],
    [0.58, 0.40, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
    [0.74, 0.74, 0.13],
    [0.09, 0.75, 0.81],
];

/// Semantic color of a class label, `None` if the label is not in the palette.
pub fn palette_color(class: u8) -> Option<[f64; 3]> {
    match class {
        FLOOR_CLASS => Some([0.5, 0.5, 0.5]),
        WALL_CLASS => Some([1.0, 1.0, 1.0]),
        GOAL_CLASS => Some([1.0, 0.0, 0.0]),
        c if (FIRST_OBSTACLE_CLASS..FIRST_OBSTACLE_CLASS + OBSTACLE_CLASS_COUNT).contains(&c) => {
            Some(OBSTACLE_COLORS[(c - FIRST_OBSTACLE_CLASS) as usize])
        }
        _ => None,
    }
}

fn is_box_class(class: u8) -> bool {
    class != GOAL_CLASS && palette_color(class).is_some()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
    pub class: u8,
    pub color: [f64; 3],
}

impl SceneBox {
    pub fn new(min: Vec3, max: Vec3, class: u8) -> Self {
        let color = palette_color(class).unwrap_or([0.0; 3]);
        Self {
            min,
            max,
            class,
            color,
        }
    }

    /// Euclidean gap between the floor footprints of two boxes (0 if they overlap).
    pub fn footprint_gap(&self, other: &SceneBox) -> f64 {
        let dx = (self.min.x - other.max.x).max(other.min.x - self.max.x).max(0.0);
        let dy = (self.min.y - other.max.y).max(other.min.y - self.max.y).max(0.0);
        dx.hypot(dy)
    }

    /// Signed penetration of a disc into this box's footprint; positive means overlap.
    fn disc_penetration(&self, center: Vec2, radius: f64) -> f64 {
        let inside_x = center.x > self.min.x && center.x < self.max.x;
        let inside_y = center.y > self.min.y && center.y < self.max.y;
        if inside_x && inside_y {
            let to_edge = (center.x - self.min.x)
                .min(self.max.x - center.x)
                .min(center.y - self.min.y)
                .min(self.max.y - center.y);
            return radius + to_edge;
        }
        let cx = center.x.clamp(self.min.x, self.max.x);
        let cy = center.y.clamp(self.min.y, self.max.y);
        radius - (center.x - cx).hypot(center.y - cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloorRect {
    pub min: Vec2,
    pub max: Vec2,
}

impl FloorRect {
    pub fn contains(&self, p: Vec2, margin: f64) -> bool {
        p.x >= self.min.x + margin
            && p.x <= self.max.x - margin
            && p.y >= self.min.y + margin
            && p.y <= self.max.y - margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub bounds: FloorRect,
    pub boxes: Vec<SceneBox>,
    pub floor_class: u8,
    pub wall_class: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoalSpec {
    pub center: Vec3,
    pub radius: f64,
}

impl GoalSpec {
    pub const CLASS: u8 = GOAL_CLASS;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub hit: bool,
    pub depth: f64,
}

/// Tests a body disc against every box footprint.
///
/// A disc exactly tangent to a box does not collide.
pub fn collide(scene: &Scene, center: Vec2, radius: f64) -> Collision {
    let depth = scene
        .boxes
        .iter()
        .map(|b| b.disc_penetration(center, radius))
        .fold(f64::NEG_INFINITY, f64::max);
    if depth > 0.0 {
        Collision { hit: true, depth }
    } else {
        Collision {
            hit: false,
            depth: 0.0,
        }
    }
}

const WALL_HEIGHT: f64 = 2.5;
const WALL_THICKNESS: f64 = 0.2;

fn perimeter_walls(bounds: &FloorRect) -> Vec<SceneBox> {
    let (lo, hi, t, h) = (bounds.min, bounds.max, WALL_THICKNESS, WALL_HEIGHT);
    vec![
        SceneBox::new(
            Vec3::new(lo.x - t, lo.y - t, 0.0),
            Vec3::new(lo.x, hi.y + t, h),
            WALL_CLASS,
        ),
        SceneBox::new(
            Vec3::new(hi.x, lo.y - t, 0.0),
            Vec3::new(hi.x + t, hi.y + t, h),
            WALL_CLASS,
        ),
        SceneBox::new(
            Vec3::new(lo.x - t, lo.y - t, 0.0),
            Vec3::new(hi.x + t, lo.y, h),
            WALL_CLASS,
        ),
        SceneBox::new(
            Vec3::new(lo.x - t, hi.y, 0.0),
            Vec3::new(hi.x + t, hi.y + t, h),
            WALL_CLASS,
        ),
    ]
}

impl Scene {
    /// Empty walled room spanning `[0, width] × [0, depth]`.
    pub fn empty_room(id: impl Into<String>, width: f64, depth: f64) -> Self {
        let bounds = FloorRect {
            min: Vec2::zeros(),
            max: Vec2::new(width, depth),
        };
        Self {
            id: id.into(),
            bounds,
            boxes: perimeter_walls(&bounds),
            floor_class: FLOOR_CLASS,
            wall_class: WALL_CLASS,
        }
    }

    /// Long obstacle-free room used for smoke runs.
    pub fn corridor(length: f64, width: f64) -> Self {
        Self::empty_room("corridor", length, width)
    }

    pub fn obstacles(&self) -> impl Iterator<Item = &SceneBox> {
        self.boxes.iter().filter(move |b| b.class != self.wall_class)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if !(b.min.iter().chain(b.max.iter()).all(|v| v.is_finite())) {
            return Err(Error::validation("bounds", "non-finite coordinate"));
        }
        if !(b.max.x > b.min.x && b.max.y > b.min.y) {
            return Err(Error::validation("bounds", "max must exceed min on both axes"));
        }
        if !is_box_class(self.floor_class) {
            return Err(Error::validation("floor_class", "label not in palette"));
        }
        if !is_box_class(self.wall_class) {
            return Err(Error::validation("wall_class", "label not in palette"));
        }
        for (i, bx) in self.boxes.iter().enumerate() {
            let field = |f: &str| format!("boxes[{i}].{f}");
            if !bx.min.iter().chain(bx.max.iter()).all(|v| v.is_finite()) {
                return Err(Error::validation(field("min"), "non-finite coordinate"));
            }
            if !(0..3).all(|k| bx.min[k] < bx.max[k]) {
                return Err(Error::validation(
                    field("max"),
                    "must exceed min componentwise",
                ));
            }
            if bx.min.z < 0.0 {
                return Err(Error::validation(field("min"), "box extends below the floor"));
            }
            if !is_box_class(bx.class) {
                return Err(Error::validation(
                    field("class"),
                    format!("label {} not in palette", bx.class),
                ));
            }
            if !bx.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::validation(field("color"), "components must lie in [0, 1]"));
            }
        }
        self.check_walls()
    }

    fn check_walls(&self) -> Result<()> {
        let (lo, hi) = (self.bounds.min, self.bounds.max);
        let eps = 1e-9;
        let covers = |bx: &SceneBox, x0: f64, y0: f64, x1: f64, y1: f64| {
            bx.min.x <= x0 + eps && bx.max.x >= x1 - eps && bx.min.y <= y0 + eps && bx.max.y >= y1 - eps
        };
        let sides = [
            ("west", lo.x, lo.y, lo.x, hi.y),
            ("east", hi.x, lo.y, hi.x, hi.y),
            ("south", lo.x, lo.y, hi.x, lo.y),
            ("north", lo.x, hi.y, hi.x, hi.y),
        ];
        for (name, x0, y0, x1, y1) in sides {
            let ok = self
                .boxes
                .iter()
                .any(|bx| bx.class == self.wall_class && covers(bx, x0, y0, x1, y1));
            if !ok {
                return Err(Error::validation(
                    "boxes",
                    format!("missing perimeter wall on the {name} side"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical JSON text; identical scenes always produce identical bytes.
    pub fn to_canonical_string(&self) -> String {
        let file = SceneFile {
            version: SCENE_FILE_VERSION,
            id: self.id.clone(),
            bounds: BoundsFile {
                min: [self.bounds.min.x, self.bounds.min.y],
                max: [self.bounds.max.x, self.bounds.max.y],
            },
            floor_class: self.floor_class,
            wall_class: self.wall_class,
            boxes: self
                .boxes
                .iter()
                .map(|b| BoxFile {
                    min: [b.min.x, b.min.y, b.min.z],
                    max: [b.max.x, b.max.y, b.max.z],
                    class: b.class,
                    color: b.color,
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("scene serialization");
        s.push('\n');
        s
    }

    pub fn from_str(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::parse("scene file", e))?;
        match probe.version {
            Some(SCENE_FILE_VERSION) => {}
            Some(v) => {
                return Err(Error::Version {
                    what: "scene file",
                    found: v,
                    expected: SCENE_FILE_VERSION,
                })
            }
            None => return Err(Error::validation("version", "missing")),
        }
        let file: SceneFile =
            serde_json::from_str(text).map_err(|e| Error::parse("scene file", e))?;
        let scene = Scene {
            id: file.id,
            bounds: FloorRect {
                min: Vec2::new(file.bounds.min[0], file.bounds.min[1]),
                max: Vec2::new(file.bounds.max[0], file.bounds.max[1]),
            },
            boxes: file
                .boxes
                .into_iter()
                .map(|b| SceneBox {
                    min: Vec3::from(b.min),
                    max: Vec3::from(b.max),
                    class: b.class,
                    color: b.color,
                })
                .collect(),
            floor_class: file.floor_class,
            wall_class: file.wall_class,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scene::from_str(&text)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    version: u32,
    id: String,
    bounds: BoundsFile,
    floor_class: u8,
    wall_class: u8,
    boxes: Vec<BoxFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    min: [f64; 2],
    max: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    min: [f64; 3],
    max: [f64; 3],
    class: u8,
    color: [f64; 3],
}

/// Procedural room parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: f64,
    pub depth: f64,
    pub n_obstacles: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Minimum footprint gap between any two obstacles.
    pub spacing: f64,
    pub min_height: f64,
    pub max_height: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 8.0,
            depth: 8.0,
            n_obstacles: 6,
            min_size: 0.4,
            max_size: 1.2,
            spacing: 0.9,
            min_height: 0.5,
            max_height: 2.0,
        }
    }
}

const PLACEMENT_TRIES: usize = 1000;

pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    let p = params;
    let positive = [
        ("width", p.width),
        ("depth", p.depth),
        ("min_size", p.min_size),
        ("max_size", p.max_size),
        ("min_height", p.min_height),
        ("max_height", p.max_height),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::validation(name, "must be positive"));
        }
    }
    if !(p.spacing >= 0.0) {
        return Err(Error::validation("spacing", "must be non-negative"));
    }
    if p.max_size < p.min_size || p.max_height < p.min_height {
        return Err(Error::validation("max_size", "max below min"));
    }
    if p.max_size > p.width.min(p.depth) {
        return Err(Error::validation("max_size", "larger than the room"));
    }

    let mut scene = Scene::empty_room(format!("gen-{seed}"), p.width, p.depth);
    let mut rng = rng_stream(seed, 0);
    let mut placed: Vec<SceneBox> = Vec::with_capacity(p.n_obstacles);
    for i in 0..p.n_obstacles {
        let class = FIRST_OBSTACLE_CLASS + (i as u8 % OBSTACLE_CLASS_COUNT);
        let mut ok = None;
        for _ in 0..PLACEMENT_TRIES {
            let sx = rng.random_range(p.min_size..=p.max_size);
            let sy = rng.random_range(p.min_size..=p.max_size);
            let h = rng.random_range(p.min_height..=p.max_height);
            let x = rng.random_range(0.0..=(p.width - sx));
            let y = rng.random_range(0.0..=(p.depth - sy));
            let cand = SceneBox::new(Vec3::new(x, y, 0.0), Vec3::new(x + sx, y + sy, h), class);
            if placed.iter().all(|b| b.footprint_gap(&cand) >= p.spacing) {
                ok = Some(cand);
                break;
            }
        }
        match ok {
            Some(b) => placed.push(b),
            None => {
                return Err(Error::Placement {
                    attempts: PLACEMENT_TRIES,
                    msg: format!("obstacle {i} does not fit with spacing {}", p.spacing),
                })
            }
        }
    }
    if !has_free_square(&scene.bounds, &placed, 1.0) {
        return Err(Error::Placement {
            attempts: PLACEMENT_TRIES,
            msg: "no free 1 m² floor cell remains".into(),
        });
    }
    scene.boxes.extend(placed);
    Ok(scene)
}

fn has_free_square(bounds: &FloorRect, boxes: &[SceneBox], side: f64) -> bool {
    let step = 0.1;
    let nx = ((bounds.max.x - bounds.min.x - side) / step).floor() as i64;
    let ny = ((bounds.max.y - bounds.min.y - side) / step).floor() as i64;
    for ix in 0..=nx.max(-1) {
        for iy in 0..=ny.max(-1) {
            let x0 = bounds.min.x + ix as f64 * step;
            let y0 = bounds.min.y + iy as f64 * step;
            let free = boxes.iter().all(|b| {
                b.max.x <= x0 || b.min.x >= x0 + side || b.max.y <= y0 || b.min.y >= y0 + side
            });
            if free {
                return true;
            }
        }
    }
    false
}

/// How start and goal are placed relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Placement {
    /// Independent uniform positions and a uniform heading.
    Uniform,
    /// Start placed `min_dist..max_dist` from the goal, facing it up to `max_bearing` off.
    Ahead {
        min_dist: f64,
        max_dist: f64,
        max_bearing: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub placement: Placement,
    pub goal_radius: f64,
    pub goal_height: f64,
    pub min_separation: f64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            placement: Placement::Uniform,
            goal_radius: 0.15,
            goal_height: 1.4,
            min_separation: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartGoal {
    pub start: Pose,
    pub goal: GoalSpec,
}

const SAMPLING_TRIES: usize = 10_000;

pub fn sample_start_goal(scene: &Scene, seed: u64, cfg: &PlacementConfig) -> Result<StartGoal> {
    let mut rng = rng_stream(seed, 1);
    let b = scene.bounds;
    let uniform_xy = |rng: &mut rand_chacha::ChaCha8Rng, margin: f64| {
        Vec2::new(
            rng.random_range(b.min.x + margin..=b.max.x - margin),
            rng.random_range(b.min.y + margin..=b.max.y - margin),
        )
    };
    let margin = BODY_RADIUS.max(cfg.goal_radius);
    if b.max.x - b.min.x <= 2.0 * margin || b.max.y - b.min.y <= 2.0 * margin {
        return Err(Error::Sampling { attempts: 0 });
    }
    for _ in 0..SAMPLING_TRIES {
        let goal_xy = uniform_xy(&mut rng, cfg.goal_radius);
        if collide(scene, goal_xy, cfg.goal_radius).hit {
            continue;
        }
        let (start_xy, heading) = match cfg.placement {
            Placement::Uniform => {
                let s = uniform_xy(&mut rng, BODY_RADIUS);
                let h = rng.random_range(0.0..std::f64::consts::TAU);
                (s, h)
            }
            Placement::Ahead {
                min_dist,
                max_dist,
                max_bearing,
            } => {
                let d = rng.random_range(min_dist..=max_dist);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                let off = if max_bearing > 0.0 {
                    rng.random_range(-max_bearing..=max_bearing)
                } else {
                    0.0
                };
                let s = goal_xy - d * Vec2::new(dir.cos(), dir.sin());
                (s, crate::math::wrap_angle(dir + off).rem_euclid(std::f64::consts::TAU))
            }
        };
        if !b.contains(start_xy, BODY_RADIUS) || collide(scene, start_xy, BODY_RADIUS).hit {
            continue;
        }
        if (start_xy - goal_xy).norm() < cfg.min_separation {
            continue;
        }
        return Ok(StartGoal {
            start: Pose::standing(start_xy, heading),
            goal: GoalSpec {
                center: Vec3::new(goal_xy.x, goal_xy.y, cfg.goal_height),
                radius: cfg.goal_radius,
            },
        });
    }
    Err(Error::Sampling {
        attempts: SAMPLING_TRIES,
    })
}
