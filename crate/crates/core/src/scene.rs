//! Procedural box rooms with box and cylinder obstacles, ray cast
//! analytically to produce ground-truth RGB-D panoramas.
//!
//! The room spans `x ∈ [−w/2, w/2]`, `y ∈ [−d/2, d/2]`, `z ∈ [0, h]`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use libm::{floor, sqrt};
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Capture, DepthMap, DirTable, Panorama, Pose, Vec3};
use crate::rng;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum Material {
    Solid { color: [f32; 3] },
    Checker { a: [f32; 3], b: [f32; 3], size: f64 },
    /// Square tiles with per-tile colors hashed from `seed`, blended between
    /// `a` and `b`. Gives locally distinctive texture.
    Mosaic { a: [f32; 3], b: [f32; 3], size: f64, seed: u64 },
}

impl Material {
    pub const fn solid(r: f32, g: f32, b: f32) -> Self {
        Material::Solid { color: [r, g, b] }
    }

    fn color(&self, s: f64, t: f64) -> [f32; 3] {
        match *self {
            Material::Solid { color } => color,
            Material::Checker { a, b, size } => {
                let parity = (floor(s / size) as i64 + floor(t / size) as i64).rem_euclid(2);
                if parity == 0 {
                    a
                } else {
                    b
                }
            }
            Material::Mosaic { a, b, size, seed } => {
                let (i, j) = (floor(s / size) as i64 as u64, floor(t / size) as i64 as u64);
                let h = crate::rng::mix(seed ^ crate::rng::mix(i ^ crate::rng::mix(j)));
                let f = (h >> 40) as f32 / (1u64 << 24) as f32;
                core::array::from_fn(|c| a[c] + (b[c] - a[c]) * f)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "type", rename_all = "snake_case"))]
pub enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Cylinder { center: [f64; 2], radius: f64, z_min: f64, z_max: f64 },
}

impl Shape {
    /// Axis-aligned bounds as (min, max).
    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Box { min, max } => (min, max),
            Shape::Cylinder { center, radius, z_min, z_max } => (
                [center[0] - radius, center[1] - radius, z_min],
                [center[0] + radius, center[1] + radius, z_max],
            ),
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.aabb();
        let finite = lo.iter().chain(&hi).all(|x| x.is_finite());
        if !finite || (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(invalid("obstacle must have positive finite extent"));
        }
        Ok(())
    }

    /// Whether `p` lies inside the solid inflated by `margin`.
    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        match *self {
            Shape::Box { min, max } => (0..3).all(|a| p[a] > min[a] - margin && p[a] < max[a] + margin),
            Shape::Cylinder { center, radius, z_min, z_max } => {
                let (dx, dy) = (p.x - center[0], p.y - center[1]);
                p.z > z_min - margin
                    && p.z < z_max + margin
                    && sqrt(dx * dx + dy * dy) < radius + margin
            }
        }
    }

    /// Distance from `p` to the solid's boundary surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Box { min, max } => {
                let mut outside = 0.0f64;
                let mut inside = f64::INFINITY;
                for a in 0..3 {
                    let d = (min[a] - p[a]).max(p[a] - max[a]);
                    if d > 0.0 {
                        outside += d * d;
                    }
                    inside = inside.min((p[a] - min[a]).min(max[a] - p[a]));
                }
                if outside > 0.0 {
                    sqrt(outside)
                } else {
                    inside.max(0.0)
                }
            }
            Shape::Cylinder { center, radius, z_min, z_max } => {
                let (dx, dy) = (p.x - center[0], p.y - center[1]);
                let dr = sqrt(dx * dx + dy * dy) - radius;
                let dz = (z_min - p.z).max(p.z - z_max);
                if dr <= 0.0 && dz <= 0.0 {
                    (-dr).min(-dz)
                } else {
                    sqrt(dr.max(0.0) * dr.max(0.0) + dz.max(0.0) * dz.max(0.0))
                }
            }
        }
    }

    /// Smallest `t > EPS` where `o + t·d` enters the solid, with the outward normal.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3, f64, f64)> {
        match *self {
            Shape::Box { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                let mut sign = 0.0;
                for a in 0..3 {
                    if d[a] == 0.0 {
                        if o[a] <= min[a] || o[a] >= max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    let (lo, hi, s) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
                    if lo > t_near {
                        t_near = lo;
                        axis = a;
                        sign = s;
                    }
                    t_far = t_far.min(hi);
                }
                if t_near > t_far || t_near <= EPS {
                    return None;
                }
                let mut n = Vec3::zeros();
                n[axis] = sign;
                let p = o + d * t_near;
                let (s, t) = face_coords(&p, axis);
                Some((t_near, n, s, t))
            }
            Shape::Cylinder { center, radius, z_min, z_max } => {
                let mut best: Option<(f64, Vec3, f64, f64)> = None;
                let (ox, oy) = (o.x - center[0], o.y - center[1]);
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = 2.0 * (ox * d.x + oy * d.y);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 && c > 0.0 {
                        let t = (-b - sqrt(disc)) / (2.0 * a);
                        let z = o.z + t * d.z;
                        if t > EPS && z >= z_min && z <= z_max {
                            let (px, py) = (ox + t * d.x, oy + t * d.y);
                            let n = Vec3::new(px / radius, py / radius, 0.0);
                            best = Some((t, n, libm::atan2(py, px) * radius, z));
                        }
                    }
                }
                for (zc, nz) in [(z_max, 1.0), (z_min, -1.0)] {
                    if d.z == 0.0 || (o.z - zc) * nz <= 0.0 {
                        continue;
                    }
                    let t = (zc - o.z) / d.z;
                    if t <= EPS || best.is_some_and(|b| b.0 <= t) {
                        continue;
                    }
                    let (px, py) = (ox + t * d.x, oy + t * d.y);
                    if px * px + py * py <= radius * radius {
                        best = Some((t, Vec3::new(0.0, 0.0, nz), px, py));
                    }
                }
                best
            }
        }
    }
}

fn face_coords(p: &Vec3, axis: usize) -> (f64, f64) {
    match axis {
        0 => (p.y, p.z),
        1 => (p.x, p.z),
        _ => (p.x, p.y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Obstacle {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Room {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RandomBoxes {
    pub count: usize,
    pub min_size: [f64; 3],
    pub max_size: [f64; 3],
    pub material: Material,
}

/// Disk in the floor plane kept free of random obstacles.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KeepClear {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub room: Room,
    pub floor: Material,
    pub ceiling: Material,
    /// Walls facing −x, +x, −y, +y.
    pub walls: [Material; 4],
    #[cfg_attr(feature = "serde", serde(default))]
    pub obstacles: Vec<Obstacle>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub random_boxes: Option<RandomBoxes>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub keep_clear: Vec<KeepClear>,
    /// Minimum gap between obstacles and between obstacles and walls.
    #[cfg_attr(feature = "serde", serde(default = "default_margin"))]
    pub margin: f64,
}

#[cfg(feature = "serde")]
fn default_margin() -> f64 {
    0.1
}

const CHECK: f64 = 0.5;

impl SceneSpec {
    /// Empty room with checkered floor and walls.
    pub fn textured_room(width: f64, depth: f64, height: f64) -> Self {
        let checker = |a: [f32; 3], b: [f32; 3]| Material::Checker { a, b, size: CHECK };
        SceneSpec {
            room: Room { width, depth, height },
            floor: checker([0.30, 0.30, 0.32], [0.62, 0.60, 0.55]),
            ceiling: Material::solid(0.9, 0.9, 0.88),
            walls: [
                checker([0.80, 0.25, 0.20], [0.95, 0.85, 0.70]),
                checker([0.20, 0.45, 0.80], [0.85, 0.90, 0.95]),
                checker([0.25, 0.65, 0.30], [0.90, 0.95, 0.80]),
                checker([0.55, 0.35, 0.65], [0.95, 0.85, 0.30]),
            ],
            obstacles: Vec::new(),
            random_boxes: None,
            keep_clear: Vec::new(),
            margin: 0.1,
        }
    }

    /// Empty room with mosaic floor and walls, each surface seeded apart.
    pub fn mosaic_room(width: f64, depth: f64, height: f64) -> Self {
        let base = SceneSpec::textured_room(width, depth, height);
        let mosaic = |m: Material, seed: u64| match m {
            Material::Checker { a, b, .. } => Material::Mosaic { a, b, size: 0.25, seed },
            other => other,
        };
        SceneSpec {
            floor: mosaic(base.floor, 1),
            walls: core::array::from_fn(|k| mosaic(base.walls[k], 2 + k as u64)),
            ..base
        }
    }

    /// Empty room with one flat color per surface.
    pub fn plain_room(width: f64, depth: f64, height: f64) -> Self {
        SceneSpec {
            floor: Material::solid(0.45, 0.42, 0.40),
            ceiling: Material::solid(0.9, 0.9, 0.88),
            walls: [
                Material::solid(0.80, 0.35, 0.30),
                Material::solid(0.30, 0.50, 0.80),
                Material::solid(0.35, 0.70, 0.40),
                Material::solid(0.75, 0.70, 0.35),
            ],
            ..SceneSpec::textured_room(width, depth, height)
        }
    }

    pub fn with_obstacle(mut self, shape: Shape, material: Material) -> Self {
        self.obstacles.push(Obstacle { shape, material });
        self
    }

    pub fn with_random_boxes(mut self, boxes: RandomBoxes) -> Self {
        self.random_boxes = Some(boxes);
        self
    }

    pub fn with_keep_clear(mut self, center: [f64; 2], radius: f64) -> Self {
        self.keep_clear.push(KeepClear { center, radius });
        self
    }

    /// Every linear dimension multiplied by `(kx, ky, kz)`.
    pub fn scaled(&self, kx: f64, ky: f64, kz: f64) -> Self {
        let s = [kx, ky, kz];
        let mut out = self.clone();
        out.room = Room { width: self.room.width * kx, depth: self.room.depth * ky, height: self.room.height * kz };
        for o in out.obstacles.iter_mut() {
            o.shape = match o.shape {
                Shape::Box { min, max } => Shape::Box {
                    min: [min[0] * s[0], min[1] * s[1], min[2] * s[2]],
                    max: [max[0] * s[0], max[1] * s[1], max[2] * s[2]],
                },
                Shape::Cylinder { .. } if kx != ky => o.shape,
                Shape::Cylinder { center, radius, z_min, z_max } => Shape::Cylinder {
                    center: [center[0] * kx, center[1] * ky],
                    radius: radius * kx,
                    z_min: z_min * kz,
                    z_max: z_max * kz,
                },
            };
        }
        out
    }
}

/// Immutable built scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    room: Room,
    floor: Material,
    ceiling: Material,
    walls: [Material; 4],
    obstacles: Vec<Obstacle>,
    id: u64,
}

pub type SceneHandle = Arc<Scene>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vec3,
    pub color: [f32; 3],
}

pub fn build_scene(spec: &SceneSpec, seed: u64) -> Result<SceneHandle> {
    let room = spec.room;
    if !(room.width > 0.0 && room.depth > 0.0 && room.height > 0.0)
        || !(room.width.is_finite() && room.depth.is_finite() && room.height.is_finite())
    {
        return Err(invalid("room dimensions must be positive"));
    }
    if !(spec.margin >= 0.0) {
        return Err(invalid("margin must be non-negative"));
    }
    let (rlo, rhi) = room_bounds(&room);
    let mut obstacles: Vec<Obstacle> = Vec::new();
    for o in &spec.obstacles {
        o.shape.validate()?;
        let (lo, hi) = o.shape.aabb();
        // Obstacles may rest on the floor but must clear walls and ceiling.
        let inside = (0..2).all(|a| lo[a] > rlo[a] && hi[a] < rhi[a]) && lo[2] >= rlo[2] && hi[2] < rhi[2];
        if !inside {
            return Err(invalid("obstacle must lie strictly inside the room"));
        }
        obstacles.push(*o);
    }
    for (i, a) in obstacles.iter().enumerate() {
        for b in &obstacles[..i] {
            if aabb_overlap(&a.shape.aabb(), &b.shape.aabb(), 0.0) {
                return Err(invalid("obstacles overlap"));
            }
        }
    }
    if let Some(rb) = &spec.random_boxes {
        let mut rng = rng::from_seed(rng::derive(seed, "scene.boxes"));
        for a in 0..3 {
            if !(rb.min_size[a] > 0.0 && rb.min_size[a] <= rb.max_size[a]) {
                return Err(invalid("random box size range invalid"));
            }
        }
        const ATTEMPTS: usize = 2000;
        for _ in 0..rb.count {
            let mut placed = false;
            for _ in 0..ATTEMPTS {
                let size: [f64; 3] =
                    core::array::from_fn(|a| rng.random_range(rb.min_size[a]..=rb.max_size[a]));
                let lo_x = rlo[0] + spec.margin;
                let hi_x = rhi[0] - spec.margin - size[0];
                let lo_y = rlo[1] + spec.margin;
                let hi_y = rhi[1] - spec.margin - size[1];
                if hi_x <= lo_x || hi_y <= lo_y || size[2] >= room.height {
                    continue;
                }
                let x = rng.random_range(lo_x..hi_x);
                let y = rng.random_range(lo_y..hi_y);
                let bx = ([x, y, 0.0], [x + size[0], y + size[1], size[2]]);
                let clash = obstacles.iter().any(|o| aabb_overlap(&o.shape.aabb(), &bx, spec.margin))
                    || spec.keep_clear.iter().any(|k| disk_hits_box(k, &bx));
                if !clash {
                    obstacles.push(Obstacle { shape: Shape::Box { min: bx.0, max: bx.1 }, material: rb.material });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::UnsatisfiablePlacement { attempts: ATTEMPTS });
            }
        }
    }
    let mut scene = Scene { room, floor: spec.floor, ceiling: spec.ceiling, walls: spec.walls, obstacles, id: 0 };
    scene.id = rng::hash_bytes(&scene.to_bytes());
    Ok(Arc::new(scene))
}

fn room_bounds(room: &Room) -> ([f64; 3], [f64; 3]) {
    (
        [-room.width / 2.0, -room.depth / 2.0, 0.0],
        [room.width / 2.0, room.depth / 2.0, room.height],
    )
}

/// Whether two boxes come closer than `margin`.
pub fn aabb_overlap(a: &([f64; 3], [f64; 3]), b: &([f64; 3], [f64; 3]), margin: f64) -> bool {
    (0..3).all(|i| a.0[i] < b.1[i] + margin && b.0[i] < a.1[i] + margin)
}

fn disk_hits_box(k: &KeepClear, b: &([f64; 3], [f64; 3])) -> bool {
    let cx = k.center[0].clamp(b.0[0], b.1[0]);
    let cy = k.center[1].clamp(b.0[1], b.1[1]);
    let (dx, dy) = (k.center[0] - cx, k.center[1] - cy);
    dx * dx + dy * dy < k.radius * k.radius
}

fn push_f64(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn push_material(out: &mut Vec<u8>, m: &Material) {
    match m {
        Material::Solid { color } => {
            out.push(0);
            color.iter().for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
        }
        Material::Checker { a, b, size } => {
            out.push(1);
            a.iter().chain(b).for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
            push_f64(out, *size);
        }
        Material::Mosaic { a, b, size, seed } => {
            out.push(2);
            a.iter().chain(b).for_each(|c| out.extend_from_slice(&c.to_le_bytes()));
            push_f64(out, *size);
            out.extend_from_slice(&seed.to_le_bytes());
        }
    }
}

impl Scene {
    /// Canonical byte encoding; equal scenes give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for x in [self.room.width, self.room.depth, self.room.height] {
            push_f64(&mut out, x);
        }
        push_material(&mut out, &self.floor);
        push_material(&mut out, &self.ceiling);
        self.walls.iter().for_each(|m| push_material(&mut out, m));
        for o in &self.obstacles {
            match o.shape {
                Shape::Box { min, max } => {
                    out.push(0);
                    min.iter().chain(&max).for_each(|x| push_f64(&mut out, *x));
                }
                Shape::Cylinder { center, radius, z_min, z_max } => {
                    out.push(1);
                    for x in [center[0], center[1], radius, z_min, z_max] {
                        push_f64(&mut out, x);
                    }
                }
            }
            push_material(&mut out, &o.material);
        }
        out
    }

    pub fn id(&self) -> u64 {
        self.id
    }
    pub fn room(&self) -> Room {
        self.room
    }
    pub fn obstacles(&self) -> &[Obstacle] {
        &self.obstacles
    }

    /// Strictly inside the room and outside every obstacle, both by `clearance`.
    pub fn is_free(&self, p: &Vec3, clearance: f64) -> bool {
        let (lo, hi) = room_bounds(&self.room);
        (0..3).all(|a| p[a] > lo[a] + clearance && p[a] < hi[a] - clearance)
            && !self.obstacles.iter().any(|o| o.shape.contains(p, clearance))
    }

    /// Whether the segment between two points stays in free space (sampled every 1 cm).
    pub fn segment_free(&self, a: &Vec3, b: &Vec3, clearance: f64) -> bool {
        let n = ((b - a).norm() / 0.01).max(1.0) as usize;
        (0..=n).all(|i| self.is_free(&(a + (b - a) * (i as f64 / n as f64)), clearance))
    }

    /// Distance from `p` to the nearest scene surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let (lo, hi) = room_bounds(&self.room);
        let mut d = f64::INFINITY;
        for a in 0..3 {
            d = d.min((p[a] - lo[a]).abs()).min((hi[a] - p[a]).abs());
        }
        self.obstacles.iter().fold(d, |d, o| d.min(o.shape.surface_distance(p)))
    }

    /// First surface hit along `o + t·d` for `t > 0`. `d` need not be unit.
    pub fn cast(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let (lo, hi) = room_bounds(&self.room);
        let mut best: Option<(f64, Vec3, f64, f64, Material)> = None;
        for a in 0..3 {
            if d[a] == 0.0 {
                continue;
            }
            let (bound, face, sign) = if d[a] > 0.0 { (hi[a], 2 * a + 1, -1.0) } else { (lo[a], 2 * a, 1.0) };
            let t = (bound - o[a]) / d[a];
            if t > EPS && best.is_none_or(|b| t < b.0) {
                let mut n = Vec3::zeros();
                n[a] = sign;
                let p = o + d * t;
                let (s, tt) = face_coords(&p, a);
                let m = match face {
                    0..=3 => self.walls[face],
                    4 => self.floor,
                    _ => self.ceiling,
                };
                best = Some((t, n, s, tt, m));
            }
        }
        for ob in &self.obstacles {
            if let Some((t, n, s, tt)) = ob.shape.intersect(o, d) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, n, s, tt, ob.material));
                }
            }
        }
        best.map(|(t, normal, s, tt, m)| Hit { t, normal, color: m.color(s, tt) })
    }

    /// Renders color and depth for `capture` without any free-space check.
    pub fn render_capture(&self, capture: &Capture, width: usize, height: usize) -> (Panorama, DepthMap) {
        let table = DirTable::new(width, height);
        let mut rgb = Vec::with_capacity(width * height);
        let mut depth = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                match self.cast(&capture.center, &(capture.linear * table.dir(u, v))) {
                    Some(h) => {
                        rgb.push(h.color);
                        depth.push(h.t);
                    }
                    None => {
                        rgb.push([0.0; 3]);
                        depth.push(f64::NAN);
                    }
                }
            }
        }
        (
            Panorama::from_clamped(width, height, rgb).with_capture(Some(*capture)),
            DepthMap::from_raw(width, height, depth),
        )
    }

    /// Depth only, for `capture`.
    pub fn render_depth(&self, capture: &Capture, width: usize, height: usize) -> DepthMap {
        let table = DirTable::new(width, height);
        let depth = (0..width * height)
            .map(|i| {
                self.cast(&capture.center, &(capture.linear * table.dir_index(i))).map_or(f64::NAN, |h| h.t)
            })
            .collect();
        DepthMap::from_raw(width, height, depth)
    }
}

/// Ground-truth RGB-D panorama at `pose` (camera-to-world).
pub fn render_panorama(scene: &Scene, pose: &Pose, width: usize, height: usize) -> Result<(Panorama, DepthMap)> {
    if height == 0 || width != 2 * height {
        return Err(invalid("panorama width must equal 2 × height"));
    }
    if !scene.is_free(&pose.translation, 0.0) {
        return Err(Error::OutsideFreeSpace);
    }
    Ok(scene.render_capture(&Capture::from_pose(scene.id, pose), width, height))
}
