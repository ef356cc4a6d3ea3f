//! Procedural gridworld generator and episode simulator.
//!
//! The world is a 2D occupancy grid extruded to 3D with a fixed camera height.
//! Walls block both movement and sight. Instances sit on free cells: they are
//! opaque to the sensor (rays stop at them) but traversable for pathing, so
//! the free area stays a single connected component no matter where furniture
//! lands.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, SemLabel};
use crate::geom::{angle_diff, bresenham, wrap_angle, Cell, CellRect, Point3};

/// Fixed camera height in meters.
pub const CAMERA_HEIGHT: f64 = 1.5;
/// Sensing range of the panoramic depth sensor, meters.
pub const R_MAX: f64 = 5.0;
/// Maximum single waypoint step, meters.
pub const MAX_STEP: f64 = 3.0;
/// A waypoint on a blocked cell snaps to the nearest free cell within this radius.
pub const SNAP_RADIUS: f64 = 0.5;
/// Number of 30-degree waypoint sectors around the agent.
pub const SECTOR_COUNT: usize = 12;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    #[serde(default = "default_cell_size")]
    pub cell_size: f64,
    pub rooms: usize,
    pub instances: usize,
    /// Category vocabulary; defaults to the built-in list.
    #[serde(default)]
    pub categories: Option<Vec<String>>,
}

fn default_cell_size() -> f64 {
    0.25
}

impl SceneConfig {
    pub fn new(grid_width: usize, grid_height: usize, rooms: usize, instances: usize) -> Self {
        Self { grid_width, grid_height, cell_size: 0.25, rooms, instances, categories: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: i64,
    pub category: String,
    pub description: String,
    pub center: Point3,
    pub points: Vec<Point3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Zone {
    pub label: String,
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Zone {
    pub fn rect(&self) -> CellRect {
        CellRect { x0: self.x0, y0: self.y0, x1: self.x1, y1: self.y1 }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: String,
    pub cell_size: f64,
    /// Row-major, `true` = blocked.
    occupancy: Vec<bool>,
    width: usize,
    height: usize,
    pub instances: Vec<InstanceRecord>,
    pub zones: Vec<Zone>,
    pub rng_seed: u64,
    /// Derived: cell -> instance occupying it.
    instance_map: BTreeMap<Cell, i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub position: Point3,
    pub heading: f64,
}

impl AgentPose {
    pub fn new(position: Point3, heading: f64) -> Self {
        Self { position, heading: wrap_angle(heading) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPoint {
    pub position: Point3,
    pub feature: Vec<f64>,
    pub visible_instance_id: Option<i64>,
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub pose: AgentPose,
    pub patch_points: Vec<PatchPoint>,
    pub timestamp: usize,
}

/// One per-sector navigable waypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectorWaypoint {
    pub sector: usize,
    pub position: Point3,
    pub distance: f64,
}

/// A fully specified episode, with ground truth.
#[derive(Debug, Clone)]
pub struct EpisodeTask {
    pub task_id: String,
    pub instruction: String,
    pub plan_steps: Vec<String>,
    /// (instance id or None for waypoint-only subgoals, target position).
    pub step_targets: Vec<(Option<i64>, Point3)>,
    pub start_pose: AgentPose,
    /// One shortest-path segment per plan step.
    pub gt_trajectory: Vec<Vec<Point3>>,
}

#[derive(Debug, Clone, Copy)]
pub enum SceneEdit {
    RemoveInstance,
    MoveInstance,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.width && (c.y as usize) < self.height
    }

    #[inline]
    pub fn is_blocked(&self, c: Cell) -> bool {
        !self.in_bounds(c) || self.occupancy[c.y as usize * self.width + c.x as usize]
    }

    #[inline]
    pub fn is_free(&self, c: Cell) -> bool {
        !self.is_blocked(c)
    }

    /// Opaque to the depth sensor: walls and instance footprints.
    #[inline]
    pub fn is_opaque(&self, c: Cell) -> bool {
        self.is_blocked(c) || self.instance_map.contains_key(&c)
    }

    pub fn instance_at(&self, c: Cell) -> Option<i64> {
        self.instance_map.get(&c).copied()
    }

    pub fn instance(&self, id: i64) -> Option<&InstanceRecord> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    pub fn cell_of(&self, p: Point3) -> Cell {
        Cell::new((p.x / self.cell_size).floor() as i32, (p.y / self.cell_size).floor() as i32)
    }

    pub fn cell_center(&self, c: Cell, z: f64) -> Point3 {
        Point3::new(
            (c.x as f64 + 0.5) * self.cell_size,
            (c.y as f64 + 0.5) * self.cell_size,
            z,
        )
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height as i32 {
            for x in 0..self.width as i32 {
                let c = Cell::new(x, y);
                if self.is_free(c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn zone_of(&self, c: Cell) -> Option<&Zone> {
        self.zones.iter().find(|z| z.rect().contains(c))
    }

    /// Clear Bresenham line between two cells, endpoints excluded, against `opaque`.
    fn line_clear(&self, a: Cell, b: Cell, opaque: impl Fn(&Scene, Cell) -> bool) -> bool {
        let line = bresenham(a, b);
        for c in line.iter().skip(1).take(line.len().saturating_sub(2)) {
            if opaque(self, *c) {
                return false;
            }
        }
        true
    }

    /// Check every structural invariant; used by the generator and after edits.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.instance_id) {
                return Err(Error::InvalidPlacement(format!(
                    "duplicate instance id {}",
                    inst.instance_id
                )));
            }
            let c = self.cell_of(inst.center);
            if !self.in_bounds(c) {
                return Err(Error::InvalidPlacement(format!(
                    "instance {} center out of bounds",
                    inst.instance_id
                )));
            }
            if self.is_blocked(c) {
                return Err(Error::InvalidPlacement(format!(
                    "instance {} center inside a blocked cell",
                    inst.instance_id
                )));
            }
            if inst.points.len() < 8 {
                return Err(Error::InvalidPlacement(format!(
                    "instance {} has fewer than 8 points",
                    inst.instance_id
                )));
            }
            for p in &inst.points {
                if p.dist(&inst.center) > 1.0 + 1e-9 {
                    return Err(Error::InvalidPlacement(format!(
                        "instance {} point farther than 1 m from center",
                        inst.instance_id
                    )));
                }
            }
        }
        // free cells form one connected component
        let free = self.free_cells();
        if !free.is_empty() {
            let mut seen = BTreeSet::new();
            let mut queue = VecDeque::new();
            seen.insert(free[0]);
            queue.push_back(free[0]);
            while let Some(c) = queue.pop_front() {
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let n = Cell::new(c.x + dx, c.y + dy);
                    if self.is_free(n) && seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
            if seen.len() != free.len() {
                return Err(Error::BadConfig(format!(
                    "free area disconnected: {} of {} reachable",
                    seen.len(),
                    free.len()
                )));
            }
        }
        // zones tile the free area
        for c in &free {
            let n = self.zones.iter().filter(|z| z.rect().contains(*c)).count();
            if n != 1 {
                return Err(Error::BadConfig(format!(
                    "free cell ({}, {}) belongs to {} zones",
                    c.x, c.y, n
                )));
            }
        }
        Ok(())
    }

    fn rebuild_instance_map(&mut self) {
        self.instance_map.clear();
        let mut map = BTreeMap::new();
        for inst in &self.instances {
            for p in &inst.points {
                let c = self.cell_of(*p);
                map.entry(c).or_insert(inst.instance_id);
            }
            map.entry(self.cell_of(inst.center)).or_insert(inst.instance_id);
        }
        self.instance_map = map;
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

struct BspLeaf {
    rect: CellRect,
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    let w = config.grid_width;
    let h = config.grid_height;
    if !(8..=64).contains(&w) || !(8..=64).contains(&h) {
        return Err(Error::BadConfig(format!("grid dims {w}x{h} outside 8..=64")));
    }
    if config.rooms == 0 {
        return Err(Error::BadConfig("room count must be >= 1".into()));
    }
    if config.cell_size <= 0.0 {
        return Err(Error::BadConfig("cell_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut occupancy = vec![false; w * h];
    for x in 0..w {
        occupancy[x] = true;
        occupancy[(h - 1) * w + x] = true;
    }
    for y in 0..h {
        occupancy[y * w] = true;
        occupancy[y * w + w - 1] = true;
    }

    // BSP into rooms; each internal wall gets at least one door.
    let interior = CellRect { x0: 1, y0: 1, x1: w as i32 - 1, y1: h as i32 - 1 };
    let mut leaves = vec![BspLeaf { rect: interior }];
    while leaves.len() < config.rooms {
        // split the largest splittable leaf
        let idx = leaves
            .iter()
            .enumerate()
            .filter(|(_, l)| l.rect.width().max(l.rect.height()) >= 7)
            .max_by_key(|(_, l)| l.rect.width() as i64 * l.rect.height() as i64)
            .map(|(i, _)| i);
        let Some(idx) = idx else { break };
        let rect = leaves[idx].rect;
        let vertical = if rect.width() > rect.height() {
            true
        } else if rect.height() > rect.width() {
            false
        } else {
            rng.random_bool(0.5)
        };
        if vertical {
            let xs = rng.random_range(rect.x0 + 3..=rect.x1 - 4);
            for y in rect.y0..rect.y1 {
                occupancy[y as usize * w + xs as usize] = true;
            }
            let door = rng.random_range(rect.y0..rect.y1);
            occupancy[door as usize * w + xs as usize] = false;
            leaves[idx].rect = CellRect { x1: xs, ..rect };
            leaves.push(BspLeaf { rect: CellRect { x0: xs, ..rect } });
        } else {
            let ys = rng.random_range(rect.y0 + 3..=rect.y1 - 4);
            for x in rect.x0..rect.x1 {
                occupancy[ys as usize * w + x as usize] = true;
            }
            let door = rng.random_range(rect.x0..rect.x1);
            occupancy[ys as usize * w + door as usize] = false;
            leaves[idx].rect = CellRect { y1: ys, ..rect };
            leaves.push(BspLeaf { rect: CellRect { y0: ys, ..rect } });
        }
    }

    // Door placement can strand pockets when later split walls land next to a
    // door; carve through thickness-1 separators until one component remains.
    loop {
        let free: Vec<Cell> = (0..h as i32)
            .flat_map(|y| (0..w as i32).map(move |x| Cell::new(x, y)))
            .filter(|c| !occupancy[c.y as usize * w + c.x as usize])
            .collect();
        if free.is_empty() {
            break;
        }
        let mut reached = BTreeSet::new();
        let mut queue = VecDeque::new();
        reached.insert(free[0]);
        queue.push_back(free[0]);
        while let Some(c) = queue.pop_front() {
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let n = Cell::new(c.x + dx, c.y + dy);
                if n.x >= 0
                    && n.y >= 0
                    && (n.x as usize) < w
                    && (n.y as usize) < h
                    && !occupancy[n.y as usize * w + n.x as usize]
                    && reached.insert(n)
                {
                    queue.push_back(n);
                }
            }
        }
        if reached.len() == free.len() {
            break;
        }
        let mut carved = false;
        'search: for y in 1..h as i32 - 1 {
            for x in 1..w as i32 - 1 {
                if !occupancy[y as usize * w + x as usize] {
                    continue;
                }
                let mut has_reached = false;
                let mut has_stranded = false;
                for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let n = Cell::new(x + dx, y + dy);
                    if occupancy[n.y as usize * w + n.x as usize] {
                        continue;
                    }
                    if reached.contains(&n) {
                        has_reached = true;
                    } else {
                        has_stranded = true;
                    }
                }
                if has_reached && has_stranded {
                    occupancy[y as usize * w + x as usize] = false;
                    carved = true;
                    break 'search;
                }
            }
        }
        if !carved {
            return Err(Error::BadConfig("could not connect free area".into()));
        }
    }

    let zone_labels = features::ZONE_NAMES;
    let zones: Vec<Zone> = leaves
        .iter()
        .enumerate()
        .map(|(i, l)| Zone {
            label: zone_labels[i % zone_labels.len()].to_string(),
            x0: l.rect.x0,
            y0: l.rect.y0,
            x1: l.rect.x1,
            y1: l.rect.y1,
        })
        .collect();

    let mut scene = Scene {
        scene_id: format!("synth/{seed:016x}"),
        cell_size: config.cell_size,
        occupancy,
        width: w,
        height: h,
        instances: Vec::new(),
        zones,
        rng_seed: seed,
        instance_map: BTreeMap::new(),
    };

    // instance placement
    let categories: Vec<String> = config
        .categories
        .clone()
        .unwrap_or_else(|| features::CATEGORIES.iter().map(|s| s.to_string()).collect());
    let free = scene.free_cells();
    if config.instances * 9 > free.len() {
        return Err(Error::BadConfig(format!(
            "instance count {} exceeds free-cell capacity ({} free cells)",
            config.instances,
            free.len()
        )));
    }
    let mut taken: Vec<Cell> = Vec::new();
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < config.instances {
        attempts += 1;
        if attempts > 200 * config.instances.max(1) {
            return Err(Error::BadConfig("could not place all instances".into()));
        }
        let c = free[rng.random_range(0..free.len())];
        if taken.iter().any(|t| (t.x - c.x).abs().max((t.y - c.y).abs()) < 3) {
            continue;
        }
        let category = categories[rng.random_range(0..categories.len())].clone();
        let z = rng.random_range(0.3..1.2);
        let cs = scene.cell_size;
        let center = Point3::new(
            (c.x as f64 + 0.5) * cs + rng.random_range(-0.2..0.2) * cs,
            (c.y as f64 + 0.5) * cs + rng.random_range(-0.2..0.2) * cs,
            z,
        );
        // footprint: center cell plus up to 2 free neighbors
        let mut cells = vec![c];
        for (dx, dy) in [(1, 0), (0, 1), (-1, 0), (0, -1)] {
            if cells.len() >= 3 {
                break;
            }
            let n = Cell::new(c.x + dx, c.y + dy);
            if scene.is_free(n) && rng.random_bool(0.4) {
                cells.push(n);
            }
        }
        let n_points = 8 + rng.random_range(0..5);
        let mut points = Vec::with_capacity(n_points);
        for k in 0..n_points {
            let fc = cells[k % cells.len()];
            let p = Point3::new(
                (fc.x as f64 + rng.random_range(0.2..0.8)) * cs,
                (fc.y as f64 + rng.random_range(0.2..0.8)) * cs,
                z + rng.random_range(-0.1..0.1),
            );
            if p.dist(&center) <= 1.0 {
                points.push(p);
            } else {
                points.push(center);
            }
        }
        let zone = scene.zone_of(c).map(|z| z.label.clone()).unwrap_or_default();
        let adj = features::ADJECTIVES[rng.random_range(0..features::ADJECTIVES.len())];
        let description = format!("the {adj} {category} in the {zone}");
        scene.instances.push(InstanceRecord {
            instance_id: placed as i64 + 1,
            category,
            description,
            center,
            points,
        });
        taken.push(c);
        for fc in cells {
            taken.push(fc);
        }
        placed += 1;
    }
    scene.rebuild_instance_map();
    scene.validate()?;
    Ok(scene)
}

// ---------------------------------------------------------------------------
// sensing
// ---------------------------------------------------------------------------

pub fn observe(scene: &Scene, pose: &AgentPose) -> Observation {
    observe_at(scene, pose, 0)
}

pub fn observe_at(scene: &Scene, pose: &AgentPose, timestamp: usize) -> Observation {
    let origin = scene.cell_of(pose.position);
    let step = scene.cell_size * 0.25;
    let mut hits: BTreeSet<Cell> = BTreeSet::new();
    for deg in 0..360 {
        let a = (deg as f64).to_radians();
        let (dx, dy) = (a.cos(), a.sin());
        let mut t = step;
        while t <= R_MAX {
            let p = Point3::new(pose.position.x + t * dx, pose.position.y + t * dy, 0.0);
            let c = scene.cell_of(p);
            if !scene.in_bounds(c) {
                break;
            }
            if c != origin && scene.is_opaque(c) {
                hits.insert(c);
                break;
            }
            t += step;
        }
    }
    let dict = features::embedding_dict();
    let mut patch_points = Vec::new();
    for c in hits {
        let center = scene.cell_center(c, 0.0);
        if center.dist_xy(&pose.position) > R_MAX {
            continue;
        }
        if !scene.line_clear(origin, c, Scene::is_opaque) {
            continue;
        }
        let (label, z, inst) = match scene.instance_at(c) {
            Some(id) => {
                let rec = scene.instance(id).expect("instance map consistent");
                (SemLabel::category_index(&rec.category), rec.center.z, Some(id))
            }
            None => (SemLabel::Wall, CAMERA_HEIGHT, None),
        };
        patch_points.push(PatchPoint {
            position: scene.cell_center(c, z),
            feature: dict.embed(label),
            visible_instance_id: inst,
        });
    }
    Observation { pose: *pose, patch_points, timestamp }
}

// ---------------------------------------------------------------------------
// pathing
// ---------------------------------------------------------------------------

/// Integer cost pair: `straight + diagonal * sqrt(2)` cell units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathCost {
    pub straight: u32,
    pub diagonal: u32,
}

impl PathCost {
    pub fn units(&self) -> f64 {
        self.straight as f64 + self.diagonal as f64 * SQRT_2
    }
}

/// 8-connected moves; diagonals are allowed only when both adjacent
/// orthogonal cells are free (no corner cutting).
pub fn grid_moves(scene: &Scene, c: Cell) -> Vec<(Cell, bool)> {
    let mut out = Vec::with_capacity(8);
    for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
        let n = Cell::new(c.x + dx, c.y + dy);
        if scene.is_free(n) {
            out.push((n, false));
        }
    }
    for (dx, dy) in [(1, 1), (1, -1), (-1, 1), (-1, -1)] {
        let n = Cell::new(c.x + dx, c.y + dy);
        if scene.is_free(n)
            && scene.is_free(Cell::new(c.x + dx, c.y))
            && scene.is_free(Cell::new(c.x, c.y + dy))
        {
            out.push((n, true));
        }
    }
    out
}

#[derive(PartialEq)]
struct HeapEntry {
    f: f64,
    order: u64,
    cell: Cell,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // min-heap by (f, order)
        other
            .f
            .partial_cmp(&self.f)
            .unwrap()
            .then(other.order.cmp(&self.order))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn octile(a: Cell, b: Cell) -> f64 {
    let dx = (a.x - b.x).abs() as f64;
    let dy = (a.y - b.y).abs() as f64;
    (dx - dy).abs() + dx.min(dy) * SQRT_2
}

/// A* shortest path between cells. Returns the cell path and its cost.
pub fn shortest_path_cells(scene: &Scene, start: Cell, goal: Cell) -> Result<(Vec<Cell>, PathCost)> {
    if !scene.is_free(start) || !scene.is_free(goal) {
        return Err(Error::NoPath);
    }
    if start == goal {
        return Ok((vec![start], PathCost { straight: 0, diagonal: 0 }));
    }
    let mut g: BTreeMap<Cell, PathCost> = BTreeMap::new();
    let mut came: BTreeMap<Cell, Cell> = BTreeMap::new();
    let mut closed: BTreeSet<Cell> = BTreeSet::new();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    g.insert(start, PathCost { straight: 0, diagonal: 0 });
    heap.push(HeapEntry { f: octile(start, goal), order, cell: start });
    while let Some(HeapEntry { cell, .. }) = heap.pop() {
        if cell == goal {
            let mut path = vec![goal];
            let mut cur = goal;
            while let Some(&prev) = came.get(&cur) {
                path.push(prev);
                cur = prev;
            }
            path.reverse();
            return Ok((path, g[&goal]));
        }
        if !closed.insert(cell) {
            continue;
        }
        let gc = g[&cell];
        for (n, diag) in grid_moves(scene, cell) {
            if closed.contains(&n) {
                continue;
            }
            let ng = PathCost {
                straight: gc.straight + !diag as u32,
                diagonal: gc.diagonal + diag as u32,
            };
            let better = match g.get(&n) {
                Some(old) => ng.units() < old.units() - 1e-12,
                None => true,
            };
            if better {
                g.insert(n, ng);
                came.insert(n, cell);
                order += 1;
                heap.push(HeapEntry { f: ng.units() + octile(n, goal), order, cell: n });
            }
        }
    }
    Err(Error::NoPath)
}

/// World-coordinate shortest path at camera height, start and goal cells included.
pub fn shortest_path(scene: &Scene, start: Point3, goal: Point3) -> Result<Vec<Point3>> {
    let (cells, _) = shortest_path_cells(scene, scene.cell_of(start), scene.cell_of(goal))?;
    Ok(cells.iter().map(|c| scene.cell_center(*c, CAMERA_HEIGHT)).collect())
}

/// Geodesic distance in meters between two free points.
pub fn geodesic_distance(scene: &Scene, a: Point3, b: Point3) -> Result<f64> {
    let (_, cost) = shortest_path_cells(scene, scene.cell_of(a), scene.cell_of(b))?;
    Ok(cost.units() * scene.cell_size)
}

/// Result of executing one waypoint step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub pose: AgentPose,
    /// Cells traversed, world coordinates, including start and end.
    pub path: Vec<Point3>,
    /// Meters traveled along the path.
    pub traveled: f64,
}

pub fn step_to_waypoint_traced(
    scene: &Scene,
    pose: &AgentPose,
    waypoint: Point3,
) -> Result<StepOutcome> {
    debug_assert!(pose.position.dist_xy(&waypoint) <= MAX_STEP + 1e-6);
    let direct = scene.cell_of(waypoint);
    let target = if scene.is_free(direct) {
        direct
    } else {
        // nearest free cell within the snap radius
        let r = (SNAP_RADIUS / scene.cell_size).ceil() as i32 + 1;
        let mut best: Option<(f64, Cell)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let c = Cell::new(direct.x + dx, direct.y + dy);
                if !scene.is_free(c) {
                    continue;
                }
                let d = scene.cell_center(c, 0.0).dist_xy(&waypoint);
                if d <= SNAP_RADIUS && best.map_or(true, |(bd, _)| d < bd - 1e-12) {
                    best = Some((d, c));
                }
            }
        }
        match best {
            Some((_, c)) => c,
            None => {
                return Err(Error::Blocked { x: waypoint.x, y: waypoint.y, radius: SNAP_RADIUS })
            }
        }
    };
    let start = scene.cell_of(pose.position);
    let (cells, cost) = shortest_path_cells(scene, start, target).map_err(|_| Error::Blocked {
        x: waypoint.x,
        y: waypoint.y,
        radius: SNAP_RADIUS,
    })?;
    let path: Vec<Point3> = cells.iter().map(|c| scene.cell_center(*c, CAMERA_HEIGHT)).collect();
    let heading = if cells.len() >= 2 {
        let a = cells[cells.len() - 2];
        let b = cells[cells.len() - 1];
        ((b.y - a.y) as f64).atan2((b.x - a.x) as f64)
    } else {
        pose.heading
    };
    Ok(StepOutcome {
        pose: AgentPose::new(scene.cell_center(target, CAMERA_HEIGHT), heading),
        path,
        traveled: cost.units() * scene.cell_size,
    })
}

pub fn step_to_waypoint(scene: &Scene, pose: &AgentPose, waypoint: Point3) -> Result<AgentPose> {
    step_to_waypoint_traced(scene, pose, waypoint).map(|o| o.pose)
}

// ---------------------------------------------------------------------------
// navigable waypoints
// ---------------------------------------------------------------------------

/// Ground-truth navigable waypoints: per 30-degree sector around the heading,
/// the farthest free line-of-sight cell whose center falls in that sector,
/// within `MAX_STEP`. A sector is omitted when the cell immediately along its
/// bisector is blocked. Walls block; instances are traversable.
pub fn sector_waypoints(scene: &Scene, pose: &AgentPose) -> Vec<SectorWaypoint> {
    let origin = scene.cell_of(pose.position);
    let sector_width = std::f64::consts::TAU / SECTOR_COUNT as f64;
    // best (distance, angular diff, cell) per sector
    let mut best: Vec<Option<(f64, f64, Cell)>> = vec![None; SECTOR_COUNT];
    let r = (MAX_STEP / scene.cell_size).ceil() as i32 + 1;
    for dy in -r..=r {
        for dx in -r..=r {
            let c = Cell::new(origin.x + dx, origin.y + dy);
            if c == origin || !scene.is_free(c) {
                continue;
            }
            let center = scene.cell_center(c, 0.0);
            let d = center.dist_xy(&pose.position);
            if d > MAX_STEP {
                continue;
            }
            let dir = (center.y - pose.position.y).atan2(center.x - pose.position.x);
            let rel = wrap_angle(dir - pose.heading);
            let sector =
                (rel / sector_width).round().rem_euclid(SECTOR_COUNT as f64) as usize % SECTOR_COUNT;
            let bis = pose.heading + sector as f64 * sector_width;
            let adiff = angle_diff(dir, bis);
            if !scene.line_clear(origin, c, Scene::is_blocked) {
                continue;
            }
            let better = match &best[sector] {
                None => true,
                Some((bd, ba, bc)) => {
                    d > bd + 1e-9
                        || (d > bd - 1e-9
                            && (adiff < ba - 1e-12
                                || (adiff < ba + 1e-12 && (c.y, c.x) < (bc.y, bc.x))))
                }
            };
            if better {
                best[sector] = Some((d, adiff, c));
            }
        }
    }
    let mut out = Vec::new();
    for (sector, slot) in best.iter().enumerate() {
        let Some((_, _, c)) = slot else { continue };
        // the cell one step along the bisector must be free to start moving
        let bis = pose.heading + sector as f64 * sector_width;
        let probe = Point3::new(
            pose.position.x + scene.cell_size * bis.cos(),
            pose.position.y + scene.cell_size * bis.sin(),
            0.0,
        );
        let adj = scene.cell_of(probe);
        if adj != origin && scene.is_blocked(adj) {
            continue;
        }
        let position = scene.cell_center(*c, CAMERA_HEIGHT);
        out.push(SectorWaypoint {
            sector,
            position,
            distance: position.dist_xy(&pose.position),
        });
    }
    out
}

pub fn navigable_neighbors(scene: &Scene, pose: &AgentPose) -> Vec<Point3> {
    sector_waypoints(scene, pose).into_iter().map(|w| w.position).collect()
}

// ---------------------------------------------------------------------------
// edits
// ---------------------------------------------------------------------------

pub fn edit_scene(
    scene: &Scene,
    op: SceneEdit,
    instance_id: i64,
    new_center: Option<Point3>,
) -> Result<Scene> {
    let mut out = scene.clone();
    let idx = out
        .instances
        .iter()
        .position(|i| i.instance_id == instance_id)
        .ok_or(Error::UnknownInstance(instance_id))?;
    match op {
        SceneEdit::RemoveInstance => {
            out.instances.remove(idx);
        }
        SceneEdit::MoveInstance => {
            let new_center =
                new_center.ok_or_else(|| Error::InvalidPlacement("move needs a center".into()))?;
            let c = out.cell_of(new_center);
            if !out.in_bounds(c) || out.is_blocked(c) {
                return Err(Error::InvalidPlacement(format!(
                    "cell ({}, {}) is not free",
                    c.x, c.y
                )));
            }
            let inst = &mut out.instances[idx];
            let dx = new_center.x - inst.center.x;
            let dy = new_center.y - inst.center.y;
            let dz = new_center.z - inst.center.z;
            inst.center = new_center;
            for p in &mut inst.points {
                p.x += dx;
                p.y += dy;
                p.z += dz;
            }
        }
    }
    out.rebuild_instance_map();
    out.validate().map_err(|e| Error::InvalidPlacement(e.to_string()))?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// serialization (pinned JSON schema)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneJson {
    scene_id: String,
    cell_size: f64,
    occupancy: Vec<String>,
    instances: Vec<InstanceJson>,
    zones: Vec<Zone>,
    rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    instance_id: i64,
    category: String,
    description: String,
    center: [f64; 3],
    points: Vec<[f64; 3]>,
}

impl Scene {
    pub fn to_json(&self) -> serde_json::Value {
        let occupancy = (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| if self.occupancy[y * self.width + x] { '1' } else { '0' })
                    .collect::<String>()
            })
            .collect();
        let doc = SceneJson {
            scene_id: self.scene_id.clone(),
            cell_size: self.cell_size,
            occupancy,
            instances: self
                .instances
                .iter()
                .map(|i| InstanceJson {
                    instance_id: i.instance_id,
                    category: i.category.clone(),
                    description: i.description.clone(),
                    center: i.center.to_array(),
                    points: i.points.iter().map(|p| p.to_array()).collect(),
                })
                .collect(),
            zones: self.zones.clone(),
            rng_seed: self.rng_seed,
        };
        serde_json::to_value(doc).expect("scene serializes")
    }

    pub fn from_json(v: serde_json::Value) -> Result<Scene> {
        let doc: SceneJson = serde_json::from_value(v)?;
        let height = doc.occupancy.len();
        let width = doc.occupancy.first().map_or(0, |r| r.len());
        let mut occupancy = Vec::with_capacity(width * height);
        for (y, row) in doc.occupancy.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Schema {
                    path: format!("$.occupancy[{y}]"),
                    msg: "ragged occupancy rows".into(),
                });
            }
            for ch in row.chars() {
                match ch {
                    '0' => occupancy.push(false),
                    '1' => occupancy.push(true),
                    _ => {
                        return Err(Error::Schema {
                            path: format!("$.occupancy[{y}]"),
                            msg: format!("invalid cell char {ch:?}"),
                        })
                    }
                }
            }
        }
        let mut scene = Scene {
            scene_id: doc.scene_id,
            cell_size: doc.cell_size,
            occupancy,
            width,
            height,
            instances: doc
                .instances
                .into_iter()
                .map(|i| InstanceRecord {
                    instance_id: i.instance_id,
                    category: i.category,
                    description: i.description,
                    center: Point3::from_array(i.center),
                    points: i.points.into_iter().map(Point3::from_array).collect(),
                })
                .collect(),
            zones: doc.zones,
            rng_seed: doc.rng_seed,
            instance_map: BTreeMap::new(),
        };
        scene.rebuild_instance_map();
        Ok(scene)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path)?;
        Scene::from_json(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_scene() -> Scene {
        generate_scene(&SceneConfig::new(8, 8, 1, 0), 0).unwrap()
    }

    #[test]
    fn degenerate_empty_scene() {
        let s = empty_scene();
        assert_eq!(s.instances.len(), 0);
        assert_eq!(s.zones.len(), 1);
        // interior all free
        for y in 1..7 {
            for x in 1..7 {
                assert!(s.is_free(Cell::new(x, y)));
            }
        }
    }

    #[test]
    fn generation_deterministic() {
        let cfg = SceneConfig::new(32, 32, 4, 20);
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a.to_json()).unwrap(),
            serde_json::to_string(&b.to_json()).unwrap()
        );
    }

    #[test]
    fn generated_scene_connected_flood_fill() {
        let cfg = SceneConfig::new(32, 32, 4, 20);
        let s = generate_scene(&cfg, 7).unwrap();
        // independent flood fill oracle
        let free = s.free_cells();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![free[0]];
        seen.insert(free[0]);
        while let Some(c) = stack.pop() {
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let n = Cell::new(c.x + dx, c.y + dy);
                if s.is_free(n) && seen.insert(n) {
                    stack.push(n);
                }
            }
        }
        assert_eq!(seen.len(), free.len());
    }

    #[test]
    fn config_rejected_when_overfull() {
        let cfg = SceneConfig::new(8, 8, 1, 30);
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn observe_small_room_sees_every_boundary_cell() {
        let s = empty_scene();
        let pose = AgentPose::new(s.cell_center(Cell::new(3, 3), CAMERA_HEIGHT), 0.0);
        let obs = observe(&s, &pose);
        // brute-force visibility oracle over all boundary cells
        let mut expected = BTreeSet::new();
        for y in 0..8 {
            for x in 0..8 {
                let c = Cell::new(x, y);
                if s.is_blocked(c) && s.cell_center(c, 0.0).dist_xy(&pose.position) <= R_MAX {
                    let line = bresenham(Cell::new(3, 3), c);
                    let clear = line[1..line.len() - 1].iter().all(|m| !s.is_opaque(*m));
                    if clear {
                        expected.insert(c);
                    }
                }
            }
        }
        let got: BTreeSet<Cell> = obs.patch_points.iter().map(|p| s.cell_of(p.position)).collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), obs.patch_points.len(), "each cell appears exactly once");
    }

    #[test]
    fn observe_occlusion_and_determinism() {
        let cfg = SceneConfig::new(24, 24, 2, 6);
        let s = generate_scene(&cfg, 3).unwrap();
        let free = s.free_cells();
        let pose = AgentPose::new(s.cell_center(free[0], CAMERA_HEIGHT), 1.0);
        let a = observe(&s, &pose);
        let b = observe(&s, &pose);
        assert_eq!(a.patch_points, b.patch_points);
        // every patch point has clear Bresenham LOS
        let origin = s.cell_of(pose.position);
        for p in &a.patch_points {
            let line = bresenham(origin, s.cell_of(p.position));
            assert!(line[1..line.len() - 1].iter().all(|m| !s.is_opaque(*m)));
        }
    }

    #[test]
    fn shortest_path_identity_and_diagonal() {
        let s = empty_scene();
        let a = s.cell_center(Cell::new(2, 2), CAMERA_HEIGHT);
        assert_eq!(shortest_path(&s, a, a).unwrap().len(), 1);
        // 5x5 free block: opposite corners cost 4*sqrt(2)
        let (_, cost) =
            shortest_path_cells(&s, Cell::new(1, 1), Cell::new(5, 5)).unwrap();
        assert_eq!(cost, PathCost { straight: 0, diagonal: 4 });
        assert!((cost.units() - 4.0 * SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn geodesic_adjacent() {
        let s = empty_scene();
        let a = s.cell_center(Cell::new(2, 2), CAMERA_HEIGHT);
        let b = s.cell_center(Cell::new(3, 2), CAMERA_HEIGHT);
        assert_eq!(geodesic_distance(&s, a, a).unwrap(), 0.0);
        assert!((geodesic_distance(&s, a, b).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn step_to_waypoint_basics() {
        let s = empty_scene();
        let pose = AgentPose::new(s.cell_center(Cell::new(3, 3), CAMERA_HEIGHT), 0.7);
        // same position: heading preserved
        let out = step_to_waypoint(&s, &pose, pose.position).unwrap();
        assert_eq!(out.position, pose.position);
        assert_eq!(out.heading, 0.7);
        // one cell east
        let east = s.cell_center(Cell::new(4, 3), CAMERA_HEIGHT);
        let out = step_to_waypoint(&s, &pose, east).unwrap();
        assert!((out.position.x - pose.position.x - 0.25).abs() < 1e-12);
        assert_eq!(out.heading, 0.0);
    }

    #[test]
    fn step_snaps_to_free_neighbor() {
        let s = empty_scene();
        let pose = AgentPose::new(s.cell_center(Cell::new(3, 3), CAMERA_HEIGHT), 0.0);
        // waypoint centered on the east border wall at y=3: nearest free within 0.5 m
        let wall = s.cell_center(Cell::new(7, 3), 0.0);
        let wp = Point3::new(wall.x - 0.5, wall.y, CAMERA_HEIGHT);
        // wp sits in cell 5? ensure it targets a blocked-ish scenario: use exact wall center
        let out = step_to_waypoint_traced(&s, &pose, Point3::new(wall.x, wall.y, CAMERA_HEIGHT));
        // oracle: enumerate free cells within 0.5 m of the wall center, pick nearest
        let mut best: Option<(f64, Cell)> = None;
        for y in 0..8 {
            for x in 0..8 {
                let c = Cell::new(x, y);
                if s.is_free(c) {
                    let d = s.cell_center(c, 0.0).dist_xy(&wall);
                    if d <= SNAP_RADIUS && best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, c));
                    }
                }
            }
        }
        let out = out.unwrap();
        assert_eq!(s.cell_of(out.pose.position), best.unwrap().1);
        let _ = wp;
    }

    #[test]
    fn sector_waypoints_open_field() {
        let s = generate_scene(&SceneConfig::new(32, 32, 1, 0), 0).unwrap();
        let pose = AgentPose::new(s.cell_center(Cell::new(16, 16), CAMERA_HEIGHT), 0.0);
        let wps = sector_waypoints(&s, &pose);
        assert_eq!(wps.len(), 12);
        for w in &wps {
            assert!(w.distance > 2.5 && w.distance <= MAX_STEP + 1e-9, "{}", w.distance);
        }
    }

    #[test]
    fn sector_waypoints_corridor() {
        // carve a 1-cell corridor in an otherwise blocked scene
        let mut s = generate_scene(&SceneConfig::new(24, 24, 1, 0), 0).unwrap();
        for y in 0..24usize {
            for x in 0..24usize {
                s.occupancy[y * 24 + x] = true;
            }
        }
        for x in 2..22usize {
            s.occupancy[12 * 24 + x] = false;
        }
        let pose = AgentPose::new(s.cell_center(Cell::new(12, 12), CAMERA_HEIGHT), 0.0);
        let wps = sector_waypoints(&s, &pose);
        assert_eq!(wps.len(), 2, "east and west only: {wps:?}");
        for w in &wps {
            assert!((w.position.y - pose.position.y).abs() < 1e-9);
        }
    }

    #[test]
    fn sector_waypoints_enclosed() {
        let mut s = generate_scene(&SceneConfig::new(8, 8, 1, 0), 0).unwrap();
        for y in 0..8usize {
            for x in 0..8usize {
                s.occupancy[y * 8 + x] = true;
            }
        }
        s.occupancy[3 * 8 + 3] = false;
        let pose = AgentPose::new(s.cell_center(Cell::new(3, 3), CAMERA_HEIGHT), 0.0);
        assert!(sector_waypoints(&s, &pose).is_empty());
    }

    #[test]
    fn edit_remove_and_move() {
        let cfg = SceneConfig::new(24, 24, 2, 5);
        let s = generate_scene(&cfg, 11).unwrap();
        let id = s.instances[0].instance_id;
        let removed = edit_scene(&s, SceneEdit::RemoveInstance, id, None).unwrap();
        assert!(removed.instance(id).is_none());
        // move to same center: scene unchanged
        let center = s.instances[1].center;
        let moved = edit_scene(&s, SceneEdit::MoveInstance, s.instances[1].instance_id, Some(center))
            .unwrap();
        assert_eq!(
            serde_json::to_string(&moved.to_json()).unwrap(),
            serde_json::to_string(&s.to_json()).unwrap()
        );
        assert!(edit_scene(&s, SceneEdit::RemoveInstance, 9999, None).is_err());
    }

    #[test]
    fn edit_move_changes_observation() {
        let cfg = SceneConfig::new(24, 24, 1, 3);
        let s = generate_scene(&cfg, 5).unwrap();
        let inst = s.instances[0].clone();
        // observe from a pose next to the instance
        let c = s.cell_of(inst.center);
        let mut vantage = None;
        for (dx, dy) in [(2, 0), (-2, 0), (0, 2), (0, -2), (3, 0), (0, 3)] {
            let n = Cell::new(c.x + dx, c.y + dy);
            if s.is_free(n) && s.instance_at(n).is_none() {
                vantage = Some(n);
                break;
            }
        }
        let pose = AgentPose::new(s.cell_center(vantage.unwrap(), CAMERA_HEIGHT), 0.0);
        let before = observe(&s, &pose);
        assert!(before.patch_points.iter().any(|p| p.visible_instance_id == Some(inst.instance_id)));
        // move the instance far away
        let far = s
            .free_cells()
            .into_iter()
            .rev()
            .find(|fc| {
                s.instance_at(*fc).is_none()
                    && s.cell_center(*fc, 0.0).dist_xy(&inst.center) > 2.0
            })
            .unwrap();
        let far_center = s.cell_center(far, inst.center.z);
        let moved = edit_scene(&s, SceneEdit::MoveInstance, inst.instance_id, Some(far_center)).unwrap();
        let after = observe(&moved, &pose);
        let old_cells: BTreeSet<Cell> = before
            .patch_points
            .iter()
            .filter(|p| p.visible_instance_id == Some(inst.instance_id))
            .map(|p| s.cell_of(p.position))
            .collect();
        for p in &after.patch_points {
            if old_cells.contains(&moved.cell_of(p.position)) {
                assert_ne!(p.visible_instance_id, Some(inst.instance_id));
            }
        }
    }

    #[test]
    fn scene_json_roundtrip() {
        let cfg = SceneConfig::new(20, 16, 2, 4);
        let s = generate_scene(&cfg, 9).unwrap();
        let v = s.to_json();
        let back = Scene::from_json(v.clone()).unwrap();
        assert_eq!(serde_json::to_string(&back.to_json()).unwrap(), serde_json::to_string(&v).unwrap());
    }
}

/// Load every scene file in a directory, keyed by scene id.
pub fn load_scenes_dir(dir: &std::path::Path) -> Result<std::collections::BTreeMap<String, Scene>> {
    let mut out = std::collections::BTreeMap::new();
    let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    for path in entries {
        let scene = Scene::load(&path)?;
        out.insert(scene.scene_id.clone(), scene);
    }
    Ok(out)
}
