//! Synthesis and I/O of the six fragmented annotation types, plus grounding
//! label assignment against a built memory.
//!
//! Every sample starts as a fully annotated draft; partial types are made by
//! deleting fields. The undegraded draft rides in a `<name>.hidden.json`
//! sidecar so training sees only fragments while evaluation can score
//! everything.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Cell, Point3};
use crate::memory::{MemTokenId, MultiLevelMemory};
use crate::scene::{
    self, AgentPose, EpisodeTask, InstanceRecord, Scene, CAMERA_HEIGHT,
};

/// Sentinel instance id marking waypoint-only subgoals.
pub const WAYPOINT_SENTINEL: i64 = -10000;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSample {
    pub scene_id: String,
    pub instruction: String,
    pub planning: Vec<String>,
    pub instance_id: Vec<Vec<i64>>,
    pub instance_type: Vec<Option<String>>,
    pub instance_position: Vec<Point3>,
    pub start_pose: Option<AgentPose>,
    pub data_type: u8,
}

impl AnnotationSample {
    pub fn has_plan(&self) -> bool {
        !self.planning.is_empty()
    }

    pub fn has_ground(&self) -> bool {
        self.instance_type.iter().any(|t| t.is_some())
    }

    pub fn has_nav(&self) -> bool {
        self.start_pose.is_some()
    }

    pub fn steps(&self) -> usize {
        self.instance_position.len()
    }

    /// Table-1 row from the (plan, ground, nav) pattern.
    pub fn type_of(has_plan: bool, has_ground: bool, has_nav: bool) -> Option<u8> {
        match (has_plan, has_ground, has_nav) {
            (true, true, true) => Some(1),
            (true, true, false) => Some(2),
            (true, false, true) => Some(3),
            (false, true, true) => Some(4),
            (false, true, false) => Some(5),
            (false, false, true) => Some(6),
            _ => None,
        }
    }
}

/// Scripted mid-episode edit used to train and test dynamic replanning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionScript {
    /// Remove the instance once the agent has executed this many steps.
    pub remove_at_step: usize,
    pub remove_instance: i64,
    /// Gold plan after a target_missing flag: skip the missing subgoal.
    pub revised_planning: Vec<String>,
}

/// Undegraded ground truth riding alongside a (possibly fragmented) sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenSample {
    pub planning: Vec<String>,
    pub instance_id: Vec<Vec<i64>>,
    pub instance_type: Vec<Option<String>>,
    pub instance_position: Vec<[f64; 3]>,
    pub start_position: [f64; 3],
    pub start_heading: f64,
    /// Per-step answer text, final step last.
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<RevisionScript>,
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthOptions {
    /// Minimum geodesic start-to-first-target distance, meters.
    pub min_start_goal: f64,
    /// Subgoals per multi-step sample.
    pub max_steps: usize,
    /// Fraction of gold samples that carry a revision script.
    pub revision_fraction: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { min_start_goal: 1.0, max_steps: 3, revision_fraction: 0.0 }
    }
}

pub fn synthesize_samples(
    scene: &Scene,
    mix: &BTreeMap<u8, usize>,
    seed: u64,
) -> Result<Vec<(AnnotationSample, HiddenSample)>> {
    synthesize_samples_opts(scene, mix, seed, &SynthOptions::default())
}

pub fn synthesize_samples_opts(
    scene: &Scene,
    mix: &BTreeMap<u8, usize>,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Vec<(AnnotationSample, HiddenSample)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (&data_type, &count) in mix {
        if !(1..=6).contains(&data_type) {
            return Err(Error::Schema {
                path: "$.mix".into(),
                msg: format!("data type {data_type} outside 1..6"),
            });
        }
        for _ in 0..count {
            out.push(draft_and_degrade(scene, data_type, &mut rng, opts)?);
        }
    }
    Ok(out)
}

fn draft_and_degrade(
    scene: &Scene,
    data_type: u8,
    rng: &mut ChaCha8Rng,
    opts: &SynthOptions,
) -> Result<(AnnotationSample, HiddenSample)> {
    let multi_step = matches!(data_type, 1 | 2 | 3 | 6);
    let n_steps = if multi_step { rng.random_range(1..=opts.max_steps.max(1)) } else { 1 };
    let waypoint_style = matches!(data_type, 3 | 6);

    // pick targets
    let mut ids: Vec<i64> = Vec::new();
    let mut cats: Vec<Option<String>> = Vec::new();
    let mut positions: Vec<Point3> = Vec::new();
    let mut clauses: Vec<String> = Vec::new();
    if waypoint_style {
        // waypoint subgoals at zone centers
        if scene.zones.is_empty() {
            return Err(Error::InsufficientInstances { need: 1, have: 0 });
        }
        let mut last = usize::MAX;
        for _ in 0..n_steps {
            let mut zi = rng.random_range(0..scene.zones.len());
            if scene.zones.len() > 1 && zi == last {
                zi = (zi + 1) % scene.zones.len();
            }
            last = zi;
            let z = &scene.zones[zi];
            let (cx, cy) = z.rect().center_cells();
            let target = nearest_free_cell(scene, Cell::new(cx as i32, cy as i32))
                .ok_or_else(|| Error::BadConfig("zone has no free cell".into()))?;
            ids.push(WAYPOINT_SENTINEL);
            cats.push(None);
            positions.push(scene.cell_center(target, CAMERA_HEIGHT));
            clauses.push(format!("walk to the {}", z.label));
        }
    } else {
        if scene.instances.len() < n_steps {
            return Err(Error::InsufficientInstances {
                need: n_steps,
                have: scene.instances.len(),
            });
        }
        let mut order: Vec<usize> = (0..scene.instances.len()).collect();
        order.shuffle(rng);
        for &k in order.iter().take(n_steps) {
            let inst = &scene.instances[k];
            ids.push(inst.instance_id);
            cats.push(Some(inst.category.clone()));
            positions.push(inst.center);
            let zone = scene
                .zone_of(scene.cell_of(inst.center))
                .map(|z| z.label.clone())
                .unwrap_or_else(|| "room".into());
            clauses.push(format!("go to the {} in the {}", inst.category, zone));
        }
    }

    let planning: Vec<String> =
        clauses.iter().enumerate().map(|(i, c)| format!("{}. {} .", i + 1, c)).collect();
    let instruction = match data_type {
        4 | 5 => {
            let cat = cats[0].clone().unwrap_or_default();
            format!("find the {cat} . {} .", clauses[0])
        }
        _ => format!("{} .", clauses.join(" then ")),
    };
    let answers: Vec<String> = cats
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == n_steps {
                "task complete .".to_string()
            } else {
                match c {
                    Some(cat) => format!("moving toward the {cat} ."),
                    None => "moving to the next area .".to_string(),
                }
            }
        })
        .collect();

    // start pose: a free cell far enough from the first target
    let free = scene.free_cells();
    let mut start = None;
    for _ in 0..400 {
        let c = free[rng.random_range(0..free.len())];
        let p = scene.cell_center(c, CAMERA_HEIGHT);
        match scene::geodesic_distance(scene, p, positions[0]) {
            Ok(d) if d >= opts.min_start_goal => {
                start = Some(p);
                break;
            }
            _ => continue,
        }
    }
    let start = start.ok_or_else(|| {
        Error::BadConfig("no start cell satisfies the start-goal distance".into())
    })?;
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let start_pose = AgentPose::new(start, heading);

    let revision = if data_type == 1
        && n_steps >= 2
        && !waypoint_style
        && rng.random_bool(opts.revision_fraction)
    {
        // drop the second subgoal once the agent is under way
        let revised: Vec<String> = planning
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, s)| s.clone())
            .collect();
        Some(RevisionScript {
            remove_at_step: 1,
            remove_instance: ids[1],
            revised_planning: revised,
        })
    } else {
        None
    };

    let hidden = HiddenSample {
        planning: planning.clone(),
        instance_id: ids.iter().map(|i| vec![*i]).collect(),
        instance_type: cats.clone(),
        instance_position: positions.iter().map(|p| p.to_array()).collect(),
        start_position: start_pose.position.to_array(),
        start_heading: start_pose.heading,
        answers,
        revision,
    };

    // degrade the draft per the Table-1 row
    let keep_plan = matches!(data_type, 1 | 2 | 3);
    let keep_ground = matches!(data_type, 1 | 2 | 4 | 5);
    let keep_nav = matches!(data_type, 1 | 3 | 4 | 6);
    let sample = AnnotationSample {
        scene_id: scene.scene_id.clone(),
        instruction,
        planning: if keep_plan { planning } else { Vec::new() },
        instance_id: if keep_ground {
            ids.iter().map(|i| vec![*i]).collect()
        } else {
            ids.iter().map(|_| vec![WAYPOINT_SENTINEL]).collect()
        },
        instance_type: if keep_ground { cats } else { vec![None; n_steps] },
        instance_position: positions,
        start_pose: keep_nav.then_some(start_pose),
        data_type,
    };
    debug_assert_eq!(
        AnnotationSample::type_of(sample.has_plan(), sample.has_ground(), sample.has_nav()),
        Some(data_type)
    );
    Ok((sample, hidden))
}

fn nearest_free_cell(scene: &Scene, c: Cell) -> Option<Cell> {
    if scene.is_free(c) {
        return Some(c);
    }
    for r in 1..=8 {
        let mut best: Option<(f64, Cell)> = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let n = Cell::new(c.x + dx, c.y + dy);
                if scene.is_free(n) {
                    let d = (dx * dx + dy * dy) as f64;
                    if best.map_or(true, |(bd, _)| d < bd) {
                        best = Some((d, n));
                    }
                }
            }
        }
        if let Some((_, n)) = best {
            return Some(n);
        }
    }
    None
}

/// Rebuild the full episode (targets plus shortest-path segments) from a
/// sample's hidden ground truth.
pub fn to_episode_task(
    scene: &Scene,
    task_id: &str,
    sample: &AnnotationSample,
    hidden: &HiddenSample,
) -> Result<EpisodeTask> {
    let start_pose = AgentPose::new(Point3::from_array(hidden.start_position), hidden.start_heading);
    let mut step_targets = Vec::new();
    for (ids, pos) in hidden.instance_id.iter().zip(&hidden.instance_position) {
        let id = ids.first().copied().unwrap_or(WAYPOINT_SENTINEL);
        step_targets.push((
            (id != WAYPOINT_SENTINEL).then_some(id),
            Point3::from_array(*pos),
        ));
    }
    let mut gt_trajectory = Vec::new();
    let mut from = start_pose.position;
    for (_, target) in &step_targets {
        let seg = scene::shortest_path(scene, from, *target)?;
        from = *seg.last().expect("nonempty path");
        gt_trajectory.push(seg);
    }
    Ok(EpisodeTask {
        task_id: task_id.to_string(),
        instruction: sample.instruction.clone(),
        plan_steps: hidden.planning.clone(),
        step_targets,
        start_pose,
        gt_trajectory,
    })
}

// ---------------------------------------------------------------------------
// grounding label assignment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum GroundingTarget<'a> {
    Instance(&'a InstanceRecord),
    CenterOnly(Point3),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingLabel {
    pub positive_token_ids: BTreeSet<MemTokenId>,
    pub is_none: bool,
}

/// Radius of the center-only positive rule, meters.
pub const CENTER_RULE_RADIUS: f64 = 0.2;

/// Spatial hash over instance point clouds for nearest-point queries.
struct PointIndex<'a> {
    bucket: f64,
    map: BTreeMap<(i32, i32, i32), Vec<(usize, &'a Point3, i64)>>,
    all: Vec<(&'a Point3, i64)>,
}

impl<'a> PointIndex<'a> {
    fn build(instances: &'a [InstanceRecord]) -> Self {
        let bucket = 0.5;
        let mut map: BTreeMap<(i32, i32, i32), Vec<(usize, &'a Point3, i64)>> = BTreeMap::new();
        let mut all = Vec::new();
        for inst in instances {
            for p in &inst.points {
                let key = (
                    (p.x / bucket).floor() as i32,
                    (p.y / bucket).floor() as i32,
                    (p.z / bucket).floor() as i32,
                );
                map.entry(key).or_default().push((all.len(), p, inst.instance_id));
                all.push((p, inst.instance_id));
            }
        }
        Self { bucket, map, all }
    }

    /// Owner instance of the nearest point, expanding ring search over the
    /// hash. A best hit at distance d is final once every unscanned shell is
    /// strictly farther than d; ties keep the lowest insertion index, the
    /// same order an exhaustive first-wins scan uses.
    fn nearest_owner(&self, q: Point3) -> Option<i64> {
        if self.all.is_empty() {
            return None;
        }
        let key = (
            (q.x / self.bucket).floor() as i32,
            (q.y / self.bucket).floor() as i32,
            (q.z / self.bucket).floor() as i32,
        );
        let max_ring = self
            .map
            .keys()
            .map(|k| {
                (k.0 - key.0)
                    .abs()
                    .max((k.1 - key.1).abs())
                    .max((k.2 - key.2).abs())
            })
            .max()
            .unwrap_or(0);
        let mut best: Option<(f64, usize, i64)> = None;
        for ring in 0..=max_ring {
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let Some(pts) = self.map.get(&(key.0 + dx, key.1 + dy, key.2 + dz))
                        else {
                            continue;
                        };
                        for (idx, p, owner) in pts {
                            let d = p.dist(&q);
                            if best.map_or(true, |(bd, bi, _)| d < bd || (d == bd && *idx < bi)) {
                                best = Some((d, *idx, *owner));
                            }
                        }
                    }
                }
            }
            // every shell beyond `ring` is at least ring*bucket away
            if let Some((d, _, o)) = best {
                if d < ring as f64 * self.bucket {
                    return Some(o);
                }
            }
        }
        best.map(|(_, _, o)| o)
    }
}

/// Assign the grounding label for a target against a built memory.
///
/// With a point cloud: a memory token is positive iff the nearest ground
/// truth point over all instance clouds belongs to the target. Center-only:
/// patch tokens within 0.2 m of the center are positive.
pub fn assign_grounding_labels(
    memory: &MultiLevelMemory,
    instances: &[InstanceRecord],
    target: &GroundingTarget,
) -> GroundingLabel {
    let mut positive_token_ids = BTreeSet::new();
    match target {
        GroundingTarget::Instance(inst) => {
            let index = PointIndex::build(instances);
            let mut check = |id: MemTokenId, pos: Point3| {
                if index.nearest_owner(pos) == Some(inst.instance_id) {
                    positive_token_ids.insert(id);
                }
            };
            for (k, v) in &memory.patch {
                check(MemTokenId::Vox(k.0, k.1, k.2), v.position);
            }
            for t in &memory.instances {
                check(MemTokenId::Inst(t.token_id), t.center);
            }
            for t in &memory.zones {
                check(MemTokenId::Zone(t.token_id), t.center);
            }
        }
        GroundingTarget::CenterOnly(center) => {
            for (k, v) in &memory.patch {
                if v.position.dist(center) <= CENTER_RULE_RADIUS {
                    positive_token_ids.insert(MemTokenId::Vox(k.0, k.1, k.2));
                }
            }
        }
    }
    let is_none = positive_token_ids.is_empty();
    GroundingLabel { positive_token_ids, is_none }
}

// ---------------------------------------------------------------------------
// annotation file I/O (pinned schema)
// ---------------------------------------------------------------------------

const SAMPLE_FIELDS: [&str; 8] = [
    "scene_id",
    "instruction",
    "planning",
    "instance_id",
    "instance_type",
    "instance_position",
    "habitat_start_position",
    "habitat_start_rotation",
];

fn schema_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Schema { path: path.into(), msg: msg.into() }
}

fn sample_to_json(s: &AnnotationSample) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    obj.insert("scene_id".into(), s.scene_id.clone().into());
    obj.insert("instruction".into(), s.instruction.clone().into());
    obj.insert("planning".into(), serde_json::json!(s.planning));
    obj.insert("instance_id".into(), serde_json::json!(s.instance_id));
    obj.insert("instance_type".into(), serde_json::json!(s.instance_type));
    obj.insert(
        "instance_position".into(),
        serde_json::json!(s.instance_position.iter().map(|p| p.to_array()).collect::<Vec<_>>()),
    );
    if let Some(pose) = &s.start_pose {
        // stored with the height as the middle component
        obj.insert(
            "habitat_start_position".into(),
            serde_json::json!([pose.position.x, pose.position.z, pose.position.y]),
        );
        let (s2, c2) = (pose.heading / 2.0).sin_cos();
        obj.insert("habitat_start_rotation".into(), serde_json::json!([0.0, s2, 0.0, c2]));
    }
    serde_json::Value::Object(obj)
}

fn sample_from_json(v: &serde_json::Value, idx: usize) -> Result<AnnotationSample> {
    let base = format!("$[{idx}]");
    let obj = v.as_object().ok_or_else(|| schema_err(&base, "sample must be an object"))?;
    for key in obj.keys() {
        if !SAMPLE_FIELDS.contains(&key.as_str()) {
            return Err(schema_err(&format!("{base}.{key}"), "unknown field"));
        }
    }
    let get = |name: &str| -> Result<&serde_json::Value> {
        obj.get(name).ok_or_else(|| schema_err(&format!("{base}.{name}"), "missing field"))
    };
    let scene_id = get("scene_id")?
        .as_str()
        .ok_or_else(|| schema_err(&format!("{base}.scene_id"), "must be a string"))?
        .to_string();
    let instruction = get("instruction")?
        .as_str()
        .ok_or_else(|| schema_err(&format!("{base}.instruction"), "must be a string"))?
        .to_string();
    let planning: Vec<String> = match get("planning")? {
        serde_json::Value::String(s) if s.is_empty() => Vec::new(),
        serde_json::Value::String(s) => vec![s.clone()],
        serde_json::Value::Array(items) => items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                it.as_str().map(|s| s.to_string()).ok_or_else(|| {
                    schema_err(&format!("{base}.planning[{i}]"), "must be a string")
                })
            })
            .collect::<Result<_>>()?,
        _ => return Err(schema_err(&format!("{base}.planning"), "must be array or string")),
    };
    let instance_id: Vec<Vec<i64>> = serde_json::from_value(get("instance_id")?.clone())
        .map_err(|e| schema_err(&format!("{base}.instance_id"), e.to_string()))?;
    let instance_type: Vec<Option<String>> = serde_json::from_value(get("instance_type")?.clone())
        .map_err(|e| schema_err(&format!("{base}.instance_type"), e.to_string()))?;
    let raw_pos: Vec<[f64; 3]> = serde_json::from_value(get("instance_position")?.clone())
        .map_err(|e| schema_err(&format!("{base}.instance_position"), e.to_string()))?;
    let instance_position: Vec<Point3> = raw_pos.into_iter().map(Point3::from_array).collect();
    if instance_id.len() != instance_position.len() || instance_type.len() != instance_position.len()
    {
        return Err(schema_err(
            &format!("{base}.instance_id"),
            "instance_id, instance_type, instance_position lengths differ",
        ));
    }
    if !planning.is_empty() && planning.len() != instance_position.len() {
        return Err(schema_err(
            &format!("{base}.planning"),
            "planning length must match the subgoal count",
        ));
    }
    let start_pose = match obj.get("habitat_start_position") {
        None => None,
        Some(pv) => {
            let p: [f64; 3] = serde_json::from_value(pv.clone()).map_err(|e| {
                schema_err(&format!("{base}.habitat_start_position"), e.to_string())
            })?;
            let r: [f64; 4] = serde_json::from_value(
                obj.get("habitat_start_rotation")
                    .ok_or_else(|| {
                        schema_err(
                            &format!("{base}.habitat_start_rotation"),
                            "missing with habitat_start_position present",
                        )
                    })?
                    .clone(),
            )
            .map_err(|e| schema_err(&format!("{base}.habitat_start_rotation"), e.to_string()))?;
            let heading = 2.0 * r[1].atan2(r[3]);
            Some(AgentPose::new(Point3::new(p[0], p[2], CAMERA_HEIGHT), heading))
        }
    };
    let has_plan = !planning.is_empty();
    let has_ground = instance_type.iter().any(|t| t.is_some());
    let has_nav = start_pose.is_some();
    let data_type = AnnotationSample::type_of(has_plan, has_ground, has_nav).ok_or_else(|| {
        schema_err(&base, format!("annotation pattern (plan={has_plan}, ground={has_ground}, nav={has_nav}) matches no data type"))
    })?;
    Ok(AnnotationSample {
        scene_id,
        instruction,
        planning,
        instance_id,
        instance_type,
        instance_position,
        start_pose,
        data_type,
    })
}

pub fn save_annotations(samples: &[AnnotationSample], path: &Path) -> Result<()> {
    let arr: Vec<serde_json::Value> = samples.iter().map(sample_to_json).collect();
    std::fs::write(path, serde_json::to_string_pretty(&arr)?)?;
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationSample>> {
    let text = std::fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let arr = v.as_array().ok_or_else(|| schema_err("$", "annotation file must be an array"))?;
    arr.iter().enumerate().map(|(i, s)| sample_from_json(s, i)).collect()
}

/// Sidecar path for an annotation file.
pub fn hidden_path(path: &Path) -> std::path::PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("annotations");
    path.with_file_name(format!("{stem}.hidden.json"))
}

pub fn save_hidden(hidden: &[HiddenSample], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(hidden)?)?;
    Ok(())
}

pub fn load_hidden(path: &Path) -> Result<Vec<HiddenSample>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn scene() -> Scene {
        generate_scene(&SceneConfig::new(24, 24, 2, 8), 13).unwrap()
    }

    #[test]
    fn mix_pattern_histogram_exact() {
        let s = scene();
        let mix: BTreeMap<u8, usize> = [(1u8, 2usize), (4, 3), (6, 3)].into_iter().collect();
        let samples = synthesize_samples(&s, &mix, 5).unwrap();
        let mut hist: BTreeMap<u8, usize> = BTreeMap::new();
        for (smp, _) in &samples {
            *hist.entry(smp.data_type).or_default() += 1;
            let t = AnnotationSample::type_of(smp.has_plan(), smp.has_ground(), smp.has_nav());
            assert_eq!(t, Some(smp.data_type));
            if smp.has_nav() {
                // all targets reachable
                let start = smp.start_pose.unwrap().position;
                for p in &smp.instance_position {
                    assert!(scene::geodesic_distance(&s, start, *p).is_ok());
                }
            }
        }
        assert_eq!(hist, mix);
    }

    #[test]
    fn nav_only_pattern_matches_row_six() {
        let s = scene();
        let mix: BTreeMap<u8, usize> = [(6u8, 3usize)].into_iter().collect();
        let samples = synthesize_samples(&s, &mix, 9).unwrap();
        assert_eq!(samples.len(), 3);
        for (smp, _) in &samples {
            assert!(smp.planning.is_empty());
            assert!(smp.instance_type.iter().all(|t| t.is_none()));
            assert!(smp.instance_id.iter().all(|ids| ids == &vec![WAYPOINT_SENTINEL]));
            assert!(smp.start_pose.is_some());
        }
    }

    #[test]
    fn gold_pattern_and_hidden_identity() {
        let s = scene();
        let mix: BTreeMap<u8, usize> = [(1u8, 1usize)].into_iter().collect();
        let samples = synthesize_samples(&s, &mix, 2).unwrap();
        let (smp, hidden) = &samples[0];
        assert!(smp.has_plan() && smp.has_ground() && smp.has_nav());
        // gold degradation is the identity
        assert_eq!(smp.planning, hidden.planning);
        assert_eq!(smp.instance_id, hidden.instance_id);
        assert_eq!(
            smp.instance_position.iter().map(|p| p.to_array()).collect::<Vec<_>>(),
            hidden.instance_position
        );
    }

    #[test]
    fn type_four_degradation_keeps_hidden_plan() {
        let s = scene();
        let mix: BTreeMap<u8, usize> = [(4u8, 1usize)].into_iter().collect();
        let samples = synthesize_samples(&s, &mix, 3).unwrap();
        let (smp, hidden) = &samples[0];
        assert!(smp.planning.is_empty());
        assert!(!hidden.planning.is_empty());
        assert_eq!(smp.instance_type, hidden.instance_type);
    }

    #[test]
    fn roundtrip_save_load() {
        let s = scene();
        let mix: BTreeMap<u8, usize> =
            [(1u8, 2usize), (2, 2), (3, 2), (4, 2), (5, 2), (6, 2)].into_iter().collect();
        let samples = synthesize_samples(&s, &mix, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ann.json");
        let only: Vec<AnnotationSample> = samples.iter().map(|(a, _)| a.clone()).collect();
        save_annotations(&only, &path).unwrap();
        let back = load_annotations(&path).unwrap();
        assert_eq!(back.len(), only.len());
        for (a, b) in only.iter().zip(&back) {
            assert_eq!(a.scene_id, b.scene_id);
            assert_eq!(a.planning, b.planning);
            assert_eq!(a.instance_id, b.instance_id);
            assert_eq!(a.instance_type, b.instance_type);
            assert_eq!(a.data_type, b.data_type);
            for (p, q) in a.instance_position.iter().zip(&b.instance_position) {
                assert!(p.dist(q) < 1e-12);
            }
            match (a.start_pose, b.start_pose) {
                (None, None) => {}
                (Some(p), Some(q)) => {
                    assert!(p.position.dist_xy(&q.position) < 1e-9);
                    assert!((p.heading - q.heading).abs() < 1e-9);
                }
                other => panic!("pose mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn listing_shape_parses() {
        // schema-identical to the published annotation format: four plan
        // steps pointing at three instances
        let text = r#"[{
            "scene_id": "hm3d/00378-DqJKU7YU7dA",
            "instruction": "go to the shower then the towel then the shower .",
            "planning": [
                "1. go to the shower .",
                "2. turn on the water .",
                "3. take the towel near the sink .",
                "4. hang the towel by the shower ."
            ],
            "instance_id": [[797], [797], [230], [515]],
            "instance_type": ["shower", "shower", "towel", "curtain"],
            "instance_position": [
                [-6.554, -28.336, 0.863],
                [-6.554, -28.336, 0.863],
                [-2.407, -14.418, 1.189],
                [-3.649, -20.311, 0.981]
            ]
        }]"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("listing.json");
        std::fs::write(&path, text).unwrap();
        let samples = load_annotations(&path).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].planning.len(), 4);
        assert_eq!(
            samples[0].instance_id,
            vec![vec![797], vec![797], vec![230], vec![515]]
        );
        assert_eq!(samples[0].data_type, 2);
    }

    #[test]
    fn missing_instruction_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"[{"scene_id": "x", "planning": [], "instance_id": [[1]],
                "instance_type": ["chair"], "instance_position": [[0,0,0]]}]"#,
        )
        .unwrap();
        match load_annotations(&path) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "$[0].instruction"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            r#"[{"scene_id": "x", "instruction": "i", "planning": [],
                "instance_id": [[1]], "instance_type": ["chair"],
                "instance_position": [[0,0,0]], "extra": 1}]"#,
        )
        .unwrap();
        match load_annotations(&path) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "$[0].extra"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn grounding_labels_match_bruteforce() {
        use crate::scene::observe_at;
        let s = scene();
        let free = s.free_cells();
        let mut m = MultiLevelMemory::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for t in 0..6 {
            let c = free[rng.random_range(0..free.len())];
            let pose = AgentPose::new(s.cell_center(c, CAMERA_HEIGHT), rng.random_range(-3.0..3.0));
            m.update(&observe_at(&s, &pose, t));
        }
        for inst in &s.instances {
            let label =
                assign_grounding_labels(&m, &s.instances, &GroundingTarget::Instance(inst));
            // brute-force oracle over every token and every point
            let nearest_owner = |q: Point3| -> Option<i64> {
                let mut best: Option<(f64, i64)> = None;
                for other in &s.instances {
                    for p in &other.points {
                        let d = p.dist(&q);
                        if best.map_or(true, |(bd, _)| d < bd) {
                            best = Some((d, other.instance_id));
                        }
                    }
                }
                best.map(|(_, o)| o)
            };
            let mut expect = BTreeSet::new();
            for (k, v) in &m.patch {
                if nearest_owner(v.position) == Some(inst.instance_id) {
                    expect.insert(MemTokenId::Vox(k.0, k.1, k.2));
                }
            }
            for t in &m.instances {
                if nearest_owner(t.center) == Some(inst.instance_id) {
                    expect.insert(MemTokenId::Inst(t.token_id));
                }
            }
            for t in &m.zones {
                if nearest_owner(t.center) == Some(inst.instance_id) {
                    expect.insert(MemTokenId::Zone(t.token_id));
                }
            }
            assert_eq!(label.positive_token_ids, expect);
            assert_eq!(label.is_none, expect.is_empty());
        }
    }

    #[test]
    fn center_rule_radius() {
        let s = scene();
        let mut m = MultiLevelMemory::new();
        // craft one voxel at a known position
        let dict = crate::features::embedding_dict();
        let pos = Point3::new(2.0, 2.0, 0.8);
        m.update(&crate::scene::Observation {
            pose: AgentPose::new(Point3::new(1.0, 1.0, CAMERA_HEIGHT), 0.0),
            patch_points: vec![crate::scene::PatchPoint {
                position: pos,
                feature: dict.embed(crate::features::SemLabel::Category(0)),
                visible_instance_id: None,
            }],
            timestamp: 0,
        });
        let near = Point3::new(2.0, 2.19, 0.8);
        let label =
            assign_grounding_labels(&m, &s.instances, &GroundingTarget::CenterOnly(near));
        assert!(!label.is_none, "0.19 m away: positive");
        let far = Point3::new(2.0, 2.21, 0.8);
        let label = assign_grounding_labels(&m, &s.instances, &GroundingTarget::CenterOnly(far));
        assert!(label.is_none, "0.21 m away: none");
        // a never-observed target grounds to none
        let label = assign_grounding_labels(
            &MultiLevelMemory::new(),
            &s.instances,
            &GroundingTarget::Instance(&s.instances[0]),
        );
        assert!(label.is_none);
    }
}

/// Load every annotation file in a directory (skipping sidecars), paired
/// with its hidden ground truth.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<(AnnotationSample, HiddenSample)>> {
    let mut out = Vec::new();
    let mut entries: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && !p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".hidden.json"))
        })
        .collect();
    entries.sort();
    for path in entries {
        let samples = load_annotations(&path)?;
        let hidden = load_hidden(&hidden_path(&path))?;
        if samples.len() != hidden.len() {
            return Err(Error::Schema {
                path: path.display().to_string(),
                msg: "annotation and sidecar lengths differ".into(),
            });
        }
        out.extend(samples.into_iter().zip(hidden));
    }
    Ok(out)
}
