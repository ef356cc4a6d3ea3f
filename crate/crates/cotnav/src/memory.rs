//! Multi-level 3D memory: patch voxels, instance tokens, zone tokens, and the
//! panoramic render at the current pose.
//!
//! Voxels hold running means of the patch points fused into them. A voxel
//! observed to be seen *through* (a clear ray passes its cell beyond its
//! range) is dropped, so memory tracks dynamic scene edits; in a static scene
//! this never fires and the voxel set grows monotonically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::features::{self, SemLabel};
use crate::geom::{wrap_angle, Point3};
use crate::scene::{AgentPose, Observation, R_MAX};

/// Side of one memory voxel, meters.
pub const VOXEL_SIZE: f64 = 0.25;
/// Zone tile side, meters.
pub const ZONE_TILE: f64 = 2.0;
/// Nearest voxels pooled per panorama sector.
pub const PANO_K: usize = 16;
/// Linkage radius for instance clustering, meters.
pub const LINK_RADIUS: f64 = 0.5;

pub type VoxelKey = (i32, i32, i32);

/// Identifier of one addressable memory token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemTokenId {
    Vox(i32, i32, i32),
    Inst(usize),
    Zone(usize),
}

impl MemTokenId {
    pub fn surface(&self) -> String {
        match self {
            MemTokenId::Vox(x, y, z) => format!("<vox_{x}_{y}_{z}>"),
            MemTokenId::Inst(i) => format!("<inst_{i}>"),
            MemTokenId::Zone(i) => format!("<zone_{i}>"),
        }
    }

    pub fn parse(s: &str) -> Option<MemTokenId> {
        let inner = s.strip_prefix('<')?.strip_suffix('>')?;
        if let Some(rest) = inner.strip_prefix("vox_") {
            let mut it = rest.split('_');
            let x = it.next()?.parse().ok()?;
            let y = it.next()?.parse().ok()?;
            let z = it.next()?.parse().ok()?;
            return Some(MemTokenId::Vox(x, y, z));
        }
        if let Some(rest) = inner.strip_prefix("inst_") {
            return Some(MemTokenId::Inst(rest.parse().ok()?));
        }
        if let Some(rest) = inner.strip_prefix("zone_") {
            return Some(MemTokenId::Zone(rest.parse().ok()?));
        }
        None
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Voxel {
    pub position: Point3,
    pub feature: Vec<f64>,
    pub count: u64,
    pub last_step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceToken {
    pub token_id: usize,
    pub feature: Vec<f64>,
    pub center: Point3,
    pub member_voxels: Vec<VoxelKey>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneToken {
    pub token_id: usize,
    pub feature: Vec<f64>,
    pub center: Point3,
    /// Tile index along x and y; bounds are tile * ZONE_TILE.
    pub tile: (i32, i32),
}

/// One rendered panoramic sector token.
#[derive(Debug, Clone)]
pub struct PanoToken {
    pub sector: usize,
    /// None for empty sectors (the model substitutes its learned placeholder).
    pub feature: Option<Vec<f64>>,
    /// Position of the strongest contributing voxel.
    pub position: Option<Point3>,
    pub rep_voxel: Option<VoxelKey>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MultiLevelMemory {
    pub voxel_size: f64,
    pub patch: BTreeMap<VoxelKey, Voxel>,
    pub instances: Vec<InstanceToken>,
    pub zones: Vec<ZoneToken>,
}

impl MultiLevelMemory {
    pub fn new() -> Self {
        Self { voxel_size: VOXEL_SIZE, patch: BTreeMap::new(), instances: Vec::new(), zones: Vec::new() }
    }

    pub fn voxel_key(&self, p: Point3) -> VoxelKey {
        (
            (p.x / self.voxel_size).floor() as i32,
            (p.y / self.voxel_size).floor() as i32,
            (p.z / self.voxel_size).floor() as i32,
        )
    }

    /// Fuse one observation: integrate hits, drop voxels that were seen
    /// through, then rebuild the instance and zone layers.
    ///
    /// A voxel is stale exactly when some observed hit's Bresenham line
    /// crosses its xy column strictly between pose and hit: the observation's
    /// visibility invariant proves that column transparent. An opaque column
    /// in a static scene can never satisfy this, so static memory only grows.
    pub fn update(&mut self, obs: &Observation) {
        let pose = &obs.pose;
        let pose_col = (
            (pose.position.x / self.voxel_size).floor() as i32,
            (pose.position.y / self.voxel_size).floor() as i32,
        );
        let mut transparent: std::collections::BTreeSet<(i32, i32)> =
            std::collections::BTreeSet::new();
        let mut refreshed: Vec<VoxelKey> = Vec::with_capacity(obs.patch_points.len());
        for pp in &obs.patch_points {
            let key = self.voxel_key(pp.position);
            let line = crate::geom::bresenham(
                crate::geom::Cell::new(pose_col.0, pose_col.1),
                crate::geom::Cell::new(key.0, key.1),
            );
            for c in line.iter().skip(1).take(line.len().saturating_sub(2)) {
                transparent.insert((c.x, c.y));
            }
            refreshed.push(key);
            match self.patch.get_mut(&key) {
                Some(v) => {
                    let n = v.count as f64;
                    v.position.x = (v.position.x * n + pp.position.x) / (n + 1.0);
                    v.position.y = (v.position.y * n + pp.position.y) / (n + 1.0);
                    v.position.z = (v.position.z * n + pp.position.z) / (n + 1.0);
                    for (f, x) in v.feature.iter_mut().zip(&pp.feature) {
                        *f = (*f * n + x) / (n + 1.0);
                    }
                    v.count += 1;
                    v.last_step = obs.timestamp;
                }
                None => {
                    self.patch.insert(
                        key,
                        Voxel {
                            position: pp.position,
                            feature: pp.feature.clone(),
                            count: 1,
                            last_step: obs.timestamp,
                        },
                    );
                }
            }
        }
        let refreshed: std::collections::BTreeSet<VoxelKey> = refreshed.into_iter().collect();
        let stale: Vec<VoxelKey> = self
            .patch
            .keys()
            .filter(|k| !refreshed.contains(*k) && transparent.contains(&(k.0, k.1)))
            .copied()
            .collect();
        for k in stale {
            self.patch.remove(&k);
        }
        self.aggregate_instances();
        self.aggregate_zones();
    }

    /// Cluster category-labeled voxels into instance tokens: connected
    /// components linking same-label voxels within `LINK_RADIUS`.
    pub fn aggregate_instances(&mut self) {
        let dict = features::embedding_dict();
        let entries: Vec<(VoxelKey, &Voxel, SemLabel)> = self
            .patch
            .iter()
            .map(|(k, v)| (*k, v, dict.nearest_label(&v.feature)))
            .filter(|(_, _, l)| matches!(l, SemLabel::Category(_)))
            .collect();
        let n = entries.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, i: usize) -> usize {
            let mut r = i;
            while parent[r] != r {
                r = parent[r];
            }
            let mut c = i;
            while parent[c] != r {
                let next = parent[c];
                parent[c] = r;
                c = next;
            }
            r
        }
        let reach = (LINK_RADIUS / self.voxel_size).ceil() as i32;
        let index: BTreeMap<VoxelKey, usize> =
            entries.iter().enumerate().map(|(i, (k, _, _))| (*k, i)).collect();
        for (i, (k, v, label)) in entries.iter().enumerate() {
            for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if (dx, dy, dz) == (0, 0, 0) {
                            continue;
                        }
                        let nk = (k.0 + dx, k.1 + dy, k.2 + dz);
                        let Some(&j) = index.get(&nk) else { continue };
                        if j <= i {
                            continue;
                        }
                        let (_, w, wl) = &entries[j];
                        if wl == label && v.position.dist(&w.position) <= LINK_RADIUS {
                            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                            if ri != rj {
                                parent[ri.max(rj)] = ri.min(rj);
                            }
                        }
                    }
                }
            }
        }
        let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            clusters.entry(find(&mut parent, i)).or_default().push(i);
        }
        self.instances = clusters
            .into_values()
            .enumerate()
            .map(|(token_id, members)| {
                let m = members.len() as f64;
                let mut feature = vec![0.0; features::FEATURE_DIM];
                let mut center = Point3::new(0.0, 0.0, 0.0);
                let mut member_voxels = Vec::with_capacity(members.len());
                for &i in &members {
                    let (k, v, _) = &entries[i];
                    member_voxels.push(*k);
                    for (f, x) in feature.iter_mut().zip(&v.feature) {
                        *f += x / m;
                    }
                    center.x += v.position.x / m;
                    center.y += v.position.y / m;
                    center.z += v.position.z / m;
                }
                InstanceToken { token_id, feature, center, member_voxels }
            })
            .collect();
    }

    /// Bucket all voxels into 2 m x 2 m tiles.
    pub fn aggregate_zones(&mut self) {
        let mut tiles: BTreeMap<(i32, i32), Vec<&Voxel>> = BTreeMap::new();
        for v in self.patch.values() {
            let tx = (v.position.x / ZONE_TILE).floor() as i32;
            let ty = (v.position.y / ZONE_TILE).floor() as i32;
            tiles.entry((tx, ty)).or_default().push(v);
        }
        self.zones = tiles
            .into_iter()
            .enumerate()
            .map(|(token_id, (tile, members))| {
                let m = members.len() as f64;
                let mut feature = vec![0.0; features::FEATURE_DIM];
                let mut zsum = 0.0;
                for v in &members {
                    for (f, x) in feature.iter_mut().zip(&v.feature) {
                        *f += x / m;
                    }
                    zsum += v.position.z / m;
                }
                ZoneToken {
                    token_id,
                    feature,
                    center: Point3::new(
                        (tile.0 as f64 + 0.5) * ZONE_TILE,
                        (tile.1 as f64 + 0.5) * ZONE_TILE,
                        zsum,
                    ),
                    tile,
                }
            })
            .collect();
    }

    /// Render the 12 panoramic sector tokens at a pose. Per sector: the
    /// 1/d-weighted mean feature of the K nearest visible voxels; visibility
    /// approximated by keeping only the nearest voxel per 1-degree bin.
    pub fn render_panorama(&self, pose: &AgentPose) -> Vec<PanoToken> {
        // visibility: nearest voxel per angular bin
        let mut nearest: BTreeMap<usize, (f64, VoxelKey)> = BTreeMap::new();
        for (k, v) in &self.patch {
            let d = v.position.dist_xy(&pose.position);
            if d > R_MAX {
                continue;
            }
            let ang = (v.position.y - pose.position.y).atan2(v.position.x - pose.position.x);
            let bin = ang_bin(ang);
            let e = nearest.entry(bin).or_insert((d, *k));
            if d < e.0 {
                *e = (d, *k);
            }
        }
        let mut per_sector: Vec<Vec<(f64, VoxelKey)>> = vec![Vec::new(); 12];
        let w = std::f64::consts::TAU / 12.0;
        for (_, (d, k)) in nearest {
            let v = &self.patch[&k];
            let dir = (v.position.y - pose.position.y).atan2(v.position.x - pose.position.x);
            let rel = wrap_angle(dir - pose.heading);
            let sector = (rel / w).round().rem_euclid(12.0) as usize % 12;
            per_sector[sector].push((d, k));
        }
        per_sector
            .into_iter()
            .enumerate()
            .map(|(sector, mut items)| {
                if items.is_empty() {
                    return PanoToken { sector, feature: None, position: None, rep_voxel: None };
                }
                items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                items.truncate(PANO_K);
                let mut wsum = 0.0;
                let mut feature = vec![0.0; features::FEATURE_DIM];
                for (d, k) in &items {
                    let wgt = 1.0 / d.max(1e-6);
                    wsum += wgt;
                    for (f, x) in feature.iter_mut().zip(&self.patch[k].feature) {
                        *f += wgt * x;
                    }
                }
                for f in feature.iter_mut() {
                    *f /= wsum;
                }
                let rep = items[0].1;
                PanoToken {
                    sector,
                    feature: Some(feature),
                    position: Some(self.patch[&rep].position),
                    rep_voxel: Some(rep),
                }
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "voxel_size": self.voxel_size,
            "voxels": self.patch.iter().map(|(k, v)| serde_json::json!({
                "key": [k.0, k.1, k.2],
                "position": v.position.to_array(),
                "feature": v.feature,
                "count": v.count,
                "last_step": v.last_step,
            })).collect::<Vec<_>>(),
            "instances": self.instances,
            "zones": self.zones,
        })
    }
}

fn ang_bin(ang: f64) -> usize {
    (ang.to_degrees().round().rem_euclid(360.0) as usize) % 360
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{self, generate_scene, AgentPose, SceneConfig, CAMERA_HEIGHT};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn obs_from(points: Vec<(Point3, SemLabel)>, pose: AgentPose, ts: usize) -> Observation {
        let dict = features::embedding_dict();
        Observation {
            pose,
            patch_points: points
                .into_iter()
                .map(|(position, l)| scene::PatchPoint {
                    position,
                    feature: dict.embed(l),
                    visible_instance_id: None,
                })
                .collect(),
            timestamp: ts,
        }
    }

    fn pose_at(x: f64, y: f64) -> AgentPose {
        AgentPose::new(Point3::new(x, y, CAMERA_HEIGHT), 0.0)
    }

    #[test]
    fn empty_update_is_empty() {
        let mut m = MultiLevelMemory::new();
        m.update(&obs_from(vec![], pose_at(0.0, 0.0), 0));
        assert!(m.patch.is_empty() && m.instances.is_empty() && m.zones.is_empty());
    }

    #[test]
    fn repeated_observation_idempotent_mean() {
        let mut m = MultiLevelMemory::new();
        let o = obs_from(
            vec![(Point3::new(1.1, 0.2, 0.6), SemLabel::Category(3))],
            pose_at(0.0, 0.0),
            0,
        );
        m.update(&o);
        let f1 = m.patch.values().next().unwrap().feature.clone();
        m.update(&o);
        let v = m.patch.values().next().unwrap();
        assert_eq!(v.count, 2);
        assert_eq!(v.feature, f1);
    }

    #[test]
    fn disjoint_observations_union() {
        let mut m = MultiLevelMemory::new();
        let a = obs_from(
            vec![
                (Point3::new(1.0, 0.0, 0.5), SemLabel::Wall),
                (Point3::new(1.5, 0.5, 0.5), SemLabel::Wall),
            ],
            pose_at(0.0, 0.0),
            0,
        );
        let b = obs_from(
            vec![
                (Point3::new(18.0, 21.0, 0.5), SemLabel::Wall),
                (Point3::new(17.5, 21.5, 0.5), SemLabel::Wall),
            ],
            pose_at(20.0, 20.0),
            1,
        );
        m.update(&a);
        m.update(&b);
        // union oracle
        let mut expect = std::collections::BTreeSet::new();
        for o in [&a, &b] {
            for p in &o.patch_points {
                expect.insert(m.voxel_key(p.position));
            }
        }
        let got: std::collections::BTreeSet<VoxelKey> = m.patch.keys().copied().collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn instances_cluster_by_label_and_distance() {
        let mut m = MultiLevelMemory::new();
        // one instance: tight cluster of category 2
        let mut pts = vec![
            (Point3::new(1.0, 1.0, 0.5), SemLabel::Category(2)),
            (Point3::new(1.25, 1.0, 0.5), SemLabel::Category(2)),
            (Point3::new(1.0, 1.25, 0.5), SemLabel::Category(2)),
        ];
        // same category 3 m away: separate cluster
        pts.push((Point3::new(4.2, 1.0, 0.5), SemLabel::Category(2)));
        // a wall voxel never becomes an instance
        pts.push((Point3::new(2.0, 2.0, 1.5), SemLabel::Wall));
        m.update(&obs_from(pts, pose_at(0.0, 0.0), 0));
        assert_eq!(m.instances.len(), 2);
        // union-find oracle over the voxel graph
        let sizes: Vec<usize> = m.instances.iter().map(|i| i.member_voxels.len()).collect();
        assert!(sizes.contains(&3) && sizes.contains(&1));
    }

    #[test]
    fn zero_voxels_zero_tokens() {
        let mut m = MultiLevelMemory::new();
        m.aggregate_instances();
        m.aggregate_zones();
        assert!(m.instances.is_empty() && m.zones.is_empty());
    }

    #[test]
    fn zones_match_floor_division_oracle() {
        let mut m = MultiLevelMemory::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(Point3, SemLabel)> = (0..40)
            .map(|_| {
                (
                    Point3::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), 0.5),
                    SemLabel::Wall,
                )
            })
            .collect();
        m.update(&obs_from(pts.clone(), pose_at(2.0, 2.0), 0));
        let mut expect: BTreeMap<(i32, i32), usize> = BTreeMap::new();
        for v in m.patch.values() {
            let t = ((v.position.x / 2.0).floor() as i32, (v.position.y / 2.0).floor() as i32);
            *expect.entry(t).or_default() += 1;
        }
        assert_eq!(m.zones.len(), expect.len());
        for z in &m.zones {
            assert!(expect.contains_key(&z.tile));
        }
    }

    #[test]
    fn panorama_sector_geometry() {
        let mut m = MultiLevelMemory::new();
        // single voxel due east of an agent heading east: sector 0 only
        m.update(&obs_from(
            vec![(Point3::new(2.0, 0.05, 1.5), SemLabel::Wall)],
            pose_at(0.0, 0.0),
            0,
        ));
        let pano = m.render_panorama(&AgentPose::new(Point3::new(0.0, 0.0, CAMERA_HEIGHT), 0.0));
        assert_eq!(pano.len(), 12);
        for t in &pano {
            if t.sector == 0 {
                assert!(t.feature.is_some());
            } else {
                assert!(t.feature.is_none(), "sector {} should be empty", t.sector);
            }
        }
        // empty memory: 12 placeholders
        let empty = MultiLevelMemory::new();
        let pano = empty.render_panorama(&pose_at(0.0, 0.0));
        assert!(pano.iter().all(|t| t.feature.is_none()));
    }

    #[test]
    fn panorama_matches_bruteforce_oracle() {
        let cfg = SceneConfig::new(24, 24, 2, 8);
        let s = generate_scene(&cfg, 21).unwrap();
        let free = s.free_cells();
        let mut m = MultiLevelMemory::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in 0..5 {
            let c = free[rng.random_range(0..free.len())];
            let p = AgentPose::new(s.cell_center(c, CAMERA_HEIGHT), rng.random_range(-3.0..3.0));
            m.update(&scene::observe_at(&s, &p, t));
        }
        let pose = AgentPose::new(s.cell_center(free[0], CAMERA_HEIGHT), 0.7);
        let pano = m.render_panorama(&pose);
        // brute-force oracle over all voxels
        let mut vis: BTreeMap<usize, (f64, VoxelKey)> = BTreeMap::new();
        for (k, v) in &m.patch {
            let d = v.position.dist_xy(&pose.position);
            if d > R_MAX {
                continue;
            }
            let bin = ang_bin((v.position.y - pose.position.y).atan2(v.position.x - pose.position.x));
            let e = vis.entry(bin).or_insert((d, *k));
            if d < e.0 {
                *e = (d, *k);
            }
        }
        for sector in 0..12 {
            let mut items: Vec<(f64, VoxelKey)> = vis
                .values()
                .filter(|(_, k)| {
                    let v = &m.patch[k];
                    let dir = (v.position.y - pose.position.y).atan2(v.position.x - pose.position.x);
                    let rel = wrap_angle(dir - pose.heading);
                    let sec = (rel / (std::f64::consts::TAU / 12.0)).round().rem_euclid(12.0) as usize % 12;
                    sec == sector
                })
                .copied()
                .collect();
            items.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            items.truncate(PANO_K);
            let tok = &pano[sector];
            if items.is_empty() {
                assert!(tok.feature.is_none());
                continue;
            }
            let mut wsum = 0.0;
            let mut feat = vec![0.0; features::FEATURE_DIM];
            for (d, k) in &items {
                let wgt = 1.0 / d.max(1e-6);
                wsum += wgt;
                for (f, x) in feat.iter_mut().zip(&m.patch[k].feature) {
                    *f += wgt * x;
                }
            }
            for f in feat.iter_mut() {
                *f /= wsum;
            }
            let got = tok.feature.as_ref().unwrap();
            for (a, b) in got.iter().zip(&feat) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(tok.rep_voxel.unwrap(), items[0].1);
        }
    }

    #[test]
    fn memory_monotone_in_static_scene() {
        let cfg = SceneConfig::new(24, 24, 2, 6);
        let s = generate_scene(&cfg, 33).unwrap();
        let free = s.free_cells();
        let mut m = MultiLevelMemory::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prev = 0usize;
        for t in 0..12 {
            let c = free[rng.random_range(0..free.len())];
            let p = AgentPose::new(s.cell_center(c, CAMERA_HEIGHT), rng.random_range(-3.0..3.0));
            let before: std::collections::BTreeSet<VoxelKey> = m.patch.keys().copied().collect();
            m.update(&scene::observe_at(&s, &p, t));
            let after: std::collections::BTreeSet<VoxelKey> = m.patch.keys().copied().collect();
            assert!(before.is_subset(&after), "voxels vanished in a static scene");
            assert!(after.len() >= prev);
            prev = after.len();
        }
    }

    #[test]
    fn edits_eventually_clear_stale_voxels() {
        let cfg = SceneConfig::new(24, 24, 1, 3);
        let s = generate_scene(&cfg, 5).unwrap();
        let inst = s.instances[0].clone();
        let c = s.cell_of(inst.center);
        let mut vantage = None;
        for (dx, dy) in [(3, 0), (-3, 0), (0, 3), (0, -3), (4, 0), (0, 4)] {
            let n = crate::geom::Cell::new(c.x + dx, c.y + dy);
            if s.is_free(n) && s.instance_at(n).is_none() {
                vantage = Some(n);
                break;
            }
        }
        let pose = AgentPose::new(s.cell_center(vantage.unwrap(), CAMERA_HEIGHT), 0.0);
        let mut m = MultiLevelMemory::new();
        m.update(&scene::observe_at(&s, &pose, 0));
        let dict = features::embedding_dict();
        let has_inst = |m: &MultiLevelMemory| {
            m.patch.values().any(|v| {
                matches!(dict.nearest_label(&v.feature), SemLabel::Category(_))
                    && v.position.dist(&inst.center) < 1.2
            })
        };
        assert!(has_inst(&m), "instance observed initially");
        let edited =
            scene::edit_scene(&s, scene::SceneEdit::RemoveInstance, inst.instance_id, None).unwrap();
        m.update(&scene::observe_at(&edited, &pose, 1));
        assert!(!has_inst(&m), "stale instance voxels should be dropped after re-observation");
    }
}
