//! Drive a scripted loop through a scene, fuse observations into the
//! multi-level 3D memory, and inspect what the agent remembers.

use cotnav::memory::MultiLevelMemory;
use cotnav::scene::{self, generate_scene, AgentPose, SceneConfig, CAMERA_HEIGHT};

fn main() -> cotnav::Result<()> {
    let scene = generate_scene(&SceneConfig::new(32, 32, 3, 12), 21)?;
    let free = scene.free_cells();
    let mut memory = MultiLevelMemory::new();
    let mut pose = AgentPose::new(scene.cell_center(free[0], CAMERA_HEIGHT), 0.0);

    for step in 0..10 {
        memory.update(&scene::observe_at(&scene, &pose, step));
        println!(
            "step {:2}: pose ({:4.2}, {:4.2})  voxels {:4}  instance tokens {:2}  zone tokens {:2}",
            step,
            pose.position.x,
            pose.position.y,
            memory.patch.len(),
            memory.instances.len(),
            memory.zones.len()
        );
        // hop to the farthest navigable waypoint to explore
        let wps = scene::sector_waypoints(&scene, &pose);
        let Some(far) = wps.iter().max_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap())
        else {
            break;
        };
        pose = scene::step_to_waypoint(&scene, &pose, far.position)?;
    }

    println!("\npanorama at the final pose:");
    for tok in memory.render_panorama(&pose) {
        match (&tok.feature, tok.position) {
            (Some(_), Some(p)) => println!(
                "  sector {:2}: surface near ({:4.2}, {:4.2}, {:4.2})",
                tok.sector, p.x, p.y, p.z
            ),
            _ => println!("  sector {:2}: (unknown)", tok.sector),
        }
    }
    println!("\ninstance tokens:");
    for t in memory.instances.iter().take(8) {
        println!(
            "  token {:2} at ({:4.2}, {:4.2}) from {} voxels",
            t.token_id,
            t.center.x,
            t.center.y,
            t.member_voxels.len()
        );
    }
    Ok(())
}
