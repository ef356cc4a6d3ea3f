//! Generate a procedural scene, print an ASCII map, and save it as JSON.

use cotnav::scene::{generate_scene, SceneConfig};

fn main() -> cotnav::Result<()> {
    let cfg = SceneConfig::new(32, 32, 4, 20);
    let scene = generate_scene(&cfg, 7)?;

    println!("scene {} ({}x{} cells, {} m cells)", scene.scene_id, scene.width(), scene.height(), scene.cell_size);
    println!("{} instances, {} zones", scene.instances.len(), scene.zones.len());
    for z in &scene.zones {
        println!("  zone {:10} [{}, {}) x [{}, {})", z.label, z.x0, z.x1, z.y0, z.y1);
    }
    for inst in scene.instances.iter().take(6) {
        println!(
            "  instance {:2} {:12} at ({:.2}, {:.2}, {:.2})  {}",
            inst.instance_id, inst.category, inst.center.x, inst.center.y, inst.center.z, inst.description
        );
    }

    // ASCII map: # wall, letter = instance category initial
    for y in (0..scene.height() as i32).rev() {
        let mut row = String::new();
        for x in 0..scene.width() as i32 {
            let c = cotnav::geom::Cell::new(x, y);
            row.push(match scene.instance_at(c) {
                Some(id) => scene
                    .instance(id)
                    .and_then(|i| i.category.chars().next())
                    .unwrap_or('?'),
                None if scene.is_blocked(c) => '#',
                None => '.',
            });
        }
        println!("{row}");
    }

    let out = std::path::Path::new("target/example_scene.json");
    scene.save(out)?;
    println!("saved to {}", out.display());
    Ok(())
}
