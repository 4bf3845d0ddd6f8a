//! Renders sweeps of each scene factor for both object kinds and writes
//! one PNG grid per object: rows are azimuth, elevation, light azimuth and
//! four random identities.
//!
//!     cargo run --release --example render_scenes -- [out_dir] [resolution]

use dcign::io::{image_grid, write_png};
use dcign::scene::{random_params, render_object, ObjectKind, SceneParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const COLUMNS: usize = 9;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().unwrap_or_else(|| "scenes".into());
    let res: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(64);
    std::fs::create_dir_all(&out_dir)?;

    for kind in [ObjectKind::Head, ObjectKind::Chair] {
        let mut images = Vec::new();
        let base = SceneParams::neutral();
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (COLUMNS - 1) as f64;
        for i in 0..COLUMNS {
            images.push(render_object(kind, &SceneParams { azimuth: step(-90.0, 90.0, i), ..base.clone() }, res)?);
        }
        if kind == ObjectKind::Head {
            for i in 0..COLUMNS {
                images.push(render_object(kind, &SceneParams { elevation: step(-30.0, 30.0, i), ..base.clone() }, res)?);
            }
            for i in 0..COLUMNS {
                let p = SceneParams { light_azimuth: step(-90.0, 90.0, i), ..base.clone() };
                images.push(render_object(kind, &p, res)?);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..4 * COLUMNS {
            images.push(render_object(kind, &random_params(&mut rng, kind), res)?);
        }
        let path = format!("{out_dir}/{}.png", format!("{kind:?}").to_lowercase());
        write_png(&path, &image_grid(&images, COLUMNS)?)?;
        println!("wrote {path}");
    }
    Ok(())
}
