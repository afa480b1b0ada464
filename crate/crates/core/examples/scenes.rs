//! Samples synthetic face scenes and writes a contact sheet.
//!
//! `cargo run --release --example scenes -- [out.png]`

use std::path::PathBuf;

use latentlink::scene::{make_dataset, Image, SceneSpec};

fn main() -> latentlink::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("scenes.png"), PathBuf::from);
    let spec = SceneSpec::default();
    println!("{}x{} RGB, n = {}, d = {}", spec.height, spec.width, spec.n(), spec.factor_dim());
    for name in latentlink::scene::SEGMENT_NAMES {
        println!("  {name:<10} factors {:?}", spec.segment_range(name).unwrap());
    }

    let ds = make_dataset(8, 42, &spec)?;
    let images: Vec<&Image> = ds.images().collect();
    Image::hstack(&images)?.save_png(&out, 4)?;
    let (factors, _) = &ds.samples[0];
    println!("first sample factors: {:.2?}", factors.values());
    println!("wrote {}", out.display());
    Ok(())
}
