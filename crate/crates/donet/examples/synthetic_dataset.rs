//! Generate a small synthetic lesion dataset and write it in the standard
//! directory layout (train/val/test with .ppm images and _mask.pgm masks).
//!
//!     cargo run --release --example synthetic_dataset -- /tmp/donet_data

use donet::data::{generate_synthetic, write_split, Split, SyntheticSpec};
use std::path::PathBuf;

fn main() {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        std::env::temp_dir().join("donet_synthetic_example")
    });
    let spec = SyntheticSpec { count: 8, size: (64, 64), seed: 11, ..SyntheticSpec::default() };
    let samples = generate_synthetic::<f32>(&spec).unwrap();
    for s in &samples {
        let pos = s.mask.data().iter().filter(|&&v| v == 1.0).count();
        println!("{}: lesion fraction {:.4}", s.id, pos as f64 / s.mask.len() as f64);
    }
    write_split(&out, Split::Train, &samples[..6]).unwrap();
    write_split(&out, Split::Val, &samples[6..7]).unwrap();
    write_split(&out, Split::Test, &samples[7..]).unwrap();
    println!("wrote 6 train / 1 val / 1 test under {}", out.display());
}
