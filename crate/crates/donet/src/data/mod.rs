//! Image/mask codecs, synthetic dataset generation, augmentation and
//! dataset directory handling. The on-disk layout is
//! `<root>/{train,val,test}/<id>.ppm` + `<id>_mask.pgm`.

pub mod augment;
pub mod pnm;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use synth::{generate_synthetic, Sample, SyntheticSpec};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// Load every `<id>.ppm` + `<id>_mask.pgm` pair of one split, sorted by id.
pub fn load_split<S: Scalar>(root: &Path, split: Split) -> Result<Vec<Sample<S>>> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Data(format!("missing split directory {}", dir.display())));
    }
    let mut ids: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".ppm").map(str::to_string)
        })
        .collect();
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Data(format!("no .ppm images under {}", dir.display())));
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let image = pnm::load_image(&dir.join(format!("{id}.ppm")))?;
        let mask_path = dir.join(format!("{id}_mask.pgm"));
        let mask = pnm::load_mask(&mask_path)?;
        if image.shape().h != mask.shape().h || image.shape().w != mask.shape().w {
            return Err(Error::Data(format!(
                "{id}: image {} and mask {} disagree",
                image.shape(),
                mask.shape()
            )));
        }
        out.push(Sample { image, mask, id });
    }
    Ok(out)
}

/// Write samples into `<root>/<split>/` in the standard layout.
pub fn write_split<S: Scalar>(root: &Path, split: Split, samples: &[Sample<S>]) -> Result<()> {
    let dir = root.join(split.dir_name());
    fs::create_dir_all(&dir)?;
    for s in samples {
        pnm::save_rgb(&s.image, &dir.join(format!("{}.ppm", s.id)))?;
        pnm::save_mask(&s.mask, &dir.join(format!("{}_mask.pgm", s.id)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_round_trip() {
        let spec = SyntheticSpec { count: 3, seed: 12, ..SyntheticSpec::default() };
        let samples: Vec<Sample<f32>> = generate_synthetic(&spec).unwrap();
        let root = std::env::temp_dir().join("donet_split_test");
        let _ = fs::remove_dir_all(&root);
        write_split(&root, Split::Val, &samples).unwrap();
        let back: Vec<Sample<f32>> = load_split(&root, Split::Val).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.mask, b.mask, "masks must round-trip bit exactly");
        }
        assert!(load_split::<f32>(&root, Split::Test).is_err());
    }
}
