//! Line-based `key = value` configuration files with `#` comments. Keys
//! match the training, model and objective field names.

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{parse_bool, parse_model_config, parse_num, parse_size};
use crate::train::{DatasetSpec, TrainConfig};
use std::collections::BTreeMap;
use std::path::PathBuf;

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

const KNOWN_KEYS: &[&str] = &[
    // training
    "lr",
    "epochs",
    "batch_size",
    "decay_every",
    "decay_factor",
    "seed",
    "val_fraction",
    "val_every",
    "out_dir",
    "dataset",
    // synthetic dataset
    "synth_count",
    "synth_size",
    "synth_seed",
    "synth_area_min",
    "synth_area_max",
    "synth_irregularity",
    "synth_noise_std",
    // objective
    "l1_kind",
    "l2_kind",
    "epsilon",
    "alpha",
    "beta",
    "gamma",
    "focal_gamma",
    "focal_alpha",
    // model
    "input_channels",
    "input_size",
    "base_channels",
    "stages",
    "dilation_rates",
    "use_rcem",
    "use_dual",
    "use_pyramid_inputs",
    // augmentation
    "augment",
    "rotation_degrees",
    "hflip_prob",
    "crop_fraction",
];

/// Build a TrainConfig from parsed key=value pairs; unknown keys are
/// rejected so typos fail fast.
pub fn train_config_from_kv(kv: &BTreeMap<String, String>) -> Result<TrainConfig> {
    for k in kv.keys() {
        if !KNOWN_KEYS.contains(&k.as_str()) {
            return Err(Error::Config(format!("unknown config key '{k}'")));
        }
    }
    let mut cfg = TrainConfig::default();
    if let Some(v) = kv.get("lr") {
        cfg.lr = parse_num(v, "lr")?;
    }
    if let Some(v) = kv.get("epochs") {
        cfg.epochs = parse_num(v, "epochs")?;
    }
    if let Some(v) = kv.get("batch_size") {
        cfg.batch_size = parse_num(v, "batch_size")?;
    }
    if let Some(v) = kv.get("decay_every") {
        cfg.decay_every = parse_num(v, "decay_every")?;
    }
    if let Some(v) = kv.get("decay_factor") {
        cfg.decay_factor = parse_num(v, "decay_factor")?;
    }
    if let Some(v) = kv.get("seed") {
        cfg.seed = parse_num(v, "seed")?;
    }
    if let Some(v) = kv.get("val_fraction") {
        cfg.val_fraction = parse_num(v, "val_fraction")?;
    }
    if let Some(v) = kv.get("val_every") {
        cfg.val_every = parse_num(v, "val_every")?;
    }
    if let Some(v) = kv.get("out_dir") {
        cfg.out_dir = Some(PathBuf::from(v));
    }

    cfg.model = parse_model_config(kv)?;

    if let Some(v) = kv.get("l1_kind") {
        cfg.objective.l1_kind = LossKind::parse(v)?;
    }
    if let Some(v) = kv.get("l2_kind") {
        cfg.objective.l2_kind = LossKind::parse(v)?;
    }
    let p = &mut cfg.objective.params;
    if let Some(v) = kv.get("epsilon") {
        p.epsilon = parse_num(v, "epsilon")?;
    }
    if let Some(v) = kv.get("alpha") {
        p.alpha = parse_num(v, "alpha")?;
    }
    if let Some(v) = kv.get("beta") {
        p.beta = parse_num(v, "beta")?;
    }
    if let Some(v) = kv.get("gamma") {
        p.gamma = parse_num(v, "gamma")?;
    }
    if let Some(v) = kv.get("focal_gamma") {
        p.focal_gamma = parse_num(v, "focal_gamma")?;
    }
    if let Some(v) = kv.get("focal_alpha") {
        p.focal_alpha = parse_num(v, "focal_alpha")?;
    }

    let dataset = kv.get("dataset").map(String::as_str).unwrap_or("synth");
    cfg.dataset = if dataset == "synth" || dataset == "synthetic" {
        let mut spec = SyntheticSpec {
            size: cfg.model.input_size,
            seed: cfg.seed,
            ..SyntheticSpec::default()
        };
        if let Some(v) = kv.get("synth_count") {
            spec.count = parse_num(v, "synth_count")?;
        }
        if let Some(v) = kv.get("synth_size") {
            spec.size = parse_size(v)?;
        }
        if let Some(v) = kv.get("synth_seed") {
            spec.seed = parse_num(v, "synth_seed")?;
        }
        if let Some(v) = kv.get("synth_area_min") {
            spec.area_fraction_range.0 = parse_num(v, "synth_area_min")?;
        }
        if let Some(v) = kv.get("synth_area_max") {
            spec.area_fraction_range.1 = parse_num(v, "synth_area_max")?;
        }
        if let Some(v) = kv.get("synth_irregularity") {
            spec.blob_irregularity = parse_num(v, "synth_irregularity")?;
        }
        if let Some(v) = kv.get("synth_noise_std") {
            spec.noise_std = parse_num(v, "synth_noise_std")?;
        }
        DatasetSpec::Synthetic(spec)
    } else {
        DatasetSpec::Dir(PathBuf::from(dataset))
    };

    let want_augment = kv.get("augment").map(|v| parse_bool(v, "augment")).transpose()?;
    if want_augment == Some(true) {
        let mut a = AugmentConfig::default();
        if let Some(v) = kv.get("rotation_degrees") {
            a.rotation_degrees = parse_num(v, "rotation_degrees")?;
        }
        if let Some(v) = kv.get("hflip_prob") {
            a.hflip_prob = parse_num(v, "hflip_prob")?;
        }
        if let Some(v) = kv.get("crop_fraction") {
            a.crop_fraction = parse_num(v, "crop_fraction")?;
        }
        cfg.augment = Some(a);
    }
    Ok(cfg)
}

pub fn load_train_config(path: &std::path::Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let kv = parse_kv(&text)?;
    let cfg = train_config_from_kv(&kv)?;
    cfg.validate()?;
    Ok(cfg)
}
