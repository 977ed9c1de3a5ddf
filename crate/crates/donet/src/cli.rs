//! Batch command-line surface: train, eval, predict, ablate, gradcheck and
//! synth subcommands. Exit codes: 0 success, 1 usage/config, 2 data,
//! 3 numeric failure.

use crate::config::load_train_config;
use crate::data::{generate_synthetic, load_split, pnm, write_split, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::run_unit_suite;
use crate::model::{model_grad_check, parse_num, parse_size};
use crate::train::{
    ablate, evaluate_to_csv, load_checkpoint_file, predict_to_dir, train, train_from, MapChoice,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const USAGE: &str = "\
usage: donet <command> [options]

commands:
  train     --config <file> [--seed N] [--resume <ckpt>]
  eval      --ckpt <file> --data <dir> --split train|val|test --out <csv> [--per-decoder]
  predict   --ckpt <file> --image <ppm> --out <dir>
  ablate    --config <file> --seeds 1,2,3 --out <tsv>
  gradcheck --scale unit|model [--cases N] [--seed N]
  synth     --count N --size 64 --out <dir> --seed S
";

/// Minimal `--flag value` parser; every flag takes exactly one value.
fn parse_flags(args: &[String]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --flag, got '{a}'")))?;
        if key == "per-decoder" {
            out.insert(key.to_string(), "true".to_string());
            continue;
        }
        let v = it
            .next()
            .ok_or_else(|| Error::Config(format!("flag --{key} needs a value")))?;
        out.insert(key.to_string(), v.clone());
    }
    Ok(out)
}

fn require<'a>(flags: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    flags
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("missing required flag --{key}")))
}

pub fn run(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        return Err(Error::Config(format!("no command given\n{USAGE}")));
    };
    let flags = parse_flags(&args[1..])?;
    match cmd.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "predict" => cmd_predict(&flags),
        "ablate" => cmd_ablate(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "synth" => cmd_synth(&flags),
        other => Err(Error::Config(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn cmd_train(flags: &BTreeMap<String, String>) -> Result<()> {
    let mut cfg = load_train_config(Path::new(require(flags, "config")?))?;
    if let Some(seed) = flags.get("seed") {
        cfg.seed = parse_num(seed, "seed")?;
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("donet_run"));
    }
    println!(
        "model: {} parameters (rcem {}, dual {}, pyramid {})",
        crate::model::Donet::<f32>::build(cfg.model.clone(), cfg.seed)?.parameter_count(),
        cfg.model.use_rcem,
        cfg.model.use_dual,
        cfg.model.use_pyramid_inputs
    );
    let report = match flags.get("resume") {
        Some(ckpt) => {
            let (model, done) = load_checkpoint_file(Path::new(ckpt))?;
            train_from(&cfg, Some((model, done + 1)))?
        }
        None => train(&cfg)?,
    };
    for r in &report.records {
        let val = r.val_dsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3}  lr {:.5}  l1 {:.4}  l2 {:.4}  lf {:.4}  total {:.4}  val_dsc {val}",
            r.epoch, r.lr, r.l1, r.l2, r.lf, r.total
        );
    }
    println!(
        "best val joint DSC {:.4} at epoch {} ({} train / {} val samples)",
        report.best_val_dsc,
        report.best_epoch,
        report.train_ids.len(),
        report.val_ids.len()
    );
    if let Some(dir) = &cfg.out_dir {
        println!("checkpoints and logs under {}", dir.display());
    }
    Ok(())
}

fn cmd_eval(flags: &BTreeMap<String, String>) -> Result<()> {
    let (mut model, _) = load_checkpoint_file(Path::new(require(flags, "ckpt")?))?;
    let root = PathBuf::from(require(flags, "data")?);
    let split = Split::parse(flags.get("split").map(String::as_str).unwrap_or("test"))?;
    let out = PathBuf::from(require(flags, "out")?);
    let samples = load_split::<f32>(&root, split)?;
    let csv = evaluate_to_csv(&mut model, &samples, MapChoice::Joint)?;
    std::fs::write(&out, &csv)?;
    println!("{}", csv.lines().last().unwrap_or(""));
    println!("wrote {} rows to {}", samples.len() + 2, out.display());
    if flags.contains_key("per-decoder") {
        for (map, suffix) in [(MapChoice::Decoder1, "pred1"), (MapChoice::Decoder2, "pred2")] {
            let csv = evaluate_to_csv(&mut model, &samples, map)?;
            let path = out.with_extension(format!("{suffix}.csv"));
            std::fs::write(&path, &csv)?;
            println!("wrote per-decoder metrics to {}", path.display());
        }
    }
    Ok(())
}

fn cmd_predict(flags: &BTreeMap<String, String>) -> Result<()> {
    let (mut model, _) = load_checkpoint_file(Path::new(require(flags, "ckpt")?))?;
    let image = pnm::load_image::<f32>(Path::new(require(flags, "image")?))?;
    let out = PathBuf::from(require(flags, "out")?);
    predict_to_dir(&mut model, &image, &out)?;
    println!("wrote pred1/pred2/joint masks and probability dumps to {}", out.display());
    Ok(())
}

fn cmd_ablate(flags: &BTreeMap<String, String>) -> Result<()> {
    let cfg = load_train_config(Path::new(require(flags, "config")?))?;
    let seeds: Vec<u64> = require(flags, "seeds")?
        .split(',')
        .map(|s| parse_num(s.trim(), "seeds"))
        .collect::<Result<_>>()?;
    let out = PathBuf::from(require(flags, "out")?);
    // held-out test set: the test/ split for directory datasets, a
    // disjoint generator stream for synthetic ones
    let test_set = match &cfg.dataset {
        crate::train::DatasetSpec::Dir(root) => load_split::<f32>(root, Split::Test)?,
        crate::train::DatasetSpec::Synthetic(spec) => {
            let test_spec = SyntheticSpec {
                count: (spec.count / 4).max(8),
                seed: spec.seed ^ 0x7E57,
                ..spec.clone()
            };
            generate_synthetic::<f32>(&test_spec)?
        }
    };
    let table = ablate(&cfg, &seeds, &test_set)?;
    let tsv = table.to_tsv();
    std::fs::write(&out, &tsv)?;
    print!("{tsv}");
    if !table.ordering_ok {
        println!("warning: full variant did not reach the baseline's mean DSC");
    }
    Ok(())
}

fn cmd_gradcheck(flags: &BTreeMap<String, String>) -> Result<()> {
    let scale = flags.get("scale").map(String::as_str).unwrap_or("unit");
    let seed: u64 = flags.get("seed").map(|v| parse_num(v, "seed")).transpose()?.unwrap_or(42);
    match scale {
        "unit" => {
            let cases: usize =
                flags.get("cases").map(|v| parse_num(v, "cases")).transpose()?.unwrap_or(100);
            let outcomes = run_unit_suite(cases, seed, 1e-4, None);
            let mut ok = true;
            for o in &outcomes {
                println!("{}", o.line());
                ok &= o.pass;
            }
            if !ok {
                return Err(Error::Numeric("unit-scale gradient checks failed".into()));
            }
            println!("all {} items passed at tol 1e-4", outcomes.len());
            Ok(())
        }
        "model" => {
            let samples: usize =
                flags.get("cases").map(|v| parse_num(v, "cases")).transpose()?.unwrap_or(200);
            let r = model_grad_check(samples, seed, 1e-5, 1e-3);
            println!(
                "{} model-scale: {} coords checked ({} below FD noise floor), {} kinks excluded, max_rel_err {:.3e}",
                if r.pass { "PASS" } else { "FAIL" },
                r.checked,
                r.sub_noise,
                r.kinks.len(),
                r.max_rel_err
            );
            if !r.pass {
                return Err(Error::Numeric("model-scale gradient check failed".into()));
            }
            Ok(())
        }
        other => Err(Error::Config(format!("unknown gradcheck scale '{other}'"))),
    }
}

fn cmd_synth(flags: &BTreeMap<String, String>) -> Result<()> {
    let count: usize = parse_num(require(flags, "count")?, "count")?;
    let size = parse_size(flags.get("size").map(String::as_str).unwrap_or("64"))?;
    let out = PathBuf::from(require(flags, "out")?);
    let seed: u64 = flags.get("seed").map(|v| parse_num(v, "seed")).transpose()?.unwrap_or(0);
    let spec = SyntheticSpec { count, size, seed, ..SyntheticSpec::default() };
    let samples = generate_synthetic::<f32>(&spec)?;
    // 70/15/15 split by index
    let n_val = count * 15 / 100;
    let n_test = count * 15 / 100;
    let n_train = count - n_val - n_test;
    let (train_s, rest) = samples.split_at(n_train);
    let (val_s, test_s) = rest.split_at(n_val);
    write_split(&out, Split::Train, train_s)?;
    write_split(&out, Split::Val, val_s)?;
    write_split(&out, Split::Test, test_s)?;
    println!(
        "wrote {} train / {} val / {} test samples ({}x{}) under {}",
        train_s.len(),
        val_s.len(),
        test_s.len(),
        size.0,
        size.1,
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_command_is_usage_error() {
        let err = run(&[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_flags_value_missing() {
        let err = run(&["train".into(), "--config".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn missing_data_is_exit_2() {
        let err = run(&[
            "eval".into(),
            "--ckpt".into(),
            "/nonexistent.ckpt".into(),
            "--data".into(),
            "/nonexistent".into(),
            "--out".into(),
            "/tmp/x.csv".into(),
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn synth_writes_standard_layout() {
        let dir = std::env::temp_dir().join("donet_cli_synth");
        let _ = std::fs::remove_dir_all(&dir);
        run(&[
            "synth".into(),
            "--count".into(),
            "7".into(),
            "--size".into(),
            "32".into(),
            "--out".into(),
            dir.to_string_lossy().into_owned(),
            "--seed".into(),
            "5".into(),
        ])
        .unwrap();
        assert!(dir.join("train").is_dir());
        assert!(dir.join("val").is_dir());
        assert!(dir.join("test").is_dir());
        let train = load_split::<f32>(&dir, Split::Train).unwrap();
        assert_eq!(train.len(), 7 - 1 - 1);
    }
}
