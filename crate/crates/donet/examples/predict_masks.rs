//! Train a tiny model for a few epochs, checkpoint it, reload, and write
//! the three prediction artifacts (decoder one, decoder two, joint) for
//! one image. The joint map's positives are always contained in both
//! decoders' positives.

use donet::data::SyntheticSpec;
use donet::metrics::binarize;
use donet::model::DonetConfig;
use donet::train::{load_checkpoint_file, predict_to_dir, train, DatasetSpec, TrainConfig};

fn main() {
    let dir = std::env::temp_dir().join("donet_predict_example");
    let _ = std::fs::remove_dir_all(&dir);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 2,
        model: DonetConfig { input_size: (32, 32), base_channels: 4, ..DonetConfig::default() },
        dataset: DatasetSpec::Synthetic(SyntheticSpec {
            count: 6,
            size: (32, 32),
            area_fraction_range: (0.05, 0.4),
            seed: 2,
            ..SyntheticSpec::default()
        }),
        out_dir: Some(dir.clone()),
        seed: 5,
        ..TrainConfig::default()
    };
    let report = train(&cfg).unwrap();
    println!("trained {} epochs, best val DSC {:.3}", cfg.epochs, report.best_val_dsc);

    let (mut model, epoch) = load_checkpoint_file(&dir.join("best.ckpt")).unwrap();
    println!("reloaded checkpoint from epoch {epoch}");

    let (train_set, _) = donet::train::load_dataset(&cfg).unwrap();
    let out = dir.join("prediction");
    predict_to_dir(&mut model, &train_set[0].image, &out).unwrap();

    let load = |name: &str| {
        let bytes = std::fs::read(out.join(format!("{name}.dot"))).unwrap();
        donet::tensor::Tensor::<f32>::load(&mut bytes.as_slice()).unwrap()
    };
    let count = |t: &donet::tensor::Tensor<f32>| {
        binarize(t, 0.5).unwrap().data().iter().filter(|&&v| v == 1.0).count()
    };
    let (p1, p2, joint) = (load("pred1"), load("pred2"), load("joint"));
    println!(
        "positives: decoder1 {}, decoder2 {}, joint {} (joint is the intersection's subset)",
        count(&p1),
        count(&p2),
        count(&joint)
    );
    println!("artifacts under {}", out.display());
}
