use std::fs;
use std::path::Path;

use clang_vqa::data::{generate_dataset, read_samples, DatasetSpec};
use clang_vqa::model::Model;
use clang_vqa::train::{checkpoint, AdamW, CheckpointMeta, TrainConfig};

fn main() {
    let root = Path::new("fuzz/corpus");
    let tmp = std::env::temp_dir().join("clang-fuzz-seeds");
    fs::create_dir_all(&tmp).expect("tmp dir");

    let spec = DatasetSpec {
        num_samples: 3,
        k: 2,
        l: 2,
        n: 2,
        e: 2,
        predicates: 4,
        sigma: 0.1,
        d1: 3,
        train_count: Some(2),
        val_count: Some(1),
    };
    let (train_path, _) = generate_dataset(&spec, 9, &tmp).expect("generate");
    let manifest = fs::read(&train_path).expect("manifest bytes");
    let blob = fs::read(tmp.join("train.blob")).expect("blob bytes");

    let write = |dir: &str, name: &str, bytes: &[u8]| {
        let dir = root.join(dir);
        fs::create_dir_all(&dir).expect("corpus dir");
        fs::write(dir.join(name), bytes).expect("seed file");
    };

    write("manifest_parse", "tiny_manifest", &manifest);
    write("blob_parse", "tiny_blob", &blob);

    let mut pair = manifest.clone();
    pair.push(0);
    pair.extend_from_slice(&blob);
    write("dataset_decode", "tiny_pair", &pair);

    let cfg = TrainConfig {
        d: 4,
        p_layers: 1,
        encoder_depth: 1,
        ..TrainConfig::default()
    };
    let data = read_samples(&train_path).expect("read back");
    let dims = cfg.dims(&data.meta);
    let model = Model::init(&dims, 0).expect("model");
    let refs: Vec<_> = model.main_params().into_iter().map(|(_, p)| p).collect();
    let meta = CheckpointMeta {
        config: cfg,
        dims,
        optimizer: AdamW::new(1e-3, &refs).info,
    };
    let bytes = checkpoint::encode(&meta, &model.snapshot()).expect("encode");
    write("checkpoint_parse", "tiny_checkpoint", &bytes);

    write(
        "config_parse",
        "train_config",
        br#"{"lr": 0.001, "epochs": 3, "adv": false}"#,
    );
    write(
        "config_parse",
        "dataset_spec",
        br#"{"num_samples": 100, "k": 2, "l": 4, "n": 3, "e": 2, "predicates": 4}"#,
    );
    println!("seeds written under {}", root.display());
}
