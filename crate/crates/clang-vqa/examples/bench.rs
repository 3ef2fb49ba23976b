use std::time::Instant;

use clang_vqa::autodiff::Tape;
use clang_vqa::data::{generate_dataset, read_samples, DatasetSpec};
use clang_vqa::model::Model;
use clang_vqa::train::{train, TrainConfig};

fn grad_probe(dir: &std::path::Path) {
    let samples = read_samples(&dir.join("train.manifest.jsonl")).expect("read");
    let cfg = TrainConfig::desk_scale();
    let dims = cfg.dims(&samples.meta);
    let model = Model::init(&dims, cfg.seed).expect("init");

    {
        let mut tape = Tape::new();
        let s0 = &samples.samples[0];
        let obs = s0.observations_f64();
        let graph = clang_vqa::graph::build_graph(&obs, dims.k, dims.l, dims.n).expect("graph");
        let hier = clang_vqa::pool::forward_hierarchy(&mut tape, &model.hier, &graph).expect("hier");
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        println!("projected rms {:.3e}", rms(tape.value(hier.projected)));
        for (l, lev) in hier.levels.iter().enumerate() {
            println!(
                "level {l}: z {:.3e} x_next {:.3e} x_refined {:.3e} pooled {:.3e}",
                rms(tape.value(lev.z)),
                rms(tape.value(lev.x_next)),
                rms(tape.value(lev.x_refined)),
                rms(tape.value(lev.pooled))
            );
        }
        println!("x_g rms {:.3e}", rms(tape.value(hier.fused.x_g)));
    }

    let mut tape = Tape::new();
    let mut losses = Vec::new();
    let mut gs: Vec<Vec<f64>> = Vec::new();
    let mut qs: Vec<Vec<f64>> = Vec::new();
    for s in &samples.samples[..32] {
        let fwd = model.forward_sample(&mut tape, s).expect("fwd");
        losses.push(fwd.l_qa);
        gs.push(tape.value(fwd.x_g).to_vec());
        qs.push(tape.value(fwd.x_q).to_vec());
        if losses.len() <= 3 {
            println!("logits: {:?}", tape.value(fwd.logits));
        }
    }
    for (tag, rows) in [("x_g", &gs), ("x_q", &qs)] {
        let d = rows[0].len();
        let var: f64 = (0..d)
            .map(|j| {
                let m: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
                rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / rows.len() as f64
            })
            .sum::<f64>()
            / d as f64;
        let scale: f64 =
            rows.iter().flat_map(|r| r.iter()).map(|v| v * v).sum::<f64>() / (32 * d) as f64;
        println!("{tag}: cross-sample var {var:.3e}, mean square {scale:.3e}");
    }
    let cat = tape.concat_rows(&losses).expect("cat");
    let loss = tape.mean_all(cat);
    println!("mean qa loss {:.6}", tape.scalar_value(loss));
    tape.backward(loss).expect("backward");
    for (name, p) in model.main_params() {
        let t = p.borrow();
        let n = t.data.len() as f64;
        let wrms = (t.data.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let grms = if t.grad.is_empty() {
            0.0
        } else {
            (t.grad.iter().map(|v| v * v).sum::<f64>() / n).sqrt()
        };
        println!("{name:<34} {:>4}x{:<4} w_rms {wrms:.3e} g_rms {grms:.3e}", t.rows(), t.cols());
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map_or(1e-3, |s| s.parse().expect("lr"));
    let epochs: usize = args.get(2).map_or(8, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(3).map_or(0, |s| s.parse().expect("seed"));
    let mode: &str = args.get(4).map_or("full", |s| s.as_str());

    let spec = DatasetSpec {
        num_samples: 2350,
        train_count: Some(2000),
        val_count: Some(350),
        ..DatasetSpec::default()
    };
    let dir = std::env::temp_dir().join("clang-bench-data");
    std::fs::create_dir_all(&dir).expect("dir");
    generate_dataset(&spec, 1, &dir).expect("generate");

    if mode == "grads" {
        grad_probe(&dir);
        return;
    }

    let cfg = TrainConfig {
        lr,
        epochs,
        seed,
        adv: mode != "qa" && mode != "noadv",
        contrastive: mode != "qa" && mode != "nocon",
        p_layers: if mode == "p0" { 0 } else { 8 },
        ..TrainConfig::desk_scale()
    };
    let tick = Instant::now();
    let out = train(&cfg, &dir, None).expect("train");
    for row in &out.log.rows {
        println!(
            "epoch {} {:>5}: acc {:.4} (c {:.3} t {:.3} d {:.3}) qa {:.4} nce {:.4} kl {:.5} d {:.4} g {:.4} [{:.1}s]",
            row.epoch,
            row.split.as_str(),
            row.acc_all,
            row.acc_causal,
            row.acc_temporal,
            row.acc_descriptive,
            row.l_qa,
            row.l_n,
            row.l_kl,
            row.l_d,
            row.l_g,
            row.wall_secs
        );
    }
    println!(
        "mode {mode} lr {lr} seed {seed}: best val {:.4}, final val {:.4}, wall {:.1}s",
        out.best_val_acc,
        out.final_val_acc,
        tick.elapsed().as_secs_f64()
    );
}
