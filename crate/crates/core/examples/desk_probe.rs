//! Runs the desk preset for baseline and learned augmentation on one seed.
//! Usage: desk_probe <seed> [key=value ...]

use std::time::Instant;

use aroid::config::{Augmentation, ExperimentConfig};
use aroid::data::{ingest, DatasetSpec};
use aroid::trainer::{pretrain_affinity, train, NoObserver, TrainOptions};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> aroid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = ExperimentConfig::preset("desk")?;
    cfg.seed = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    let spec: DatasetSpec = cfg.data.source.parse()?;
    let splits = ingest(&spec, cfg.data.train_size, cfg.data.test_size, cfg.seed)?;
    let t0 = Instant::now();
    let (aft, rep) = pretrain_affinity(&cfg, &splits.train)?;
    println!("affinity {:?} in {:.1}s", rep, t0.elapsed().as_secs_f64());
    let only_base = std::env::var_os("PROBE_BASE_ONLY").is_some();
    let only_aroid = std::env::var_os("PROBE_AROID_ONLY").is_some();
    for aug in [Augmentation::None, Augmentation::Aroid] {
        if (only_base && aug == Augmentation::Aroid) || (only_aroid && aug == Augmentation::None) {
            continue;
        }
        let mut c = cfg.clone();
        c.train.augmentation = aug;
        let t0 = Instant::now();
        let out = train(&c, &splits, Some(&aft), &TrainOptions::default(), &mut NoObserver)?;
        println!("{aug:?}: best {:.4} @ {} last {:.4} in {:.1}s", out.best_robust_acc, out.best_epoch,
            out.metrics.last().unwrap().robust_acc, t0.elapsed().as_secs_f64());
        for r in &out.metrics {
            println!("  e{:2} loss {:.3} tr {:.3} clean {:.3} rob {:.3} upd {} hard {:?} div {:?}", r.epoch, r.train_loss,
                r.train_robust_acc, r.clean_acc, r.robust_acc, r.policy_updates, r.mean_hardness.map(|v| (v * 1000.0).round() / 1000.0),
                r.policy_diversity.map(|v| (v * 1000.0).round() / 1000.0));
        }
    }
    Ok(())
}
