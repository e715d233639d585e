//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use aroid::augspace::build_space;
use aroid::checkpoint::{Checkpoint, PolicyCheckpointLog};
use aroid::config::{Augmentation, ExperimentConfig};
use aroid::data::{ingest, DatasetSpec, Splits};
use aroid::policy::PolicyModel;
use aroid::report::{distribution_svg, evaluate, export_policy_distributions, write_distribution_csv};
use aroid::rng::{self, Streams};
use aroid::trainer::{
    self, eps_at, initial_target, lambda_at, load_model, lr_at, policy_update_schedule, save_model, target_spec,
    write_metrics_csv, MetricsRow, Observer, TrainOptions, TrainOutput,
};
use aroid_nn::Network;
use serde::Serialize;

use crate::lock::DirLock;
use crate::{CliError, ConfigArgs};

type CliResult<T = ()> = Result<T, CliError>;

/// Train-split size without reading the data, when it can be known.
fn known_train_size(cfg: &ExperimentConfig) -> Option<usize> {
    let full = match cfg.data.source.parse::<DatasetSpec>().ok()? {
        DatasetSpec::Synthetic { n, .. } => Some(n),
        DatasetSpec::CifarBinary(_) => Some(50_000),
        DatasetSpec::ImageFolder(_) => None,
    };
    match (cfg.data.train_size, full) {
        (Some(t), Some(f)) => Some(t.min(f)),
        (Some(t), None) => Some(t),
        (None, f) => f,
    }
}

fn load_data(cfg: &ExperimentConfig) -> CliResult<Splits> {
    if cfg.data.source.trim().is_empty() {
        return Err(CliError::Usage("data.source is not set".into()));
    }
    let spec: DatasetSpec = cfg
        .data
        .source
        .parse()
        .map_err(|e| CliError::Usage(format!("data.source: {e}")))?;
    if let Some(p) = spec.path() {
        if !p.is_dir() {
            return Err(CliError::Usage(format!(
                "data.source: dataset directory {} does not exist (relative paths resolve against ${})",
                p.display(),
                aroid::data::DATA_ROOT_ENV
            )));
        }
    }
    let splits = ingest(&spec, cfg.data.train_size, cfg.data.test_size, cfg.seed)?;
    log::info!("data: {} train / {} test items from {}", splits.train.len(), splits.test.len(), cfg.data.source);
    Ok(splits)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Prints the λ, ε, learning-rate and policy-cadence tables.
fn print_schedule(cfg: &ExperimentConfig) {
    let t = &cfg.train;
    println!("fingerprint {}", cfg.fingerprint());
    println!("augmentation {:?}", t.augmentation);
    println!(
        "policy update every {} iterations after epoch {} with {} trajectories, beta {}, diversity [{}, {}]",
        t.interval, t.warmup_epochs, t.trajectories, t.beta, t.diversity.lower, t.diversity.upper
    );
    let iters = known_train_size(cfg).map(|n| n.div_ceil(t.batch_size));
    let updates = match (t.augmentation, iters) {
        (Augmentation::Aroid, Some(i)) => Some(policy_update_schedule(t, i)),
        (Augmentation::None, _) => Some(vec![0; t.epochs]),
        _ => None,
    };
    if let Some(i) = iters {
        println!("{i} target iterations per epoch");
    }
    println!("lambda milestones:");
    for (e, l) in &t.lambda_schedule {
        let pct = if t.epochs > 0 { 100.0 * *e as f64 / t.epochs as f64 } else { 0.0 };
        println!("  epoch {e:>4} ({pct:>5.1}%)  lambda {l}");
    }
    println!("epoch,lr,lambda,epsilon,augment,policy_updates");
    for epoch in 0..t.epochs {
        let aug = t.augmentation == Augmentation::Aroid && epoch >= t.warmup_epochs;
        println!(
            "{epoch},{},{},{},{},{}",
            lr_at(t.lr, &t.lr_milestones, t.lr_decay, epoch),
            lambda_at(&t.lambda_schedule, epoch),
            eps_at(t.at_attack.epsilon, t.eps_warmup_epochs, epoch),
            if aug { "yes" } else { "no" },
            updates.as_ref().map_or_else(|| "?".to_string(), |u| u[epoch].to_string()),
        );
    }
}

/// Logs one line per finished epoch.
struct Progress;

impl Observer for Progress {
    fn epoch_end(&mut self, r: &MetricsRow, _target: &Network, _policy: Option<&PolicyModel>) {
        log::info!(
            "epoch {:>3}  loss {:.4}  clean {:.4}  robust {:.4}  best {:.4}  policy updates {}",
            r.epoch,
            r.train_loss,
            r.clean_acc,
            r.robust_acc,
            r.best_robust_acc,
            r.policy_updates
        );
    }
}

pub fn pretrain_affinity(args: &ConfigArgs, out: &Path) -> CliResult {
    let cfg = args.resolve()?;
    if args.dry_run {
        println!("fingerprint {}", cfg.fingerprint());
        println!(
            "affinity: up to {} epochs, batch {}, lr {}, stop at train accuracy {}",
            cfg.affinity.max_epochs, cfg.affinity.batch_size, cfg.affinity.lr, cfg.affinity.target_accuracy
        );
        return Ok(());
    }
    let splits = load_data(&cfg)?;
    let lock = DirLock::acquire(out)?;
    log::debug!("holding {}", lock.path().display());
    let (model, report) = trainer::pretrain_affinity(&cfg, &splits.train)?;
    let spec = target_spec(&cfg, &splits.train)?;
    save_model(&out.join("affinity.ck"), "affinity", &model, &spec, &cfg.fingerprint(), report.epochs_run)?;
    write_csv(&out.join("affinity_metrics.csv"), &report.history)?;
    write_json(&out.join("affinity.json"), &report)?;
    println!(
        "affinity model: train accuracy {:.4} after {} epochs -> {}",
        report.train_accuracy,
        report.epochs_run,
        out.join("affinity.ck").display()
    );
    Ok(())
}

fn load_affinity(path: &Path, cfg: &ExperimentConfig, splits: &Splits) -> CliResult<Network> {
    let (model, ck) = load_model(path, "affinity")?;
    if ck.header.arch.as_ref() != Some(&target_spec(cfg, &splits.train)?) {
        return Err(CliError::Usage(format!(
            "{}: affinity architecture does not match target.widths/target.readout",
            path.display()
        )));
    }
    if ck.header.fingerprint != cfg.fingerprint() {
        log::warn!("{} was pretrained under a different config", path.display());
    }
    Ok(model)
}

#[derive(Serialize)]
struct Summary<'a> {
    fingerprint: String,
    best_epoch: usize,
    best_robust_acc: f64,
    final_clean_acc: Option<f64>,
    final_robust_acc: Option<f64>,
    counters: &'a trainer::Counters,
}

fn write_outputs(out: &Path, cfg: &ExperimentConfig, splits: &Splits, res: &TrainOutput) -> CliResult {
    let fp = cfg.fingerprint();
    let spec = target_spec(cfg, &splits.train)?;
    let csv_path = out.join("metrics.csv");
    let file = fs::File::create(&csv_path).map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    write_metrics_csv(&res.metrics, std::io::BufWriter::new(file))?;
    save_model(&out.join("best.ck"), "target", &res.best_target, &spec, &fp, res.best_epoch)?;
    save_model(&out.join("last.ck"), "target", &res.last_target, &spec, &fp, cfg.train.epochs.saturating_sub(1))?;
    if let Some(log) = &res.log {
        log.save(&out.join("policy_log.ck"))?;
    }
    let last = res.metrics.last();
    write_json(
        &out.join("summary.json"),
        &Summary {
            fingerprint: fp,
            best_epoch: res.best_epoch,
            best_robust_acc: res.best_robust_acc,
            final_clean_acc: last.map(|r| r.clean_acc),
            final_robust_acc: last.map(|r| r.robust_acc),
            counters: &res.counters,
        },
    )?;
    println!(
        "best robust accuracy {:.4} at epoch {}; outputs in {}",
        res.best_robust_acc,
        res.best_epoch,
        out.display()
    );
    Ok(())
}

fn state_options(out: &Path, resume: bool) -> CliResult<TrainOptions> {
    let dir: PathBuf = out.join("state");
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(TrainOptions {
        state_dir: Some(dir),
        resume,
    })
}

pub fn train(args: &ConfigArgs, out: &Path, affinity: Option<&Path>, resume: bool) -> CliResult {
    let cfg = args.resolve()?;
    if args.dry_run {
        print_schedule(&cfg);
        return Ok(());
    }
    let splits = load_data(&cfg)?;
    let _lock = DirLock::acquire(out)?;
    let aff = match (cfg.train.augmentation, affinity) {
        (Augmentation::None, _) => None,
        (Augmentation::Aroid, Some(p)) => Some(load_affinity(p, &cfg, &splits)?),
        (Augmentation::Aroid, None) => {
            log::info!("no --affinity given; pretraining one");
            let (model, report) = trainer::pretrain_affinity(&cfg, &splits.train)?;
            let spec = target_spec(&cfg, &splits.train)?;
            save_model(&out.join("affinity.ck"), "affinity", &model, &spec, &cfg.fingerprint(), report.epochs_run)?;
            write_json(&out.join("affinity.json"), &report)?;
            Some(model)
        }
    };
    let opts = state_options(out, resume)?;
    let res = trainer::train(&cfg, &splits, aff.as_ref(), &opts, &mut Progress)?;
    write_outputs(out, &cfg, &splits, &res)
}

pub fn train_transfer(args: &ConfigArgs, out: &Path, log_path: &Path, resume: bool) -> CliResult {
    let cfg = args.resolve()?;
    if args.dry_run {
        print_schedule(&cfg);
        return Ok(());
    }
    let log = PolicyCheckpointLog::load(log_path)?;
    let splits = load_data(&cfg)?;
    let _lock = DirLock::acquire(out)?;
    let opts = state_options(out, resume)?;
    let res = trainer::train_transfer(&cfg, &splits, &log, &opts, &mut Progress)?;
    write_outputs(out, &cfg, &splits, &res)
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    items: usize,
    epsilon: f32,
    steps: usize,
    clean_acc: f64,
    robust_acc: f64,
}

pub fn eval(args: &ConfigArgs, model: Option<&Path>, out: Option<&Path>) -> CliResult {
    let cfg = args.resolve()?;
    if args.dry_run {
        println!("fingerprint {}", cfg.fingerprint());
        println!("attack {:?}", cfg.eval.attack);
        return Ok(());
    }
    let splits = load_data(&cfg)?;
    let _lock = out.map(DirLock::acquire).transpose()?;
    let (net, label) = match model {
        Some(p) => {
            let kind = Checkpoint::load(p)?.header.kind;
            if kind != "target" && kind != "affinity" {
                return Err(CliError::Usage(format!("{}: {kind} checkpoints hold no model", p.display())));
            }
            (load_model(p, &kind)?.0, p.display().to_string())
        }
        None => (initial_target(&cfg, &splits.train)?.0, "initial".to_string()),
    };
    let mut rng = Streams::new(cfg.seed).stream(rng::EVAL_ATTACK, u64::MAX);
    let res = evaluate(&net, &splits.test, &cfg.eval.attack, cfg.eval.batch_size, &mut rng)?;
    let report = EvalReport {
        model: label,
        items: splits.test.len(),
        epsilon: cfg.eval.attack.epsilon,
        steps: cfg.eval.attack.steps,
        clean_acc: res.clean_acc,
        robust_acc: res.robust_acc,
    };
    println!("{}", serde_json::to_string(&report).expect("serialisable"));
    if let Some(dir) = out {
        write_json(&dir.join("eval.json"), &report)?;
    }
    Ok(())
}

pub fn visualize(args: &ConfigArgs, log_path: &Path, out: &Path, epochs: &[usize], images: usize) -> CliResult {
    let cfg = args.resolve()?;
    let log = PolicyCheckpointLog::load(log_path)?;
    let epochs = if epochs.is_empty() { log.epochs() } else { epochs.to_vec() };
    if args.dry_run {
        println!("epochs {epochs:?} of {:?}, {images} images", log.epochs());
        return Ok(());
    }
    if images == 0 {
        return Err(CliError::Usage("--images must be at least 1".into()));
    }
    let splits = load_data(&cfg)?;
    let _lock = DirLock::acquire(out)?;
    let space = build_space(cfg.policy.space);
    let n = images.min(splits.test.len());
    let rows = export_policy_distributions(&log, &space, &splits.test.images[..n], &epochs)?;
    let csv_path = out.join("policy_distributions.csv");
    let file = fs::File::create(&csv_path).map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    write_distribution_csv(&rows, std::io::BufWriter::new(file))?;
    for &e in &epochs {
        write_file(&out.join(format!("policy_epoch_{e}.svg")), distribution_svg(&rows, e).as_bytes())?;
    }
    println!("{} rows for {} epochs -> {}", rows.len(), epochs.len(), csv_path.display());
    Ok(())
}
