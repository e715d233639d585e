//! Alternating training of the target and policy models, affinity
//! pretraining, schedules, per-epoch state, and policy-log replay.

use std::path::{Path, PathBuf};

use aroid_nn::loss::{argmax_rows, cross_entropy};
use aroid_nn::optim::Sgd;
use aroid_nn::{BackwardMode, ConvNetSpec, Network, Tensor};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::pgd;
use crate::augspace::{apply_trajectory, build_space, AugmentationSpace, TrajectoryCode};
use crate::checkpoint::{Checkpoint, PolicyCheckpointLog};
use crate::config::{Augmentation, ExperimentConfig, TrainConfig};
use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::pg_estimator::{policy_update_step, AdversarialHardness, PolicyLossBreakdown};
use crate::policy::{default_backbone_spec, sample_index, PolicyModel};
use crate::report::evaluate;
use crate::rng::{self, Streams};

/// Piecewise-constant lookup on left-closed intervals; epochs before the
/// first milestone take the first value.
pub fn lambda_at(schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .rev()
        .find(|(e, _)| *e <= epoch)
        .or(schedule.first())
        .map_or(0.0, |(_, l)| *l)
}

/// Linear ramp from 0 over `ramp_epochs`, evaluated at the epoch start.
pub fn eps_at(epsilon: f32, ramp_epochs: usize, epoch: usize) -> f32 {
    if ramp_epochs == 0 || epoch >= ramp_epochs {
        epsilon
    } else {
        epsilon * epoch as f32 / ramp_epochs as f32
    }
}

/// Base rate times `decay` for every milestone already reached.
pub fn lr_at(base: f32, milestones: &[usize], decay: f32, epoch: usize) -> f32 {
    milestones
        .iter()
        .filter(|&&m| m <= epoch)
        .fold(base, |lr, _| lr * decay)
}

/// Policy updates per epoch when every epoch runs `iters_per_epoch` target
/// iterations: the post-warmup counter starts at 1 and an update fires when
/// it is a multiple of `interval`.
pub fn policy_update_schedule(t: &TrainConfig, iters_per_epoch: usize) -> Vec<usize> {
    let mut counter = 0usize;
    (0..t.epochs)
        .map(|epoch| {
            if epoch < t.warmup_epochs {
                return 0;
            }
            let before = counter / t.interval;
            counter += iters_per_epoch;
            counter / t.interval - before
        })
        .collect()
}

pub fn target_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<ConvNetSpec> {
    let (c, h, w) = data
        .shape()
        .ok_or_else(|| Error::Input("cannot size a model for an empty dataset".into()))?;
    Ok(ConvNetSpec {
        in_channels: c,
        height: h,
        width: w,
        widths: cfg.target.widths.clone(),
        readout: cfg.target.readout,
        outputs: Some(data.classes),
    })
}

pub fn policy_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<ConvNetSpec> {
    let (c, h, w) = data
        .shape()
        .ok_or_else(|| Error::Input("cannot size a policy for an empty dataset".into()))?;
    Ok(default_backbone_spec(c, h, w, &cfg.policy.widths))
}

/// The target network as initialised at the start of training.
pub fn initial_target(cfg: &ExperimentConfig, data: &Dataset) -> Result<(Network, ConvNetSpec)> {
    let spec = target_spec(cfg, data)?;
    let net = Network::build(&spec, &mut Streams::new(cfg.seed).stream(rng::PARAM_INIT, 0));
    Ok((net, spec))
}

fn build_policy(spec: &ConvNetSpec, space: &AugmentationSpace, streams: &Streams) -> PolicyModel {
    PolicyModel::new(spec, space, &mut streams.stream(rng::PARAM_INIT, 1))
}

fn batch_of<'a>(data: &'a Dataset, idx: &[usize]) -> (Vec<&'a Image>, Vec<usize>) {
    (
        idx.iter().map(|&i| &data.images[i]).collect(),
        idx.iter().map(|&i| data.labels[i]).collect(),
    )
}

/// One SGD step on the mean cross-entropy of `x`; returns the mean loss and
/// the number of correct predictions before the step.
fn sgd_step(model: &mut Network, opt: &mut Sgd, x: &Tensor, labels: &[usize], clip: Option<f32>) -> Result<(f64, usize)> {
    let (logits, tape) = model.forward_tape(x)?;
    let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    let (losses, mut dlogits) = cross_entropy(&logits, labels)?;
    let n = labels.len() as f32;
    dlogits.data_mut().iter_mut().for_each(|g| *g /= n);
    let mean = losses.iter().map(|&l| l as f64).sum::<f64>() / labels.len() as f64;
    if !mean.is_finite() {
        if let Some((i, l)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
            return Err(Error::Training(format!("non-finite loss {l} for batch item {i} (label {})", labels[i])));
        }
        return Err(Error::Training(format!("non-finite mean loss {mean}")));
    }
    let (grads, _) = model.backward(&tape, dlogits, BackwardMode::PARAMS)?;
    let mut grads = grads.expect("parameter gradients requested");
    if !grads.is_finite() {
        return Err(Error::Training(format!("non-finite gradients at loss {mean}")));
    }
    if let Some(c) = clip {
        grads.clip_global_norm(c);
    }
    opt.step(model, &grads);
    Ok((mean, correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityReport {
    pub epochs_run: usize,
    pub train_accuracy: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub early_stopped: bool,
    pub below_floor: bool,
    pub history: Vec<AffinityEpoch>,
}

/// Train-set loss and accuracy after one affinity epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
}

fn dataset_loss_acc(model: &Network, data: &Dataset, batch: usize) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for (imgs, labels) in data.images.chunks(batch).zip(data.labels.chunks(batch)) {
        let logits = model.forward(&batch_tensor(imgs)?)?;
        let (l, _) = cross_entropy(&logits, labels)?;
        loss += l.iter().map(|&v| v as f64).sum::<f64>();
        correct += argmax_rows(&logits).iter().zip(labels).filter(|(p, l)| p == l).count();
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Standard training without augmentation. Stops once train accuracy reaches
/// the configured target; returns the most accurate epoch's parameters.
pub fn pretrain_affinity(cfg: &ExperimentConfig, train: &Dataset) -> Result<(Network, AffinityReport)> {
    cfg.validate()?;
    let a = &cfg.affinity;
    let streams = Streams::new(cfg.seed);
    let spec = target_spec(cfg, train)?;
    let mut model = Network::build(&spec, &mut streams.stream(rng::PARAM_INIT, 2));
    let mut opt = Sgd::new(&model, a.lr, a.momentum, a.weight_decay);
    let eval_batch = cfg.eval.batch_size;
    let (initial_loss, initial_acc) = dataset_loss_acc(&model, train, eval_batch)?;
    let mut best = (initial_acc, initial_loss, model.clone());
    let mut epochs_run = 0;
    let mut early_stopped = false;
    let mut history = Vec::new();
    for epoch in 0..a.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut streams.stream("affinity_order", epoch as u64));
        for chunk in order.chunks(a.batch_size) {
            let (imgs, labels) = batch_of(train, chunk);
            sgd_step(&mut model, &mut opt, &batch_tensor(imgs)?, &labels, None)?;
        }
        epochs_run = epoch + 1;
        let (loss, acc) = dataset_loss_acc(&model, train, eval_batch)?;
        history.push(AffinityEpoch {
            epoch,
            train_loss: loss,
            train_accuracy: acc,
        });
        if acc > best.0 || (acc == best.0 && loss < best.1) {
            best = (acc, loss, model.clone());
        }
        if acc >= a.target_accuracy {
            early_stopped = true;
            break;
        }
    }
    let (train_accuracy, final_loss, model) = best;
    let below_floor = train_accuracy < a.floor_accuracy;
    if below_floor {
        log::warn!(
            "affinity model reached only {:.4} train accuracy after {epochs_run} epochs (floor {:.4})",
            train_accuracy,
            a.floor_accuracy
        );
    }
    Ok((
        model,
        AffinityReport {
            epochs_run,
            train_accuracy,
            initial_loss,
            final_loss,
            early_stopped,
            below_floor,
            history,
        },
    ))
}

/// One row per epoch of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f32,
    pub lambda: f64,
    pub epsilon: f32,
    pub train_loss: f64,
    pub train_robust_acc: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub best_robust_acc: f64,
    pub policy_updates: usize,
    pub policy_skipped: usize,
    pub policy_surrogate: Option<f64>,
    pub policy_diversity: Option<f64>,
    pub policy_total: Option<f64>,
    pub mean_hardness: Option<f64>,
    pub mean_vulnerability: Option<f64>,
    pub mean_affinity: Option<f64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub target_steps: usize,
    /// Target iterations after warmup, numbered from 1.
    pub post_warmup_iters: usize,
    pub policy_updates: usize,
    pub policy_skipped: usize,
    /// Policy-gradient evaluations, skipped or not.
    pub pg_computations: usize,
    pub updates_per_epoch: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub best_target: Network,
    pub last_target: Network,
    pub best_epoch: usize,
    pub best_robust_acc: f64,
    pub policy: Option<PolicyModel>,
    pub log: Option<PolicyCheckpointLog>,
    pub metrics: Vec<MetricsRow>,
    pub counters: Counters,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where per-epoch state is written; needed for resume.
    pub state_dir: Option<PathBuf>,
    pub resume: bool,
}

/// Hooks called at fixed points of the loop; all default to no-ops.
pub trait Observer {
    fn after_target_step(&mut self, _epoch: usize, _target: &Network, _policy: Option<&PolicyModel>) {}
    fn after_policy_update(
        &mut self,
        _epoch: usize,
        _target: &Network,
        _policy: &PolicyModel,
        _breakdown: &PolicyLossBreakdown,
    ) {
    }
    fn epoch_end(&mut self, _row: &MetricsRow, _target: &Network, _policy: Option<&PolicyModel>) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

enum Mode<'a> {
    Plain,
    Live {
        affinity: &'a Network,
        log: PolicyCheckpointLog,
    },
    Replay {
        log: &'a PolicyCheckpointLog,
    },
}

const STATE_FILE: &str = "state.ck";
const LOG_FILE: &str = "policy_log.ck";

#[derive(Debug, Serialize, Deserialize)]
struct StateExtra {
    epochs_done: usize,
    global_iter: usize,
    best_epoch: usize,
    best_robust_acc: f64,
    counters: Counters,
    metrics: Vec<MetricsRow>,
}

/// Trains the target with adversarial training. With learned augmentation
/// the policy is updated every `interval` post-warmup iterations on a batch
/// drawn independently of the epoch order, and every training image gets one
/// trajectory sampled from the current policy.
pub fn train(
    cfg: &ExperimentConfig,
    splits: &Splits,
    affinity: Option<&Network>,
    opts: &TrainOptions,
    observer: &mut dyn Observer,
) -> Result<TrainOutput> {
    let mode = match cfg.train.augmentation {
        Augmentation::None => Mode::Plain,
        Augmentation::Aroid => {
            let affinity = affinity.ok_or_else(|| {
                Error::Config("learned augmentation needs a pretrained affinity model".into())
            })?;
            let space = build_space(cfg.policy.space);
            Mode::Live {
                affinity,
                log: PolicyCheckpointLog::new(&cfg.fingerprint(), space.signature(), policy_spec(cfg, &splits.train)?),
            }
        }
    };
    run(cfg, splits, mode, opts, observer)
}

/// Replays a recorded policy log: the epoch-`e` snapshot drives augmentation
/// during epoch `e` and is never updated.
pub fn train_transfer(
    cfg: &ExperimentConfig,
    splits: &Splits,
    log: &PolicyCheckpointLog,
    opts: &TrainOptions,
    observer: &mut dyn Observer,
) -> Result<TrainOutput> {
    let space = build_space(cfg.policy.space);
    if log.space_signature != space.signature() {
        return Err(Error::Config(format!(
            "policy log head sizes {:?} do not match the configured space {:?}",
            log.space_signature,
            space.signature()
        )));
    }
    if log.fingerprint != cfg.fingerprint() {
        return Err(Error::Config(format!(
            "policy log was recorded under config {} but this run is {}",
            log.fingerprint,
            cfg.fingerprint()
        )));
    }
    if log.policy_arch != policy_spec(cfg, &splits.train)? {
        return Err(Error::Config("policy log architecture does not match the configured policy".into()));
    }
    if let Some(e) = (0..cfg.train.epochs).find(|e| log.snapshot(*e).is_err()) {
        return Err(Error::Config(format!(
            "policy log has no snapshot for epoch {e}; available epochs: {:?}",
            log.epochs()
        )));
    }
    run(cfg, splits, Mode::Replay { log }, opts, observer)
}

fn run(
    cfg: &ExperimentConfig,
    splits: &Splits,
    mut mode: Mode<'_>,
    opts: &TrainOptions,
    observer: &mut dyn Observer,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let t = &cfg.train;
    let fingerprint = cfg.fingerprint();
    let streams = Streams::new(cfg.seed);
    let space = build_space(cfg.policy.space);
    let train_set = &splits.train;
    let test_set = match cfg.eval.test_limit {
        Some(n) if n < splits.test.len() => Dataset {
            images: splits.test.images[..n].to_vec(),
            labels: splits.test.labels[..n].to_vec(),
            classes: splits.test.classes,
        },
        _ => splits.test.clone(),
    };
    let (mut target, tspec) = initial_target(cfg, train_set)?;
    let pspec = policy_spec(cfg, train_set)?;
    let mut topt = Sgd::new(&target, t.lr, t.momentum, t.weight_decay);
    let mut policy = match mode {
        Mode::Plain => None,
        _ => Some(build_policy(&pspec, &space, &streams)),
    };
    let mut popt = policy
        .as_ref()
        .map(|p| Sgd::for_params(&p.params(), cfg.policy.lr, cfg.policy.momentum, cfg.policy.weight_decay));
    let pg = cfg.pg();

    let mut best_target = target.clone();
    let mut best_epoch = 0;
    let mut best_robust = f64::NEG_INFINITY;
    let mut counters = Counters::default();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut global_iter = 0usize;
    let mut start_epoch = 0;

    if opts.resume {
        let dir = opts
            .state_dir
            .as_ref()
            .ok_or_else(|| Error::Config("resume requested without a state directory".into()))?;
        let path = dir.join(STATE_FILE);
        if path.exists() {
            let ck = Checkpoint::load(&path)?;
            ck.expect_kind("train_state", &path)?;
            if ck.header.fingerprint != fingerprint {
                return Err(Error::Checkpoint {
                    path,
                    msg: format!("state fingerprint {} does not match config {fingerprint}", ck.header.fingerprint),
                });
            }
            let extra: StateExtra = serde_json::from_value(ck.header.extra.clone()).map_err(|e| Error::Checkpoint {
                path: path.clone(),
                msg: format!("bad state header: {e}"),
            })?;
            let blob = |name: &str| {
                ck.blob(name).ok_or_else(|| Error::Checkpoint {
                    path: path.clone(),
                    msg: format!("missing blob {name}"),
                })
            };
            target.load_flat(blob("target")?)?;
            topt.load_velocity_flat(blob("target_velocity")?)?;
            best_target.load_flat(blob("best_target")?)?;
            if let (Some(p), Some(o)) = (policy.as_mut(), popt.as_mut()) {
                p.load_flat(blob("policy")?)?;
                o.load_velocity_flat(blob("policy_velocity")?)?;
            }
            if let Mode::Live { log, .. } = &mut mode {
                let mut saved = PolicyCheckpointLog::load(&dir.join(LOG_FILE))?;
                saved.truncate_after(extra.epochs_done.saturating_sub(1));
                *log = saved;
            }
            start_epoch = extra.epochs_done;
            global_iter = extra.global_iter;
            best_epoch = extra.best_epoch;
            best_robust = extra.best_robust_acc;
            counters = extra.counters;
            metrics = extra.metrics;
            metrics.truncate(start_epoch);
        }
    }

    for epoch in start_epoch..t.epochs {
        let lr = lr_at(t.lr, &t.lr_milestones, t.lr_decay, epoch);
        topt.lr = lr;
        let eps = eps_at(t.at_attack.epsilon, t.eps_warmup_epochs, epoch);
        let at_attack = t.at_attack.with_epsilon(eps);
        let vul_attack = t.vul_attack.with_epsilon(eps_at(t.vul_attack.epsilon, t.eps_warmup_epochs, epoch));
        let lambda = lambda_at(&t.lambda_schedule, epoch);
        let augmenting = !matches!(mode, Mode::Plain) && epoch >= t.warmup_epochs;
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut streams.stream(rng::DATA_ORDER, e));
        let mut aug_rng = streams.stream(rng::AUGMENTATION, e);
        let mut sampling_rng = streams.stream(rng::POLICY_SAMPLING, e);
        let mut attack_rng = streams.stream(rng::ATTACK_INIT, e);
        let mut pbatch_rng = streams.stream(rng::POLICY_BATCH, e);
        let mut hard_aug_rng = streams.stream(rng::HARDNESS_AUG, e);
        let mut hard_attack_rng = streams.stream(rng::HARDNESS_ATTACK, e);
        let mut pg_sampling_rng = streams.stream(rng::PG_SAMPLING, e);

        if let (Mode::Replay { log }, Some(p)) = (&mode, policy.as_mut()) {
            p.load_flat(log.snapshot(epoch)?)?;
        }

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut epoch_updates = 0usize;
        let mut epoch_skipped = 0usize;
        let mut breakdowns: Vec<PolicyLossBreakdown> = Vec::new();

        for chunk in order.chunks(t.batch_size) {
            global_iter += 1;
            if augmenting {
                counters.post_warmup_iters += 1;
                if let (Mode::Live { affinity, .. }, Some(p), Some(o)) = (&mode, policy.as_mut(), popt.as_mut()) {
                    if counters.post_warmup_iters % t.interval == 0 {
                        let bsize = cfg.policy.batch_size.min(train_set.len());
                        let idx = sample(&mut pbatch_rng, train_set.len(), bsize).into_vec();
                        let (pimgs, plabels) = batch_of(train_set, &idx);
                        let mut source = AdversarialHardness {
                            target: &target,
                            affinity_model: affinity,
                            space: &space,
                            attack: vul_attack,
                            lambda,
                            aug_rng: &mut hard_aug_rng,
                            attack_rng: &mut hard_attack_rng,
                        };
                        let b = policy_update_step(p, o, &space, &pimgs, &plabels, &mut source, &pg, &mut pg_sampling_rng)?;
                        counters.pg_computations += 1;
                        if b.skipped {
                            counters.policy_skipped += 1;
                            epoch_skipped += 1;
                            log::warn!("epoch {epoch} iter {global_iter}: policy update skipped on non-finite values");
                        } else {
                            counters.policy_updates += 1;
                            epoch_updates += 1;
                        }
                        observer.after_policy_update(epoch, &target, p, &b);
                        breakdowns.push(b);
                    }
                }
            }

            let (imgs, labels) = batch_of(train_set, chunk);
            let x = match (&policy, augmenting) {
                (Some(p), true) => {
                    let outs = p.forward(&imgs)?;
                    let mut augmented = Vec::with_capacity(imgs.len());
                    for (img, out) in imgs.iter().zip(&outs) {
                        let code = TrajectoryCode(
                            out.probs.iter().map(|pr| sample_index(pr, &mut sampling_rng)).collect(),
                        );
                        augmented.push(apply_trajectory(img, &code, &space, &mut aug_rng)?);
                    }
                    batch_tensor(&augmented)?
                }
                _ => batch_tensor(imgs)?,
            };
            let adv = pgd(&target, &x, &labels, &at_attack, &mut attack_rng)?;
            let (loss, ok) = sgd_step(&mut target, &mut topt, &adv, &labels, Some(t.clip_norm)).map_err(|e| {
                Error::Training(format!("epoch {epoch}, iteration {global_iter}, lr {lr}, epsilon {eps}: {e}"))
            })?;
            counters.target_steps += 1;
            loss_sum += loss * labels.len() as f64;
            correct += ok;
            seen += labels.len();
            observer.after_target_step(epoch, &target, policy.as_ref());
        }
        counters.updates_per_epoch.push(epoch_updates);

        let res = evaluate(
            &target,
            &test_set,
            &cfg.eval.attack,
            cfg.eval.batch_size,
            &mut streams.stream(rng::EVAL_ATTACK, e),
        )?;
        if res.robust_acc > best_robust {
            best_robust = res.robust_acc;
            best_epoch = epoch;
            best_target = target.clone();
        }
        if let (Mode::Live { log, .. }, Some(p)) = (&mut mode, policy.as_ref()) {
            log.push(epoch, p.to_flat())?;
        }
        let mean = |f: fn(&PolicyLossBreakdown) -> f64| {
            let vals: Vec<f64> = breakdowns.iter().filter(|b| !b.skipped).map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let row = MetricsRow {
            epoch,
            iter: global_iter,
            lr,
            lambda,
            epsilon: eps,
            train_loss: loss_sum / seen as f64,
            train_robust_acc: correct as f64 / seen as f64,
            clean_acc: res.clean_acc,
            robust_acc: res.robust_acc,
            best_robust_acc: best_robust,
            policy_updates: epoch_updates,
            policy_skipped: epoch_skipped,
            policy_surrogate: mean(|b| b.surrogate),
            policy_diversity: mean(|b| b.diversity),
            policy_total: mean(|b| b.total),
            mean_hardness: mean(|b| b.mean_hardness),
            mean_vulnerability: mean(|b| b.mean_vulnerability),
            mean_affinity: mean(|b| b.mean_affinity),
            fingerprint: fingerprint.clone(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} clean {:.4} robust {:.4} (best {:.4} @ {best_epoch}) updates {epoch_updates}",
            row.train_loss,
            row.clean_acc,
            row.robust_acc,
            best_robust
        );
        observer.epoch_end(&row, &target, policy.as_ref());
        metrics.push(row);

        if let Some(dir) = &opts.state_dir {
            let mut ck = Checkpoint::new("train_state", &fingerprint, epoch);
            ck.header.arch = Some(tspec.clone());
            ck.header.policy_arch = policy.as_ref().map(|_| pspec.clone());
            ck.header.space_signature = policy.as_ref().map(|_| space.signature());
            ck.push_blob("target", target.to_flat());
            ck.push_blob("target_velocity", topt.velocity_flat());
            ck.push_blob("best_target", best_target.to_flat());
            if let (Some(p), Some(o)) = (policy.as_ref(), popt.as_ref()) {
                ck.push_blob("policy", p.to_flat());
                ck.push_blob("policy_velocity", o.velocity_flat());
            }
            ck.header.extra = serde_json::to_value(StateExtra {
                epochs_done: epoch + 1,
                global_iter,
                best_epoch,
                best_robust_acc: best_robust,
                counters: counters.clone(),
                metrics: metrics.clone(),
            })
            .expect("state serialises");
            if let Mode::Live { log, .. } = &mode {
                log.save(&dir.join(LOG_FILE))?;
            }
            ck.save(&dir.join(STATE_FILE))?;
        }
    }

    let log = match mode {
        Mode::Live { log, .. } => Some(log),
        _ => None,
    };
    Ok(TrainOutput {
        best_target,
        last_target: target,
        best_epoch,
        best_robust_acc: best_robust,
        policy,
        log,
        metrics,
        counters,
    })
}

/// Writes the metrics table as CSV.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Input(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Input(format!("csv: {e}")))
}

pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("csv is utf-8")
}

/// Saves a model with its architecture and the config fingerprint.
pub fn save_model(path: &Path, kind: &str, model: &Network, spec: &ConvNetSpec, fingerprint: &str, epoch: usize) -> Result<()> {
    let mut ck = Checkpoint::new(kind, fingerprint, epoch);
    ck.header.arch = Some(spec.clone());
    ck.push_blob("params", model.to_flat());
    ck.save(path)
}

pub fn load_model(path: &Path, kind: &str) -> Result<(Network, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(kind, path)?;
    let err = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let spec = ck.header.arch.clone().ok_or_else(|| err("missing architecture"))?;
    let mut model = Network::build(&spec, &mut Streams::new(0).stream(rng::PARAM_INIT, 0));
    model.load_flat(ck.blob("params").ok_or_else(|| err("missing params blob"))?)?;
    Ok((model, ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_schedule_lookup() {
        let s = [(0, 0.4), (100, 0.2), (150, 0.1)];
        assert_eq!(lambda_at(&s, 120), 0.2);
        assert_eq!(lambda_at(&s, 100), 0.2);
        assert_eq!(lambda_at(&s, 99), 0.4);
        assert_eq!(lambda_at(&s, 150), 0.1);
        assert_eq!(lambda_at(&s, 199), 0.1);
        assert_eq!(lambda_at(&[(0, 0.3)], 77), 0.3);
        assert_eq!(lambda_at(&[(5, 0.3), (9, 0.1)], 2), 0.3);
    }

    #[test]
    fn epsilon_ramp_table() {
        let eps = 8.0 / 255.0;
        let table: Vec<f32> = (0..7).map(|e| eps_at(eps, 5, e)).collect();
        for e in 0..5 {
            assert!((table[e] - e as f32 / 5.0 * eps).abs() < 1e-9);
        }
        assert_eq!(table[5], eps);
        assert_eq!(table[6], eps);
        assert_eq!(eps_at(eps, 0, 0), eps);
    }

    #[test]
    fn lr_milestones() {
        assert_eq!(lr_at(0.1, &[100, 150], 0.1, 99), 0.1);
        assert!((lr_at(0.1, &[100, 150], 0.1, 100) - 0.01).abs() < 1e-9);
        assert!((lr_at(0.1, &[100, 150], 0.1, 150) - 0.001).abs() < 1e-9);
    }
}
