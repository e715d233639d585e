use std::panic::{catch_unwind, AssertUnwindSafe};

use aroid::augspace::build_space;
use aroid::config::{Augmentation, ExperimentConfig};
use aroid::data::{ingest, Splits};
use aroid::pg_estimator::PolicyLossBreakdown;
use aroid::policy::PolicyModel;
use aroid::report::evaluate;
use aroid::rng::{self, Streams};
use aroid::trainer::{
    metrics_csv_string, policy_spec, policy_update_schedule, pretrain_affinity, train, train_transfer, MetricsRow,
    NoObserver, Observer, TrainOptions,
};
use aroid_nn::Network;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("desk").unwrap();
    for (k, v) in [
        ("data.source", "synthetic:3:40"),
        ("data.train_size", "40"),
        ("data.test_size", "20"),
        ("target.widths", "[4]"),
        ("policy.widths", "[4]"),
        ("policy.batch_size", "8"),
        ("affinity.max_epochs", "2"),
        ("train.epochs", "3"),
        ("train.batch_size", "10"),
        ("train.warmup_epochs", "1"),
        ("train.eps_warmup_epochs", "0"),
        ("train.interval", "2"),
        ("train.trajectories", "2"),
        ("train.lr_milestones", "[]"),
        ("train.lambda_schedule", "[[0, 0.4]]"),
        ("train.at_attack.steps", "2"),
        ("eval.attack.steps", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn splits(cfg: &ExperimentConfig) -> Splits {
    ingest(&cfg.data.source.parse().unwrap(), cfg.data.train_size, cfg.data.test_size, cfg.seed).unwrap()
}

fn run(cfg: &ExperimentConfig) -> (Splits, Network, aroid::trainer::TrainOutput) {
    let s = splits(cfg);
    let (aft, _) = pretrain_affinity(cfg, &s.train).unwrap();
    let out = train(cfg, &s, Some(&aft), &TrainOptions::default(), &mut NoObserver).unwrap();
    (s, aft, out)
}

#[test]
fn warmup_only_run_never_touches_the_policy() {
    let mut cfg = tiny();
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 2;
    let (s, _, out) = run(&cfg);
    assert_eq!(out.counters.pg_computations, 0);
    assert_eq!(out.counters.updates_per_epoch, vec![0, 0]);
    let fresh = PolicyModel::new(
        &policy_spec(&cfg, &s.train).unwrap(),
        &build_space(cfg.policy.space),
        &mut Streams::new(cfg.seed).stream(rng::PARAM_INIT, 1),
    );
    assert_eq!(out.policy.unwrap(), fresh);
    let log = out.log.unwrap();
    assert_eq!(log.snapshot(1).unwrap(), fresh.to_flat().as_slice());
}

#[test]
fn update_cadence_matches_the_schedule() {
    for (interval, epochs, expected) in [(2, 3, vec![0, 2, 2]), (3, 4, vec![0, 1, 1, 2])] {
        let mut cfg = tiny();
        cfg.train.interval = interval;
        cfg.train.epochs = epochs;
        let (_, _, out) = run(&cfg);
        assert_eq!(policy_update_schedule(&cfg.train, 4), expected);
        assert_eq!(out.counters.updates_per_epoch, expected);
        assert_eq!(out.counters.pg_computations, expected.iter().sum::<usize>());
        assert_eq!(out.counters.post_warmup_iters, 4 * (epochs - 1));
        assert_eq!(out.counters.target_steps, 4 * epochs);
        let rows: Vec<usize> = out.metrics.iter().map(|r| r.policy_updates).collect();
        assert_eq!(rows, expected);
    }
}

/// Checks that each model is left untouched by the other's update.
#[derive(Default)]
struct Isolation {
    target_after_step: Option<Vec<f32>>,
    policy_after_update: Option<Vec<f32>>,
    checked_updates: usize,
    checked_steps: usize,
}

impl Observer for Isolation {
    fn after_target_step(&mut self, _epoch: usize, target: &Network, policy: Option<&PolicyModel>) {
        if let (Some(before), Some(p)) = (self.policy_after_update.take(), policy) {
            assert_eq!(before, p.to_flat(), "target step changed the policy");
            self.checked_steps += 1;
        }
        self.target_after_step = Some(target.to_flat());
    }

    fn after_policy_update(&mut self, _epoch: usize, target: &Network, policy: &PolicyModel, _b: &PolicyLossBreakdown) {
        let before = self.target_after_step.as_ref().expect("a target step precedes every policy update");
        assert_eq!(before, &target.to_flat(), "policy update changed the target");
        self.policy_after_update = Some(policy.to_flat());
        self.checked_updates += 1;
    }
}

#[test]
fn policy_and_target_updates_do_not_leak() {
    let cfg = tiny();
    let s = splits(&cfg);
    let (aft, _) = pretrain_affinity(&cfg, &s.train).unwrap();
    let aft_before = aft.to_flat();
    let mut obs = Isolation::default();
    let out = train(&cfg, &s, Some(&aft), &TrainOptions::default(), &mut obs).unwrap();
    assert_eq!(obs.checked_updates, out.counters.pg_computations);
    assert_eq!(obs.checked_steps, out.counters.pg_computations);
    assert!(obs.checked_updates > 0);
    assert_eq!(aft.to_flat(), aft_before);
}

#[test]
fn best_checkpoint_is_the_maximum_robust_epoch() {
    let cfg = tiny();
    let (s, _, out) = run(&cfg);
    let robust: Vec<f64> = out.metrics.iter().map(|r| r.robust_acc).collect();
    let max = robust.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_robust_acc, max);
    assert_eq!(out.best_epoch, robust.iter().position(|&r| r == max).unwrap());
    let again = evaluate(
        &out.best_target,
        &s.test,
        &cfg.eval.attack,
        cfg.eval.batch_size,
        &mut Streams::new(cfg.seed).stream(rng::EVAL_ATTACK, out.best_epoch as u64),
    )
    .unwrap();
    assert_eq!(again.robust_acc, max);
    let running: Vec<f64> = out.metrics.iter().map(|r| r.best_robust_acc).collect();
    assert!(running.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let cfg = tiny();
    let a = run(&cfg).2;
    let b = run(&cfg).2;
    assert_eq!(metrics_csv_string(&a.metrics), metrics_csv_string(&b.metrics));
    assert_eq!(a.last_target, b.last_target);
    let mut other = tiny();
    other.seed = 1;
    assert_ne!(metrics_csv_string(&run(&other).2.metrics), metrics_csv_string(&a.metrics));
}

struct SnapshotCheck<'a> {
    log: &'a aroid::checkpoint::PolicyCheckpointLog,
    steps: usize,
}

impl Observer for SnapshotCheck<'_> {
    fn after_target_step(&mut self, epoch: usize, _target: &Network, policy: Option<&PolicyModel>) {
        assert_eq!(policy.unwrap().to_flat().as_slice(), self.log.snapshot(epoch).unwrap());
        self.steps += 1;
    }
}

#[test]
fn transfer_replays_snapshots_without_policy_gradients() {
    let cfg = tiny();
    let (s, _, live) = run(&cfg);
    let log = live.log.unwrap();
    let mut obs = SnapshotCheck { log: &log, steps: 0 };
    let replay = train_transfer(&cfg, &s, &log, &TrainOptions::default(), &mut obs).unwrap();
    assert_eq!(replay.counters.pg_computations, 0);
    assert_eq!(replay.counters.policy_updates, 0);
    assert_eq!(obs.steps, replay.counters.target_steps);
    assert!(replay.log.is_none());

    let mut moved = cfg.clone();
    moved.seed = 5;
    let err = train_transfer(&moved, &s, &log, &TrainOptions::default(), &mut NoObserver).unwrap_err();
    assert!(err.to_string().contains("recorded under config"), "{err}");
    let mut longer = cfg.clone();
    longer.train.epochs = 4;
    assert!(train_transfer(&longer, &s, &log, &TrainOptions::default(), &mut NoObserver).is_err());
}

struct Crash(usize);

impl Observer for Crash {
    fn epoch_end(&mut self, row: &MetricsRow, _target: &Network, _policy: Option<&PolicyModel>) {
        if row.epoch == self.0 {
            panic!("simulated interruption");
        }
    }
}

#[test]
fn resume_continues_an_interrupted_run_exactly() {
    let cfg = tiny();
    let s = splits(&cfg);
    let (aft, _) = pretrain_affinity(&cfg, &s.train).unwrap();
    let full = train(&cfg, &s, Some(&aft), &TrainOptions::default(), &mut NoObserver).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        state_dir: Some(dir.path().to_path_buf()),
        resume: false,
    };
    let crashed = catch_unwind(AssertUnwindSafe(|| train(&cfg, &s, Some(&aft), &opts, &mut Crash(2))));
    assert!(crashed.is_err());
    let resumed = train(
        &cfg,
        &s,
        Some(&aft),
        &TrainOptions {
            resume: true,
            ..opts
        },
        &mut NoObserver,
    )
    .unwrap();
    assert_eq!(metrics_csv_string(&resumed.metrics), metrics_csv_string(&full.metrics));
    assert_eq!(resumed.counters, full.counters);
    assert_eq!(resumed.last_target, full.last_target);
    assert_eq!(resumed.log.unwrap().epochs(), vec![0, 1, 2]);
}

#[test]
fn plain_training_has_no_policy() {
    let mut cfg = tiny();
    cfg.train.augmentation = Augmentation::None;
    let s = splits(&cfg);
    let out = train(&cfg, &s, None, &TrainOptions::default(), &mut NoObserver).unwrap();
    assert!(out.policy.is_none() && out.log.is_none());
    assert_eq!(out.counters.pg_computations, 0);
    cfg.train.augmentation = Augmentation::Aroid;
    assert!(train(&cfg, &s, None, &TrainOptions::default(), &mut NoObserver).is_err());
}

#[test]
fn affinity_stops_at_the_target_accuracy() {
    let mut cfg = tiny();
    cfg.affinity.max_epochs = 4;
    let s = splits(&cfg);
    let (_, full) = pretrain_affinity(&cfg, &s.train).unwrap();
    assert_eq!(full.history.len(), full.epochs_run);
    assert!(full.history.iter().enumerate().all(|(i, h)| h.epoch == i));
    let best = full.history.iter().map(|h| h.train_accuracy).fold(0.0, f64::max);
    assert!(full.train_accuracy >= best);

    cfg.affinity.target_accuracy = 0.0;
    let (_, quick) = pretrain_affinity(&cfg, &s.train).unwrap();
    assert!(quick.early_stopped);
    assert_eq!(quick.epochs_run, 1);
    assert_eq!(quick.history.len(), 1);
}
