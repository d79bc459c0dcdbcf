//! Training runner built around ten fixed dispatch points.
//!
//! The runner itself only walks the workflow and forwards the model;
//! everything else (logging, evaluation) attaches as hooks. Hooks fire in
//! (priority, registration order), lower priority first. Every dispatch is
//! appended to an event log, whether or not any hook is registered, so a
//! run leaves a complete trace of the loop structure.
//!
//! The learning rate follows a step schedule with optional linear warmup
//! and is written into the runner state before each training epoch and
//! each training iteration. Epochs are counted from 1 across the whole
//! workflow, validation epochs included; the iteration counter only
//! advances during training.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::EvalResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPoint {
    BeforeRun,
    BeforeTrainEpoch,
    BeforeTrainIter,
    AfterTrainIter,
    AfterTrainEpoch,
    BeforeValEpoch,
    BeforeValIter,
    AfterValIter,
    AfterValEpoch,
    AfterRun,
}

/// Every dispatch point, in the order they first occur in a train+val run.
pub const HOOK_POINTS: [HookPoint; 10] = [
    HookPoint::BeforeRun,
    HookPoint::BeforeTrainEpoch,
    HookPoint::BeforeTrainIter,
    HookPoint::AfterTrainIter,
    HookPoint::AfterTrainEpoch,
    HookPoint::BeforeValEpoch,
    HookPoint::BeforeValIter,
    HookPoint::AfterValIter,
    HookPoint::AfterValEpoch,
    HookPoint::AfterRun,
];

impl HookPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            HookPoint::BeforeRun => "before_run",
            HookPoint::BeforeTrainEpoch => "before_train_epoch",
            HookPoint::BeforeTrainIter => "before_train_iter",
            HookPoint::AfterTrainIter => "after_train_iter",
            HookPoint::AfterTrainEpoch => "after_train_epoch",
            HookPoint::BeforeValEpoch => "before_val_epoch",
            HookPoint::BeforeValIter => "before_val_iter",
            HookPoint::AfterValIter => "after_val_iter",
            HookPoint::AfterValEpoch => "after_val_epoch",
            HookPoint::AfterRun => "after_run",
        }
    }

    fn is_iter_point(self) -> bool {
        matches!(
            self,
            HookPoint::BeforeTrainIter
                | HookPoint::AfterTrainIter
                | HookPoint::BeforeValIter
                | HookPoint::AfterValIter
        )
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Val,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Val => "val",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PipelineError {
    #[error("a hook named {name:?} is already registered")]
    DuplicateHook { name: String },
    #[error("hook {hook:?} failed at {point}: {message}")]
    HookFailed {
        hook: String,
        point: HookPoint,
        message: String,
    },
    #[error("{phase} iteration failed at epoch {epoch}, iter {iter}: {message}")]
    IterFailed {
        phase: Phase,
        epoch: usize,
        iter: usize,
        message: String,
    },
    #[error("workflow is empty")]
    EmptyWorkflow,
    #[error("lr schedule steps must be strictly increasing, got {steps:?}")]
    BadSchedule { steps: Vec<usize> },
}

/// Linear warmup: the lr ramps from `start_factor` times the scheduled
/// value up to the full value over the first `iters` iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub iters: usize,
    pub start_factor: f64,
}

/// Step decay schedule over epochs, counted from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub steps: Vec<usize>,
    pub factor: f64,
    pub warmup: Option<Warmup>,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PipelineError::BadSchedule {
                steps: self.steps.clone(),
            });
        }
        Ok(())
    }

    /// Learning rate for a given epoch and global training iteration.
    ///
    /// Each schedule step at or before the epoch applies one decay factor.
    /// During warmup the decayed value is scaled by
    /// `start + (1 - start) * iter / iters`.
    pub fn lr_at(&self, epoch: usize, iter: usize) -> f64 {
        let decays = self.steps.iter().filter(|&&s| epoch >= s).count();
        let lr = self.base_lr * self.factor.powi(decays as i32);
        if let Some(w) = &self.warmup {
            if w.iters > 0 && iter < w.iters {
                let frac = iter as f64 / w.iters as f64;
                return lr * (w.start_factor + (1.0 - w.start_factor) * frac);
            }
        }
        lr
    }
}

/// Mutable state threaded through every hook dispatch.
#[derive(Debug, Clone)]
pub struct RunnerState {
    /// Epochs completed or in progress, counted from 1 across train and
    /// val phases alike.
    pub epoch: usize,
    /// Completed training iterations.
    pub iter: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub workflow: Vec<(Phase, usize)>,
    pub event_log: Vec<HookPoint>,
    pub eval_records: Vec<(usize, EvalResult)>,
    pub last_loss: Option<f64>,
    pub last_val_loss: Option<f64>,
}

/// A named, prioritized callback. Lower priority fires earlier; equal
/// priorities fire in registration order. `on_event` is called at every
/// dispatch point and decides internally which points it cares about.
pub trait Hook {
    fn name(&self) -> &str;
    fn priority(&self) -> i32 {
        50
    }
    fn on_event(&mut self, point: HookPoint, state: &mut RunnerState) -> Result<(), String>;
}

/// The model and data bundle the runner drives.
pub trait TrainLoop {
    fn train_batches(&self) -> usize;
    fn val_batches(&self) -> usize;
    fn train_iter(&mut self, state: &RunnerState, batch: usize) -> Result<f64, String>;
    fn val_iter(&mut self, state: &RunnerState, batch: usize) -> Result<f64, String>;
}

pub struct Runner {
    hooks: Vec<Box<dyn Hook>>,
    order: Vec<usize>,
    schedule: LrSchedule,
    workflow: Vec<(Phase, usize)>,
    max_epochs: usize,
}

impl Runner {
    pub fn new(
        schedule: LrSchedule,
        workflow: Vec<(Phase, usize)>,
        max_epochs: usize,
    ) -> Result<Self, PipelineError> {
        if workflow.is_empty() {
            return Err(PipelineError::EmptyWorkflow);
        }
        schedule.validate()?;
        Ok(Self {
            hooks: Vec::new(),
            order: Vec::new(),
            schedule,
            workflow,
            max_epochs,
        })
    }

    pub fn register(&mut self, hook: Box<dyn Hook>) -> Result<(), PipelineError> {
        if let Some(existing) = self.hooks.iter().find(|h| h.name() == hook.name()) {
            return Err(PipelineError::DuplicateHook {
                name: existing.name().to_owned(),
            });
        }
        self.hooks.push(hook);
        let mut order: Vec<usize> = (0..self.hooks.len()).collect();
        order.sort_by_key(|&i| (self.hooks[i].priority(), i));
        self.order = order;
        Ok(())
    }

    fn dispatch(&mut self, point: HookPoint, state: &mut RunnerState) -> Result<(), PipelineError> {
        state.event_log.push(point);
        for i in 0..self.order.len() {
            let idx = self.order[i];
            if let Err(message) = self.hooks[idx].on_event(point, state) {
                return Err(PipelineError::HookFailed {
                    hook: self.hooks[idx].name().to_owned(),
                    point,
                    message,
                });
            }
        }
        Ok(())
    }

    /// Run the whole workflow once, returning the final state.
    pub fn run(&mut self, bundle: &mut dyn TrainLoop) -> Result<RunnerState, PipelineError> {
        let workflow = self.workflow.clone();
        let mut state = RunnerState {
            epoch: 0,
            iter: 0,
            lr: self.schedule.lr_at(1, 0),
            max_epochs: self.max_epochs,
            workflow: workflow.clone(),
            event_log: Vec::new(),
            eval_records: Vec::new(),
            last_loss: None,
            last_val_loss: None,
        };
        self.dispatch(HookPoint::BeforeRun, &mut state)?;
        for &(phase, count) in &workflow {
            for _ in 0..count {
                state.epoch += 1;
                match phase {
                    Phase::Train => {
                        state.lr = self.schedule.lr_at(state.epoch, state.iter);
                        self.dispatch(HookPoint::BeforeTrainEpoch, &mut state)?;
                        for batch in 0..bundle.train_batches() {
                            state.lr = self.schedule.lr_at(state.epoch, state.iter);
                            self.dispatch(HookPoint::BeforeTrainIter, &mut state)?;
                            let loss = bundle.train_iter(&state, batch).map_err(|message| {
                                PipelineError::IterFailed {
                                    phase,
                                    epoch: state.epoch,
                                    iter: state.iter,
                                    message,
                                }
                            })?;
                            state.last_loss = Some(loss);
                            state.iter += 1;
                            self.dispatch(HookPoint::AfterTrainIter, &mut state)?;
                        }
                        self.dispatch(HookPoint::AfterTrainEpoch, &mut state)?;
                    }
                    Phase::Val => {
                        self.dispatch(HookPoint::BeforeValEpoch, &mut state)?;
                        for batch in 0..bundle.val_batches() {
                            self.dispatch(HookPoint::BeforeValIter, &mut state)?;
                            let loss = bundle.val_iter(&state, batch).map_err(|message| {
                                PipelineError::IterFailed {
                                    phase,
                                    epoch: state.epoch,
                                    iter: state.iter,
                                    message,
                                }
                            })?;
                            state.last_val_loss = Some(loss);
                            self.dispatch(HookPoint::AfterValIter, &mut state)?;
                        }
                        self.dispatch(HookPoint::AfterValEpoch, &mut state)?;
                    }
                }
            }
        }
        self.dispatch(HookPoint::AfterRun, &mut state)?;
        Ok(state)
    }
}

/// Runs an evaluator after every n-th training epoch and records the
/// result in the runner state.
pub struct EvalHook<F> {
    every_n_epochs: usize,
    priority: i32,
    evaluator: F,
}

impl<F> EvalHook<F>
where
    F: FnMut(&RunnerState) -> Result<EvalResult, String>,
{
    pub fn new(every_n_epochs: usize, evaluator: F) -> Self {
        assert!(every_n_epochs >= 1, "eval interval must be at least 1");
        Self {
            every_n_epochs,
            priority: 50,
            evaluator,
        }
    }

    pub fn with_priority(mut self, priority: i32) -> Self {
        self.priority = priority;
        self
    }
}

impl<F> Hook for EvalHook<F>
where
    F: FnMut(&RunnerState) -> Result<EvalResult, String>,
{
    fn name(&self) -> &str {
        "eval"
    }

    fn priority(&self) -> i32 {
        self.priority
    }

    fn on_event(&mut self, point: HookPoint, state: &mut RunnerState) -> Result<(), String> {
        if point == HookPoint::AfterTrainEpoch && state.epoch % self.every_n_epochs == 0 {
            let result = (self.evaluator)(&*state)?;
            state.eval_records.push((state.epoch, result));
        }
        Ok(())
    }
}

/// Appends one line per dispatch to a shared buffer. Iter-level points can
/// be thinned out with `every_n_iters`; epoch and run boundaries always
/// log.
pub struct LoggingHook {
    name: String,
    priority: i32,
    every_n_iters: usize,
    lines: Rc<RefCell<Vec<String>>>,
}

impl LoggingHook {
    pub fn new(name: impl Into<String>, priority: i32) -> Self {
        Self {
            name: name.into(),
            priority,
            every_n_iters: 1,
            lines: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn with_buffer(mut self, lines: Rc<RefCell<Vec<String>>>) -> Self {
        self.lines = lines;
        self
    }

    pub fn every_n_iters(mut self, n: usize) -> Self {
        assert!(n >= 1, "logging interval must be at least 1");
        self.every_n_iters = n;
        self
    }

    pub fn lines(&self) -> Rc<RefCell<Vec<String>>> {
        Rc::clone(&self.lines)
    }
}

impl Hook for LoggingHook {
    fn name(&self) -> &str {
        &self.name
    }

    fn priority(&self) -> i32 {
        self.priority
    }

    fn on_event(&mut self, point: HookPoint, state: &mut RunnerState) -> Result<(), String> {
        if point.is_iter_point() && state.iter % self.every_n_iters != 0 {
            return Ok(());
        }
        self.lines.borrow_mut().push(format!(
            "{} {} epoch={} iter={} lr={}",
            self.name, point, state.epoch, state.iter, state.lr
        ));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct CountingNet {
        train: usize,
        val: usize,
        train_calls: usize,
        val_calls: usize,
        fail_on_call: Option<usize>,
    }

    impl CountingNet {
        fn new(train: usize, val: usize) -> Self {
            Self {
                train,
                val,
                train_calls: 0,
                val_calls: 0,
                fail_on_call: None,
            }
        }
    }

    impl TrainLoop for CountingNet {
        fn train_batches(&self) -> usize {
            self.train
        }

        fn val_batches(&self) -> usize {
            self.val
        }

        fn train_iter(&mut self, _state: &RunnerState, _batch: usize) -> Result<f64, String> {
            if self.fail_on_call == Some(self.train_calls) {
                return Err("forward exploded".into());
            }
            self.train_calls += 1;
            Ok(0.5)
        }

        fn val_iter(&mut self, _state: &RunnerState, _batch: usize) -> Result<f64, String> {
            self.val_calls += 1;
            Ok(0.25)
        }
    }

    fn plain_schedule() -> LrSchedule {
        LrSchedule {
            base_lr: 0.02,
            steps: vec![],
            factor: 0.1,
            warmup: None,
        }
    }

    fn points(state: &RunnerState) -> Vec<&'static str> {
        state.event_log.iter().map(|p| p.as_str()).collect()
    }

    #[test]
    fn single_train_epoch_dispatch_sequence() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        let mut net = CountingNet::new(2, 0);
        let state = runner.run(&mut net).unwrap();
        assert_eq!(
            points(&state),
            vec![
                "before_run",
                "before_train_epoch",
                "before_train_iter",
                "after_train_iter",
                "before_train_iter",
                "after_train_iter",
                "after_train_epoch",
                "after_run",
            ]
        );
        assert_eq!(net.train_calls, 2);
    }

    #[test]
    fn val_events_follow_train_events() {
        let mut runner = Runner::new(
            plain_schedule(),
            vec![(Phase::Train, 1), (Phase::Val, 1)],
            1,
        )
        .unwrap();
        let mut net = CountingNet::new(1, 1);
        let state = runner.run(&mut net).unwrap();
        assert_eq!(
            points(&state),
            vec![
                "before_run",
                "before_train_epoch",
                "before_train_iter",
                "after_train_iter",
                "after_train_epoch",
                "before_val_epoch",
                "before_val_iter",
                "after_val_iter",
                "after_val_epoch",
                "after_run",
            ]
        );
        assert_eq!(net.val_calls, 1);
        assert_eq!(state.last_loss, Some(0.5));
        assert_eq!(state.last_val_loss, Some(0.25));
    }

    #[test]
    fn zero_batches_still_fire_epoch_events() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        let mut net = CountingNet::new(0, 0);
        let state = runner.run(&mut net).unwrap();
        assert_eq!(
            points(&state),
            vec!["before_run", "before_train_epoch", "after_train_epoch", "after_run"]
        );
    }

    #[test]
    fn counters_cover_all_workflow_epochs() {
        let mut runner = Runner::new(
            plain_schedule(),
            vec![(Phase::Train, 2), (Phase::Val, 1)],
            2,
        )
        .unwrap();
        let mut net = CountingNet::new(3, 3);
        let state = runner.run(&mut net).unwrap();
        assert_eq!(state.epoch, 3);
        assert_eq!(state.iter, 6);
        assert_eq!(net.train_calls, 6);
        assert_eq!(net.val_calls, 3);
    }

    #[test]
    fn lower_priority_fires_first() {
        let buffer = Rc::new(RefCell::new(Vec::new()));
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        runner
            .register(Box::new(
                LoggingHook::new("late", 50).with_buffer(Rc::clone(&buffer)),
            ))
            .unwrap();
        runner
            .register(Box::new(
                LoggingHook::new("early", 10).with_buffer(Rc::clone(&buffer)),
            ))
            .unwrap();
        let mut net = CountingNet::new(1, 0);
        runner.run(&mut net).unwrap();
        let lines = buffer.borrow();
        for pair in lines.chunks(2) {
            assert!(pair[0].starts_with("early "));
            assert!(pair[1].starts_with("late "));
        }
    }

    #[test]
    fn equal_priority_respects_registration_order() {
        let buffer = Rc::new(RefCell::new(Vec::new()));
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        for name in ["first", "second", "third"] {
            runner
                .register(Box::new(
                    LoggingHook::new(name, 50).with_buffer(Rc::clone(&buffer)),
                ))
                .unwrap();
        }
        let mut net = CountingNet::new(0, 0);
        runner.run(&mut net).unwrap();
        let lines = buffer.borrow();
        for trio in lines.chunks(3) {
            assert!(trio[0].starts_with("first "));
            assert!(trio[1].starts_with("second "));
            assert!(trio[2].starts_with("third "));
        }
    }

    #[test]
    fn duplicate_hook_name_is_rejected() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        runner.register(Box::new(LoggingHook::new("log", 50))).unwrap();
        let err = runner
            .register(Box::new(LoggingHook::new("log", 10)))
            .unwrap_err();
        assert_eq!(
            err,
            PipelineError::DuplicateHook {
                name: "log".into()
            }
        );
    }

    #[test]
    fn empty_workflow_is_rejected() {
        let err = match Runner::new(plain_schedule(), vec![], 1) {
            Err(e) => e,
            Ok(_) => panic!("empty workflow accepted"),
        };
        assert_eq!(err, PipelineError::EmptyWorkflow);
    }

    struct FailingHook;

    impl Hook for FailingHook {
        fn name(&self) -> &str {
            "bomb"
        }

        fn on_event(&mut self, point: HookPoint, _state: &mut RunnerState) -> Result<(), String> {
            if point == HookPoint::BeforeTrainIter {
                Err("boom".into())
            } else {
                Ok(())
            }
        }
    }

    #[test]
    fn hook_failure_aborts_with_context() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        runner.register(Box::new(FailingHook)).unwrap();
        let mut net = CountingNet::new(2, 0);
        let err = runner.run(&mut net).unwrap_err();
        assert_eq!(
            err,
            PipelineError::HookFailed {
                hook: "bomb".into(),
                point: HookPoint::BeforeTrainIter,
                message: "boom".into(),
            }
        );
        assert_eq!(net.train_calls, 0);
    }

    #[test]
    fn iteration_failure_aborts_with_context() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        let mut net = CountingNet::new(3, 0);
        net.fail_on_call = Some(1);
        let err = runner.run(&mut net).unwrap_err();
        assert_eq!(
            err,
            PipelineError::IterFailed {
                phase: Phase::Train,
                epoch: 1,
                iter: 1,
                message: "forward exploded".into(),
            }
        );
    }

    #[test]
    fn step_schedule_decays_at_each_listed_epoch() {
        let sched = LrSchedule {
            base_lr: 0.02,
            steps: vec![8, 11],
            factor: 0.1,
            warmup: None,
        };
        assert!((sched.lr_at(1, 1000) - 0.02).abs() < 1e-15);
        assert!((sched.lr_at(7, 1000) - 0.02).abs() < 1e-15);
        assert!((sched.lr_at(9, 1000) - 0.002).abs() < 1e-15);
        assert!((sched.lr_at(11, 1000) - 0.0002).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramps_linearly_from_the_start_factor() {
        let sched = LrSchedule {
            base_lr: 0.02,
            steps: vec![],
            factor: 0.1,
            warmup: Some(Warmup {
                iters: 500,
                start_factor: 1.0 / 3.0,
            }),
        };
        assert!((sched.lr_at(1, 0) - 0.02 / 3.0).abs() < 1e-15);
        let mid = 0.02 * (1.0 / 3.0 + (2.0 / 3.0) * 0.5);
        assert!((sched.lr_at(1, 250) - mid).abs() < 1e-15);
        assert!((sched.lr_at(1, 500) - 0.02).abs() < 1e-15);
        assert!((sched.lr_at(1, 5000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn non_increasing_steps_are_rejected() {
        let sched = LrSchedule {
            base_lr: 0.02,
            steps: vec![8, 8],
            factor: 0.1,
            warmup: None,
        };
        assert!(matches!(
            sched.validate(),
            Err(PipelineError::BadSchedule { .. })
        ));
    }

    #[test]
    fn runner_applies_the_schedule_per_epoch() {
        let sched = LrSchedule {
            base_lr: 0.02,
            steps: vec![2],
            factor: 0.1,
            warmup: None,
        };
        let buffer = Rc::new(RefCell::new(Vec::new()));
        let mut runner = Runner::new(sched, vec![(Phase::Train, 3)], 3).unwrap();
        runner
            .register(Box::new(
                LoggingHook::new("log", 50).with_buffer(Rc::clone(&buffer)),
            ))
            .unwrap();
        let mut net = CountingNet::new(1, 0);
        runner.run(&mut net).unwrap();
        let lines = buffer.borrow();
        let lr_of = |needle: &str| -> Vec<String> {
            lines
                .iter()
                .filter(|l| l.contains(needle))
                .map(|l| l.rsplit("lr=").next().unwrap().to_owned())
                .collect()
        };
        let epochs = lr_of(" before_train_epoch ");
        assert_eq!(epochs, vec!["0.02", "0.002", "0.002"]);
    }

    fn fixed_eval() -> EvalResult {
        EvalResult {
            ap_per_threshold: vec![(0.5, 0.75)],
            map: 0.75,
            ar_at_k: None,
        }
    }

    #[test]
    fn eval_hook_records_every_epoch() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 3)], 3).unwrap();
        runner
            .register(Box::new(EvalHook::new(1, |_state: &RunnerState| Ok(fixed_eval()))))
            .unwrap();
        let mut net = CountingNet::new(1, 0);
        let state = runner.run(&mut net).unwrap();
        assert_eq!(state.eval_records.len(), 3);
        assert_eq!(
            state.eval_records.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(state.eval_records[0].1, fixed_eval());
    }

    #[test]
    fn eval_hook_respects_the_interval() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 3)], 3).unwrap();
        runner
            .register(Box::new(EvalHook::new(2, |_state: &RunnerState| Ok(fixed_eval()))))
            .unwrap();
        let mut net = CountingNet::new(1, 0);
        let state = runner.run(&mut net).unwrap();
        assert_eq!(
            state.eval_records.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![2]
        );
    }

    #[test]
    fn evaluator_failure_propagates_as_hook_failure() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        runner
            .register(Box::new(EvalHook::new(1, |_state: &RunnerState| {
                Err::<EvalResult, _>("no data".into())
            })))
            .unwrap();
        let mut net = CountingNet::new(1, 0);
        let err = runner.run(&mut net).unwrap_err();
        assert_eq!(
            err,
            PipelineError::HookFailed {
                hook: "eval".into(),
                point: HookPoint::AfterTrainEpoch,
                message: "no data".into(),
            }
        );
    }

    #[test]
    fn logging_interval_thins_iter_points_only() {
        let mut runner =
            Runner::new(plain_schedule(), vec![(Phase::Train, 1)], 1).unwrap();
        let hook = LoggingHook::new("log", 50).every_n_iters(2);
        let buffer = hook.lines();
        runner.register(Box::new(hook)).unwrap();
        let mut net = CountingNet::new(4, 0);
        runner.run(&mut net).unwrap();
        let lines = buffer.borrow();
        let iter_lines = lines
            .iter()
            .filter(|l| l.contains("train_iter"))
            .count();
        // Iters 0 and 2 pass the filter, for both before and after points.
        assert_eq!(iter_lines, 4);
        assert!(lines.iter().any(|l| l.contains("before_run")));
        assert!(lines.iter().any(|l| l.contains("after_run")));
    }
}
