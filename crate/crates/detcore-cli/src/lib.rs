//! Command implementations behind the `detcore` binary: config-driven
//! training on the synthetic detection task, loss and anchor-setting
//! sweeps, brute-force oracle suites, and micro-benchmarks.
//!
//! Every command except `bench` is deterministic for a given seed: the
//! dataset, sampling, and optimizer draw from seeded generators, outputs
//! carry no timestamps, and sweep cells use independent per-cell seeds so
//! parallel execution cannot reorder results.

pub mod report;

use std::cell::RefCell;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use detcore::anchor::{base_anchors, grid_anchors, AllowedBorder, AnchorGenSpec, NegPosUb};
use detcore::config::{Config, ConfigError};
use detcore::geom::{giou, iou, iou_matrix, BBox};
use detcore::losses::{LossKind, LossSpec};
use detcore::metrics::{coco_thresholds, eval_ar, eval_map, EvalResult};
use detcore::norm::{GroupNormSpec, NormState};
use detcore::oracle::{run_grad_suite, run_iou_suite, run_map_suite, run_nms_suite};
use detcore::pipeline::{EvalHook, Hook, LoggingHook, Runner, RunnerState, TrainLoop};
use detcore::postproc::{nms, Detection};
use detcore::refdet::{
    gen_dataset, prepare_batch, resize_image, AssignCfg, InferCfg, NormLayer, ScalePolicy, SgdCfg,
    SgdState, SynthImage, TinyDetector,
};
use report::ReportRow;

/// Failures split by exit code: usage and config problems exit 2,
/// runtime failures exit 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn build_norm(cfg: &Config) -> Result<NormLayer, CliError> {
    let channels = cfg.model.stride * cfg.model.stride + 1;
    match cfg.norm.kind.as_str() {
        "none" => Ok(NormLayer::None),
        "bn" => {
            let mut state = NormState::new(channels);
            if let Some(eval) = cfg.norm.eval {
                state.eval = eval;
            }
            if let Some(rg) = cfg.norm.requires_grad {
                state.requires_grad = rg;
            }
            Ok(NormLayer::Bn(state))
        }
        "frozen_bn" => Ok(NormLayer::Bn(NormState::frozen(channels))),
        "gn" => {
            let groups = cfg.norm.groups.unwrap_or(5);
            if channels % groups != 0 {
                return Err(CliError::Usage(format!(
                    "norm.groups {groups} must divide the {channels} feature channels"
                )));
            }
            Ok(NormLayer::Gn(GroupNormSpec::new(groups, channels)))
        }
        other => Err(CliError::Usage(format!("unknown norm type {other:?}"))),
    }
}

fn scale_policy(cfg: &Config) -> ScalePolicy {
    let sp = &cfg.scale_policy;
    match sp.mode.as_str() {
        "range" => ScalePolicy::Range {
            long_edge: sp.long_edge,
            min: sp.short_edges[0] as i64,
            max: sp.short_edges[1] as i64,
        },
        _ => ScalePolicy::Value {
            long_edge: sp.long_edge,
            short_edges: sp.short_edges.clone(),
        },
    }
}

/// Largest multiple-of-stride resize at or near the requested factor, so
/// pooled grids stay aligned after rescaling.
fn snap_factor(width: usize, stride: usize, factor: f64) -> f64 {
    let target = (width as f64 * factor / stride as f64).round().max(1.0);
    target * stride as f64 / width as f64
}

struct Batching {
    total: usize,
    batch_size: usize,
}

impl Batching {
    fn count(&self) -> usize {
        self.total.div_ceil(self.batch_size)
    }

    fn slice(&self, batch: usize) -> std::ops::Range<usize> {
        let start = batch * self.batch_size;
        start..(start + self.batch_size).min(self.total)
    }
}

/// The detector plus data that the runner drives through one workflow.
struct DetectorBundle {
    det: Rc<RefCell<TinyDetector>>,
    train: Vec<SynthImage>,
    val: Rc<Vec<SynthImage>>,
    train_batching: Batching,
    val_batching: Batching,
    assign: AssignCfg,
    sampler: detcore::anchor::SamplerSpec,
    border: AllowedBorder,
    momentum: f64,
    weight_decay: f64,
    scale: ScalePolicy,
    opt: SgdState,
    rng: ChaCha8Rng,
}

impl TrainLoop for DetectorBundle {
    fn train_batches(&self) -> usize {
        self.train_batching.count()
    }

    fn val_batches(&self) -> usize {
        self.val_batching.count()
    }

    fn train_iter(&mut self, state: &RunnerState, batch: usize) -> Result<f64, String> {
        let stride = self.det.borrow().stride;
        let (long, short) = self.scale.sample(&mut self.rng);
        let images: Vec<SynthImage> = self.train[self.train_batching.slice(batch)]
            .iter()
            .map(|img| {
                let factor = detcore::refdet::scale::resize_factor(
                    img.width as f64,
                    img.height as f64,
                    long,
                    short,
                );
                resize_image(img, snap_factor(img.width, stride, factor))
            })
            .collect();
        let refs: Vec<&SynthImage> = images.iter().collect();
        let det = &mut *self.det.borrow_mut();
        let samples = prepare_batch(
            &refs,
            &det.gen.clone(),
            &self.assign,
            &self.sampler,
            self.border,
            &mut self.rng,
        )
        .map_err(|e| e.to_string())?;
        let cfg = SgdCfg {
            lr: state.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        let out = det
            .train_step(&refs, &samples, &cfg, &mut self.opt)
            .map_err(|e| e.to_string())?;
        if !out.loss.is_finite() {
            return Err(format!("non-finite training loss {}", out.loss));
        }
        Ok(out.loss)
    }

    fn val_iter(&mut self, _state: &RunnerState, batch: usize) -> Result<f64, String> {
        let refs: Vec<&SynthImage> = self.val[self.val_batching.slice(batch)].iter().collect();
        let mut probe = self.det.borrow().clone();
        let samples = prepare_batch(
            &refs,
            &probe.gen.clone(),
            &self.assign,
            &self.sampler,
            self.border,
            &mut self.rng,
        )
        .map_err(|e| e.to_string())?;
        let (out, _) = probe.batch_loss(&refs, &samples).map_err(|e| e.to_string())?;
        Ok(out.loss)
    }
}

/// A finished training run: the model, the runner state, the held-out
/// images, and the log lines the hooks produced.
struct TrainRun {
    det: Rc<RefCell<TinyDetector>>,
    val: Rc<Vec<SynthImage>>,
    state: RunnerState,
    log_lines: Vec<String>,
}

impl TrainRun {
    fn final_eval(&self) -> Option<&EvalResult> {
        self.state.eval_records.last().map(|(_, r)| r)
    }

    fn ap50(&self) -> f64 {
        self.final_eval()
            .and_then(|r| {
                r.ap_per_threshold
                    .iter()
                    .find(|(t, _)| (t - 0.5).abs() < 1e-12)
                    .map(|&(_, ap)| ap)
            })
            .unwrap_or(0.0)
    }
}

fn run_training(cfg: &Config, seed: u64) -> Result<TrainRun, CliError> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    let train = gen_dataset(
        cfg.data.n_train,
        cfg.data.img_size,
        cfg.data.max_objects,
        &mut data_rng,
    );
    let val = Rc::new(gen_dataset(
        cfg.data.n_val,
        cfg.data.img_size,
        cfg.data.max_objects,
        &mut data_rng,
    ));

    let det = Rc::new(RefCell::new(TinyDetector::new(
        cfg.model.stride,
        cfg.anchor_gen_spec(),
        cfg.effective_loss(),
        build_norm(cfg)?,
    )));

    let mut runner = Runner::new(
        cfg.lr_schedule_full(),
        cfg.workflow_or_default(),
        cfg.max_epochs,
    )
    .map_err(runtime)?;

    let infer_cfg = InferCfg {
        score_thr: cfg.model.score_thr,
        nms_iou: cfg.model.nms_iou,
    };
    let mut log_buffer = None;
    let mut have_eval = false;
    for hook in &cfg.hooks {
        match hook.kind.as_str() {
            "logging" => {
                let mut logging = LoggingHook::new("logging", hook.priority.unwrap_or(50));
                if let Some(n) = hook.every_n_iters {
                    logging = logging.every_n_iters(n);
                }
                log_buffer = Some(logging.lines());
                runner.register(Box::new(logging)).map_err(runtime)?;
            }
            "eval" => {
                have_eval = true;
                let eval = eval_hook(
                    hook.every_n_epochs.unwrap_or(1),
                    hook.priority.unwrap_or(50),
                    Rc::clone(&det),
                    Rc::clone(&val),
                    infer_cfg,
                );
                runner.register(Box::new(eval)).map_err(runtime)?;
            }
            other => return Err(CliError::Usage(format!("unknown hook type {other:?}"))),
        }
    }
    if !have_eval {
        let eval = eval_hook(1, 50, Rc::clone(&det), Rc::clone(&val), infer_cfg);
        runner.register(Box::new(eval)).map_err(runtime)?;
    }

    let mut bundle = DetectorBundle {
        det: Rc::clone(&det),
        train,
        val: Rc::clone(&val),
        train_batching: Batching {
            total: cfg.data.n_train,
            batch_size: cfg.data.batch_size,
        },
        val_batching: Batching {
            total: cfg.data.n_val,
            batch_size: cfg.data.batch_size,
        },
        assign: AssignCfg {
            pos_iou_thr: cfg.anchors.pos_iou_thr,
            neg_iou_thr: cfg.anchors.neg_iou_thr,
            min_pos_iou: cfg.anchors.min_pos_iou,
        },
        sampler: cfg.sampler_spec(),
        border: cfg.anchors.allowed_border,
        momentum: cfg.optimizer.momentum,
        weight_decay: cfg.optimizer.weight_decay,
        scale: scale_policy(cfg),
        opt: SgdState::default(),
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
    };

    let state = runner.run(&mut bundle).map_err(runtime)?;
    let log_lines = log_buffer.map(|b| b.borrow().clone()).unwrap_or_default();
    Ok(TrainRun {
        det,
        val,
        state,
        log_lines,
    })
}

fn eval_hook(
    every: usize,
    priority: i32,
    det: Rc<RefCell<TinyDetector>>,
    val: Rc<Vec<SynthImage>>,
    infer_cfg: InferCfg,
) -> impl Hook {
    EvalHook::new(every, move |_state: &RunnerState| {
        let mut det = det.borrow_mut();
        let mut dets = Vec::with_capacity(val.len());
        let mut gts = Vec::with_capacity(val.len());
        for img in val.iter() {
            dets.push(det.infer(img, &infer_cfg).map_err(|e| e.to_string())?);
            gts.push(img.annotations.clone());
        }
        Ok(eval_map(&dets, &gts, &coco_thresholds()))
    })
    .with_priority(priority)
}

#[derive(Serialize)]
struct NormDump {
    kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    running_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    running_var: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct WeightsFile<'a> {
    stride: usize,
    feat_dim: usize,
    cls_w: &'a [Vec<f64>],
    reg_w: &'a [Vec<f64>],
    norm: NormDump,
}

#[derive(Serialize)]
struct DetectionRecord {
    image_id: usize,
    bbox: [f64; 4],
    score: f64,
    category_id: usize,
}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    epochs: usize,
    iters: usize,
    final_lr: f64,
    last_loss: Option<f64>,
    ap50: f64,
    map: f64,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// Train on the synthetic task per the JSON config; write weights, the
/// event log, per-epoch evaluations, final detections, and a summary into
/// `out_dir`. Returns the final AP at IoU 0.5.
pub fn cmd_train(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<f64, CliError> {
    let cfg = Config::load(config_path)?;
    let seed = seed_override.unwrap_or(cfg.seed);
    let run = run_training(&cfg, seed)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    {
        let det = run.det.borrow();
        let norm = match &det.norm {
            NormLayer::None => NormDump {
                kind: "none",
                groups: None,
                gamma: None,
                beta: None,
                running_mean: None,
                running_var: None,
            },
            NormLayer::Bn(state) => NormDump {
                kind: if state.eval && !state.requires_grad {
                    "frozen_bn"
                } else {
                    "bn"
                },
                groups: None,
                gamma: Some(state.gamma.clone()),
                beta: Some(state.beta.clone()),
                running_mean: Some(state.running_mean.clone()),
                running_var: Some(state.running_var.clone()),
            },
            NormLayer::Gn(spec) => NormDump {
                kind: "gn",
                groups: Some(spec.num_groups),
                gamma: Some(spec.gamma.clone()),
                beta: Some(spec.beta.clone()),
                running_mean: None,
                running_var: None,
            },
        };
        write_json(
            &out_dir.join("weights.json"),
            &WeightsFile {
                stride: det.stride,
                feat_dim: det.feat_dim(),
                cls_w: &det.cls_w,
                reg_w: &det.reg_w,
                norm,
            },
        )?;
    }

    let events: Vec<&str> = run.state.event_log.iter().map(|p| p.as_str()).collect();
    write_json(&out_dir.join("events.json"), &events)?;

    for (epoch, result) in &run.state.eval_records {
        write_json(&out_dir.join(format!("eval_epoch_{epoch:03}.json")), result)?;
    }

    let infer_cfg = InferCfg {
        score_thr: cfg.model.score_thr,
        nms_iou: cfg.model.nms_iou,
    };
    let mut detections = Vec::new();
    {
        let mut det = run.det.borrow_mut();
        for img in run.val.iter() {
            for d in det.infer(img, &infer_cfg).map_err(runtime)? {
                detections.push(DetectionRecord {
                    image_id: img.id,
                    bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                    score: d.score,
                    category_id: d.class_id,
                });
            }
        }
    }
    write_json(&out_dir.join("detections.json"), &detections)?;

    let ap50 = run.ap50();
    let map = run.final_eval().map(|r| r.map).unwrap_or(0.0);
    write_json(
        &out_dir.join("summary.json"),
        &Summary {
            seed,
            epochs: run.state.epoch,
            iters: run.state.iter,
            final_lr: run.state.lr,
            last_loss: run.state.last_loss,
            ap50,
            map,
        },
    )?;

    std::fs::write(out_dir.join("log.txt"), run.log_lines.join("\n") + "\n")
        .map_err(|e| runtime(format!("cannot write log: {e}")))?;

    if !quiet {
        println!(
            "train: {} images, {} epochs, {} iters -> ap50 {:.4}, map {:.4}",
            cfg.data.n_train, run.state.epoch, run.state.iter, ap50, map
        );
    }
    Ok(ap50)
}

fn thread_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DETCORE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("DETCORE_THREADS must be a number, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(runtime)
}

fn format_weight(w: f64) -> String {
    if w.fract() == 0.0 {
        format!("{}", w as i64)
    } else {
        format!("{w}")
    }
}

/// Train one model per (loss, loss weight) cell and report AP at IoU 0.5
/// for each; a failed cell keeps its row with a NaN value.
pub fn cmd_grid_loss(
    config_path: &Path,
    out_dir: &Path,
    losses: Option<Vec<String>>,
    weights: Option<Vec<f64>>,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<Vec<ReportRow>, CliError> {
    let cfg = Config::load(config_path)?;
    let base_seed = seed_override.unwrap_or(cfg.seed);

    let kinds: Vec<LossKind> = match losses {
        None => LossKind::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                LossKind::from_name(n)
                    .ok_or_else(|| CliError::Usage(format!("unknown loss {n:?}")))
            })
            .collect::<Result<_, _>>()?,
    };
    let weights = weights.unwrap_or_else(|| vec![1.0, 2.0, 5.0, 10.0]);
    for &w in &weights {
        if !(w > 0.0 && w.is_finite()) {
            return Err(CliError::Usage(format!("loss weight must be positive, got {w}")));
        }
    }

    let mut cells: Vec<(usize, LossKind, f64)> = Vec::with_capacity(kinds.len() * weights.len());
    for &kind in &kinds {
        for &w in &weights {
            cells.push((cells.len(), kind, w));
        }
    }

    let pool = thread_pool()?;
    let results: Vec<f64> = pool.install(|| {
        use rayon::prelude::*;
        cells
            .par_iter()
            .map(|&(index, kind, w)| {
                let mut cell_cfg = cfg.clone();
                cell_cfg.loss = LossSpec::new(kind, w);
                match run_training(&cell_cfg, base_seed.wrapping_add(index as u64)) {
                    Ok(run) => run.ap50(),
                    Err(_) => f64::NAN,
                }
            })
            .collect()
    });

    let rows: Vec<ReportRow> = cells
        .iter()
        .zip(&results)
        .map(|(&(_, kind, w), &ap)| {
            ReportRow::new(kind.as_str(), format!("lw={}", format_weight(w)), ap)
        })
        .collect();

    std::fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    report::write_csv(&out_dir.join("grid_loss.csv"), &rows).map_err(runtime)?;
    if !quiet {
        print!("{}", report::render_table(&rows));
    }
    Ok(rows)
}

/// The six anchor-setting rows swept by the proposal study: smooth L1
/// beta, border slack, and the negative/positive sampling cap.
const RPN_ROWS: [(&str, f64, AllowedBorder, NegPosUb); 6] = [
    ("1/5", 0.2, AllowedBorder::Finite(0.0), NegPosUb::Unbounded),
    ("1/9", 1.0 / 9.0, AllowedBorder::Finite(0.0), NegPosUb::Unbounded),
    ("1/15", 1.0 / 15.0, AllowedBorder::Finite(0.0), NegPosUb::Unbounded),
    ("1/9", 1.0 / 9.0, AllowedBorder::Unbounded, NegPosUb::Unbounded),
    ("1/9", 1.0 / 9.0, AllowedBorder::Unbounded, NegPosUb::Bounded(3)),
    ("1/9", 1.0 / 9.0, AllowedBorder::Unbounded, NegPosUb::Bounded(5)),
];

/// Sweep the six proposal-study settings and report class-blind average
/// recall at 1000 proposals per image.
pub fn cmd_rpn_study(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<Vec<ReportRow>, CliError> {
    let cfg = Config::load(config_path)?;
    let base_seed = seed_override.unwrap_or(cfg.seed);

    let pool = thread_pool()?;
    let values: Vec<f64> = pool.install(|| {
        use rayon::prelude::*;
        RPN_ROWS
            .par_iter()
            .enumerate()
            .map(|(index, &(_, beta, border, ub))| {
                let mut row_cfg = cfg.clone();
                row_cfg.loss =
                    LossSpec::new(LossKind::SmoothL1, cfg.loss.loss_weight).with_param("beta", beta);
                row_cfg.anchors.smoothl1_beta = None;
                row_cfg.anchors.allowed_border = border;
                row_cfg.anchors.neg_pos_ub = ub;
                let run = match run_training(&row_cfg, base_seed.wrapping_add(index as u64)) {
                    Ok(run) => run,
                    Err(_) => return f64::NAN,
                };
                let mut det = run.det.borrow_mut();
                let mut proposals = Vec::with_capacity(run.val.len());
                let mut gts = Vec::with_capacity(run.val.len());
                for img in run.val.iter() {
                    match det.propose(img) {
                        Ok(props) => proposals.push(props),
                        Err(_) => return f64::NAN,
                    }
                    gts.push(img.annotations.iter().map(|&(b, _)| b).collect::<Vec<_>>());
                }
                eval_ar(&proposals, &gts, 1000, &coco_thresholds()).value
            })
            .collect()
    });

    let rows: Vec<ReportRow> = RPN_ROWS
        .iter()
        .zip(&values)
        .map(|(&(beta, _, border, ub), &ar)| {
            ReportRow::new(
                format!("beta={beta},allowed_border={border},neg_pos_ub={ub}"),
                "ar1000",
                ar,
            )
        })
        .collect();

    std::fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    report::write_csv(&out_dir.join("rpn_study.csv"), &rows).map_err(runtime)?;
    if !quiet {
        print!("{}", report::render_table(&rows));
    }
    Ok(rows)
}

/// Run one brute-force comparison suite; errors with exit code 1 when any
/// case disagrees with the reference.
pub fn cmd_oracle(suite: &str, seed: u64, quiet: bool) -> Result<(), CliError> {
    let report = match suite {
        "iou" => run_iou_suite(&iou, &giou, 1000, seed),
        "nms" => run_nms_suite(&|d, t| nms(d, t), 500, 100, seed),
        "grad" => run_grad_suite(200, seed),
        "map" => run_map_suite(&|d, g, t| eval_map(d, g, t).map, 200, seed),
        other => return Err(CliError::Usage(format!("unknown oracle suite {other:?}"))),
    };
    if !quiet {
        println!(
            "oracle {suite}: {} checks, {} failures",
            report.total, report.failures
        );
        if suite == "grad" {
            println!("max relative error {:.3e}", report.max_err);
        }
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "oracle {suite}: {} of {} checks failed",
            report.failures, report.total
        )))
    }
}

fn random_boxes(n: usize, rng: &mut ChaCha8Rng) -> Vec<BBox> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            let x1 = rng.gen_range(0.0..450.0);
            let y1 = rng.gen_range(0.0..450.0);
            BBox::new(
                x1,
                y1,
                x1 + rng.gen_range(5.0..60.0),
                y1 + rng.gen_range(5.0..60.0),
            )
        })
        .collect()
}

/// Time one kernel. One rep yields a single `time_ms` row; several reps
/// yield `min_ms` and `median_ms` rows.
pub fn cmd_bench(
    kernel: &str,
    size: usize,
    reps: usize,
    seed: u64,
    out_dir: Option<&Path>,
    quiet: bool,
) -> Result<Vec<ReportRow>, CliError> {
    if size == 0 || reps == 0 {
        return Err(CliError::Usage("size and reps must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run: Box<dyn Fn() -> usize> = match kernel {
        "iou_matrix" => {
            let a = random_boxes(size, &mut rng);
            let b = random_boxes(size, &mut rng);
            Box::new(move || iou_matrix(&a, &b).len())
        }
        "nms" => {
            let dets: Vec<Detection> = random_boxes(size, &mut rng)
                .into_iter()
                .enumerate()
                .map(|(i, b)| {
                    use rand::Rng;
                    let _ = i;
                    Detection::new(b, rng.gen_range(0.0..1.0), 0)
                })
                .collect();
            Box::new(move || nms(&dets, 0.5).len())
        }
        "anchors" => {
            let spec = AnchorGenSpec {
                base_size: 32.0,
                scales: vec![1.0],
                ratios: vec![0.5, 1.0, 2.0],
                stride: 8.0,
            };
            let base = base_anchors(&spec);
            Box::new(move || grid_anchors(&base, size, size, 8.0).len())
        }
        other => return Err(CliError::Usage(format!("unknown bench kernel {other:?}"))),
    };

    let mut times_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let n = std::hint::black_box(run());
        let elapsed = start.elapsed().as_secs_f64() * 1000.0;
        assert!(n > 0);
        times_ms.push(elapsed);
    }

    let label = format!("{kernel}/{size}");
    let rows = if reps == 1 {
        vec![ReportRow::new(label, "time_ms", times_ms[0])]
    } else {
        let mut sorted = times_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        vec![
            ReportRow::new(label.clone(), "min_ms", sorted[0]),
            ReportRow::new(label, "median_ms", median),
        ]
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        report::write_csv(&dir.join("bench.csv"), &rows).map_err(runtime)?;
    }
    if !quiet {
        print!("{}", report::render_table(&rows));
    }
    Ok(rows)
}
