//! A small one-stage detector for the synthetic scenes.
//!
//! The backbone pools each stride-by-stride pixel tile into a feature
//! vector (the tile's pixels plus their mean). An optional normalization
//! layer sits between the backbone and two linear heads: a per-class
//! sigmoid classifier and a 4-component box-delta regressor, evaluated on
//! one anchor per feature cell. Training samples anchors by overlap,
//! scores them with a configurable regression loss, and updates every
//! parameter with momentum SGD; gradients are exact, so the whole training
//! step can be checked against finite differences.

use rand::Rng;
use thiserror::Error;

use crate::anchor::{
    base_anchors, grid_anchors, max_iou_assign, random_sample, valid_flags, AllowedBorder,
    AnchorGenSpec, Assignment, SamplerSpec,
};
use crate::geom::{decode_delta, encode_delta, BBox, Delta, GeomError};
use crate::losses::{LossError, LossSpec};
use crate::norm::{
    bn_backward, bn_forward, gn_backward, gn_forward, BnContext, GnContext, GroupNormSpec,
    NormError, NormState,
};
use crate::postproc::{nms, Detection};
use crate::refdet::dataset::SynthImage;
use crate::tensor::Tensor;

const DELTA_CLAMP: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image {w}x{h} is not divisible by stride {stride}")]
    BadDims { w: usize, h: usize, stride: usize },
    #[error("expected one anchor per cell, spec generates {0}")]
    MultiAnchor(usize),
    #[error("batch has {images} images but {samples} sample sets")]
    BatchMismatch { images: usize, samples: usize },
    #[error(transparent)]
    Norm(#[from] NormError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Normalization between backbone and heads.
#[derive(Debug, Clone)]
pub enum NormLayer {
    None,
    Bn(NormState),
    Gn(GroupNormSpec),
}

/// Overlap thresholds for anchor assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignCfg {
    pub pos_iou_thr: f64,
    pub neg_iou_thr: f64,
    pub min_pos_iou: f64,
}

impl Default for AssignCfg {
    fn default() -> Self {
        Self {
            pos_iou_thr: 0.7,
            neg_iou_thr: 0.3,
            min_pos_iou: 0.3,
        }
    }
}

/// Sampled anchors for one image: matched `(anchor, ground truth)` pairs
/// and negative anchor indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSample {
    pub pos: Vec<(usize, usize)>,
    pub neg: Vec<usize>,
}

/// Momentum SGD settings. Weight decay applies to head weights only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdCfg {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    cls_v: Vec<Vec<f64>>,
    reg_v: Vec<Vec<f64>>,
    gamma_v: Vec<f64>,
    beta_v: Vec<f64>,
}

/// Parameter gradients from one batch.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub cls_w: Vec<Vec<f64>>,
    pub reg_w: Vec<Vec<f64>>,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
}

/// Loss summary for one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepOut {
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub cls_only: bool,
}

/// Score threshold and overlap threshold for inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferCfg {
    pub score_thr: f64,
    pub nms_iou: f64,
}

/// Per-anchor head outputs for one image.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub cells_x: usize,
    pub cells_y: usize,
    /// Sigmoid class probabilities, one row per anchor.
    pub scores: Vec<Vec<f64>>,
    /// Raw regression outputs as normalized deltas (means 0, stds 1).
    pub deltas: Vec<Delta>,
}

struct ForwardTrace {
    cells_x: usize,
    cells_y: usize,
    normed: Tensor,
    bn_ctx: Option<BnContext>,
    gn_ctx: Option<GnContext>,
    logits: Vec<Vec<f64>>,
    raws: Vec<[f64; 4]>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce_with_logit(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

fn unit_delta(raw: &[f64; 4]) -> (Delta, bool, bool) {
    let dw = raw[2].clamp(-DELTA_CLAMP, DELTA_CLAMP);
    let dh = raw[3].clamp(-DELTA_CLAMP, DELTA_CLAMP);
    let d = Delta {
        dx: raw[0],
        dy: raw[1],
        dw,
        dh,
        target_means: [0.0; 4],
        target_stds: [1.0; 4],
    };
    (d, dw != raw[2], dh != raw[3])
}

#[derive(Debug, Clone)]
pub struct TinyDetector {
    pub stride: usize,
    pub num_classes: usize,
    pub gen: AnchorGenSpec,
    pub loss: LossSpec,
    pub norm: NormLayer,
    /// `[num_classes][feat_dim + 1]`, bias last.
    pub cls_w: Vec<Vec<f64>>,
    /// `[4][feat_dim + 1]`, bias last.
    pub reg_w: Vec<Vec<f64>>,
}

impl TinyDetector {
    pub fn new(stride: usize, gen: AnchorGenSpec, loss: LossSpec, norm: NormLayer) -> Self {
        let d = stride * stride + 2;
        Self {
            stride,
            num_classes: 2,
            gen,
            loss,
            norm,
            cls_w: vec![vec![0.0; d]; 2],
            reg_w: vec![vec![0.0; d]; 4],
        }
    }

    /// Feature dimensionality: one entry per tile pixel plus the tile mean.
    pub fn feat_dim(&self) -> usize {
        self.stride * self.stride + 1
    }

    pub fn randomize_weights(&mut self, scale: f64, rng: &mut impl Rng) {
        for row in self.cls_w.iter_mut().chain(self.reg_w.iter_mut()) {
            for w in row.iter_mut() {
                *w = rng.gen_range(-scale..=scale);
            }
        }
    }

    fn grid_dims(&self, img: &SynthImage) -> Result<(usize, usize), DetectorError> {
        if self.stride == 0 || img.width % self.stride != 0 || img.height % self.stride != 0 {
            return Err(DetectorError::BadDims {
                w: img.width,
                h: img.height,
                stride: self.stride,
            });
        }
        if self.gen.anchors_per_cell() != 1 {
            return Err(DetectorError::MultiAnchor(self.gen.anchors_per_cell()));
        }
        Ok((img.width / self.stride, img.height / self.stride))
    }

    /// Anchor boxes for an image, one per feature cell, row-major.
    pub fn anchors(&self, img: &SynthImage) -> Result<Vec<BBox>, DetectorError> {
        let (cx, cy) = self.grid_dims(img)?;
        Ok(grid_anchors(
            &base_anchors(&self.gen),
            cx,
            cy,
            self.gen.stride,
        ))
    }

    fn features(&self, img: &SynthImage) -> Result<(usize, usize, Tensor), DetectorError> {
        let (cx, cy) = self.grid_dims(img)?;
        let s = self.stride;
        let d = self.feat_dim();
        let mut data = vec![0.0; cx * cy * d];
        for iy in 0..cy {
            for ix in 0..cx {
                let cell = iy * cx + ix;
                let mut sum = 0.0;
                for py in 0..s {
                    for px in 0..s {
                        let v = img.pixel(ix * s + px, iy * s + py);
                        data[cell * d + py * s + px] = v;
                        sum += v;
                    }
                }
                data[cell * d + s * s] = sum / (s * s) as f64;
            }
        }
        Ok((cx, cy, Tensor::from_vec(&[cx * cy, d], data)))
    }

    fn forward_trace(
        &mut self,
        img: &SynthImage,
        training: bool,
    ) -> Result<ForwardTrace, DetectorError> {
        let (cx, cy, raw) = self.features(img)?;
        let n = cx * cy;
        let d = self.feat_dim();
        let (normed, bn_ctx, gn_ctx) = match &mut self.norm {
            NormLayer::None => (raw, None, None),
            NormLayer::Bn(state) => {
                let (out, ctx) = bn_forward(&raw, state, training)?;
                (out, Some(ctx), None)
            }
            NormLayer::Gn(spec) => {
                let stacked = Tensor::from_vec(&[n, d, 1], raw.data);
                let (out, ctx) = gn_forward(&stacked, spec)?;
                (Tensor::from_vec(&[n, d], out.data), None, Some(ctx))
            }
        };
        let mut logits = vec![vec![0.0; self.num_classes]; n];
        let mut raws = vec![[0.0; 4]; n];
        for i in 0..n {
            let h = &normed.data[i * d..(i + 1) * d];
            for (c, row) in self.cls_w.iter().enumerate() {
                logits[i][c] = row[d] + h.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
            for (k, row) in self.reg_w.iter().enumerate() {
                raws[i][k] = row[d] + h.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Ok(ForwardTrace {
            cells_x: cx,
            cells_y: cy,
            normed,
            bn_ctx,
            gn_ctx,
            logits,
            raws,
        })
    }

    /// Run the network on one image. With `training` set, a batch-norm
    /// layer uses batch statistics and updates its running averages.
    pub fn forward(
        &mut self,
        img: &SynthImage,
        training: bool,
    ) -> Result<ForwardOut, DetectorError> {
        let t = self.forward_trace(img, training)?;
        Ok(ForwardOut {
            cells_x: t.cells_x,
            cells_y: t.cells_y,
            scores: t
                .logits
                .iter()
                .map(|zs| zs.iter().map(|&z| sigmoid(z)).collect())
                .collect(),
            deltas: t.raws.iter().map(|r| unit_delta(r).0).collect(),
        })
    }

    fn zero_grads(&self) -> ParamGrads {
        let d = self.feat_dim() + 1;
        let affine = match &self.norm {
            NormLayer::None => 0,
            NormLayer::Bn(state) => state.channels(),
            NormLayer::Gn(spec) => spec.channels(),
        };
        ParamGrads {
            cls_w: vec![vec![0.0; d]; self.num_classes],
            reg_w: vec![vec![0.0; d]; 4],
            norm_gamma: vec![0.0; affine],
            norm_beta: vec![0.0; affine],
        }
    }

    /// Forward, loss, and full backward over a batch with fixed anchor
    /// samples. Returns the loss summary and the parameter gradients.
    pub fn batch_loss(
        &mut self,
        images: &[&SynthImage],
        samples: &[ImageSample],
    ) -> Result<(TrainStepOut, ParamGrads), DetectorError> {
        if images.len() != samples.len() {
            return Err(DetectorError::BatchMismatch {
                images: images.len(),
                samples: samples.len(),
            });
        }
        let d = self.feat_dim();
        let inv_imgs = 1.0 / images.len().max(1) as f64;
        let mut grads = self.zero_grads();
        let mut cls_total = 0.0;
        let mut reg_total = 0.0;
        let mut n_pos_total = 0;
        let mut n_neg_total = 0;

        for (img, sample) in images.iter().zip(samples) {
            let trace = self.forward_trace(img, true)?;
            let anchors = grid_anchors(
                &base_anchors(&self.gen),
                trace.cells_x,
                trace.cells_y,
                self.gen.stride,
            );
            let n = anchors.len();
            let n_sampled = sample.pos.len() + sample.neg.len();
            n_pos_total += sample.pos.len();
            n_neg_total += sample.neg.len();

            let mut dlogit = vec![vec![0.0; self.num_classes]; n];
            let mut draw = vec![[0.0; 4]; n];

            if n_sampled > 0 {
                let cls_scale = inv_imgs / n_sampled as f64;
                let mut cls_img = 0.0;
                let targets = |gt: Option<usize>| -> Vec<f64> {
                    let mut t = vec![0.0; self.num_classes];
                    if let Some(g) = gt {
                        t[img.annotations[g].1] = 1.0;
                    }
                    t
                };
                for &(a, g) in &sample.pos {
                    let t = targets(Some(g));
                    for c in 0..self.num_classes {
                        cls_img += bce_with_logit(trace.logits[a][c], t[c]);
                        dlogit[a][c] += (sigmoid(trace.logits[a][c]) - t[c]) * cls_scale;
                    }
                }
                for &a in &sample.neg {
                    for c in 0..self.num_classes {
                        cls_img += bce_with_logit(trace.logits[a][c], 0.0);
                        dlogit[a][c] += sigmoid(trace.logits[a][c]) * cls_scale;
                    }
                }
                cls_total += cls_img * inv_imgs / n_sampled as f64;
            }

            if !sample.pos.is_empty() {
                let reg_scale = inv_imgs / sample.pos.len() as f64;
                let mut reg_img = 0.0;
                for &(a, g) in &sample.pos {
                    let gt = img.annotations[g].0;
                    if self.loss.kind.is_box_loss() {
                        let (delta, dw_clamped, dh_clamped) = unit_delta(&trace.raws[a]);
                        let pred = decode_delta(anchors[a], &delta, None)?;
                        let out = self.loss.eval_box(pred, gt)?;
                        reg_img += out.value;
                        let [gx1, gy1, gx2, gy2] = out.grad;
                        let (aw, ah) = (anchors[a].width(), anchors[a].height());
                        let (pw, ph) = (pred.width(), pred.height());
                        draw[a][0] += (gx1 + gx2) * aw * reg_scale;
                        draw[a][1] += (gy1 + gy2) * ah * reg_scale;
                        if !dw_clamped {
                            draw[a][2] += (-gx1 + gx2) * 0.5 * pw * reg_scale;
                        }
                        if !dh_clamped {
                            draw[a][3] += (-gy1 + gy2) * 0.5 * ph * reg_scale;
                        }
                    } else {
                        let target = encode_delta(anchors[a], gt, [0.0; 4], [1.0; 4])?;
                        let t = [target.dx, target.dy, target.dw, target.dh];
                        for k in 0..4 {
                            let out = self.loss.eval_residual(trace.raws[a][k] - t[k])?;
                            reg_img += out.value;
                            draw[a][k] += out.grad * reg_scale;
                        }
                    }
                }
                reg_total += reg_img * inv_imgs / sample.pos.len() as f64;
            }

            let mut dh = Tensor::zeros(&[n, d]);
            for i in 0..n {
                let touched = dlogit[i].iter().any(|&g| g != 0.0)
                    || draw[i].iter().any(|&g| g != 0.0);
                if !touched {
                    continue;
                }
                let h = &trace.normed.data[i * d..(i + 1) * d];
                for c in 0..self.num_classes {
                    let g = dlogit[i][c];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        grads.cls_w[c][j] += g * h[j];
                        dh.data[i * d + j] += g * self.cls_w[c][j];
                    }
                    grads.cls_w[c][d] += g;
                }
                for k in 0..4 {
                    let g = draw[i][k];
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        grads.reg_w[k][j] += g * h[j];
                        dh.data[i * d + j] += g * self.reg_w[k][j];
                    }
                    grads.reg_w[k][d] += g;
                }
            }

            match &self.norm {
                NormLayer::None => {}
                NormLayer::Bn(state) => {
                    let ctx = trace.bn_ctx.as_ref().expect("bn context");
                    let ng = bn_backward(&dh, ctx, state)?;
                    for j in 0..d {
                        grads.norm_gamma[j] += ng.gamma[j];
                        grads.norm_beta[j] += ng.beta[j];
                    }
                }
                NormLayer::Gn(_) => {
                    let ctx = trace.gn_ctx.as_ref().expect("gn context");
                    let stacked = Tensor::from_vec(&[n, d, 1], dh.data);
                    let ng = gn_backward(&stacked, ctx)?;
                    for j in 0..d {
                        grads.norm_gamma[j] += ng.gamma[j];
                        grads.norm_beta[j] += ng.beta[j];
                    }
                }
            }
        }

        let out = TrainStepOut {
            loss: cls_total + reg_total,
            cls_loss: cls_total,
            reg_loss: reg_total,
            n_pos: n_pos_total,
            n_neg: n_neg_total,
            cls_only: n_pos_total == 0,
        };
        Ok((out, grads))
    }

    /// Apply one momentum-SGD update from accumulated gradients. A
    /// batch-norm affine is updated only when marked trainable; a
    /// group-norm affine always is. Weight decay never touches the
    /// normalization parameters.
    pub fn sgd_step(&mut self, grads: &ParamGrads, cfg: &SgdCfg, state: &mut SgdState) {
        let d = self.feat_dim() + 1;
        if state.cls_v.len() != self.num_classes {
            state.cls_v = vec![vec![0.0; d]; self.num_classes];
            state.reg_v = vec![vec![0.0; d]; 4];
            state.gamma_v = vec![0.0; grads.norm_gamma.len()];
            state.beta_v = vec![0.0; grads.norm_beta.len()];
        }
        let rows = self
            .cls_w
            .iter_mut()
            .zip(grads.cls_w.iter().zip(&mut state.cls_v))
            .chain(
                self.reg_w
                    .iter_mut()
                    .zip(grads.reg_w.iter().zip(&mut state.reg_v)),
            );
        for (w_row, (g_row, v_row)) in rows {
            for j in 0..w_row.len() {
                v_row[j] = cfg.momentum * v_row[j] + g_row[j] + cfg.weight_decay * w_row[j];
                w_row[j] -= cfg.lr * v_row[j];
            }
        }
        let affine: Option<(&mut Vec<f64>, &mut Vec<f64>)> = match &mut self.norm {
            NormLayer::None => None,
            NormLayer::Bn(s) if s.requires_grad => Some((&mut s.gamma, &mut s.beta)),
            NormLayer::Bn(_) => None,
            NormLayer::Gn(s) => Some((&mut s.gamma, &mut s.beta)),
        };
        if let Some((gamma, beta)) = affine {
            for j in 0..gamma.len() {
                state.gamma_v[j] = cfg.momentum * state.gamma_v[j] + grads.norm_gamma[j];
                gamma[j] -= cfg.lr * state.gamma_v[j];
                state.beta_v[j] = cfg.momentum * state.beta_v[j] + grads.norm_beta[j];
                beta[j] -= cfg.lr * state.beta_v[j];
            }
        }
    }

    /// One full optimization step: loss, gradients, parameter update.
    pub fn train_step(
        &mut self,
        images: &[&SynthImage],
        samples: &[ImageSample],
        cfg: &SgdCfg,
        state: &mut SgdState,
    ) -> Result<TrainStepOut, DetectorError> {
        let (out, grads) = self.batch_loss(images, samples)?;
        self.sgd_step(&grads, cfg, state);
        Ok(out)
    }

    /// Detect objects in one image: thresholded sigmoid scores, decoded
    /// boxes clipped to the image, then per-class overlap suppression.
    pub fn infer(
        &mut self,
        img: &SynthImage,
        cfg: &InferCfg,
    ) -> Result<Vec<Detection>, DetectorError> {
        let trace = self.forward_trace(img, false)?;
        let anchors = grid_anchors(
            &base_anchors(&self.gen),
            trace.cells_x,
            trace.cells_y,
            self.gen.stride,
        );
        let shape = (img.width as f64, img.height as f64);
        let mut dets = Vec::new();
        for (i, anchor) in anchors.iter().enumerate() {
            let best: f64 = trace.logits[i].iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
            if sigmoid(best) < cfg.score_thr {
                continue;
            }
            let decoded = decode_delta(*anchor, &unit_delta(&trace.raws[i]).0, Some(shape))?;
            if decoded.width() <= 0.0 || decoded.height() <= 0.0 {
                continue;
            }
            for (c, &z) in trace.logits[i].iter().enumerate() {
                let p = sigmoid(z);
                if p >= cfg.score_thr {
                    dets.push(Detection::new(decoded, p, c));
                }
            }
        }
        let keep = nms(&dets, cfg.nms_iou);
        Ok(keep.into_iter().map(|i| dets[i]).collect())
    }

    /// Class-agnostic scored boxes for every anchor, clipped to the image.
    pub fn propose(&mut self, img: &SynthImage) -> Result<Vec<(BBox, f64)>, DetectorError> {
        let trace = self.forward_trace(img, false)?;
        let anchors = grid_anchors(
            &base_anchors(&self.gen),
            trace.cells_x,
            trace.cells_y,
            self.gen.stride,
        );
        let shape = (img.width as f64, img.height as f64);
        let mut out = Vec::with_capacity(anchors.len());
        for (i, anchor) in anchors.iter().enumerate() {
            let decoded = decode_delta(*anchor, &unit_delta(&trace.raws[i]).0, Some(shape))?;
            let best = trace.logits[i].iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
            out.push((decoded, sigmoid(best)));
        }
        Ok(out)
    }
}

/// Assign and sample anchors for each image with a caller-held generator,
/// keeping the random choices independent of the network parameters.
/// Anchors outside the allowed border are excluded entirely.
pub fn prepare_batch(
    images: &[&SynthImage],
    gen: &AnchorGenSpec,
    assign: &AssignCfg,
    sampler: &SamplerSpec,
    border: AllowedBorder,
    rng: &mut impl Rng,
) -> Result<Vec<ImageSample>, DetectorError> {
    let stride = gen.stride as usize;
    let base = base_anchors(gen);
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        if stride == 0
            || gen.stride.fract() != 0.0
            || img.width % stride != 0
            || img.height % stride != 0
        {
            return Err(DetectorError::BadDims {
                w: img.width,
                h: img.height,
                stride,
            });
        }
        let (cx, cy) = (img.width / stride, img.height / stride);
        let anchors = grid_anchors(&base, cx, cy, gen.stride);
        let flags = valid_flags(&anchors, img.width as f64, img.height as f64, border);
        let valid_idx: Vec<usize> = (0..anchors.len()).filter(|&i| flags[i]).collect();
        let sub: Vec<BBox> = valid_idx.iter().map(|&i| anchors[i]).collect();
        let gts: Vec<BBox> = img.annotations.iter().map(|&(b, _)| b).collect();
        let assigned = max_iou_assign(
            &sub,
            &gts,
            assign.pos_iou_thr,
            assign.neg_iou_thr,
            assign.min_pos_iou,
        );
        let picked = random_sample(&assigned, sampler, rng);
        let pos = picked
            .pos_indices
            .iter()
            .map(|&i| match assigned.assignments[i] {
                Assignment::Positive(g) => (valid_idx[i], g),
                _ => unreachable!("sampled positive without a match"),
            })
            .collect();
        let neg = picked.neg_indices.iter().map(|&i| valid_idx[i]).collect();
        out.push(ImageSample { pos, neg });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::NegPosUb;
    use crate::losses::LossKind;
    use crate::metrics::eval_map;
    use crate::refdet::dataset::gen_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> AnchorGenSpec {
        AnchorGenSpec {
            base_size: 32.0,
            scales: vec![1.0],
            ratios: vec![1.0],
            stride: 8.0,
        }
    }

    fn assign_cfg() -> AssignCfg {
        AssignCfg::default()
    }

    fn sampler() -> SamplerSpec {
        SamplerSpec {
            num: 16,
            pos_fraction: 0.5,
            neg_pos_ub: NegPosUb::Unbounded,
        }
    }

    fn smooth_l1_detector(norm: NormLayer) -> TinyDetector {
        let loss = LossSpec::new(LossKind::SmoothL1, 1.0);
        TinyDetector::new(8, spec(), loss, norm)
    }

    fn make_images(n: usize, seed: u64) -> Vec<SynthImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gen_dataset(n, 64, 2, &mut rng)
    }

    #[test]
    fn zero_weights_give_uniform_outputs() {
        let images = make_images(1, 3);
        let mut det = smooth_l1_detector(NormLayer::None);
        let out = det.forward(&images[0], false).unwrap();
        assert_eq!(out.scores.len(), 64);
        assert!(out.scores.iter().flatten().all(|&p| p == 0.5));
        assert!(out
            .deltas
            .iter()
            .all(|d| d.dx == 0.0 && d.dy == 0.0 && d.dw == 0.0 && d.dh == 0.0));
    }

    #[test]
    fn doubling_reg_weights_doubles_deltas() {
        let images = make_images(1, 4);
        let mut det = smooth_l1_detector(NormLayer::None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        det.randomize_weights(0.05, &mut rng);
        let before = det.forward(&images[0], false).unwrap();
        for row in &mut det.reg_w {
            for w in row.iter_mut() {
                *w *= 2.0;
            }
        }
        let after = det.forward(&images[0], false).unwrap();
        for (a, b) in before.deltas.iter().zip(&after.deltas) {
            assert!((b.dx - 2.0 * a.dx).abs() < 1e-12);
            assert!((b.dh - 2.0 * a.dh).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let img = SynthImage {
            id: 0,
            width: 60,
            height: 64,
            pixels: vec![0.0; 60 * 64],
            annotations: Vec::new(),
        };
        let mut det = smooth_l1_detector(NormLayer::None);
        assert!(matches!(
            det.forward(&img, false),
            Err(DetectorError::BadDims { w: 60, .. })
        ));
    }

    #[test]
    fn anchors_align_with_feature_tiles() {
        let images = make_images(1, 5);
        let det = smooth_l1_detector(NormLayer::None);
        let anchors = det.anchors(&images[0]).unwrap();
        assert_eq!(anchors.len(), 64);
        assert_eq!(anchors[0], BBox::new(0.0, 0.0, 32.0, 32.0));
        let idx = 2 * 8 + 3;
        assert_eq!(anchors[idx], BBox::new(24.0, 16.0, 56.0, 48.0));
    }

    #[test]
    fn every_ground_truth_gets_a_positive() {
        let images = make_images(10, 6);
        let refs: Vec<&SynthImage> = images.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = prepare_batch(
            &refs,
            &spec(),
            &assign_cfg(),
            &sampler(),
            AllowedBorder::Unbounded,
            &mut rng,
        )
        .unwrap();
        for (img, sample) in images.iter().zip(&samples) {
            let covered: std::collections::BTreeSet<usize> =
                sample.pos.iter().map(|&(_, g)| g).collect();
            assert_eq!(covered.len(), img.annotations.len());
            assert!(!sample.neg.is_empty());
            let det = smooth_l1_detector(NormLayer::None);
            let anchors = det.anchors(img).unwrap();
            for &(a, g) in &sample.pos {
                let overlap = crate::geom::iou(anchors[a], img.annotations[g].0);
                assert!(overlap >= 0.3, "weak positive: {overlap}");
            }
        }
    }

    #[test]
    fn zero_positive_batch_reports_cls_only() {
        let images = make_images(1, 7);
        let refs: Vec<&SynthImage> = images.iter().collect();
        let samples = vec![ImageSample {
            pos: vec![],
            neg: vec![0, 1, 2, 3],
        }];
        let mut det = smooth_l1_detector(NormLayer::None);
        let (out, grads) = det.batch_loss(&refs, &samples).unwrap();
        assert!(out.cls_only);
        assert_eq!(out.reg_loss, 0.0);
        assert!(out.cls_loss > 0.0);
        assert!(grads.reg_w.iter().flatten().all(|&g| g == 0.0));
        assert!(grads.cls_w.iter().flatten().any(|&g| g != 0.0));
    }

    fn fd_check(norm: NormLayer, loss: LossSpec, seed: u64, check_affine: bool) {
        let images = make_images(2, seed);
        let refs: Vec<&SynthImage> = images.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let samples = prepare_batch(
            &refs,
            &spec(),
            &assign_cfg(),
            &sampler(),
            AllowedBorder::Unbounded,
            &mut rng,
        )
        .unwrap();
        let mut det = TinyDetector::new(8, spec(), loss, norm);
        det.randomize_weights(0.1, &mut rng);

        let (_, grads) = det.clone().batch_loss(&refs, &samples).unwrap();
        let h = 1e-5;
        let d = det.feat_dim() + 1;
        let mut worst: f64 = 0.0;
        let eval = |det: &TinyDetector| -> f64 {
            det.clone().batch_loss(&refs, &samples).unwrap().0.loss
        };
        for t in 0..20 {
            let (row, col) = (t % 6, (t * 7 + seed as usize) % d);
            let analytic;
            let mut plus = det.clone();
            let mut minus = det.clone();
            if row < 2 {
                analytic = grads.cls_w[row][col];
                plus.cls_w[row][col] += h;
                minus.cls_w[row][col] -= h;
            } else {
                analytic = grads.reg_w[row - 2][col];
                plus.reg_w[row - 2][col] += h;
                minus.reg_w[row - 2][col] -= h;
            }
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
            assert!(rel < 1e-3, "param ({row},{col}): {analytic} vs {numeric}");
        }
        if check_affine {
            for t in 0..10 {
                let j = (t * 13 + 1) % (d - 1);
                let bump = |det: &mut TinyDetector, amt: f64, gamma: bool| match &mut det.norm {
                    NormLayer::Bn(s) => {
                        if gamma {
                            s.gamma[j] += amt;
                        } else {
                            s.beta[j] += amt;
                        }
                    }
                    NormLayer::Gn(s) => {
                        if gamma {
                            s.gamma[j] += amt;
                        } else {
                            s.beta[j] += amt;
                        }
                    }
                    NormLayer::None => unreachable!(),
                };
                let gamma = t % 2 == 0;
                let analytic = if gamma {
                    grads.norm_gamma[j]
                } else {
                    grads.norm_beta[j]
                };
                let mut plus = det.clone();
                let mut minus = det.clone();
                bump(&mut plus, h, gamma);
                bump(&mut minus, -h, gamma);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                worst = worst.max(rel);
                assert!(rel < 1e-3, "affine {j}: {analytic} vs {numeric}");
            }
        }
        assert!(worst < 1e-3);
    }

    #[test]
    fn gradients_match_finite_differences_plain() {
        let loss = LossSpec::new(LossKind::SmoothL1, 1.0).with_param("beta", 1.0 / 9.0);
        fd_check(NormLayer::None, loss, 21, false);
    }

    #[test]
    fn gradients_match_finite_differences_l1_weighted() {
        fd_check(NormLayer::None, LossSpec::new(LossKind::L1, 2.0), 22, false);
    }

    #[test]
    fn gradients_match_finite_differences_batchnorm() {
        let mut state = NormState::new(65);
        state.requires_grad = true;
        let loss = LossSpec::new(LossKind::Giou, 1.0);
        fd_check(NormLayer::Bn(state), loss, 23, true);
    }

    #[test]
    fn gradients_match_finite_differences_groupnorm() {
        let loss = LossSpec::new(LossKind::BalancedL1, 1.0);
        fd_check(NormLayer::Gn(GroupNormSpec::new(5, 65)), loss, 24, true);
    }

    #[test]
    fn gradients_match_finite_differences_iou_loss() {
        let loss = LossSpec::new(LossKind::Iou, 1.0);
        fd_check(NormLayer::None, loss, 25, false);
    }

    #[test]
    fn frozen_norm_reports_zero_affine_gradients() {
        let images = make_images(2, 30);
        let refs: Vec<&SynthImage> = images.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let samples = prepare_batch(
            &refs,
            &spec(),
            &assign_cfg(),
            &sampler(),
            AllowedBorder::Unbounded,
            &mut rng,
        )
        .unwrap();
        let loss = LossSpec::new(LossKind::SmoothL1, 1.0);
        let mut det = TinyDetector::new(8, spec(), loss, NormLayer::Bn(NormState::frozen(65)));
        det.randomize_weights(0.1, &mut rng);
        let (_, grads) = det.batch_loss(&refs, &samples).unwrap();
        assert!(grads.norm_gamma.iter().all(|&g| g == 0.0));
        assert!(grads.norm_beta.iter().all(|&g| g == 0.0));
        assert!(grads.cls_w.iter().flatten().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_decreases_during_training() {
        let images = make_images(4, 40);
        let refs: Vec<&SynthImage> = images.iter().collect();
        let mut det = smooth_l1_detector(NormLayer::None);
        let cfg = SgdCfg {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        };
        let mut opt = SgdState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..60 {
            let samples = prepare_batch(
                &refs,
                &spec(),
                &assign_cfg(),
                &sampler(),
                AllowedBorder::Unbounded,
                &mut rng,
            )
            .unwrap();
            let out = det.train_step(&refs, &samples, &cfg, &mut opt).unwrap();
            assert!(out.loss.is_finite());
            if step == 0 {
                first = out.loss;
            }
            last = out.loss;
        }
        assert!(last < 0.5 * first, "no progress: {first} -> {last}");
    }

    #[test]
    fn uniform_scores_below_high_threshold_yield_nothing() {
        let images = make_images(1, 50);
        let mut det = smooth_l1_detector(NormLayer::None);
        let cfg = InferCfg {
            score_thr: 0.9,
            nms_iou: 0.5,
        };
        assert!(det.infer(&images[0], &cfg).unwrap().is_empty());
    }

    #[test]
    fn inferred_boxes_stay_inside_the_image() {
        let images = make_images(3, 51);
        let mut det = smooth_l1_detector(NormLayer::None);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        det.randomize_weights(0.4, &mut rng);
        let cfg = InferCfg {
            score_thr: 0.3,
            nms_iou: 0.5,
        };
        let mut seen = 0;
        for img in &images {
            for hit in det.infer(img, &cfg).unwrap() {
                seen += 1;
                assert!(hit.bbox.x1 >= 0.0 && hit.bbox.y1 >= 0.0);
                assert!(hit.bbox.x2 <= 64.0 && hit.bbox.y2 <= 64.0);
                assert!(hit.bbox.is_valid());
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn inference_suppresses_same_class_overlaps() {
        let images = make_images(2, 53);
        let mut det = smooth_l1_detector(NormLayer::None);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        det.randomize_weights(0.3, &mut rng);
        let cfg = InferCfg {
            score_thr: 0.3,
            nms_iou: 0.5,
        };
        for img in &images {
            let kept = det.infer(img, &cfg).unwrap();
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].class_id == kept[j].class_id {
                        let o = crate::geom::iou(kept[i].bbox, kept[j].bbox);
                        assert!(o <= cfg.nms_iou + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn proposals_cover_every_anchor() {
        let images = make_images(1, 55);
        let mut det = smooth_l1_detector(NormLayer::None);
        let props = det.propose(&images[0]).unwrap();
        assert_eq!(props.len(), 64);
        assert!(props.iter().all(|&(_, s)| s == 0.5));
    }

    #[test]
    fn small_dataset_is_learnable() {
        let images = make_images(8, 60);
        let refs: Vec<&SynthImage> = images.iter().collect();
        let mut det = smooth_l1_detector(NormLayer::None);
        let cfg = SgdCfg {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        };
        let mut opt = SgdState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..1500 {
            let samples = prepare_batch(
                &refs,
                &spec(),
                &assign_cfg(),
                &sampler(),
                AllowedBorder::Unbounded,
                &mut rng,
            )
            .unwrap();
            det.train_step(&refs, &samples, &cfg, &mut opt).unwrap();
        }
        let infer_cfg = InferCfg {
            score_thr: 0.3,
            nms_iou: 0.5,
        };
        let dets: Vec<Vec<Detection>> = images
            .iter()
            .map(|img| det.infer(img, &infer_cfg).unwrap())
            .collect();
        let gts: Vec<Vec<(BBox, usize)>> =
            images.iter().map(|img| img.annotations.clone()).collect();
        let result = eval_map(&dets, &gts, &[0.5]);
        assert!(result.map >= 0.8, "train-set quality too low: {}", result.map);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let images = make_images(4, 70);
            let refs: Vec<&SynthImage> = images.iter().collect();
            let mut det = smooth_l1_detector(NormLayer::None);
            let cfg = SgdCfg {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            };
            let mut opt = SgdState::default();
            let mut rng = ChaCha8Rng::seed_from_u64(71);
            for _ in 0..30 {
                let samples = prepare_batch(
                    &refs,
                    &spec(),
                    &assign_cfg(),
                    &sampler(),
                    AllowedBorder::Unbounded,
                    &mut rng,
                )
                .unwrap();
                det.train_step(&refs, &samples, &cfg, &mut opt).unwrap();
            }
            (det.cls_w, det.reg_w)
        };
        assert_eq!(run(), run());
    }
}
