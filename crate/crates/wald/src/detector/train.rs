//! Stochastic gradient training of the two-stream detector on synthetic
//! paired scenes: fused-RPN loss plus the per-RoI multi-task loss (with the
//! position-shift and adjacent-similarity terms), auxiliary fusion-branch
//! losses, and optionally the 3-D regression loss. Two-phase learning-rate
//! schedule, momentum SGD, one scene per step.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::box3d::{encode_3d_targets, init_box3d, loss_3d, loss_3d_grad, Box3DTargets};
use crate::geometry::{Box2D, ShiftTarget};
use crate::nn::{sigmoid, smooth_l1, smooth_l1_grad, softmax_cross_entropy};
use crate::paired::{crop_values, ScenePair};
use crate::rfa::{
    asc_loss_grads, asc_pair, assign_minibatch_labels, multi_task_loss, roi_jitter,
    shift_loss_grads, ClsTerm, JitterConfig, LossBreakdown, LossConfig, RegTerm, RoiLabel,
    ShiftPrediction,
};

use super::heads::{
    backward_neighbor, backward_roi, forward_neighbor, forward_roi, HeadStackGrads,
    NeighborForward, RoiForward, RoiUpstream,
};
use super::rpn::{anchor_grid, anchor_outputs};
use super::{
    clip_box, decode_box_deltas, encode_box_deltas, nms, DetectorModel, FeatureMap, ModelConfig,
    ModelError, ModelParams, Proposal, RpnGrads, StreamGrads, StreamParams,
};

/// Training-time options; architecture switches live in [`ModelConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Fraction of all iterations run at `lr_initial` before dropping.
    pub lr_switch: f64,
    pub momentum: f64,
    pub seed: u64,
    /// RoI jitter augmentation of the sensed modality.
    pub jitter_enabled: bool,
    pub jitter: JitterConfig,
    /// Adjacent similarity constraint (needs the shift head).
    pub asc_enabled: bool,
    pub loss: LossConfig,
    pub rois_per_scene: usize,
    pub max_fg_per_scene: usize,
    pub rpn_sample: usize,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub fg_thr: f64,
    pub bg_thr: f64,
    /// RPN proposals fed to the heads during training (ground-truth boxes
    /// are appended on top).
    pub train_proposals: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 6,
            lr_initial: 0.01,
            lr_final: 0.001,
            lr_switch: 2.0 / 3.0,
            momentum: 0.9,
            seed: 0,
            jitter_enabled: true,
            jitter: JitterConfig::default(),
            asc_enabled: true,
            loss: LossConfig::default(),
            rois_per_scene: 16,
            max_fg_per_scene: 8,
            rpn_sample: 32,
            rpn_fg_iou: 0.5,
            rpn_bg_iou: 0.3,
            fg_thr: 0.5,
            bg_thr: 0.5,
            train_proposals: 24,
        }
    }
}

/// Gradients of the whole model, mirroring [`ModelParams::tensor_slots`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub stream_ref: StreamGrads,
    pub stream_sensed: StreamGrads,
    pub rpn: RpnGrads,
    pub heads: HeadStackGrads,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        ModelGrads {
            stream_ref: params.stream_ref.zero_grads(),
            stream_sensed: params.stream_sensed.zero_grads(),
            rpn: params.rpn.zero_grads(),
            heads: HeadStackGrads::zeros(params),
        }
    }

    /// Flat gradient views in the exact order of
    /// [`ModelParams::tensor_slots`].
    pub fn grad_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        macro_rules! pair {
            ($g:expr) => {{
                out.push($g.weight.as_slice().unwrap());
                out.push($g.bias.as_slice().unwrap());
            }};
        }
        pair!(self.stream_ref.conv1);
        pair!(self.stream_ref.conv2);
        pair!(self.stream_ref.conv3);
        pair!(self.stream_sensed.conv1);
        pair!(self.stream_sensed.conv2);
        pair!(self.stream_sensed.conv3);
        pair!(self.rpn.conv);
        pair!(self.rpn.head);
        if let Some(rfa) = &self.heads.rfa {
            pair!(rfa.fc1);
            pair!(rfa.fc2);
        }
        if let Some(caf) = &self.heads.caf {
            pair!(caf.aux_ref);
            pair!(caf.aux_sensed);
        }
        pair!(self.heads.head.fc1);
        pair!(self.heads.head.cls);
        pair!(self.heads.head.reg);
        if let Some(reg3d) = &self.heads.head.reg3d {
            pair!(reg3d);
        }
        out
    }
}

/// Plain momentum SGD over the flattened parameter slots.
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
    momentum: f64,
}

impl Sgd {
    pub fn new(params: &mut ModelParams, momentum: f64) -> Self {
        let velocity = params.tensor_slots().iter().map(|s| vec![0.0; s.data.len()]).collect();
        Sgd { velocity, momentum }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelGrads, lr: f64) {
        let slots = params.tensor_slots();
        let gs = grads.grad_slices();
        assert_eq!(slots.len(), gs.len(), "gradient/parameter layout mismatch");
        for ((slot, g), v) in slots.into_iter().zip(gs).zip(self.velocity.iter_mut()) {
            assert_eq!(slot.data.len(), g.len(), "tensor {} size mismatch", slot.name);
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                slot.data[i] -= lr * v[i];
            }
        }
    }
}

/// One RoI of a head minibatch: geometry, label, and targets. All fields are
/// leaves; the loss is a deterministic function of the model parameters
/// given a batch.
#[derive(Debug, Clone)]
pub struct RoiBatchItem {
    pub roi: Box2D,
    /// Possibly jittered sensed-side RoI; equals `roi` when jitter is off.
    pub sensed_roi: Box2D,
    /// 0 = background, >= 1 = foreground class.
    pub class_index: usize,
    pub reg_target: Option<[f64; 4]>,
    /// Already enriched for any jitter applied to `sensed_roi`.
    pub shift_target: Option<ShiftTarget>,
    /// (reference, sensed) 4-neighbour boxes for the ASC term.
    pub neighbor: Option<(Box2D, Box2D)>,
    pub target_3d: Option<Box3DTargets>,
}

/// Losses and gradients of one head minibatch.
pub struct RoiBatchOutput {
    pub breakdown: LossBreakdown,
    pub l_aux: f64,
    pub l_3d: f64,
    /// `breakdown.total + l_aux + l_3d`.
    pub total: f64,
    pub forwards: Vec<RoiForward>,
    pub grads: Option<RoiBatchGrads>,
}

pub struct RoiBatchGrads {
    pub heads: HeadStackGrads,
    pub d_f_ref: Array3<f64>,
    pub d_f_sensed: Array3<f64>,
}

/// Forward (and optionally backward) pass of the per-RoI heads over a
/// minibatch. This is the training loss downstream of the feature maps; the
/// gradient covers every path, including the aligned re-pooling coordinates.
pub fn roi_batch(
    params: &ModelParams,
    config: &ModelConfig,
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    items: &[RoiBatchItem],
    loss_cfg: &LossConfig,
    want_grads: bool,
) -> Result<RoiBatchOutput, ModelError> {
    let mut forwards = Vec::with_capacity(items.len());
    let mut neighbors: Vec<Option<NeighborForward>> = Vec::with_capacity(items.len());
    for item in items {
        forwards.push(forward_roi(params, config, f_ref, f_sensed, &item.roi, &item.sensed_roi)?);
        neighbors.push(match &item.neighbor {
            Some((nr, ns)) => forward_neighbor(params, config, f_ref, f_sensed, nr, ns)?,
            None => None,
        });
    }

    let cls_terms: Vec<ClsTerm> = items
        .iter()
        .zip(&forwards)
        .map(|(it, f)| ClsTerm { logits: f.cls_logits.to_vec(), label: it.class_index })
        .collect();
    let shift_preds: Vec<ShiftPrediction> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| it.class_index > 0 && it.shift_target.is_some())
        .map(|(i, it)| ShiftPrediction {
            roi_index: i,
            predicted: forwards[i].shift,
            target: it.shift_target,
            neighbor_predicted: neighbors[i].as_ref().map(|n| n.shift),
        })
        .collect();
    let reg_terms: Vec<RegTerm> = items
        .iter()
        .zip(&forwards)
        .map(|(it, f)| RegTerm {
            predicted: f.reg,
            target: it.reg_target.unwrap_or([0.0; 4]),
            positive: it.class_index > 0,
        })
        .collect();
    let breakdown = multi_task_loss(&cls_terms, &shift_preds, &reg_terms, loss_cfg)
        .map_err(|e| ModelError::Config(e.to_string()))?;

    let n_rois = items.len().max(1);
    let mut l_aux = 0.0;
    if params.caf.is_some() {
        for (it, f) in items.iter().zip(&forwards) {
            let label = usize::from(it.class_index > 0);
            for logits in [f.aux_ref_logits.as_ref(), f.aux_sensed_logits.as_ref()] {
                l_aux += softmax_cross_entropy(logits.expect("caf caches aux logits"), label).0;
            }
        }
        l_aux /= (2 * n_rois) as f64;
    }

    let n_3d = items.iter().filter(|it| it.target_3d.is_some()).count();
    let mut l_3d = 0.0;
    if n_3d > 0 {
        for (it, f) in items.iter().zip(&forwards) {
            if let (Some(t3), Some(v3)) = (&it.target_3d, &f.v3d) {
                l_3d += loss_3d(
                    it.class_index,
                    &Box3DTargets::from_array(*v3),
                    t3,
                    loss_cfg.smooth_l1_beta,
                );
            }
        }
        l_3d /= n_3d as f64;
    }

    let total = breakdown.total + l_aux + l_3d;
    if !want_grads {
        return Ok(RoiBatchOutput { breakdown, l_aux, l_3d, total, forwards, grads: None });
    }

    // backward
    let labels: Vec<usize> = items.iter().map(|it| it.class_index).collect();
    let shift_grads = shift_loss_grads(&shift_preds, &labels, loss_cfg.smooth_l1_beta)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let asc_grads = asc_loss_grads(&shift_preds, &labels, loss_cfg.smooth_l1_beta)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let mut shift_slot = vec![usize::MAX; items.len()];
    for (si, p) in shift_preds.iter().enumerate() {
        shift_slot[p.roi_index] = si;
    }

    let mut heads = HeadStackGrads::zeros(params);
    let mut d_f_ref = Array3::zeros(f_ref.values.raw_dim());
    let mut d_f_sensed = Array3::zeros(f_sensed.values.raw_dim());
    let n_cls = cls_terms.len().max(1) as f64;
    let n_pos = reg_terms.iter().filter(|r| r.positive).count().max(1) as f64;

    for (i, (it, f)) in items.iter().zip(&forwards).enumerate() {
        let mut up = RoiUpstream::default();
        let mut d_logits = f.cls_probs.to_vec();
        d_logits[it.class_index] -= 1.0;
        for v in d_logits.iter_mut() {
            *v /= n_cls;
        }
        up.d_cls_logits = d_logits;
        if it.class_index > 0 {
            if let Some(t) = &it.reg_target {
                for k in 0..4 {
                    up.d_reg[k] =
                        smooth_l1_grad(f.reg[k] - t[k], loss_cfg.smooth_l1_beta) / n_pos;
                }
            }
        }
        if let (Some(t3), Some(v3)) = (&it.target_3d, &f.v3d) {
            let g = loss_3d_grad(
                it.class_index,
                &Box3DTargets::from_array(*v3),
                t3,
                loss_cfg.smooth_l1_beta,
            );
            up.d_v3d = Some(std::array::from_fn(|k| g[k] / n_3d.max(1) as f64));
        }
        if shift_slot[i] != usize::MAX {
            let g = shift_grads[shift_slot[i]];
            up.d_shift = (loss_cfg.lambda1 * g.0, loss_cfg.lambda1 * g.1);
        }
        if params.caf.is_some() {
            let label = usize::from(it.class_index > 0);
            let scale = 1.0 / (2 * n_rois) as f64;
            let mk = |logits: &ndarray::Array1<f64>| {
                let (_, probs) = softmax_cross_entropy(logits, label);
                let mut d = probs.to_vec();
                d[label] -= 1.0;
                for v in d.iter_mut() {
                    *v *= scale;
                }
                d
            };
            up.d_aux_ref = f.aux_ref_logits.as_ref().map(mk);
            up.d_aux_sensed = f.aux_sensed_logits.as_ref().map(mk);
        }
        backward_roi(params, config, f_ref, f_sensed, f, &up, &mut heads, &mut d_f_ref, &mut d_f_sensed);
        if let Some(nb) = &neighbors[i] {
            if shift_slot[i] != usize::MAX {
                let g = asc_grads[shift_slot[i]];
                backward_neighbor(
                    params,
                    config,
                    f_ref,
                    f_sensed,
                    nb,
                    (loss_cfg.lambda2 * g.0, loss_cfg.lambda2 * g.1),
                    &mut heads,
                    &mut d_f_ref,
                    &mut d_f_sensed,
                );
            }
        }
    }

    Ok(RoiBatchOutput {
        breakdown,
        l_aux,
        l_3d,
        total,
        forwards,
        grads: Some(RoiBatchGrads { heads, d_f_ref, d_f_sensed }),
    })
}

/// Per-iteration loss record; serialized into the training log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iter: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_shift: f64,
    pub l_asc: f64,
    pub l_reg: f64,
    pub l_rpn: f64,
    pub l_aux: f64,
    pub l_3d: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    /// Mean total loss over the final epoch.
    pub final_loss: f64,
}

/// Build the head minibatch for one scene: label assignment on the
/// reference RoIs, foreground/background sampling, sensed-side jitter with
/// target enrichment, ASC neighbour sampling, and 3-D targets.
#[allow(clippy::too_many_arguments)]
fn build_roi_batch(
    model: &DetectorModel,
    scene: &ScenePair,
    proposals: &[Proposal],
    opts: &TrainOptions,
    f_ref: &FeatureMap,
    f_sensed: &FeatureMap,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<RoiBatchItem>, ModelError> {
    let cfg = &model.config;
    let labels = assign_minibatch_labels(proposals, &scene.objects, opts.fg_thr, opts.bg_thr)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let mut fg: Vec<usize> = Vec::new();
    let mut bg: Vec<usize> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            RoiLabel::Foreground { .. } => fg.push(i),
            RoiLabel::Background => bg.push(i),
            RoiLabel::Ignored => {}
        }
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    fg.truncate(opts.max_fg_per_scene);
    bg.truncate(opts.rois_per_scene.saturating_sub(fg.len()));

    let mut items = Vec::with_capacity(fg.len() + bg.len());
    for &pi in fg.iter().chain(bg.iter()) {
        let roi = proposals[pi].roi;
        let (sensed_roi, t_j) = if opts.jitter_enabled {
            roi_jitter(&roi, &opts.jitter, rng)
        } else {
            (roi, ShiftTarget::ZERO)
        };
        let (class_index, reg_target, shift_target, object_index) = match &labels[pi] {
            RoiLabel::Foreground { object_index, reg_target, shift_target } => {
                let obj = &scene.objects[*object_index];
                let ci = cfg
                    .classes
                    .iter()
                    .position(|c| *c == obj.class_label)
                    .map(|i| i + 1)
                    .ok_or_else(|| {
                        ModelError::Config(format!(
                            "scene object class {:?} unknown to the model",
                            obj.class_label
                        ))
                    })?;
                (ci, Some(*reg_target), shift_target.map(|t| t.minus(&t_j)), Some(*object_index))
            }
            _ => (0, None, None, None),
        };
        let neighbor = if opts.asc_enabled
            && model.params.rfa.is_some()
            && class_index > 0
            && shift_target.is_some()
        {
            let nb_ref = asc_pair(&roi, ModelConfig::STRIDE, rng);
            let (dx, dy) = (nb_ref.x - roi.x, nb_ref.y - roi.y);
            Some((nb_ref, sensed_roi.translated(dx, dy)))
        } else {
            None
        };
        // 3-D targets need the aligned region for the depth crop, so run the
        // head once to find it
        let target_3d = if cfg.with_3d && class_index > 0 {
            let obj = object_index.map(|i| &scene.objects[i]);
            match (obj.and_then(|o| o.box3d.as_ref()), &scene.intrinsics) {
                (Some(gt3d), Some(intr)) => {
                    let fwd =
                        forward_roi(&model.params, cfg, f_ref, f_sensed, &roi, &sensed_roi)?;
                    let patch = crop_values(&scene.sensed_image, &fwd.aligned_roi);
                    let label = &cfg.classes[class_index - 1];
                    match init_box3d(&roi, &patch, intr, &cfg.class_dims, label) {
                        Ok(init) => encode_3d_targets(&init, gt3d).ok(),
                        Err(_) => None,
                    }
                }
                _ => None,
            }
        } else {
            None
        };
        items.push(RoiBatchItem {
            roi,
            sensed_roi,
            class_index,
            reg_target,
            shift_target,
            neighbor,
            target_3d,
        });
    }
    Ok(items)
}

/// One SGD step on one scene. Returns the loss record.
fn train_step(
    model: &mut DetectorModel,
    sgd: &mut Sgd,
    scene: &ScenePair,
    opts: &TrainOptions,
    rng: &mut ChaCha20Rng,
    lr: f64,
    iter: usize,
) -> Result<TrainLogEntry, ModelError> {
    let cfg = model.config.clone();
    let stride = ModelConfig::STRIDE;

    // backbone forward with caches
    let x_ref = StreamParams::prepare_input(&scene.ref_image, 1.0);
    let x_sensed = StreamParams::prepare_input(&scene.sensed_image, cfg.sensed_scale);
    let (ref_vals, ref_cache) = model.params.stream_ref.forward_train(x_ref);
    let (sensed_vals, sensed_cache) = model.params.stream_sensed.forward_train(x_sensed);
    let f_ref = FeatureMap { values: ref_vals, stride };
    let f_sensed = FeatureMap { values: sensed_vals, stride };

    // fused RPN forward
    let fused = &f_ref.values + &f_sensed.values;
    let (raw, rpn_cache) = model.params.rpn.forward_train(fused);
    let (_, fh, fw) = f_ref.values.dim();
    let anchors = anchor_grid(&cfg.anchor_sizes, fh, fw, stride);
    let outputs = anchor_outputs(&raw, cfg.anchor_sizes.len());

    // RPN targets against reference ground truth
    let gt_boxes: Vec<&Box2D> = scene.objects.iter().filter_map(|o| o.ref_box.as_ref()).collect();
    let mut max_iou = vec![0.0f64; anchors.len()];
    let mut argmax_gt = vec![usize::MAX; anchors.len()];
    let mut best_anchor_per_gt = vec![(usize::MAX, 0.0f64); gt_boxes.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = a.iou(g);
            if v > max_iou[ai] {
                max_iou[ai] = v;
                argmax_gt[ai] = gi;
            }
            if v > best_anchor_per_gt[gi].1 {
                best_anchor_per_gt[gi] = (ai, v);
            }
        }
    }
    let mut positive = vec![false; anchors.len()];
    for (ai, &m) in max_iou.iter().enumerate() {
        if m >= opts.rpn_fg_iou {
            positive[ai] = true;
        }
    }
    for &(ai, v) in &best_anchor_per_gt {
        if ai != usize::MAX && v > 0.0 {
            positive[ai] = true;
        }
    }
    let mut pos_idx: Vec<usize> = (0..anchors.len()).filter(|&i| positive[i]).collect();
    let mut neg_idx: Vec<usize> =
        (0..anchors.len()).filter(|&i| !positive[i] && max_iou[i] < opts.rpn_bg_iou).collect();
    pos_idx.shuffle(rng);
    neg_idx.shuffle(rng);
    pos_idx.truncate(opts.rpn_sample / 2);
    neg_idx.truncate(opts.rpn_sample.saturating_sub(pos_idx.len()));

    let n_samp = pos_idx.len() + neg_idx.len();
    let mut l_rpn = 0.0;
    let mut d_raw = Array3::zeros(raw.raw_dim());
    let n_anchor_sizes = cfg.anchor_sizes.len();
    let cell_of = |idx: usize| -> (usize, usize, usize) {
        let a = idx % n_anchor_sizes;
        let cell = idx / n_anchor_sizes;
        (cell / fw, cell % fw, a)
    };
    if n_samp > 0 {
        let samples: Vec<(usize, f64)> = pos_idx
            .iter()
            .map(|&i| (i, 1.0))
            .chain(neg_idx.iter().map(|&i| (i, 0.0)))
            .collect();
        for (idx, target) in samples {
            let (y, x, a) = cell_of(idx);
            let p = sigmoid(outputs[idx].0);
            l_rpn += if target > 0.5 {
                -(p.max(1e-300)).ln()
            } else {
                -((1.0 - p).max(1e-300)).ln()
            };
            d_raw[(a * 5, y, x)] += (p - target) / n_samp as f64;
        }
        l_rpn /= n_samp as f64;
    }
    if !pos_idx.is_empty() {
        let n_pos = pos_idx.len() as f64;
        let mut l_deltas = 0.0;
        for &idx in &pos_idx {
            let (y, x, a) = cell_of(idx);
            let gt = gt_boxes[argmax_gt[idx]];
            let target = encode_box_deltas(&anchors[idx], gt);
            let pred = outputs[idx].1;
            for k in 0..4 {
                l_deltas += smooth_l1(pred[k] - target[k], opts.loss.smooth_l1_beta);
                d_raw[(a * 5 + 1 + k, y, x)] +=
                    smooth_l1_grad(pred[k] - target[k], opts.loss.smooth_l1_beta) / n_pos;
            }
        }
        l_rpn += l_deltas / n_pos;
    }

    // proposals for the heads: decoded anchors (detached) + ground truth
    let mut cands: Vec<(Box2D, f64)> = Vec::with_capacity(anchors.len());
    for (anchor, (logit, deltas)) in anchors.iter().zip(&outputs) {
        let b = clip_box(&decode_box_deltas(anchor, deltas), cfg.input);
        if b.w >= 1.0 && b.h >= 1.0 {
            cands.push((b, sigmoid(*logit)));
        }
    }
    let kept = nms(&cands, cfg.rpn_nms_iou);
    let mut proposals: Vec<Proposal> = kept
        .into_iter()
        .take(opts.train_proposals)
        .map(|i| Proposal { roi: cands[i].0, objectness: cands[i].1 })
        .collect();
    for g in &gt_boxes {
        proposals.push(Proposal { roi: **g, objectness: 1.0 });
    }

    let items = build_roi_batch(model, scene, &proposals, opts, &f_ref, &f_sensed, rng)?;
    let out = roi_batch(&model.params, &cfg, &f_ref, &f_sensed, &items, &opts.loss, true)?;
    let batch_grads = out.grads.expect("gradients requested");

    let mut grads = ModelGrads::zeros(&model.params);
    grads.heads.accumulate(&batch_grads.heads);
    let mut d_f_ref = batch_grads.d_f_ref;
    let mut d_f_sensed = batch_grads.d_f_sensed;

    // RPN backward into the fused map; the fused map is the plain sum, so
    // both streams receive the same gradient
    let (d_fused, g_rpn) = model.params.rpn.backward(&rpn_cache, &d_raw);
    grads.rpn.accumulate(&g_rpn);
    d_f_ref += &d_fused;
    d_f_sensed += &d_fused;

    let g_ref = model.params.stream_ref.backward(&ref_cache, &d_f_ref);
    grads.stream_ref.accumulate(&g_ref);
    let g_sensed = model.params.stream_sensed.backward(&sensed_cache, &d_f_sensed);
    grads.stream_sensed.accumulate(&g_sensed);

    sgd.step(&mut model.params, &grads, lr);

    Ok(TrainLogEntry {
        iter,
        lr,
        l_cls: out.breakdown.l_cls,
        l_shift: out.breakdown.l_shift,
        l_asc: out.breakdown.l_asc,
        l_reg: out.breakdown.l_reg,
        l_rpn,
        l_aux: out.l_aux,
        l_3d: out.l_3d,
        total: out.total + l_rpn,
    })
}

/// Train a model in place over a dataset. Deterministic in
/// (`opts.seed`, scene order, model initialization).
pub fn train(
    model: &mut DetectorModel,
    scenes: &[ScenePair],
    opts: &TrainOptions,
) -> Result<TrainLog, ModelError> {
    if scenes.is_empty() {
        return Err(ModelError::Config("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut sgd = Sgd::new(&mut model.params, opts.momentum);
    let total_iters = opts.epochs * scenes.len();
    let switch_at = (total_iters as f64 * opts.lr_switch) as usize;
    let mut entries = Vec::with_capacity(total_iters);
    let mut iter = 0usize;
    for _epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        for si in order {
            let lr = if iter < switch_at { opts.lr_initial } else { opts.lr_final };
            let entry = train_step(model, &mut sgd, &scenes[si], opts, &mut rng, lr, iter)?;
            entries.push(entry);
            iter += 1;
        }
    }
    let last_epoch = &entries[entries.len() - scenes.len()..];
    let final_loss = last_epoch.iter().map(|e| e.total).sum::<f64>() / scenes.len() as f64;
    Ok(TrainLog { entries, final_loss })
}

/// Mean absolute error, in pixels, of the shift head's predictions against
/// the generator's ground-truth displacement, probing each paired object at
/// its reference box.
pub fn rfa_shift_mae(model: &DetectorModel, scenes: &[ScenePair]) -> Result<f64, ModelError> {
    let Some(rfa) = &model.params.rfa else {
        return Err(ModelError::Config("model has no shift head".into()));
    };
    let cfg = &model.config;
    let pool = (cfg.pool_size, cfg.pool_size);
    let mut total = 0.0;
    let mut n = 0usize;
    for scene in scenes {
        let (f_ref, f_sensed) = super::extract_features(scene, model)?;
        for obj in &scene.objects {
            let (Some(r), Some(s)) = (&obj.ref_box, &obj.sensed_box) else { continue };
            let ctx = crate::geometry::enlarge_roi(r, cfg.context_factor, cfg.input);
            let ctx_ref = super::pool_region(&f_ref, &ctx, pool);
            let ctx_sensed = super::pool_region(&f_sensed, &ctx, pool);
            let t = rfa
                .predict(&ctx_ref.values, &ctx_sensed.values)
                .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
            let pred_dx = t.t_x * r.w;
            let pred_dy = t.t_y * r.h;
            let (dx, dy) = (s.x - r.x, s.y - r.y);
            total += 0.5 * ((pred_dx - dx).abs() + (pred_dy - dy).abs());
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::Config("no paired objects to probe".into()));
    }
    Ok(total / n as f64)
}
