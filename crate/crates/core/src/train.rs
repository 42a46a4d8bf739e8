//! Optimization loop and losses: SGD with momentum over the joint set of
//! explicit and implicit parameters, YOLO-style detection loss with
//! anchor-IoU positive assignment, multi-label classification and pairwise
//! embedding losses, plus the paired baseline-vs-implicit ablation runner
//! and the constructed offset-task trainer.

use crate::autodiff::{Tape, Var};
use crate::data::{OffsetTaskSet, SyntheticDetectionSet, TargetBox};
use crate::decode::decode_boxes;
use crate::error::{Error, Result};
use crate::implicit::{combine, init_implicit, CombineOp, InitSpec, ModelKind};
use crate::metrics::{match_dataset, simple_nms};
use crate::network::{build_toy_unified_net, count_network, AttachSpec, NetConfig, NetworkGraph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Classification-task loss weight (0 disables even if the head exists).
    pub task_cls_weight: f64,
    /// Embedding-task loss weight.
    pub task_emb_weight: f64,
    pub embed_margin: f64,
    /// Evaluate detection metrics every this many steps (0: only at the end).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            learning_rate: 0.02,
            momentum: 0.9,
            seed: 0,
            box_weight: 1.0,
            obj_weight: 2.0,
            cls_weight: 0.5,
            task_cls_weight: 0.5,
            task_emb_weight: 0.25,
            embed_margin: 1.0,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::InvalidConfig(
                "learning rate must be non-negative and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// SGD with momentum: `v <- momentum*v + lr*g`, `p <- p - v`.
pub struct Sgd<F> {
    lr: F,
    momentum: F,
    velocity: HashMap<String, Tensor<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr: F::from_f64(lr),
            momentum: F::from_f64(momentum),
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<F>)>, grads: &HashMap<String, Tensor<F>>) {
        for (name, param) in params {
            let Some(g) = grads.get(&name) else { continue };
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for ((vi, pi), gi) in v
                .data_mut()
                .iter_mut()
                .zip(param.data_mut())
                .zip(g.data())
            {
                *vi = self.momentum * *vi + self.lr * *gi;
                *pi -= *vi;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Assign {
    image: usize,
    anchor: usize,
    gx: usize,
    gy: usize,
    target: TargetBox,
}

fn shape_iou(w: f64, h: f64, anchor: (f64, f64)) -> f64 {
    let inter = w.min(anchor.0) * h.min(anchor.1);
    let union = w * h + anchor.0 * anchor.1 - inter;
    inter / union
}

/// Positive-cell assignment: each target claims its best-shape anchor,
/// plus any anchor whose shape IoU exceeds 0.5. One cell per (scale,
/// anchor); first claim wins.
fn assign_targets(
    targets: &[&[TargetBox]],
    anchors: &[Vec<(f64, f64)>],
    strides: &[usize],
    grid_sizes: &[(usize, usize)],
) -> Vec<Vec<Assign>> {
    let mut out: Vec<Vec<Assign>> = vec![Vec::new(); anchors.len()];
    let mut taken: HashSet<(usize, usize, usize, usize, usize)> = HashSet::new();
    for (image, boxes) in targets.iter().enumerate() {
        for t in boxes.iter() {
            let (w, h) = (t.width(), t.height());
            let mut scored: Vec<(f64, usize, usize)> = Vec::new();
            for (s, scale_anchors) in anchors.iter().enumerate() {
                for (a, &anchor) in scale_anchors.iter().enumerate() {
                    scored.push((shape_iou(w, h, anchor), s, a));
                }
            }
            scored.sort_by(|x, y| y.0.total_cmp(&x.0));
            for (rank, &(iou, s, a)) in scored.iter().enumerate() {
                if rank > 0 && iou <= 0.5 {
                    break;
                }
                let (cx, cy) = t.center();
                let (gw, gh) = grid_sizes[s];
                let gx = ((cx / strides[s] as f64) as usize).min(gw - 1);
                let gy = ((cy / strides[s] as f64) as usize).min(gh - 1);
                if taken.insert((image, s, a, gy, gx)) {
                    out[s].push(Assign {
                        image,
                        anchor: a,
                        gx,
                        gy,
                        target: *t,
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DetLossParts {
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub positives: usize,
}

/// Elementwise `min(a, const)` composed from existing primitives.
fn min_c<F: Scalar>(tape: &mut Tape<F>, a: Var, c: Var) -> Result<Var> {
    let d = tape.sub(a, c)?;
    let r = tape.relu(d)?;
    tape.sub(a, r)
}

/// Elementwise `max(a, const)`.
fn max_c<F: Scalar>(tape: &mut Tape<F>, a: Var, c: Var) -> Result<Var> {
    let d = tape.sub(c, a)?;
    let r = tape.relu(d)?;
    tape.add(a, r)
}

/// IoU-based box regression + objectness BCE + per-class BCE with
/// anchor-IoU positive assignment. Batches with no positive assignment
/// contribute a zero box/class term while objectness still trains.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss<F: Scalar>(
    tape: &mut Tape<F>,
    det_vars: &[Var],
    targets: &[&[TargetBox]],
    anchors: &[Vec<(f64, f64)>],
    strides: &[usize],
    anchors_per_scale: usize,
    num_classes: usize,
    weights: (f64, f64, f64),
) -> Result<(Var, DetLossParts)> {
    let block = 5 + num_classes;
    let batch = targets.len();
    let grid_sizes: Vec<(usize, usize)> = det_vars
        .iter()
        .map(|&v| {
            let s = tape.value(v).shape();
            (s[3], s[2])
        })
        .collect();
    let assignments = assign_targets(targets, anchors, strides, &grid_sizes);
    let positives: usize = assignments.iter().map(|a| a.len()).sum();

    // objectness over every cell of every scale
    let mut obj_sel: Option<Var> = None;
    let mut obj_target: Vec<F> = Vec::new();
    for (s, &raw) in det_vars.iter().enumerate() {
        let (gw, gh) = grid_sizes[s];
        let chans = anchors_per_scale * block;
        let mut indices = Vec::with_capacity(batch * anchors_per_scale * gh * gw);
        for n in 0..batch {
            for a in 0..anchors_per_scale {
                let ch = a * block + 4;
                for gy in 0..gh {
                    for gx in 0..gw {
                        indices.push(((n * chans + ch) * gh + gy) * gw + gx);
                    }
                }
            }
        }
        let mut tgt = vec![F::zero(); indices.len()];
        for asg in &assignments[s] {
            let flat =
                ((asg.image * anchors_per_scale + asg.anchor) * gh + asg.gy) * gw + asg.gx;
            tgt[flat] = F::one();
        }
        obj_target.extend_from_slice(&tgt);
        let sel = tape.select(raw, indices)?;
        obj_sel = Some(match obj_sel {
            None => sel,
            Some(prev) => tape.concat(prev, sel, 0)?,
        });
    }
    let obj_sel = obj_sel.ok_or_else(|| Error::InvalidConfig("no detection scales".into()))?;
    let obj_t = tape.constant(Tensor::new(vec![obj_target.len()], obj_target)?);
    let obj_loss = tape.bce_loss(obj_sel, obj_t)?;

    // box + class terms at positive cells
    let mut box_sum: Option<Var> = None;
    let mut cls_sel: Option<Var> = None;
    let mut cls_target: Vec<F> = Vec::new();
    for (s, &raw) in det_vars.iter().enumerate() {
        let asg = &assignments[s];
        if asg.is_empty() {
            continue;
        }
        let (gw, gh) = grid_sizes[s];
        let chans = anchors_per_scale * block;
        let stride = strides[s] as f64;
        let p = asg.len();
        let flat = |a: &Assign, ch: usize| ((a.image * chans + a.anchor * block + ch) * gh + a.gy) * gw + a.gx;

        let gather = |tape: &mut Tape<F>, ch: usize| -> Result<Var> {
            tape.select(raw, asg.iter().map(|a| flat(a, ch)).collect())
        };
        let consts = |vals: Vec<f64>| -> Tensor<F> {
            Tensor::new(vec![vals.len()], vals.into_iter().map(F::from_f64).collect())
                .expect("lengths agree")
        };

        let tx = gather(tape, 0)?;
        let ty = gather(tape, 1)?;
        let tw = gather(tape, 2)?;
        let th = gather(tape, 3)?;

        let gx_c = tape.constant(consts(asg.iter().map(|a| a.gx as f64).collect()));
        let gy_c = tape.constant(consts(asg.iter().map(|a| a.gy as f64).collect()));
        let aw_c = tape.constant(consts(asg.iter().map(|a| anchors[s][a.anchor].0).collect()));
        let ah_c = tape.constant(consts(asg.iter().map(|a| anchors[s][a.anchor].1).collect()));

        // additive center decode, bounded to the owning cell
        let sx = tape.sigmoid(tx)?;
        let sy = tape.sigmoid(ty)?;
        let cx_cell = tape.add(sx, gx_c)?;
        let cy_cell = tape.add(sy, gy_c)?;
        let bx = tape.affine(cx_cell, F::from_f64(stride), F::zero())?;
        let by = tape.affine(cy_cell, F::from_f64(stride), F::zero())?;
        // multiplicative size decode against the anchor
        let clamp = F::from_f64(crate::decode::SIZE_CLAMP);
        let cw = tape.clamp(tw, -clamp, clamp)?;
        let ch_ = tape.clamp(th, -clamp, clamp)?;
        let ew = tape.exp(cw)?;
        let eh = tape.exp(ch_)?;
        let bw = tape.mul(ew, aw_c)?;
        let bh = tape.mul(eh, ah_c)?;

        let half = F::from_f64(0.5);
        let hw = tape.affine(bw, half, F::zero())?;
        let hh = tape.affine(bh, half, F::zero())?;
        let x1 = tape.sub(bx, hw)?;
        let x2 = tape.add(bx, hw)?;
        let y1 = tape.sub(by, hh)?;
        let y2 = tape.add(by, hh)?;

        let tx1 = tape.constant(consts(asg.iter().map(|a| a.target.x1).collect()));
        let tx2 = tape.constant(consts(asg.iter().map(|a| a.target.x2).collect()));
        let ty1 = tape.constant(consts(asg.iter().map(|a| a.target.y1).collect()));
        let ty2 = tape.constant(consts(asg.iter().map(|a| a.target.y2).collect()));
        let tarea = tape.constant(consts(asg.iter().map(|a| a.target.area()).collect()));

        let ix_hi = min_c(tape, x2, tx2)?;
        let ix_lo = max_c(tape, x1, tx1)?;
        let iy_hi = min_c(tape, y2, ty2)?;
        let iy_lo = max_c(tape, y1, ty1)?;
        let ix_d = tape.sub(ix_hi, ix_lo)?;
        let iy_d = tape.sub(iy_hi, iy_lo)?;
        let ix = tape.relu(ix_d)?;
        let iy = tape.relu(iy_d)?;
        let inter = tape.mul(ix, iy)?;
        let parea = tape.mul(bw, bh)?;
        let asum = tape.add(parea, tarea)?;
        let union = tape.sub(asum, inter)?;
        let union_eps = tape.affine(union, F::one(), F::from_f64(1e-9))?;
        let iou = tape.div(inter, union_eps)?;
        // sum of (1 - IoU) over this scale's positives
        let one_minus = tape.affine(iou, -F::one(), F::one())?;
        let scale_sum = tape.sum(one_minus)?;
        box_sum = Some(match box_sum {
            None => scale_sum,
            Some(prev) => tape.add(prev, scale_sum)?,
        });

        // class logits at positives
        let mut cls_idx = Vec::with_capacity(p * num_classes);
        for a in asg {
            for k in 0..num_classes {
                cls_idx.push(flat(a, 5 + k));
            }
            for k in 0..num_classes {
                cls_target.push(if k == a.target.class_id {
                    F::one()
                } else {
                    F::zero()
                });
            }
        }
        let sel = tape.select(raw, cls_idx)?;
        cls_sel = Some(match cls_sel {
            None => sel,
            Some(prev) => tape.concat(prev, sel, 0)?,
        });
    }

    let box_loss = match box_sum {
        Some(s) => tape.affine(s, F::from_f64(1.0 / positives as f64), F::zero())?,
        None => tape.constant(Tensor::scalar(F::zero())),
    };
    let cls_loss = match cls_sel {
        Some(sel) => {
            let t = tape.constant(Tensor::new(vec![cls_target.len()], cls_target)?);
            tape.bce_loss(sel, t)?
        }
        None => tape.constant(Tensor::scalar(F::zero())),
    };

    let total = tape.weighted_sum(&[
        (box_loss, F::from_f64(weights.0)),
        (obj_loss, F::from_f64(weights.1)),
        (cls_loss, F::from_f64(weights.2)),
    ])?;
    let parts = DetLossParts {
        box_loss: tape.value(box_loss).item().to_f64(),
        obj_loss: tape.value(obj_loss).item().to_f64(),
        cls_loss: tape.value(cls_loss).item().to_f64(),
        positives,
    };
    Ok((total, parts))
}

/// Per-class binary cross-entropy on multi-label targets.
pub fn classification_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &[Vec<f64>],
) -> Result<Var> {
    let k = tape.value(logits).shape()[1];
    let mut flat = Vec::with_capacity(labels.len() * k);
    for row in labels {
        debug_assert_eq!(row.len(), k);
        flat.extend(row.iter().map(|&v| F::from_f64(v)));
    }
    let t = tape.constant(Tensor::new(vec![labels.len(), k], flat)?);
    tape.bce_loss(logits, t)
}

/// Margin-based pairwise loss on squared embedding distances: same-label
/// pairs are pulled together, different-label pairs pushed past the
/// margin. Returns `None` when the batch has no pairs.
pub fn embedding_loss<F: Scalar>(
    tape: &mut Tape<F>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Option<Var>> {
    let shape = tape.value(embeddings).shape().to_vec();
    let (n, e) = (shape[0], shape[1]);
    if n < 2 {
        return Ok(None);
    }
    let mut terms: Vec<Var> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let ri = tape.select(embeddings, (i * e..(i + 1) * e).collect())?;
            let rj = tape.select(embeddings, (j * e..(j + 1) * e).collect())?;
            let d = tape.sub(ri, rj)?;
            let sq = tape.mul(d, d)?;
            let d2 = tape.sum(sq)?;
            let term = if labels[i] == labels[j] {
                d2
            } else {
                let gap = tape.affine(d2, -F::one(), F::from_f64(margin))?;
                tape.relu(gap)?
            };
            terms.push(term);
        }
    }
    let count = terms.len();
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(Some(tape.affine(
        acc,
        F::from_f64(1.0 / count as f64),
        F::zero(),
    )?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub det_box: f64,
    pub det_obj: f64,
    pub det_cls: f64,
    pub cls_task: f64,
    pub emb_task: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Per-step loss trace plus eval snapshots; the learning-curve artifact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub wall_ms: u128,
    pub param_digest: u64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,det_box,det_obj,det_cls,cls_task,emb_task,precision,recall\n");
        let eval_at: HashMap<usize, &EvalRecord> =
            self.evals.iter().map(|e| (e.step, e)).collect();
        for r in &self.steps {
            let (p, rc) = eval_at
                .get(&r.step)
                .map(|e| (e.precision.to_string(), e.recall.to_string()))
                .unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.step, r.total, r.det_box, r.det_obj, r.det_cls, r.cls_task, r.emb_task, p, rc
            ));
        }
        s
    }

    /// Moving average of the total loss over `window` steps.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.steps.iter().map(|r| r.total).collect();
        let mut out = Vec::with_capacity(totals.len());
        let mut acc = 0.0;
        for i in 0..totals.len() {
            acc += totals[i];
            if i >= window {
                acc -= totals[i - window];
            }
            out.push(acc / (i + 1).min(window) as f64);
        }
        out
    }

    /// Fractional drop of the smoothed loss from `window` steps in to the
    /// final step: `1 - final/baseline`.
    pub fn smoothed_reduction(&self, window: usize) -> f64 {
        let sm = self.smoothed_total(window);
        if sm.len() <= window {
            return 0.0;
        }
        let baseline = sm[window - 1];
        let last = *sm.last().expect("non-empty");
        1.0 - last / baseline
    }
}

struct BatchLoss {
    total: Var,
    det: DetLossParts,
    cls_task: f64,
    emb_task: f64,
}

fn batch_loss<F: Scalar>(
    tape: &mut Tape<F>,
    net: &NetworkGraph<F>,
    data: &SyntheticDetectionSet,
    indices: &[usize],
    images: &Tensor<F>,
    cfg: &TrainConfig,
) -> Result<(BatchLoss, Vec<(String, Var)>)> {
    let pass = net.forward(tape, images, true)?;
    let mut terms: Vec<(Var, F)> = Vec::new();

    let target_refs: Vec<&[TargetBox]> = indices
        .iter()
        .map(|&i| data.targets[i].as_slice())
        .collect();
    let (det_total, det_parts) = detection_loss(
        tape,
        &pass.outputs.detection,
        &target_refs,
        &net.anchors,
        &net.strides,
        net.config.anchors_per_scale,
        net.config.num_classes,
        (cfg.box_weight, cfg.obj_weight, cfg.cls_weight),
    )?;
    terms.push((det_total, F::one()));

    let mut cls_task = 0.0;
    if let Some(logits) = pass.outputs.classification {
        if cfg.task_cls_weight > 0.0 {
            let labels: Vec<Vec<f64>> = indices.iter().map(|&i| data.multilabel(i)).collect();
            let l = classification_loss(tape, logits, &labels)?;
            cls_task = tape.value(l).item().to_f64();
            terms.push((l, F::from_f64(cfg.task_cls_weight)));
        }
    }
    let mut emb_task = 0.0;
    if let Some(emb) = pass.outputs.embedding {
        if cfg.task_emb_weight > 0.0 {
            let labels: Vec<usize> = indices.iter().map(|&i| data.dominant_class(i)).collect();
            if let Some(l) = embedding_loss(tape, emb, &labels, cfg.embed_margin)? {
                emb_task = tape.value(l).item().to_f64();
                terms.push((l, F::from_f64(cfg.task_emb_weight)));
            }
        }
    }

    let total = tape.weighted_sum(&terms)?;
    Ok((
        BatchLoss {
            total,
            det: det_parts,
            cls_task,
            emb_task,
        },
        pass.param_vars,
    ))
}

/// Detection metrics of the current parameters on a dataset.
pub fn evaluate_detection<F: Scalar>(
    net: &NetworkGraph<F>,
    data: &SyntheticDetectionSet,
    conf_threshold: f64,
) -> Result<crate::metrics::DetMetrics> {
    let mut all_preds = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let mut tape = Tape::new();
        let images = data.render_batch::<F>(&[i]);
        let pass = net.forward(&mut tape, &images, false)?;
        let out = net.detection_output(&tape, &pass);
        let decoded = decode_boxes(&out, conf_threshold)?;
        all_preds.push(simple_nms(decoded.into_iter().next().unwrap_or_default(), 0.5));
    }
    Ok(match_dataset(&all_preds, &data.targets, 0.5))
}

/// Joint SGD over explicit and implicit parameters. Deterministic for a
/// fixed seed and config. Aborts with a diagnostic naming the first
/// NaN-producing op if the loss turns non-finite.
pub fn train<F: Scalar>(
    net: &mut NetworkGraph<F>,
    data: &SyntheticDetectionSet,
    eval_data: Option<&SyntheticDetectionSet>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.image_size != net.config.image_size {
        return Err(Error::InvalidConfig(format!(
            "data image size {} does not match network {}",
            data.image_size, net.config.image_size
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let images = data.render_batch::<F>(&indices);

        let mut tape = Tape::new();
        let (loss, param_vars) = batch_loss(&mut tape, net, data, &indices, &images, cfg)?;
        let total = tape.value(loss.total).item().to_f64();
        if !total.is_finite() {
            // replay the same batch with per-op checks to name the culprit
            let mut diag = Tape::with_finite_checks();
            match batch_loss(&mut diag, net, data, &indices, &images, cfg) {
                Err(e @ Error::NonFinite { .. }) => return Err(e),
                _ => {
                    return Err(Error::NonFinite {
                        op: "loss".to_string(),
                        node: diag.len(),
                    })
                }
            }
        }
        tape.backward(loss.total)?;
        let mut grads: HashMap<String, Tensor<F>> = HashMap::with_capacity(param_vars.len());
        for (name, var) in param_vars {
            if let Some(g) = tape.grad(var) {
                grads.insert(name, g.clone());
            }
        }
        sgd.step(net.trainable_mut(), &grads);

        log.steps.push(StepRecord {
            step: step + 1,
            total,
            det_box: loss.det.box_loss,
            det_obj: loss.det.obj_loss,
            det_cls: loss.det.cls_loss,
            cls_task: loss.cls_task,
            emb_task: loss.emb_task,
        });
        if let Some(eval) = eval_data {
            let due = cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0;
            if due || step + 1 == cfg.steps {
                let m = evaluate_detection(net, eval, 0.25)?;
                log.evals.push(EvalRecord {
                    step: step + 1,
                    precision: m.precision(),
                    recall: m.recall(),
                });
            }
        }
    }
    log.wall_ms = start.elapsed().as_millis();
    log.param_digest = net
        .trainable()
        .iter()
        .fold(0xcbf29ce484222325u64, |acc, (_, t)| {
            acc.rotate_left(1) ^ t.digest()
        });
    Ok(log)
}

/// One ablation variant: a row label and the attachments that realize it.
#[derive(Clone, Debug)]
pub struct AblationVariant {
    pub label: String,
    pub attachments: Vec<AttachSpec>,
}

impl AblationVariant {
    pub fn from_specs(attachments: Vec<AttachSpec>) -> Self {
        let label = attachments
            .iter()
            .map(AttachSpec::label)
            .collect::<Vec<_>>()
            .join(",");
        Self { label, attachments }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub final_loss: f64,
    pub smoothed_final: f64,
    pub precision: f64,
    pub recall: f64,
    pub params: usize,
    pub implicit_params: usize,
}

#[derive(Clone, Debug, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,final_loss,smoothed_final,precision,recall,params,implicit_params\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label, r.final_loss, r.smoothed_final, r.precision, r.recall, r.params, r.implicit_params
            ));
        }
        s
    }
}

impl std::fmt::Display for AblationTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<12} {:>12} {:>12} {:>10} {:>10} {:>10} {:>9}",
            "model", "final_loss", "smoothed", "precision", "recall", "params", "implicit"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<12} {:>12.5} {:>12.5} {:>10.3} {:>10.3} {:>10} {:>9}",
                r.label,
                r.final_loss,
                r.smoothed_final,
                r.precision,
                r.recall,
                r.params,
                r.implicit_params
            )?;
        }
        Ok(())
    }
}

/// Trains the baseline plus each variant on identical data and seed, one
/// worker thread per variant, and tabulates final metrics.
pub fn paired_ablation<F: Scalar>(
    base_config: &NetConfig,
    variants: &[AblationVariant],
    data: &SyntheticDetectionSet,
    eval: &SyntheticDetectionSet,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    if data.image_size != base_config.image_size || eval.image_size != base_config.image_size {
        return Err(Error::InvalidConfig(
            "ablation variants must share the data signature".into(),
        ));
    }
    let mut runs: Vec<(String, NetConfig)> = Vec::with_capacity(variants.len() + 1);
    let mut baseline = base_config.clone();
    baseline.attachments.clear();
    runs.push(("baseline".to_string(), baseline));
    for v in variants {
        let mut c = base_config.clone();
        c.attachments = v.attachments.clone();
        runs.push((v.label.clone(), c));
    }

    let results: Vec<Result<AblationRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|(label, config)| {
                scope.spawn(move || -> Result<AblationRow> {
                    let mut net = build_toy_unified_net::<F>(config)?;
                    let log = train(&mut net, data, Some(eval), cfg)?;
                    let counts = count_network(&net);
                    let sm = log.smoothed_total(50);
                    Ok(AblationRow {
                        label: label.clone(),
                        final_loss: log.steps.last().map_or(0.0, |r| r.total),
                        smoothed_final: sm.last().copied().unwrap_or(0.0),
                        precision: log.evals.last().map_or(0.0, |e| e.precision),
                        recall: log.evals.last().map_or(0.0, |e| e.recall),
                        params: counts.params,
                        implicit_params: counts.implicit_params,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut table = AblationTable::default();
    for r in results {
        table.rows.push(r?);
    }
    Ok(table)
}

/// Configuration for the constructed offset-task runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OffsetRunConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub kind: ModelKind,
    pub sigma: f64,
}

impl Default for OffsetRunConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 0.3,
            momentum: 0.9,
            seed: 0,
            kind: ModelKind::Vector,
            sigma: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OffsetRunResult {
    /// Full-dataset loss after every step.
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Trains a linear trunk on the offset task, either with per-branch
/// additive implicit constants or as a purely shared baseline (both
/// branches read the same prediction). Full-batch gradient descent.
pub fn train_offset_task<F: Scalar>(
    data: &OffsetTaskSet<F>,
    use_implicit: bool,
    cfg: &OffsetRunConfig,
) -> Result<OffsetRunResult> {
    let d = data.inputs.shape()[1];
    let c = data.channels();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weight = Tensor::<F>::randn(&[c, d], 0.0, 0.01, &mut rng);
    let mut bias = Tensor::<F>::zeros(&[c]);
    let mut model_a = init_implicit::<F>(
        cfg.kind,
        c,
        CombineOp::Addition,
        InitSpec { sigma: cfg.sigma, seed: cfg.seed.wrapping_add(1) },
    )?;
    let mut model_b = init_implicit::<F>(
        cfg.kind,
        c,
        CombineOp::Addition,
        InitSpec { sigma: cfg.sigma, seed: cfg.seed.wrapping_add(2) },
    )?;

    let half = F::from_f64(0.5);
    let lr = F::from_f64(cfg.learning_rate);
    let mom = F::from_f64(cfg.momentum);
    let mut vel: Vec<Tensor<F>> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(data.inputs.clone());
        let w = tape.param(weight.clone());
        let b = tape.param(bias.clone());
        let wt = tape.transpose2d(w)?;
        let base = tape.matmul(x, wt)?;
        let shared = tape.add(base, b)?;

        let (pred_a, leaves_a, pred_b, leaves_b) = if use_implicit {
            let (pa, la) = combine(&mut tape, shared, &model_a, CombineOp::Addition)?;
            let (pb, lb) = combine(&mut tape, shared, &model_b, CombineOp::Addition)?;
            (pa, la, pb, lb)
        } else {
            (shared, Vec::new(), shared, Vec::new())
        };
        let ya = tape.constant(data.targets_a.clone());
        let yb = tape.constant(data.targets_b.clone());
        let la = tape.mse_loss(pred_a, ya)?;
        let lb = tape.mse_loss(pred_b, yb)?;
        let loss = tape.weighted_sum(&[(la, half), (lb, half)])?;
        losses.push(tape.value(loss).item().to_f64());
        tape.backward(loss)?;

        // collect (tensor, grad) pairs in a stable order
        let mut updates: Vec<(&mut Tensor<F>, Tensor<F>)> = Vec::new();
        let gw = tape.grad(w).cloned().unwrap_or_else(|| Tensor::zeros(weight.shape()));
        let gb = tape.grad(b).cloned().unwrap_or_else(|| Tensor::zeros(bias.shape()));
        updates.push((&mut weight, gw));
        updates.push((&mut bias, gb));
        if use_implicit {
            for (model, leaves) in [(&mut model_a, &leaves_a), (&mut model_b, &leaves_b)] {
                for ((_, tensor), (_, var)) in model.param_tensors_mut().into_iter().zip(leaves) {
                    let g = tape
                        .grad(*var)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
                    updates.push((tensor, g));
                }
            }
        }
        if vel.len() != updates.len() {
            vel = updates
                .iter()
                .map(|(t, _)| Tensor::zeros(t.shape()))
                .collect();
        }
        for (slot, (param, grad)) in updates.into_iter().enumerate() {
            let v = &mut vel[slot];
            for ((vi, pi), gi) in v.data_mut().iter_mut().zip(param.data_mut()).zip(grad.data()) {
                *vi = mom * *vi + lr * *gi;
                *pi -= *vi;
            }
        }
    }
    Ok(OffsetRunResult {
        final_loss: losses.last().copied().unwrap_or(f64::MAX),
        losses,
    })
}
