//! Desk-scale training on synthetic moving-shape streams: dataset
//! generation, Adam with a one-cycle schedule, and held-out evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::event_io::{
    build_event_tensor, synthesize_moving_shapes, BBox, EventStream, ShapeKind, ShapeSpec,
    SyntheticScene, LABEL_PERIOD_MS,
};
use crate::graph::{GraphCtx, GraphMode, ParamKind, Parameterized};
use crate::head::{decode, toy_loss, toy_loss_graph, Detection, Targets};
use crate::layers::NORM_EPS;
use crate::model::{Model, ModelSpec, INPUT_CHANNELS};
use crate::numerics::norm::{update_running, BN_MOMENTUM};
use crate::numerics::Tensor;

/// Consecutive detection windows cut from one synthetic stream.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[T, 2, H, W]` per window.
    pub windows: Vec<Tensor<f64>>,
    /// Boxes at each window's end, in feature-grid units.
    pub boxes: Vec<Vec<BBox>>,
}

/// A scene whose shapes stay inside the sensor for `duration_ms`.
pub fn random_scene(cfg: &RunConfig, duration_ms: u64, seed: u64) -> SyntheticScene {
    let s = &cfg.synthetic;
    let (w, h) = (cfg.simulation.width as f64, cfg.simulation.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secs = duration_ms as f64 / 1000.0;
    let shapes = (0..s.shapes)
        .map(|_| {
            let size = rng.gen_range(s.size_min..=s.size_max).min(w.min(h) - 1.0);
            let r = size / 2.0 + 0.5;
            let mut speed = rng.gen_range(s.speed_min..=s.speed_max);
            let angle = rng.gen_range(0.0..2.0 * PI);
            // shrink the speed until the travel fits inside the sensor
            let (mut dx, mut dy);
            loop {
                dx = speed * angle.cos() * secs;
                dy = speed * angle.sin() * secs;
                if dx.abs() <= w - 2.0 * r && dy.abs() <= h - 2.0 * r {
                    break;
                }
                speed *= 0.8;
            }
            let x0 = rng.gen_range((r - dx.min(0.0))..=(w - r - dx.max(0.0)));
            let y0 = rng.gen_range((r - dy.min(0.0))..=(h - r - dy.max(0.0)));
            ShapeSpec {
                kind: ShapeKind::Square,
                size,
                intensity: rng.gen_range(s.intensity_min..=s.intensity_max),
                center: (x0, y0),
                velocity: (speed * angle.cos(), speed * angle.sin()),
            }
        })
        .collect();
    SyntheticScene {
        width: cfg.simulation.width as u32,
        height: cfg.simulation.height as u32,
        background: s.background,
        shapes,
        contrast_threshold: s.contrast_threshold,
        seed,
    }
}

/// Event tensor of the window ending at `t_end_us`: the last `steps` bins.
pub fn window_tensor(stream: &EventStream, cfg: &RunConfig, t_end_us: u64) -> Result<Tensor<f64>> {
    let span = cfg.simulation.bin_ms * cfg.simulation.steps as u64 * 1000;
    let t_a = t_end_us
        .checked_sub(span)
        .ok_or_else(|| Error::invalid("window_tensor", "window starts before the stream"))?;
    Ok(build_event_tensor(stream, t_a, t_end_us, cfg.simulation.steps)?.to_tensor())
}

/// Pixel box to feature-grid units.
pub fn to_grid(b: &BBox, cfg: &RunConfig, grid: (usize, usize)) -> BBox {
    let sx = grid.1 as f64 / cfg.simulation.width as f64;
    let sy = grid.0 as f64 / cfg.simulation.height as f64;
    BBox {
        x0: b.x0 * sx,
        y0: b.y0 * sy,
        x1: b.x1 * sx,
        y1: b.y1 * sy,
    }
}

pub fn make_samples(cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    let spec = cfg.model_spec()?;
    let [_, gh, gw] = spec.feature_shape()?;
    let seq = cfg.training.seq_len;
    let window = cfg.simulation.window_ms;
    // labels arrive every LABEL_PERIOD_MS; skip those earlier than one full window
    let lead = window.div_ceil(LABEL_PERIOD_MS) * LABEL_PERIOD_MS - LABEL_PERIOD_MS;
    let duration = lead + seq as u64 * LABEL_PERIOD_MS;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let scene = random_scene(cfg, duration, seeds.gen());
            let out = synthesize_moving_shapes(&scene, duration)?;
            let usable: Vec<_> = out
                .labels
                .iter()
                .filter(|l| l.t_end_us >= window * 1000)
                .take(seq)
                .collect();
            if usable.len() < seq {
                return Err(Error::invalid(
                    "make_samples",
                    out.warning.unwrap_or_else(|| "stream too short".into()),
                ));
            }
            let mut sample = Sample {
                windows: Vec::with_capacity(seq),
                boxes: Vec::with_capacity(seq),
            };
            for l in usable {
                sample
                    .windows
                    .push(window_tensor(&out.stream, cfg, l.t_end_us)?);
                sample
                    .boxes
                    .push(l.boxes.iter().map(|b| to_grid(b, cfg, (gh, gw))).collect());
            }
            Ok(sample)
        })
        .collect()
}

/// Time-major batch `[T * B, 2, H, W]` of window `w` of each sample.
pub fn stack_window(samples: &[&Sample], w: usize, spec: &ModelSpec) -> Result<Tensor<f64>> {
    let (t, b) = (spec.steps, samples.len());
    let frame = INPUT_CHANNELS * spec.height * spec.width;
    let mut data = vec![0.0; t * b * frame];
    for (bi, s) in samples.iter().enumerate() {
        let x = &s.windows[w];
        for ti in 0..t {
            data[(ti * b + bi) * frame..(ti * b + bi + 1) * frame]
                .copy_from_slice(&x.data()[ti * frame..(ti + 1) * frame]);
        }
    }
    Tensor::new(&[t * b, INPUT_CHANNELS, spec.height, spec.width], data)
}

/// Learning rate at `step` of `total`: cosine warm-up from `peak / 25` over
/// the first 30% of steps, then cosine decay to `peak / 2.5e5`.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64) -> f64 {
    let warm = ((total as f64) * 0.3).max(1.0);
    let (start, end) = (peak / 25.0, peak / 25.0 / 1e4);
    let s = step as f64;
    let cos = |from: f64, to: f64, frac: f64| {
        to + (from - to) * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos()) / 2.0
    };
    if s < warm {
        cos(start, peak, s / warm)
    } else {
        cos(peak, end, (s - warm) / ((total as f64 - warm).max(1.0)))
    }
}

/// Adam with decoupled weight decay; moments are keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f64>>,
    pub v: BTreeMap<String, Tensor<f64>>,
    pub weight_decay: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            ..Adam::default()
        }
    }

    pub fn update<M: Parameterized<f64>>(
        &mut self,
        model: &mut M,
        grads: &BTreeMap<String, Tensor<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        for (name, p, kind) in model.named_params_mut() {
            if kind != ParamKind::Trainable {
                continue;
            }
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::invalid("adam", format!("no gradient for `{name}`")))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                *pi -= lr * ((*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS) + self.weight_decay * *pi);
            }
        }
        Ok(())
    }
}

/// Applies batch statistics gathered by a training-mode pass.
pub fn apply_bn_stats<M: Parameterized<f64>>(model: &mut M, ctx: &GraphCtx<f64>) {
    let stats = ctx.bn_stats();
    if stats.is_empty() {
        return;
    }
    let mut params: BTreeMap<String, &mut Tensor<f64>> = model
        .named_params_mut()
        .into_iter()
        .map(|(n, t, _)| (n, t))
        .collect();
    for (prefix, s) in stats {
        if let Some(m) = params.get_mut(&format!("{prefix}.running_mean")) {
            update_running(m.data_mut(), &s.mean, BN_MOMENTUM);
        }
        if let Some(v) = params.get_mut(&format!("{prefix}.running_var")) {
            update_running(v.data_mut(), &s.var, BN_MOMENTUM);
        }
    }
}

fn clip(grads: &mut BTreeMap<String, Tensor<f64>>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Mean loss over the windows of a batch of samples, recorded on `ctx`.
pub fn batch_loss(
    model: &Model<f64>,
    ctx: &mut GraphCtx<f64>,
    batch: &[&Sample],
) -> Result<crate::numerics::tape::Var> {
    let [_, gh, gw] = model.spec.feature_shape()?;
    let seq = batch[0].windows.len();
    let mut state = Vec::new();
    let mut total = None;
    for w in 0..seq {
        let x = stack_window(batch, w, &model.spec)?;
        let targets: Vec<Targets<f64>> = batch
            .iter()
            .map(|s| Targets::build(&s.boxes[w], gh, gw))
            .collect::<Result<_>>()?;
        let xv = ctx.tape.constant(x);
        let pred = model.graph(ctx, xv, &mut state)?;
        let l = toy_loss_graph(ctx, pred, &targets)?;
        total = Some(match total {
            None => l,
            Some(t) => ctx.tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("batch_loss", "empty sample"))?;
    Ok(ctx.tape.affine(total, 1.0 / seq as f64, 0.0))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f64>,
    pub optimizer: Adam,
    /// Training loss of every step.
    pub losses: Vec<f64>,
}

/// Trains the toy model from `seed`-derived initialization on `data`.
/// Reductions are sequential, so equal inputs give bit-identical results.
pub fn train(
    cfg: &RunConfig,
    data: &[Sample],
    mut log: impl FnMut(usize, f64, f64),
) -> Result<TrainOutcome> {
    let spec = cfg.model_spec()?;
    if spec.head_hidden.is_none() {
        return Err(Error::Config(
            "training needs the toy head (arch.head = true)".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }
    let t = &cfg.training;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let mut model = Model::<f64>::new(spec, &mut rng)?;
    let mut opt = Adam::new(t.weight_decay);
    let mut losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let batch: Vec<&Sample> = (0..t.batch)
            .map(|_| &data[rng.gen_range(0..data.len())])
            .collect();
        let mut ctx = GraphCtx::new(GraphMode::TRAIN);
        let loss = batch_loss(&model, &mut ctx, &batch)?;
        let value = ctx.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at step {step}"),
            });
        }
        let mut grads = ctx.param_grads(loss)?;
        clip(&mut grads, t.grad_clip);
        let lr = one_cycle_lr(step, t.steps, t.lr);
        opt.update(&mut model, &grads, lr)?;
        apply_bn_stats(&mut model, &ctx);
        losses.push(value);
        log(step, value, lr);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub windows: usize,
    /// Windows whose predicted center lies within `radius` cells of the
    /// ground-truth center.
    pub hits: usize,
    pub radius: f64,
    /// Mean Euclidean center error in grid cells.
    pub mean_center_error: f64,
    pub mean_loss: f64,
    /// Average precision at IoU 0.5 over all windows.
    pub ap50: f64,
}

impl EvalReport {
    pub fn hit_rate(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.hits as f64 / self.windows as f64
        }
    }
}

/// Eval-mode pass over every window, LSTM state carried within a sample.
pub fn evaluate(model: &Model<f64>, data: &[Sample], radius: f64) -> Result<EvalReport> {
    let [_, gh, gw] = model.spec.feature_shape()?;
    let mut rep = EvalReport {
        windows: 0,
        hits: 0,
        radius,
        mean_center_error: 0.0,
        mean_loss: 0.0,
        ap50: 0.0,
    };
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for s in data {
        let mut state = model.initial_state();
        for (x, boxes) in s.windows.iter().zip(&s.boxes) {
            let out = model.forward_window(x, &mut state)?;
            let det = out
                .detection
                .ok_or_else(|| Error::Config("evaluation needs the toy head".into()))?;
            rep.mean_loss += toy_loss(&det, &Targets::build(boxes, gh, gw)?)?;
            n_gt += boxes.len();
            scored.extend(match_detections(
                &decode(&det, AP_MIN_SCORE, AP_NMS_IOU),
                boxes,
                0.5,
            ));
            let Some(gt) = boxes.first() else { continue };
            let (px, py) = det.best_center();
            let (gx, gy) = gt.center();
            let err = ((px - gx).powi(2) + (py - gy).powi(2)).sqrt();
            rep.windows += 1;
            rep.mean_center_error += err;
            if err <= radius {
                rep.hits += 1;
            }
        }
    }
    let n = data.iter().map(|s| s.windows.len()).sum::<usize>().max(1) as f64;
    rep.mean_loss /= n;
    rep.mean_center_error /= rep.windows.max(1) as f64;
    rep.ap50 = average_precision(scored, n_gt);
    Ok(rep)
}

/// Candidate floor and suppression overlap used when scoring AP.
const AP_MIN_SCORE: f64 = 0.01;
const AP_NMS_IOU: f64 = 0.5;

/// `(score, true positive)` for each detection of one image; a ground-truth
/// box is claimed by at most one detection, highest score first.
pub fn match_detections(dets: &[Detection], gt: &[BBox], iou: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut taken = vec![false; gt.len()];
    order
        .into_iter()
        .map(|d| {
            let best = gt
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken[*i])
                .map(|(i, g)| (i, d.bbox.iou(g)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            match best {
                Some((i, v)) if v >= iou => {
                    taken[i] = true;
                    (d.score, true)
                }
                _ => (d.score, false),
            }
        })
        .collect()
}

/// Area under the precision envelope (all-point interpolation).
pub fn average_precision(mut scored: Vec<(f64, bool)>, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(scored.len());
    for (i, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[i].0 - prev_recall) * envelope;
        prev_recall = points[i].0;
    }
    ap
}

/// Batch-norm epsilon used everywhere; re-exported for reports.
pub const BN_EPS: f64 = NORM_EPS;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny_cfg() -> RunConfig {
        parse_config(
            r#"
[arch]
layers = ["4c3p1s2", "6c3p1s2", "6c3p1s1"]
bridge_position = 2
bridge_kernel = 3
lstm_positions = []
head_hidden = 6

[simulation]
height = 16
width = 16
bin_ms = 10
steps = 3
window_ms = 50

[synthetic]
size_min = 4.0
size_max = 6.0
speed_min = 40.0
speed_max = 80.0

[training]
lr = 0.01
steps = 6
batch = 2
train_samples = 8
val_samples = 4
"#,
        )
        .unwrap()
    }

    #[test]
    fn average_precision_by_hand() {
        // hits at ranks 1 and 3 of 3 detections, 2 ground-truth boxes:
        // precision 1 up to recall 0.5, then 2/3 up to recall 1
        let ap = average_precision(vec![(0.9, true), (0.8, false), (0.7, true)], 2);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(vec![(0.5, false)], 1), 0.0);
        assert_eq!(average_precision(vec![(0.5, true)], 2), 0.5);
    }

    #[test]
    fn each_box_matches_once() {
        let g = BBox {
            x0: 0.0,
            y0: 0.0,
            x1: 2.0,
            y1: 2.0,
        };
        let d = |s: f64, dx: f64| Detection {
            bbox: BBox {
                x0: dx,
                y0: 0.0,
                x1: 2.0 + dx,
                y1: 2.0,
            },
            score: s,
        };
        let m = match_detections(&[d(0.4, 0.0), d(0.9, 0.2), d(0.5, 1.5)], &[g], 0.5);
        assert_eq!(m, vec![(0.9, true), (0.5, false), (0.4, false)]);
    }

    #[test]
    fn one_cycle_shape() {
        let peak = 1.0;
        assert!((one_cycle_lr(0, 100, peak) - 0.04).abs() < 1e-12);
        assert!((one_cycle_lr(30, 100, peak) - 1.0).abs() < 1e-12);
        assert!(one_cycle_lr(99, 100, peak) < 1e-3);
        assert!(one_cycle_lr(10, 100, peak) < one_cycle_lr(20, 100, peak));
        assert!(one_cycle_lr(50, 100, peak) > one_cycle_lr(80, 100, peak));
    }

    #[test]
    fn scenes_stay_inside() {
        let cfg = tiny_cfg();
        for seed in 0..50 {
            let scene = random_scene(&cfg, 100, seed);
            let out = synthesize_moving_shapes(&scene, 100).unwrap();
            assert!(out.warning.is_none(), "seed {seed}: {:?}", out.warning);
        }
    }

    #[test]
    fn samples_have_events_and_grid_boxes() {
        let cfg = tiny_cfg();
        let s = make_samples(&cfg, 3, 1).unwrap();
        for x in &s {
            assert_eq!(x.windows[0].shape(), &[3, 2, 16, 16]);
            assert!(x.windows[0].sum() > 0.0);
            let (cx, cy) = x.boxes[0][0].center();
            assert!((0.0..4.0).contains(&cx) && (0.0..4.0).contains(&cy));
        }
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_freezes() {
        let cfg = tiny_cfg();
        let data = make_samples(&cfg, 8, 2).unwrap();
        let a = train(&cfg, &data, |_, _, _| {}).unwrap();
        let b = train(&cfg, &data, |_, _, _| {}).unwrap();
        assert_eq!(a.losses, b.losses);
        for ((_, x, _), (_, y, _)) in a
            .model
            .named_params()
            .into_iter()
            .zip(b.model.named_params())
        {
            assert_eq!(x, y);
        }

        let mut frozen = cfg.clone();
        frozen.training.lr = 0.0;
        let z = train(&frozen, &data, |_, _, _| {}).unwrap();
        let init = Model::<f64>::new(
            frozen.model_spec().unwrap(),
            &mut ChaCha8Rng::seed_from_u64(frozen.training.seed),
        )
        .unwrap();
        for ((n, x, k), (_, y, _)) in z.model.named_params().into_iter().zip(init.named_params()) {
            if k == ParamKind::Trainable {
                assert_eq!(x, y, "{n}");
            }
        }
        let rep = evaluate(&z.model, &data[..2], 2.0).unwrap();
        assert_eq!(rep.windows, 2);
        assert!(rep.mean_loss.is_finite());
    }
}
