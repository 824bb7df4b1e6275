//! Single-scale toy detection head: per-cell objectness plus `(dy, dx, h, w)`
//! box regression, its loss, and decoding.
//!
//! Boxes are in feature-grid units. A box is assigned to the cell holding its
//! center; `(dy, dx)` is the center's offset inside that cell and `(h, w)`
//! the box extent. Without any positive cell the loss is objectness only.

use rand::Rng;

use crate::error::{Error, Result};
use crate::event_io::BBox;
use crate::graph::{join, GraphCtx, ParamMut, ParamRef, Parameterized};
use crate::layer_spec::LayerSpec;
use crate::layers::Conv;
use crate::numerics::tape::{sigmoid, Var};
use crate::numerics::{Real, Tensor};

pub const HEAD_CHANNELS: usize = 5;
/// Logits are clamped to this magnitude inside the objectness loss.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug)]
pub struct ToyHead<T> {
    pub conv: Conv<T>,
    pub out: Conv<T>,
}

impl<T: Real> ToyHead<T> {
    pub fn new<R: Rng>(in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        ToyHead {
            conv: Conv::new(in_channels, LayerSpec::new(hidden, 3, 1, 1), 1, true, rng),
            out: Conv::new(hidden, LayerSpec::new(HEAD_CHANNELS, 1, 0, 1), 1, true, rng),
        }
    }

    /// `[C, H, W]` or `[B, C, H, W]` features to raw head maps.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv.forward(x)?.map(|v| v.max(T::zero()));
        self.out.forward(&h)
    }

    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var) -> Result<Var> {
        let h = self.conv.graph(ctx, &join(prefix, "conv"), x)?;
        let h = ctx.tape.relu(h);
        self.out.graph(ctx, &join(prefix, "out"), h)
    }
}

impl<T: Real> Parameterized<T> for ToyHead<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.out.params(&join(prefix, "out"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.out.params_mut(&join(prefix, "out"), out);
    }
}

/// Head output for one window: channel 0 is the objectness logit, channels
/// 1..5 are `(dy, dx, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDetection<T> {
    pub maps: Tensor<T>,
}

impl<T: Real> ToyDetection<T> {
    pub fn new(maps: Tensor<T>) -> Result<Self> {
        if maps.ndim() != 3 || maps.dim(0) != HEAD_CHANNELS {
            return Err(Error::shape(
                "toy_detection",
                "maps",
                format!("[{HEAD_CHANNELS}, H, W]"),
                format!("{:?}", maps.shape()),
            ));
        }
        Ok(ToyDetection { maps })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.dim(1), self.maps.dim(2))
    }

    pub fn logit(&self, y: usize, x: usize) -> T {
        self.maps.get(&[0, y, x])
    }

    pub fn regression(&self, y: usize, x: usize) -> [T; 4] {
        std::array::from_fn(|k| self.maps.get(&[k + 1, y, x]))
    }

    pub fn box_at(&self, y: usize, x: usize) -> BBox {
        let [dy, dx, h, w] = self.regression(y, x).map(Real::to_f64_lossy);
        let (cy, cx) = (y as f64 + dy, x as f64 + dx);
        BBox {
            x0: cx - w / 2.0,
            y0: cy - h / 2.0,
            x1: cx + w / 2.0,
            y1: cy + h / 2.0,
        }
    }

    /// Predicted center `(x, y)` at the most confident cell.
    pub fn best_center(&self) -> (f64, f64) {
        let (gh, gw) = self.grid();
        let mut best = (0, 0);
        for y in 0..gh {
            for x in 0..gw {
                if self.logit(y, x) > self.logit(best.0, best.1) {
                    best = (y, x);
                }
            }
        }
        self.box_at(best.0, best.1).center()
    }
}

pub fn toy_head_forward<T: Real>(
    features: &Tensor<T>,
    head: &ToyHead<T>,
) -> Result<ToyDetection<T>> {
    ToyDetection::new(head.forward(features)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Cells with objectness probability above `threshold`, greedily suppressed
/// at IoU above `nms_iou`, highest score first.
pub fn decode<T: Real>(det: &ToyDetection<T>, threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let (gh, gw) = det.grid();
    let mut cands: Vec<Detection> = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let score = sigmoid(det.logit(y, x).to_f64_lossy());
            if score > threshold {
                cands.push(Detection {
                    bbox: det.box_at(y, x),
                    score,
                });
            }
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.bbox.iou(&c.bbox) <= nms_iou) {
            kept.push(c);
        }
    }
    kept
}

/// Dense training targets for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    /// `[1, H, W]`, 1 at positive cells.
    pub objectness: Tensor<T>,
    /// `[4, H, W]`, zero away from positive cells.
    pub regression: Tensor<T>,
    pub positives: usize,
}

impl<T: Real> Targets<T> {
    /// Assigns each box to the cell holding its center (clamped into the
    /// grid); a later box overwrites an earlier one in the same cell.
    pub fn build(boxes: &[BBox], grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::invalid("toy_targets", "empty grid"));
        }
        let mut objectness = Tensor::zeros(&[1, grid_h, grid_w]);
        let mut regression = Tensor::zeros(&[4, grid_h, grid_w]);
        for b in boxes {
            let (cx, cy) = b.center();
            if !(cx.is_finite()
                && cy.is_finite()
                && b.width().is_finite()
                && b.height().is_finite())
            {
                return Err(Error::NonFinite {
                    context: "ground-truth box".into(),
                });
            }
            let iy = (cy.floor().max(0.0) as usize).min(grid_h - 1);
            let ix = (cx.floor().max(0.0) as usize).min(grid_w - 1);
            objectness.set(&[0, iy, ix], T::one());
            let vals = [cy - iy as f64, cx - ix as f64, b.height(), b.width()];
            for (k, v) in vals.into_iter().enumerate() {
                regression.set(&[k, iy, ix], T::lit(v));
            }
        }
        let positives = objectness.data().iter().filter(|&&v| v > T::zero()).count();
        Ok(Targets {
            objectness,
            regression,
            positives,
        })
    }

    /// `[4, H, W]` mask selecting the regression channels at positive cells.
    pub fn mask(&self) -> Tensor<T> {
        let hw = self.objectness.len();
        Tensor::from_fn(&[4, self.objectness.dim(1), self.objectness.dim(2)], |i| {
            self.objectness.data()[i % hw]
        })
    }
}

fn bce_with_logits(z: f64, y: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean per-cell objectness BCE plus the squared regression error summed
/// over positive cells and divided by their count.
pub fn toy_loss<T: Real>(pred: &ToyDetection<T>, targets: &Targets<T>) -> Result<f64> {
    let (gh, gw) = pred.grid();
    if targets.objectness.shape() != [1, gh, gw] {
        return Err(Error::shape(
            "toy_loss",
            "grid",
            format!("[1, {gh}, {gw}]"),
            format!("{:?}", targets.objectness.shape()),
        ));
    }
    let mut bce = 0.0;
    let mut l2 = 0.0;
    for y in 0..gh {
        for x in 0..gw {
            let t = targets.objectness.get(&[0, y, x]).to_f64_lossy();
            bce += bce_with_logits(pred.logit(y, x).to_f64_lossy(), t);
            if t > 0.0 {
                let r = pred.regression(y, x);
                for (k, rv) in r.iter().enumerate() {
                    let d = rv.to_f64_lossy() - targets.regression.get(&[k, y, x]).to_f64_lossy();
                    l2 += d * d;
                }
            }
        }
    }
    let loss = bce / (gh * gw) as f64
        + if targets.positives > 0 {
            l2 / targets.positives as f64
        } else {
            0.0
        };
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "toy loss".into(),
        });
    }
    Ok(loss)
}

/// Recorded loss over a batch. `pred` is `[B, 5, H, W]`; objectness BCE is
/// averaged over all `B * H * W` cells and the regression error over all
/// positive cells in the batch.
pub fn toy_loss_graph<T: Real>(
    ctx: &mut GraphCtx<T>,
    pred: Var,
    targets: &[Targets<T>],
) -> Result<Var> {
    let shape = ctx.tape.value(pred).shape().to_vec();
    if shape.len() != 4 || shape[1] != HEAD_CHANNELS || shape[0] != targets.len() {
        return Err(Error::shape(
            "toy_loss_graph",
            "pred",
            format!("[{}, {HEAD_CHANNELS}, H, W]", targets.len()),
            format!("{shape:?}"),
        ));
    }
    let (b, gh, gw) = (shape[0], shape[2], shape[3]);
    let obj_parts: Vec<&Tensor<T>> = targets.iter().map(|t| &t.objectness).collect();
    let reg_parts: Vec<&Tensor<T>> = targets.iter().map(|t| &t.regression).collect();
    let masks: Vec<Tensor<T>> = targets.iter().map(|t| t.mask()).collect();
    let mask_parts: Vec<&Tensor<T>> = masks.iter().collect();
    let obj_t = Tensor::concat(&obj_parts, 0)?.reshape(&[b, 1, gh, gw])?;
    let reg_t = Tensor::concat(&reg_parts, 0)?.reshape(&[b, 4, gh, gw])?;
    let mask_t = Tensor::concat(&mask_parts, 0)?.reshape(&[b, 4, gh, gw])?;
    let positives: usize = targets.iter().map(|t| t.positives).sum();

    let logits = ctx.tape.narrow(pred, 1, 0, 1)?;
    let bce = ctx
        .tape
        .bce_with_logits_sum(logits, &obj_t, T::lit(LOGIT_CLAMP))?;
    let bce = ctx
        .tape
        .affine(bce, T::lit(1.0 / (b * gh * gw) as f64), T::zero());
    if positives == 0 {
        return Ok(bce);
    }
    let reg = ctx.tape.narrow(pred, 1, 1, 4)?;
    let reg_tv = ctx.tape.constant(reg_t);
    let mask_v = ctx.tape.constant(mask_t);
    let diff = ctx.tape.sub(reg, reg_tv)?;
    let masked = ctx.tape.mul(diff, mask_v)?;
    let sq = ctx.tape.mul(masked, masked)?;
    let l2 = ctx.tape.sum(sq);
    let l2 = ctx
        .tape
        .affine(l2, T::lit(1.0 / positives as f64), T::zero());
    ctx.tape.add(bce, l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{grad_check_model, GraphMode};
    use crate::numerics::gradcheck::GradCheckConfig;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(cx: f64, cy: f64, side: f64) -> BBox {
        BBox {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            x1: cx + side / 2.0,
            y1: cy + side / 2.0,
        }
    }

    #[test]
    fn targets_place_box_at_center_cell() {
        let t = Targets::<f64>::build(&[square(2.25, 1.5, 1.0)], 4, 4).unwrap();
        assert_eq!(t.positives, 1);
        assert_eq!(t.objectness.get(&[0, 1, 2]), 1.0);
        let r: Vec<f64> = (0..4).map(|k| t.regression.get(&[k, 1, 2])).collect();
        assert_eq!(r, vec![0.5, 0.25, 1.0, 1.0]);
    }

    #[test]
    fn zero_logits_give_ln2_per_cell() {
        let t = Targets::<f64>::build(&[square(1.5, 1.5, 1.0)], 3, 3).unwrap();
        let mut maps = Tensor::zeros(&[5, 3, 3]);
        for (k, v) in [0.5, 0.5, 1.0, 1.0].into_iter().enumerate() {
            maps.set(&[k + 1, 1, 1], v);
        }
        let loss = toy_loss(&ToyDetection::new(maps).unwrap(), &t).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let t = Targets::<f64>::build(&[square(0.3, 2.7, 2.0)], 3, 4).unwrap();
        let mut maps = Tensor::full(&[5, 3, 4], -100.0);
        maps.set(&[0, 2, 0], 100.0);
        for k in 0..4 {
            for y in 0..3 {
                for x in 0..4 {
                    maps.set(&[k + 1, y, x], t.regression.get(&[k, y, x]));
                }
            }
        }
        let loss = toy_loss(&ToyDetection::new(maps).unwrap(), &t).unwrap();
        assert!(loss >= 0.0 && loss < 1e-12, "{loss}");
    }

    #[test]
    fn no_positive_cells_is_objectness_only() {
        let t = Targets::<f64>::build(&[], 2, 2).unwrap();
        let maps = Tensor::from_fn(&[5, 2, 2], |i| i as f64 - 7.0);
        let det = ToyDetection::new(maps).unwrap();
        let expect: f64 = (0..4)
            .map(|i| bce_with_logits(det.maps.data()[i], 0.0))
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(toy_loss(&det, &t).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn decode_suppresses_overlapping_cells() {
        let mut maps = Tensor::zeros(&[5, 2, 3]);
        for (y, x, logit) in [(0, 0, 3.0), (0, 1, 2.0), (1, 2, 1.0)] {
            maps.set(&[0, y, x], logit);
            maps.set(&[1, y, x], 0.5);
            maps.set(&[2, y, x], if x == 1 { 0.0 } else { 0.5 });
            maps.set(&[3, y, x], 1.0);
            maps.set(&[4, y, x], 2.0);
        }
        maps.set(&[0, 1, 0], -1.0);
        let dets = decode(&ToyDetection::new(maps).unwrap(), 0.5, 0.5);
        // the (0,1) box shares 3/5 of the (0,0) box's span and is dropped
        assert_eq!(dets.len(), 2);
        assert_relative_eq!(dets[0].score, sigmoid(3.0));
        assert_eq!(dets[1].bbox.center(), (2.5, 1.5));
    }

    #[test]
    fn graph_loss_matches_plain_and_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = ToyHead::<f64>::new(3, 4, &mut rng);
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 13) % 11) as f64 / 11.0 - 0.4);
        let targets = vec![
            Targets::build(&[square(1.2, 2.6, 1.5)], 4, 4).unwrap(),
            Targets::build(&[square(3.1, 0.4, 1.0), square(0.6, 0.7, 0.8)], 4, 4).unwrap(),
        ];
        let maps = head.forward(&x).unwrap();
        let mut ctx = GraphCtx::new(GraphMode::EVAL);
        let xv = ctx.tape.constant(x.clone());
        let pred = head.graph(&mut ctx, "head", xv).unwrap();
        let loss = toy_loss_graph(&mut ctx, pred, &targets).unwrap();
        let g = ctx.tape.value(loss).data()[0];
        let mut bce = 0.0;
        let mut l2 = 0.0;
        for b in 0..2 {
            for y in 0..4 {
                for xx in 0..4 {
                    let t = targets[b].objectness.get(&[0, y, xx]);
                    bce += bce_with_logits(maps.get(&[b, 0, y, xx]), t);
                    if t > 0.0 {
                        for k in 0..4 {
                            let d = maps.get(&[b, k + 1, y, xx])
                                - targets[b].regression.get(&[k, y, xx]);
                            l2 += d * d;
                        }
                    }
                }
            }
        }
        assert_relative_eq!(g, bce / 32.0 + l2 / 3.0, epsilon = 1e-12);

        let rep = grad_check_model(
            &head,
            &[x],
            GraphMode::EVAL,
            GradCheckConfig::default(),
            |m, ctx, v| {
                let p = m.graph(ctx, "head", v[0])?;
                toy_loss_graph(ctx, p, &targets)
            },
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}
