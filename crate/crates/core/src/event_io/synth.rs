//! Idealized event sensor watching shapes translate over a flat background.
//!
//! Frames are rendered with exact (square) or supersampled (circle) pixel
//! coverage every millisecond. Each pixel keeps a reference log intensity;
//! whenever the current log intensity differs from it by `n >= 1` contrast
//! thresholds, `n` events of the matching polarity are emitted and the
//! reference moves by `n` thresholds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event_io::{Event, EventStream};

/// Ground-truth boxes are reported at the end of every period of this length.
pub const LABEL_PERIOD_MS: u64 = 50;
const CIRCLE_SUBSAMPLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Side length or diameter in pixels.
    pub size: f64,
    pub intensity: f64,
    /// Center at t = 0, in pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub center: (f64, f64),
    /// Pixels per second along x and y.
    pub velocity: (f64, f64),
}

impl ShapeSpec {
    pub fn center_at(&self, t_ms: f64) -> (f64, f64) {
        let s = t_ms / 1000.0;
        (
            self.center.0 + self.velocity.0 * s,
            self.center.1 + self.velocity.1 * s,
        )
    }

    pub fn bbox_at(&self, t_ms: f64) -> BBox {
        let (cx, cy) = self.center_at(t_ms);
        let r = self.size / 2.0;
        BBox {
            x0: cx - r,
            y0: cy - r,
            x1: cx + r,
            y1: cy + r,
        }
    }

    /// Fraction of pixel `(x, y)` covered at the given center.
    fn coverage(&self, cx: f64, cy: f64, x: usize, y: usize) -> f64 {
        let r = self.size / 2.0;
        match self.kind {
            ShapeKind::Square => {
                let ox = ((x as f64 + 1.0).min(cx + r) - (x as f64).max(cx - r)).max(0.0);
                let oy = ((y as f64 + 1.0).min(cy + r) - (y as f64).max(cy - r)).max(0.0);
                ox * oy
            }
            ShapeKind::Circle => {
                let n = CIRCLE_SUBSAMPLES;
                let mut hits = 0;
                for sy in 0..n {
                    for sx in 0..n {
                        let px = x as f64 + (sx as f64 + 0.5) / n as f64 - cx;
                        let py = y as f64 + (sy as f64 + 0.5) / n as f64 - cy;
                        if px * px + py * py <= r * r {
                            hits += 1;
                        }
                    }
                }
                hits as f64 / (n * n) as f64
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        let i = if inter.x1 > inter.x0 && inter.y1 > inter.y0 {
            inter.area()
        } else {
            0.0
        };
        let u = self.area() + other.area() - i;
        if u > 0.0 {
            i / u
        } else {
            0.0
        }
    }

    fn inside(&self, width: u32, height: u32) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= width as f64 && self.y1 <= height as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: u32,
    pub height: u32,
    pub background: f64,
    pub shapes: Vec<ShapeSpec>,
    /// Log-intensity change per event.
    pub contrast_threshold: f64,
    /// Seeds the sub-millisecond timestamp jitter.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowBoxes {
    /// End of the labelled period; boxes are the shapes' extents at this time.
    pub t_end_us: u64,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub stream: EventStream,
    pub labels: Vec<WindowBoxes>,
    /// Simulated duration, shorter than requested if a shape left the frame.
    pub duration_ms: u64,
    pub warning: Option<String>,
}

fn render(scene: &SyntheticScene, t_ms: f64, log_frame: &mut [f64]) {
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut frame = vec![scene.background; w * h];
    for shape in &scene.shapes {
        let (cx, cy) = shape.center_at(t_ms);
        let b = shape.bbox_at(t_ms);
        let xs = (b.x0.floor().max(0.0) as usize)..(b.x1.ceil().min(w as f64).max(0.0) as usize);
        let ys = (b.y0.floor().max(0.0) as usize)..(b.y1.ceil().min(h as f64).max(0.0) as usize);
        for y in ys {
            for x in xs.clone() {
                let c = shape.coverage(cx, cy, x, y);
                let v = &mut frame[y * w + x];
                *v = *v * (1.0 - c) + shape.intensity * c;
            }
        }
    }
    for (l, v) in log_frame.iter_mut().zip(frame) {
        *l = v.ln();
    }
}

fn validate(scene: &SyntheticScene, duration_ms: u64) -> Result<()> {
    let bad = |msg: String| Err(Error::invalid("synthesize_moving_shapes", msg));
    if duration_ms == 0 {
        return bad("duration must be positive".into());
    }
    if scene.width == 0 || scene.height == 0 || scene.width > 1 << 16 || scene.height > 1 << 16 {
        return bad(format!(
            "unsupported geometry {}x{}",
            scene.width, scene.height
        ));
    }
    if !(scene.contrast_threshold > 0.0 && scene.contrast_threshold.is_finite()) {
        return bad(format!(
            "contrast threshold {} must be positive",
            scene.contrast_threshold
        ));
    }
    if !(scene.background > 0.0 && scene.background.is_finite()) {
        return bad("background intensity must be positive".into());
    }
    for (i, s) in scene.shapes.iter().enumerate() {
        let finite = [
            s.size,
            s.intensity,
            s.center.0,
            s.center.1,
            s.velocity.0,
            s.velocity.1,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || s.size <= 0.0 || s.intensity <= 0.0 {
            return bad(format!(
                "shape {i} has non-finite or non-positive parameters"
            ));
        }
    }
    Ok(())
}

/// Simulates `duration_ms` of sensor output for `scene`.
pub fn synthesize_moving_shapes(
    scene: &SyntheticScene,
    duration_ms: u64,
) -> Result<SyntheticOutput> {
    validate(scene, duration_ms)?;
    let (w, h) = (scene.width as usize, scene.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let mut reference = vec![0.0; w * h];
    render(scene, 0.0, &mut reference);
    let mut current = vec![0.0; w * h];
    let mut events = Vec::new();
    let mut warning = None;
    let mut simulated = 0;

    let all_inside = |t_ms: f64| {
        scene
            .shapes
            .iter()
            .all(|s| s.bbox_at(t_ms).inside(scene.width, scene.height))
    };
    if !all_inside(0.0) {
        warning = Some("a shape starts outside the sensor; no events generated".to_string());
    } else {
        for step in 1..=duration_ms {
            if !all_inside(step as f64) {
                warning = Some(format!(
                    "a shape leaves the sensor at {step} ms; stream truncated to {simulated} ms"
                ));
                break;
            }
            render(scene, step as f64, &mut current);
            let t0 = (step - 1) * 1000;
            for (i, (r, &c)) in reference.iter_mut().zip(&current).enumerate() {
                let delta = c - *r;
                let n = (delta.abs() / scene.contrast_threshold).floor();
                if n < 1.0 {
                    continue;
                }
                let p = u8::from(delta > 0.0);
                *r += delta.signum() * n * scene.contrast_threshold;
                for _ in 0..n as u64 {
                    events.push(Event {
                        t: t0 + rng.gen_range(0..1000),
                        x: (i % w) as u16,
                        y: (i / w) as u16,
                        p,
                    });
                }
            }
            simulated = step;
        }
    }
    events.sort_by_key(|e| e.t);

    let labels = (1..=simulated / LABEL_PERIOD_MS)
        .map(|k| {
            let t_ms = k * LABEL_PERIOD_MS;
            WindowBoxes {
                t_end_us: t_ms * 1000,
                boxes: scene
                    .shapes
                    .iter()
                    .map(|s| s.bbox_at(t_ms as f64))
                    .collect(),
            }
        })
        .collect();
    Ok(SyntheticOutput {
        stream: EventStream {
            width: scene.width,
            height: scene.height,
            events,
        },
        labels,
        duration_ms: simulated,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(velocity: (f64, f64)) -> SyntheticScene {
        SyntheticScene {
            width: 32,
            height: 32,
            background: 0.2,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Square,
                size: 8.0,
                intensity: 1.0,
                center: (10.3, 16.0),
                velocity,
            }],
            contrast_threshold: 0.15,
            seed: 1,
        }
    }

    #[test]
    fn static_scene_is_silent() {
        let out = synthesize_moving_shapes(&square((0.0, 0.0)), 100).unwrap();
        assert!(out.stream.is_empty());
        assert_eq!(out.labels.len(), 2);
        assert!(out.warning.is_none());
    }

    #[test]
    fn edges_have_expected_polarity() {
        let out = synthesize_moving_shapes(&square((200.0, 0.0)), 50).unwrap();
        assert!(!out.stream.is_empty());
        // leading edge ends near x = 14.3 + 10, trailing edge starts near 6.3
        for e in &out.stream.events {
            let x = e.x as f64;
            if e.p == 1 {
                assert!(x >= 13.0, "positive event at x={x}");
            } else {
                assert!(x <= 17.0, "negative event at x={x}");
            }
        }
        assert!(out.stream.events.iter().any(|e| e.p == 0));
    }

    #[test]
    fn same_seed_same_stream() {
        let a = synthesize_moving_shapes(&square((150.0, -80.0)), 60).unwrap();
        let b = synthesize_moving_shapes(&square((150.0, -80.0)), 60).unwrap();
        assert_eq!(a.stream, b.stream);
        assert!(a.stream.is_time_ordered());
    }

    #[test]
    fn leaving_frame_truncates() {
        let out = synthesize_moving_shapes(&square((1000.0, 0.0)), 100).unwrap();
        assert!(out.warning.is_some());
        assert!(out.duration_ms < 100);
        assert!(out
            .stream
            .events
            .iter()
            .all(|e| e.t < out.duration_ms * 1000));
    }

    #[test]
    fn iou_basics() {
        let a = BBox {
            x0: 0.0,
            y0: 0.0,
            x1: 2.0,
            y1: 2.0,
        };
        let b = BBox {
            x0: 1.0,
            y0: 0.0,
            x1: 3.0,
            y1: 2.0,
        };
        assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
    }
}
