//! Event streams, their file formats, the binned event tensor and a
//! synthetic moving-shape sensor.

mod format;
mod synth;
mod tensor;

pub use format::{parse_csv, parse_evs, read_events, write_csv, write_evs, EventFormat, Loaded};
pub use synth::{
    synthesize_moving_shapes, BBox, ShapeKind, ShapeSpec, SyntheticOutput, SyntheticScene,
    WindowBoxes, LABEL_PERIOD_MS,
};
pub use tensor::{build_event_tensor, EventTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 1 for an intensity increase, 0 for a decrease.
    pub p: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u32,
    pub height: u32,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u32, height: u32) -> Self {
        EventStream {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_time_ordered(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }

    /// Events with `t_a <= t < t_b`.
    pub fn slice(&self, t_a: u64, t_b: u64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t_a);
        let hi = self.events.partition_point(|e| e.t < t_b);
        &self.events[lo..hi.max(lo)]
    }
}
