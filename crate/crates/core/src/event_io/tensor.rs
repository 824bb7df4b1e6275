use crate::error::{Error, Result};
use crate::event_io::EventStream;
use crate::numerics::{Real, Tensor};

/// Per-bin, per-polarity event counts, laid out `[T, 2, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventTensor {
    pub bins: usize,
    pub height: usize,
    pub width: usize,
    pub t_a: u64,
    pub t_b: u64,
    pub counts: Vec<u32>,
}

impl EventTensor {
    pub fn zeros(bins: usize, height: usize, width: usize, t_a: u64, t_b: u64) -> Self {
        EventTensor {
            bins,
            height,
            width,
            t_a,
            t_b,
            counts: vec![0; bins * 2 * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.bins, 2, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, t: usize, p: usize, y: usize, x: usize) -> usize {
        ((t * 2 + p) * self.height + y) * self.width + x
    }

    pub fn get(&self, t: usize, p: usize, y: usize, x: usize) -> u32 {
        self.counts[self.index(t, p, y, x)]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.counts.iter().map(|&c| T::lit(c as f64)).collect();
        Tensor::new(&self.shape(), data).expect("counts match shape")
    }

    /// Bin of timestamp `t`, or `None` outside `[t_a, t_b]`.
    #[inline]
    pub fn bin_of(&self, t: u64) -> Option<usize> {
        bin_index(t, self.t_a, self.t_b, self.bins)
    }
}

#[inline]
fn bin_index(t: u64, t_a: u64, t_b: u64, bins: usize) -> Option<usize> {
    if t < t_a || t > t_b {
        return None;
    }
    // exact floor((t - t_a) / (t_b - t_a) * T); t == t_b lands in the last bin
    let k = ((t - t_a) as u128 * bins as u128 / (t_b - t_a) as u128) as usize;
    Some(k.min(bins - 1))
}

/// Histograms `stream` into `bins` equal sub-windows of `[t_a, t_b]`.
pub fn build_event_tensor(
    stream: &EventStream,
    t_a: u64,
    t_b: u64,
    bins: usize,
) -> Result<EventTensor> {
    if t_b <= t_a {
        return Err(Error::invalid(
            "build_event_tensor",
            format!("empty window [{t_a}, {t_b}]"),
        ));
    }
    if bins == 0 {
        return Err(Error::invalid(
            "build_event_tensor",
            "bin count must be at least 1",
        ));
    }
    let mut out = EventTensor::zeros(
        bins,
        stream.height as usize,
        stream.width as usize,
        t_a,
        t_b,
    );
    for (i, e) in stream.events.iter().enumerate() {
        let Some(k) = bin_index(e.t, t_a, t_b, bins) else {
            continue;
        };
        if e.x as u32 >= stream.width || e.y as u32 >= stream.height || e.p > 1 {
            return Err(Error::invalid(
                "build_event_tensor",
                format!(
                    "event {i} at ({}, {}) p={} outside {}x{} sensor",
                    e.x, e.y, e.p, stream.width, stream.height
                ),
            ));
        }
        let idx = out.index(k, e.p as usize, e.y as usize, e.x as usize);
        out.counts[idx] += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Event;

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream {
            width: 8,
            height: 6,
            events,
        }
    }

    #[test]
    fn empty_stream_gives_zeros() {
        let t = build_event_tensor(&stream(vec![]), 0, 50_000, 10).unwrap();
        assert_eq!(t.total(), 0);
        assert_eq!(t.shape(), [10, 2, 6, 8]);
    }

    #[test]
    fn single_event_at_window_start() {
        let e = Event {
            t: 1000,
            x: 3,
            y: 2,
            p: 1,
        };
        let t = build_event_tensor(&stream(vec![e]), 1000, 51_000, 10).unwrap();
        assert_eq!(t.get(0, 1, 2, 3), 1);
        assert_eq!(t.total(), 1);
    }

    #[test]
    fn repeated_events_accumulate() {
        let e = Event {
            t: 22_000,
            x: 1,
            y: 1,
            p: 0,
        };
        let t = build_event_tensor(&stream(vec![e; 3]), 0, 50_000, 10).unwrap();
        assert_eq!(t.get(4, 0, 1, 1), 3);
    }

    #[test]
    fn boundary_events() {
        let evs = vec![
            Event {
                t: 999,
                x: 0,
                y: 0,
                p: 0,
            },
            Event {
                t: 1000,
                x: 0,
                y: 0,
                p: 0,
            },
            Event {
                t: 6000,
                x: 0,
                y: 0,
                p: 0,
            },
            Event {
                t: 6001,
                x: 0,
                y: 0,
                p: 0,
            },
        ];
        let t = build_event_tensor(&stream(evs), 1000, 6000, 5).unwrap();
        assert_eq!(t.get(0, 0, 0, 0), 1);
        assert_eq!(t.get(4, 0, 0, 0), 1);
        assert_eq!(t.total(), 2);
    }

    #[test]
    fn rejects_empty_window() {
        assert!(build_event_tensor(&stream(vec![]), 5, 5, 10).is_err());
        assert!(build_event_tensor(&stream(vec![]), 0, 5, 0).is_err());
    }
}
