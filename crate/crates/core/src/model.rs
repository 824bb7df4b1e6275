//! The full backbone: spiking front-end, bridge, dense back-end and the
//! optional toy head.

use rand::Rng;

use crate::ann::{AnnBackbone, AnnState, NormKind};
use crate::bridge::{Bridge, BridgeConfig};
use crate::error::{Error, Result};
use crate::graph::{join, GraphCtx, ParamMut, ParamRef, Parameterized};
use crate::head::{ToyDetection, ToyHead};
use crate::layer_spec::LayerSpec;
use crate::numerics::tape::Var;
use crate::numerics::{Real, Tensor};
use crate::snn::{NeuronConfig, SnnBackbone};

/// Polarity channels of the event tensor.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub snn: Vec<LayerSpec>,
    pub neuron: NeuronConfig,
    pub bridge: BridgeConfig,
    pub ann: Vec<LayerSpec>,
    pub norm: NormKind,
    /// ANN block indices followed by a DWConvLSTM.
    pub lstm_positions: Vec<usize>,
    pub lstm_kernel: usize,
    /// Hidden width of the toy head; `None` leaves the head off.
    pub head_hidden: Option<usize>,
}

impl ModelSpec {
    /// Spike tensor shape `[T, C, H, W]` at the bridge input.
    pub fn spike_shape(&self) -> Result<[usize; 4]> {
        crate::snn::output_shape(&self.snn, self.steps, self.height, self.width)
    }

    /// Final dense feature shape `[C, H, W]`; also the head's grid.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let [_, mut c, mut h, mut w] = self.spike_shape()?;
        for s in &self.ann {
            (h, w) = s.out_hw(h, w)?;
            c = s.channels;
        }
        Ok([c, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub snn: SnnBackbone<T>,
    pub bridge: Bridge<T>,
    pub ann: AnnBackbone<T>,
    pub head: Option<ToyHead<T>>,
}

/// Everything one detection window produces.
#[derive(Clone, Debug)]
pub struct WindowOutput<T> {
    /// Spikes of every SNN layer, `[T, C, H, W]`.
    pub spikes: Vec<Tensor<T>>,
    /// Bridge output `[C, H, W]`.
    pub dense: Tensor<T>,
    /// Output of every ANN block.
    pub features: Vec<Tensor<T>>,
    pub detection: Option<ToyDetection<T>>,
}

impl<T: Real> Model<T> {
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let feature = spec.feature_shape()?;
        if feature[1] == 0 || feature[2] == 0 {
            return Err(Error::invalid(
                "model",
                "layers reduce the input to an empty grid",
            ));
        }
        let snn = SnnBackbone::new(&spec.snn, INPUT_CHANNELS, spec.neuron, rng)?;
        let bridge = Bridge::new(spec.steps, spec.bridge, rng)?;
        let ann = AnnBackbone::new(
            snn.out_channels(),
            &spec.ann,
            spec.norm,
            &spec.lstm_positions,
            spec.lstm_kernel,
            rng,
        )?;
        let head = spec
            .head_hidden
            .map(|h| ToyHead::new(ann.out_channels(), h, rng));
        Ok(Model {
            spec,
            snn,
            bridge,
            ann,
            head,
        })
    }

    pub fn initial_state(&self) -> AnnState<T> {
        self.ann.initial_state()
    }

    /// One window `[T, 2, H, W]` through the whole stack.
    pub fn forward_window(
        &self,
        events: &Tensor<T>,
        state: &mut AnnState<T>,
    ) -> Result<WindowOutput<T>> {
        let expect = [
            self.spec.steps,
            INPUT_CHANNELS,
            self.spec.height,
            self.spec.width,
        ];
        if events.shape() != expect {
            return Err(Error::shape(
                "model",
                "input",
                format!("{expect:?}"),
                format!("{:?}", events.shape()),
            ));
        }
        let spikes = self.snn.forward_layers(events)?;
        let dense = self.bridge.forward(spikes.last().expect("non-empty"))?;
        let features = self.ann.forward(&dense, state)?;
        let detection = match &self.head {
            Some(h) => Some(ToyDetection::new(
                h.forward(features.last().unwrap_or(&dense))?,
            )?),
            None => None,
        };
        Ok(WindowOutput {
            spikes,
            dense,
            features,
            detection,
        })
    }

    /// `x` is `[T * B, 2, H, W]`, time-major. Returns head maps
    /// `[B, 5, H', W']`, or the final feature when the head is off.
    pub fn graph(
        &self,
        ctx: &mut GraphCtx<T>,
        x: Var,
        state: &mut Vec<Option<(Var, Var)>>,
    ) -> Result<Var> {
        let s = self.snn.graph(ctx, "snn", x, self.spec.steps)?;
        let d = self.bridge.graph(ctx, "bridge", s)?;
        let f = self.ann.graph(ctx, "ann", d, state)?;
        match &self.head {
            Some(h) => h.graph(ctx, "head", f),
            None => Ok(f),
        }
    }

    /// Same parameters in another element type.
    pub fn cast<U: Real>(&self) -> Result<Model<U>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut out = Model::<U>::new(self.spec.clone(), &mut rng)?;
        let src = self.named_params();
        for ((name, dst, _), (sname, s, _)) in out.named_params_mut().into_iter().zip(src) {
            debug_assert_eq!(name, sname);
            *dst = s.cast();
        }
        Ok(out)
    }
}

impl<T: Real> Parameterized<T> for Model<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.snn.params(&join(prefix, "snn"), out);
        self.bridge.params(&join(prefix, "bridge"), out);
        self.ann.params(&join(prefix, "ann"), out);
        if let Some(h) = &self.head {
            h.params(&join(prefix, "head"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.snn.params_mut(&join(prefix, "snn"), out);
        self.bridge.params_mut(&join(prefix, "bridge"), out);
        self.ann.params_mut(&join(prefix, "ann"), out);
        if let Some(h) = &mut self.head {
            h.params_mut(&join(prefix, "head"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelSpec {
        ModelSpec {
            steps: 3,
            height: 8,
            width: 8,
            snn: vec![LayerSpec::new(3, 3, 1, 2), LayerSpec::new(4, 3, 1, 1)],
            neuron: NeuronConfig::default(),
            bridge: BridgeConfig {
                kernel: 3,
                ..BridgeConfig::default()
            },
            ann: vec![LayerSpec::new(4, 3, 1, 1)],
            norm: NormKind::Batch,
            lstm_positions: vec![0],
            lstm_kernel: 3,
            head_hidden: Some(4),
        }
    }

    fn events(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 2, 8, 8], |_| {
            if rng.gen_bool(0.3) {
                rng.gen_range(1..4) as f64
            } else {
                0.0
            }
        })
    }

    #[test]
    fn shapes_follow_the_layers() {
        let spec = tiny();
        assert_eq!(spec.spike_shape().unwrap(), [3, 4, 4, 4]);
        assert_eq!(spec.feature_shape().unwrap(), [4, 4, 4]);
        let m = Model::<f64>::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut st = m.initial_state();
        let out = m.forward_window(&events(1), &mut st).unwrap();
        assert_eq!(out.detection.unwrap().grid(), (4, 4));
        assert!(m
            .forward_window(&Tensor::zeros(&[2, 2, 8, 8]), &mut st)
            .is_err());
    }

    #[test]
    fn graph_matches_windowed_forward() {
        let m = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (a, b) = (events(2), events(3));
        let mut st = m.initial_state();
        let pa = m
            .forward_window(&a, &mut st)
            .unwrap()
            .detection
            .unwrap()
            .maps;
        let pb = m
            .forward_window(&b, &mut st)
            .unwrap()
            .detection
            .unwrap()
            .maps;

        let mut ctx = GraphCtx::new(GraphMode::EVAL);
        let mut gs = Vec::new();
        let va = ctx.tape.constant(a);
        let ga = m.graph(&mut ctx, va, &mut gs).unwrap();
        let vb = ctx.tape.constant(b);
        let gb = m.graph(&mut ctx, vb, &mut gs).unwrap();
        assert!(
            ctx.tape
                .value(ga)
                .clone()
                .reshape(pa.shape())
                .unwrap()
                .max_abs_diff(&pa)
                .unwrap()
                < 1e-12
        );
        assert!(
            ctx.tape
                .value(gb)
                .clone()
                .reshape(pb.shape())
                .unwrap()
                .max_abs_diff(&pb)
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn cast_round_trips_parameters() {
        let m = Model::<f64>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let same = m.cast::<f64>().unwrap();
        let x = events(5);
        let d0 = m.forward_window(&x, &mut m.initial_state()).unwrap().dense;
        let d1 = same
            .forward_window(&x, &mut same.initial_state())
            .unwrap()
            .dense;
        assert_eq!(d0, d1);
        let narrow = m.cast::<f32>().unwrap();
        for ((n, a, _), (_, b, _)) in m.named_params().into_iter().zip(narrow.named_params()) {
            assert!(a.max_abs_diff(&b.cast()).unwrap() < 1e-6, "{n}");
        }
    }
}
