//! Operation counting and the linear energy model.
//!
//! Dense layers are charged `K*K*(C_in/g)*C_out*H_out*W_out` MACs. Spiking
//! convolutions are charged one AC per (nonzero input cell, kernel tap it
//! feeds, output channel of its group); a bin holding several events still
//! costs one AC per tap.

use std::fmt::Write as _;

use crate::bridge::BridgeVariant;
use crate::error::{Error, Result};
use crate::layer_spec::LayerSpec;
use crate::model::{ModelSpec, INPUT_CHANNELS};
use crate::numerics::conv::conv_out_dim;
use crate::numerics::{Real, Tensor};

/// Least-squares fit (no intercept) of the published energy figures.
pub const DEFAULT_E_MAC: f64 = 1.692_693_66e-12;
pub const DEFAULT_E_AC: f64 = 3.789_105_1e-13;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub macs: u64,
    pub acs: u64,
    /// Nonzero input cells seen by a spiking layer.
    pub input_spikes: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub layers: Vec<LayerCount>,
}

impl OpCounters {
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn acs(&self) -> u64 {
        self.layers.iter().map(|l| l.acs).sum()
    }

    pub fn params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    /// Adds `other` layer by layer, matching on name; unmatched layers are
    /// appended.
    pub fn merge(&mut self, other: &OpCounters) {
        for l in &other.layers {
            match self.layers.iter_mut().find(|m| m.name == l.name) {
                Some(m) => {
                    m.macs += l.macs;
                    m.acs += l.acs;
                    m.input_spikes += l.input_spikes;
                    m.params = m.params.max(l.params);
                }
                None => self.layers.push(l.clone()),
            }
        }
    }
}

fn conv_macs(k: usize, c_in_g: usize, c_out: usize, ho: usize, wo: usize) -> u64 {
    (k * k * c_in_g * c_out * ho * wo) as u64
}

fn conv_params(k: usize, c_in_g: usize, c_out: usize, bias: bool) -> u64 {
    (k * k * c_in_g * c_out + if bias { c_out } else { 0 }) as u64
}

fn layer(name: impl Into<String>, macs: u64, params: u64) -> LayerCount {
    LayerCount {
        name: name.into(),
        macs,
        params,
        ..LayerCount::default()
    }
}

/// Dense MACs of the bridge, ANN blocks, LSTM cells and head, plus every
/// layer's parameter count (spiking layers carry parameters only).
pub fn count_dense_macs(spec: &ModelSpec) -> Result<OpCounters> {
    let mut out = OpCounters::default();
    let (mut c, mut h, mut w) = (INPUT_CHANNELS, spec.height, spec.width);
    for (i, s) in spec.snn.iter().enumerate() {
        // conv + bias, batch norm affine, PLIF w
        out.layers.push(layer(
            format!("snn.{i}"),
            0,
            conv_params(s.kernel, c, s.channels, true) + 2 * s.channels as u64 + 1,
        ));
        (h, w) = s.out_hw(h, w)?;
        c = s.channels;
    }
    out.layers.extend(bridge_counts(spec, c, h, w));
    for (i, s) in spec.ann.iter().enumerate() {
        let (ho, wo) = s.out_hw(h, w)?;
        out.layers.push(layer(
            format!("ann.{i}"),
            conv_macs(s.kernel, c, s.channels, ho, wo),
            conv_params(s.kernel, c, s.channels, true) + 2 * s.channels as u64,
        ));
        (h, w, c) = (ho, wo, s.channels);
        if spec.lstm_positions.contains(&i) {
            let k = spec.lstm_kernel;
            let hw = (h * w) as u64;
            let macs =
                conv_macs(k, 1, 2 * c, h, w) + conv_macs(1, 2 * c, 4 * c, h, w) + 3 * c as u64 * hw;
            out.layers.push(layer(
                format!("ann.lstm{i}"),
                macs,
                conv_params(k, 1, 2 * c, true) + conv_params(1, 2 * c, 4 * c, true),
            ));
        }
    }
    if let Some(hidden) = spec.head_hidden {
        let macs = conv_macs(3, c, hidden, h, w) + conv_macs(1, hidden, 5, h, w);
        out.layers.push(layer(
            "head",
            macs,
            conv_params(3, c, hidden, true) + conv_params(1, hidden, 5, true),
        ));
    }
    Ok(out)
}

/// Bridge counts for `c` channel groups of `[T, h, w]`.
fn bridge_counts(spec: &ModelSpec, c: usize, h: usize, w: usize) -> Vec<LayerCount> {
    let t = spec.steps;
    let k = spec.bridge.kernel;
    let heads = spec.bridge.heads;
    let v = spec.bridge.variant;
    let (g, hw) = (c as u64, (h * w) as u64);
    let mut out = Vec::new();
    if v == BridgeVariant::NoAsab {
        // the time sum is additions only
        return vec![layer("bridge.time_sum", 0, 0)];
    }
    if v.deformable() {
        out.push(layer(
            "bridge.offset",
            g * conv_macs(k, t, 2 * k * k * t, h, w),
            conv_params(k, t, 2 * k * k * t, true),
        ));
    }
    // bilinear sampling costs 4 MACs per deformable tap
    let sampling = if v.deformable() {
        4 * (k * k * t) as u64 * hw
    } else {
        0
    };
    out.push(layer(
        "bridge.tsdc",
        g * (conv_macs(k, 1, t, h, w) + sampling),
        conv_params(k, 1, t, true),
    ));
    let ht = heads * t;
    if v.attention() {
        let proj = 3 * conv_macs(1, t, ht, h, w);
        let matmuls = 2 * (heads * t * t) as u64 * hw;
        out.push(layer(
            "bridge.attention",
            g * (proj + matmuls),
            3 * conv_params(1, t, ht, true),
        ));
        out.push(layer(
            "bridge.combine",
            g * conv_macs(1, ht, 1, h, w),
            conv_params(1, ht, 1, true),
        ));
    } else {
        out.push(layer(
            "bridge.combine",
            g * conv_macs(1, t, 1, h, w),
            conv_params(1, t, 1, true),
        ));
    }
    if v.gated() {
        out.push(layer("bridge.gate", g * hw, 0));
    }
    out
}

/// Dense MACs the spiking layers would cost if every timestep were executed
/// densely.
pub fn snn_dense_equivalent_macs(spec: &ModelSpec) -> Result<u64> {
    let (mut c, mut h, mut w) = (INPUT_CHANNELS, spec.height, spec.width);
    let mut total = 0;
    for s in &spec.snn {
        let (ho, wo) = s.out_hw(h, w)?;
        total += spec.steps as u64 * conv_macs(s.kernel, c, s.channels, ho, wo);
        (h, w, c) = (ho, wo, s.channels);
    }
    Ok(total)
}

/// Input of one spiking convolution as recorded during a forward pass.
#[derive(Clone, Debug)]
pub struct TraceLayer {
    pub name: String,
    pub spec: LayerSpec,
    pub groups: usize,
    /// `[T, C_in, H, W]`.
    pub input: Tensor<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SpikeTrace {
    pub layers: Vec<TraceLayer>,
}

impl SpikeTrace {
    /// Trace of a window: the event tensor feeds layer 0, each layer's
    /// spikes feed the next.
    pub fn from_window<T: Real>(
        specs: &[LayerSpec],
        events: &Tensor<T>,
        spikes: &[Tensor<T>],
    ) -> Self {
        let inputs = std::iter::once(events).chain(spikes.iter());
        SpikeTrace {
            layers: specs
                .iter()
                .zip(inputs)
                .enumerate()
                .map(|(i, (&spec, x))| TraceLayer {
                    name: format!("snn.{i}"),
                    spec,
                    groups: 1,
                    input: x.cast(),
                })
                .collect(),
        }
    }
}

/// Number of `(output index, kernel tap)` pairs along one axis that read
/// input coordinate `i`.
fn taps_per_input(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<Vec<u64>> {
    let out = conv_out_dim(size, kernel, stride, padding)?;
    let mut taps = vec![0u64; size];
    for o in 0..out {
        for k in 0..kernel {
            let i = (o * stride + k) as isize - padding as isize;
            if i >= 0 && (i as usize) < size {
                taps[i as usize] += 1;
            }
        }
    }
    Ok(taps)
}

pub fn count_spike_acs(trace: &SpikeTrace) -> Result<OpCounters> {
    let mut out = OpCounters::default();
    for l in &trace.layers {
        let &[t, c_in, h, w] = l.input.shape() else {
            return Err(Error::shape("count_spike_acs", "rank", 4, l.input.ndim()));
        };
        if l.groups == 0 || c_in % l.groups != 0 || l.spec.channels % l.groups != 0 {
            return Err(Error::invalid(
                "count_spike_acs",
                format!("{}: groups {} do not divide the channels", l.name, l.groups),
            ));
        }
        let ty = taps_per_input(h, l.spec.kernel, l.spec.stride, l.spec.padding)?;
        let tx = taps_per_input(w, l.spec.kernel, l.spec.stride, l.spec.padding)?;
        let fan = (l.spec.channels / l.groups) as u64;
        let mut acs = 0u64;
        let mut spikes = 0u64;
        for (i, &v) in l.input.data().iter().enumerate() {
            if v != 0.0 {
                let x = i % w;
                let y = (i / w) % h;
                spikes += 1;
                acs += ty[y] * tx[x] * fan;
            }
        }
        debug_assert!(t * c_in * h * w == l.input.len());
        out.layers.push(LayerCount {
            name: l.name.clone(),
            acs,
            input_spikes: spikes,
            ..LayerCount::default()
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyModel {
    /// Joules per MAC.
    pub e_mac: f64,
    /// Joules per AC.
    pub e_ac: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel {
            e_mac: DEFAULT_E_MAC,
            e_ac: DEFAULT_E_AC,
        }
    }
}

impl EnergyModel {
    pub fn new(e_mac: f64, e_ac: f64) -> Result<Self> {
        if !(e_mac > 0.0 && e_ac > 0.0 && e_mac.is_finite() && e_ac.is_finite()) {
            return Err(Error::invalid(
                "energy_model",
                "costs must be positive and finite",
            ));
        }
        Ok(EnergyModel { e_mac, e_ac })
    }

    pub fn joules(&self, macs: f64, acs: f64) -> f64 {
        macs * self.e_mac + acs * self.e_ac
    }
}

pub fn energy_estimate(counters: &OpCounters, model: &EnergyModel) -> f64 {
    model.joules(counters.macs() as f64, counters.acs() as f64)
}

/// Least squares `E = macs * e_mac + acs * e_ac` over `(macs, acs, joules)`.
pub fn fit_energy_model(points: &[(f64, f64, f64)]) -> Result<EnergyModel> {
    let (mut mm, mut ma, mut aa, mut me, mut ae) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(m, a, e) in points {
        mm += m * m;
        ma += m * a;
        aa += a * a;
        me += m * e;
        ae += a * e;
    }
    let det = mm * aa - ma * ma;
    if det.abs() <= f64::EPSILON * mm * aa {
        return Err(Error::invalid(
            "fit_energy_model",
            "datapoints do not determine both costs",
        ));
    }
    EnergyModel::new((me * aa - ae * ma) / det, (ae * mm - me * ma) / det)
}

/// Fraction of zero cells.
pub fn sparsity<T: Real>(t: &Tensor<T>) -> f64 {
    if t.is_empty() {
        return 1.0;
    }
    t.data().iter().filter(|v| v.is_zero()).count() as f64 / t.len() as f64
}

pub fn sparsity_report<T: Real>(layers: &[(String, &Tensor<T>)]) -> Vec<(String, f64)> {
    layers
        .iter()
        .map(|(n, t)| (n.clone(), sparsity(*t)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ProfileReport {
    pub counters: OpCounters,
    pub sparsity: Vec<(String, f64)>,
    pub energy: EnergyModel,
    pub windows: usize,
}

pub const REPORT_NOTE: &str = "ACs: one per nonzero input cell per kernel tap per output channel; multi-event bins count once";

impl ProfileReport {
    pub fn joules(&self) -> f64 {
        energy_estimate(&self.counters, &self.energy)
    }

    /// `key: value` lines; per-layer counts are totals over all windows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {REPORT_NOTE}");
        let _ = writeln!(s, "windows: {}", self.windows);
        let _ = writeln!(s, "total_macs: {}", self.counters.macs());
        let _ = writeln!(s, "total_acs: {}", self.counters.acs());
        let _ = writeln!(s, "params: {}", self.counters.params());
        let _ = writeln!(s, "e_mac_j: {:e}", self.energy.e_mac);
        let _ = writeln!(s, "e_ac_j: {:e}", self.energy.e_ac);
        let _ = writeln!(s, "energy_j: {:e}", self.joules());
        for l in &self.counters.layers {
            let _ = writeln!(
                s,
                "layer.{}: macs={} acs={} input_spikes={} params={}",
                l.name, l.macs, l.acs, l.input_spikes, l.params
            );
        }
        for (n, v) in &self.sparsity {
            let _ = writeln!(s, "sparsity.{n}: {v:.6}");
        }
        s
    }

    /// Flat CSV: `layer,macs,acs,input_spikes,params,sparsity`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,macs,acs,input_spikes,params,sparsity\n");
        for l in &self.counters.layers {
            let sp = self
                .sparsity
                .iter()
                .find(|(n, _)| *n == l.name)
                .map_or(String::new(), |(_, v)| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                l.name, l.macs, l.acs, l.input_spikes, l.params, sp
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::NormKind;
    use crate::bridge::BridgeConfig;
    use crate::graph::Parameterized;
    use crate::model::Model;
    use crate::snn::NeuronConfig;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trace(spec: LayerSpec, input: Tensor<f64>) -> SpikeTrace {
        SpikeTrace {
            layers: vec![TraceLayer {
                name: "l".into(),
                spec,
                groups: 1,
                input,
            }],
        }
    }

    #[test]
    fn mac_closed_forms() {
        assert_eq!(conv_macs(1, 1, 1, 4, 4), 16);
        assert_eq!(conv_macs(3, 2, 4, 8, 8), 4608);
    }

    #[test]
    fn single_center_spike_costs_72() {
        let mut x = Tensor::zeros(&[1, 1, 9, 9]);
        x.set(&[0, 0, 4, 4], 1.0);
        let c = count_spike_acs(&trace(LayerSpec::new(8, 3, 1, 1), x)).unwrap();
        assert_eq!(c.acs(), 72);
        let z = count_spike_acs(&trace(
            LayerSpec::new(8, 3, 1, 1),
            Tensor::zeros(&[2, 1, 5, 5]),
        ))
        .unwrap();
        assert_eq!(z.acs(), 0);
    }

    #[test]
    fn multi_event_cells_count_once() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.set(&[0, 0, 2, 2], 7.0);
        let c = count_spike_acs(&trace(LayerSpec::new(1, 3, 1, 1), x)).unwrap();
        assert_eq!(c.acs(), 9);
    }

    #[test]
    fn energy_is_linear() {
        let m = EnergyModel::default();
        assert_eq!(m.joules(0.0, 0.0), 0.0);
        assert_relative_eq!(m.joules(0.0, 2.3e9), 0.8715e-3, max_relative = 1e-3);
        assert_relative_eq!(m.joules(1.6e9, 1.0e9), 3.0872e-3, max_relative = 1e-4);
        assert!(EnergyModel::new(0.0, 1.0).is_err());
    }

    #[test]
    fn fit_recovers_known_costs() {
        let truth = EnergyModel::new(2e-12, 5e-13).unwrap();
        let pts: Vec<_> = [(1e9, 0.0), (0.0, 3e9), (2e9, 1e9)]
            .iter()
            .map(|&(m, a)| (m, a, truth.joules(m, a)))
            .collect();
        let fit = fit_energy_model(&pts).unwrap();
        assert_relative_eq!(fit.e_mac, 2e-12, max_relative = 1e-12);
        assert_relative_eq!(fit.e_ac, 5e-13, max_relative = 1e-12);
        assert!(fit_energy_model(&[(1.0, 0.0, 1.0)]).is_err());
    }

    #[test]
    fn sparsity_extremes_and_bernoulli() {
        assert_eq!(sparsity(&Tensor::<f64>::zeros(&[10])), 1.0);
        assert_eq!(sparsity(&Tensor::<f64>::ones(&[10])), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_fn(&[200_000], |_| if rng.gen_bool(0.02) { 1.0 } else { 0.0 });
        assert!((sparsity(&t) - 0.98).abs() < 0.005);
    }

    fn spec(lstm: Vec<usize>, variant: BridgeVariant) -> ModelSpec {
        ModelSpec {
            steps: 3,
            height: 8,
            width: 8,
            snn: vec![LayerSpec::new(3, 3, 1, 2), LayerSpec::new(4, 3, 1, 1)],
            neuron: NeuronConfig::default(),
            bridge: BridgeConfig {
                variant,
                kernel: 3,
                heads: 2,
                scale_scores: false,
            },
            ann: vec![LayerSpec::new(4, 3, 1, 1), LayerSpec::new(5, 3, 1, 2)],
            norm: NormKind::Batch,
            lstm_positions: lstm,
            lstm_kernel: 3,
            head_hidden: Some(4),
        }
    }

    #[test]
    fn analytic_params_match_the_model() {
        for v in BridgeVariant::ALL {
            for lstm in [vec![], vec![1], vec![0, 1]] {
                let s = spec(lstm, v);
                let m = Model::<f64>::new(s.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                assert_eq!(
                    count_dense_macs(&s).unwrap().params(),
                    m.param_count() as u64,
                    "{v}"
                );
            }
        }
    }

    #[test]
    fn report_formats_list_every_layer() {
        let c = count_dense_macs(&spec(vec![1], BridgeVariant::Full)).unwrap();
        let r = ProfileReport {
            counters: c.clone(),
            sparsity: vec![("snn.0".into(), 0.5)],
            energy: EnergyModel::default(),
            windows: 1,
        };
        let text = r.to_text();
        assert!(text.contains(&format!("total_macs: {}", c.macs())));
        assert_eq!(r.to_csv().lines().count(), c.layers.len() + 1);
    }
}
