//! Run configuration: one TOML file with a section per concern. Every field
//! has a default, so an empty file is the Gen1 hybrid + RNN setup.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ann::NormKind;
use crate::bridge::{BridgeConfig, BridgeVariant};
use crate::error::{Error, Result};
use crate::layer_spec::LayerSpec;
use crate::model::ModelSpec;
use crate::profile::{EnergyModel, DEFAULT_E_AC, DEFAULT_E_MAC};
use crate::snn::NeuronConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub neuron: NeuronSection,
    pub simulation: SimulationConfig,
    pub quantization: QuantConfig,
    pub training: TrainingConfig,
    pub synthetic: SyntheticConfig,
    pub energy: EnergyConfig,
    pub detect: DetectConfig,
    pub io: IoConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Backbone layers in order, `<channels>c<kernel>p<padding>s<stride>`.
    pub layers: Vec<String>,
    /// Number of leading layers that are spiking; the bridge sits after them.
    pub bridge_position: usize,
    pub bridge_kernel: usize,
    pub bridge_heads: usize,
    /// `full`, `no-ta`, `no-deform`, `no-ers` or `no-asab`.
    pub bridge_variant: String,
    pub scale_scores: bool,
    /// `batch` or `layer`.
    pub norm: String,
    /// Dense block indices (0-based, counted from the first block after the
    /// bridge) followed by a DWConvLSTM.
    pub lstm_positions: Vec<usize>,
    pub lstm_kernel: usize,
    pub head: bool,
    pub head_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            layers: [
                "64c3p1s2",
                "128c3p1s2",
                "256c3p1s2",
                "256c3p1s1",
                "256c3p1s1",
                "256c3p1s2",
                "256c3p1s1",
                "256c3p1s2",
            ]
            .map(String::from)
            .to_vec(),
            bridge_position: 4,
            bridge_kernel: 5,
            bridge_heads: 1,
            bridge_variant: "full".into(),
            scale_scores: false,
            norm: "batch".into(),
            lstm_positions: vec![1, 3],
            lstm_kernel: 3,
            head: true,
            head_hidden: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuronSection {
    pub v_threshold: f64,
    pub v_reset: f64,
    pub detach_reset: bool,
    pub surrogate_alpha: f64,
}

impl Default for NeuronSection {
    fn default() -> Self {
        let n = NeuronConfig::default();
        NeuronSection {
            v_threshold: n.v_threshold,
            v_reset: n.v_reset,
            detach_reset: n.detach_reset,
            surrogate_alpha: n.surrogate_alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub height: usize,
    pub width: usize,
    pub bin_ms: u64,
    /// Bins per window, the `T` of the event tensor.
    pub steps: usize,
    /// Detection cadence; the tensor covers the last `steps * bin_ms` of it.
    pub window_ms: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            height: 304,
            width: 240,
            bin_ms: 5,
            steps: 10,
            window_ms: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    pub bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { bits: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Consecutive windows per sample; LSTM state flows through them.
    pub seq_len: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 2e-4,
            steps: 2000,
            batch: 2,
            seed: 0,
            seq_len: 1,
            train_samples: 256,
            val_samples: 64,
            weight_decay: 0.0,
            grad_clip: 5.0,
        }
    }
}

/// Moving-square scenes used by `gen` and toy training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub shapes: usize,
    pub size_min: f64,
    pub size_max: f64,
    /// Pixels per second.
    pub speed_min: f64,
    pub speed_max: f64,
    pub background: f64,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub contrast_threshold: f64,
    pub duration_ms: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            shapes: 1,
            size_min: 24.0,
            size_max: 48.0,
            speed_min: 100.0,
            speed_max: 300.0,
            background: 0.2,
            intensity_min: 0.6,
            intensity_max: 1.0,
            contrast_threshold: 0.15,
            duration_ms: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            e_mac: DEFAULT_E_MAC,
            e_ac: DEFAULT_E_AC,
        }
    }
}

/// Decoding of head maps into boxes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Objectness probability above which a cell becomes a detection.
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Checkpoint read by `infer`, `quantize` and `fidelity`; defaults to
    /// `<out_dir>/model.ckpt` when empty.
    pub checkpoint: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            out_dir: PathBuf::from("out"),
            checkpoint: PathBuf::new(),
        }
    }
}

impl IoConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.as_os_str().is_empty() {
            self.out_dir.join("model.ckpt")
        } else {
            self.checkpoint.clone()
        }
    }
}

/// Parses TOML text, fills defaults and validates.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let at = e
            .span()
            .map(|s| line_of(text, s.start))
            .map_or(String::new(), |l| format!(" (line {l})"));
        Error::Config(format!("{}{at}", e.message().trim()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        let s = &self.simulation;
        if s.bin_ms == 0 || s.window_ms == 0 {
            return Err(Error::Config(
                "simulation.bin_ms and window_ms must be positive".into(),
            ));
        }
        if s.bin_ms * s.steps as u64 > s.window_ms {
            return Err(Error::Config(format!(
                "simulation: {} bins of {} ms exceed the {} ms window",
                s.steps, s.bin_ms, s.window_ms
            )));
        }
        if !crate::quant::SUPPORTED_BITS.contains(&self.quantization.bits) {
            return Err(Error::Config(format!(
                "quantization.bits {} not in {{8, 6, 4, 2}}",
                self.quantization.bits
            )));
        }
        let t = &self.training;
        if t.batch == 0 || t.seq_len == 0 || t.train_samples == 0 {
            return Err(Error::Config(
                "training.batch, seq_len and train_samples must be positive".into(),
            ));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(t.weight_decay >= 0.0) || !(t.grad_clip >= 0.0) {
            return Err(Error::Config(
                "training.lr, weight_decay and grad_clip must be non-negative".into(),
            ));
        }
        let y = &self.synthetic;
        if !(0.0 < y.size_min && y.size_min <= y.size_max)
            || !(0.0 <= y.speed_min && y.speed_min <= y.speed_max)
        {
            return Err(Error::Config(
                "synthetic: size and speed ranges must be ordered and positive".into(),
            ));
        }
        if !(0.0 < y.intensity_min && y.intensity_min <= y.intensity_max)
            || !(y.background > 0.0)
            || !(y.contrast_threshold > 0.0)
        {
            return Err(Error::Config(
                "synthetic: intensities and contrast threshold must be positive".into(),
            ));
        }
        if y.duration_ms < s.window_ms {
            return Err(Error::Config(
                "synthetic.duration_ms must cover at least one window".into(),
            ));
        }
        let d = &self.detect;
        if !(0.0..1.0).contains(&d.score_threshold) || !(0.0..=1.0).contains(&d.nms_iou) {
            return Err(Error::Config(
                "detect.score_threshold must lie in [0, 1) and nms_iou in [0, 1]".into(),
            ));
        }
        self.energy_model()?;
        Ok(())
    }

    pub fn energy_model(&self) -> Result<EnergyModel> {
        EnergyModel::new(self.energy.e_mac, self.energy.e_ac)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn neuron(&self) -> NeuronConfig {
        NeuronConfig {
            v_threshold: self.neuron.v_threshold,
            v_reset: self.neuron.v_reset,
            detach_reset: self.neuron.detach_reset,
            surrogate_alpha: self.neuron.surrogate_alpha,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let a = &self.arch;
        let layers: Vec<LayerSpec> = a
            .layers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse()
                    .map_err(|e| Error::Config(format!("arch.layers[{i}] `{s}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if a.bridge_position == 0 || a.bridge_position > layers.len() {
            return Err(Error::Config(format!(
                "arch.bridge_position {} must lie in 1..={}",
                a.bridge_position,
                layers.len()
            )));
        }
        let (snn, ann) = layers.split_at(a.bridge_position);
        if let Some(p) = a.lstm_positions.iter().find(|&&p| p >= ann.len()) {
            return Err(Error::Config(format!(
                "arch.lstm_positions: {p} is not one of the {} dense blocks",
                ann.len()
            )));
        }
        let variant: BridgeVariant = a
            .bridge_variant
            .parse()
            .map_err(|e: Error| Error::Config(format!("arch.bridge_variant: {e}")))?;
        let norm: NormKind = a
            .norm
            .parse()
            .map_err(|e: Error| Error::Config(format!("arch.norm: {e}")))?;
        let n = self.neuron();
        if !(n.v_threshold > n.v_reset) || !(n.surrogate_alpha > 0.0) {
            return Err(Error::Config(
                "neuron: v_threshold must exceed v_reset and surrogate_alpha be positive".into(),
            ));
        }
        if a.bridge_kernel % 2 == 0
            || a.bridge_heads == 0
            || a.lstm_kernel % 2 == 0
            || (a.head && a.head_hidden == 0)
        {
            return Err(Error::Config(
                "arch: kernels must be odd and head counts/widths positive".into(),
            ));
        }
        if self.simulation.steps == 0 || self.simulation.height == 0 || self.simulation.width == 0 {
            return Err(Error::Config(
                "simulation: steps, height and width must be positive".into(),
            ));
        }
        let spec = ModelSpec {
            steps: self.simulation.steps,
            height: self.simulation.height,
            width: self.simulation.width,
            snn: snn.to_vec(),
            neuron: n,
            bridge: BridgeConfig {
                variant,
                kernel: a.bridge_kernel,
                heads: a.bridge_heads,
                scale_scores: a.scale_scores,
            },
            ann: ann.to_vec(),
            norm,
            lstm_positions: a.lstm_positions.clone(),
            lstm_kernel: a.lstm_kernel,
            head_hidden: a.head.then_some(a.head_hidden),
        };
        let f = spec
            .feature_shape()
            .map_err(|e| Error::Config(format!("arch: {e}")))?;
        if f[1] == 0 || f[2] == 0 {
            return Err(Error::Config(
                "arch: layers reduce the sensor to an empty grid".into(),
            ));
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::count_dense_macs;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_is_stable() {
        let mut c = RunConfig::default();
        c.simulation.steps = 10;
        c.training.lr = 1.5e-3;
        let text = c.to_toml();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config("[simulation]\nstepz = 3\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("stepz"), "{e}");
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn malformed_layer_reports_position() {
        let e = parse_config("[arch]\nlayers = [\"64x3\"]\nbridge_position = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("layers[0]") && e.contains("column"), "{e}");
    }

    #[test]
    fn gen1_defaults() {
        let spec = RunConfig::default().model_spec().unwrap();
        assert_eq!(spec.spike_shape().unwrap(), [10, 256, 38, 30]);
        assert_eq!(spec.feature_shape().unwrap(), [256, 10, 8]);
        assert_eq!(spec.lstm_positions, vec![1, 3]);
        let params = count_dense_macs(&spec).unwrap().params() as f64;
        assert!((params - 6.6e6).abs() <= 0.25 * 6.6e6, "{params}");
    }

    #[test]
    fn lstm_layout_changes_parameter_count() {
        let mut all = RunConfig::default();
        all.arch.lstm_positions = vec![0, 1, 2, 3];
        let a = count_dense_macs(&all.model_spec().unwrap())
            .unwrap()
            .params();
        let b = count_dense_macs(&RunConfig::default().model_spec().unwrap())
            .unwrap()
            .params();
        assert!(a > b);
    }

    #[test]
    fn rejects_inconsistent_sections() {
        for text in [
            "[arch]\nbridge_position = 0\n",
            "[arch]\nlstm_positions = [4]\n",
            "[arch]\nbridge_variant = \"none\"\n",
            "[quantization]\nbits = 3\n",
            "[simulation]\nsteps = 20\n",
            "[energy]\ne_ac = -1.0\n",
        ] {
            assert!(
                matches!(parse_config(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }
}
