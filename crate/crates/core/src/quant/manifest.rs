//! On-disk layout of a quantized front-end: `manifest.toml` plus one raw
//! `i8` blob per layer (row-major `[C_out, C_in, K, K]`, one byte per
//! weight, two's complement).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{qmax, FusedLifParams, QuantLayer, QuantParams, QuantizedSnn, SUPPORTED_BITS};
use crate::error::{Error, Result};
use crate::layer_spec::LayerSpec;

pub const MANIFEST_FORMAT: &str = "evdet-quant";
pub const MANIFEST_FILE: &str = "manifest.toml";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub bits: u32,
    #[serde(rename = "layer", default)]
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    /// Layer string such as `64c3p1s2`.
    pub spec: String,
    pub in_channels: usize,
    /// Blob file name, relative to the manifest.
    pub weights: String,
    pub k: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub q_scale: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::parse(MANIFEST_FILE, msg)
}

/// Parses and validates everything that does not need the weight blobs.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let m: Manifest = toml::from_str(text).map_err(|e| bad(e.message().to_string()))?;
    if m.format != MANIFEST_FORMAT {
        return Err(bad(format!(
            "format `{}` is not `{MANIFEST_FORMAT}`",
            m.format
        )));
    }
    if m.version != VERSION {
        return Err(bad(format!("unsupported version {}", m.version)));
    }
    if !SUPPORTED_BITS.contains(&m.bits) {
        return Err(bad(format!("unsupported bit width {}", m.bits)));
    }
    for (i, l) in m.layers.iter().enumerate() {
        let spec: LayerSpec = l.spec.parse().map_err(|e| bad(format!("layer {i}: {e}")))?;
        let c = spec.channels;
        if l.q_scale.len() != c || l.scale.len() != c || l.shift.len() != c {
            return Err(bad(format!(
                "layer {i}: per-channel arrays must have {c} entries"
            )));
        }
        if l.in_channels == 0 {
            return Err(bad(format!("layer {i}: in_channels must be positive")));
        }
        if i > 0 {
            let prev: LayerSpec = m.layers[i - 1].spec.parse().expect("validated");
            if prev.channels != l.in_channels {
                return Err(bad(format!(
                    "layer {i}: in_channels {} does not follow {} channels",
                    l.in_channels, prev.channels
                )));
            }
        }
        let reals = [l.k, l.v_threshold, l.v_reset]
            .into_iter()
            .chain(l.q_scale.iter().copied())
            .chain(l.scale.iter().copied())
            .chain(l.shift.iter().copied());
        if reals.clone().any(|v| !v.is_finite()) {
            return Err(bad(format!("layer {i}: non-finite value")));
        }
        if !(l.k > 0.0 && l.k <= 1.0) {
            return Err(bad(format!("layer {i}: k must lie in (0, 1]")));
        }
        if l.q_scale.iter().any(|&s| s <= 0.0) {
            return Err(bad(format!("layer {i}: q_scale must be positive")));
        }
        if l.weights.is_empty() || l.weights.contains(['/', '\\']) || l.weights.starts_with('.') {
            return Err(bad(format!(
                "layer {i}: weight blob `{}` must be a plain file name",
                l.weights
            )));
        }
    }
    Ok(m)
}

impl Manifest {
    pub fn from_model(model: &QuantizedSnn) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.into(),
            version: VERSION,
            bits: model.bits,
            layers: model
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerEntry {
                    name: format!("snn.{i}"),
                    spec: l.spec.to_string(),
                    in_channels: l.in_channels,
                    weights: format!("snn.{i}.i8"),
                    k: l.k,
                    v_threshold: l.v_threshold,
                    v_reset: l.v_reset,
                    q_scale: l.weights.scales.clone(),
                    scale: l.fused.scale.clone(),
                    shift: l.fused.shift.clone(),
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is serializable")
    }

    /// Rebuilds the model; `blob` returns the bytes of a named weight file.
    pub fn into_model(self, mut blob: impl FnMut(&str) -> Result<Vec<u8>>) -> Result<QuantizedSnn> {
        let top = qmax(self.bits);
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let spec: LayerSpec = l.spec.parse()?;
                let shape = vec![spec.channels, l.in_channels, spec.kernel, spec.kernel];
                let n: usize = shape.iter().product();
                let bytes = blob(&l.weights)?;
                if bytes.len() != n {
                    return Err(Error::parse(
                        &l.weights,
                        format!("layer {i}: expected {n} bytes, found {}", bytes.len()),
                    ));
                }
                let values: Vec<i8> = bytes.into_iter().map(|b| b as i8).collect();
                if let Some(p) = values.iter().position(|&v| (v as i32).abs() > top) {
                    return Err(Error::parse(
                        format!("{} byte {p}", l.weights),
                        format!("value {} outside the {}-bit range", values[p], self.bits),
                    ));
                }
                Ok(QuantLayer {
                    in_channels: l.in_channels,
                    spec,
                    weights: QuantParams {
                        bits: self.bits,
                        shape,
                        scales: l.q_scale,
                        values,
                    },
                    fused: FusedLifParams {
                        scale: l.scale,
                        shift: l.shift,
                    },
                    k: l.k,
                    v_threshold: l.v_threshold,
                    v_reset: l.v_reset,
                })
            })
            .collect::<Result<_>>()?;
        Ok(QuantizedSnn {
            bits: self.bits,
            layers,
        })
    }
}

pub fn write_quantized(dir: &Path, model: &QuantizedSnn) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = Manifest::from_model(model);
    for (entry, layer) in m.layers.iter().zip(&model.layers) {
        let bytes: Vec<u8> = layer.weights.values.iter().map(|&v| v as u8).collect();
        fs::write(dir.join(&entry.weights), bytes)?;
    }
    fs::write(dir.join(MANIFEST_FILE), m.to_toml())?;
    Ok(())
}

pub fn read_quantized(dir: &Path) -> Result<QuantizedSnn> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    parse_manifest(&text)?.into_model(|name| Ok(fs::read(dir.join(name))?))
}
