//! End-to-end commands shared by the binary and the tests.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::BridgeVariant;
use crate::checkpoint::{config_hash, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::event_io::{
    synthesize_moving_shapes, write_csv, write_evs, BBox, EventFormat, EventStream,
};
use crate::graph::Parameterized;
use crate::head::{decode, Detection};
use crate::model::Model;
use crate::profile::{
    count_dense_macs, count_spike_acs, sparsity, OpCounters, ProfileReport, SpikeTrace,
};
use crate::quant::{
    fixed_point_forward, layered_fidelity, write_quantized, FidelityReport, IntTensor,
    QuantizedSnn, SUPPORTED_BITS,
};
use crate::train::{
    evaluate, make_samples, random_scene, train, window_tensor, EvalReport, Sample,
};

/// Held-out hit radius in feature-grid cells.
pub const HIT_RADIUS: f64 = 2.0;

/// Seeds of the training and held-out sets derived from a run seed.
pub fn data_seeds(seed: u64) -> (u64, u64) {
    (
        seed.wrapping_mul(2).wrapping_add(0x5eed),
        seed.wrapping_mul(2).wrapping_add(0x5eee),
    )
}

/// Model with the checkpoint's weights; the hash must match the config.
pub fn load_model(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Model<f64>> {
    if ckpt.config_hash != config_hash(cfg) {
        return Err(Error::Checkpoint(
            "checkpoint was written for a different architecture or simulation config".into(),
        ));
    }
    let mut model = Model::<f64>::new(cfg.model_spec()?, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_into(&mut model)?;
    Ok(model)
}

/// Model from the checkpoint, or seeded random weights without one.
pub fn model_for(cfg: &RunConfig, ckpt: Option<&Checkpoint>) -> Result<Model<f64>> {
    match ckpt {
        Some(c) => load_model(cfg, c),
        None => Model::new(
            cfg.model_spec()?,
            &mut ChaCha8Rng::seed_from_u64(cfg.training.seed),
        ),
    }
}

/// Synthetic stream plus its ground-truth boxes.
pub struct Generated {
    pub stream: EventStream,
    pub labels: Vec<(u64, Vec<BBox>)>,
    pub warning: Option<String>,
}

pub fn run_gen(cfg: &RunConfig) -> Result<Generated> {
    let d = cfg.synthetic.duration_ms;
    let out = synthesize_moving_shapes(&random_scene(cfg, d, cfg.training.seed), d)?;
    Ok(Generated {
        stream: out.stream,
        labels: out
            .labels
            .into_iter()
            .map(|l| (l.t_end_us, l.boxes))
            .collect(),
        warning: out.warning,
    })
}

pub fn write_generated(g: &Generated, dir: &Path, format: EventFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    match format {
        EventFormat::Csv => write_csv(
            &g.stream,
            BufWriter::new(fs::File::create(dir.join("events.csv"))?),
        )?,
        EventFormat::Evs => write_evs(
            &g.stream,
            BufWriter::new(fs::File::create(dir.join("events.evs"))?),
        )?,
    }
    let mut s = String::from("t_end_us,x0,y0,x1,y1\n");
    for (t, boxes) in &g.labels {
        for b in boxes {
            let _ = writeln!(s, "{t},{},{},{},{}", b.x0, b.y0, b.x1, b.y1);
        }
    }
    fs::write(dir.join("labels.csv"), s)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct WindowDetections {
    pub t_end_us: u64,
    /// Boxes in sensor pixels.
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub windows: Vec<WindowDetections>,
    pub report: ProfileReport,
}

/// End times of the windows covering every event of a stream.
pub fn window_ends(stream: &EventStream, cfg: &RunConfig) -> Vec<u64> {
    let w = cfg.simulation.window_ms * 1000;
    let Some(last) = stream.events.last().map(|e| e.t) else {
        return Vec::new();
    };
    // the final window may be partial; it still gets a detection set
    (1..)
        .map(|i| i * w)
        .take_while(|&t| t == w || t < last + w)
        .collect()
}

/// Runs the model over consecutive windows, carrying recurrent state, and
/// profiles every window.
pub fn run_infer(cfg: &RunConfig, model: &Model<f64>, stream: &EventStream) -> Result<InferOutput> {
    let spec = &model.spec;
    if (stream.width as usize, stream.height as usize) != (spec.width, spec.height) {
        return Err(Error::invalid(
            "infer",
            format!(
                "stream is {}x{}, model expects {}x{}",
                stream.width, stream.height, spec.width, spec.height
            ),
        ));
    }
    let dense = count_dense_macs(spec)?;
    let snn_specs = model.snn.specs();
    let mut counters = OpCounters::default();
    let mut sp_sum = vec![0.0; snn_specs.len()];
    let mut state = model.initial_state();
    let mut windows = Vec::new();
    let [_, gh, gw] = spec.feature_shape()?;
    let (sx, sy) = (
        spec.width as f64 / gw as f64,
        spec.height as f64 / gh as f64,
    );
    for t_end in window_ends(stream, cfg) {
        let x = window_tensor(stream, cfg, t_end)?;
        let out = model.forward_window(&x, &mut state)?;
        counters.merge(&dense);
        counters.merge(&count_spike_acs(&SpikeTrace::from_window(
            &snn_specs,
            &x,
            &out.spikes,
        ))?);
        for (acc, s) in sp_sum.iter_mut().zip(&out.spikes) {
            *acc += sparsity(s);
        }
        let detections = match &out.detection {
            Some(det) => decode(det, cfg.detect.score_threshold, cfg.detect.nms_iou)
                .into_iter()
                .map(|d| Detection {
                    bbox: BBox {
                        x0: d.bbox.x0 * sx,
                        y0: d.bbox.y0 * sy,
                        x1: d.bbox.x1 * sx,
                        y1: d.bbox.y1 * sy,
                    },
                    score: d.score,
                })
                .collect(),
            None => Vec::new(),
        };
        windows.push(WindowDetections {
            t_end_us: t_end,
            detections,
        });
    }
    let n = windows.len();
    let report = ProfileReport {
        counters,
        sparsity: sp_sum
            .into_iter()
            .enumerate()
            .map(|(i, s)| (format!("snn.{i}"), if n == 0 { 0.0 } else { s / n as f64 }))
            .collect(),
        energy: cfg.energy_model()?,
        windows: n,
    };
    Ok(InferOutput { windows, report })
}

pub fn detections_csv(windows: &[WindowDetections]) -> String {
    let mut s = String::from("t_end_us,x0,y0,x1,y1,score\n");
    for w in windows {
        for d in &w.detections {
            let _ = writeln!(
                s,
                "{},{:.3},{:.3},{:.3},{:.3},{:.6}",
                w.t_end_us, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1, d.score
            );
        }
    }
    s
}

pub fn run_profile(
    cfg: &RunConfig,
    model: &Model<f64>,
    stream: &EventStream,
) -> Result<ProfileReport> {
    Ok(run_infer(cfg, model, stream)?.report)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub model: Model<f64>,
    pub losses: Vec<f64>,
    pub eval: EvalReport,
}

/// Generates the synthetic sets, trains, and evaluates on the held-out set.
pub fn run_train_toy(cfg: &RunConfig, log: impl FnMut(usize, f64, f64)) -> Result<TrainRun> {
    let (train_seed, val_seed) = data_seeds(cfg.training.seed);
    let data = make_samples(cfg, cfg.training.train_samples, train_seed)?;
    let val = make_samples(cfg, cfg.training.val_samples, val_seed)?;
    let out = train(cfg, &data, log)?;
    let eval = evaluate(&out.model, &val, HIT_RADIUS)?;
    let mut checkpoint = Checkpoint::from_model(&out.model, config_hash(cfg));
    checkpoint.step = out.optimizer.step;
    for (name, m) in &out.optimizer.m {
        checkpoint
            .tensors
            .push((format!("adam.m.{name}"), m.clone()));
    }
    for (name, v) in &out.optimizer.v {
        checkpoint
            .tensors
            .push((format!("adam.v.{name}"), v.clone()));
    }
    Ok(TrainRun {
        checkpoint,
        model: out.model,
        losses: out.losses,
        eval,
    })
}

/// Spike agreement of the fixed-point front-end with the float one over
/// every window of `data`.
pub fn fidelity(
    model: &Model<f64>,
    q: &QuantizedSnn,
    data: &[Sample],
) -> Result<(FidelityReport, u64)> {
    let mut total: Option<FidelityReport> = None;
    let mut overflows = 0;
    for s in data {
        for x in &s.windows {
            let float = model.snn.forward_layers(x)?;
            let fixed = fixed_point_forward(&IntTensor::from_tensor(x)?, q)?;
            overflows += fixed.overflows;
            let r = layered_fidelity(&float, &fixed.spikes)?;
            total = Some(match total {
                None => r,
                Some(mut t) => {
                    t.matched += r.matched;
                    t.total += r.total;
                    for (a, b) in t.layer_mismatches.iter_mut().zip(&r.layer_mismatches) {
                        *a += b;
                    }
                    t.first_divergence = match (t.first_divergence, r.first_divergence) {
                        (Some(a), Some(b)) => Some(a.min(b)),
                        (a, b) => a.or(b),
                    };
                    t
                }
            });
        }
    }
    let rep = total.ok_or_else(|| Error::invalid("fidelity", "no evaluation windows"))?;
    Ok((rep, overflows))
}

#[derive(Clone, Debug)]
pub struct QuantizeOutput {
    pub model: QuantizedSnn,
    pub report: FidelityReport,
    pub overflows: u64,
}

/// Quantizes the spiking front-end and scores it on held-out streams.
pub fn run_quantize(cfg: &RunConfig, model: &Model<f64>, bits: u32) -> Result<QuantizeOutput> {
    let q = QuantizedSnn::from_backbone(&model.snn, bits)?;
    let val = make_samples(
        cfg,
        cfg.training.val_samples.max(1),
        data_seeds(cfg.training.seed).1,
    )?;
    let (report, overflows) = fidelity(model, &q, &val)?;
    Ok(QuantizeOutput {
        model: q,
        report,
        overflows,
    })
}

pub fn write_quantize_output(out: &QuantizeOutput, dir: &Path) -> Result<()> {
    write_quantized(dir, &out.model)?;
    fs::write(
        dir.join("fidelity.txt"),
        fidelity_text(out.model.bits, &out.report, out.overflows),
    )?;
    Ok(())
}

pub fn fidelity_text(bits: u32, r: &FidelityReport, overflows: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "bits: {bits}");
    let _ = writeln!(s, "match_rate: {:.6}", r.match_rate());
    let _ = writeln!(s, "matched: {}", r.matched);
    let _ = writeln!(s, "total: {}", r.total);
    let _ = writeln!(
        s,
        "first_divergence: {}",
        r.first_divergence.map_or("none".into(), |t| t.to_string())
    );
    let _ = writeln!(s, "overflows: {overflows}");
    for (i, m) in r.layer_mismatches.iter().enumerate() {
        let _ = writeln!(s, "mismatches.snn.{i}: {m}");
    }
    s
}

/// Fidelity at every supported bit width, widest first.
pub fn run_fidelity(cfg: &RunConfig, model: &Model<f64>) -> Result<Vec<QuantizeOutput>> {
    SUPPORTED_BITS
        .iter()
        .map(|&b| run_quantize(cfg, model, b))
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: BridgeVariant,
    pub seed: u64,
    pub final_loss: f64,
    pub eval: EvalReport,
}

/// Trains and evaluates each bridge variant from every seed; all variants
/// see the same data and initialization seed.
pub fn run_ablate(
    cfg: &RunConfig,
    variants: &[BridgeVariant],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let mut c = cfg.clone();
            c.arch.bridge_variant = v.name().into();
            c.training.seed = seed;
            let run = run_train_toy(&c, |_, _, _| {})?;
            let tail = run.losses.len().min(20).max(1);
            rows.push(AblationRow {
                variant: v,
                seed,
                final_loss: run.losses.iter().rev().take(tail).sum::<f64>() / tail as f64,
                eval: run.eval,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,final_loss,hit_rate,mean_center_error,val_loss,ap50\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.4},{:.4},{:.6},{:.4}",
            r.variant.name(),
            r.seed,
            r.final_loss,
            r.eval.hit_rate(),
            r.eval.mean_center_error,
            r.eval.mean_loss,
            r.eval.ap50
        );
    }
    s
}

/// Parameter count of a model, for reports.
pub fn param_count(model: &Model<f64>) -> usize {
    model.named_params().iter().map(|(_, t, _)| t.len()).sum()
}
