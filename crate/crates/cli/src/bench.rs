//! Throughput runs with replicated model instances.

use std::time::{Duration, Instant};

use compsparse::network::{ExecMode, Inference, LayerMacs, MacReport, ModelGraph};
use compsparse::QTensor;
use serde::Serialize;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerLatency {
    pub layer: String,
    pub us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacSummary {
    pub layers: Vec<LayerMacs>,
    pub total: Option<LayerMacs>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub throughput_ips: f64,
    pub instances: usize,
    pub threads: usize,
    pub frames: usize,
    pub mode: ExecMode,
    pub elapsed_s: f64,
    /// Mean wall time per frame spent in each layer.
    pub per_layer_latency_us: Vec<LayerLatency>,
    /// Summed over all frames.
    pub mac_report: MacSummary,
    /// CRC-32 over every frame's logits in frame order.
    pub logits_digest: String,
    #[serde(skip)]
    pub logits: Vec<Vec<i32>>,
}

/// Worker count: `instances`, capped by `CS_THREADS` when set and otherwise
/// by the host's available parallelism.
pub fn worker_count(instances: usize) -> usize {
    let cap = std::env::var("CS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    instances.clamp(1, cap.max(1))
}

/// Runs `instances` replicas over the frame stream: frame `j` belongs to
/// instance `j % instances`, and instances are spread over the worker pool.
pub fn run(model: &ModelGraph, frames: &[QTensor], instances: usize, mode: ExecMode, threads: usize) -> CliResult<BenchResult> {
    let instances = instances.max(1);
    let threads = threads.clamp(1, instances);
    let start = Instant::now();
    let per_worker: Vec<CliResult<Vec<(usize, Inference)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|worker| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for instance in (worker..instances).step_by(threads) {
                        for j in (instance..frames.len()).step_by(instances) {
                            out.push((j, model.infer_with(&frames[j], mode)?));
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let elapsed = start.elapsed();
    let mut results: Vec<Option<Inference>> = vec![None; frames.len()];
    for batch in per_worker {
        for (j, r) in batch? {
            results[j] = Some(r);
        }
    }
    let results: Vec<Inference> = results.into_iter().map(|r| r.expect("every frame ran")).collect();
    Ok(summarize(results, instances, threads, mode, elapsed))
}

fn summarize(results: Vec<Inference>, instances: usize, threads: usize, mode: ExecMode, elapsed: Duration) -> BenchResult {
    let frames = results.len();
    let mut macs = MacReport::default();
    let mut latency: Vec<(String, Duration)> = Vec::new();
    let mut hasher = crc32fast::Hasher::new();
    for r in &results {
        macs.accumulate(&r.macs).expect("same model for every frame");
        if latency.is_empty() {
            latency = r.layer_times.iter().map(|(n, _)| (n.clone(), Duration::ZERO)).collect();
        }
        for ((_, total), (_, t)) in latency.iter_mut().zip(&r.layer_times) {
            *total += *t;
        }
        for v in &r.logits {
            hasher.update(&v.to_le_bytes());
        }
    }
    let secs = elapsed.as_secs_f64();
    BenchResult {
        throughput_ips: if frames == 0 || secs == 0.0 { 0.0 } else { frames as f64 / secs },
        instances,
        threads,
        frames,
        mode,
        elapsed_s: secs,
        per_layer_latency_us: latency
            .into_iter()
            .map(|(layer, t)| LayerLatency {
                layer,
                us: t.as_secs_f64() * 1e6 / frames.max(1) as f64,
            })
            .collect(),
        mac_report: MacSummary {
            total: (!macs.layers.is_empty()).then(|| macs.total()),
            layers: macs.layers,
        },
        logits_digest: format!("{:08x}", hasher.finalize()),
        logits: results.into_iter().map(|r| r.logits).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use compsparse::network::{build_gsc_network, random_frames, GscSparsity, WeightSource, GSC_INPUT};

    #[test]
    fn replication_keeps_results() {
        let model = build_gsc_network(
            Some(&GscSparsity::default()),
            WeightSource::Synthetic {
                seed: 6,
                calibration_frames: 1,
            },
        )
        .unwrap();
        let frames = random_frames(GSC_INPUT, 7, 2);
        let one = run(&model, &frames, 1, ExecMode::SparseSparse, 1).unwrap();
        let four = run(&model, &frames, 4, ExecMode::SparseSparse, 4).unwrap();
        let three_on_two = run(&model, &frames, 3, ExecMode::SparseSparse, 2).unwrap();
        assert_eq!(one.logits, four.logits);
        assert_eq!(one.logits_digest, three_on_two.logits_digest);
        assert_eq!(one.mac_report, four.mac_report);
        assert_eq!(one.frames, 7);
        assert_eq!(four.instances, 4);
    }

    #[test]
    fn zero_frames() {
        let model = build_gsc_network(
            None,
            WeightSource::Synthetic {
                seed: 1,
                calibration_frames: 0,
            },
        )
        .unwrap();
        let r = run(&model, &[], 2, ExecMode::Dense, 2).unwrap();
        assert_eq!(r.frames, 0);
        assert_eq!(r.throughput_ips, 0.0);
        assert!(r.mac_report.layers.is_empty());
    }
}
