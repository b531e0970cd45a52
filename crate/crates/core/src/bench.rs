//! Test-set evaluation and single-image latency measurement.

use std::time::Instant;

use crate::data::SegDataset;
use crate::error::{Error, Result};
use crate::graph::{forward, ModelGraph};
use crate::layers::Mode;
use crate::metrics::{compute_metrics, per_sample_confusion, Aggregation, ImageRow, LatencyStats, MetricsReport};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Inference-mode prediction for a batch of images.
pub fn predict(graph: &ModelGraph, store: &WeightStore, x: &Tensor) -> Result<Tensor> {
    forward(graph, store, x, Mode::Infer, None)
}

/// Scores every sample of `data`. Pairs that could not be loaded upstream are
/// passed through as `skipped` so the report can list them.
pub fn evaluate_dataset(
    graph: &ModelGraph,
    store: &WeightStore,
    data: &SegDataset,
    batch_size: usize,
    threshold: f64,
    aggregation: Aggregation,
    skipped: Vec<(String, String)>,
) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let p = predict(graph, store, &x)?;
        for (&i, counts) in chunk.iter().zip(per_sample_confusion(&p, &y, threshold)?) {
            rows.push(ImageRow {
                id: data.ids[i].clone(),
                counts,
                metrics: compute_metrics(&counts),
            });
        }
    }
    Ok(MetricsReport::new(graph.count_parameters().total, rows, skipped, aggregation))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            height: 256,
            width: 256,
            warmup: 5,
            iterations: 30,
        }
    }
}

/// Times batch-1 inference on a fixed input. Runs inside a one-thread pool so
/// numbers are comparable across machines and variants.
pub fn bench_latency(graph: &ModelGraph, store: &WeightStore, cfg: &BenchConfig) -> Result<LatencyStats> {
    if cfg.iterations == 0 {
        return Err(Error::Config("benchmark needs at least one timed iteration".into()));
    }
    let c = graph.input_shape().c;
    let x = Tensor::from_fn((1, c, cfg.height, cfg.width), |_, c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 11.0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Other(format!("thread pool: {e}")))?;
    pool.install(|| {
        for _ in 0..cfg.warmup {
            predict(graph, store, &x)?;
        }
        let mut samples = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let t = Instant::now();
            let y = predict(graph, store, &x)?;
            samples.push(t.elapsed().as_secs_f64());
            std::hint::black_box(y);
        }
        LatencyStats::from_seconds(&samples).ok_or_else(|| Error::Other("no latency samples".into()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{blob_dataset, BlobConfig};
    use crate::model::{build_nanonet, ModelConfig, Variant};

    #[test]
    fn evaluation_rows_follow_dataset_order() {
        let g = build_nanonet(&ModelConfig::new(Variant::C).with_input_size(32, 32)).unwrap();
        let w = WeightStore::initialize(&g, 0);
        let cfg = BlobConfig {
            size: 32,
            ..BlobConfig::default()
        };
        let ds = blob_dataset(&cfg, 5, 3, 0);
        let r = evaluate_dataset(&g, &w, &ds, 2, 0.5, Aggregation::MeanOverImages, vec![]).unwrap();
        let ids: Vec<_> = r.rows.iter().map(|r| r.id.clone()).collect();
        assert_eq!(ids, ds.ids);
        assert_eq!(r.parameters, 36_561);
    }

    #[test]
    fn latency_reports_requested_iterations() {
        let g = build_nanonet(&ModelConfig::new(Variant::C).with_input_size(32, 32)).unwrap();
        let w = WeightStore::initialize(&g, 0);
        let cfg = BenchConfig {
            height: 32,
            width: 32,
            warmup: 1,
            iterations: 3,
        };
        let s = bench_latency(&g, &w, &cfg).unwrap();
        assert_eq!(s.iterations, 3);
        assert!(s.fps > 0.0 && s.p95_ms >= s.median_ms);
    }
}
