//! Inference over a split and dataset-level scoring.

use crate::autodiff::Graph;
use crate::config::TrainConfig;
use crate::data::{BiTemporalSample, Grid};
use crate::error::{Error, Result};
use crate::metrics::{accumulate_confusion, binarize, compute_metrics, ConfusionCounts, MetricsReport};
use crate::model::{batch_images, MsFormer};
use crate::nn::ParamStore;
use crate::supervision::ChangeMap;

pub const INFERENCE_BATCH: usize = 8;

/// Change maps for every sample, in input order, with batch norm in inference mode.
pub fn predict_maps(
    model: &MsFormer,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    samples: &[BiTemporalSample],
) -> Result<Vec<ChangeMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let refs: Vec<_> = chunk.iter().collect();
        let (a, b) = batch_images::<f32>(&refs, cfg.data.mean, cfg.data.std)?;
        let mut g = Graph::new();
        let x1 = g.constant(a);
        let x2 = g.constant(b);
        let out = model.forward(&mut g, store, x1, x2, cfg.patch_h, cfg.patch_w, false)?;
        let probs = g.value(out.change_map);
        let (h, w) = (probs.dim(2), probs.dim(3));
        for plane in probs.data().chunks_exact(h * w) {
            let grid = Grid::new(h, w, plane.iter().map(|&v| f64::from(v)).collect())?;
            maps.push(ChangeMap::new(grid)?);
        }
    }
    Ok(maps)
}

/// Scores a split against its pixel masks. With `ground_truth_as_prediction`
/// the masks themselves are scored, which must give perfect metrics.
pub fn evaluate(
    model: &MsFormer,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    samples: &[BiTemporalSample],
    ground_truth_as_prediction: bool,
) -> Result<MetricsReport> {
    let masks: Vec<_> = samples
        .iter()
        .map(|s| s.pixel_mask.as_ref().ok_or_else(|| Error::InvalidValue(format!("sample {} has no mask", s.id))))
        .collect::<Result<_>>()?;
    let mut counts = ConfusionCounts::default();
    if ground_truth_as_prediction {
        for m in &masks {
            counts += accumulate_confusion(m, m)?;
        }
    } else {
        let maps = predict_maps(model, store, cfg, samples)?;
        for (map, m) in maps.iter().zip(&masks) {
            counts += accumulate_confusion(&binarize(map.values(), cfg.threshold)?, m)?;
        }
    }
    let mut report = compute_metrics(&counts)?;
    report.patch_h = Some(cfg.patch_h);
    report.patch_w = Some(cfg.patch_w);
    Ok(report)
}
