//! Layer importance from input/output activation similarity, and group
//! importance from first-order Taylor saliency `Σ|∂L/∂W ⊙ W|`.
//!
//! Higher scores always mean more important. For cosine the raw score of a
//! layer is the negated mean per-token cosine between the residual stream
//! entering and leaving it; for distances it is the mean distance itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::depgraph::{enumerate_groups, for_each_in_slice, layer_weight, GroupKind};
use crate::error::{shape_err, Error, Result};
use crate::model::{ActivationCapture, Model, TokenBatch};
use crate::real::Real;
use crate::tape::Tape;

/// Sequences per forward pass when sweeping a calibration set.
pub const CALIBRATION_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityFn {
    #[default]
    Cosine,
    Euclidean,
    Manhattan,
}

impl fmt::Display for SimilarityFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Euclidean => "euclidean",
            Self::Manhattan => "manhattan",
        })
    }
}

impl FromStr for SimilarityFn {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "euclidean" => Ok(Self::Euclidean),
            "manhattan" => Ok(Self::Manhattan),
            other => Err(Error::Config {
                field: "sim_fn",
                reason: format!("unknown similarity function {other:?} (cosine, euclidean, manhattan)"),
            }),
        }
    }
}

/// Streams captures chunk by chunk; per-layer sums are kept in 64-bit.
#[derive(Clone, Debug)]
pub struct SimilarityAccumulator {
    sim: SimilarityFn,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl SimilarityAccumulator {
    pub fn new(sim: SimilarityFn, n_layers: usize) -> Self {
        Self {
            sim,
            sums: vec![0.0; n_layers],
            counts: vec![0; n_layers],
        }
    }

    pub fn add<T: Real>(&mut self, capture: &ActivationCapture<T>) -> Result<()> {
        if capture.layers.len() != self.sums.len() {
            return shape_err(
                "layer_importance",
                format!("capture has {} layers, expected {}", capture.layers.len(), self.sums.len()),
            );
        }
        for (i, pair) in capture.layers.iter().enumerate() {
            if pair.input.shape() != pair.output.shape() || pair.input.ndim() != 3 {
                return shape_err("layer_importance", format!("layer {i}: L_in and L_out must share a [B, L, H] shape"));
            }
            let h = pair.input.last_dim();
            for (x, y) in pair.input.data().chunks_exact(h).zip(pair.output.data().chunks_exact(h)) {
                let value = match self.sim {
                    SimilarityFn::Cosine => {
                        let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
                        for (a, b) in x.iter().zip(y) {
                            let (a, b) = (a.f64(), b.f64());
                            dot += a * b;
                            nx += a * a;
                            ny += b * b;
                        }
                        if nx == 0.0 || ny == 0.0 {
                            continue;
                        }
                        -(dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0)
                    }
                    SimilarityFn::Euclidean => x
                        .iter()
                        .zip(y)
                        .map(|(a, b)| (b.f64() - a.f64()).powi(2))
                        .sum::<f64>()
                        .sqrt(),
                    SimilarityFn::Manhattan => x.iter().zip(y).map(|(a, b)| (b.f64() - a.f64()).abs()).sum(),
                };
                self.sums[i] += value;
                self.counts[i] += 1;
            }
        }
        Ok(())
    }

    /// Raw per-layer importance.
    pub fn finish(&self) -> Result<Vec<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(layer, (&s, &n))| {
                if n == 0 {
                    Err(Error::ZeroNorm { layer })
                } else {
                    Ok(s / n as f64)
                }
            })
            .collect()
    }
}

/// Raw importance of every layer from one capture.
pub fn layer_importance<T: Real>(capture: &ActivationCapture<T>, sim: SimilarityFn) -> Result<Vec<f64>> {
    let mut acc = SimilarityAccumulator::new(sim, capture.layers.len());
    acc.add(capture)?;
    acc.finish()
}

/// Centers the scores, then scales so the largest magnitude is 1.
pub fn normalize_importance(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.len() < 2 {
        return Err(Error::Config {
            field: "n_layers",
            reason: format!("importance normalization needs at least 2 layers, got {}", raw.len()),
        });
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("raw layer importance".into()));
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let centered: Vec<f64> = raw.iter().map(|x| x - mean).collect();
    let max_abs = centered.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_abs < 1e-12 {
        return Ok(vec![0.0; raw.len()]);
    }
    Ok(centered.into_iter().map(|x| x / max_abs).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub sim_fn: SimilarityFn,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub layer: usize,
    pub raw: f64,
    pub normalized: f64,
    pub sim_fn: SimilarityFn,
}

impl ImportanceProfile {
    pub fn from_raw(raw: Vec<f64>, sim_fn: SimilarityFn) -> Result<Self> {
        let normalized = normalize_importance(&raw)?;
        Ok(Self { sim_fn, raw, normalized })
    }

    pub fn records(&self) -> Vec<ImportanceRecord> {
        self.raw
            .iter()
            .zip(&self.normalized)
            .enumerate()
            .map(|(layer, (&raw, &normalized))| ImportanceRecord {
                layer,
                raw,
                normalized,
                sim_fn: self.sim_fn,
            })
            .collect()
    }
}

/// Calibration sequences in canonical order (length, then tokens), cut into
/// equal-length batches of at most `max_batch` rows.
pub fn calibration_batches(calibration: &CalibrationSet, max_batch: usize) -> Result<Vec<TokenBatch>> {
    let mut seqs: Vec<&Vec<u32>> = calibration.sequences.iter().filter(|s| !s.is_empty()).collect();
    if seqs.is_empty() {
        return Err(Error::CorpusTooSmall("calibration set is empty".into()));
    }
    seqs.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let mut out = Vec::new();
    let mut start = 0;
    while start < seqs.len() {
        let len = seqs[start].len();
        let mut end = start;
        while end < seqs.len() && seqs[end].len() == len && end - start < max_batch.max(1) {
            end += 1;
        }
        out.push(TokenBatch::from_rows(&seqs[start..end])?);
        start = end;
    }
    Ok(out)
}

/// Profile of `model` over the whole calibration set.
pub fn importance_profile<T: Real>(
    model: &Model<T>,
    calibration: &CalibrationSet,
    sim: SimilarityFn,
) -> Result<ImportanceProfile> {
    let mut acc = SimilarityAccumulator::new(sim, model.config.n_layers());
    for batch in calibration_batches(calibration, CALIBRATION_BATCH)? {
        let mut tape = Tape::new();
        let out = model.forward_on_tape(&mut tape, &batch, true, false)?;
        acc.add(out.capture.as_ref().expect("capture requested"))?;
    }
    ImportanceProfile::from_raw(acc.finish()?, sim)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub layer: usize,
    pub kind: GroupKind,
    pub index: usize,
    pub score: f64,
}

/// Copy of `model` whose gradient accumulators hold the next-token loss
/// gradient averaged over calibration sequences.
pub fn calibration_gradients<T: Real>(model: &Model<T>, calibration: &CalibrationSet) -> Result<Model<T>> {
    let mut shifted = calibration.clone();
    shifted.sequences.retain(|s| s.len() >= 2);
    let batches = calibration_batches(&shifted, CALIBRATION_BATCH)?;
    let total: usize = batches.iter().map(|b| b.batch).sum();
    let mut grads = model.clone();
    grads.zero_grads();
    let mut tape = Tape::new();
    for batch in batches {
        let (b, l) = (batch.batch, batch.seq);
        let mut inputs = Vec::with_capacity(b * (l - 1));
        let mut targets = Vec::with_capacity(b * (l - 1));
        for row in batch.ids.chunks_exact(l) {
            inputs.extend_from_slice(&row[..l - 1]);
            targets.extend_from_slice(&row[1..]);
        }
        let inputs = TokenBatch::new(b, l - 1, inputs)?;
        tape.reset();
        let out = model.forward_on_tape(&mut tape, &inputs, false, true)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        let loss = tape.scale(loss, T::of(b as f64 / total as f64))?;
        tape.backward(loss)?;
        grads.accumulate_grads(&tape, &out.params);
    }
    Ok(grads)
}

/// Taylor score of every coupled group, using the gradients already stored
/// in `model`'s accumulators (missing gradients count as zero).
pub fn taylor_scores<T: Real>(model: &Model<T>) -> Result<Vec<GroupScore>> {
    let hd = model.config.head_dim;
    let mut out = Vec::new();
    for g in enumerate_groups(model) {
        let layer = &model.layers[g.layer];
        let mut score = 0.0f64;
        for slice in g.members(hd) {
            let w = layer_weight(layer, slice.weight);
            let Some(grad) = w.grad.as_ref() else { continue };
            for_each_in_slice(w, &slice, |i, v| score += (grad[i].f64() * v.f64()).abs());
        }
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("Taylor score of layer {} {:?} {}", g.layer, g.kind, g.index)));
        }
        out.push(GroupScore {
            layer: g.layer,
            kind: g.kind,
            index: g.index,
            score,
        });
    }
    Ok(out)
}

/// First-order saliency of every coupled group over the calibration set.
pub fn group_importance<T: Real>(model: &Model<T>, calibration: &CalibrationSet) -> Result<Vec<GroupScore>> {
    taylor_scores(&calibration_gradients(model, calibration)?)
}
