//! Perplexity, single-layer sensitivity sweeps and architecture reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::depgraph::{apply_prune, select_groups, RemovalTarget};
use crate::error::{config_err, Error, Result};
use crate::importance::{group_importance, GroupScore};
use crate::model::{Model, TokenBatch};
use crate::real::Real;
use crate::tape::Tape;

/// Windows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

/// `exp(mean NLL)` over non-overlapping full windows of `max_len` tokens;
/// each window scores its last `max_len − 1` tokens.
pub fn perplexity<T: Real>(model: &Model<T>, tokens: &[u32], max_len: usize) -> Result<f64> {
    Ok(mean_nll(model, tokens, max_len)?.exp())
}

/// Mean next-token negative log-likelihood under the same windowing.
pub fn mean_nll<T: Real>(model: &Model<T>, tokens: &[u32], max_len: usize) -> Result<f64> {
    if max_len < 2 {
        return config_err("eval_max_len", "windows need at least 2 tokens");
    }
    let windows: Vec<&[u32]> = tokens.chunks_exact(max_len).collect();
    if windows.is_empty() {
        return Err(Error::CorpusTooSmall(format!(
            "{} tokens give no evaluation window of {max_len}",
            tokens.len()
        )));
    }
    let l = max_len - 1;
    let mut total = 0.0f64;
    let mut tape = Tape::new();
    for chunk in windows.chunks(EVAL_BATCH) {
        let mut inputs = Vec::with_capacity(chunk.len() * l);
        let mut targets = Vec::with_capacity(chunk.len() * l);
        for w in chunk {
            inputs.extend_from_slice(&w[..l]);
            targets.extend_from_slice(&w[1..]);
        }
        let batch = TokenBatch::new(chunk.len(), l, inputs)?;
        tape.reset();
        let out = model.forward_on_tape(&mut tape, &batch, false, false)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        total += tape.value(loss).data()[0].f64() * chunk.len() as f64;
    }
    let nll = total / windows.len() as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite("evaluation loss".into()));
    }
    Ok(nll)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub layer: usize,
    pub sparsity: f64,
    pub perplexity: f64,
    pub baseline: f64,
    pub delta: f64,
}

/// Removal counts that prune only `layer`, each kind at `sparsity`
/// (nearest whole group, halves down, at least one kept).
pub fn single_layer_targets<T: Real>(model: &Model<T>, layer: usize, sparsity: f64) -> Vec<RemovalTarget> {
    let c = &model.config;
    let count = |n: usize| (((sparsity * n as f64) - 0.5).ceil().max(0.0) as usize).min(n - 1);
    let mut out = vec![RemovalTarget::default(); c.n_layers()];
    out[layer] = RemovalTarget {
        heads: count(c.head_count[layer]),
        channels: count(c.mlp_channels[layer]),
    };
    out
}

/// Prunes each layer alone from the same base model and reports the
/// perplexity change. Group scores are computed once on the base model.
pub fn sensitivity_sweep<T: Real>(
    model: &Model<T>,
    sparsity: f64,
    calibration: &CalibrationSet,
    eval_tokens: &[u32],
    max_len: usize,
) -> Result<Vec<SensitivityRecord>> {
    if !(sparsity > 0.0 && sparsity < 1.0) {
        return config_err("sparsity", format!("{sparsity} is outside (0, 1)"));
    }
    let scores = group_importance(model, calibration)?;
    sensitivity_with_scores(model, sparsity, &scores, eval_tokens, max_len)
}

pub fn sensitivity_with_scores<T: Real>(
    model: &Model<T>,
    sparsity: f64,
    scores: &[GroupScore],
    eval_tokens: &[u32],
    max_len: usize,
) -> Result<Vec<SensitivityRecord>> {
    let baseline = perplexity(model, eval_tokens, max_len)?;
    (0..model.config.n_layers())
        .map(|layer| {
            let plan = select_groups(scores, &single_layer_targets(model, layer, sparsity))?;
            let pruned = apply_prune(model, &plan)?;
            let ppl = perplexity(&pruned, eval_tokens, max_len)?;
            Ok(SensitivityRecord {
                layer,
                sparsity,
                perplexity: ppl,
                baseline,
                delta: ppl - baseline,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchRow {
    pub layer: usize,
    pub heads: usize,
    pub channels: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchReport {
    pub layers: Vec<ArchRow>,
    pub fixed_params: usize,
    pub total_params: usize,
}

pub fn arch_report<T: Real>(model: &Model<T>) -> ArchReport {
    let pc = model.param_count();
    let c = &model.config;
    ArchReport {
        layers: (0..c.n_layers())
            .map(|i| ArchRow {
                layer: i,
                heads: c.head_count[i],
                channels: c.mlp_channels[i],
                params: pc.per_layer[i],
            })
            .collect(),
        fixed_params: pc.total - pc.per_layer.iter().sum::<usize>(),
        total_params: pc.total,
    }
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<S: Serialize, W: Write>(rows: &[S], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<S: for<'de> Deserialize<'de>, R: Read>(reader: R) -> Result<Vec<S>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy(seed: u64) -> Model<f64> {
        Model::init(ModelConfig::uniform(260, 8, 2, 2, 8, 16).unwrap(), seed).unwrap()
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = toy(1);
        m.lm_head.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let tokens: Vec<u32> = (0..200).map(|i| (i * 37 % 260) as u32).collect();
        let ppl = perplexity(&m, &tokens, 16).unwrap();
        assert!((ppl - 260.0).abs() < 0.5, "{ppl}");
        assert!(perplexity(&m, &tokens[..10], 16).is_err());
    }

    #[test]
    fn perplexity_deterministic() {
        let m = toy(2);
        let tokens: Vec<u32> = (0..300).map(|i| (i * 13 % 250) as u32).collect();
        assert_eq!(perplexity(&m, &tokens, 16).unwrap(), perplexity(&m, &tokens, 16).unwrap());
    }

    #[test]
    fn zeroed_layer_is_insensitive() {
        let mut m = toy(3);
        for (name, t) in m.tensors_mut() {
            if name.starts_with("layers.1.w") {
                t.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let calib = CalibrationSet::new(16, (0..4).map(|i| (0..16).map(|j| ((i * 31 + j * 7) % 260) as u32).collect()).collect()).unwrap();
        let tokens: Vec<u32> = (0..160).map(|i| (i * 29 % 260) as u32).collect();
        let before = m.clone();
        let recs = sensitivity_sweep(&m, 0.5, &calib, &tokens, 16).unwrap();
        assert_eq!(m, before);
        assert_eq!(recs[1].delta, 0.0);
        assert!(recs.iter().all(|r| r.delta == r.perplexity - r.baseline));
        let tiny = sensitivity_sweep(&m, 0.01, &calib, &tokens, 16).unwrap();
        assert!(tiny.iter().all(|r| r.delta == 0.0));
        assert!(sensitivity_sweep(&m, 1.5, &calib, &tokens, 16).is_err());
    }

    #[test]
    fn arch_csv_round_trip() {
        let m = toy(4);
        let r = arch_report(&m);
        assert_eq!(r.layers.iter().map(|l| l.params).sum::<usize>() + r.fixed_params, m.param_count().total);
        let mut buf = Vec::new();
        write_csv(&r.layers, &mut buf).unwrap();
        let back: Vec<ArchRow> = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, r.layers);
    }
}
