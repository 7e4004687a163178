//! Next-token training with decoupled-weight-decay Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depgraph::{prune_in_place, PrunePlan};
use crate::error::{config_err, Error, Result};
use crate::model::{Model, TokenBatch};
use crate::real::Real;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to matrices only; norm gains are not decayed.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
        }
    }
}

/// Optimizer state. The moments are stored as models of the same shape as
/// the trained one, so pruning can slice them with the same plan.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub step: usize,
    pub m: Model<T>,
    pub v: Model<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(model: &Model<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    /// Drops the moment entries of removed groups.
    pub fn prune(&mut self, plan: &PrunePlan) -> Result<()> {
        prune_in_place(&mut self.m, plan)?;
        prune_in_place(&mut self.v, plan)
    }

    /// One update from the gradients accumulated in `model`.
    pub fn update(&mut self, model: &mut Model<T>, lr: f64) -> Result<()> {
        if self.m.config != model.config {
            return Err(Error::Shape {
                op: "adamw",
                detail: "optimizer state does not match model widths".into(),
            });
        }
        let c = &self.config;
        let mut scale = 1.0;
        if let Some(clip) = c.grad_clip {
            let sq: f64 = model
                .tensors()
                .iter()
                .filter_map(|(_, t)| t.grad.as_ref())
                .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
                .sum();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm".into()));
            }
            if norm > clip {
                scale = clip / norm;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (c.beta1, c.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let params = model.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((_, w), (_, m)), (_, v)) in params.into_iter().zip(ms).zip(vs) {
            let Some(g) = w.grad.take() else { continue };
            let decay = if w.ndim() == 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                let gi = g[i].f64() * scale;
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let step = lr * ((mi / bc1) / ((vi / bc2).sqrt() + c.eps) + decay * x.f64());
                *x = T::of(x.f64() - step);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size", "must be at least 1");
        }
        if self.seq_len == 0 {
            return config_err("seq_len", "must be at least 1");
        }
        Ok(())
    }
}

/// Training windows of one phase: `seq_len + 1` tokens each at stride
/// `seq_len`, shuffled with `seed`, grouped into batches of `batch_size`
/// (the last batch may be short).
pub fn phase_batches(tokens: &[u32], batch_size: usize, seq_len: usize, seed: u64) -> Vec<(TokenBatch, Vec<u32>)> {
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * seq_len)
        .take_while(|s| s + seq_len < tokens.len())
        .collect();
    starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    starts
        .chunks(batch_size.max(1))
        .map(|chunk| window_batch(tokens, chunk, seq_len))
        .collect()
}

/// Optimizer steps a phase of `n_tokens` tokens takes.
pub fn phase_steps(n_tokens: usize, batch_size: usize, seq_len: usize) -> usize {
    let windows = if n_tokens > seq_len { (n_tokens - 1) / seq_len } else { 0 };
    windows.div_ceil(batch_size.max(1))
}

fn window_batch(tokens: &[u32], starts: &[usize], seq_len: usize) -> (TokenBatch, Vec<u32>) {
    let mut inputs = Vec::with_capacity(starts.len() * seq_len);
    let mut targets = Vec::with_capacity(starts.len() * seq_len);
    for &s in starts {
        inputs.extend_from_slice(&tokens[s..s + seq_len]);
        targets.extend_from_slice(&tokens[s + 1..s + seq_len + 1]);
    }
    let batch = TokenBatch::new(starts.len(), seq_len, inputs).expect("window layout");
    (batch, targets)
}

/// Forward, backward and one optimizer update. Returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    inputs: &TokenBatch,
    targets: &[u32],
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.forward_on_tape(&mut tape, inputs, false, true)?;
    let loss_var = tape.cross_entropy(out.logits, targets)?;
    let loss = tape.value(loss_var).data()[0].f64();
    if !loss.is_finite() {
        return Err(Error::Diverged { step: opt.step, loss });
    }
    tape.backward(loss_var).map_err(|_| Error::Diverged { step: opt.step, loss })?;
    model.zero_grads();
    model.accumulate_grads(&tape, &out.params);
    opt.update(model, lr)?;
    Ok(loss)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub steps: usize,
    pub tokens: usize,
    pub losses: Vec<f64>,
}

/// One pass over `tokens`, one optimizer step per batch, learning rates
/// taken in order from `lr_slice` (which must have one entry per step).
pub fn train_phase<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    tokens: &[u32],
    lr_slice: &[f64],
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    cfg.validate()?;
    let batches = phase_batches(tokens, cfg.batch_size, cfg.seq_len, cfg.seed ^ opt.step as u64);
    if batches.len() != lr_slice.len() {
        return Err(Error::Schedule(format!(
            "phase has {} batches but the learning-rate slice has {} entries",
            batches.len(),
            lr_slice.len()
        )));
    }
    let mut report = PhaseReport {
        tokens: tokens.len(),
        ..PhaseReport::default()
    };
    for ((inputs, targets), &lr) in batches.iter().zip(lr_slice) {
        report.losses.push(train_step(model, opt, inputs, targets, lr)?);
        report.steps += 1;
    }
    Ok(report)
}

/// `steps` updates on uniformly drawn windows of `tokens`; `lr(step)` gives
/// the rate of each step.
pub fn train_steps<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    tokens: &[u32],
    steps: usize,
    lr: impl Fn(usize) -> f64,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if tokens.len() <= cfg.seq_len {
        return Err(Error::CorpusTooSmall(format!(
            "{} tokens cannot fill a window of {}",
            tokens.len(),
            cfg.seq_len + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let starts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..tokens.len() - cfg.seq_len))
            .collect();
        let (inputs, targets) = window_batch(tokens, &starts, cfg.seq_len);
        losses.push(train_step(model, opt, &inputs, &targets, lr(step))?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::{CoupledGroup, GroupKind};
    use crate::model::ModelConfig;

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            seq_len: 16,
            seed,
            optimizer: AdamWConfig::default(),
        }
    }

    fn toy() -> Model<f64> {
        Model::init(ModelConfig::uniform(32, 16, 2, 2, 32, 32).unwrap(), 7).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = toy();
        let before = m.clone();
        let mut opt = AdamW::new(&m, AdamWConfig::default());
        let tokens: Vec<u32> = (0..200).map(|i| (i * 5 % 32) as u32).collect();
        let steps = phase_steps(tokens.len(), 4, 16);
        let r = train_phase(&mut m, &mut opt, &tokens, &vec![0.0; steps], &cfg(1)).unwrap();
        assert_eq!(r.steps, steps);
        for ((_, a), (_, b)) in m.tensors().into_iter().zip(before.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn phase_windows_cover_stream() {
        let tokens: Vec<u32> = (0..101).collect();
        let batches = phase_batches(&tokens, 3, 10, 5);
        assert_eq!(batches.len(), phase_steps(101, 3, 10));
        let mut firsts: Vec<u32> = batches.iter().flat_map(|(b, _)| b.ids.chunks(10).map(|r| r[0])).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, (0..10).map(|k| k * 10).collect::<Vec<_>>());
        for (b, t) in &batches {
            for (row, trow) in b.ids.chunks(10).zip(t.chunks(10)) {
                assert_eq!(&row[1..], &trow[..9]);
            }
        }
        assert!(train_phase(&mut toy(), &mut AdamW::new(&toy(), AdamWConfig::default()), &tokens, &[0.1], &cfg(0)).is_err());
    }

    #[test]
    fn memorizes_small_corpus() {
        let mut m: Model<f32> = toy().cast();
        let mut opt = AdamW::new(&m, AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() });
        let text = b"the quick brown fox jumps over the lazy dog. ";
        let tokens: Vec<u32> = text.iter().cycle().take(1000).map(|&b| (b % 32) as u32).collect();
        let losses = train_steps(&mut m, &mut opt, &tokens, 200, |_| 1e-2, &cfg(3)).unwrap();
        let first = losses[0];
        let last = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn moments_follow_pruning() {
        let mut m = toy();
        let mut opt = AdamW::new(&m, AdamWConfig::default());
        let tokens: Vec<u32> = (0..300).map(|i| (i * 7 % 32) as u32).collect();
        train_steps(&mut m, &mut opt, &tokens, 2, |_| 1e-3, &cfg(4)).unwrap();
        let plan = PrunePlan::from_groups([
            CoupledGroup { layer: 0, kind: GroupKind::AttentionHead, index: 0 },
            CoupledGroup { layer: 1, kind: GroupKind::MlpChannel, index: 5 },
        ]);
        let kept_m = opt.m.layers[1].w_down.data()[6 * 16];
        prune_in_place(&mut m, &plan).unwrap();
        opt.prune(&plan).unwrap();
        assert_eq!(opt.m.config, m.config);
        assert_eq!(opt.m.layers[1].w_down.data()[5 * 16], kept_m);
        for ((_, w), (_, s)) in m.tensors().into_iter().zip(opt.v.tensors()) {
            assert_eq!(w.shape(), s.shape());
        }
        train_steps(&mut m, &mut opt, &tokens, 1, |_| 1e-3, &cfg(5)).unwrap();
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut m = toy();
            let mut opt = AdamW::new(&m, AdamWConfig::default());
            let tokens: Vec<u32> = (0..300).map(|i| (i * 11 % 32) as u32).collect();
            train_steps(&mut m, &mut opt, &tokens, 3, |_| 1e-3, &cfg(9)).unwrap();
            m
        };
        assert_eq!(run(), run());
    }
}
