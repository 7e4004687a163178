//! Schedule arithmetic: per-layer sparsity from importance, per-iteration
//! targets, interleave keep ratios and the warmup-stable-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::data::PhaseAllocation;
use crate::error::{config_err, Error, Result};

/// Ceiling on any single layer's sparsity.
pub const MAX_LAYER_SPARSITY: f64 = 0.95;
pub const DEFAULT_AMPLITUDE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub per_layer: Vec<f64>,
    pub base: f64,
    pub amplitude: f64,
}

impl SparsityPlan {
    pub fn mean(&self) -> f64 {
        self.per_layer.iter().sum::<f64>() / self.per_layer.len() as f64
    }
}

/// `S_i = S_base − A·I_i`, clamped to `[0, 0.95]`. Whatever clamping removes
/// (or adds) is spread evenly over the unclamped layers, repeating until the
/// mean is back at `S_base`. Layers pinned at the opposite bound take the
/// residue only once no unclamped layer is left to move.
pub fn assign_sparsity(importance: &[f64], base: f64, amplitude: f64) -> Result<SparsityPlan> {
    if !(base > 0.0 && base < 1.0) {
        return config_err("sparsity", format!("{base} must lie in (0, 1)"));
    }
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return config_err("amplitude", format!("{amplitude} must be finite and non-negative"));
    }
    if importance.is_empty() {
        return config_err("importance", "no layers");
    }
    let n = importance.len();
    let target_sum = base * n as f64;
    let raw: Vec<f64> = importance.iter().map(|&i| base - amplitude * i).collect();
    let mut s: Vec<f64> = raw.iter().map(|x| x.clamp(0.0, MAX_LAYER_SPARSITY)).collect();
    let mut clamped: Vec<bool> = raw.iter().zip(&s).map(|(r, c)| r != c).collect();
    // each pass either clears the residue or pins at least one more layer
    // at the bound the residue pushes towards, so 2n + 1 passes suffice
    for _ in 0..=2 * n {
        let residue = target_sum - s.iter().sum::<f64>();
        if residue.abs() <= 1e-15 * n as f64 {
            break;
        }
        let movable = |i: usize| if residue > 0.0 { s[i] < MAX_LAYER_SPARSITY } else { s[i] > 0.0 };
        let mut free: Vec<usize> = (0..n).filter(|&i| !clamped[i] && movable(i)).collect();
        if free.is_empty() {
            // only layers pinned at the opposite bound can still move
            free = (0..n).filter(|&i| movable(i)).collect();
        }
        if free.is_empty() {
            break;
        }
        let share = residue / free.len() as f64;
        for i in free {
            let moved = s[i] + share;
            s[i] = moved.clamp(0.0, MAX_LAYER_SPARSITY);
            clamped[i] |= s[i] != moved;
        }
    }
    Ok(SparsityPlan {
        per_layer: s,
        base,
        amplitude,
    })
}

/// Cumulative sparsity reached after iteration `i` of `t`: `S·i/T`.
pub fn iteration_target(final_sparsity: f64, i: usize, t: usize) -> Result<f64> {
    if t == 0 || i == 0 || i > t {
        return Err(Error::Schedule(format!("iteration {i} outside 1..={t}")));
    }
    Ok(final_sparsity * i as f64 / t as f64)
}

/// Fraction of parameters kept per interleave: `(target/source)^(1/N)`.
pub fn keep_ratio(source_params: f64, target_params: f64, interleaves: usize) -> Result<f64> {
    if !(target_params > 0.0 && target_params < source_params) {
        return Err(Error::Schedule(format!(
            "target {target_params} must lie in (0, source {source_params})"
        )));
    }
    if interleaves == 0 {
        return Err(Error::Schedule("need at least one interleave".into()));
    }
    Ok((target_params / source_params).powf(1.0 / interleaves as f64))
}

/// Parameter-count target after each interleave, `round(source·P^i)` for
/// `i = 1..=N`; computed from the source each time so rounding never compounds.
pub fn size_ladder(source_params: usize, target_params: usize, interleaves: usize) -> Result<Vec<usize>> {
    let p = keep_ratio(source_params as f64, target_params as f64, interleaves)?;
    let mut out: Vec<usize> = (1..=interleaves)
        .map(|i| (source_params as f64 * p.powi(i as i32)).round() as usize)
        .collect();
    *out.last_mut().expect("at least one interleave") = target_params;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            max_lr: 2e-5,
            min_lr: 2e-6,
            warmup_frac: 0.05,
            decay_frac: 0.10,
        }
    }
}

/// One global warmup-stable-decay curve over `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub total_steps: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
}

impl LrSchedule {
    pub fn new(total_steps: usize, cfg: &LrConfig) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Schedule("schedule needs at least one step".into()));
        }
        let fracs_ok = cfg.warmup_frac >= 0.0 && cfg.decay_frac >= 0.0 && cfg.warmup_frac + cfg.decay_frac < 1.0;
        if !fracs_ok {
            return config_err(
                "warmup_frac",
                format!("warmup {} + decay {} must be < 1", cfg.warmup_frac, cfg.decay_frac),
            );
        }
        if !(cfg.max_lr >= 0.0 && cfg.min_lr >= 0.0) {
            return config_err("max_lr", "learning rates must be non-negative");
        }
        let warmup_steps = (cfg.warmup_frac * total_steps as f64).round() as usize;
        let decay_steps = (cfg.decay_frac * total_steps as f64).round() as usize;
        if warmup_steps + decay_steps > total_steps {
            return Err(Error::Schedule("warmup and decay overlap after rounding".into()));
        }
        Ok(Self {
            total_steps,
            max_lr: cfg.max_lr,
            min_lr: cfg.min_lr,
            warmup_steps,
            decay_steps,
        })
    }

    /// Learning rate at global step `step` (0-based).
    pub fn at(&self, step: usize) -> f64 {
        let decay_start = self.total_steps - self.decay_steps;
        if step < self.warmup_steps {
            self.max_lr * (step + 1) as f64 / self.warmup_steps as f64
        } else if step >= decay_start {
            let k = (step - decay_start + 1) as f64;
            self.max_lr - (self.max_lr - self.min_lr) * k / self.decay_steps as f64
        } else {
            self.max_lr
        }
    }

    pub fn curve(&self) -> Vec<f64> {
        (0..self.total_steps).map(|s| self.at(s)).collect()
    }

    /// Consecutive slices of the global curve, one per phase length.
    pub fn slices(&self, phase_steps: &[usize]) -> Result<Vec<Vec<f64>>> {
        let total: usize = phase_steps.iter().sum();
        if total != self.total_steps {
            return Err(Error::Schedule(format!(
                "phase lengths sum to {total}, schedule has {} steps",
                self.total_steps
            )));
        }
        let mut out = Vec::with_capacity(phase_steps.len());
        let mut at = 0;
        for &len in phase_steps {
            out.push((at..at + len).map(|s| self.at(s)).collect());
            at += len;
        }
        Ok(out)
    }
}

/// Convenience: build the global curve and cut it at the phase lengths.
pub fn lr_schedule(total_steps: usize, cfg: &LrConfig, phase_steps: &[usize]) -> Result<Vec<Vec<f64>>> {
    LrSchedule::new(total_steps, cfg)?.slices(phase_steps)
}

/// Everything an interleaved prune/train run needs to know up front.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelSchedule {
    pub interleaves: usize,
    pub keep_ratio: f64,
    /// Parameter count to reach after each prune step.
    pub size_targets: Vec<usize>,
    pub tokens: PhaseAllocation,
    pub phase_steps: Vec<usize>,
    pub lr: LrSchedule,
}

impl AccelSchedule {
    pub fn lr_slice(&self, phase: usize) -> Vec<f64> {
        let start: usize = self.phase_steps[..phase].iter().sum();
        (start..start + self.phase_steps[phase]).map(|s| self.lr.at(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn amplitude_zero_is_uniform() {
        let p = assign_sparsity(&[-1.0, 0.3, 0.7], 0.4, 0.0).unwrap();
        assert_eq!(p.per_layer, vec![0.4, 0.4, 0.4]);
    }

    #[test]
    fn worked_example() {
        let p = assign_sparsity(&[-1.0, 0.0, 1.0], 0.4, 0.02).unwrap();
        // 0.4 + 0.02 is one ulp above the literal 0.42 in binary floating point
        for (got, want) in p.per_layer.iter().zip([0.42, 0.40, 0.38]) {
            assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_bad_base() {
        assert!(assign_sparsity(&[0.0, 0.0], 0.0, 0.02).is_err());
        assert!(assign_sparsity(&[0.0, 0.0], 1.0, 0.02).is_err());
        assert!(assign_sparsity(&[0.0, 0.0], 0.5, -1.0).is_err());
    }

    #[test]
    fn clamping_redistributes() {
        // large amplitude pushes layer 0 below zero and layer 2 above the ceiling
        let p = assign_sparsity(&[1.0, 0.0, -1.0], 0.5, 0.8).unwrap();
        assert!((p.mean() - 0.5).abs() < 1e-12);
        assert_eq!(p.per_layer[0], 0.0);
        assert_eq!(p.per_layer[2], MAX_LAYER_SPARSITY);
        assert!((p.per_layer[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn residue_reaches_layers_pinned_at_the_other_bound() {
        // both layers clamp at first; the one pinned at 0 absorbs the residue
        let p = assign_sparsity(&[-1.0, 1.0], 0.9, 1.0).unwrap();
        assert_eq!(p.per_layer[0], MAX_LAYER_SPARSITY);
        assert!((p.per_layer[1] - 0.85).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn mean_preserved_and_order_reversed(
            raw in proptest::collection::vec(-1.0f64..1.0, 2..40),
            base in 0.01f64..0.9,
            amplitude in 0.0f64..0.5,
        ) {
            let mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let centered: Vec<f64> = raw.iter().map(|x| x - mean).collect();
            let m = centered.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            prop_assume!(m > 1e-9);
            let imp: Vec<f64> = centered.iter().map(|x| x / m).collect();
            let p = assign_sparsity(&imp, base, amplitude).unwrap();
            prop_assert!((p.mean() - base).abs() < 1e-9);
            for j in 0..imp.len() {
                for k in 0..imp.len() {
                    if imp[j] < imp[k] {
                        prop_assert!(p.per_layer[j] >= p.per_layer[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn iteration_targets() {
        assert_eq!(iteration_target(0.5, 10, 10).unwrap(), 0.5);
        assert!((iteration_target(0.5, 1, 10).unwrap() - 0.05).abs() < 1e-15);
        let seq: Vec<f64> = (1..=10).map(|i| iteration_target(0.5, i, 10).unwrap()).collect();
        assert!(seq.windows(2).all(|w| w[0] < w[1]));
        assert!(iteration_target(0.5, 0, 10).is_err());
        assert!(iteration_target(0.5, 11, 10).is_err());
    }

    #[test]
    fn keep_ratio_examples() {
        let p = keep_ratio(300.0, 125.0, 20).unwrap();
        assert!((p - 0.9572).abs() < 5e-4, "{p}");
        assert_eq!(keep_ratio(300.0, 125.0, 1).unwrap(), 125.0 / 300.0);
        assert!(keep_ratio(100.0, 100.0, 2).is_err());
        assert!(keep_ratio(100.0, 50.0, 0).is_err());
    }

    #[test]
    fn ladder_ends_at_target_and_decreases() {
        let l = size_ladder(100_000, 40_000, 8).unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(*l.last().unwrap(), 40_000);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn default_lr_config() {
        let c = LrConfig::default();
        assert_eq!((c.max_lr, c.min_lr, c.warmup_frac, c.decay_frac), (2e-5, 2e-6, 0.05, 0.10));
    }

    #[test]
    fn wsd_shape() {
        let s = LrSchedule::new(100, &LrConfig { max_lr: 1.0, min_lr: 0.1, warmup_frac: 0.05, decay_frac: 0.1 }).unwrap();
        let c = s.curve();
        assert!((c[0] - 0.2).abs() < 1e-15);
        assert_eq!(c[4], 1.0);
        assert!(c[5..90].iter().all(|&x| x == 1.0));
        assert!((c[99] - 0.1).abs() < 1e-12);
        assert!(c[90..].windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.slices(&[100]).unwrap(), vec![c.clone()]);
        assert!(s.slices(&[50, 49]).is_err());
        assert!(LrSchedule::new(10, &LrConfig { warmup_frac: 0.6, decay_frac: 0.4, ..LrConfig::default() }).is_err());
    }

    proptest! {
        #[test]
        fn slices_concatenate_to_global_curve(total in 1usize..2000, cuts in proptest::collection::vec(0.0f64..1.0, 0..12)) {
            let s = LrSchedule::new(total, &LrConfig::default()).unwrap();
            let mut points: Vec<usize> = cuts.iter().map(|c| (c * total as f64) as usize).collect();
            points.sort();
            let mut lens = Vec::new();
            let mut prev = 0;
            for p in points.into_iter().chain([total]) {
                lens.push(p - prev);
                prev = p;
            }
            let joined: Vec<f64> = s.slices(&lens).unwrap().concat();
            prop_assert_eq!(joined, s.curve());
        }
    }
}
