//! Coupled weight groups inside decoder layers and their physical removal.
//!
//! An attention head `h` couples columns `[h·d, (h+1)·d)` of Wq, Wk and Wv
//! with the same rows of Wo. An MLP channel `c` couples column `c` of Wup and
//! Wgate with row `c` of Wdown. Removing a group deletes all of its member
//! slices at once, so every matrix product stays well formed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::GroupScore;
use crate::model::{DecoderLayer, Model, ModelConfig};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    AttentionHead,
    MlpChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoupledGroup {
    pub layer: usize,
    pub kind: GroupKind,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeight {
    Wq,
    Wk,
    Wv,
    Wo,
    WUp,
    WGate,
    WDown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Rows,
    Cols,
}

/// A contiguous block of rows or columns of one layer weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSlice {
    pub weight: LayerWeight,
    pub axis: Axis,
    pub start: usize,
    pub end: usize,
}

impl CoupledGroup {
    pub fn members(&self, head_dim: usize) -> Vec<MemberSlice> {
        let slice = |weight, axis, start, end| MemberSlice {
            weight,
            axis,
            start,
            end,
        };
        match self.kind {
            GroupKind::AttentionHead => {
                let (s, e) = (self.index * head_dim, (self.index + 1) * head_dim);
                vec![
                    slice(LayerWeight::Wq, Axis::Cols, s, e),
                    slice(LayerWeight::Wk, Axis::Cols, s, e),
                    slice(LayerWeight::Wv, Axis::Cols, s, e),
                    slice(LayerWeight::Wo, Axis::Rows, s, e),
                ]
            }
            GroupKind::MlpChannel => {
                let (s, e) = (self.index, self.index + 1);
                vec![
                    slice(LayerWeight::WUp, Axis::Cols, s, e),
                    slice(LayerWeight::WGate, Axis::Cols, s, e),
                    slice(LayerWeight::WDown, Axis::Rows, s, e),
                ]
            }
        }
    }
}

/// Parameters held by one group of `kind`.
pub fn group_size(kind: GroupKind, hidden: usize, head_dim: usize) -> usize {
    match kind {
        GroupKind::AttentionHead => 4 * hidden * head_dim,
        GroupKind::MlpChannel => 3 * hidden,
    }
}

pub fn layer_weight<T: Real>(layer: &DecoderLayer<T>, w: LayerWeight) -> &Tensor<T> {
    match w {
        LayerWeight::Wq => &layer.wq,
        LayerWeight::Wk => &layer.wk,
        LayerWeight::Wv => &layer.wv,
        LayerWeight::Wo => &layer.wo,
        LayerWeight::WUp => &layer.w_up,
        LayerWeight::WGate => &layer.w_gate,
        LayerWeight::WDown => &layer.w_down,
    }
}

pub fn layer_weight_mut<T: Real>(layer: &mut DecoderLayer<T>, w: LayerWeight) -> &mut Tensor<T> {
    match w {
        LayerWeight::Wq => &mut layer.wq,
        LayerWeight::Wk => &mut layer.wk,
        LayerWeight::Wv => &mut layer.wv,
        LayerWeight::Wo => &mut layer.wo,
        LayerWeight::WUp => &mut layer.w_up,
        LayerWeight::WGate => &mut layer.w_gate,
        LayerWeight::WDown => &mut layer.w_down,
    }
}

/// Calls `f(index, value)` for every element inside `slice` of `t`.
pub fn for_each_in_slice<T: Real>(t: &Tensor<T>, slice: &MemberSlice, mut f: impl FnMut(usize, T)) {
    let cols = t.cols();
    match slice.axis {
        Axis::Rows => {
            for i in slice.start * cols..slice.end * cols {
                f(i, t.data()[i]);
            }
        }
        Axis::Cols => {
            for r in 0..t.rows() {
                for c in slice.start..slice.end {
                    let i = r * cols + c;
                    f(i, t.data()[i]);
                }
            }
        }
    }
}

/// Every head and channel of every layer, layer-major, heads first.
pub fn enumerate_groups<T: Real>(model: &Model<T>) -> Vec<CoupledGroup> {
    let c = &model.config;
    let mut out = Vec::new();
    for layer in 0..c.n_layers() {
        out.extend((0..c.head_count[layer]).map(|index| CoupledGroup {
            layer,
            kind: GroupKind::AttentionHead,
            index,
        }));
        out.extend((0..c.mlp_channels[layer]).map(|index| CoupledGroup {
            layer,
            kind: GroupKind::MlpChannel,
            index,
        }));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPrune {
    pub layer: usize,
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
}

/// Groups to remove, indexed against the model the plan was built for.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPrune>,
}

impl PrunePlan {
    pub fn from_groups(groups: impl IntoIterator<Item = CoupledGroup>) -> Self {
        let mut by_layer: BTreeMap<usize, LayerPrune> = BTreeMap::new();
        for g in groups {
            let entry = by_layer.entry(g.layer).or_insert_with(|| LayerPrune {
                layer: g.layer,
                ..LayerPrune::default()
            });
            match g.kind {
                GroupKind::AttentionHead => entry.heads.push(g.index),
                GroupKind::MlpChannel => entry.channels.push(g.index),
            }
        }
        let layers = by_layer
            .into_values()
            .map(|mut l| {
                l.heads.sort_unstable();
                l.heads.dedup();
                l.channels.sort_unstable();
                l.channels.dedup();
                l
            })
            .filter(|l| !l.heads.is_empty() || !l.channels.is_empty())
            .collect();
        Self { layers }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.heads.is_empty() && l.channels.is_empty())
    }

    pub fn groups(&self) -> Vec<CoupledGroup> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.heads.iter().map(|&index| CoupledGroup {
                layer: l.layer,
                kind: GroupKind::AttentionHead,
                index,
            }));
            out.extend(l.channels.iter().map(|&index| CoupledGroup {
                layer: l.layer,
                kind: GroupKind::MlpChannel,
                index,
            }));
        }
        out
    }

    pub fn removed_params(&self, config: &ModelConfig) -> usize {
        self.groups()
            .iter()
            .map(|g| group_size(g.kind, config.hidden, config.head_dim))
            .sum()
    }

    /// Rejects out-of-range layers or groups, duplicates, and removals that
    /// would leave a layer without a head or a channel.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let mut seen_layers = std::collections::BTreeSet::new();
        for l in &self.layers {
            if l.layer >= config.n_layers() {
                return Err(Error::Plan(format!("layer {} does not exist", l.layer)));
            }
            if !seen_layers.insert(l.layer) {
                return Err(Error::Plan(format!("layer {} listed twice", l.layer)));
            }
            for (what, list, count) in [
                ("head", &l.heads, config.head_count[l.layer]),
                ("channel", &l.channels, config.mlp_channels[l.layer]),
            ] {
                let mut sorted = list.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != list.len() {
                    return Err(Error::Plan(format!("duplicate {what} in layer {}", l.layer)));
                }
                if let Some(&bad) = list.iter().find(|&&i| i >= count) {
                    return Err(Error::Plan(format!("{what} {bad} of layer {} does not exist ({count} present)", l.layer)));
                }
                if list.len() >= count {
                    return Err(Error::Plan(format!(
                        "removing {} of {count} {what}s would empty layer {}",
                        list.len(),
                        l.layer
                    )));
                }
            }
        }
        Ok(())
    }
}

fn keep_list(count: usize, removed: &[usize]) -> Vec<usize> {
    (0..count).filter(|i| !removed.contains(i)).collect()
}

/// Physically removes the plan's groups, returning a smaller model.
pub fn apply_prune<T: Real>(model: &Model<T>, plan: &PrunePlan) -> Result<Model<T>> {
    let mut out = model.clone();
    prune_in_place(&mut out, plan)?;
    Ok(out)
}

/// In-place variant of [`apply_prune`]. Gradient accumulators are sliced
/// along with the weights. Nothing is modified if the plan is rejected.
pub fn prune_in_place<T: Real>(model: &mut Model<T>, plan: &PrunePlan) -> Result<()> {
    plan.validate(&model.config)?;
    let hd = model.config.head_dim;
    for lp in &plan.layers {
        let i = lp.layer;
        let layer = &mut model.layers[i];
        if !lp.heads.is_empty() {
            let heads = keep_list(model.config.head_count[i], &lp.heads);
            let cols: Vec<usize> = heads.iter().flat_map(|&h| h * hd..(h + 1) * hd).collect();
            layer.wq = layer.wq.select_cols(&cols)?;
            layer.wk = layer.wk.select_cols(&cols)?;
            layer.wv = layer.wv.select_cols(&cols)?;
            layer.wo = layer.wo.select_rows(&cols)?;
            model.config.head_count[i] = heads.len();
        }
        if !lp.channels.is_empty() {
            let keep = keep_list(model.config.mlp_channels[i], &lp.channels);
            layer.w_up = layer.w_up.select_cols(&keep)?;
            layer.w_gate = layer.w_gate.select_cols(&keep)?;
            layer.w_down = layer.w_down.select_rows(&keep)?;
            model.config.mlp_channels[i] = keep.len();
        }
    }
    model.validate()
}

/// Number of groups of each kind to remove from one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalTarget {
    pub heads: usize,
    pub channels: usize,
}

/// Within each layer and kind, picks the `target` lowest-scoring groups;
/// ties go to the lower index.
pub fn select_groups(scores: &[GroupScore], targets: &[RemovalTarget]) -> Result<PrunePlan> {
    let mut buckets: BTreeMap<(usize, GroupKind), Vec<&GroupScore>> = BTreeMap::new();
    for s in scores {
        buckets.entry((s.layer, s.kind)).or_default().push(s);
    }
    let mut chosen = Vec::new();
    for (layer, t) in targets.iter().enumerate() {
        for (kind, want) in [(GroupKind::AttentionHead, t.heads), (GroupKind::MlpChannel, t.channels)] {
            if want == 0 {
                continue;
            }
            let bucket = buckets.get_mut(&(layer, kind)).map(|b| b.as_mut_slice()).unwrap_or_default();
            if want + 1 > bucket.len() {
                return Err(Error::Plan(format!(
                    "cannot remove {want} {kind:?} groups from layer {layer} with {} available (one must stay)",
                    bucket.len()
                )));
            }
            bucket.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.index.cmp(&b.index)));
            chosen.extend(bucket[..want].iter().map(|s| CoupledGroup {
                layer,
                kind,
                index: s.index,
            }));
        }
    }
    Ok(PrunePlan::from_groups(chosen))
}

/// Head and channel counts per layer, used as the reference widths that
/// cumulative sparsities are measured against.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWidths {
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
}

impl LayerWidths {
    pub fn of(config: &ModelConfig) -> Self {
        Self {
            heads: config.head_count.clone(),
            channels: config.mlp_channels.clone(),
        }
    }

    /// Prunable (head + channel) parameters of layer `i`.
    pub fn prunable(&self, i: usize, hidden: usize, head_dim: usize) -> usize {
        self.heads[i] * group_size(GroupKind::AttentionHead, hidden, head_dim)
            + self.channels[i] * group_size(GroupKind::MlpChannel, hidden, head_dim)
    }

    pub fn total_prunable(&self, hidden: usize, head_dim: usize) -> usize {
        (0..self.heads.len()).map(|i| self.prunable(i, hidden, head_dim)).sum()
    }
}

/// Nearest integer, halves rounded down.
fn round_half_down(x: f64) -> usize {
    let r = (x - 0.5).ceil();
    r.max(0.0) as usize
}

/// Converts per-layer cumulative sparsities (relative to `reference`) into
/// removal counts for the current model.
///
/// Each kind of a layer keeps `reference − round(S_i · reference)` groups
/// (halves round down, at least one kept). A greedy pass then adds or
/// returns single groups, preferring MLP channels, in the layers furthest
/// from their own target, until the total prunable size is as close to
/// `global_remaining` as whole groups allow.
///
/// Heads due under the proportional rule are only handed back when `exact`
/// is set (the last step of a run): then a head removed in this step may be
/// traded for channels when channels alone cannot close the gap. Otherwise
/// a step may overshoot by up to half a head per layer, and the channel
/// schedule absorbs the difference in later steps. Handing heads back on
/// every step would let channels take the whole budget instead.
pub fn removal_targets(
    config: &ModelConfig,
    reference: &LayerWidths,
    layer_sparsity: &[f64],
    global_remaining: usize,
    exact: bool,
) -> Result<Vec<RemovalTarget>> {
    let n = config.n_layers();
    if reference.heads.len() != n || reference.channels.len() != n || layer_sparsity.len() != n {
        return Err(Error::Plan("reference widths or sparsities do not match layer count".into()));
    }
    let (h, hd) = (config.hidden, config.head_dim);
    let head_cost = group_size(GroupKind::AttentionHead, h, hd) as i64;
    let chan_cost = group_size(GroupKind::MlpChannel, h, hd) as i64;
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let s = layer_sparsity[i];
        let keep = |reference: usize, current: usize| -> usize {
            let removed_total = round_half_down(s * reference as f64).min(reference - 1);
            let keep = reference - removed_total;
            current.saturating_sub(keep).min(current - 1)
        };
        targets.push(RemovalTarget {
            heads: keep(reference.heads[i], config.head_count[i]),
            channels: keep(reference.channels[i], config.mlp_channels[i]),
        });
    }

    let remaining_of = |i: usize, t: &RemovalTarget| -> i64 {
        (config.head_count[i] - t.heads) as i64 * head_cost + (config.mlp_channels[i] - t.channels) as i64 * chan_cost
    };
    let layer_goal: Vec<f64> = (0..n)
        .map(|i| (1.0 - layer_sparsity[i]) * reference.prunable(i, h, hd) as f64)
        .collect();
    let excess = |i: usize, t: &RemovalTarget| remaining_of(i, t) as f64 - layer_goal[i];
    let global = global_remaining as i64;
    loop {
        let diff: i64 = (0..n).map(|i| remaining_of(i, &targets[i])).sum::<i64>() - global;
        // channel moves strictly reduce |diff|; a head is returned only when
        // spare channels can bring |diff| back within half a channel
        if 2 * diff > chan_cost {
            let pick = |can: &dyn Fn(usize) -> bool| {
                (0..n).filter(|&i| can(i)).max_by(|&a, &b| {
                    excess(a, &targets[a]).total_cmp(&excess(b, &targets[b])).then(b.cmp(&a))
                })
            };
            if let Some(i) = pick(&|i| config.mlp_channels[i] - targets[i].channels > 1) {
                targets[i].channels += 1;
            } else if 2 * diff > head_cost {
                match pick(&|i| config.head_count[i] - targets[i].heads > 1) {
                    Some(i) => targets[i].heads += 1,
                    None => break,
                }
            } else {
                break;
            }
        } else if -2 * diff > chan_cost {
            let pick = |can: &dyn Fn(usize) -> bool| {
                (0..n).filter(|&i| can(i)).min_by(|&a, &b| {
                    excess(a, &targets[a]).total_cmp(&excess(b, &targets[b])).then(a.cmp(&b))
                })
            };
            // channel capacity left to absorb a returned head
            let spare: i64 = (0..n)
                .map(|i| (config.mlp_channels[i] - targets[i].channels - 1) as i64)
                .sum::<i64>()
                * chan_cost;
            if let Some(i) = pick(&|i| targets[i].channels > 0) {
                targets[i].channels -= 1;
            } else if exact && (-2 * diff > head_cost || 2 * (head_cost + diff - spare) <= chan_cost) {
                match pick(&|i| targets[i].heads > 0) {
                    Some(i) => targets[i].heads -= 1,
                    None => break,
                }
            } else {
                break;
            }
        } else {
            break;
        }
    }
    Ok(targets)
}
