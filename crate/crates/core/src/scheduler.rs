//! Incremental per-group regularization.
//!
//! Every group `g` of a conv layer carries its own decay factor `λ_g`,
//! starting at zero. Each update the groups are ranked by L1 norm
//! (ascending), the ranks are averaged over all observations so far, and
//! `λ_g ← max(λ_g + Δλ(r̄_g), 0)` where `Δλ` is a decreasing piecewise-linear
//! function: `+A` for the least important group, zero at rank `R·G`, `-A` for
//! the most important one. Groups whose mean |w| falls under the threshold
//! are removed for good; once a layer has removed `round(R·G)` groups its
//! factors freeze.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::groups::{
    apply_mask, group_l1_norms, mean_abs, partition, rank_ascending, GroupMask, GroupPartition, GroupType,
};
use crate::nn::{GroupTerms, LayerParams, NetworkSpec, Params};
use crate::real::Real;

pub const DEFAULT_THRESHOLD: f64 = 1e-6;

/// Penalty increment for a group with (averaged) ascending rank `r`.
///
/// `ratio` is the layer's pruning ratio `R`, `groups` its group count `G`
/// and `cap` the maximum increment `A`:
///
/// ```text
/// r ≤ RG:  Δλ = A − (A / RG)·r
/// r > RG:  Δλ = −A·(r − RG) / (G(1 − R) − 1)      (−A if the denominator ≤ 0)
/// ```
///
/// The result is clamped to `[−A, A]`.
pub fn delta_lambda(r: f64, ratio: f64, groups: usize, cap: f64) -> Result<f64> {
    if groups < 2 {
        return Err(Error::Domain(format!("need at least 2 groups, got {groups}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("pruning ratio {ratio} outside (0, 1)")));
    }
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(Error::Domain(format!("penalty cap {cap} must be positive")));
    }
    let g = groups as f64;
    if !(0.0..=g - 1.0).contains(&r) {
        return Err(Error::Domain(format!("rank {r} outside [0, {}]", g - 1.0)));
    }
    let threshold_rank = ratio * g;
    let delta = if r <= threshold_rank {
        cap * (1.0 - r / threshold_rank)
    } else {
        // G(1−R) − 1, written so that r = G − 1 gives a ratio of exactly 1.
        let denom = (g - 1.0) - threshold_rank;
        if denom <= 0.0 {
            -cap
        } else {
            -cap * ((r - threshold_rank) / denom)
        }
    };
    Ok(delta.clamp(-cap, cap))
}

/// Scheduler state of one weight group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupState {
    pub lambda: f64,
    pub rank_sum: u64,
    pub n_iters: u64,
    pub pruned: bool,
    pub pruned_at: Option<u64>,
}

impl GroupState {
    /// Mean of all observed ranks, `None` before the first observation.
    pub fn averaged_rank(&self) -> Option<f64> {
        (self.n_iters > 0).then(|| self.rank_sum as f64 / self.n_iters as f64)
    }
}

/// `λ ← max(λ + Δ, 0)`, skipped for pruned groups and frozen layers.
pub fn update_lambda(state: GroupState, delta: f64, phase: Phase) -> GroupState {
    if state.pruned || phase == Phase::Reached {
        return state;
    }
    GroupState { lambda: (state.lambda + delta).max(0.0), ..state }
}

/// Adds one ranking observation to every group, pruned ones included.
pub fn observe_ranking(states: &mut [GroupState], ranks: &[usize]) -> Result<()> {
    if ranks.len() != states.len() {
        return Err(Error::Contract(format!("{} ranks for {} groups", ranks.len(), states.len())));
    }
    let mut seen = vec![false; ranks.len()];
    for &r in ranks {
        if r >= ranks.len() || std::mem::replace(&mut seen[r], true) {
            return Err(Error::Contract(format!("ranks are not a permutation of 0..{}", ranks.len())));
        }
    }
    for (s, &r) in states.iter_mut().zip(ranks) {
        s.rank_sum += r as u64;
        s.n_iters += 1;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Active,
    Reached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GroupPruned,
    LayerReached,
    AllReached,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerEvent {
    pub iteration: u64,
    pub layer: Option<usize>,
    pub kind: EventKind,
    pub group: Option<usize>,
    /// First 16 hex digits of SHA-256 over the little-endian λ snapshot.
    pub lambda_hash: String,
}

pub fn lambda_hash(lambdas: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for l in lambdas {
        hasher.update(l.to_le_bytes());
    }
    hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-layer knobs of the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSettings {
    /// Pruning ratio `R`.
    pub ratio: f64,
    /// Maximum per-update increment `A`.
    pub penalty_cap: f64,
    /// Mean |w| below which a group is removed.
    pub threshold: f64,
    /// Rank/λ updates happen on iterations divisible by this.
    pub update_interval: u64,
}

/// Round-half-up target count.
pub fn target_count(ratio: f64, groups: usize) -> usize {
    (ratio * groups as f64 + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneState {
    settings: LayerSettings,
    partition: GroupPartition,
    groups: Vec<GroupState>,
    lambdas: Vec<f64>,
    mask: GroupMask,
    target: usize,
    phase: Phase,
}

impl LayerPruneState {
    pub fn new(partition: GroupPartition, settings: LayerSettings) -> Result<Self> {
        let layer = partition.layer_id();
        let key = |k: &str| format!("layer {layer}.{k}");
        if !(settings.ratio > 0.0 && settings.ratio < 1.0) {
            return Err(Error::config(key("ratio"), format!("{} outside (0, 1)", settings.ratio)));
        }
        if !(settings.penalty_cap > 0.0 && settings.penalty_cap.is_finite()) {
            return Err(Error::config(key("penalty_cap"), "must be positive"));
        }
        if !(settings.threshold >= 0.0) {
            return Err(Error::config(key("threshold"), "must be nonnegative"));
        }
        if settings.update_interval == 0 {
            return Err(Error::config(key("update_interval"), "must be at least 1"));
        }
        let g = partition.len();
        if g < 2 {
            return Err(Error::config(key("groups"), format!("{g} groups; at least 2 are needed")));
        }
        let target = target_count(settings.ratio, g);
        Ok(Self {
            settings,
            partition,
            groups: vec![GroupState::default(); g],
            lambdas: vec![0.0; g],
            mask: GroupMask::new(g),
            target,
            phase: if target == 0 { Phase::Reached } else { Phase::Active },
        })
    }

    pub fn layer_id(&self) -> usize {
        self.partition.layer_id()
    }

    pub fn settings(&self) -> &LayerSettings {
        &self.settings
    }

    pub fn partition(&self) -> &GroupPartition {
        &self.partition
    }

    pub fn groups(&self) -> &[GroupState] {
        &self.groups
    }

    pub fn mask(&self) -> &GroupMask {
        &self.mask
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn target_count(&self) -> usize {
        self.target
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.pruned_count()
    }

    pub fn sparsity(&self) -> f64 {
        crate::groups::layer_sparsity(&self.mask)
    }

    pub fn terms(&self) -> GroupTerms<'_> {
        GroupTerms { partition: &self.partition, lambdas: &self.lambdas, mask: Some(&self.mask) }
    }

    fn event(&self, iteration: u64, kind: EventKind, group: Option<usize>) -> SchedulerEvent {
        SchedulerEvent {
            iteration,
            layer: Some(self.layer_id()),
            kind,
            group,
            lambda_hash: lambda_hash(&self.lambdas),
        }
    }

    fn sync_lambdas(&mut self) {
        for (l, g) in self.lambdas.iter_mut().zip(&self.groups) {
            *l = g.lambda;
        }
    }

    /// Removes groups under the threshold, then checks the stop condition.
    fn prune_and_check<T: Real>(
        &mut self,
        norms: &[f64],
        params: &mut LayerParams<T>,
        iteration: u64,
        events: &mut Vec<SchedulerEvent>,
    ) -> Result<()> {
        let mut newly = Vec::new();
        for (g, state) in self.groups.iter_mut().enumerate() {
            if !state.pruned && mean_abs(norms[g], self.partition.group_size(g)) < self.settings.threshold {
                state.pruned = true;
                state.pruned_at = Some(iteration);
                self.mask.prune(g);
                newly.push(g);
            }
        }
        if !newly.is_empty() {
            self.zero_pruned(params)?;
            for g in newly {
                events.push(self.event(iteration, EventKind::GroupPruned, Some(g)));
            }
        }
        if self.phase == Phase::Active && self.pruned_count() >= self.target {
            self.phase = Phase::Reached;
            events.push(self.event(iteration, EventKind::LayerReached, None));
        }
        Ok(())
    }

    fn zero_pruned<T: Real>(&self, params: &mut LayerParams<T>) -> Result<()> {
        apply_mask(&mut params.weight, &self.partition, &self.mask)?;
        if self.partition.group_type() == GroupType::Row {
            for f in (0..self.mask.len()).filter(|&f| self.mask.is_pruned(f)) {
                params.bias[f] = T::zero();
            }
        }
        Ok(())
    }

    fn norms<T: Real>(&self, params: &LayerParams<T>) -> Result<Vec<f64>> {
        group_l1_norms(&params.weight, &self.partition)
    }
}

/// One IncReg update of a layer: norms → ranks → averaged-rank observation →
/// `Δλ` → `λ` update → threshold removal → stop check.
///
/// Returns the λ vector (group order) to use for this iteration's SGD step.
pub fn scheduler_tick<T: Real>(
    layer: &mut LayerPruneState,
    params: &mut LayerParams<T>,
    iteration: u64,
) -> Result<(Vec<f64>, Vec<SchedulerEvent>)> {
    let mut events = Vec::new();
    if layer.phase == Phase::Reached {
        return Ok((layer.lambdas.clone(), events));
    }
    let norms = layer.norms(params)?;
    if iteration % layer.settings.update_interval == 0 {
        let ranks = rank_ascending(&norms);
        observe_ranking(&mut layer.groups, &ranks)?;
        let LayerSettings { ratio, penalty_cap, .. } = layer.settings;
        let g = layer.groups.len();
        for state in layer.groups.iter_mut() {
            let r = state.averaged_rank().expect("observed above");
            let delta = delta_lambda(r, ratio, g, penalty_cap)?;
            *state = update_lambda(*state, delta, layer.phase);
        }
        layer.sync_lambdas();
    }
    layer.prune_and_check(&norms, params, iteration, &mut events)?;
    Ok((layer.lambdas.clone(), events))
}

/// Constant-factor baseline: every unpruned group gets `λ_const`, with the
/// same removal threshold and stop condition as [`scheduler_tick`].
pub fn constant_baseline_tick<T: Real>(
    layer: &mut LayerPruneState,
    params: &mut LayerParams<T>,
    lambda_const: f64,
    iteration: u64,
) -> Result<(Vec<f64>, Vec<SchedulerEvent>)> {
    if !(lambda_const >= 0.0) {
        return Err(Error::Domain(format!("constant lambda {lambda_const} must be nonnegative")));
    }
    let mut events = Vec::new();
    if layer.phase == Phase::Reached {
        return Ok((layer.lambdas.clone(), events));
    }
    let norms = layer.norms(params)?;
    for state in layer.groups.iter_mut().filter(|s| !s.pruned) {
        state.lambda = lambda_const;
    }
    layer.sync_lambdas();
    layer.prune_and_check(&norms, params, iteration, &mut events)?;
    Ok((layer.lambdas.clone(), events))
}

/// One-shot magnitude pruning: removes the `round(R·G)` smallest-norm groups at once.
pub fn oneshot_magnitude_tick<T: Real>(
    layer: &mut LayerPruneState,
    params: &mut LayerParams<T>,
    iteration: u64,
) -> Result<Vec<SchedulerEvent>> {
    let mut events = Vec::new();
    if layer.phase == Phase::Reached {
        return Ok(events);
    }
    let norms = layer.norms(params)?;
    let ranks = rank_ascending(&norms);
    let mut chosen: Vec<usize> = (0..ranks.len()).filter(|&g| ranks[g] < layer.target).collect();
    chosen.sort_by_key(|&g| ranks[g]);
    for &g in &chosen {
        layer.groups[g].pruned = true;
        layer.groups[g].pruned_at = Some(iteration);
        layer.mask.prune(g);
    }
    layer.zero_pruned(params)?;
    for g in chosen {
        events.push(layer.event(iteration, EventKind::GroupPruned, Some(g)));
    }
    layer.phase = Phase::Reached;
    events.push(layer.event(iteration, EventKind::LayerReached, None));
    Ok(events)
}

/// Drops every λ to zero and returns the frozen masks for retraining.
/// Fails unless every layer has reached its target.
pub fn finalize_for_retraining(layers: &mut [LayerPruneState]) -> Result<Vec<GroupMask>> {
    if let Some(l) = layers.iter().find(|l| l.phase != Phase::Reached) {
        return Err(Error::State(format!(
            "layer {} has pruned {} of {} groups; pruning is not over",
            l.layer_id(),
            l.pruned_count(),
            l.target
        )));
    }
    Ok(release(layers))
}

fn release(layers: &mut [LayerPruneState]) -> Vec<GroupMask> {
    layers
        .iter_mut()
        .map(|l| {
            l.groups.iter_mut().for_each(|g| g.lambda = 0.0);
            l.sync_lambdas();
            l.mask.clone()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchedulerKind {
    Increg,
    Constant { lambda: f64 },
    OneshotMagnitude,
}

impl SchedulerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerKind::Increg => "increg",
            SchedulerKind::Constant { .. } => "constant",
            SchedulerKind::OneshotMagnitude => "oneshot-magnitude",
        }
    }
}

/// All conv layers of a network, ticked in layer order each iteration.
#[derive(Debug, Clone)]
pub struct Scheduler {
    kind: SchedulerKind,
    num_layers: usize,
    layers: Vec<LayerPruneState>,
    all_reached_at: Option<u64>,
}

impl Scheduler {
    /// Builds one [`LayerPruneState`] per conv layer using the network's prune ratios.
    pub fn new<T: Real>(
        kind: SchedulerKind,
        spec: &NetworkSpec,
        params: &Params<T>,
        group_type: GroupType,
        penalty_cap: f64,
        threshold: f64,
        update_interval: u64,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (&li, &ratio) in spec.conv_layers().iter().zip(&spec.prune_ratios) {
            let p = params.layer(li).ok_or_else(|| Error::shape(format!("layer {li}"), "missing parameters"))?;
            let settings = LayerSettings { ratio, penalty_cap, threshold, update_interval };
            layers.push(LayerPruneState::new(partition(li, &p.weight, group_type), settings)?);
        }
        Ok(Self { kind, num_layers: spec.layers.len(), layers, all_reached_at: None })
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    pub fn layers(&self) -> &[LayerPruneState] {
        &self.layers
    }

    pub fn all_reached(&self) -> bool {
        self.layers.iter().all(|l| l.phase == Phase::Reached)
    }

    /// Ticks every layer in order and appends an `AllReached` event the first
    /// time every layer has stopped.
    pub fn tick<T: Real>(&mut self, params: &mut Params<T>, iteration: u64) -> Result<Vec<SchedulerEvent>> {
        let mut events = Vec::new();
        for layer in self.layers.iter_mut() {
            let li = layer.layer_id();
            let p = params.layer_mut(li).ok_or_else(|| Error::shape(format!("layer {li}"), "missing parameters"))?;
            match self.kind {
                SchedulerKind::Increg => events.extend(scheduler_tick(layer, p, iteration)?.1),
                SchedulerKind::Constant { lambda } => {
                    events.extend(constant_baseline_tick(layer, p, lambda, iteration)?.1)
                }
                SchedulerKind::OneshotMagnitude => events.extend(oneshot_magnitude_tick(layer, p, iteration)?),
            }
        }
        if self.all_reached_at.is_none() && self.all_reached() {
            self.all_reached_at = Some(iteration);
            let all: Vec<f64> = self.layers.iter().flat_map(|l| l.lambdas.iter().copied()).collect();
            events.push(SchedulerEvent {
                iteration,
                layer: None,
                kind: EventKind::AllReached,
                group: None,
                lambda_hash: lambda_hash(&all),
            });
        }
        Ok(events)
    }

    /// Group terms aligned with the network layers, for [`crate::nn::sgd_step`].
    pub fn terms(&self) -> Vec<Option<GroupTerms<'_>>> {
        let mut out = vec![None; self.num_layers];
        for l in &self.layers {
            out[l.layer_id()] = Some(l.terms());
        }
        out
    }

    pub fn finalize(&mut self) -> Result<Vec<GroupMask>> {
        finalize_for_retraining(&mut self.layers)
    }

    /// For runs that hit the iteration cap: drops λ and hands back whatever
    /// masks exist, without requiring every layer to have stopped.
    pub fn release_incomplete(&mut self) -> Vec<GroupMask> {
        release(&mut self.layers)
    }

    /// `Σ_g (λ_g/2)·Σ_{w∈g} w²` over all layers.
    pub fn group_penalty<T: Real>(&self, params: &Params<T>) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                let w = params.layer(l.layer_id()).map(|p| p.weight.data()).unwrap_or(&[]);
                (0..l.partition.len())
                    .map(|g| {
                        let sq: f64 = l.partition.group(g).iter().map(|&i| w[i].as_f64().powi(2)).sum();
                        0.5 * l.lambdas[g] * sq
                    })
                    .sum::<f64>()
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::partition_dims;
    use crate::tensor::Tensor4D;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: f64 = 0.001;

    #[test]
    fn delta_lambda_examples() {
        assert_eq!(delta_lambda(0.0, 0.5, 10, A).unwrap(), A);
        assert_eq!(delta_lambda(5.0, 0.5, 10, A).unwrap(), 0.0);
        assert_eq!(delta_lambda(9.0, 0.5, 10, A).unwrap(), -A);
        assert!((delta_lambda(2.5, 0.5, 10, A).unwrap() - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn delta_lambda_rejects_bad_domain() {
        assert!(delta_lambda(0.0, 0.0, 10, A).is_err());
        assert!(delta_lambda(0.0, 0.5, 1, A).is_err());
        assert!(delta_lambda(0.0, 0.5, 10, 0.0).is_err());
        assert!(delta_lambda(9.5, 0.5, 10, A).is_err());
        assert!(delta_lambda(-0.1, 0.5, 10, A).is_err());
    }

    #[test]
    fn degenerate_reward_denominator_maps_to_minus_cap() {
        // G(1−R) − 1 = 4·0.8 − 1 > 0, but G(1−R) − 1 = 2·0.5 − 1 = 0 for G=2.
        assert_eq!(delta_lambda(1.0, 0.5, 2, A).unwrap(), 0.0);
        // R·G = 1.8, G−1 = 2, denominator 3·0.4 − 1 = 0.2 > 0.
        assert_eq!(delta_lambda(2.0, 0.6, 3, A).unwrap(), -A);
        // R·G = 2.7 > G − 1: the reward branch is never entered, r=2 is on the penalty side.
        assert!(delta_lambda(2.0, 0.9, 3, A).unwrap() > 0.0);
    }

    #[test]
    fn update_lambda_examples() {
        let s = |l| GroupState { lambda: l, ..Default::default() };
        assert_eq!(update_lambda(s(0.0), -0.0005, Phase::Active).lambda, 0.0);
        assert!((update_lambda(s(0.002), 0.001, Phase::Active).lambda - 0.003).abs() < 1e-18);
        assert_eq!(update_lambda(s(0.0003), -0.001, Phase::Active).lambda, 0.0);
        assert_eq!(update_lambda(s(0.002), 0.001, Phase::Reached).lambda, 0.002);
        let pruned = GroupState { lambda: 0.5, pruned: true, ..Default::default() };
        assert_eq!(update_lambda(pruned, 0.1, Phase::Active).lambda, 0.5);
    }

    #[test]
    fn observe_ranking_averages() {
        let mut st = vec![GroupState::default(); 5];
        observe_ranking(&mut st, &[2, 0, 1, 4, 3]).unwrap();
        observe_ranking(&mut st, &[4, 0, 1, 2, 3]).unwrap();
        assert_eq!(st[0].averaged_rank(), Some(3.0));
        let mut one = vec![GroupState::default(); 8];
        observe_ranking(&mut one, &[7, 0, 1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(one[0].averaged_rank(), Some(7.0));
        assert!(matches!(observe_ranking(&mut one, &[0, 0, 1, 2, 3, 4, 5, 6]), Err(Error::Contract(_))));
        assert!(matches!(observe_ranking(&mut one, &[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn observe_ranking_matches_history_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = 9;
        let mut states = vec![GroupState::default(); g];
        let mut history: Vec<Vec<usize>> = Vec::new();
        for _ in 0..100 {
            let mut perm: Vec<usize> = (0..g).collect();
            perm.shuffle(&mut rng);
            observe_ranking(&mut states, &perm).unwrap();
            history.push(perm);
        }
        for (gi, s) in states.iter().enumerate() {
            let replay = history.iter().map(|p| p[gi] as f64).sum::<f64>() / history.len() as f64;
            assert_eq!(s.averaged_rank().unwrap(), replay);
        }
    }

    /// A 4-filter layer whose row magnitudes are set by hand.
    fn hand_layer(means: [f64; 4]) -> LayerParams<f64> {
        let mut w = Tensor4D::zeros([4, 1, 2, 1]);
        for (f, m) in means.iter().enumerate() {
            w.data_mut()[2 * f] = *m;
            w.data_mut()[2 * f + 1] = -*m;
        }
        LayerParams { weight: w, bias: vec![0.0; 4] }
    }

    fn settings(ratio: f64, cap: f64) -> LayerSettings {
        LayerSettings { ratio, penalty_cap: cap, threshold: DEFAULT_THRESHOLD, update_interval: 1 }
    }

    #[test]
    fn three_tick_trajectory_matches_hand_computation() {
        let mut layer =
            LayerPruneState::new(partition_dims(0, [4, 1, 2, 1], GroupType::Row), settings(0.5, 0.01)).unwrap();
        // Ranks per tick: [3,0,2,1], [0,3,2,1], [0,3,1,2].
        let ticks = [[0.4, 0.1, 0.3, 0.2], [0.1, 0.4, 0.3, 0.2], [0.1, 0.4, 0.2, 0.3]];
        let expected = [
            [0.0, 0.01, 0.0, 0.005],
            [0.0025, 0.0125, 0.0, 0.01],
            [0.0075, 0.0125, 0.01 / 6.0, 0.04 / 3.0],
        ];
        for (it, (means, want)) in ticks.iter().zip(expected).enumerate() {
            let mut p = hand_layer(*means);
            let (lambdas, events) = scheduler_tick(&mut layer, &mut p, it as u64).unwrap();
            assert!(events.is_empty());
            for (got, want) in lambdas.iter().zip(want) {
                assert!((got - want).abs() < 1e-15, "tick {it}: {lambdas:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn reached_layer_is_frozen() {
        let mut layer =
            LayerPruneState::new(partition_dims(0, [4, 1, 2, 1], GroupType::Row), settings(0.5, 0.01)).unwrap();
        let mut p = hand_layer([0.4, 0.1, 0.3, 0.2]);
        scheduler_tick(&mut layer, &mut p, 0).unwrap();
        let mut p = hand_layer([0.4, 1e-7, 0.3, 1e-8]);
        let (_, events) = scheduler_tick(&mut layer, &mut p, 1).unwrap();
        let kinds: Vec<_> = events.iter().map(|e| (e.kind, e.group)).collect();
        assert_eq!(
            kinds,
            vec![(EventKind::GroupPruned, Some(1)), (EventKind::GroupPruned, Some(3)), (EventKind::LayerReached, None)]
        );
        assert_eq!(layer.phase(), Phase::Reached);
        let before = layer.lambdas().to_vec();
        let mut p = hand_layer([1e-9, 0.0, 0.3, 0.0]);
        let (lambdas, events) = scheduler_tick(&mut layer, &mut p, 2).unwrap();
        assert!(events.is_empty());
        assert_eq!(lambdas, before);
        assert_eq!(layer.pruned_count(), 2);
    }

    #[test]
    fn threshold_crossing_prunes_and_zeroes_weights() {
        let mut layer =
            LayerPruneState::new(partition_dims(0, [4, 1, 2, 1], GroupType::Row), settings(0.75, 0.01)).unwrap();
        let mut p = hand_layer([0.4, 1e-7, 0.3, 0.2]);
        p.bias = vec![0.1; 4];
        let (_, events) = scheduler_tick(&mut layer, &mut p, 0).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!((events[0].kind, events[0].group, events[0].iteration), (EventKind::GroupPruned, Some(1), 0));
        assert_eq!(&p.weight.data()[2..4], &[0.0, 0.0]);
        assert_eq!(p.bias, vec![0.1, 0.0, 0.1, 0.1]);
        assert_eq!(layer.groups()[1].pruned_at, Some(0));
        assert_eq!(layer.phase(), Phase::Active);
    }

    #[test]
    fn constant_baseline_is_uniform() {
        let mut layer =
            LayerPruneState::new(partition_dims(0, [4, 1, 2, 1], GroupType::Row), settings(0.5, 0.01)).unwrap();
        let mut p = hand_layer([0.4, 0.1, 0.3, 0.2]);
        let (l, _) = constant_baseline_tick(&mut layer, &mut p, 0.01, 0).unwrap();
        assert_eq!(l, vec![0.01; 4]);
        let (l, _) = constant_baseline_tick(&mut layer, &mut p, 0.0, 1).unwrap();
        assert_eq!(l, vec![0.0; 4]);
        assert!(constant_baseline_tick(&mut layer, &mut p, -1.0, 2).is_err());
    }

    #[test]
    fn oneshot_prunes_smallest_groups() {
        let mut layer =
            LayerPruneState::new(partition_dims(0, [4, 1, 2, 1], GroupType::Row), settings(0.5, 0.01)).unwrap();
        let mut p = hand_layer([0.4, 0.1, 0.3, 0.2]);
        let events = oneshot_magnitude_tick(&mut layer, &mut p, 0).unwrap();
        assert_eq!(layer.mask().flags(), &[false, true, false, true]);
        assert_eq!(events.len(), 3);
        assert_eq!(layer.phase(), Phase::Reached);
    }

    #[test]
    fn finalize_requires_all_reached() {
        let mut layers = vec![
            LayerPruneState::new(partition_dims(0, [4, 1, 2, 1], GroupType::Row), settings(0.5, 0.01)).unwrap(),
        ];
        assert!(matches!(finalize_for_retraining(&mut layers), Err(Error::State(_))));
        let mut p = hand_layer([0.4, 0.1, 0.3, 0.2]);
        scheduler_tick(&mut layers[0], &mut p, 0).unwrap();
        let mut p = hand_layer([0.4, 0.0, 0.3, 0.0]);
        scheduler_tick(&mut layers[0], &mut p, 1).unwrap();
        assert!(layers[0].lambdas().iter().any(|&l| l > 0.0));
        let masks = finalize_for_retraining(&mut layers).unwrap();
        assert_eq!(masks[0].pruned_count(), 2);
        assert!(layers[0].lambdas().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn target_rounds_half_up() {
        assert_eq!(target_count(0.5, 5), 3);
        assert_eq!(target_count(0.25, 6), 2);
        assert_eq!(target_count(0.75, 8), 6);
        assert_eq!(target_count(0.1, 4), 0);
    }

    #[test]
    fn frozen_ranking_drives_lambda_monotonically() {
        // Fixed norms: groups 0..4 below RG=5 keep gaining, groups above stay at zero.
        let dims = [10, 1, 1, 1];
        let mut layer = LayerPruneState::new(
            partition_dims(0, dims, GroupType::Row),
            LayerSettings { ratio: 0.5, penalty_cap: A, threshold: 0.0, update_interval: 1 },
        )
        .unwrap();
        let w = Tensor4D::from_vec(dims, (0..10).map(|i| 0.1 * (i + 1) as f64).collect()).unwrap();
        let mut prev = vec![0.0; 10];
        for it in 0..50 {
            let mut p = LayerParams { weight: w.clone(), bias: vec![0.0; 10] };
            let (l, _) = scheduler_tick(&mut layer, &mut p, it).unwrap();
            for g in 0..10 {
                if g < 5 {
                    assert!(l[g] >= prev[g]);
                } else if g > 5 {
                    assert_eq!(l[g], 0.0);
                }
            }
            prev = l;
        }
        assert!((prev[0] - 50.0 * A).abs() < 1e-12);
    }

    #[test]
    fn event_json_shape() {
        let e = SchedulerEvent {
            iteration: 3,
            layer: Some(0),
            kind: EventKind::GroupPruned,
            group: Some(2),
            lambda_hash: lambda_hash(&[0.0, 1.0]),
        };
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.starts_with(r#"{"iteration":3,"layer":0,"kind":"group_pruned","group":2,"lambda_hash":""#), "{s}");
        assert_eq!(e.lambda_hash.len(), 16);
    }

    proptest! {
        #[test]
        fn delta_is_bounded_monotone_and_continuous(
            groups in 2usize..200,
            ratio in 0.01f64..0.99,
            cap in 1e-6f64..1.0,
        ) {
            let g = groups as f64;
            let rg = ratio * g;
            let mut prev = f64::INFINITY;
            for k in 0..=200 {
                let r = (g - 1.0) * k as f64 / 200.0;
                let d = delta_lambda(r, ratio, groups, cap).unwrap();
                prop_assert!(d <= cap && d >= -cap);
                prop_assert!(d <= prev);
                prev = d;
            }
            prop_assert_eq!(delta_lambda(0.0, ratio, groups, cap).unwrap(), cap);
            if g * (1.0 - ratio) - 1.0 > 0.0 {
                prop_assert_eq!(delta_lambda(g - 1.0, ratio, groups, cap).unwrap(), -cap);
            }
            if rg <= g - 1.0 {
                let left = delta_lambda(rg, ratio, groups, cap).unwrap();
                let right = delta_lambda((rg * (1.0 + 4.0 * f64::EPSILON)).min(g - 1.0), ratio, groups, cap).unwrap();
                prop_assert!((left - right).abs() < 1e-12);
            }
        }
    }
}
