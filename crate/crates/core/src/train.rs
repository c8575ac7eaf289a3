//! Three-phase training: edge pre-training, disparity training with the
//! edge network fixed, then joint refinement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::loss::{class_balanced_bce, deep_supervision, LossBreakdown, Supervision, DEFAULT_LAMBDA_DS};
use crate::model::{EdgeStereo, BACKBONE_SHARED, DISPARITY_BRANCH, EDGE_SUBNET};
use crate::params::{GradMode, ParamId, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetRole {
    Edge,
    Stereo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossTerm {
    ClassBalancedBce,
    Regression,
    EdgeAwareSmoothness,
}

/// Step decay: the rate is multiplied by `decay_factor` at each listed
/// iteration index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_at: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
}

fn default_decay() -> f64 {
    0.5
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            decay_at: Vec::new(),
            decay_factor: default_decay(),
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let fired = self.decay_at.iter().filter(|&&k| k <= iteration).count();
        self.initial * self.decay_factor.powi(fired as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub id: u8,
    pub role: DatasetRole,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub losses: Vec<LossTerm>,
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default = "default_lambda")]
    pub lambda_ds: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA_DS
}

impl Phase {
    pub fn uses(&self, term: LossTerm) -> bool {
        self.losses.contains(&term)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn names(groups: &[&str]) -> Vec<String> {
    groups.iter().map(|s| s.to_string()).collect()
}

impl PhasePlan {
    /// The three-phase protocol with the given iteration counts, batch
    /// size and learning rate. `smoothness` adds the edge-aware term to
    /// phase 2.
    pub fn three_phase(iterations: [usize; 3], batch_size: usize, lr: f64, smoothness: bool) -> Self {
        let mut phase2 = vec![LossTerm::Regression];
        if smoothness {
            phase2.push(LossTerm::EdgeAwareSmoothness);
        }
        PhasePlan {
            phases: vec![
                Phase {
                    id: 1,
                    role: DatasetRole::Edge,
                    trainable: names(&[EDGE_SUBNET]),
                    frozen: names(&[BACKBONE_SHARED, DISPARITY_BRANCH]),
                    losses: vec![LossTerm::ClassBalancedBce],
                    iterations: iterations[0],
                    batch_size,
                    schedule: LrSchedule::constant(lr),
                    lambda_ds: DEFAULT_LAMBDA_DS,
                },
                Phase {
                    id: 2,
                    role: DatasetRole::Stereo,
                    trainable: names(&[DISPARITY_BRANCH]),
                    frozen: names(&[BACKBONE_SHARED, EDGE_SUBNET]),
                    losses: phase2,
                    iterations: iterations[1],
                    batch_size,
                    schedule: LrSchedule::constant(lr),
                    lambda_ds: DEFAULT_LAMBDA_DS,
                },
                Phase {
                    id: 3,
                    role: DatasetRole::Stereo,
                    trainable: names(&[EDGE_SUBNET, DISPARITY_BRANCH]),
                    frozen: names(&[BACKBONE_SHARED]),
                    losses: vec![LossTerm::Regression],
                    iterations: iterations[2],
                    batch_size,
                    schedule: LrSchedule {
                        initial: lr,
                        decay_at: vec![iterations[2] / 2, iterations[2] * 5 / 6],
                        decay_factor: 0.5,
                    },
                    lambda_ds: DEFAULT_LAMBDA_DS,
                },
            ],
            adam: AdamConfig::default(),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Checks the protocol's structure against a model.
    pub fn validate<T: Scalar>(&self, model: &EdgeStereo<T>) -> Result<()> {
        let bad = |id: u8, msg: &str| Err(Error::Config(format!("phase {id}: {msg}")));
        let all: Vec<&str> = model.store.groups().iter().map(|g| g.name.as_str()).collect();
        let mut last = 0u8;
        for p in &self.phases {
            if p.id <= last || !(1..=3).contains(&p.id) {
                return bad(p.id, "phase ids must be drawn from 1, 2, 3 in increasing order");
            }
            last = p.id;
            let mut listed: Vec<&str> = p.trainable.iter().chain(&p.frozen).map(String::as_str).collect();
            listed.sort_unstable();
            let mut expected = all.clone();
            expected.sort_unstable();
            if listed != expected {
                return bad(p.id, "trainable and frozen groups must partition the model's groups");
            }
            if p.trainable.iter().any(|g| g == BACKBONE_SHARED) {
                return bad(p.id, "the shared backbone is frozen in every phase");
            }
            if p.batch_size == 0 {
                return bad(p.id, "batch size must be positive");
            }
            let s = &p.schedule;
            if !(s.initial.is_finite() && s.initial > 0.0 && s.decay_factor.is_finite() && s.decay_factor > 0.0) {
                return bad(p.id, "learning rate and decay factor must be positive");
            }
            if !(p.lambda_ds.is_finite() && p.lambda_ds >= 0.0) {
                return bad(p.id, "lambda_ds must be non-negative");
            }
            let mut trainable: Vec<&str> = p.trainable.iter().map(String::as_str).collect();
            trainable.sort_unstable();
            let mut losses = p.losses.clone();
            losses.sort_unstable();
            losses.dedup();
            match p.id {
                1 => {
                    if p.role != DatasetRole::Edge || trainable != [EDGE_SUBNET] || losses != [LossTerm::ClassBalancedBce] {
                        return bad(1, "trains the edge sub-network alone with class-balanced BCE on edge data");
                    }
                }
                2 => {
                    let ok_losses = losses == [LossTerm::Regression]
                        || losses == [LossTerm::Regression, LossTerm::EdgeAwareSmoothness];
                    if p.role != DatasetRole::Stereo || trainable != [DISPARITY_BRANCH] || !ok_losses {
                        return bad(2, "trains the disparity branch alone with regression (+ smoothness) on stereo data");
                    }
                    if p.uses(LossTerm::EdgeAwareSmoothness) && !model.config.edge_cues {
                        return bad(2, "edge-aware smoothness needs a model built with edge cues");
                    }
                }
                _ => {
                    let mut both = [EDGE_SUBNET, DISPARITY_BRANCH];
                    both.sort_unstable();
                    if p.role != DatasetRole::Stereo || trainable != both || losses != [LossTerm::Regression] {
                        return bad(3, "trains every non-backbone group with the regression loss only");
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with bias correction. Moments are kept only for parameters that
/// were trainable when the optimizer was created.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let moments = store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .map(|id| {
                let shape = store.value(id).shape();
                (
                    id,
                    Moments {
                        m: Tensor::zeros(shape),
                        v: Tensor::zeros(shape),
                    },
                )
            })
            .collect();
        Adam {
            config,
            step: 0,
            moments,
        }
    }

    /// One update. Parameters without moments (frozen) or without a
    /// gradient are left alone. Any non-finite gradient aborts the step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.get(*id).name.clone()));
            }
            if g.shape() != store.value(*id).shape() {
                return Err(Error::shape("adam", format!("gradient for `{}`", store.get(*id).name)));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(lr);
        for (id, g) in grads {
            let Some(mom) = self.moments.get_mut(id) else {
                continue;
            };
            let w = store.value_mut(*id).data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] = w[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Position in a plan plus everything needed to continue from it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Index into `PhasePlan::phases`.
    pub phase_index: usize,
    /// Iterations completed in the current phase.
    pub iteration: usize,
    /// Optimizer of the current phase; `None` before its first step.
    pub optimizer: Option<Adam<f32>>,
    /// Loss per iteration, one list per phase started so far.
    pub traces: Vec<Vec<f32>>,
}

impl TrainState {
    pub fn start() -> Self {
        TrainState {
            phase_index: 0,
            iteration: 0,
            optimizer: None,
            traces: Vec::new(),
        }
    }

    pub fn is_finished(&self, plan: &PhasePlan) -> bool {
        self.phase_index >= plan.phases.len()
    }
}

/// Dataset indices for `iteration` of a phase. Each epoch is a fresh
/// permutation determined by `(seed, phase id, epoch)`; a trailing
/// partial batch is dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, phase_id: u8, iteration: usize) -> Result<Vec<usize>> {
    if batch_size == 0 || n < batch_size {
        return Err(Error::DatasetExhausted {
            available: n,
            required: batch_size,
        });
    }
    let per_epoch = n / batch_size;
    let (epoch, slot) = (iteration / per_epoch, iteration % per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase_id as u64) << 48) | epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order[slot * batch_size..(slot + 1) * batch_size].to_vec())
}

/// Scalar loss for one batch together with its per-scale parts (stereo
/// phases only).
pub struct PhaseLoss {
    pub total: Var,
    pub breakdown: Option<LossBreakdown<f32>>,
}

/// Builds the phase's objective on `batch` inside `s`.
pub fn phase_loss(model: &EdgeStereo<f32>, s: &mut Session<'_, f32>, phase: &Phase, batch: &Batch) -> Result<PhaseLoss> {
    let left = s.constant(batch.left.clone());
    match phase.role {
        DatasetRole::Edge => {
            let out = model.edge_forward(s, left)?;
            let mut total = class_balanced_bce(s, out.edge_map, &batch.edges, None)?;
            for &side in &out.side_maps {
                let l = class_balanced_bce(s, side, &batch.edges, None)?;
                total = s.add(total, l)?;
            }
            Ok(PhaseLoss { total, breakdown: None })
        }
        DatasetRole::Stereo => {
            let right = s.constant(batch.right.clone());
            let out = model.forward(s, left, right)?;
            let edge_map = s.value(out.edge.edge_map).clone();
            let mode = if phase.uses(LossTerm::EdgeAwareSmoothness) {
                Supervision::WithSmoothness {
                    edge_map: &edge_map,
                    lambda_ds: phase.lambda_ds,
                }
            } else {
                Supervision::RegressionOnly
            };
            let b = deep_supervision(s, &out.disparities, &batch.disparity, &batch.valid, mode)?;
            Ok(PhaseLoss {
                total: b.total_var,
                breakdown: Some(b),
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationLog {
    pub phase: u8,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f32,
}

/// What [`train`] should do besides training.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Pause before running this `(phase index, iteration)`.
    pub stop_before: Option<(usize, usize)>,
    /// Called after every iteration.
    pub on_iteration: Option<&'a mut dyn FnMut(&IterationLog)>,
    /// Called with the state at each phase end and when pausing.
    pub on_checkpoint: Option<&'a mut dyn FnMut(&EdgeStereo<f32>, &TrainState) -> Result<()>>,
}

fn apply_freezing(model: &mut EdgeStereo<f32>, phase: &Phase) -> Result<()> {
    let trainable: Vec<&str> = phase.trainable.iter().map(String::as_str).collect();
    model.store.train_only(&trainable)
}

/// One optimization step; returns the loss before the update.
fn train_step(
    model: &mut EdgeStereo<f32>,
    phase: &Phase,
    batch: &Batch,
    optimizer: &mut Adam<f32>,
    lr: f64,
) -> Result<f32> {
    let (loss, grads) = {
        let mut s = model.session(GradMode::Trainable);
        let l = phase_loss(model, &mut s, phase, batch)?;
        let value = s.value(l.total).item();
        let mut g = s.backward(l.total)?;
        (value, s.param_grads(&mut g))
    };
    optimizer.step(&mut model.store, &grads, lr)?;
    Ok(loss)
}

/// Runs (or continues) a plan from `state`. Returns the state reached,
/// which is either finished or paused at `hooks.stop_before`.
pub fn train(
    model: &mut EdgeStereo<f32>,
    plan: &PhasePlan,
    data: &Dataset,
    seed: u64,
    mut state: TrainState,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainState> {
    plan.validate(model)?;
    while let Some(phase) = plan.phases.get(state.phase_index) {
        apply_freezing(model, phase)?;
        if state.traces.len() <= state.phase_index {
            state.traces.push(Vec::with_capacity(phase.iterations));
        }
        if phase.iterations > 0 {
            batch_indices(data.len(), phase.batch_size, seed, phase.id, 0)?;
        }
        while state.iteration < phase.iterations {
            if hooks.stop_before == Some((state.phase_index, state.iteration)) {
                if let Some(cb) = hooks.on_checkpoint.as_mut() {
                    cb(model, &state)?;
                }
                return Ok(state);
            }
            let it = state.iteration;
            let idx = batch_indices(data.len(), phase.batch_size, seed, phase.id, it)?;
            let batch = data.batch(&idx)?;
            let lr = phase.schedule.lr_at(it);
            let optimizer = state
                .optimizer
                .get_or_insert_with(|| Adam::new(&model.store, plan.adam));
            let loss = match train_step(model, phase, &batch, optimizer, lr) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss {
                        phase: phase.id,
                        iteration: it,
                        trace: state.traces[state.phase_index].clone(),
                    })
                }
                Err(e) => return Err(e),
            };
            state.traces[state.phase_index].push(loss);
            state.iteration += 1;
            if let Some(cb) = hooks.on_iteration.as_mut() {
                cb(&IterationLog {
                    phase: phase.id,
                    iteration: it,
                    lr,
                    loss,
                });
            }
        }
        state.phase_index += 1;
        state.iteration = 0;
        state.optimizer = None;
        if let Some(cb) = hooks.on_checkpoint.as_mut() {
            cb(model, &state)?;
        }
    }
    Ok(state)
}

/// A single phase from scratch with a fresh optimizer; returns its loss
/// trace. Freezing follows the phase's group lists.
pub fn run_phase(model: &mut EdgeStereo<f32>, phase: &Phase, data: &Dataset, seed: u64) -> Result<Vec<f32>> {
    let plan = PhasePlan {
        phases: vec![phase.clone()],
        adam: AdamConfig::default(),
    };
    let state = train(model, &plan, data, seed, TrainState::start(), TrainHooks::default())?;
    Ok(state.traces.into_iter().next().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;
    use crate::model::ModelConfig;

    #[test]
    fn one_step_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let g = store.add_group("g");
        let w = store.insert(g, "w", Tensor::scalar(0.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[(w, Tensor::scalar(1.0))], 0.1).unwrap();
        assert!((store.value(w).item() + 0.1).abs() < 1e-7);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_and_frozen_groups() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add_group("a");
        let b = store.add_group("b");
        let pa = store.insert(a, "pa", Tensor::full(&[3], 0.5));
        let pb = store.insert(b, "pb", Tensor::full(&[3], 0.25));
        store.set_frozen(b, true);
        let mut adam = Adam::new(&store, AdamConfig::default());
        assert!(!adam.moments.contains_key(&pb));
        let before = store.value(pb).clone();
        for _ in 0..100 {
            adam.step(&mut store, &[(pa, Tensor::zeros(&[3])), (pb, Tensor::ones(&[3]))], 0.1).unwrap();
        }
        assert_eq!(store.value(pa).data(), &[0.5; 3]);
        assert_eq!(store.value(pb), &before);
        assert_eq!(adam.step, 100);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut store = ParamStore::<f32>::new();
        let g = store.add_group("g");
        let p = store.insert(g, "p", Tensor::full(&[2], 1.0));
        let q = store.insert(g, "q", Tensor::full(&[1], 1.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = [(p, Tensor::ones(&[2])), (q, Tensor::full(&[1], f32::NAN))];
        assert!(matches!(adam.step(&mut store, &grads, 0.1), Err(Error::NonFiniteGradient(n)) if n == "q"));
        assert_eq!(store.value(p).data(), &[1.0, 1.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn step_decay_fires_at_listed_iterations() {
        let s = LrSchedule {
            initial: 1.0,
            decay_at: vec![3, 5],
            decay_factor: 0.5,
        };
        let lrs: Vec<f64> = (0..7).map(|i| s.lr_at(i)).collect();
        assert_eq!(lrs, [1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25]);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|i| batch_indices(8, 2, 3, 2, i).unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        assert_ne!(batch_indices(8, 2, 3, 2, 0).unwrap(), batch_indices(8, 2, 3, 3, 0).unwrap());
        assert!(batch_indices(1, 2, 0, 1, 0).is_err());
    }

    #[test]
    fn plan_validation() {
        let model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        let plan = PhasePlan::three_phase([1, 1, 1], 2, 1e-3, true);
        plan.validate(&model).unwrap();

        let mut p = plan.clone();
        p.phases[2].losses.push(LossTerm::EdgeAwareSmoothness);
        assert!(p.validate(&model).is_err());
        let mut p = plan.clone();
        p.phases[1].trainable.push(EDGE_SUBNET.into());
        p.phases[1].frozen.retain(|g| g != EDGE_SUBNET);
        assert!(p.validate(&model).is_err());
        let mut p = plan.clone();
        p.phases[0].trainable.push(BACKBONE_SHARED.into());
        p.phases[0].frozen.retain(|g| g != BACKBONE_SHARED);
        assert!(p.validate(&model).is_err());

        let mut c = ModelConfig::toy();
        c.edge_cues = false;
        let plain = EdgeStereo::<f32>::new(c).unwrap();
        assert!(plan.validate(&plain).is_err());
        PhasePlan::three_phase([1, 1, 1], 2, 1e-3, false).validate(&plain).unwrap();
    }

    #[test]
    fn empty_phase_leaves_model_alone() {
        let mut model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        let data = Dataset::synthetic(&GeneratorConfig::toy(), 2, 0).unwrap();
        let before = model.store.clone();
        let plan = PhasePlan::three_phase([0, 0, 0], 2, 1e-3, true);
        let trace = run_phase(&mut model, &plan.phases[1], &data, 0).unwrap();
        assert!(trace.is_empty());
        assert!(model.store.params().iter().zip(before.params()).all(|(a, b)| a.value == b.value));
    }

    #[test]
    fn short_run_is_deterministic_and_respects_freezing() {
        let data = Dataset::synthetic(&GeneratorConfig::toy(), 4, 1).unwrap();
        let plan = PhasePlan::three_phase([2, 2, 2], 2, 1e-3, true);
        let run = || {
            let mut model = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
            let state = train(&mut model, &plan, &data, 5, TrainState::start(), TrainHooks::default()).unwrap();
            (model, state)
        };
        let (m1, s1) = run();
        let (_, s2) = run();
        assert_eq!(s1.traces, s2.traces);
        assert!(s1.is_finished(&plan));
        assert!(s1.traces.iter().flatten().all(|l| l.is_finite()));
        let fresh = EdgeStereo::<f32>::new(ModelConfig::toy()).unwrap();
        let shared = m1.groups.shared;
        assert_eq!(m1.store.group_values(shared), fresh.store.group_values(shared));
    }
}
