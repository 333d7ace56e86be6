//! Task losses and the loop that adapts tissue parameters to them.
//!
//! Two objectives are supported: reconstruction of a target B-mode image
//! (mean squared error on the final image) and a soft-Dice segmentation proxy
//! that gates the pre-warp echo by intensity and scores the overlap with one
//! tissue's ground-truth mask.

mod adam;
mod loss;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamParams, AdamState};
pub use loss::{
    mse_loss, mse_on_tape, soft_dice_from_probability, soft_dice_loss, soft_dice_on_tape, Polarity, DICE_EPS,
};

use crate::autodiff::{Fault, GradientVector, NodeId, Objective, Tape};
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};
use crate::labelmap::{gt_mask, LabelMap};
use crate::renderer::{render_on_tape, table_leaf, ExecMode, RayGeometry, RenderConfig, RenderNodes, ScatterTextures};
use crate::tissue::{flatten, project_constraints, unflatten, unflatten_like, ParamVector, ParameterTable, NUM_FIELDS};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    ReconstructionMse {
        target: Grid,
    },
    SoftDice {
        target_label: u8,
        polarity: Polarity,
        gate_gamma: f64,
        gate_tau: f64,
    },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if let TaskSpec::SoftDice {
            gate_gamma, gate_tau, ..
        } = self
        {
            if !(*gate_gamma > 0.0 && gate_gamma.is_finite()) {
                return Err(Error::Config(format!("task.gate_gamma must be > 0, got {gate_gamma}")));
            }
            if !(0.0..=1.0).contains(gate_tau) {
                return Err(Error::Config(format!("task.gate_tau must be in [0, 1], got {gate_tau}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Same scatter realization every step.
    #[default]
    Fixed,
    /// Scatter textures redrawn from `seed + step`.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    pub seed_policy: SeedPolicy,
    /// Relative loss improvement below which a step counts as stalled.
    pub convergence_tol: f64,
    /// Consecutive stalled steps before stopping.
    pub patience: usize,
    /// Keep a parameter snapshot every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 2000,
            seed_policy: SeedPolicy::Fixed,
            convergence_tol: 1e-9,
            patience: 100,
            checkpoint_every: 100,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "optim.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("optim.max_steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("optim.adam_beta1 and adam_beta2 must be in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("optim.adam_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// A label map, render settings and task bundled into a differentiable
/// function of the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Problem {
    map: LabelMap,
    geom: RayGeometry,
    cfg: RenderConfig,
    task: TaskSpec,
    mask: Option<BinaryGrid>,
    textures: ScatterTextures,
    num_labels: usize,
    mode: ExecMode,
    fault: Option<Fault>,
}

impl Problem {
    /// `num_labels` is the parameter table size (at least the map's label count).
    pub fn new(map: &LabelMap, cfg: &RenderConfig, task: TaskSpec, num_labels: usize) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        if let Some(&max) = map.present_labels().iter().next_back() {
            if max as usize >= num_labels {
                return Err(Error::MissingLabel {
                    label: max as usize,
                    table_len: num_labels,
                });
            }
        }
        let mask = match &task {
            TaskSpec::ReconstructionMse { target } => {
                let expected = match &cfg.fan {
                    Some(f) => (f.output_height, f.output_width),
                    None => map.shape(),
                };
                if target.shape() != expected {
                    return Err(Error::Shape {
                        op: "mse_loss",
                        left: expected,
                        right: target.shape(),
                    });
                }
                None
            }
            TaskSpec::SoftDice { target_label, .. } => {
                let m = gt_mask(map, *target_label)?;
                if m.count_ones() == 0 {
                    return Err(Error::Config(format!(
                        "task.target_label {target_label} does not occur in the label map"
                    )));
                }
                Some(m)
            }
        };
        Ok(Self {
            geom: RayGeometry::new(map),
            map: map.clone(),
            textures: ScatterTextures::generate(map.height(), map.width(), cfg.seed),
            cfg: cfg.clone(),
            task,
            mask,
            num_labels,
            mode: ExecMode::Sequential,
            fault: None,
        })
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    /// Corrupt one backward rule (negative-control fixture for gradient checks).
    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn map(&self) -> &LabelMap {
        &self.map
    }

    pub fn render_config(&self) -> &RenderConfig {
        &self.cfg
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn record(&self, theta: &ParamVector, seed: u64) -> Result<(Tape, NodeId, NodeId, RenderNodes)> {
        let table = unflatten(theta, self.num_labels)?;
        let mut tape = Tape::new();
        tape.set_parallel(self.mode == ExecMode::Parallel);
        tape.inject_fault(self.fault);
        let params = table_leaf(&mut tape, &table)?;
        let regenerated;
        let textures = if seed == self.cfg.seed {
            &self.textures
        } else {
            regenerated = ScatterTextures::generate(self.map.height(), self.map.width(), seed);
            &regenerated
        };
        let nodes = render_on_tape(&mut tape, params, &self.geom, &self.cfg, textures)?;
        let loss = match &self.task {
            TaskSpec::ReconstructionMse { target } => mse_on_tape(&mut tape, nodes.bmode, target)?,
            TaskSpec::SoftDice {
                polarity,
                gate_gamma,
                gate_tau,
                ..
            } => soft_dice_on_tape(
                &mut tape,
                nodes.echo,
                self.mask.as_ref().expect("dice mask"),
                *polarity,
                *gate_gamma,
                *gate_tau,
            )?,
        };
        Ok((tape, params, loss, nodes))
    }

    pub fn loss(&self, theta: &ParamVector, seed: u64) -> Result<f64> {
        let (tape, _, loss, _) = self.record(theta, seed)?;
        Ok(tape.scalar_value(loss))
    }

    pub fn loss_and_gradient(&self, theta: &ParamVector, seed: u64) -> Result<(f64, GradientVector)> {
        let (tape, params, loss, _) = self.record(theta, seed)?;
        Ok((tape.scalar_value(loss), tape.gradient(loss, params)?))
    }

    /// Loss plus the rendered B-mode image.
    pub fn loss_and_image(&self, theta: &ParamVector, seed: u64) -> Result<(f64, Grid)> {
        let (tape, _, loss, nodes) = self.record(theta, seed)?;
        Ok((tape.scalar_value(loss), tape.value(nodes.bmode).clone()))
    }
}

impl Objective for Problem {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        self.loss(&ParamVector(theta.to_vec()), self.cfg.seed)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.loss_and_gradient(&ParamVector(theta.to_vec()), self.cfg.seed)?;
        Ok((l, g.0))
    }

    fn coordinate_name(&self, i: usize) -> String {
        ParamVector::coordinate_name(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Parameters the loss was evaluated at, kept on checkpoint steps.
    pub snapshot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimHistory {
    pub records: Vec<StepRecord>,
    pub best_step: usize,
}

impl OptimHistory {
    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.records.get(self.best_step).map(|r| r.loss)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for r in &self.records {
            writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.grad_norm).unwrap();
        }
        out
    }
}

/// Render, score, backpropagate, take an Adam step and project, until
/// `max_steps` or stalled progress. Returns the best table seen.
pub fn optimize(
    map: &LabelMap,
    table0: &ParameterTable,
    task: TaskSpec,
    cfg_r: &RenderConfig,
    cfg_o: &OptimConfig,
) -> Result<(ParameterTable, OptimHistory)> {
    let problem = Problem::new(map, cfg_r, task, table0.len())?;
    optimize_problem(&problem, table0, cfg_o, |_| {})
}

/// [`optimize`] over a prepared problem; `observe` sees each step record.
pub fn optimize_problem(
    problem: &Problem,
    table0: &ParameterTable,
    cfg_o: &OptimConfig,
    mut observe: impl FnMut(&StepRecord),
) -> Result<(ParameterTable, OptimHistory)> {
    cfg_o.validate()?;
    let adam = cfg_o.adam();
    let mut theta = project_constraints(&flatten(table0));
    let mut state = AdamState::new(theta.len());
    let mut history = OptimHistory::default();
    let mut best = (f64::INFINITY, theta.clone());
    let mut stalled = 0;

    for step in 0..cfg_o.max_steps {
        let seed = match cfg_o.seed_policy {
            SeedPolicy::Fixed => problem.cfg.seed,
            SeedPolicy::PerStep => problem.cfg.seed.wrapping_add(step as u64),
        };
        let (loss, grad) = problem.loss_and_gradient(&theta, seed)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence {
                step,
                loss,
                offending: (0..grad.0.len()).filter(|&i| !grad.0[i].is_finite()).collect(),
            });
        }
        let checkpoint = cfg_o.checkpoint_every > 0 && step % cfg_o.checkpoint_every == 0;
        let record = StepRecord {
            step,
            loss,
            grad_norm: grad.norm(),
            snapshot: checkpoint.then(|| theta.0.clone()),
        };
        observe(&record);
        let previous = history.records.last().map(|r| r.loss);
        history.records.push(record);
        if loss < best.0 {
            best = (loss, theta.clone());
            history.best_step = step;
        }
        if loss == 0.0 {
            break;
        }
        if let Some(prev) = previous {
            let improvement = (prev - loss) / prev.abs().max(f64::MIN_POSITIVE);
            stalled = if improvement < cfg_o.convergence_tol { stalled + 1 } else { 0 };
            if stalled >= cfg_o.patience.max(1) {
                break;
            }
        }
        let (next, next_state) = adam_step(&theta, &grad, &state, &adam)?;
        theta = project_constraints(&next);
        state = next_state;
    }
    Ok((unflatten_like(&best.1, table0)?, history))
}

/// Scale every coordinate by `1 ± fraction` (random sign from `seed`), then project.
pub fn perturb_table(table: &ParameterTable, fraction: f64, seed: u64) -> ParameterTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = flatten(table);
    let perturbed = v
        .0
        .iter()
        .map(|x| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            x * (1.0 + sign * fraction)
        })
        .collect();
    let projected = project_constraints(&ParamVector(perturbed));
    unflatten_like(&projected, table).expect("same length")
}

/// Coordinates in `0..5K` belonging to labels absent from `map`.
pub fn absent_coordinates(map: &LabelMap, num_labels: usize) -> Vec<usize> {
    let present = map.present_labels();
    (0..num_labels * NUM_FIELDS)
        .filter(|i| !present.contains(&((i / NUM_FIELDS) as u8)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;
    use crate::renderer::render;
    use crate::tissue::default_table;

    #[test]
    fn zero_loss_start_returns_input() {
        let map = phantom::abdominal(16, 16, 4).unwrap();
        let table = default_table(4);
        let cfg = RenderConfig::default();
        let target = render(&map, &table, &cfg).unwrap().bmode;
        let (out, hist) = optimize(
            &map,
            &table,
            TaskSpec::ReconstructionMse { target },
            &cfg,
            &OptimConfig::default(),
        )
        .unwrap();
        assert_eq!(out, table);
        assert_eq!(hist.records.len(), 1);
        assert_eq!(hist.records[0].loss, 0.0);
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let map = phantom::abdominal(16, 16, 4).unwrap();
        let task = TaskSpec::SoftDice {
            target_label: phantom::VESSEL,
            polarity: Polarity::Dark,
            gate_gamma: 10.0,
            gate_tau: 0.3,
        };
        let cfg_o = OptimConfig {
            max_steps: 15,
            learning_rate: 1e-2,
            ..OptimConfig::default()
        };
        let a = optimize(&map, &default_table(4), task.clone(), &RenderConfig::default(), &cfg_o).unwrap();
        let b = optimize(&map, &default_table(4), task, &RenderConfig::default(), &cfg_o).unwrap();
        assert_eq!(a, b);
        assert!(a.1.records.len() <= 15);
        assert!(a.0.is_feasible());
    }

    #[test]
    fn returned_table_is_projection_fixed_point() {
        let map = phantom::abdominal(16, 16, 3).unwrap();
        let mut start = default_table(3);
        // start at the μ₁ bound so projection is active
        start.entries_mut()[2].mu1 = 1.0;
        let task = TaskSpec::SoftDice {
            target_label: phantom::VESSEL,
            polarity: Polarity::Bright,
            gate_gamma: 10.0,
            gate_tau: 0.3,
        };
        let cfg_o = OptimConfig {
            max_steps: 30,
            learning_rate: 5e-2,
            seed_policy: SeedPolicy::PerStep,
            ..OptimConfig::default()
        };
        let (out, _) = optimize(&map, &start, task, &RenderConfig::default(), &cfg_o).unwrap();
        let v = flatten(&out);
        assert_eq!(project_constraints(&v), v);
    }

    #[test]
    fn invalid_configs() {
        let map = phantom::abdominal(16, 16, 3).unwrap();
        let cfg_o = OptimConfig {
            max_steps: 0,
            ..OptimConfig::default()
        };
        let task = TaskSpec::SoftDice {
            target_label: 1,
            polarity: Polarity::Dark,
            gate_gamma: 10.0,
            gate_tau: 0.3,
        };
        assert!(optimize(&map, &default_table(3), task.clone(), &RenderConfig::default(), &cfg_o).is_err());
        let bad_gate = TaskSpec::SoftDice {
            target_label: 1,
            polarity: Polarity::Dark,
            gate_gamma: 10.0,
            gate_tau: 1.5,
        };
        assert!(Problem::new(&map, &RenderConfig::default(), bad_gate, 3).is_err());
        let bad_label = TaskSpec::SoftDice {
            target_label: 7,
            polarity: Polarity::Dark,
            gate_gamma: 10.0,
            gate_tau: 0.3,
        };
        assert!(Problem::new(&map, &RenderConfig::default(), bad_label, 3).is_err());
        let wrong_target = TaskSpec::ReconstructionMse {
            target: Grid::zeros(3, 3),
        };
        assert!(Problem::new(&map, &RenderConfig::default(), wrong_target, 3).is_err());
    }

    #[test]
    fn absent_tissue_gradients_are_zero() {
        let map = phantom::abdominal(16, 16, 3).unwrap();
        let cfg = RenderConfig::default();
        let target = render(&map, &default_table(5), &cfg).unwrap().bmode.map(|v| v * 0.9);
        let problem = Problem::new(&map, &cfg, TaskSpec::ReconstructionMse { target }, 5).unwrap();
        let (_, g) = problem.loss_and_gradient(&flatten(&default_table(5)), cfg.seed).unwrap();
        let absent = absent_coordinates(&map, 5);
        assert_eq!(absent, (15..25).collect::<Vec<_>>());
        for i in absent {
            assert_eq!(g.0[i], 0.0);
        }
    }

    #[test]
    fn perturbation_is_bounded_and_seeded() {
        let t = default_table(4);
        let p = perturb_table(&t, 0.3, 1);
        assert_eq!(p, perturb_table(&t, 0.3, 1));
        for (a, b) in flatten(&t).0.iter().zip(&flatten(&p).0) {
            let ratio = b / a;
            assert!((ratio - 0.7).abs() < 1e-12 || (ratio - 1.3).abs() < 1e-12 || (*b == 1.0 && *a > 0.76));
        }
    }

    #[test]
    fn history_csv() {
        let h = OptimHistory {
            records: vec![StepRecord {
                step: 0,
                loss: 0.5,
                grad_norm: 2.0,
                snapshot: None,
            }],
            best_step: 0,
        };
        assert_eq!(h.to_csv(), "step,loss,grad_norm\n0,5e-1,2e0\n");
    }
}
