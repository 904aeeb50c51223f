//! Closed-loop MPC harness: synthetic load/PV truth processes, forecast
//! scenario trees, plant stepping with droop power sharing, and run
//! metrics.

use crate::formulation::{assemble, AssembleOptions, Variant};
use crate::grid_model::GridSpec;
use crate::scenario_tree::{Disturbance, ScenarioTree, TreeError, WeightedPath};
use crate::solver::{branch_and_bound, BnbOptions, SolveStatus};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no grid-forming unit available to absorb imbalance {0}")]
    NoGridForming(f64),
    #[error("profile shapes must be non-empty and equally long")]
    BadProfile,
    #[error("tree construction failed: {0}")]
    Tree(#[from] TreeError),
    #[error("problem assembly failed: {0}")]
    Form(#[from] crate::formulation::FormError),
    #[error("input dimensions do not match the grid")]
    Dim,
}

/// Synthetic diurnal profile with AR(1) forecast errors, standing in for
/// the seasonal time-series models fitted to proprietary measurement data.
#[derive(Debug, Clone)]
pub struct ProfileModel {
    /// Per-step mean available PV over one day, >= 0; applied to every
    /// renewable unit.
    pub pv_shape: Vec<f64>,
    /// Per-step mean load over one day, <= 0; applied to every load.
    pub load_shape: Vec<f64>,
    /// AR(1) coefficient of the error process, in [0, 1).
    pub phi: f64,
    /// Standard deviation of the AR(1) innovations.
    pub sigma: f64,
    pub seed: u64,
}

impl ProfileModel {
    /// Half-hourly day: PV bell over 07:00-17:00, load with morning and
    /// evening peaks. Magnitudes sized for the case-study units.
    pub fn case_study(seed: u64) -> Self {
        let steps = 48;
        let mut pv_shape = vec![0.0; steps];
        let mut load_shape = vec![0.0; steps];
        for k in 0..steps {
            let hour = k as f64 * 0.5;
            // Daylight bell centered at noon.
            if (7.0..17.0).contains(&hour) {
                let t = (hour - 12.0) / 5.0;
                pv_shape[k] = 1.3 * (1.0 - t * t).max(0.0);
            }
            // Base load plus morning and evening peaks.
            let morning = (-((hour - 8.0) / 2.0).powi(2)).exp();
            let evening = (-((hour - 19.5) / 2.5).powi(2)).exp();
            load_shape[k] = -(0.7 + 0.5 * morning + 0.8 * evening);
        }
        ProfileModel { pv_shape, load_shape, phi: 0.7, sigma: 0.05, seed }
    }

    pub fn period(&self) -> usize {
        self.pv_shape.len()
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.pv_shape.is_empty() || self.pv_shape.len() != self.load_shape.len() {
            return Err(SimError::BadProfile);
        }
        Ok(())
    }
}

/// Realized disturbances plus the underlying error states, which the
/// forecaster conditions on.
#[derive(Debug, Clone)]
pub struct Truth {
    pub disturbances: Vec<Disturbance>,
    /// errors[k] stacks the per-unit AR(1) states [renewables, loads].
    pub errors: Vec<Vec<f64>>,
}

fn clip_pv(v: f64, spec: &GridSpec, r: usize) -> f64 {
    v.clamp(spec.p_r_min[r].max(0.0), spec.p_r_max[r])
}

/// Draw the truth series: shapes plus independent per-unit AR(1) errors.
pub fn generate_truth(
    model: &ProfileModel,
    spec: &GridSpec,
    length: usize,
) -> Result<Truth, SimError> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let n_err = spec.n_r + spec.n_d;
    let mut e = vec![0.0; n_err];
    let mut disturbances = Vec::with_capacity(length);
    let mut errors = Vec::with_capacity(length);
    for k in 0..length {
        for s in e.iter_mut() {
            *s = model.phi * *s + model.sigma * standard_normal(&mut rng);
        }
        let slot = k % model.period();
        let w_r: Vec<f64> = (0..spec.n_r)
            .map(|r| clip_pv(model.pv_shape[slot] + e[r], spec, r))
            .collect();
        let w_d: Vec<f64> = (0..spec.n_d)
            .map(|d| (model.load_shape[slot] + e[spec.n_r + d]).min(0.0))
            .collect();
        disturbances.push(Disturbance { w_r, w_d });
        errors.push(e.clone());
    }
    Ok(Truth { disturbances, errors })
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream simple and seedable.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Build a forecast scenario tree for steps `k_next .. k_next + N - 1`,
/// conditioned on the last observed error state.
#[allow(clippy::too_many_arguments)]
pub fn forecast_tree(
    model: &ProfileModel,
    spec: &GridSpec,
    last_error: &[f64],
    k_next: usize,
    branching: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<ScenarioTree, SimError> {
    model.validate()?;
    let n = branching.len();
    let n_err = spec.n_r + spec.n_d;
    if last_error.len() != n_err {
        return Err(SimError::Dim);
    }
    // Nominal forecast: diurnal shape plus the deterministic decay of the
    // known error.
    let nominal: Vec<Disturbance> = (0..n)
        .map(|j| {
            let slot = (k_next + j) % model.period();
            let decay = model.phi.powi(j as i32 + 1);
            Disturbance {
                w_r: (0..spec.n_r)
                    .map(|r| clip_pv(model.pv_shape[slot] + decay * last_error[r], spec, r))
                    .collect(),
                w_d: (0..spec.n_d)
                    .map(|d| {
                        (model.load_shape[slot] + decay * last_error[spec.n_r + d]).min(0.0)
                    })
                    .collect(),
            }
        })
        .collect();
    // Sampled error paths relative to the nominal decay.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = 1.0 / n_samples.max(1) as f64;
    let mut paths = Vec::with_capacity(n_samples);
    for _ in 0..n_samples.max(1) {
        let mut e = last_error.to_vec();
        let mut dev = vec![0.0; n_err];
        let mut stages = Vec::with_capacity(n);
        for j in 0..n {
            let decay = model.phi.powi(j as i32 + 1);
            for (idx, s) in e.iter_mut().enumerate() {
                *s = model.phi * *s
                    + if model.sigma > 0.0 {
                        model.sigma * standard_normal(&mut rng)
                    } else {
                        0.0
                    };
                dev[idx] = *s - decay * last_error[idx];
            }
            stages.push(dev.clone());
        }
        paths.push(WeightedPath { weight, errors: stages });
    }
    let mut tree = ScenarioTree::build_tree(&paths, branching, &nominal)?;
    let r_min: Vec<f64> = spec.p_r_min.iter().map(|v| v.max(0.0)).collect();
    tree.clamp_disturbances(&r_min, &spec.p_r_max);
    Ok(tree)
}

/// Input applied to the plant at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedInput {
    pub u_t: Vec<f64>,
    pub u_s: Vec<f64>,
    pub u_r: Vec<f64>,
    pub delta: Vec<f64>,
}

impl AppliedInput {
    pub fn zeros(spec: &GridSpec) -> Self {
        AppliedInput {
            u_t: vec![0.0; spec.n_t],
            u_s: vec![0.0; spec.n_s],
            u_r: vec![0.0; spec.n_r],
            delta: vec![0.0; spec.n_t],
        }
    }
}

/// Realized powers and next state after one plant step.
#[derive(Debug, Clone)]
pub struct PlantStep {
    pub p_t: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_r: Vec<f64>,
    pub mu: f64,
    pub x_next: Vec<f64>,
    pub saturated: bool,
    /// Power-balance residual after any saturation clipping.
    pub balance_residual: f64,
}

/// Droop power sharing closing the balance around the applied setpoints.
pub fn plant_step(
    spec: &GridSpec,
    v: &AppliedInput,
    w: &Disturbance,
    x: &[f64],
) -> Result<PlantStep, SimError> {
    if v.u_t.len() != spec.n_t
        || v.u_s.len() != spec.n_s
        || v.u_r.len() != spec.n_r
        || v.delta.len() != spec.n_t
        || w.w_r.len() != spec.n_r
        || w.w_d.len() != spec.n_d
        || x.len() != spec.n_s
    {
        return Err(SimError::Dim);
    }
    let p_r: Vec<f64> = (0..spec.n_r)
        .map(|r| v.u_r[r].min(w.w_r[r]))
        .collect();
    let imbalance: f64 = v.u_t.iter().sum::<f64>()
        + v.u_s.iter().sum::<f64>()
        + p_r.iter().sum::<f64>()
        + w.w_d.iter().sum::<f64>();
    let denom: f64 = v
        .delta
        .iter()
        .zip(&spec.k_t)
        .map(|(d, k)| d / k)
        .sum::<f64>()
        + spec.k_s.iter().map(|k| 1.0 / k).sum::<f64>();
    let mu = if denom.abs() < 1e-12 {
        if imbalance.abs() > 1e-9 {
            return Err(SimError::NoGridForming(imbalance));
        }
        0.0
    } else {
        -imbalance / denom
    };
    let mut saturated = false;
    let mut clip = |value: f64, lo: f64, hi: f64| {
        if value < lo - 1e-9 || value > hi + 1e-9 {
            saturated = true;
        }
        value.clamp(lo, hi)
    };
    let p_t: Vec<f64> = (0..spec.n_t)
        .map(|t| {
            let raw = v.u_t[t] + mu * v.delta[t] / spec.k_t[t];
            clip(raw, 0.0, spec.p_t_max[t] * v.delta[t].max(0.0))
        })
        .collect();
    let p_s: Vec<f64> = (0..spec.n_s)
        .map(|s| clip(v.u_s[s] + mu / spec.k_s[s], spec.p_s_min[s], spec.p_s_max[s]))
        .collect();
    let balance_residual = p_t.iter().sum::<f64>()
        + p_s.iter().sum::<f64>()
        + p_r.iter().sum::<f64>()
        + w.w_d.iter().sum::<f64>();
    let x_next: Vec<f64> = x
        .iter()
        .zip(&p_s)
        .map(|(xi, ps)| xi - spec.t_s * ps)
        .collect();
    Ok(PlantStep {
        p_t,
        p_s,
        p_r,
        mu,
        x_next,
        saturated,
        balance_residual,
    })
}

/// Controller configuration for the closed loop.
#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub branching: Vec<usize>,
    pub n_samples: usize,
    pub assemble: AssembleOptions,
    pub bnb: BnbOptions,
    pub x0: Vec<f64>,
    /// Commitment applied before the first step (switching-cost chaining).
    pub initial_delta: Vec<f64>,
}

impl ControllerConfig {
    pub fn new(spec: &GridSpec, variant: Variant, alpha: f64, branching: Vec<usize>) -> Self {
        ControllerConfig {
            variant,
            alpha,
            branching,
            n_samples: 100,
            assemble: AssembleOptions::new(spec),
            bnb: BnbOptions::default(),
            x0: spec
                .x_min
                .iter()
                .zip(&spec.x_max)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
            initial_delta: vec![0.0; spec.n_t],
        }
    }
}

/// One closed-loop step record.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub k: usize,
    /// State at the beginning of the step.
    pub x: Vec<f64>,
    pub u_t: Vec<f64>,
    pub u_s: Vec<f64>,
    pub u_r: Vec<f64>,
    pub delta: Vec<f64>,
    pub w_r: Vec<f64>,
    pub w_d: Vec<f64>,
    pub p_t: Vec<f64>,
    pub p_s: Vec<f64>,
    pub p_r: Vec<f64>,
    pub mu: f64,
    /// Stage cost of the applied input and realized powers.
    pub cost: f64,
    /// Soft-bound violations of the post-step state, per storage.
    pub viol_upper: Vec<f64>,
    pub viol_lower: Vec<f64>,
    pub solve_time_s: f64,
    pub bnb_nodes: usize,
    pub status: SolveStatus,
    /// Optimizer's stage-1 predicted states (per node, per storage).
    pub predicted_stage1: Vec<Vec<f64>>,
    pub saturated: bool,
    pub balance_residual: f64,
    /// Whether the fallback input was applied instead of a fresh solution.
    pub fallback: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationTrace {
    pub steps: Vec<StepRecord>,
    pub final_x: Vec<f64>,
}

/// Stage cost of an applied input and realized powers (undiscounted).
pub fn stage_cost(
    spec: &GridSpec,
    delta: &[f64],
    delta_prev: &[f64],
    p_t: &[f64],
    p_r: &[f64],
) -> f64 {
    let mut cost = 0.0;
    for t in 0..spec.n_t {
        cost += spec.c_t[t] * delta[t] + spec.c_t_prime[t] * p_t[t];
        cost += (spec.c_t_prime_prime[t] * p_t[t]).powi(2);
        cost += (spec.c_t_s[t] * (delta_prev[t] - delta[t])).powi(2);
    }
    for r in 0..spec.n_r {
        cost += (spec.c_r[r] * (spec.p_r_max[r] - p_r[r])).powi(2);
    }
    cost
}

/// Map the nodes of `next` onto nodes of `prev` advanced one stage along
/// the branch closest to the realized disturbance. Deepest-stage nodes of
/// `next` map to their parent's image.
fn shift_node_map(prev: &ScenarioTree, next: &ScenarioTree, realized: &Disturbance) -> Vec<Option<usize>> {
    let dist = |d: &Disturbance| -> f64 {
        d.w_r
            .iter()
            .zip(&realized.w_r)
            .chain(d.w_d.iter().zip(&realized.w_d))
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    };
    let entry = prev
        .nodes_at_stage(1)
        .min_by(|&a, &b| dist(prev.disturbance(a)).total_cmp(&dist(prev.disturbance(b))))
        .expect("stage 1 is never empty");
    let mut map: Vec<Option<usize>> = vec![None; next.node_count()];
    map[0] = Some(entry);
    for node in 0..next.node_count() {
        let Some(image) = map[node] else { continue };
        let prev_children = prev.children_of(image);
        for (idx, &child) in next.children_of(node).iter().enumerate() {
            map[child] = if prev_children.is_empty() {
                // Past the old horizon: reuse the parent's image.
                Some(image)
            } else {
                Some(prev_children[idx.min(prev_children.len() - 1)])
            };
        }
    }
    map
}

/// Build a warm-start vector for `next_prob` from the previous solution.
fn shifted_warm_start(
    spec: &GridSpec,
    prev_tree: &ScenarioTree,
    prev_prob: &crate::formulation::OcpProblem,
    prev_z: &[f64],
    next_tree: &ScenarioTree,
    next_prob: &crate::formulation::OcpProblem,
    realized: &Disturbance,
) -> Vec<f64> {
    let map = shift_node_map(prev_tree, next_tree, realized);
    let (vm_new, vm_old) = (&next_prob.var_map, &prev_prob.var_map);
    let mut z = vec![0.0; next_prob.num_vars];
    for node in 0..next_tree.node_count() {
        let Some(image) = map[node] else { continue };
        for s in 0..spec.n_s {
            z[vm_new.x(node, s)] = prev_z[vm_old.x(image, s)];
        }
        if vm_new.has_input(node) && vm_old.has_input(image) {
            for t in 0..spec.n_t {
                z[vm_new.u_t(node, t)] = prev_z[vm_old.u_t(image, t)];
                z[vm_new.delta(node, t)] = prev_z[vm_old.delta(image, t)];
            }
            for s in 0..spec.n_s {
                z[vm_new.u_s(node, s)] = prev_z[vm_old.u_s(image, s)];
            }
            for r in 0..spec.n_r {
                z[vm_new.u_r(node, r)] = prev_z[vm_old.u_r(image, r)];
            }
        }
        if node > 0 && image > 0 {
            for t in 0..spec.n_t {
                z[vm_new.p_t(node, t)] = prev_z[vm_old.p_t(image, t)];
                z[vm_new.phi(node, t)] = prev_z[vm_old.phi(image, t)];
            }
            for s in 0..spec.n_s {
                z[vm_new.p_s(node, s)] = prev_z[vm_old.p_s(image, s)];
            }
            for r in 0..spec.n_r {
                z[vm_new.p_r(node, r)] = prev_z[vm_old.p_r(image, r)];
                z[vm_new.beta(node, r)] = prev_z[vm_old.beta(image, r)];
            }
            z[vm_new.mu(node)] = prev_z[vm_old.mu(image)];
        }
    }
    z
}

/// Run the receding-horizon loop for `steps` steps against the truth drawn
/// from `model`.
pub fn closed_loop(
    spec: &GridSpec,
    model: &ProfileModel,
    controller: &ControllerConfig,
    steps: usize,
) -> Result<SimulationTrace, SimError> {
    let truth = generate_truth(model, spec, steps)?;
    let mut x = controller.x0.clone();
    let mut last_input = AppliedInput::zeros(spec);
    last_input.delta = controller.initial_delta.clone();
    let mut delta_prev = controller.initial_delta.clone();
    let mut prev: Option<(ScenarioTree, crate::formulation::OcpProblem, Vec<f64>)> = None;
    let mut records = Vec::with_capacity(steps);

    for k in 0..steps {
        let last_error = if k == 0 {
            vec![0.0; spec.n_r + spec.n_d]
        } else {
            truth.errors[k - 1].clone()
        };
        // Per-step forecast seed derived from the model seed; keeps runs
        // with the same configuration bit-identical.
        let tree = forecast_tree(
            model,
            spec,
            &last_error,
            k,
            &controller.branching,
            controller.n_samples,
            model.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(k as u64),
        )?;
        let prob = assemble(
            controller.variant,
            &tree,
            spec,
            &x,
            &delta_prev,
            controller.alpha,
            &controller.assemble,
        )?;
        let warm = prev.as_ref().map(|(pt, pp, pz)| {
            shifted_warm_start(spec, pt, pp, pz, &tree, &prob, &truth.disturbances[k.max(1) - 1])
        });
        let y0 = vec![0.0; prob.a_eq.nrows + prob.g_ineq.nrows];
        let started = std::time::Instant::now();
        let sol = branch_and_bound(
            &prob,
            &controller.bnb,
            warm.as_deref().map(|w| (w, y0.as_slice())),
        );
        let solve_time_s = started.elapsed().as_secs_f64();

        let usable = matches!(sol.status, SolveStatus::Optimal | SolveStatus::GapLimit)
            && sol.objective.is_finite();
        let fallback = !usable;
        let input = if usable {
            let vm = &prob.var_map;
            AppliedInput {
                u_t: (0..spec.n_t).map(|t| sol.z[vm.u_t(0, t)]).collect(),
                u_s: (0..spec.n_s).map(|s| sol.z[vm.u_s(0, s)]).collect(),
                u_r: (0..spec.n_r).map(|r| sol.z[vm.u_r(0, r)]).collect(),
                delta: (0..spec.n_t)
                    .map(|t| sol.z[vm.delta(0, t)].round().clamp(0.0, 1.0))
                    .collect(),
            }
        } else {
            // Hold the previous setpoints, commitment unchanged.
            last_input.clone()
        };
        let predicted_stage1: Vec<Vec<f64>> = if usable {
            tree.nodes_at_stage(1)
                .map(|i| (0..spec.n_s).map(|s| sol.z[prob.var_map.x(i, s)]).collect())
                .collect()
        } else {
            Vec::new()
        };

        let w = &truth.disturbances[k];
        let step = plant_step(spec, &input, w, &x)?;
        let cost = stage_cost(spec, &input.delta, &delta_prev, &step.p_t, &step.p_r);
        let viol_upper: Vec<f64> = step
            .x_next
            .iter()
            .zip(&spec.x_soft_max)
            .map(|(xi, hi)| (xi - hi).max(0.0))
            .collect();
        let viol_lower: Vec<f64> = step
            .x_next
            .iter()
            .zip(&spec.x_soft_min)
            .map(|(xi, lo)| (lo - xi).max(0.0))
            .collect();

        records.push(StepRecord {
            k,
            x: x.clone(),
            u_t: input.u_t.clone(),
            u_s: input.u_s.clone(),
            u_r: input.u_r.clone(),
            delta: input.delta.clone(),
            w_r: w.w_r.clone(),
            w_d: w.w_d.clone(),
            p_t: step.p_t.clone(),
            p_s: step.p_s.clone(),
            p_r: step.p_r.clone(),
            mu: step.mu,
            cost,
            viol_upper,
            viol_lower,
            solve_time_s,
            bnb_nodes: sol.nodes_explored,
            status: sol.status,
            predicted_stage1,
            saturated: step.saturated,
            balance_residual: step.balance_residual,
            fallback,
        });

        delta_prev = input.delta.clone();
        last_input = input;
        x = step.x_next;
        if usable {
            prev = Some((tree, prob, sol.z));
        }
    }
    Ok(SimulationTrace { steps: records, final_x: x })
}

/// Accumulated run metrics, mirroring the closed-loop comparison table.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub steps: usize,
    pub total_cost: f64,
    pub avg_cost: f64,
    /// Renewable energy delivered over total energy delivered to loads and
    /// storage charging, in percent.
    pub renewable_share_pct: f64,
    pub renewable_share_definition: String,
    /// Count of (step, storage) soft-bound violations of the state.
    pub violations: usize,
    pub max_violation: f64,
    pub switching_actions: f64,
    pub mean_solve_time_s: f64,
    pub max_solve_time_s: f64,
    pub fallback_steps: usize,
    pub saturated_steps: usize,
}

pub fn metrics(trace: &SimulationTrace, spec: &GridSpec, initial_delta: &[f64]) -> Report {
    let steps = trace.steps.len();
    let total_cost: f64 = trace.steps.iter().map(|s| s.cost).sum();
    let ren: f64 = trace.steps.iter().map(|s| s.p_r.iter().sum::<f64>()).sum();
    let delivered: f64 = trace
        .steps
        .iter()
        .map(|s| {
            s.p_t.iter().sum::<f64>()
                + s.p_s.iter().map(|v| v.max(0.0)).sum::<f64>()
                + s.p_r.iter().sum::<f64>()
        })
        .sum();
    let mut violations = 0usize;
    let mut max_violation = 0.0f64;
    for s in &trace.steps {
        for v in s.viol_upper.iter().chain(&s.viol_lower) {
            if *v > 1e-9 {
                violations += 1;
                max_violation = max_violation.max(*v);
            }
        }
    }
    let mut switching = 0.0;
    let mut prev = initial_delta.to_vec();
    for s in &trace.steps {
        switching += s
            .delta
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        prev = s.delta.clone();
    }
    let _ = spec;
    Report {
        steps,
        total_cost,
        avg_cost: if steps > 0 { total_cost / steps as f64 } else { 0.0 },
        renewable_share_pct: if delivered > 0.0 { 100.0 * ren / delivered } else { 100.0 },
        renewable_share_definition:
            "renewable energy delivered / total energy delivered to loads and storage charging"
                .to_string(),
        violations,
        max_violation,
        switching_actions: switching,
        mean_solve_time_s: if steps > 0 {
            trace.steps.iter().map(|s| s.solve_time_s).sum::<f64>() / steps as f64
        } else {
            0.0
        },
        max_solve_time_s: trace
            .steps
            .iter()
            .map(|s| s.solve_time_s)
            .fold(0.0, f64::max),
        fallback_steps: trace.steps.iter().filter(|s| s.fallback).count(),
        saturated_steps: trace.steps.iter().filter(|s| s.saturated).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec() -> GridSpec {
        GridSpec::case_study()
    }

    #[test]
    fn noiseless_truth_repeats_the_shape() {
        let mut model = ProfileModel::case_study(1);
        model.sigma = 0.0;
        let truth = generate_truth(&model, &spec(), 96).unwrap();
        for k in 0..96 {
            let slot = k % 48;
            let expected = model.pv_shape[slot].clamp(0.0, spec().p_r_max[0]);
            assert_abs_diff_eq!(truth.disturbances[k].w_r[0], expected, epsilon = 1e-12);
            assert!(truth.disturbances[k].w_d[0] <= 0.0);
        }
    }

    #[test]
    fn truth_deterministic_in_seed() {
        let model = ProfileModel::case_study(7);
        let a = generate_truth(&model, &spec(), 50).unwrap();
        let b = generate_truth(&model, &spec(), 50).unwrap();
        for (da, db) in a.disturbances.iter().zip(&b.disturbances) {
            assert_eq!(da.w_r, db.w_r);
            assert_eq!(da.w_d, db.w_d);
        }
    }

    #[test]
    fn uncorrelated_errors_when_phi_zero() {
        let mut model = ProfileModel::case_study(3);
        model.phi = 0.0;
        let truth = generate_truth(&model, &spec(), 10_000).unwrap();
        let e: Vec<f64> = truth.errors.iter().map(|v| v[0]).collect();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        let var: f64 = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        let lag1: f64 = e
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>();
        assert!((lag1 / var).abs() < 0.1, "lag-1 autocorr {}", lag1 / var);
    }

    #[test]
    fn noiseless_forecast_is_a_chain_matching_truth() {
        let mut model = ProfileModel::case_study(1);
        model.sigma = 0.0;
        let s = spec();
        let truth = generate_truth(&model, &s, 10).unwrap();
        let tree =
            forecast_tree(&model, &s, &truth.errors[2], 3, &[2, 2, 1], 50, 99).unwrap();
        // All error paths collapse: every stage has a single distinct
        // disturbance equal to the truth.
        for j in 1..=3 {
            for i in tree.nodes_at_stage(j) {
                assert_abs_diff_eq!(
                    tree.disturbance(i).w_r[0],
                    truth.disturbances[3 + j - 1].w_r[0],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn forecast_stage1_mean_near_nominal() {
        let model = ProfileModel::case_study(5);
        let s = spec();
        let tree = forecast_tree(&model, &s, &[0.0, 0.0], 20, &[2, 1], 400, 42).unwrap();
        let mean: f64 = tree
            .nodes_at_stage(1)
            .map(|i| tree.probability(i) * tree.disturbance(i).w_d[0])
            .sum();
        let nominal = model.load_shape[20];
        // |bias| <= 3 sigma / sqrt(n_samples), loosened for the clipping.
        assert!(
            (mean - nominal).abs() <= 3.0 * model.sigma / (400f64).sqrt() + 1e-3,
            "mean {mean} nominal {nominal}"
        );
        for i in 1..tree.node_count() {
            assert!(tree.disturbance(i).w_d.iter().all(|v| *v <= 0.0));
        }
    }

    #[test]
    fn plant_step_shares_imbalance() {
        let s = spec();
        let v = AppliedInput {
            u_t: vec![0.5],
            u_s: vec![0.2],
            u_r: vec![1.0],
            delta: vec![1.0],
        };
        let w = Disturbance { w_r: vec![0.8], w_d: vec![-1.6] };
        let step = plant_step(&s, &v, &w, &[2.0]).unwrap();
        assert_abs_diff_eq!(step.p_r[0], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(step.mu, 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(step.p_t[0], 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(step.p_s[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(step.balance_residual, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step.x_next[0], 2.0 - 0.5 * 0.25, epsilon = 1e-12);
        assert!(!step.saturated);
    }

    #[test]
    fn plant_step_with_unit_off() {
        let s = spec();
        let v = AppliedInput {
            u_t: vec![0.0],
            u_s: vec![0.2],
            u_r: vec![1.0],
            delta: vec![0.0],
        };
        let w = Disturbance { w_r: vec![0.8], w_d: vec![-1.6] };
        let step = plant_step(&s, &v, &w, &[2.0]).unwrap();
        assert_abs_diff_eq!(step.mu, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(step.p_t[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(step.p_s[0], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn metrics_counts_switching_and_violations() {
        let s = spec();
        let mk = |k: usize, delta: f64, viol: f64| StepRecord {
            k,
            x: vec![2.0],
            u_t: vec![0.0],
            u_s: vec![0.0],
            u_r: vec![0.0],
            delta: vec![delta],
            w_r: vec![0.0],
            w_d: vec![0.0],
            p_t: vec![0.0],
            p_s: vec![0.0],
            p_r: vec![0.5],
            mu: 0.0,
            cost: 1.0,
            viol_upper: vec![viol],
            viol_lower: vec![0.0],
            solve_time_s: 0.1,
            bnb_nodes: 1,
            status: SolveStatus::Optimal,
            predicted_stage1: vec![],
            saturated: false,
            balance_residual: 0.0,
            fallback: false,
        };
        let trace = SimulationTrace {
            steps: vec![mk(0, 0.0, 0.0), mk(1, 1.0, 0.2), mk(2, 1.0, 0.0), mk(3, 0.0, 0.0)],
            final_x: vec![2.0],
        };
        let report = metrics(&trace, &s, &[0.0]);
        assert_eq!(report.violations, 1);
        assert_abs_diff_eq!(report.max_violation, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(report.switching_actions, 2.0, epsilon = 1e-12);
        // Only renewables delivered energy.
        assert_abs_diff_eq!(report.renewable_share_pct, 100.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.avg_cost, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn short_noiseless_loop_is_feasible_and_books_energy() {
        let s = spec();
        let mut model = ProfileModel::case_study(11);
        model.sigma = 0.0;
        let controller =
            ControllerConfig::new(&s, Variant::Hard, 0.0, vec![1, 1, 1, 1]);
        let trace = closed_loop(&s, &model, &controller, 4).unwrap();
        assert_eq!(trace.steps.len(), 4);
        let mut ps_sum = 0.0;
        for step in &trace.steps {
            assert!(step.balance_residual.abs() <= 1e-8);
            assert!(!step.fallback);
            ps_sum += step.p_s[0];
        }
        let booked = controller.x0[0] - s.t_s * ps_sum;
        assert_abs_diff_eq!(trace.final_x[0], booked, epsilon = 1e-9);
    }

    #[test]
    fn closed_loop_deterministic() {
        let s = spec();
        let model = ProfileModel::case_study(17);
        let mut controller = ControllerConfig::new(&s, Variant::Risk, 0.5, vec![2, 1, 1]);
        controller.n_samples = 30;
        let a = closed_loop(&s, &model, &controller, 3).unwrap();
        let b = closed_loop(&s, &model, &controller, 3).unwrap();
        for (ra, rb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(ra.x, rb.x);
            assert_eq!(ra.u_s, rb.u_s);
            assert_eq!(ra.delta, rb.delta);
            assert_eq!(ra.cost.to_bits(), rb.cost.to_bits());
        }
    }
}
