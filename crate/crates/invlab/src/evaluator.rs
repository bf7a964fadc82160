//! Rollout evaluation under the paper-style test protocol: zero-initialized
//! endogenous state, a fixed number of periods with a burn-in prefix
//! excluded from the average, no terminal reward. Neural policies and
//! heuristics run through the same stepping and reward accounting, so
//! cross-policy comparisons are like for like.

use crate::datagen::{DemandTrace, Product};
use crate::envs::{self, EnvSpec, StepOut};
use crate::heuristics::{
    self, base_stock_action, fit_gamma_moments, single_index_dual, vector_base_stock_action,
    GammaDist,
};
use crate::policy::PolicyParams;
use crate::trainer::StructuralConstraintSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// History window length fed to actors each period.
    pub history: usize,
    /// Total rollout periods, burn-in included.
    pub periods: usize,
    /// Leading periods excluded from the averages.
    pub burn_in: usize,
}

impl EvalProtocol {
    pub fn standard(history: usize) -> Self {
        EvalProtocol {
            history,
            periods: 520,
            burn_in: 20,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.burn_in >= self.periods {
            return Err(crate::Error::Config("burn_in must be < periods".into()));
        }
        Ok(())
    }
}

/// Per-rollout actor state produced by [`Actor::begin_rollout`].
pub trait RolloutActor {
    /// Produce the action for period `t`. `window` is the demand history
    /// (length `history`, ending just before `t`), `endo` the current
    /// endogenous vector. Writes `action_dim` values into `out`.
    fn act(&mut self, t: usize, window: &[f64], endo: &[f64], out: &mut [f64]);
}

/// A policy that can be rolled through an environment. Implementations may
/// precompute per-product work (e.g. conv encodings over the whole trace).
pub trait Actor: Sync {
    fn name(&self) -> &str;
    fn action_dim(&self) -> usize;
    fn begin_rollout(
        &self,
        product: &Product,
        trace: &DemandTrace,
        protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_>;
}

#[derive(Debug, Clone, Serialize)]
pub struct ProductEval {
    pub product_id: u64,
    pub avg_reward: f64,
    pub alpha: f64,
    pub alpha_demand: f64,
    pub beta: f64,
    pub beta_demand: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ServiceLevels {
    /// P(no stockout) over product-periods.
    pub alpha: f64,
    /// Demand-weighted alpha.
    pub alpha_demand: f64,
    /// Fill rate 1 - unmet/total demand.
    pub beta: f64,
    pub beta_demand: f64,
    /// Set when total demand was zero and beta defaulted to 1.
    pub beta_undefined: bool,
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    /// Mean over products of the per-product average per-period reward.
    pub mean_reward: f64,
    pub per_product: Vec<ProductEval>,
    pub service: ServiceLevels,
}

struct ProductAccum {
    product_id: u64,
    reward_sum: f64,
    periods: usize,
    hits: usize,
    demand_hit_sum: f64,
    demand_sum: f64,
    unmet_sum: f64,
}

/// Roll `actor` through `env` on every product and average rewards after the
/// burn-in. The mean is accumulated in ascending product-id order, so the
/// result is invariant to the ordering of `products` and to thread count.
pub fn evaluate(
    actor: &dyn Actor,
    env: &EnvSpec,
    products: &[Product],
    traces: &[DemandTrace],
    protocol: &EvalProtocol,
) -> crate::Result<EvalResult> {
    protocol.validate()?;
    env.validate()?;
    if products.len() != traces.len() {
        return Err(crate::Error::Usage("products/traces length mismatch".into()));
    }
    let need = protocol.history + protocol.periods;
    if let Some(t) = traces.iter().find(|t| t.len() < need) {
        return Err(crate::Error::Usage(format!(
            "trace for product {} has {} periods, protocol needs {need}",
            t.product_id,
            t.len()
        )));
    }
    if actor.action_dim() != env.action_dim() {
        return Err(crate::Error::Usage(format!(
            "actor produces {} actions, env needs {}",
            actor.action_dim(),
            env.action_dim()
        )));
    }

    let mut accums: Vec<ProductAccum> = products
        .par_iter()
        .zip(traces)
        .map(|(product, trace)| rollout_one(actor, env, product, trace, protocol))
        .collect();

    // canonical order: ascending product id
    accums.sort_by_key(|a| a.product_id);

    let eval_periods = (protocol.periods - protocol.burn_in) as f64;
    let mut per_product = Vec::with_capacity(accums.len());
    let mut reward_total = 0.0;
    let mut hits_total = 0usize;
    let mut periods_total = 0usize;
    let mut demand_total = 0.0;
    let mut demand_hit_total = 0.0;
    let mut unmet_total = 0.0;
    for a in &accums {
        let avg = a.reward_sum / eval_periods;
        reward_total += avg;
        hits_total += a.hits;
        periods_total += a.periods;
        demand_total += a.demand_sum;
        demand_hit_total += a.demand_hit_sum;
        unmet_total += a.unmet_sum;
        let (beta, _) = fill_rate(a.unmet_sum, a.demand_sum);
        per_product.push(ProductEval {
            product_id: a.product_id,
            avg_reward: avg,
            alpha: a.hits as f64 / a.periods as f64,
            alpha_demand: if a.demand_sum > 0.0 { a.demand_hit_sum / a.demand_sum } else { 1.0 },
            beta,
            beta_demand: beta, // per-product demand weighting equals beta
        });
    }
    let (beta, beta_undefined) = fill_rate(unmet_total, demand_total);
    let service = ServiceLevels {
        alpha: hits_total as f64 / periods_total.max(1) as f64,
        alpha_demand: if demand_total > 0.0 { demand_hit_total / demand_total } else { 1.0 },
        beta,
        beta_demand: beta,
        beta_undefined,
    };
    Ok(EvalResult {
        mean_reward: reward_total / accums.len().max(1) as f64,
        per_product,
        service,
    })
}

fn fill_rate(unmet: f64, demand: f64) -> (f64, bool) {
    if demand > 0.0 {
        (1.0 - unmet / demand, false)
    } else {
        (1.0, true)
    }
}

fn rollout_one(
    actor: &dyn Actor,
    env: &EnvSpec,
    product: &Product,
    trace: &DemandTrace,
    protocol: &EvalProtocol,
) -> ProductAccum {
    let history = protocol.history;
    let mut state = actor.begin_rollout(product, trace, protocol);
    let mut endo = vec![0.0; env.endo_dim()];
    let mut actions = vec![0.0; env.action_dim()];
    let mut acc = ProductAccum {
        product_id: product.id,
        reward_sum: 0.0,
        periods: 0,
        hits: 0,
        demand_hit_sum: 0.0,
        demand_sum: 0.0,
        unmet_sum: 0.0,
    };
    for t in 0..protocol.periods {
        let window = &trace.demands[t..history + t];
        state.act(t, window, &endo, &mut actions);
        let demand = trace.demands[history + t];
        let out: StepOut<f64> = envs::step_pure(env, &endo, &actions, demand, &product.econ);
        if t >= protocol.burn_in {
            acc.reward_sum += out.reward;
            acc.periods += 1;
            acc.demand_sum += demand;
            acc.unmet_sum += (demand - out.available).max(0.0);
            if demand <= out.available {
                acc.hits += 1;
                acc.demand_hit_sum += demand;
            }
        }
        endo = out.endo;
    }
    acc
}

// ---------------------------------------------------------------------------
// Actors
// ---------------------------------------------------------------------------

/// Neural policy actor. Encodes each product's full trace once per rollout
/// and reads the column at the decision position each period, which is
/// identical to re-encoding the window (the receptive field never exceeds
/// the history window).
pub struct NeuralActor<'p> {
    pub params: &'p PolicyParams,
    pub env: EnvSpec,
    name: String,
}

impl<'p> NeuralActor<'p> {
    pub fn new(params: &'p PolicyParams, env: EnvSpec, name: impl Into<String>) -> Self {
        NeuralActor {
            params,
            env,
            name: name.into(),
        }
    }
}

struct NeuralRollout<'p> {
    params: &'p PolicyParams,
    statics: Vec<f64>,
    /// Encoder rows over the whole trace, [cnn_channels][t_len].
    enc: Vec<Vec<f64>>,
    history: usize,
}

impl RolloutActor for NeuralRollout<'_> {
    fn act(&mut self, t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        let pos = self.history + t - 1;
        let col: Vec<f64> = self.enc.iter().map(|row| row[pos]).collect();
        let actions = self.params.head_from_features(&col, &self.statics, endo);
        out.copy_from_slice(&actions);
    }
}

impl Actor for NeuralActor<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn action_dim(&self) -> usize {
        self.params.config.action_dim
    }

    fn begin_rollout(
        &self,
        product: &Product,
        trace: &DemandTrace,
        protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let t_len = protocol.history + protocol.periods;
        let mut channels: Vec<&[f64]> = vec![&trace.demands[..t_len]];
        for f in &trace.features {
            channels.push(&f[..t_len]);
        }
        Box::new(NeuralRollout {
            params: self.params,
            statics: self.env.static_features(&product.econ),
            enc: self.params.encode_trace(&channels),
            history: protocol.history,
        })
    }
}

/// Omniscient newsvendor: order up to the critical quantile of the true
/// demand distribution (known (mu, nu)), recomputed once per product.
pub struct OmniscientNewsvendor;

struct FixedLevelRollout {
    level: f64,
}

impl RolloutActor for FixedLevelRollout {
    fn act(&mut self, _t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        out[0] = base_stock_action(self.level, endo[0]);
    }
}

impl Actor for OmniscientNewsvendor {
    fn name(&self) -> &str {
        "omniscient_newsvendor"
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn begin_rollout(
        &self,
        product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let (shape, scale) = product.gamma_params();
        let dist = GammaDist::new(shape, scale);
        let level = heuristics::newsvendor_level(&product.econ, &dist).unwrap_or(0.0);
        Box::new(FixedLevelRollout { level })
    }
}

/// Non-omniscient newsvendor: refits a Gamma to the trailing window by the
/// method of moments every period, then orders up to its critical quantile.
pub struct NonOmniscientNewsvendor;

struct RefittingRollout {
    econ: crate::envs::EconStatics,
}

impl RolloutActor for RefittingRollout {
    fn act(&mut self, _t: usize, window: &[f64], endo: &[f64], out: &mut [f64]) {
        let fit = fit_gamma_moments(window);
        let level = heuristics::newsvendor_level(&self.econ, &fit.dist).unwrap_or(0.0);
        out[0] = base_stock_action(level, endo[0]);
    }
}

impl Actor for NonOmniscientNewsvendor {
    fn name(&self) -> &str {
        "non_omniscient_newsvendor"
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn begin_rollout(
        &self,
        product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        Box::new(RefittingRollout { econ: product.econ })
    }
}

/// Simple base-stock on the inventory position for the lead-time env.
pub struct LeadTimeBaseStock {
    pub lead_time: usize,
}

struct PositionLevelRollout {
    level: f64,
}

impl RolloutActor for PositionLevelRollout {
    fn act(&mut self, _t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        let position: f64 = endo.iter().sum();
        out[0] = base_stock_action(self.level, position);
    }
}

impl Actor for LeadTimeBaseStock {
    fn name(&self) -> &str {
        "base_stock"
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn begin_rollout(
        &self,
        product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let (shape, scale) = product.gamma_params();
        let dist = GammaDist::new(shape, scale);
        let level =
            heuristics::leadtime_base_stock(&product.econ, &dist, self.lead_time).unwrap_or(0.0);
        Box::new(PositionLevelRollout { level })
    }
}

/// Vector base-stock for the lead-time env.
pub struct LeadTimeVectorBaseStock {
    pub lead_time: usize,
}

struct VectorLevelRollout {
    levels: Vec<f64>,
}

impl RolloutActor for VectorLevelRollout {
    fn act(&mut self, _t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        out[0] = vector_base_stock_action(&self.levels, endo);
    }
}

impl Actor for LeadTimeVectorBaseStock {
    fn name(&self) -> &str {
        "vector_base_stock"
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn begin_rollout(
        &self,
        product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let (shape, scale) = product.gamma_params();
        let dist = GammaDist::new(shape, scale);
        let levels = heuristics::leadtime_vector_base_stock(&product.econ, &dist, self.lead_time)
            .unwrap_or_else(|_| vec![0.0; self.lead_time + 1]);
        Box::new(VectorLevelRollout { levels })
    }
}

/// Base-stock on total inventory for the perishable env, either at the
/// standard (non-perishing) newsvendor level or at externally supplied
/// per-product levels (e.g. from a golden-section search).
pub struct PerishableBaseStock {
    name: String,
    /// None: standard newsvendor level from the true distribution.
    pub levels_by_id: Option<std::collections::HashMap<u64, f64>>,
}

impl PerishableBaseStock {
    pub fn standard() -> Self {
        PerishableBaseStock {
            name: "std_base_stock".into(),
            levels_by_id: None,
        }
    }

    pub fn with_levels(name: impl Into<String>, levels: std::collections::HashMap<u64, f64>) -> Self {
        PerishableBaseStock {
            name: name.into(),
            levels_by_id: Some(levels),
        }
    }
}

struct TotalLevelRollout {
    level: f64,
}

impl RolloutActor for TotalLevelRollout {
    fn act(&mut self, _t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        // endo is the cumulative w vector; the last entry is total on-hand
        out[0] = base_stock_action(self.level, *endo.last().unwrap());
    }
}

impl Actor for PerishableBaseStock {
    fn name(&self) -> &str {
        &self.name
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn begin_rollout(
        &self,
        product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let level = match &self.levels_by_id {
            Some(map) => *map.get(&product.id).unwrap_or(&0.0),
            None => {
                let (shape, scale) = product.gamma_params();
                let dist = GammaDist::new(shape, scale);
                heuristics::newsvendor_level(&product.econ, &dist).unwrap_or(0.0)
            }
        };
        Box::new(TotalLevelRollout { level })
    }
}

/// Single-index dual base-stock with per-product levels.
pub struct SingleIndexDualActor {
    pub levels_by_id: std::collections::HashMap<u64, (f64, f64)>,
}

struct DualLevelRollout {
    s_e: f64,
    s_r: f64,
}

impl RolloutActor for DualLevelRollout {
    fn act(&mut self, _t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        let position: f64 = endo.iter().sum();
        let (q_e, q_r) = single_index_dual(self.s_e, self.s_r, position);
        out[0] = q_e;
        out[1] = q_r;
    }
}

impl Actor for SingleIndexDualActor {
    fn name(&self) -> &str {
        "single_index_dual_base_stock"
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn begin_rollout(
        &self,
        product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let (s_e, s_r) = *self.levels_by_id.get(&product.id).unwrap_or(&(0.0, 0.0));
        Box::new(DualLevelRollout { s_e, s_r })
    }
}

/// Predict-then-optimize: a quantile forecaster plus the critical-ratio
/// order-up-to rule.
pub struct PtoActor<'p> {
    pub forecaster: &'p PolicyParams,
}

struct PtoRollout<'p> {
    forecaster: &'p PolicyParams,
    enc: Vec<Vec<f64>>,
    ratio: f64,
    history: usize,
}

impl RolloutActor for PtoRollout<'_> {
    fn act(&mut self, t: usize, _window: &[f64], endo: &[f64], out: &mut [f64]) {
        let pos = self.history + t - 1;
        let col: Vec<f64> = self.enc.iter().map(|row| row[pos]).collect();
        let preds = self.forecaster.head_from_features(&col, &[], &[]);
        out[0] = heuristics::pto_decide(
            &preds,
            &self.forecaster.config.quantile_levels,
            self.ratio,
            endo[0],
        );
    }
}

impl Actor for PtoActor<'_> {
    fn name(&self) -> &str {
        "predict_then_optimize"
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn begin_rollout(
        &self,
        product: &Product,
        trace: &DemandTrace,
        protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        let t_len = protocol.history + protocol.periods;
        let mut channels: Vec<&[f64]> = vec![&trace.demands[..t_len]];
        for f in &trace.features {
            channels.push(&f[..t_len]);
        }
        let ratio =
            heuristics::critical_ratio(&product.econ, heuristics::RatioMode::Standard).unwrap_or(0.5);
        Box::new(PtoRollout {
            forecaster: self.forecaster,
            enc: self.forecaster.encode_trace(&channels),
            ratio,
            history: protocol.history,
        })
    }
}

/// Orders a constant quantity every period (0 = do nothing). Test utility.
pub struct ConstantActor {
    pub quantity: f64,
    pub actions: usize,
}

struct ConstantRollout {
    quantity: f64,
}

impl RolloutActor for ConstantRollout {
    fn act(&mut self, _t: usize, _window: &[f64], _endo: &[f64], out: &mut [f64]) {
        out[0] = self.quantity;
        for v in out.iter_mut().skip(1) {
            *v = 0.0;
        }
    }
}

impl Actor for ConstantActor {
    fn name(&self) -> &str {
        "constant"
    }

    fn action_dim(&self) -> usize {
        self.actions
    }

    fn begin_rollout(
        &self,
        _product: &Product,
        _trace: &DemandTrace,
        _protocol: &EvalProtocol,
    ) -> Box<dyn RolloutActor + '_> {
        Box::new(ConstantRollout { quantity: self.quantity })
    }
}

// ---------------------------------------------------------------------------
// Probing
// ---------------------------------------------------------------------------

/// Action produced at inventory level zero: the implied order-up-to level of
/// a policy at time `t`.
pub fn probe_order_up_to(
    actor: &dyn Actor,
    env: &EnvSpec,
    product: &Product,
    trace: &DemandTrace,
    protocol: &EvalProtocol,
    t: usize,
) -> f64 {
    let mut state = actor.begin_rollout(product, trace, protocol);
    let endo = vec![0.0; env.endo_dim()];
    let mut out = vec![0.0; env.action_dim()];
    let window = &trace.demands[t..protocol.history + t];
    state.act(t, window, &endo, &mut out);
    out[0]
}

/// Dense probe over one or two endogenous dimensions at a fixed time.
#[derive(Debug, Clone)]
pub struct ProbeGrid {
    pub time_index: usize,
    /// (endo slot, grid values); one or two entries.
    pub dims: Vec<(usize, Vec<f64>)>,
    /// Base values for the remaining endo slots.
    pub fixed: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    /// One coordinate tuple per grid point, row-major over `dims`.
    pub coords: Vec<Vec<f64>>,
    /// `actions[a][point]` for each action head `a`.
    pub actions: Vec<Vec<f64>>,
}

pub fn probe_grid(
    actor: &dyn Actor,
    env: &EnvSpec,
    product: &Product,
    trace: &DemandTrace,
    protocol: &EvalProtocol,
    grid: &ProbeGrid,
) -> crate::Result<ProbeResult> {
    if grid.dims.is_empty() || grid.dims.len() > 2 {
        return Err(crate::Error::Usage("probe grid needs 1 or 2 varied dims".into()));
    }
    if grid.fixed.len() != env.endo_dim() {
        return Err(crate::Error::Usage("probe fixed vector must have endo_dim entries".into()));
    }
    if grid.dims.iter().any(|(slot, vals)| *slot >= env.endo_dim() || vals.is_empty()) {
        return Err(crate::Error::Usage("probe grid dim out of range or empty".into()));
    }
    let mut state = actor.begin_rollout(product, trace, protocol);
    let window = &trace.demands[grid.time_index..protocol.history + grid.time_index];
    let mut coords = Vec::new();
    let mut actions: Vec<Vec<f64>> = vec![Vec::new(); env.action_dim()];
    let mut out = vec![0.0; env.action_dim()];
    let outer = &grid.dims[0];
    let inner = grid.dims.get(1);
    for &v0 in &outer.1 {
        let inner_vals: &[f64] = inner.map(|(_, v)| v.as_slice()).unwrap_or(&[0.0]);
        for (j, &v1) in inner_vals.iter().enumerate() {
            let mut endo = grid.fixed.clone();
            endo[outer.0] = v0;
            let mut coord = vec![v0];
            if let Some((slot, _)) = inner {
                endo[*slot] = v1;
                coord.push(v1);
            } else if j > 0 {
                unreachable!();
            }
            state.act(grid.time_index, window, &endo, &mut out);
            coords.push(coord);
            for (a, val) in out.iter().enumerate() {
                actions[a].push(*val);
            }
        }
    }
    Ok(ProbeResult { coords, actions })
}

/// A policy state for calibration probing.
#[derive(Debug, Clone)]
pub struct PolicyState {
    pub endo: Vec<f64>,
}

/// Mean squared violation of each structural constraint family over a set of
/// states, using the same finite-difference directional-derivative estimator
/// the trainer penalizes.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    /// Mean of max(0, g_i)^2 per direction (monotone-decreasing family).
    pub monotone: Vec<f64>,
    /// Mean of max(0, -g_i - 1)^2 per direction (slope floor family).
    pub slope_floor: Vec<f64>,
    /// Mean of max(0, g_newer - g_older)^2 per ordered pair.
    pub ordering: Vec<f64>,
}

impl CalibrationReport {
    pub fn monotone_mean(&self) -> f64 {
        mean(&self.monotone)
    }
    pub fn slope_floor_mean(&self) -> f64 {
        mean(&self.slope_floor)
    }
    pub fn ordering_mean(&self) -> f64 {
        mean(&self.ordering)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// `action` maps an endogenous vector to the constrained action component.
pub fn calibration_report(
    action: &dyn Fn(&[f64]) -> f64,
    states: &[PolicyState],
    constraints: &StructuralConstraintSet,
    delta: f64,
) -> CalibrationReport {
    assert!(delta > 0.0, "usage error: delta must be positive");
    assert!(!states.is_empty(), "usage error: no states to calibrate on");
    let dirs = &constraints.directions;
    let mut monotone = vec![0.0; dirs.len()];
    let mut slope_floor = vec![0.0; dirs.len()];
    let n_pairs = dirs.len() * (dirs.len().saturating_sub(1)) / 2;
    let mut ordering = vec![0.0; n_pairs];
    for state in states {
        let base = action(&state.endo);
        let slopes: Vec<f64> = dirs
            .iter()
            .map(|dir| {
                let mut bumped = state.endo.clone();
                for (v, d) in bumped.iter_mut().zip(dir) {
                    *v += delta * d;
                }
                (action(&bumped) - base) / delta
            })
            .collect();
        for (i, g) in slopes.iter().enumerate() {
            monotone[i] += g.max(0.0).powi(2);
            slope_floor[i] += (-g - 1.0).max(0.0).powi(2);
        }
        let mut pair = 0;
        for older in 0..slopes.len() {
            for newer in older + 1..slopes.len() {
                ordering[pair] += (slopes[newer] - slopes[older]).max(0.0).powi(2);
                pair += 1;
            }
        }
    }
    let n = states.len() as f64;
    for v in monotone.iter_mut().chain(&mut slope_floor).chain(&mut ordering) {
        *v /= n;
    }
    CalibrationReport {
        monotone,
        slope_floor,
        ordering,
    }
}

// ---------------------------------------------------------------------------
// Per-product level searches
// ---------------------------------------------------------------------------

/// Average post-burn-in reward of a single product under a fixed-level
/// base-stock actor (position = total inventory).
fn level_closure_reward(
    env: &EnvSpec,
    product: &Product,
    trace: &DemandTrace,
    protocol: &EvalProtocol,
    action: &mut dyn FnMut(&[f64], &mut [f64]),
) -> f64 {
    let mut endo = vec![0.0; env.endo_dim()];
    let mut actions = vec![0.0; env.action_dim()];
    let mut sum = 0.0;
    for t in 0..protocol.periods {
        action(&endo, &mut actions);
        let demand = trace.demands[protocol.history + t];
        let out = envs::step_pure(env, &endo, &actions, demand, &product.econ);
        if t >= protocol.burn_in {
            sum += out.reward;
        }
        endo = out.endo;
    }
    sum / (protocol.periods - protocol.burn_in) as f64
}

/// Best per-product base-stock level by golden-section search on the
/// product's own evaluation trace, bracketed by [0, standard newsvendor
/// level]. Used as the strong perishable benchmark.
pub fn best_base_stock_levels(
    env: &EnvSpec,
    products: &[Product],
    traces: &[DemandTrace],
    protocol: &EvalProtocol,
) -> std::collections::HashMap<u64, f64> {
    products
        .par_iter()
        .zip(traces)
        .map(|(p, trace)| {
            let (shape, scale) = p.gamma_params();
            let dist = GammaDist::new(shape, scale);
            let upper = heuristics::newsvendor_level(&p.econ, &dist).unwrap_or(0.0);
            let eval = |level: f64| {
                level_closure_reward(env, p, trace, protocol, &mut |endo, out| {
                    out[0] = base_stock_action(level, *endo.last().unwrap());
                })
            };
            (p.id, heuristics::best_base_stock(eval, 0.0, upper))
        })
        .collect()
}

/// Single-index dual base-stock levels: s_e in closed form at the dual
/// critical ratio, s_r by golden-section on the product's evaluation trace
/// given s_e. The search bracket is [s_e, s_e + simple-level headroom].
pub fn single_index_dual_levels(
    env: &EnvSpec,
    products: &[Product],
    traces: &[DemandTrace],
    protocol: &EvalProtocol,
) -> crate::Result<std::collections::HashMap<u64, (f64, f64)>> {
    let (expedited_lead_time, regular_lead_time, mode) = match env.kind {
        crate::envs::EnvKind::DualSourcing {
            expedited_lead_time,
            regular_lead_time,
            demand_mode,
        } => (
            expedited_lead_time,
            regular_lead_time,
            match demand_mode {
                crate::envs::DemandMode::LostSales => heuristics::RatioMode::DualLostSales,
                crate::envs::DemandMode::Backlog => heuristics::RatioMode::DualBacklog,
            },
        ),
        _ => {
            return Err(crate::Error::Usage(
                "single_index_dual_levels needs a dual-sourcing env".into(),
            ))
        }
    };
    Ok(products
        .par_iter()
        .zip(traces)
        .map(|(p, trace)| {
            let (shape, scale) = p.gamma_params();
            let dist = GammaDist::new(shape, scale);
            let s_e = heuristics::fukuda_expedited_level(&p.econ, &dist, expedited_lead_time, mode)
                .unwrap_or(0.0);
            // headroom: the (L_r + 1)-period quantile is the natural upper
            // bound on how much total position the regular source maintains
            let upper = dist
                .sum_of(regular_lead_time + 1)
                .quantile(heuristics::critical_ratio(&p.econ, mode).unwrap_or(0.5))
                .max(s_e);
            let eval = |s_r: f64| {
                level_closure_reward(env, p, trace, protocol, &mut |endo, out| {
                    let position: f64 = endo.iter().sum();
                    let (q_e, q_r) = single_index_dual(s_e, s_r, position);
                    out[0] = q_e;
                    out[1] = q_r;
                })
            };
            let s_r = heuristics::best_base_stock(eval, s_e, upper.max(s_e + 1e-9));
            (p.id, (s_e, s_r))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

/// Evaluation CSV: policy, product_id, avg_reward, alpha, beta and
/// demand-weighted variants, one row per product.
pub fn write_evaluation_csv(path: &Path, policy: &str, result: &EvalResult) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["policy", "product_id", "avg_reward", "alpha", "alpha_demand", "beta", "beta_demand"])?;
    for p in &result.per_product {
        w.write_record(&[
            policy.to_string(),
            p.product_id.to_string(),
            format!("{}", p.avg_reward),
            format!("{}", p.alpha),
            format!("{}", p.alpha_demand),
            format!("{}", p.beta),
            format!("{}", p.beta_demand),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Probe grid CSV, one file per action head: grid coordinates plus values.
pub fn write_probe_csv(dir: &Path, stem: &str, probe: &ProbeResult) -> crate::Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for (a, vals) in probe.actions.iter().enumerate() {
        let path = dir.join(format!("{stem}_action{a}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        let coord_cols = probe.coords.first().map_or(1, |c| c.len());
        let mut header: Vec<String> = (0..coord_cols).map(|i| format!("coord{i}")).collect();
        header.push("action".into());
        w.write_record(&header)?;
        for (coord, v) in probe.coords.iter().zip(vals) {
            let mut rec: Vec<String> = coord.iter().map(|c| format!("{c}")).collect();
            rec.push(format!("{v}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Benchmark summary row: levels are policy-specific (empty for neural).
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub product_id: u64,
    pub policy: String,
    pub levels: Vec<f64>,
    pub avg_reward: f64,
}

pub fn write_benchmark_csv(path: &Path, rows: &[BenchRow]) -> crate::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["product_id", "policy", "levels", "avg_reward"])?;
    for r in rows {
        let levels = r
            .levels
            .iter()
            .map(|l| format!("{l}"))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record(&[
            r.product_id.to_string(),
            r.policy.clone(),
            levels,
            format!("{}", r.avg_reward),
        ])?;
    }
    w.flush()?;
    Ok(())
}
