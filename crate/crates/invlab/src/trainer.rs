//! DirectBackprop training: roll the policy through the differentiable
//! simulator over the full horizon, accumulate the discounted reward, and
//! backpropagate it into the policy weights, one Adam step per mini-batch.
//!
//! Mini-batches are split into fixed-size shards that run forward/backward
//! in parallel on their own tapes; shard gradients are reduced in shard
//! order, so training is bit-reproducible regardless of thread count. The
//! mini-batch objective is the sum (not mean) of per-product rollout
//! rewards.
//!
//! The optional structure-informed penalty subtracts, per visited state,
//! lambda times the squared violation of directional-derivative constraints
//! on the policy (monotonicity, slope floor, age ordering). Derivatives are
//! estimated by forward differences with an extra traced forward per
//! direction, which keeps the penalty first-order differentiable in the
//! weights without nested autodiff.

use crate::autodiff::{AdamState, Array, Tape, Var};
use crate::datagen::{DemandTrace, Product};
use crate::envs::{self, EconV, EnvSpec, InitRule, StepOps, TerminalRule};
use crate::policy::{init_params, save_checkpoint, PolicyConfig, PolicyParams, PolicyVars};
use crate::rng::{tag, CounterRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Fixed shard width: determinism requires the batch decomposition to be a
/// function of the batch alone, never of the machine.
const SHARD: usize = 128;

/// Directional-derivative inequality constraints on one action component.
/// Directions are listed oldest inventory first, newest last; each direction
/// is a vector over endogenous slots describing what "one more unit" of that
/// age does to the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralConstraintSet {
    pub action_index: usize,
    pub directions: Vec<Vec<f64>>,
    /// Penalize positive slopes (ordering more as stock grows).
    pub monotone: bool,
    /// Penalize slopes below -1.
    pub slope_floor: bool,
    /// Penalize newer-inventory slopes above older-inventory slopes.
    pub ordering: bool,
}

impl StructuralConstraintSet {
    /// Lead-time pipeline: unit directions per slot; slot L-1 (the newest
    /// order) must be at least as negative as slot 0.
    pub fn lead_time(lead_time: usize) -> Self {
        let directions = (0..lead_time)
            .map(|k| {
                let mut d = vec![0.0; lead_time];
                d[k] = 1.0;
                d
            })
            .collect();
        StructuralConstraintSet {
            action_index: 0,
            directions,
            monotone: true,
            slope_floor: true,
            ordering: true,
        }
    }

    /// Perishable cumulative state: adding a unit with shelf life k bumps
    /// every w^j with j >= k, so the direction for age k is a suffix of
    /// ones. Ordered oldest (k=1) to newest (k=m-1).
    pub fn perishable(shelf_life: usize) -> Self {
        let dim = shelf_life - 1;
        let directions = (0..dim)
            .map(|k| {
                let mut d = vec![0.0; dim];
                for slot in k..dim {
                    d[slot] = 1.0;
                }
                d
            })
            .collect();
        StructuralConstraintSet {
            action_index: 0,
            directions,
            monotone: true,
            slope_floor: true,
            ordering: true,
        }
    }

    pub fn validate(&self, endo_dim: usize, action_dim: usize) -> crate::Result<()> {
        if self.action_index >= action_dim {
            return Err(crate::Error::Config("constraint action index out of range".into()));
        }
        if self.directions.is_empty() || self.directions.iter().any(|d| d.len() != endo_dim) {
            return Err(crate::Error::Config(
                "constraint directions must be nonempty vectors over the endo slots".into(),
            ));
        }
        Ok(())
    }
}

/// Penalty estimator mode. Training supports the finite-difference
/// estimator; the exact forward-mode derivative is available for calibration
/// reports and estimator-accuracy checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    FiniteDiff { delta: f64 },
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub lambda: f64,
    pub mode: PenaltyMode,
    pub constraints: StructuralConstraintSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Rollout length T.
    pub horizon: usize,
    pub init_rule: InitRule,
    pub terminal_rule: TerminalRule,
    pub penalty: Option<PenaltySpec>,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 2500,
            lr: 0.001,
            horizon: 100,
            init_rule: InitRule::UniformDemandScaled,
            terminal_rule: TerminalRule::SalvageCost,
            penalty: None,
            seed,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

/// Per-epoch training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-product per-period reward (terminal and penalty excluded).
    pub mean_reward: f64,
    /// Mean subtracted penalty per product-period (lambda included).
    pub mean_penalty: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochStats>,
}

impl TrainingCurve {
    /// Training curve CSV: epoch, mean_reward, mean_penalty, seconds.
    pub fn write_csv(&self, path: &Path) -> crate::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "mean_reward", "mean_penalty", "seconds"])?;
        for e in &self.epochs {
            w.write_record(&[
                e.epoch.to_string(),
                format!("{}", e.mean_reward),
                format!("{}", e.mean_penalty),
                format!("{}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tape-backed [`StepOps`] over per-product vectors of one shard.
struct TracedOps<'t> {
    tape: &'t mut Tape,
    batch: usize,
    zero: Option<Var>,
}

impl<'t> TracedOps<'t> {
    fn new(tape: &'t mut Tape, batch: usize) -> Self {
        TracedOps { tape, batch, zero: None }
    }
}

impl StepOps for TracedOps<'_> {
    type V = Var;
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.tape.add(a, b)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        self.tape.sub(a, b)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        self.tape.mul(a, b)
    }
    fn min(&mut self, a: Var, b: Var) -> Var {
        self.tape.minimum(a, b)
    }
    fn max(&mut self, a: Var, b: Var) -> Var {
        self.tape.maximum(a, b)
    }
    fn zero(&mut self) -> Var {
        if let Some(z) = self.zero {
            return z;
        }
        let z = self.tape.constant(Array::zeros(&[self.batch]));
        self.zero = Some(z);
        z
    }
}

struct ShardOutcome {
    grads: Vec<Array>,
    reward_sum: f64,
    penalty_sum: f64,
    loss: f64,
}

/// Quadratic structural penalty at the current batch states, lambda-scaled,
/// as a per-product vector node. `base_actions` is the untouched `[B, A]`
/// head output at this state; one extra traced head forward per direction
/// estimates each directional derivative.
#[allow(clippy::too_many_arguments)]
pub fn structural_penalty(
    tape: &mut Tape,
    vars: &PolicyVars,
    enc_t: Var,
    statics: Option<Var>,
    endo_slots: &[Var],
    base_actions: Var,
    spec: &PenaltySpec,
    batch: usize,
) -> Var {
    let delta = match spec.mode {
        PenaltyMode::FiniteDiff { delta } => delta,
        PenaltyMode::Exact => unreachable!("exact penalty mode is not trainable"),
    };
    let cons = &spec.constraints;
    let q_base = tape.select_col(base_actions, cons.action_index);
    let mut slopes: Vec<Var> = Vec::with_capacity(cons.directions.len());
    for dir in &cons.directions {
        let bumped: Vec<Var> = endo_slots
            .iter()
            .zip(dir)
            .map(|(slot, d)| {
                if *d == 0.0 {
                    *slot
                } else {
                    tape.add_scalar(*slot, delta * d)
                }
            })
            .collect();
        let endo_mat = tape.concat_cols(&bumped);
        let acts = vars.head_at(tape, enc_t, statics, Some(endo_mat));
        let q = tape.select_col(acts, cons.action_index);
        let diff = tape.sub(q, q_base);
        slopes.push(tape.scale(diff, 1.0 / delta));
    }
    let mut total: Option<Var> = None;
    let add_term = |tape: &mut Tape, total: &mut Option<Var>, term: Var| {
        let sq = tape.mul(term, term);
        *total = Some(match *total {
            Some(acc) => tape.add(acc, sq),
            None => sq,
        });
    };
    for g in &slopes {
        if cons.monotone {
            let viol = tape.relu(*g);
            add_term(tape, &mut total, viol);
        }
        if cons.slope_floor {
            let neg = tape.scale(*g, -1.0);
            let shifted = tape.add_scalar(neg, -1.0);
            let viol = tape.relu(shifted);
            add_term(tape, &mut total, viol);
        }
    }
    if cons.ordering {
        for older in 0..slopes.len() {
            for newer in older + 1..slopes.len() {
                let diff = tape.sub(slopes[newer], slopes[older]);
                let viol = tape.relu(diff);
                add_term(tape, &mut total, viol);
            }
        }
    }
    match total {
        Some(t) => tape.scale(t, spec.lambda),
        None => tape.constant(Array::zeros(&[batch])),
    }
}

struct ShardInputs<'a> {
    env: &'a EnvSpec,
    products: Vec<&'a Product>,
    traces: Vec<&'a DemandTrace>,
    init_endo: Vec<Vec<f64>>,
    history: usize,
    horizon: usize,
}

fn lift_econ(tape: &mut Tape, products: &[&Product]) -> EconV<Var> {
    let mut field = |f: fn(&crate::envs::EconStatics) -> f64| {
        let vals: Vec<f64> = products.iter().map(|p| f(&p.econ)).collect();
        tape.constant(Array::from_vec(vals, &[products.len()]))
    };
    EconV {
        price: field(|e| e.price),
        cost: field(|e| e.cost),
        holding: field(|e| e.holding),
        penalty: field(|e| e.penalty),
        expedited_cost: field(|e| e.expedited_cost),
        regular_cost: field(|e| e.regular_cost),
        return_value: field(|e| e.return_value),
    }
}

/// Forward + backward over one shard: the full T-period rollout on a fresh
/// tape. Returns gradients in canonical tensor order.
fn shard_pass(
    params: &PolicyParams,
    inputs: &ShardInputs,
    cfg: &TrainConfig,
) -> ShardOutcome {
    let b = inputs.products.len();
    let h = inputs.history;
    let t_len = h + inputs.horizon;
    let cfg_pol = &params.config;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);

    // exogenous series: [B, F, H+T]
    let mut xdata = Vec::with_capacity(b * cfg_pol.ts_features * t_len);
    for trace in &inputs.traces {
        xdata.extend_from_slice(&trace.demands[..t_len]);
        for f in &trace.features {
            xdata.extend_from_slice(&f[..t_len]);
        }
    }
    let x_ts = tape.constant(Array::from_vec(xdata, &[b, cfg_pol.ts_features, t_len]));

    let statics = if cfg_pol.static_features > 0 {
        let mut sdata = Vec::with_capacity(b * cfg_pol.static_features);
        for p in &inputs.products {
            sdata.extend_from_slice(&inputs.env.static_features(&p.econ));
        }
        Some(tape.constant(Array::from_vec(sdata, &[b, cfg_pol.static_features])))
    } else {
        None
    };

    let econ = lift_econ(&mut tape, &inputs.products);
    let enc = vars.encode(&mut tape, x_ts);

    let endo_dim = inputs.env.endo_dim();
    let mut endo_slots: Vec<Var> = (0..endo_dim)
        .map(|k| {
            let vals: Vec<f64> = inputs.init_endo.iter().map(|e| e[k]).collect();
            tape.constant(Array::from_vec(vals, &[b]))
        })
        .collect();

    let gamma = inputs.env.gamma;
    let mut reward_total: Option<Var> = None;
    let mut penalty_total: Option<Var> = None;
    for t in 0..inputs.horizon {
        let enc_t = tape.select_time(enc, h + t - 1);
        let endo_mat = tape.concat_cols(&endo_slots);
        let actions = vars.head_at(&mut tape, enc_t, statics, Some(endo_mat));
        let action_cols: Vec<Var> = (0..inputs.env.action_dim())
            .map(|a| tape.select_col(actions, a))
            .collect();
        let demand_vals: Vec<f64> = inputs.traces.iter().map(|tr| tr.demands[h + t]).collect();
        let demand = tape.constant(Array::from_vec(demand_vals, &[b]));

        let out = {
            let mut ops = TracedOps::new(&mut tape, b);
            envs::step(&mut ops, inputs.env, &endo_slots, &action_cols, demand, &econ)
        };
        let disc = gamma.powi(t as i32);
        let r = if disc == 1.0 { out.reward } else { tape.scale(out.reward, disc) };
        reward_total = Some(match reward_total {
            Some(acc) => tape.add(acc, r),
            None => r,
        });

        if let Some(pen) = &cfg.penalty {
            let p = structural_penalty(
                &mut tape, &vars, enc_t, statics, &endo_slots, actions, pen, b,
            );
            let p = if disc == 1.0 { p } else { tape.scale(p, disc) };
            penalty_total = Some(match penalty_total {
                Some(acc) => tape.add(acc, p),
                None => p,
            });
        }

        endo_slots = out.endo;
    }

    let reward_total = reward_total.expect("horizon must be >= 1");
    let reward_sum_node = tape.sum_all(reward_total);
    let reward_sum = tape.value(reward_sum_node).item();

    let term = {
        let mut ops = TracedOps::new(&mut tape, b);
        envs::terminal_reward(&mut ops, cfg.terminal_rule, &endo_slots, &econ)
    };
    let term_disc = gamma.powi(inputs.horizon as i32);
    let term = if term_disc == 1.0 { term } else { tape.scale(term, term_disc) };
    let objective = tape.add(reward_total, term);
    let mut objective_sum = tape.sum_all(objective);

    let penalty_sum = if let Some(p) = penalty_total {
        let psum = tape.sum_all(p);
        let val = tape.value(psum).item();
        let neg = tape.scale(psum, -1.0);
        objective_sum = tape.add(objective_sum, neg);
        val
    } else {
        0.0
    };

    let loss = tape.scale(objective_sum, -1.0);
    let loss_val = tape.value(loss).item();
    tape.backward(loss);
    let grads = vars.all().iter().map(|v| tape.grad(*v)).collect();
    ShardOutcome {
        grads,
        reward_sum,
        penalty_sum,
        loss: loss_val,
    }
}

fn reduce_shard_grads(shards: &[ShardOutcome], like: &PolicyParams) -> Vec<Array> {
    let mut total: Vec<Array> = like
        .tensors()
        .iter()
        .map(|(_, a)| Array::zeros(a.dims()))
        .collect();
    for shard in shards {
        for (acc, g) in total.iter_mut().zip(&shard.grads) {
            let av = acc.values_mut();
            for (x, y) in av.iter_mut().zip(g.values()) {
                *x += y;
            }
        }
    }
    total
}

fn validate_train_inputs(
    env: &EnvSpec,
    products: &[Product],
    traces: &[DemandTrace],
    policy_cfg: &PolicyConfig,
    cfg: &TrainConfig,
) -> crate::Result<()> {
    env.validate()?;
    policy_cfg.validate()?;
    if products.is_empty() || products.len() != traces.len() {
        return Err(crate::Error::Usage("need equally many products and traces".into()));
    }
    let need = policy_cfg.history + cfg.horizon;
    if let Some(t) = traces.iter().find(|t| t.len() < need) {
        return Err(crate::Error::Usage(format!(
            "trace for product {} has {} periods, training needs {need}",
            t.product_id,
            t.len()
        )));
    }
    if traces.iter().any(|t| t.channels() != policy_cfg.ts_features) {
        return Err(crate::Error::Usage("trace channel count != policy ts_features".into()));
    }
    if cfg.batch_size == 0 || cfg.horizon == 0 {
        return Err(crate::Error::Config("batch_size and horizon must be >= 1".into()));
    }
    if cfg.lr <= 0.0 {
        return Err(crate::Error::Config("learning rate must be positive".into()));
    }
    if let Some(pen) = &cfg.penalty {
        pen.constraints.validate(env.endo_dim(), env.action_dim())?;
        if pen.lambda < 0.0 {
            return Err(crate::Error::Config("penalty lambda must be >= 0".into()));
        }
        match pen.mode {
            PenaltyMode::FiniteDiff { delta } if delta > 0.0 => {}
            PenaltyMode::FiniteDiff { .. } => {
                return Err(crate::Error::Config("penalty delta must be > 0".into()));
            }
            PenaltyMode::Exact => {
                return Err(crate::Error::Config(
                    "exact penalty mode is for calibration reports; train with finite_diff".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Train a control policy end-to-end on historical traces.
pub fn train(
    env: &EnvSpec,
    products: &[Product],
    traces: &[DemandTrace],
    policy_cfg: &PolicyConfig,
    cfg: &TrainConfig,
) -> crate::Result<(PolicyParams, TrainingCurve)> {
    validate_train_inputs(env, products, traces, policy_cfg, cfg)?;
    if policy_cfg.head_mode != crate::policy::HeadMode::Control {
        return Err(crate::Error::Usage("train() needs a control-mode policy".into()));
    }
    if policy_cfg.static_features != env.static_dim()
        || policy_cfg.endo_dim != env.endo_dim()
        || policy_cfg.action_dim != env.action_dim()
    {
        return Err(crate::Error::Config(format!(
            "policy dims (S={}, E={}, A={}) do not match env (S={}, E={}, A={})",
            policy_cfg.static_features,
            policy_cfg.endo_dim,
            policy_cfg.action_dim,
            env.static_dim(),
            env.endo_dim(),
            env.action_dim()
        )));
    }

    let mut params = init_params(policy_cfg, cfg.seed)?;
    let tensor_refs: Vec<&Array> = params.tensors().iter().map(|(_, a)| *a).collect();
    let mut adam = AdamState::new(&tensor_refs, cfg.lr);
    let mut curve = TrainingCurve::default();
    let mut order: Vec<usize> = (0..products.len()).collect();
    let mut shuffle_rng = CounterRng::new(cfg.seed, &[tag("shuffle")]);
    let horizon = cfg.horizon;
    let history = policy_cfg.history;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut reward_sum = 0.0;
        let mut penalty_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let shards: Vec<Vec<usize>> = batch.chunks(SHARD).map(|c| c.to_vec()).collect();
            let outcomes: Vec<ShardOutcome> = shards
                .par_iter()
                .map(|shard| {
                    let shard_products: Vec<&Product> = shard.iter().map(|&i| &products[i]).collect();
                    let shard_traces: Vec<&DemandTrace> = shard.iter().map(|&i| &traces[i]).collect();
                    let init_endo: Vec<Vec<f64>> = shard
                        .iter()
                        .map(|&i| {
                            let mut rng = CounterRng::new(
                                cfg.seed,
                                &[tag("init"), epoch as u64, products[i].id],
                            );
                            envs::init_endogenous(
                                env,
                                cfg.init_rule,
                                &traces[i].demands[..history],
                                &mut rng,
                            )
                        })
                        .collect();
                    shard_pass(
                        &params,
                        &ShardInputs {
                            env,
                            products: shard_products,
                            traces: shard_traces,
                            init_endo,
                            history,
                            horizon,
                        },
                        cfg,
                    )
                })
                .collect();
            if outcomes.iter().any(|o| !o.loss.is_finite()) {
                return Err(crate::Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let grads = reduce_shard_grads(&outcomes, &params);
            adam.step(&mut params.tensors_mut(), &grads);
            // the action clamp maps NaN to 0, so diverged weights may not
            // show up in the loss; catch them at the source
            if params.tensors().iter().any(|(_, a)| !a.all_finite()) {
                return Err(crate::Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            reward_sum += outcomes.iter().map(|o| o.reward_sum).sum::<f64>();
            penalty_sum += outcomes.iter().map(|o| o.penalty_sum).sum::<f64>();
        }
        let denom = (products.len() * horizon) as f64;
        curve.epochs.push(EpochStats {
            epoch,
            mean_reward: reward_sum / denom,
            mean_penalty: penalty_sum / denom,
            seconds: start.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(cfg, epoch, &params)?;
    }
    Ok((params, curve))
}

fn maybe_checkpoint(cfg: &TrainConfig, epoch: usize, params: &PolicyParams) -> crate::Result<()> {
    if let (Some(every), Some(dir)) = (cfg.checkpoint_every, cfg.checkpoint_dir.as_ref()) {
        if every > 0 && (epoch + 1) % every == 0 {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&dir.join(format!("epoch_{:05}.json", epoch + 1)), params)?;
        }
    }
    Ok(())
}

/// Pinball-loss shard pass for the quantile forecaster: one prediction per
/// in-horizon position, each scored against the next period's demand.
fn forecaster_shard_pass(
    params: &PolicyParams,
    traces: &[&DemandTrace],
    history: usize,
    horizon: usize,
) -> ShardOutcome {
    let b = traces.len();
    let cfg_pol = &params.config;
    let t_len = history + horizon;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let mut xdata = Vec::with_capacity(b * cfg_pol.ts_features * t_len);
    for trace in traces {
        xdata.extend_from_slice(&trace.demands[..t_len]);
        for f in &trace.features {
            xdata.extend_from_slice(&f[..t_len]);
        }
    }
    let x_ts = tape.constant(Array::from_vec(xdata, &[b, cfg_pol.ts_features, t_len]));
    let enc = vars.encode(&mut tape, x_ts);

    let levels = cfg_pol.quantile_levels.clone();
    let mut loss_total: Option<Var> = None;
    for t in 0..horizon {
        let enc_t = tape.select_time(enc, history + t - 1);
        let preds = vars.head_at(&mut tape, enc_t, None, None);
        let target_vals: Vec<f64> = traces.iter().map(|tr| tr.demands[history + t]).collect();
        let target = tape.constant(Array::from_vec(target_vals, &[b]));
        for (j, &q) in levels.iter().enumerate() {
            let pred = tape.select_col(preds, j);
            let under = tape.sub(target, pred);
            let under_pos = tape.relu(under);
            let under_term = tape.scale(under_pos, q);
            let over = tape.sub(pred, target);
            let over_pos = tape.relu(over);
            let over_term = tape.scale(over_pos, 1.0 - q);
            let term = tape.add(under_term, over_term);
            loss_total = Some(match loss_total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
    }
    let loss_vec = loss_total.expect("horizon must be >= 1");
    let loss = tape.sum_all(loss_vec);
    let loss_val = tape.value(loss).item();
    tape.backward(loss);
    let grads = vars.all().iter().map(|v| tape.grad(*v)).collect();
    ShardOutcome {
        grads,
        reward_sum: -loss_val,
        penalty_sum: 0.0,
        loss: loss_val,
    }
}

/// Train a quantile forecaster by total pinball loss over every in-horizon
/// period. Uses the same batching, sharding, and Adam machinery as `train`.
pub fn train_forecaster(
    products: &[Product],
    traces: &[DemandTrace],
    policy_cfg: &PolicyConfig,
    cfg: &TrainConfig,
) -> crate::Result<(PolicyParams, TrainingCurve)> {
    // env is irrelevant for forecasting; validate the rest directly
    policy_cfg.validate()?;
    if policy_cfg.head_mode != crate::policy::HeadMode::Quantiles {
        return Err(crate::Error::Usage("train_forecaster() needs a quantile-mode policy".into()));
    }
    if products.is_empty() || products.len() != traces.len() {
        return Err(crate::Error::Usage("need equally many products and traces".into()));
    }
    let need = policy_cfg.history + cfg.horizon;
    if let Some(t) = traces.iter().find(|t| t.len() < need) {
        return Err(crate::Error::Usage(format!(
            "trace for product {} has {} periods, training needs {need}",
            t.product_id,
            t.len()
        )));
    }
    if traces.iter().any(|t| t.channels() != policy_cfg.ts_features) {
        return Err(crate::Error::Usage("trace channel count != policy ts_features".into()));
    }

    let mut params = init_params(policy_cfg, cfg.seed)?;
    let tensor_refs: Vec<&Array> = params.tensors().iter().map(|(_, a)| *a).collect();
    let mut adam = AdamState::new(&tensor_refs, cfg.lr);
    let mut curve = TrainingCurve::default();
    let mut order: Vec<usize> = (0..products.len()).collect();
    let mut shuffle_rng = CounterRng::new(cfg.seed, &[tag("shuffle")]);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let shards: Vec<Vec<usize>> = batch.chunks(SHARD).map(|c| c.to_vec()).collect();
            let outcomes: Vec<ShardOutcome> = shards
                .par_iter()
                .map(|shard| {
                    let shard_traces: Vec<&DemandTrace> =
                        shard.iter().map(|&i| &traces[i]).collect();
                    forecaster_shard_pass(&params, &shard_traces, policy_cfg.history, cfg.horizon)
                })
                .collect();
            if outcomes.iter().any(|o| !o.loss.is_finite()) {
                return Err(crate::Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let grads = reduce_shard_grads(&outcomes, &params);
            adam.step(&mut params.tensors_mut(), &grads);
            if params.tensors().iter().any(|(_, a)| !a.all_finite()) {
                return Err(crate::Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            loss_sum += outcomes.iter().map(|o| o.loss).sum::<f64>();
        }
        let denom = (products.len() * cfg.horizon) as f64;
        curve.epochs.push(EpochStats {
            epoch,
            mean_reward: -loss_sum / denom,
            mean_penalty: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(cfg, epoch, &params)?;
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DemandTrace, Product};
    use crate::envs::{EconStatics, EnvKind};
    use crate::policy::HeadMode;

    fn flat_product(id: u64, p: f64, c: f64, h: f64, b: f64, mu: f64) -> Product {
        Product {
            id,
            econ: EconStatics {
                price: p,
                cost: c,
                holding: h,
                penalty: b,
                expedited_cost: c,
                regular_cost: c,
                return_value: 0.0,
            },
            mu,
            nu: 0.5,
        }
    }

    fn constant_trace(id: u64, level: f64, len: usize) -> DemandTrace {
        DemandTrace {
            product_id: id,
            demands: vec![level; len],
            features: vec![],
        }
    }

    fn tiny_policy(env: &EnvSpec) -> PolicyConfig {
        let mut cfg = PolicyConfig::control(8, 1, env.static_dim(), env.endo_dim(), env.action_dim());
        cfg.dilations = vec![1, 2, 4];
        cfg.cnn_channels = 2;
        cfg.mlp_width = 8;
        cfg
    }

    /// Params rigged so the first action is exactly `slope * endo[0] + offset`
    /// for endo >= 0 (everything rides the ELU identity region).
    fn linear_in_endo(cfg: &PolicyConfig, slope: f64, offset: f64) -> PolicyParams {
        let mut params = init_params(cfg, 0).unwrap();
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        let endo_input = cfg.cnn_channels + cfg.static_features; // first endo column
        let width = cfg.mlp_width;
        // layer 0: neuron 0 reads endo[0]
        params.mlp[0].weight.values_mut()[endo_input * width] = 1.0;
        // middle layers: pass neuron 0 through
        for j in 1..cfg.mlp_layers {
            params.mlp[j].weight.values_mut()[0] = 1.0;
        }
        let out = cfg.action_dim;
        params.head.weight.values_mut()[0] = slope;
        params.head.bias.values_mut()[0] = offset;
        for a in 1..out {
            params.head.bias.values_mut()[a] = offset;
        }
        params
    }

    #[test]
    fn penalty_value_for_known_slopes() {
        let env = EnvSpec::new(EnvKind::LostSales);
        let cfg = tiny_policy(&env);
        let lambda = 10.0;
        let spec = PenaltySpec {
            lambda,
            mode: PenaltyMode::FiniteDiff { delta: 1.0 },
            constraints: StructuralConstraintSet {
                action_index: 0,
                directions: vec![vec![1.0]],
                monotone: true,
                slope_floor: true,
                ordering: true,
            },
        };
        let eval_penalty = |slope: f64| -> f64 {
            let params = linear_in_endo(&cfg, slope, 500.0);
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let x = tape.constant(Array::zeros(&[1, 1, 8]));
            let s = tape.constant(Array::zeros(&[1, cfg.static_features]));
            let endo = tape.constant(Array::from_vec(vec![3.0], &[1]));
            let enc = vars.encode(&mut tape, x);
            let enc_t = tape.select_time(enc, 7);
            let endo_mat = tape.concat_cols(&[endo]);
            let actions = vars.head_at(&mut tape, enc_t, Some(s), Some(endo_mat));
            let p = structural_penalty(&mut tape, &vars, enc_t, Some(s), &[endo], actions, &spec, 1);
            tape.value(p).values()[0]
        };
        // slope +0.5 violates monotonicity: lambda * 0.5^2
        assert!((eval_penalty(0.5) - lambda * 0.25).abs() < 1e-9);
        // slope -1 sits exactly on both boundaries: no penalty
        assert!(eval_penalty(-1.0).abs() < 1e-12);
        // slope -1.5 violates the floor: lambda * 0.5^2
        assert!((eval_penalty(-1.5) - lambda * 0.25).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_estimator_approaches_exact_jvp() {
        let env = EnvSpec::new(EnvKind::LeadTime { lead_time: 2 });
        let cfg = tiny_policy(&env);
        let params = init_params(&cfg, 42).unwrap();
        let mut rng = CounterRng::new(9, &[tag("fdvsexact")]);
        let mut err_at = |delta: f64| -> f64 {
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let enc: Vec<f64> = (0..cfg.cnn_channels).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                let statics: Vec<f64> = (0..cfg.static_features).map(|_| rng.uniform_in(0.0, 20.0)).collect();
                let endo: Vec<f64> = (0..2).map(|_| rng.uniform_in(0.0, 30.0)).collect();
                let dir = vec![1.0, 0.0];
                let (_, exact) = params.head_jvp(&enc, &statics, &endo, &dir);
                let base = params.head_from_features(&enc, &statics, &endo)[0];
                let mut bumped = endo.clone();
                bumped[0] += delta;
                let fd = (params.head_from_features(&enc, &statics, &bumped)[0] - base) / delta;
                worst = worst.max((fd - exact[0]).abs());
            }
            worst
        };
        let coarse = err_at(1.0);
        let fine = err_at(0.01);
        // forward differences have O(delta) bias away from kinks
        assert!(fine <= coarse.max(1e-6), "coarse={coarse} fine={fine}");
        assert!(coarse < 0.5, "estimator wildly off: {coarse}");
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let env = EnvSpec::new(EnvKind::LostSales);
        let pcfg = tiny_policy(&env);
        let products = vec![flat_product(0, 10.0, 2.0, 0.5, 1.0, 10.0)];
        let traces = vec![constant_trace(0, 10.0, 8 + 20)];
        let mut tcfg = TrainConfig::new(0, 7);
        tcfg.horizon = 20;
        let (params, curve) = train(&env, &products, &traces, &pcfg, &tcfg).unwrap();
        assert_eq!(params, init_params(&pcfg, 7).unwrap());
        assert!(curve.epochs.is_empty());
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let env = EnvSpec::new(EnvKind::LostSales);
        let pcfg = tiny_policy(&env);
        let products: Vec<Product> = (0..5)
            .map(|i| flat_product(i, 12.0, 3.0, 0.4, 1.2, 8.0 + i as f64))
            .collect();
        let traces: Vec<DemandTrace> = products
            .iter()
            .map(|p| crate::datagen::sample_trace(p, 8, 12, 33))
            .collect();
        let mut tcfg = TrainConfig::new(3, 11);
        tcfg.horizon = 12;
        tcfg.batch_size = 2;
        let run = || train(&env, &products, &traces, &pcfg, &tcfg).unwrap().0;
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors().iter()) {
            for (u, v) in x.values().iter().zip(y.values()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn constant_demand_converges_to_deterministic_optimum() {
        // one product, constant demand: the optimum orders exactly d each
        // period for (p - c) d = 80 per period
        let env = EnvSpec::new(EnvKind::LostSales);
        let pcfg = tiny_policy(&env);
        let products = vec![flat_product(0, 10.0, 2.0, 0.5, 1.0, 10.0)];
        let traces = vec![constant_trace(0, 10.0, 8 + 30)];
        let mut tcfg = TrainConfig::new(900, 5);
        tcfg.horizon = 30;
        tcfg.batch_size = 1;
        tcfg.lr = 0.02;
        tcfg.init_rule = InitRule::Zero;
        tcfg.terminal_rule = TerminalRule::None;
        let (_, curve) = train(&env, &products, &traces, &pcfg, &tcfg).unwrap();
        let last = &curve.epochs[curve.epochs.len() - 1];
        assert!(
            (last.mean_reward - 80.0).abs() < 0.03 * 80.0,
            "converged to {}",
            last.mean_reward
        );
    }

    #[test]
    fn exploding_lr_aborts_with_epoch_and_batch() {
        let env = EnvSpec::new(EnvKind::LostSales);
        let pcfg = tiny_policy(&env);
        let products = vec![flat_product(0, 10.0, 2.0, 0.5, 1.0, 10.0)];
        let traces = vec![constant_trace(0, 10.0, 8 + 10)];
        let mut tcfg = TrainConfig::new(10, 3);
        tcfg.horizon = 10;
        tcfg.lr = 1e160;
        let err = train(&env, &products, &traces, &pcfg, &tcfg).unwrap_err();
        match err {
            crate::Error::NonFiniteLoss { .. } => {}
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }

    #[test]
    fn exact_penalty_mode_is_rejected_for_training() {
        let env = EnvSpec::new(EnvKind::LeadTime { lead_time: 2 });
        let pcfg = {
            let mut c = tiny_policy(&env);
            c.endo_dim = 2;
            c
        };
        let products = vec![flat_product(0, 10.0, 2.0, 0.5, 1.0, 10.0)];
        let traces = vec![constant_trace(0, 10.0, 8 + 10)];
        let mut tcfg = TrainConfig::new(1, 3);
        tcfg.horizon = 10;
        tcfg.penalty = Some(PenaltySpec {
            lambda: 1.0,
            mode: PenaltyMode::Exact,
            constraints: StructuralConstraintSet::lead_time(2),
        });
        assert!(train(&env, &products, &traces, &pcfg, &tcfg).is_err());
    }

    #[test]
    fn pinball_loss_formula_via_shard_pass() {
        // zero-weight quantile net with bias vector = predictions
        let mut cfg = PolicyConfig::quantiles(8, 1, vec![0.5, 0.9]);
        cfg.dilations = vec![1, 2, 4];
        cfg.cnn_channels = 2;
        cfg.mlp_width = 4;
        let mut params = init_params(&cfg, 0).unwrap();
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        params.head.bias = Array::from_vec(vec![8.0, 8.0], &[2]);
        let trace = constant_trace(0, 10.0, 9);
        let out = forecaster_shard_pass(&params, &[&trace], 8, 1);
        // q=0.5: 0.5 * |10-8| = 1.0; q=0.9: 0.9 * (10-8) = 1.8
        assert!((out.loss - (1.0 + 1.8)).abs() < 1e-12, "loss={}", out.loss);

        // overshoot side: prediction 12, demand 10, q=0.9 -> 0.1 * 2 = 0.2
        params.head.bias = Array::from_vec(vec![12.0, 12.0], &[2]);
        let out = forecaster_shard_pass(&params, &[&trace], 8, 1);
        assert!((out.loss - (1.0 + 0.2)).abs() < 1e-12, "loss={}", out.loss);
    }

    #[test]
    fn forecaster_converges_to_constant_on_constant_demand() {
        let mut cfg = PolicyConfig::quantiles(8, 1, vec![0.1, 0.5, 0.9]);
        cfg.dilations = vec![1, 2, 4];
        cfg.cnn_channels = 2;
        cfg.mlp_width = 8;
        let products = vec![flat_product(0, 10.0, 2.0, 0.5, 1.0, 10.0)];
        let traces = vec![constant_trace(0, 25.0, 8 + 20)];
        let mut tcfg = TrainConfig::new(12000, 4);
        tcfg.horizon = 20;
        tcfg.batch_size = 1;
        tcfg.lr = 0.005;
        let (params, _) = train_forecaster(&products, &traces, &cfg, &tcfg).unwrap();
        let window = vec![25.0; 8];
        let x: Vec<&[f64]> = vec![&window];
        let preds = params.forward_quantiles(&x).unwrap();
        for p in preds {
            assert!((p - 25.0).abs() < 0.25, "pred={p}");
        }
    }
}
