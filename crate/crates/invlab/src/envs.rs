//! The five inventory environments: state layout, one-period transition,
//! per-period reward, terminal reward, and endogenous-state initializers.
//!
//! Every step is a pure function written against the [`StepOps`] trait, so
//! the same formulas run either on plain f64 (evaluation, heuristic search)
//! or on autodiff tape variables (training). `available` is the pre-demand
//! stock that appears inside the sales `min` term of each reward; service
//! level metrics are defined against it.

use crate::rng::CounterRng;
use serde::{Deserialize, Serialize};

/// Static product economics. Products that are not used in dual-sourcing or
/// returns environments carry `expedited_cost = regular_cost = cost` and
/// `return_value = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EconStatics {
    pub price: f64,
    pub cost: f64,
    pub holding: f64,
    pub penalty: f64,
    pub expedited_cost: f64,
    pub regular_cost: f64,
    pub return_value: f64,
}

impl EconStatics {
    pub fn validate(&self) -> crate::Result<()> {
        let ok = self.cost >= 0.0
            && self.cost <= self.price
            && self.return_value >= 0.0
            && self.return_value <= self.cost
            && self.regular_cost <= self.expedited_cost
            && self.holding >= 0.0
            && self.penalty >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::Error::Config(format!("invalid economics: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandMode {
    LostSales,
    Backlog,
}

/// Which simulator to run, with its structural parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvKind {
    LostSales,
    LeadTime {
        lead_time: usize,
    },
    Perishable {
        shelf_life: usize,
    },
    DualSourcing {
        expedited_lead_time: usize,
        regular_lead_time: usize,
        demand_mode: DemandMode,
    },
    Returns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    #[serde(flatten)]
    pub kind: EnvKind,
    /// Discount factor applied per period during training.
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        EnvSpec { kind, gamma: 1.0 }
    }

    pub fn validate(&self) -> crate::Result<()> {
        match self.kind {
            EnvKind::LeadTime { lead_time } if lead_time < 1 => {
                Err(crate::Error::Config("lead_time must be >= 1".into()))
            }
            EnvKind::Perishable { shelf_life } if shelf_life < 2 => {
                Err(crate::Error::Config("shelf_life must be >= 2".into()))
            }
            EnvKind::DualSourcing {
                expedited_lead_time,
                regular_lead_time,
                ..
            } if expedited_lead_time >= regular_lead_time => Err(crate::Error::Config(
                "dual sourcing requires expedited lead time < regular lead time".into(),
            )),
            _ if self.gamma <= 0.0 || self.gamma > 1.0 => {
                Err(crate::Error::Config("gamma must be in (0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    /// Length of the endogenous state vector.
    pub fn endo_dim(&self) -> usize {
        match self.kind {
            EnvKind::LostSales | EnvKind::Returns => 1,
            EnvKind::LeadTime { lead_time } => lead_time,
            EnvKind::Perishable { shelf_life } => shelf_life - 1,
            EnvKind::DualSourcing {
                regular_lead_time, ..
            } => regular_lead_time,
        }
    }

    /// Number of action components the policy must produce.
    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::LostSales | EnvKind::LeadTime { .. } | EnvKind::Perishable { .. } => 1,
            EnvKind::DualSourcing { .. } | EnvKind::Returns => 2,
        }
    }

    /// Static exogenous feature vector fed to the policy, in a fixed order.
    pub fn static_features(&self, econ: &EconStatics) -> Vec<f64> {
        match self.kind {
            EnvKind::LostSales | EnvKind::LeadTime { .. } | EnvKind::Perishable { .. } => {
                vec![econ.price, econ.cost, econ.holding, econ.penalty]
            }
            EnvKind::DualSourcing { .. } => vec![
                econ.price,
                econ.expedited_cost,
                econ.regular_cost,
                econ.holding,
                econ.penalty,
            ],
            EnvKind::Returns => vec![
                econ.price,
                econ.cost,
                econ.holding,
                econ.penalty,
                econ.return_value,
            ],
        }
    }

    pub fn static_dim(&self) -> usize {
        match self.kind {
            EnvKind::LostSales | EnvKind::LeadTime { .. } | EnvKind::Perishable { .. } => 4,
            EnvKind::DualSourcing { .. } | EnvKind::Returns => 5,
        }
    }
}

/// How the endogenous state is drawn at the start of a training rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// All slots zero (the evaluation default).
    Zero,
    /// Each slot uniform on [0, 2 * last historical demand].
    UniformDemandScaled,
    /// On-hand uniform on [0, 20 * mean of the history window]; creates the
    /// overstock states a removal policy has to learn from.
    ReturnsOverstock,
}

/// Terminal reward at the end of a training rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalRule {
    /// Salvage all on-hand and pipeline units at the purchase cost.
    SalvageCost,
    None,
}

/// Draw the initial endogenous vector. `window` is the H-period demand
/// history ending just before the rollout starts.
pub fn init_endogenous(
    spec: &EnvSpec,
    rule: InitRule,
    window: &[f64],
    rng: &mut CounterRng,
) -> Vec<f64> {
    let dim = spec.endo_dim();
    match rule {
        InitRule::Zero => vec![0.0; dim],
        InitRule::UniformDemandScaled => {
            let last = window.last().copied().unwrap_or(0.0);
            let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform_in(0.0, 2.0 * last)).collect();
            if let EnvKind::Perishable { .. } = spec.kind {
                // w must be cumulative-nondecreasing
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            v
        }
        InitRule::ReturnsOverstock => {
            let mean = if window.is_empty() {
                0.0
            } else {
                window.iter().sum::<f64>() / window.len() as f64
            };
            let mut v = vec![0.0; dim];
            v[0] = rng.uniform_in(0.0, 20.0 * mean);
            v
        }
    }
}

// ---------------------------------------------------------------------------
// Generic step formulas
// ---------------------------------------------------------------------------

/// The scalar operations a transition/reward formula needs. Implemented for
/// plain f64 and for tape variables, so each formula is written once.
pub trait StepOps {
    type V: Copy;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn min(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn max(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn zero(&mut self) -> Self::V;
}

/// f64 evaluation context.
pub struct PureOps;

impl StepOps for PureOps {
    type V = f64;
    #[inline]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline]
    fn min(&mut self, a: f64, b: f64) -> f64 {
        if a <= b {
            a
        } else {
            b
        }
    }
    #[inline]
    fn max(&mut self, a: f64, b: f64) -> f64 {
        if a >= b {
            a
        } else {
            b
        }
    }
    #[inline]
    fn zero(&mut self) -> f64 {
        0.0
    }
}

/// Economics lifted into the ops domain (plain values or per-product arrays).
#[derive(Clone, Copy)]
pub struct EconV<V> {
    pub price: V,
    pub cost: V,
    pub holding: V,
    pub penalty: V,
    pub expedited_cost: V,
    pub regular_cost: V,
    pub return_value: V,
}

impl EconV<f64> {
    pub fn from_econ(e: &EconStatics) -> Self {
        EconV {
            price: e.price,
            cost: e.cost,
            holding: e.holding,
            penalty: e.penalty,
            expedited_cost: e.expedited_cost,
            regular_cost: e.regular_cost,
            return_value: e.return_value,
        }
    }
}

/// Result of one simulated period.
pub struct StepOut<V> {
    pub endo: Vec<V>,
    pub reward: V,
    /// Pre-demand stock available for sale (the argument of the sales `min`).
    pub available: V,
    pub sales: V,
    /// Units that expired this period (perishable only).
    pub perished: Option<V>,
}

/// One period of any environment. `actions` must have `spec.action_dim()`
/// entries; `endo` must have `spec.endo_dim()`.
pub fn step<O: StepOps>(
    o: &mut O,
    spec: &EnvSpec,
    endo: &[O::V],
    actions: &[O::V],
    demand: O::V,
    econ: &EconV<O::V>,
) -> StepOut<O::V> {
    debug_assert_eq!(endo.len(), spec.endo_dim());
    debug_assert_eq!(actions.len(), spec.action_dim());
    match spec.kind {
        EnvKind::LostSales => step_lost_sales(o, endo[0], actions[0], demand, econ),
        EnvKind::LeadTime { .. } => step_lead_time(o, endo, actions[0], demand, econ),
        EnvKind::Perishable { .. } => step_perishable(o, endo, actions[0], demand, econ),
        EnvKind::DualSourcing {
            expedited_lead_time,
            demand_mode,
            ..
        } => step_dual(
            o,
            endo,
            actions[0],
            actions[1],
            demand,
            econ,
            expedited_lead_time,
            demand_mode,
        ),
        EnvKind::Returns => step_returns(o, endo[0], actions[0], actions[1], demand, econ),
    }
}

/// y' = max(y + q - d, 0);
/// R = p min(d, y+q) - c q - b max(d-y-q, 0) - h max(y+q-d, 0).
fn step_lost_sales<O: StepOps>(
    o: &mut O,
    y: O::V,
    q: O::V,
    d: O::V,
    e: &EconV<O::V>,
) -> StepOut<O::V> {
    let avail = o.add(y, q);
    let sales = o.min(d, avail);
    let zero = o.zero();
    let surplus = o.sub(avail, d);
    let leftover = o.max(surplus, zero);
    let shortfall = o.sub(d, avail);
    let lost = o.max(shortfall, zero);
    let revenue = o.mul(e.price, sales);
    let purchase = o.mul(e.cost, q);
    let penalty = o.mul(e.penalty, lost);
    let holding = o.mul(e.holding, leftover);
    let r1 = o.sub(revenue, purchase);
    let r2 = o.sub(r1, penalty);
    let reward = o.sub(r2, holding);
    StepOut {
        endo: vec![leftover],
        reward,
        available: avail,
        sales,
        perished: None,
    }
}

/// Pipeline shift: leftovers plus the next arrival become on-hand, the new
/// order joins the back of the pipeline. Only on-hand stock serves demand.
fn step_lead_time<O: StepOps>(
    o: &mut O,
    y: &[O::V],
    q: O::V,
    d: O::V,
    e: &EconV<O::V>,
) -> StepOut<O::V> {
    let lead = y.len();
    let avail = y[0];
    let sales = o.min(d, avail);
    let zero = o.zero();
    let surplus = o.sub(avail, d);
    let leftover = o.max(surplus, zero);
    let shortfall = o.sub(d, avail);
    let lost = o.max(shortfall, zero);

    let mut next = Vec::with_capacity(lead);
    if lead >= 2 {
        next.push(o.add(leftover, y[1]));
        for k in 1..lead - 1 {
            next.push(y[k + 1]);
        }
        next.push(q);
    } else {
        next.push(o.add(leftover, q));
    }

    let revenue = o.mul(e.price, sales);
    let purchase = o.mul(e.cost, q);
    let penalty = o.mul(e.penalty, lost);
    let holding = o.mul(e.holding, leftover);
    let r1 = o.sub(revenue, purchase);
    let r2 = o.sub(r1, penalty);
    let reward = o.sub(r2, holding);
    StepOut {
        endo: next,
        reward,
        available: avail,
        sales,
        perished: None,
    }
}

/// Cumulative-age state w^k = units with shelf life <= k+1 (0-based slot k).
/// Sales are FIFO; the oldest leftovers perish. Lower coordinates clamp at 0
/// because sales can dip into units newer than the coordinate tracks.
fn step_perishable<O: StepOps>(
    o: &mut O,
    w: &[O::V],
    q: O::V,
    d: O::V,
    e: &EconV<O::V>,
) -> StepOut<O::V> {
    let top = w[w.len() - 1];
    let avail = o.add(top, q);
    let sales = o.min(avail, d);
    let zero = o.zero();
    let oldest_left = o.sub(w[0], d);
    let perished = o.max(oldest_left, zero);
    let drained = o.add(sales, perished);

    let mut next = Vec::with_capacity(w.len());
    for k in 0..w.len() - 1 {
        let shifted = o.sub(w[k + 1], drained);
        next.push(o.max(shifted, zero));
    }
    next.push(o.sub(avail, drained));

    let shortfall = o.sub(d, avail);
    let lost = o.max(shortfall, zero);
    let surplus = o.sub(avail, d);
    let leftover = o.max(surplus, zero);
    let revenue = o.mul(e.price, sales);
    let purchase = o.mul(e.cost, q);
    let penalty = o.mul(e.penalty, lost);
    let holding = o.mul(e.holding, leftover);
    let r1 = o.sub(revenue, purchase);
    let r2 = o.sub(r1, penalty);
    let reward = o.sub(r2, holding);
    StepOut {
        endo: next,
        reward,
        available: avail,
        sales,
        perished: Some(perished),
    }
}

/// The expedited order lands at pipeline slot `L_e` before demand; the
/// regular order joins the back. In backlog mode on-hand may go negative and
/// every period credits revenue on the full demand.
#[allow(clippy::too_many_arguments)]
fn step_dual<O: StepOps>(
    o: &mut O,
    y: &[O::V],
    q_e: O::V,
    q_r: O::V,
    d: O::V,
    e: &EconV<O::V>,
    expedited_lead_time: usize,
    demand_mode: DemandMode,
) -> StepOut<O::V> {
    let lead = y.len();
    let mut pipe: Vec<O::V> = y.to_vec();
    pipe[expedited_lead_time] = o.add(pipe[expedited_lead_time], q_e);

    let avail = pipe[0];
    let zero = o.zero();
    let surplus = o.sub(avail, d);
    let leftover = match demand_mode {
        DemandMode::LostSales => o.max(surplus, zero),
        DemandMode::Backlog => surplus,
    };
    let sales = match demand_mode {
        DemandMode::LostSales => o.min(d, avail),
        DemandMode::Backlog => d,
    };
    let shortfall = o.sub(d, avail);
    let short_pos = o.max(shortfall, zero);
    let over_pos = o.max(surplus, zero);

    let mut next = Vec::with_capacity(lead);
    if lead >= 2 {
        next.push(o.add(leftover, pipe[1]));
        for k in 1..lead - 1 {
            next.push(pipe[k + 1]);
        }
        next.push(q_r);
    } else {
        next.push(o.add(leftover, q_r));
    }

    let revenue = o.mul(e.price, sales);
    let reg_cost = o.mul(e.regular_cost, q_r);
    let exp_cost = o.mul(e.expedited_cost, q_e);
    let penalty = o.mul(e.penalty, short_pos);
    let holding = o.mul(e.holding, over_pos);
    let r1 = o.sub(revenue, reg_cost);
    let r2 = o.sub(r1, exp_cost);
    let r3 = o.sub(r2, penalty);
    let reward = o.sub(r3, holding);
    StepOut {
        endo: next,
        reward,
        available: avail,
        sales,
        perished: None,
    }
}

/// Returns are capped at on-hand stock; the lost-sale penalty deliberately
/// compares demand against y + q only, ignoring returned units.
fn step_returns<O: StepOps>(
    o: &mut O,
    y: O::V,
    q: O::V,
    q_r: O::V,
    d: O::V,
    e: &EconV<O::V>,
) -> StepOut<O::V> {
    let q_r_eff = o.min(q_r, y);
    let bought = o.add(y, q);
    let avail = o.sub(bought, q_r_eff);
    let sales = o.min(d, avail);
    let zero = o.zero();
    let surplus = o.sub(avail, d);
    let leftover = o.max(surplus, zero);
    let shortfall = o.sub(d, bought);
    let lost = o.max(shortfall, zero);

    let revenue = o.mul(e.price, sales);
    let return_credit = o.mul(e.return_value, q_r_eff);
    let purchase = o.mul(e.cost, q);
    let penalty = o.mul(e.penalty, lost);
    let holding = o.mul(e.holding, leftover);
    let r1 = o.add(revenue, return_credit);
    let r2 = o.sub(r1, purchase);
    let r3 = o.sub(r2, penalty);
    let reward = o.sub(r3, holding);
    StepOut {
        endo: vec![leftover],
        reward,
        available: avail,
        sales,
        perished: None,
    }
}

/// Terminal reward at the end of a training horizon.
pub fn terminal_reward<O: StepOps>(
    o: &mut O,
    rule: TerminalRule,
    endo: &[O::V],
    econ: &EconV<O::V>,
) -> O::V {
    match rule {
        TerminalRule::None => o.zero(),
        TerminalRule::SalvageCost => {
            let mut total = endo[0];
            for v in &endo[1..] {
                total = o.add(total, *v);
            }
            o.mul(econ.cost, total)
        }
    }
}

/// Pure-mode wrapper with contract checks.
pub fn step_pure(
    spec: &EnvSpec,
    endo: &[f64],
    actions: &[f64],
    demand: f64,
    econ: &EconStatics,
) -> StepOut<f64> {
    debug_assert!(
        actions.iter().all(|a| *a >= 0.0),
        "contract violation: negative action {actions:?}"
    );
    debug_assert!(demand >= 0.0, "contract violation: negative demand");
    if let EnvKind::Perishable { .. } = spec.kind {
        debug_assert!(
            endo.windows(2).all(|w| w[0] <= w[1]),
            "contract violation: perishable state must be nondecreasing"
        );
    }
    let e = EconV::from_econ(econ);
    step(&mut PureOps, spec, endo, actions, demand, &e)
}

/// Pure-mode terminal reward.
pub fn terminal_reward_pure(rule: TerminalRule, endo: &[f64], econ: &EconStatics) -> f64 {
    terminal_reward(&mut PureOps, rule, endo, &EconV::from_econ(econ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{tag, CounterRng};
    use proptest::prelude::*;

    fn econ(p: f64, c: f64, h: f64, b: f64) -> EconStatics {
        EconStatics {
            price: p,
            cost: c,
            holding: h,
            penalty: b,
            expedited_cost: c,
            regular_cost: c,
            return_value: 0.0,
        }
    }

    #[test]
    fn lost_sales_hand_cases() {
        let spec = EnvSpec::new(EnvKind::LostSales);
        let e = econ(10.0, 1.0, 0.5, 2.0);

        let out = step_pure(&spec, &[5.0], &[3.0], 6.0, &e);
        assert_eq!(out.endo, vec![2.0]);
        assert_eq!(out.reward, 60.0 - 3.0 - 0.0 - 1.0);

        // no demand, no order: stock carries, holding accrues
        let out = step_pure(&spec, &[7.0], &[0.0], 0.0, &e);
        assert_eq!(out.endo, vec![7.0]);
        assert_eq!(out.reward, -0.5 * 7.0);

        // stockout
        let out = step_pure(&spec, &[0.0], &[0.0], 4.0, &e);
        assert_eq!(out.endo, vec![0.0]);
        assert_eq!(out.reward, -4.0 * 2.0);
    }

    #[test]
    fn lead_time_hand_case_and_conservation() {
        let spec = EnvSpec::new(EnvKind::LeadTime { lead_time: 3 });
        let e = econ(10.0, 1.0, 0.5, 2.0);
        let out = step_pure(&spec, &[2.0, 3.0, 4.0], &[5.0], 6.0, &e);
        assert_eq!(out.endo, vec![3.0, 4.0, 5.0]);
        assert_eq!(out.sales, 2.0);

        // per-step conservation: total' = total - sales + q, exact
        let mut rng = CounterRng::new(77, &[tag("cons-lead")]);
        for lead in [1usize, 2, 4, 7] {
            let spec = EnvSpec::new(EnvKind::LeadTime { lead_time: lead });
            for _ in 0..2000 {
                let y: Vec<f64> = (0..lead).map(|_| rng.uniform_in(0.0, 50.0)).collect();
                let q = rng.uniform_in(0.0, 30.0);
                let d = rng.uniform_in(0.0, 60.0);
                let out = step_pure(&spec, &y, &[q], d, &e);
                let before: f64 = y.iter().sum();
                let after: f64 = out.endo.iter().sum();
                assert!(
                    (after - (before - out.sales + q)).abs() < 1e-9,
                    "lead={lead} before={before} after={after} sales={} q={q}",
                    out.sales
                );
            }
        }
    }

    #[test]
    fn lead_time_one_equals_delayed_arrival_recursion() {
        // with L=1 the pipeline collapses to: y' = max(y - d, 0) + q
        let spec = EnvSpec::new(EnvKind::LeadTime { lead_time: 1 });
        let e = econ(12.0, 3.0, 0.4, 1.5);
        let mut rng = CounterRng::new(5, &[tag("lead1")]);
        let mut y = 4.0;
        let mut hand = 4.0;
        for _ in 0..200 {
            let q = rng.uniform_in(0.0, 20.0);
            let d = rng.uniform_in(0.0, 25.0);
            let out = step_pure(&spec, &[y], &[q], d, &e);
            let hand_sales = d.min(hand);
            let hand_reward = 12.0 * hand_sales - 3.0 * q - 1.5 * (d - hand).max(0.0)
                - 0.4 * (hand - d).max(0.0);
            hand = (hand - d).max(0.0) + q;
            y = out.endo[0];
            assert_eq!(y, hand);
            assert!((out.reward - hand_reward).abs() < 1e-12);
        }
    }

    #[test]
    fn perishable_hand_cases_and_conservation() {
        let spec = EnvSpec::new(EnvKind::Perishable { shelf_life: 3 });
        let e = econ(10.0, 1.0, 0.5, 2.0);
        let out = step_pure(&spec, &[2.0, 5.0], &[3.0], 4.0, &e);
        assert_eq!(out.sales, 4.0);
        assert_eq!(out.perished, Some(0.0));
        assert_eq!(out.endo, vec![1.0, 4.0]);

        // no demand: the whole oldest bucket perishes
        let out = step_pure(&spec, &[2.0, 5.0], &[3.0], 0.0, &e);
        assert_eq!(out.sales, 0.0);
        assert_eq!(out.perished, Some(2.0));

        // conservation: q = sales + perished + delta(total), exact
        let mut rng = CounterRng::new(99, &[tag("cons-per")]);
        for m in [2usize, 3, 5] {
            let spec = EnvSpec::new(EnvKind::Perishable { shelf_life: m });
            for _ in 0..2000 {
                let mut w: Vec<f64> = (0..m - 1).map(|_| rng.uniform_in(0.0, 50.0)).collect();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let q = rng.uniform_in(0.0, 30.0);
                let d = rng.uniform_in(0.0, 80.0);
                let out = step_pure(&spec, &w, &[q], d, &e);
                let delta = out.endo.last().unwrap() - w.last().unwrap();
                let balance = q - (out.sales + out.perished.unwrap() + delta);
                assert!(balance.abs() < 1e-9, "m={m} balance={balance}");
            }
        }
    }

    #[test]
    fn perishable_with_huge_shelf_life_matches_lost_sales() {
        let m = 50;
        let per = EnvSpec::new(EnvKind::Perishable { shelf_life: m });
        let lost = EnvSpec::new(EnvKind::LostSales);
        let e = econ(10.0, 2.0, 0.3, 1.0);
        let mut rng = CounterRng::new(13, &[tag("reduction")]);
        let mut w = vec![0.0; m - 1];
        let mut y = 0.0;
        for _ in 0..30 {
            // horizon << m, zero init: nothing ever expires
            let q = rng.uniform_in(0.0, 20.0);
            let d = rng.uniform_in(0.0, 25.0);
            let pout = step_pure(&per, &w, &[q], d, &e);
            let lout = step_pure(&lost, &[y], &[q], d, &e);
            assert!((pout.reward - lout.reward).abs() < 1e-12);
            assert!((pout.endo.last().unwrap() - lout.endo[0]).abs() < 1e-12);
            assert_eq!(pout.perished, Some(0.0));
            w = pout.endo;
            y = lout.endo[0];
        }
    }

    #[test]
    fn dual_sourcing_hand_cases() {
        let e = EconStatics {
            price: 10.0,
            cost: 5.0,
            holding: 0.5,
            penalty: 2.0,
            expedited_cost: 5.0,
            regular_cost: 4.0,
            return_value: 0.0,
        };
        // L_e = 0 means the expedited order is available immediately
        let spec = EnvSpec::new(EnvKind::DualSourcing {
            expedited_lead_time: 0,
            regular_lead_time: 2,
            demand_mode: DemandMode::LostSales,
        });
        let out = step_pure(&spec, &[1.0, 0.0], &[2.0, 0.0], 3.0, &e);
        assert_eq!(out.available, 3.0);
        assert_eq!(out.sales, 3.0);

        // pipeline insertion and shift
        let spec = EnvSpec::new(EnvKind::DualSourcing {
            expedited_lead_time: 2,
            regular_lead_time: 4,
            demand_mode: DemandMode::LostSales,
        });
        let out = step_pure(&spec, &[1.0, 1.0, 1.0, 1.0], &[2.0, 3.0], 0.0, &e);
        assert_eq!(out.endo, vec![2.0, 3.0, 1.0, 3.0]);

        // backlog: on-hand goes negative and the backlog is penalized
        let spec = EnvSpec::new(EnvKind::DualSourcing {
            expedited_lead_time: 0,
            regular_lead_time: 1,
            demand_mode: DemandMode::Backlog,
        });
        let out = step_pure(&spec, &[1.0], &[0.0, 0.0], 3.0, &e);
        assert_eq!(out.endo, vec![-2.0]);
        assert_eq!(out.reward, 10.0 * 3.0 - 2.0 * 2.0);
    }

    #[test]
    fn dual_conservation_lost_sales_mode() {
        let e = EconStatics {
            price: 10.0,
            cost: 5.0,
            holding: 0.5,
            penalty: 2.0,
            expedited_cost: 5.0,
            regular_cost: 4.0,
            return_value: 0.0,
        };
        let mut rng = CounterRng::new(3, &[tag("cons-dual")]);
        for (le, lr) in [(0usize, 1usize), (0, 2), (2, 4), (1, 5)] {
            let spec = EnvSpec::new(EnvKind::DualSourcing {
                expedited_lead_time: le,
                regular_lead_time: lr,
                demand_mode: DemandMode::LostSales,
            });
            for _ in 0..2000 {
                let y: Vec<f64> = (0..lr).map(|_| rng.uniform_in(0.0, 40.0)).collect();
                let qe = rng.uniform_in(0.0, 20.0);
                let qr = rng.uniform_in(0.0, 20.0);
                let d = rng.uniform_in(0.0, 60.0);
                let out = step_pure(&spec, &y, &[qe, qr], d, &e);
                let before: f64 = y.iter().sum();
                let after: f64 = out.endo.iter().sum();
                assert!(
                    (after - (before + qe + qr - out.sales)).abs() < 1e-9,
                    "le={le} lr={lr}"
                );
            }
        }
    }

    #[test]
    fn returns_hand_cases_and_reduction() {
        let spec = EnvSpec::new(EnvKind::Returns);
        let e = EconStatics {
            price: 10.0,
            cost: 5.0,
            holding: 1.0,
            penalty: 2.0,
            expedited_cost: 5.0,
            regular_cost: 5.0,
            return_value: 3.0,
        };
        let out = step_pure(&spec, &[100.0], &[0.0, 60.0], 10.0, &e);
        assert_eq!(out.sales, 10.0);
        assert_eq!(out.endo, vec![30.0]);
        assert_eq!(out.reward, 100.0 + 180.0 - 0.0 - 0.0 - 30.0);

        // with q_r = 0 this is exactly the lost-sales step
        let lost = EnvSpec::new(EnvKind::LostSales);
        let mut rng = CounterRng::new(21, &[tag("ret-red")]);
        for _ in 0..500 {
            let y = rng.uniform_in(0.0, 50.0);
            let q = rng.uniform_in(0.0, 30.0);
            let d = rng.uniform_in(0.0, 60.0);
            let a = step_pure(&spec, &[y], &[q, 0.0], d, &e);
            let b = step_pure(&lost, &[y], &[q], d, &e);
            assert_eq!(a.reward, b.reward);
            assert_eq!(a.endo, b.endo);
        }
    }

    #[test]
    fn simultaneous_buy_and_return_is_dominated_by_single_sided_actions() {
        // r < c: any (q > 0, q_r > 0) action is weakly beaten by some action
        // that only buys or only returns
        let spec = EnvSpec::new(EnvKind::Returns);
        let e = EconStatics {
            price: 10.0,
            cost: 5.0,
            holding: 1.0,
            penalty: 2.0,
            expedited_cost: 5.0,
            regular_cost: 5.0,
            return_value: 3.0,
        };
        let mut rng = CounterRng::new(8, &[tag("dominance")]);
        for _ in 0..300 {
            let y = rng.uniform_in(0.0, 40.0);
            let d = rng.uniform_in(0.0, 50.0);
            let q = rng.uniform_in(0.1, 25.0);
            let qr = rng.uniform_in(0.1, 25.0);
            let joint = step_pure(&spec, &[y], &[q, qr], d, &e).reward;
            let mut best_single = f64::NEG_INFINITY;
            for i in 0..=400 {
                let a = i as f64 * 0.125;
                let buy_only = step_pure(&spec, &[y], &[a, 0.0], d, &e).reward;
                let ret_only = step_pure(&spec, &[y], &[0.0, a], d, &e).reward;
                best_single = best_single.max(buy_only).max(ret_only);
            }
            assert!(
                joint <= best_single + 1e-9,
                "joint ({q},{qr}) = {joint} beats best single {best_single} at y={y} d={d}"
            );
        }
    }

    #[test]
    fn init_rules() {
        let mut rng = CounterRng::new(4, &[tag("init")]);
        let lead = EnvSpec::new(EnvKind::LeadTime { lead_time: 4 });
        assert_eq!(
            init_endogenous(&lead, InitRule::Zero, &[50.0; 8], &mut rng),
            vec![0.0; 4]
        );
        for _ in 0..200 {
            let v = init_endogenous(&lead, InitRule::UniformDemandScaled, &[10.0, 50.0], &mut rng);
            assert!(v.iter().all(|x| (0.0..100.0).contains(x)));
        }
        let ret = EnvSpec::new(EnvKind::Returns);
        for _ in 0..200 {
            let v = init_endogenous(&ret, InitRule::ReturnsOverstock, &[10.0; 16], &mut rng);
            assert!(v[0] >= 0.0 && v[0] < 200.0);
        }
    }

    #[test]
    fn terminal_rules() {
        let e = econ(10.0, 4.0, 0.5, 2.0);
        assert_eq!(terminal_reward_pure(TerminalRule::SalvageCost, &[7.0], &e), 28.0);
        assert_eq!(
            terminal_reward_pure(TerminalRule::SalvageCost, &[1.0, 2.0, 3.0], &e),
            24.0
        );
        assert_eq!(terminal_reward_pure(TerminalRule::SalvageCost, &[0.0], &e), 0.0);
        assert_eq!(terminal_reward_pure(TerminalRule::None, &[9.0], &e), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(EnvSpec::new(EnvKind::LeadTime { lead_time: 0 }).validate().is_err());
        assert!(EnvSpec::new(EnvKind::Perishable { shelf_life: 1 }).validate().is_err());
        assert!(EnvSpec::new(EnvKind::DualSourcing {
            expedited_lead_time: 3,
            regular_lead_time: 3,
            demand_mode: DemandMode::Backlog,
        })
        .validate()
        .is_err());
        assert!(EnvSpec::new(EnvKind::LostSales).validate().is_ok());
    }

    proptest! {
        #[test]
        fn nonnegativity_in_lost_sales_modes(
            seed in 0u64..500,
            lead in 1usize..6,
        ) {
            let mut rng = CounterRng::new(seed, &[tag("prop-nonneg")]);
            let e = econ(10.0, 2.0, 0.5, 1.0);
            let spec = EnvSpec::new(EnvKind::LeadTime { lead_time: lead });
            let mut y = vec![0.0; lead];
            for _ in 0..40 {
                let q = rng.uniform_in(0.0, 30.0);
                let d = rng.uniform_in(0.0, 40.0);
                let out = step_pure(&spec, &y, &[q], d, &e);
                prop_assert!(out.endo.iter().all(|v| *v >= 0.0));
                y = out.endo;
            }
        }

        #[test]
        fn perishable_monotonicity_is_preserved(seed in 0u64..500, m in 2usize..7) {
            let mut rng = CounterRng::new(seed, &[tag("prop-mono")]);
            let e = econ(10.0, 2.0, 0.5, 1.0);
            let spec = EnvSpec::new(EnvKind::Perishable { shelf_life: m });
            let mut w: Vec<f64> = (0..m - 1).map(|_| rng.uniform_in(0.0, 30.0)).collect();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for _ in 0..40 {
                let q = rng.uniform_in(0.0, 30.0);
                let d = rng.uniform_in(0.0, 50.0);
                let out = step_pure(&spec, &w, &[q], d, &e);
                prop_assert!(out.endo.windows(2).all(|p| p[0] <= p[1] + 1e-12));
                prop_assert!(out.endo.iter().all(|v| *v >= 0.0));
                w = out.endo;
            }
        }
    }
}
