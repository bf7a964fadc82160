//! Command implementations. Every command materializes its data
//! deterministically from the config seeds, writes artifacts under
//! `output_dir`, and finishes with a manifest.

use crate::config::{ProbeSection, RunConfig};
use crate::manifest::Manifest;
use anyhow::{anyhow, bail, Context};
use invlab::datagen::{
    self, load_products, load_traces, sample_products, sample_traces, DemandTrace, EventCalendar,
    Product,
};
use invlab::envs::{EnvKind, EnvSpec, InitRule};
use invlab::evaluator::{
    self, best_base_stock_levels, evaluate, single_index_dual_levels, Actor, BenchRow,
    EvalProtocol, EvalResult, LeadTimeBaseStock, LeadTimeVectorBaseStock, NeuralActor,
    NonOmniscientNewsvendor, OmniscientNewsvendor, PerishableBaseStock, ProbeGrid, PtoActor,
    SingleIndexDualActor,
};
use invlab::heuristics::{self, GammaDist};
use invlab::policy::{self, HeadMode, PolicyConfig, PolicyParams};
use invlab::trainer::{self, TrainConfig};
use std::path::Path;
use std::time::Instant;

const DEFAULT_HISTORY: usize = 32;

fn history_of(cfg: &RunConfig) -> usize {
    cfg.policy.history.unwrap_or(DEFAULT_HISTORY)
}

fn load_calendar(path: &Path) -> anyhow::Result<EventCalendar> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read calendar {}", path.display()))?;
    let event_periods: Vec<i64> = serde_json::from_str(&text)
        .with_context(|| format!("calendar {} must be a JSON list of period indices", path.display()))?;
    Ok(EventCalendar { event_periods })
}

/// Training population: synthetic Gamma traces, or user-supplied CSVs.
fn train_population(cfg: &RunConfig) -> anyhow::Result<(Vec<Product>, Vec<DemandTrace>)> {
    let history = history_of(cfg);
    match (&cfg.data.trace_csv, &cfg.data.products_csv) {
        (Some(traces_path), Some(products_path)) => {
            let calendar = cfg.data.calendar.as_deref().map(load_calendar).transpose()?;
            let traces = load_traces(traces_path, calendar.as_ref())?;
            let products = load_products(products_path)?;
            align_products(products, traces)
        }
        _ => {
            let products = sample_products(cfg.data.n, cfg.data.seed, cfg.data.flags);
            let traces = sample_traces(&products, history, cfg.train.horizon, cfg.data.seed);
            Ok((products, traces))
        }
    }
}

/// Evaluation population. With CSV data the same traces serve both roles;
/// they must be long enough for the protocol.
fn eval_population(cfg: &RunConfig) -> anyhow::Result<(Vec<Product>, Vec<DemandTrace>)> {
    let history = history_of(cfg);
    match (&cfg.data.trace_csv, &cfg.data.products_csv) {
        (Some(_), Some(_)) => train_population(cfg),
        _ => {
            let products = sample_products(cfg.data.eval_n, cfg.data.eval_seed, cfg.data.flags);
            let traces = sample_traces(
                &products,
                history,
                cfg.eval_protocol.periods,
                cfg.data.eval_seed,
            );
            Ok((products, traces))
        }
    }
}

fn align_products(
    products: Vec<Product>,
    traces: Vec<DemandTrace>,
) -> anyhow::Result<(Vec<Product>, Vec<DemandTrace>)> {
    let by_id: std::collections::HashMap<u64, Product> =
        products.into_iter().map(|p| (p.id, p)).collect();
    let mut aligned = Vec::with_capacity(traces.len());
    for t in &traces {
        let p = by_id
            .get(&t.product_id)
            .ok_or_else(|| anyhow!("trace product {} missing from products csv", t.product_id))?;
        aligned.push(p.clone());
    }
    Ok((aligned, traces))
}

fn policy_config(cfg: &RunConfig, channels: usize) -> PolicyConfig {
    let history = history_of(cfg);
    let mut pc = match &cfg.policy.quantile_levels {
        Some(levels) => PolicyConfig::quantiles(history, channels, levels.clone()),
        None => PolicyConfig::control(
            history,
            channels,
            cfg.env.static_dim(),
            cfg.env.endo_dim(),
            cfg.env.action_dim(),
        ),
    };
    if let Some(d) = &cfg.policy.dilations {
        pc.dilations = d.clone();
    }
    if let Some(c) = cfg.policy.cnn_channels {
        pc.cnn_channels = c;
    }
    if let Some(l) = cfg.policy.mlp_layers {
        pc.mlp_layers = l;
    }
    if let Some(w) = cfg.policy.mlp_width {
        pc.mlp_width = w;
    }
    pc
}

fn default_init_rule(env: &EnvSpec) -> InitRule {
    match env.kind {
        EnvKind::Returns => InitRule::ReturnsOverstock,
        _ => InitRule::UniformDemandScaled,
    }
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        horizon: cfg.train.horizon,
        init_rule: cfg.train.init_rule.unwrap_or_else(|| default_init_rule(&cfg.env)),
        terminal_rule: cfg.train.terminal_rule,
        penalty: cfg.train.penalty.clone(),
        seed: cfg.train.seed,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: cfg
            .train
            .checkpoint_every
            .map(|_| cfg.output_dir.join("checkpoints")),
    }
}

fn protocol(cfg: &RunConfig) -> EvalProtocol {
    EvalProtocol {
        history: history_of(cfg),
        periods: cfg.eval_protocol.periods,
        burn_in: cfg.eval_protocol.burn_in,
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut manifest = Manifest::new("gen-data", cfg);
    let (products, traces) = train_population(cfg)?;
    let products_path = cfg.output_dir.join("products.csv");
    let traces_path = cfg.output_dir.join("traces.csv");
    datagen::save_products(&products_path, &products)?;
    datagen::save_traces(&traces_path, &traces)?;
    manifest.artifacts.push(products_path);
    manifest.artifacts.push(traces_path);
    if cfg.data.trace_csv.is_none() {
        let (eval_products, eval_traces) = eval_population(cfg)?;
        let p = cfg.output_dir.join("eval_products.csv");
        let t = cfg.output_dir.join("eval_traces.csv");
        datagen::save_products(&p, &eval_products)?;
        datagen::save_traces(&t, &eval_traces)?;
        manifest.artifacts.push(p);
        manifest.artifacts.push(t);
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&cfg.output_dir)?;
    println!(
        "gen-data: {} products -> {}",
        products.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut manifest = Manifest::new("train", cfg);
    let (products, traces) = train_population(cfg)?;
    let channels = traces.first().map_or(1, |t| t.channels());
    let pcfg = policy_config(cfg, channels);
    let tcfg = train_config(cfg);
    let (params, curve) = if pcfg.head_mode == HeadMode::Quantiles {
        trainer::train_forecaster(&products, &traces, &pcfg, &tcfg)?
    } else {
        trainer::train(&cfg.env, &products, &traces, &pcfg, &tcfg)?
    };
    let ckpt = cfg.output_dir.join("checkpoint.json");
    policy::save_checkpoint(&ckpt, &params)?;
    let curve_path = cfg.output_dir.join("curve.csv");
    curve.write_csv(&curve_path)?;
    manifest.artifacts.push(ckpt);
    manifest.artifacts.push(curve_path);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&cfg.output_dir)?;
    let last = curve.epochs.last().map(|e| e.mean_reward).unwrap_or(f64::NAN);
    println!(
        "train: {} epochs on {} products, final mean reward {last:.3} -> {}",
        cfg.train.epochs,
        products.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn load_checkpoint_checked(path: &Path) -> anyhow::Result<PolicyParams> {
    if !path.exists() {
        return Err(invlab::Error::Usage(format!(
            "checkpoint {} does not exist",
            path.display()
        ))
        .into());
    }
    Ok(policy::load_checkpoint(path)?)
}

fn heuristic_actor(name: &str, env: &EnvSpec) -> anyhow::Result<Box<dyn HeuristicFactory>> {
    let applicable = applicable_heuristics(env);
    if !applicable.contains(&name) {
        bail!(
            "heuristic {name} does not apply to this environment; choose one of {applicable:?}"
        );
    }
    Ok(match name {
        "omniscient_newsvendor" => Box::new(SimpleFactory::Omniscient),
        "non_omniscient_newsvendor" => Box::new(SimpleFactory::NonOmniscient),
        "base_stock" => Box::new(SimpleFactory::BaseStock(lead_time_of(env)?)),
        "vector_base_stock" => Box::new(SimpleFactory::VectorBaseStock(lead_time_of(env)?)),
        "std_base_stock" => Box::new(SimpleFactory::StdBaseStock),
        "best_base_stock" => Box::new(SimpleFactory::BestBaseStock),
        "single_index_dual" => Box::new(SimpleFactory::SingleIndexDual),
        other => bail!("unknown heuristic {other}"),
    })
}

fn lead_time_of(env: &EnvSpec) -> anyhow::Result<usize> {
    match env.kind {
        EnvKind::LeadTime { lead_time } => Ok(lead_time),
        _ => bail!("heuristic needs a lead-time environment"),
    }
}

pub fn applicable_heuristics(env: &EnvSpec) -> Vec<&'static str> {
    match env.kind {
        EnvKind::LostSales => vec!["omniscient_newsvendor", "non_omniscient_newsvendor"],
        EnvKind::LeadTime { .. } => vec!["vector_base_stock", "base_stock"],
        EnvKind::Perishable { .. } => vec!["best_base_stock", "std_base_stock"],
        EnvKind::DualSourcing { .. } => vec!["single_index_dual"],
        EnvKind::Returns => vec!["omniscient_newsvendor"],
    }
}

/// Some heuristics need per-product searched levels before they can act;
/// this factory builds the actor plus its per-product level rows.
trait HeuristicFactory {
    fn build(
        &self,
        env: &EnvSpec,
        products: &[Product],
        traces: &[DemandTrace],
        protocol: &EvalProtocol,
    ) -> anyhow::Result<(Box<dyn Actor>, Vec<BenchRow>)>;
}

enum SimpleFactory {
    Omniscient,
    NonOmniscient,
    BaseStock(usize),
    VectorBaseStock(usize),
    StdBaseStock,
    BestBaseStock,
    SingleIndexDual,
}

fn level_rows(
    policy: &str,
    products: &[Product],
    levels: impl Fn(&Product) -> Vec<f64>,
) -> Vec<BenchRow> {
    products
        .iter()
        .map(|p| BenchRow {
            product_id: p.id,
            policy: policy.into(),
            levels: levels(p),
            avg_reward: f64::NAN, // filled after evaluation
        })
        .collect()
}

impl HeuristicFactory for SimpleFactory {
    fn build(
        &self,
        env: &EnvSpec,
        products: &[Product],
        traces: &[DemandTrace],
        protocol: &EvalProtocol,
    ) -> anyhow::Result<(Box<dyn Actor>, Vec<BenchRow>)> {
        let dist_of = |p: &Product| {
            let (shape, scale) = p.gamma_params();
            GammaDist::new(shape, scale)
        };
        Ok(match self {
            SimpleFactory::Omniscient => (
                Box::new(OmniscientNewsvendor),
                level_rows("omniscient_newsvendor", products, |p| {
                    vec![heuristics::newsvendor_level(&p.econ, &dist_of(p)).unwrap_or(0.0)]
                }),
            ),
            SimpleFactory::NonOmniscient => (
                Box::new(NonOmniscientNewsvendor),
                level_rows("non_omniscient_newsvendor", products, |_| vec![]),
            ),
            SimpleFactory::BaseStock(lead) => {
                let lead = *lead;
                (
                    Box::new(LeadTimeBaseStock { lead_time: lead }),
                    level_rows("base_stock", products, |p| {
                        vec![heuristics::leadtime_base_stock(&p.econ, &dist_of(p), lead)
                            .unwrap_or(0.0)]
                    }),
                )
            }
            SimpleFactory::VectorBaseStock(lead) => {
                let lead = *lead;
                (
                    Box::new(LeadTimeVectorBaseStock { lead_time: lead }),
                    level_rows("vector_base_stock", products, |p| {
                        heuristics::leadtime_vector_base_stock(&p.econ, &dist_of(p), lead)
                            .unwrap_or_default()
                    }),
                )
            }
            SimpleFactory::StdBaseStock => (
                Box::new(PerishableBaseStock::standard()),
                level_rows("std_base_stock", products, |p| {
                    vec![heuristics::newsvendor_level(&p.econ, &dist_of(p)).unwrap_or(0.0)]
                }),
            ),
            SimpleFactory::BestBaseStock => {
                let levels = best_base_stock_levels(env, products, traces, protocol);
                let rows = level_rows("best_base_stock", products, |p| {
                    vec![*levels.get(&p.id).unwrap_or(&0.0)]
                });
                (
                    Box::new(PerishableBaseStock::with_levels("best_base_stock", levels)),
                    rows,
                )
            }
            SimpleFactory::SingleIndexDual => {
                let levels = single_index_dual_levels(env, products, traces, protocol)?;
                let rows = level_rows("single_index_dual", products, |p| {
                    let (s_e, s_r) = levels.get(&p.id).copied().unwrap_or((0.0, 0.0));
                    vec![s_e, s_r]
                });
                (Box::new(SingleIndexDualActor { levels_by_id: levels }), rows)
            }
        })
    }
}

fn actor_for_checkpoint<'p>(
    params: &'p PolicyParams,
    env: &EnvSpec,
) -> anyhow::Result<Box<dyn Actor + 'p>> {
    Ok(match params.config.head_mode {
        HeadMode::Control => Box::new(NeuralActor::new(params, *env, "drl")),
        HeadMode::Quantiles => {
            if env.kind != EnvKind::LostSales {
                bail!("predict-then-optimize evaluation supports the lost-sales environment");
            }
            Box::new(PtoActor { forecaster: params })
        }
    })
}

#[derive(serde::Serialize)]
struct EvalSummary<'a> {
    policy: &'a str,
    mean_reward: f64,
    service: &'a invlab::evaluator::ServiceLevels,
    products: usize,
}

pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    heuristic: Option<&str>,
) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut manifest = Manifest::new("eval", cfg);
    let (products, traces) = eval_population(cfg)?;
    let proto = protocol(cfg);

    let params;
    let (actor, _rows): (Box<dyn Actor>, Vec<BenchRow>) = match (checkpoint, heuristic) {
        (Some(path), None) => {
            params = load_checkpoint_checked(path)?;
            (actor_for_checkpoint(&params, &cfg.env)?, vec![])
        }
        (None, Some(name)) => {
            let factory = heuristic_actor(name, &cfg.env)?;
            factory.build(&cfg.env, &products, &traces, &proto)?
        }
        _ => {
            return Err(invlab::Error::Usage(
                "eval needs exactly one of --checkpoint or --heuristic".into(),
            )
            .into())
        }
    };

    let result = evaluate(actor.as_ref(), &cfg.env, &products, &traces, &proto)?;
    let eval_path = cfg.output_dir.join("evaluation.csv");
    evaluator::write_evaluation_csv(&eval_path, actor.name(), &result)?;
    let summary_path = cfg.output_dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&EvalSummary {
            policy: actor.name(),
            mean_reward: result.mean_reward,
            service: &result.service,
            products: result.per_product.len(),
        })?,
    )?;
    manifest.artifacts.push(eval_path);
    manifest.artifacts.push(summary_path);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&cfg.output_dir)?;
    println!(
        "eval {}: mean reward {:.3} over {} products",
        actor.name(),
        result.mean_reward,
        result.per_product.len()
    );
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut manifest = Manifest::new("probe", cfg);
    let probe_cfg: &ProbeSection = cfg
        .probe
        .as_ref()
        .ok_or_else(|| invlab::Error::Config("probe command needs a probe section".to_string()))?;
    let params = load_checkpoint_checked(checkpoint)?;
    let actor = actor_for_checkpoint(&params, &cfg.env)?;
    let (products, traces) = eval_population(cfg)?;
    let proto = protocol(cfg);

    for &idx in &probe_cfg.products {
        if idx >= products.len() {
            return Err(invlab::Error::Usage(format!(
                "probe product index {idx} out of range ({} products)",
                products.len()
            ))
            .into());
        }
        let grid = ProbeGrid {
            time_index: probe_cfg.time_index,
            dims: probe_cfg
                .dims
                .iter()
                .map(|d| {
                    let step = if d.steps > 1 { (d.hi - d.lo) / (d.steps - 1) as f64 } else { 0.0 };
                    (d.slot, (0..d.steps).map(|i| d.lo + step * i as f64).collect())
                })
                .collect(),
            fixed: vec![0.0; cfg.env.endo_dim()],
        };
        let result = evaluator::probe_grid(
            actor.as_ref(),
            &cfg.env,
            &products[idx],
            &traces[idx],
            &proto,
            &grid,
        )?;
        let stem = format!("probe_p{idx}_t{}", probe_cfg.time_index);
        let paths = evaluator::write_probe_csv(&cfg.output_dir, &stem, &result)?;
        manifest.artifacts.extend(paths);
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&cfg.output_dir)?;
    println!("probe: {} products -> {}", probe_cfg.products.len(), cfg.output_dir.display());
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut manifest = Manifest::new("bench", cfg);
    let (products, traces) = eval_population(cfg)?;
    let proto = protocol(cfg);

    struct Entry {
        name: String,
        result: EvalResult,
        rows: Vec<BenchRow>,
    }
    let mut entries: Vec<Entry> = Vec::new();

    let params = checkpoint.map(load_checkpoint_checked).transpose()?;
    if let Some(params) = &params {
        let actor = actor_for_checkpoint(params, &cfg.env)?;
        let result = evaluate(actor.as_ref(), &cfg.env, &products, &traces, &proto)?;
        entries.push(Entry {
            name: actor.name().to_string(),
            result,
            rows: vec![],
        });
    }
    for name in applicable_heuristics(&cfg.env) {
        let factory = heuristic_actor(name, &cfg.env)?;
        let (actor, mut rows) = factory.build(&cfg.env, &products, &traces, &proto)?;
        let result = evaluate(actor.as_ref(), &cfg.env, &products, &traces, &proto)?;
        let rewards: std::collections::HashMap<u64, f64> = result
            .per_product
            .iter()
            .map(|p| (p.product_id, p.avg_reward))
            .collect();
        for row in rows.iter_mut() {
            row.avg_reward = rewards.get(&row.product_id).copied().unwrap_or(f64::NAN);
        }
        entries.push(Entry {
            name: name.to_string(),
            result,
            rows,
        });
    }

    // comparison table in the reference-vs-benchmark layout
    let reference = entries.first().map(|e| e.result.mean_reward).unwrap_or(f64::NAN);
    let table_path = cfg.output_dir.join("comparison.csv");
    {
        let mut w = csv::Writer::from_path(&table_path)?;
        w.write_record(["policy", "reward", "gap_percent"])?;
        for (i, e) in entries.iter().enumerate() {
            let gap = if i == 0 {
                String::new()
            } else {
                format!("{:.4}", 100.0 * (reference - e.result.mean_reward) / e.result.mean_reward)
            };
            w.write_record(&[e.name.clone(), format!("{}", e.result.mean_reward), gap])?;
        }
        w.flush()?;
    }
    manifest.artifacts.push(table_path);

    let detail_rows: Vec<BenchRow> = entries.iter().flat_map(|e| e.rows.clone()).collect();
    if !detail_rows.is_empty() {
        let detail_path = cfg.output_dir.join("benchmark_products.csv");
        evaluator::write_benchmark_csv(&detail_path, &detail_rows)?;
        manifest.artifacts.push(detail_path);
    }

    for e in &entries {
        println!("bench {}: mean reward {:.3}", e.name, e.result.mean_reward);
    }
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.write(&cfg.output_dir)?;
    Ok(())
}
