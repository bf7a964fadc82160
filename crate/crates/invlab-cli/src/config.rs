//! Run configuration: one JSON document per experiment, with an optional
//! `sweep` array that expands into child runs (deep-merged overrides, each
//! with a derived output directory).

use invlab::datagen::ProductFlags;
use invlab::envs::{EnvSpec, InitRule, TerminalRule};
use invlab::trainer::PenaltySpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    /// Synthetic training population size.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub flags: ProductFlags,
    /// Load demand traces from CSV instead of sampling Gamma paths.
    #[serde(default)]
    pub trace_csv: Option<PathBuf>,
    /// Product economics CSV to pair with `trace_csv`.
    #[serde(default)]
    pub products_csv: Option<PathBuf>,
    /// Optional event calendar (JSON list of period indices) adding a
    /// distance-to-event channel to loaded traces.
    #[serde(default)]
    pub calendar: Option<PathBuf>,
    /// Evaluation population size (synthetic).
    #[serde(default = "default_eval_n")]
    pub eval_n: usize,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
}

fn default_n() -> usize {
    40_000
}
fn default_seed() -> u64 {
    1
}
fn default_eval_n() -> usize {
    100_000
}
fn default_eval_seed() -> u64 {
    900_000_001
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: default_n(),
            seed: default_seed(),
            flags: ProductFlags::default(),
            trace_csv: None,
            products_csv: None,
            calendar: None,
            eval_n: default_eval_n(),
            eval_seed: default_eval_seed(),
        }
    }
}

/// Optional policy overrides; anything unset follows the defaults implied by
/// the environment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PolicySection {
    #[serde(default)]
    pub history: Option<usize>,
    #[serde(default)]
    pub dilations: Option<Vec<usize>>,
    #[serde(default)]
    pub cnn_channels: Option<usize>,
    #[serde(default)]
    pub mlp_layers: Option<usize>,
    #[serde(default)]
    pub mlp_width: Option<usize>,
    /// Switch the head to quantile forecasting with these levels.
    #[serde(default)]
    pub quantile_levels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub init_rule: Option<InitRule>,
    #[serde(default = "default_terminal")]
    pub terminal_rule: TerminalRule,
    #[serde(default)]
    pub penalty: Option<PenaltySpec>,
    #[serde(default = "default_train_seed")]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_epochs() -> usize {
    1000
}
fn default_batch() -> usize {
    2500
}
fn default_lr() -> f64 {
    0.001
}
fn default_horizon() -> usize {
    100
}
fn default_terminal() -> TerminalRule {
    TerminalRule::SalvageCost
}
fn default_train_seed() -> u64 {
    7
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            horizon: default_horizon(),
            init_rule: None,
            terminal_rule: default_terminal(),
            penalty: None,
            seed: default_train_seed(),
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default = "default_periods")]
    pub periods: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_periods() -> usize {
    520
}
fn default_burn_in() -> usize {
    20
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            periods: default_periods(),
            burn_in: default_burn_in(),
        }
    }
}

/// One or two endogenous dimensions probed over inclusive ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeDim {
    pub slot: usize,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSection {
    #[serde(default)]
    pub time_index: usize,
    pub dims: Vec<ProbeDim>,
    /// Product indices (into the eval population) to probe.
    #[serde(default = "default_probe_products")]
    pub products: Vec<usize>,
}

fn default_probe_products() -> Vec<usize> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    pub env: EnvSpec,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, rename = "eval")]
    pub eval_protocol: EvalSection,
    #[serde(default)]
    pub probe: Option<ProbeSection>,
    pub output_dir: PathBuf,
    /// Child-run overrides; each entry deep-merges into this document.
    #[serde(default)]
    pub sweep: Vec<Value>,
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.env.validate() {
            problems.push(e.to_string());
        }
        if self.data.n == 0 {
            problems.push("data.n must be >= 1".into());
        }
        if self.data.trace_csv.is_some() != self.data.products_csv.is_some() {
            problems.push("trace_csv and products_csv must be supplied together".into());
        }
        if let Some(p) = &self.data.trace_csv {
            if !p.exists() {
                problems.push(format!("trace_csv {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.data.products_csv {
            if !p.exists() {
                problems.push(format!("products_csv {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.data.calendar {
            if !p.exists() {
                problems.push(format!("calendar {} does not exist", p.display()));
            }
        }
        if self.train.epochs > 0 && self.train.batch_size == 0 {
            problems.push("train.batch_size must be >= 1".into());
        }
        if self.train.lr <= 0.0 {
            problems.push("train.lr must be positive".into());
        }
        if self.eval_protocol.burn_in >= self.eval_protocol.periods {
            problems.push("eval.burn_in must be < eval.periods".into());
        }
        if let Some(probe) = &self.probe {
            if probe.dims.is_empty() || probe.dims.len() > 2 {
                problems.push("probe.dims must have 1 or 2 entries".into());
            }
            for d in &probe.dims {
                if d.steps == 0 || d.hi < d.lo {
                    problems.push(format!("probe dim {} has an empty range", d.slot));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            anyhow::bail!("invalid config:\n  - {}", problems.join("\n  - "))
        }
    }
}

/// Deep-merge `patch` into `base`: objects merge per key, everything else
/// replaces.
pub fn merge_json(base: &Value, patch: &Value) -> Value {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            let mut out = b.clone();
            for (k, v) in p {
                let merged = match out.get(k) {
                    Some(existing) => merge_json(existing, v),
                    None => v.clone(),
                };
                out.insert(k.clone(), merged);
            }
            Value::Object(out)
        }
        (_, replacement) => replacement.clone(),
    }
}

/// Load a config, expanding the sweep array into child configs with derived
/// output dirs (`<output_dir>/sweep_<i>`). A config without a sweep yields
/// itself.
pub fn load_configs(path: &Path) -> anyhow::Result<Vec<RunConfig>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("config {} is not valid JSON: {e}", path.display()))?;
    let base_cfg: RunConfig = serde_json::from_value(root.clone())
        .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
    if base_cfg.sweep.is_empty() {
        base_cfg.validate()?;
        return Ok(vec![base_cfg]);
    }
    let mut out = Vec::with_capacity(base_cfg.sweep.len());
    for (i, patch) in base_cfg.sweep.iter().enumerate() {
        let mut merged = merge_json(&root, patch);
        if let Value::Object(obj) = &mut merged {
            obj.remove("sweep");
            let child_dir = base_cfg.output_dir.join(format!("sweep_{i:03}"));
            // a child may override output_dir itself; otherwise derive it
            if !patch.get("output_dir").is_some_and(|v| v.is_string()) {
                obj.insert(
                    "output_dir".into(),
                    Value::String(child_dir.to_string_lossy().into_owned()),
                );
            }
        }
        let cfg: RunConfig = serde_json::from_value(merged)
            .map_err(|e| anyhow::anyhow!("sweep entry {i}: {e}"))?;
        cfg.validate().map_err(|e| anyhow::anyhow!("sweep entry {i}: {e}"))?;
        out.push(cfg);
    }
    Ok(out)
}
