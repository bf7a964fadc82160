//! The policy network: a causal dilated-CNN encoder over time-series
//! features whose last-position output is concatenated with static and
//! endogenous features into an MLP head.
//!
//! Two forward paths exist: a tape-traced one for training and a plain f64
//! one for evaluation and probing. They share the parameter layout and are
//! tested to agree bit-for-bit. Kernel width is fixed at 2; with the default
//! dilations 1,2,4,8,16 the receptive field is exactly the 32-period history
//! window.

use crate::autodiff::{Array, Tape, Var};
use crate::rng::{tag, CounterRng};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const KERNEL_WIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Nonnegative order quantities (hard clamp at zero).
    Control,
    /// Raw per-quantile demand forecasts.
    Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// History window H: number of past observations the encoder sees.
    pub history: usize,
    /// Time-series channels (demand, plus any extra feature channels).
    pub ts_features: usize,
    pub static_features: usize,
    pub endo_dim: usize,
    pub dilations: Vec<usize>,
    pub cnn_channels: usize,
    pub mlp_layers: usize,
    pub mlp_width: usize,
    pub action_dim: usize,
    pub head_mode: HeadMode,
    #[serde(default)]
    pub quantile_levels: Vec<f64>,
}

/// Doubling dilations whose receptive field exactly covers a
/// power-of-two history window.
pub fn default_dilations(history: usize) -> Vec<usize> {
    let mut dils = Vec::new();
    let mut d = 1;
    while d * 2 <= history.max(2) {
        dils.push(d);
        d *= 2;
    }
    dils
}

impl PolicyConfig {
    pub fn control(
        history: usize,
        ts_features: usize,
        static_features: usize,
        endo_dim: usize,
        action_dim: usize,
    ) -> Self {
        PolicyConfig {
            history,
            ts_features,
            static_features,
            endo_dim,
            dilations: default_dilations(history),
            cnn_channels: 8,
            mlp_layers: 2,
            mlp_width: 32,
            action_dim,
            head_mode: HeadMode::Control,
            quantile_levels: Vec::new(),
        }
    }

    pub fn quantiles(history: usize, ts_features: usize, levels: Vec<f64>) -> Self {
        PolicyConfig {
            history,
            ts_features,
            static_features: 0,
            endo_dim: 0,
            dilations: default_dilations(history),
            cnn_channels: 8,
            mlp_layers: 2,
            mlp_width: 32,
            action_dim: levels.len(),
            head_mode: HeadMode::Quantiles,
            quantile_levels: levels,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let cfg = |msg: String| Err(crate::Error::Config(msg));
        if self.ts_features == 0 || self.cnn_channels == 0 {
            return cfg("ts_features and cnn_channels must be >= 1".into());
        }
        if self.mlp_width == 0 || self.mlp_layers == 0 {
            return cfg("zero-width or zero-depth MLP".into());
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|d| *d == 0) {
            return cfg("dilations must be nonempty and positive".into());
        }
        let max_dil = *self.dilations.iter().max().unwrap();
        if max_dil * (KERNEL_WIDTH - 1) >= self.history {
            return cfg(format!(
                "receptive field does not fit: max dilation {max_dil} with K={KERNEL_WIDTH} needs history > {}",
                max_dil * (KERNEL_WIDTH - 1)
            ));
        }
        match self.head_mode {
            HeadMode::Control => {
                if !(1..=2).contains(&self.action_dim) {
                    return cfg(format!("control head needs 1 or 2 actions, got {}", self.action_dim));
                }
                if !self.quantile_levels.is_empty() {
                    return cfg("quantile_levels set in control mode".into());
                }
            }
            HeadMode::Quantiles => {
                if self.quantile_levels.is_empty() {
                    return cfg("quantile mode needs quantile_levels".into());
                }
                if self.action_dim != self.quantile_levels.len() {
                    return cfg("action_dim must equal the number of quantile levels".into());
                }
                if self.static_features != 0 || self.endo_dim != 0 {
                    return cfg("quantile mode takes time-series inputs only".into());
                }
                let ok = self
                    .quantile_levels
                    .windows(2)
                    .all(|w| w[0] < w[1])
                    && self.quantile_levels.iter().all(|q| *q > 0.0 && *q < 1.0);
                if !ok {
                    return cfg("quantile_levels must be strictly increasing within (0,1)".into());
                }
            }
        }
        Ok(())
    }

    /// Width of the MLP input: encoder output + static + endogenous.
    pub fn mlp_input_dim(&self) -> usize {
        self.cnn_channels + self.static_features + self.endo_dim
    }

    pub fn output_dim(&self) -> usize {
        self.action_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Array, // [Cout, Cin, K]
    pub bias: Array,   // [Cout]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array, // [In, Out]
    pub bias: Array,   // [Out]
}

/// All trainable weights, with the config that determines their shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub conv: Vec<ConvLayer>,
    pub mlp: Vec<Dense>,
    pub head: Dense,
}

/// Uniform(-a, a) with a = 1/sqrt(fan-in), drawn from a named stream so
/// every tensor is reproducible independently of init order. The head bias
/// starts at +1 in control mode to keep initial actions inside the clamp's
/// active region.
pub fn init_params(config: &PolicyConfig, seed: u64) -> crate::Result<PolicyParams> {
    config.validate()?;
    let uniform_tensor = |label: &str, layer: usize, dims: &[usize], fan_in: usize| {
        let mut rng = CounterRng::new(seed, &[tag(label), layer as u64]);
        let a = 1.0 / (fan_in as f64).sqrt();
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.uniform_in(-a, a))
            .collect();
        Array::from_vec(data, dims)
    };

    let mut conv = Vec::with_capacity(config.dilations.len());
    for (i, _) in config.dilations.iter().enumerate() {
        let cin = if i == 0 { config.ts_features } else { config.cnn_channels };
        let fan_in = cin * KERNEL_WIDTH;
        conv.push(ConvLayer {
            kernel: uniform_tensor("conv_kernel", i, &[config.cnn_channels, cin, KERNEL_WIDTH], fan_in),
            bias: uniform_tensor("conv_bias", i, &[config.cnn_channels], fan_in),
        });
    }

    let mut mlp = Vec::with_capacity(config.mlp_layers);
    for j in 0..config.mlp_layers {
        let input = if j == 0 { config.mlp_input_dim() } else { config.mlp_width };
        mlp.push(Dense {
            weight: uniform_tensor("mlp_weight", j, &[input, config.mlp_width], input),
            bias: uniform_tensor("mlp_bias", j, &[config.mlp_width], input),
        });
    }

    let head_in = config.mlp_width;
    let mut head = Dense {
        weight: uniform_tensor("head_weight", 0, &[head_in, config.output_dim()], head_in),
        bias: uniform_tensor("head_bias", 0, &[config.output_dim()], head_in),
    };
    if config.head_mode == HeadMode::Control {
        head.bias = Array::full(&[config.output_dim()], 1.0);
    }

    Ok(PolicyParams { config: config.clone(), conv, mlp, head })
}

impl PolicyParams {
    /// Canonical (name, tensor) order used by the optimizer and checkpoints.
    pub fn tensors(&self) -> Vec<(String, &Array)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &layer.kernel));
            out.push((format!("conv{i}.bias"), &layer.bias));
        }
        for (j, layer) in self.mlp.iter().enumerate() {
            out.push((format!("mlp{j}.weight"), &layer.weight));
            out.push((format!("mlp{j}.bias"), &layer.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array> {
        let mut out: Vec<&mut Array> = Vec::new();
        for layer in &mut self.conv {
            out.push(&mut layer.kernel);
            out.push(&mut layer.bias);
        }
        for layer in &mut self.mlp {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, a)| a.len()).sum()
    }

    /// Register every tensor as a gradient-requiring leaf on a tape.
    pub fn register(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            conv: self
                .conv
                .iter()
                .map(|l| (tape.leaf(l.kernel.clone(), true), tape.leaf(l.bias.clone(), true)))
                .collect(),
            mlp: self
                .mlp
                .iter()
                .map(|l| (tape.leaf(l.weight.clone(), true), tape.leaf(l.bias.clone(), true)))
                .collect(),
            head: (
                tape.leaf(self.head.weight.clone(), true),
                tape.leaf(self.head.bias.clone(), true),
            ),
            dilations: self.config.dilations.clone(),
            head_mode: self.config.head_mode,
        }
    }

    // ----- pure (f64) forward path -----

    /// Run the conv encoder over a full multi-channel trace. `channels` are
    /// equal-length time series; returns `[cnn_channels][t_len]` rows.
    pub fn encode_trace(&self, channels: &[&[f64]]) -> Vec<Vec<f64>> {
        assert_eq!(channels.len(), self.config.ts_features, "channel count mismatch");
        let t_len = channels[0].len();
        let mut cur: Vec<Vec<f64>> = channels.iter().map(|c| c.to_vec()).collect();
        for (layer, &dilation) in self.conv.iter().zip(&self.config.dilations) {
            let cout = self.config.cnn_channels;
            let cin = cur.len();
            let kv = layer.kernel.values();
            let bv = layer.bias.values();
            let mut next = vec![vec![0.0; t_len]; cout];
            for (co, row) in next.iter_mut().enumerate() {
                row.fill(bv[co]);
                for (ci, irow) in cur.iter().enumerate() {
                    for k in 0..KERNEL_WIDTH {
                        let w = kv[(co * cin + ci) * KERNEL_WIDTH + k];
                        if w == 0.0 {
                            continue;
                        }
                        let shift = k * dilation;
                        for t in shift..t_len {
                            row[t] += w * irow[t - shift];
                        }
                    }
                }
                for v in row.iter_mut() {
                    *v = elu(*v);
                }
            }
            cur = next;
        }
        cur
    }

    /// MLP head on an encoder column plus static/endogenous features.
    /// Control mode clamps at zero; quantile mode returns raw outputs.
    pub fn head_from_features(&self, enc: &[f64], statics: &[f64], endo: &[f64]) -> Vec<f64> {
        debug_assert_eq!(enc.len(), self.config.cnn_channels);
        debug_assert_eq!(statics.len(), self.config.static_features);
        debug_assert_eq!(endo.len(), self.config.endo_dim);
        let mut z: Vec<f64> = Vec::with_capacity(self.config.mlp_input_dim());
        z.extend_from_slice(enc);
        z.extend_from_slice(statics);
        z.extend_from_slice(endo);
        for layer in &self.mlp {
            z = dense_forward(layer, &z);
            for v in z.iter_mut() {
                *v = elu(*v);
            }
        }
        let mut out = dense_forward(&self.head, &z);
        if self.config.head_mode == HeadMode::Control {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Single-window forward: `x_ts` is `[ts_features][history]`; the head
    /// reads the encoder at the last position. Control mode only.
    pub fn forward(&self, x_ts: &[&[f64]], statics: &[f64], endo: &[f64]) -> crate::Result<Vec<f64>> {
        if self.config.head_mode != HeadMode::Control {
            return Err(crate::Error::Usage(
                "forward() is for control mode; use forward_quantiles".into(),
            ));
        }
        Ok(self.window_output(x_ts, statics, endo))
    }

    /// Single-window quantile forecast (no static/endogenous inputs).
    pub fn forward_quantiles(&self, x_ts: &[&[f64]]) -> crate::Result<Vec<f64>> {
        if self.config.head_mode != HeadMode::Quantiles {
            return Err(crate::Error::Usage(
                "forward_quantiles() requires a quantile-mode policy".into(),
            ));
        }
        Ok(self.window_output(x_ts, &[], &[]))
    }

    fn window_output(&self, x_ts: &[&[f64]], statics: &[f64], endo: &[f64]) -> Vec<f64> {
        assert!(
            x_ts.iter().all(|c| c.len() == self.config.history),
            "shape error: window length must equal history"
        );
        let enc = self.encode_trace(x_ts);
        let last = self.config.history - 1;
        let col: Vec<f64> = enc.iter().map(|row| row[last]).collect();
        self.head_from_features(&col, statics, endo)
    }

    /// Exact directional derivative of the head outputs along an
    /// endogenous-input direction (forward-mode tangent through the MLP; the
    /// encoder column is unaffected by endogenous inputs). Returns
    /// (outputs, d outputs / d direction). Kink conventions match the tape:
    /// elu'(0) = 1, clamp derivative 0 at 0.
    pub fn head_jvp(
        &self,
        enc: &[f64],
        statics: &[f64],
        endo: &[f64],
        endo_dir: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(endo_dir.len(), self.config.endo_dim);
        let mut z: Vec<f64> = Vec::with_capacity(self.config.mlp_input_dim());
        z.extend_from_slice(enc);
        z.extend_from_slice(statics);
        z.extend_from_slice(endo);
        let mut u = vec![0.0; enc.len() + statics.len()];
        u.extend_from_slice(endo_dir);
        for layer in &self.mlp {
            let pre = dense_forward(layer, &z);
            let tan = dense_tangent(layer, &u);
            z = Vec::with_capacity(pre.len());
            u = Vec::with_capacity(pre.len());
            for (p, t) in pre.iter().zip(tan) {
                z.push(elu(*p));
                u.push(t * if *p >= 0.0 { 1.0 } else { p.exp() });
            }
        }
        let pre = dense_forward(&self.head, &z);
        let tan = dense_tangent(&self.head, &u);
        let mut out = pre.clone();
        let mut dout = tan;
        if self.config.head_mode == HeadMode::Control {
            for (o, d) in out.iter_mut().zip(dout.iter_mut()) {
                if *o <= 0.0 {
                    *o = 0.0;
                    *d = 0.0;
                }
            }
        }
        (out, dout)
    }
}

fn dense_tangent(layer: &Dense, u: &[f64]) -> Vec<f64> {
    let dims = layer.weight.dims();
    let (input, output) = (dims[0], dims[1]);
    debug_assert_eq!(u.len(), input);
    let w = layer.weight.values();
    let mut out = vec![0.0; output];
    for (i, &ui) in u.iter().enumerate() {
        if ui == 0.0 {
            continue;
        }
        let row = &w[i * output..(i + 1) * output];
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += ui * row[o];
        }
    }
    out
}

// Accumulation order matches the traced matmul-then-bias path exactly, so
// the pure and tape forwards agree bit for bit.
fn dense_forward(layer: &Dense, z: &[f64]) -> Vec<f64> {
    let dims = layer.weight.dims();
    let (input, output) = (dims[0], dims[1]);
    debug_assert_eq!(z.len(), input);
    let w = layer.weight.values();
    let mut out = vec![0.0; output];
    for (i, &zi) in z.iter().enumerate() {
        if zi == 0.0 {
            continue;
        }
        let row = &w[i * output..(i + 1) * output];
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += zi * row[o];
        }
    }
    for (acc, b) in out.iter_mut().zip(layer.bias.values()) {
        *acc += b;
    }
    out
}

#[inline]
fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Tape handles for registered policy parameters.
pub struct PolicyVars {
    pub conv: Vec<(Var, Var)>,
    pub mlp: Vec<(Var, Var)>,
    pub head: (Var, Var),
    dilations: Vec<usize>,
    head_mode: HeadMode,
}

impl PolicyVars {
    /// All parameter vars in the same canonical order as
    /// [`PolicyParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in &self.conv {
            out.push(*k);
            out.push(*b);
        }
        for (w, b) in &self.mlp {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.head.0);
        out.push(self.head.1);
        out
    }

    /// Traced conv encoder over `[B, F, T]`, ELU after every layer.
    pub fn encode(&self, tape: &mut Tape, x_ts: Var) -> Var {
        let mut cur = x_ts;
        for ((kernel, bias), &dilation) in self.conv.iter().zip(&self.dilations) {
            let conv = tape.causal_conv1d(cur, *kernel, *bias, dilation);
            cur = tape.elu(conv);
        }
        cur
    }

    /// Traced MLP head on `[B, C]` encoder output plus optional `[B, S]`
    /// statics and `[B, E]` endo blocks. Returns `[B, A]`.
    pub fn head_at(&self, tape: &mut Tape, enc_t: Var, statics: Option<Var>, endo: Option<Var>) -> Var {
        let mut parts = vec![enc_t];
        if let Some(s) = statics {
            parts.push(s);
        }
        if let Some(e) = endo {
            parts.push(e);
        }
        let mut z = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)
        };
        for (w, b) in &self.mlp {
            let lin = tape.matmul(z, *w);
            let biased = tape.add(lin, *b);
            z = tape.elu(biased);
        }
        let lin = tape.matmul(z, self.head.0);
        let out = tape.add(lin, self.head.1);
        match self.head_mode {
            HeadMode::Control => tape.relu(out),
            HeadMode::Quantiles => out,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    dims: Vec<usize>,
    /// f64 bit patterns as 16-hex-digit strings, for exact round-trips.
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: PolicyConfig,
    tensors: BTreeMap<String, CheckpointTensor>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint as versioned JSON with hex-encoded f64 bits.
pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> crate::Result<()> {
    let tensors = params
        .tensors()
        .into_iter()
        .map(|(name, a)| {
            (
                name,
                CheckpointTensor {
                    dims: a.dims().to_vec(),
                    values: a.values().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        tensors,
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> crate::Result<PolicyParams> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(crate::Error::Config(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    file.config.validate()?;
    let mut params = init_params(&file.config, 0)?;
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (name, slot) in names.iter().zip(params.tensors_mut()) {
        let t = file.tensors.get(name).ok_or_else(|| {
            crate::Error::Config(format!("checkpoint is missing tensor {name}"))
        })?;
        if t.dims != slot.dims() {
            return Err(crate::Error::Config(format!(
                "checkpoint tensor {name} has dims {:?}, expected {:?}",
                t.dims,
                slot.dims()
            )));
        }
        let mut data = Vec::with_capacity(t.values.len());
        for hex in &t.values {
            let bits = u64::from_str_radix(hex, 16).map_err(|e| {
                crate::Error::Config(format!("bad hex float in {name}: {e}"))
            })?;
            data.push(f64::from_bits(bits));
        }
        *slot = Array::from_vec(data, &t.dims);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn tiny_config() -> PolicyConfig {
        PolicyConfig {
            history: 8,
            ts_features: 1,
            static_features: 4,
            endo_dim: 1,
            dilations: vec![1, 2, 4],
            cnn_channels: 2,
            mlp_layers: 2,
            mlp_width: 8,
            action_dim: 1,
            head_mode: HeadMode::Control,
            quantile_levels: vec![],
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let cfg = tiny_config();
        let a = init_params(&cfg, 11).unwrap();
        let b = init_params(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_shape_enumeration() {
        // independent count: walk the config shapes by hand
        let cfg = PolicyConfig::control(32, 1, 4, 1, 1);
        let params = init_params(&cfg, 0).unwrap();
        let mut want = 0;
        let mut cin = 1;
        for _ in &cfg.dilations {
            want += 8 * cin * 2 + 8; // kernel + bias
            cin = 8;
        }
        let mut input = 8 + 4 + 1;
        for _ in 0..2 {
            want += input * 32 + 32;
            input = 32;
        }
        want += 32 + 1; // head
        assert_eq!(params.param_count(), want);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config();
        cfg.mlp_width = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.dilations = vec![1, 2, 4, 8]; // receptive field 16 > history 8
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config();
        cfg.head_mode = HeadMode::Quantiles;
        assert!(cfg.validate().is_err()); // missing levels

        let cfg = PolicyConfig::quantiles(8, 1, vec![0.1, 0.5, 0.5]);
        assert!(cfg.validate().is_err()); // not strictly increasing
    }

    #[test]
    fn zero_weights_make_a_constant_net() {
        let cfg = tiny_config();
        let mut params = init_params(&cfg, 3).unwrap();
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        params.head.bias = Array::full(&[1], 1.0);
        let window = vec![5.0; 8];
        let x: Vec<&[f64]> = vec![&window];
        let out = params.forward(&x, &[1.0, 2.0, 3.0, 4.0], &[7.0]).unwrap();
        assert_eq!(out, vec![1.0]);

        params.head.bias = Array::full(&[1], -1.0);
        let out = params.forward(&x, &[1.0, 2.0, 3.0, 4.0], &[7.0]).unwrap();
        assert_eq!(out, vec![0.0]); // clamped
    }

    #[test]
    fn quantile_head_shape_and_mode_errors() {
        let levels = vec![0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99];
        let cfg = PolicyConfig::quantiles(8, 1, levels.clone());
        let mut params = init_params(&cfg, 5).unwrap();
        let window = vec![3.0; 8];
        let x: Vec<&[f64]> = vec![&window];
        let out = params.forward_quantiles(&x).unwrap();
        assert_eq!(out.len(), 7);
        assert!(params.forward(&x, &[], &[]).is_err());

        // zero-weight quantile net outputs its bias vector, unclamped
        for t in params.tensors_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        params.head.bias = Array::from_vec(vec![-1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &[7]);
        let out = params.forward_quantiles(&x).unwrap();
        assert_eq!(out, vec![-1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);

        let control = init_params(&tiny_config(), 1).unwrap();
        let xs: Vec<&[f64]> = vec![&window];
        assert!(control.forward_quantiles(&xs).is_err());
    }

    #[test]
    fn control_outputs_are_nonnegative_and_pure() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 9).unwrap();
        let mut rng = CounterRng::new(1, &[tag("fwd")]);
        for _ in 0..100 {
            let window: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.0, 200.0)).collect();
            let statics: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.0, 100.0)).collect();
            let endo = [rng.uniform_in(0.0, 300.0)];
            let x: Vec<&[f64]> = vec![&window];
            let a = params.forward(&x, &statics, &endo).unwrap();
            let b = params.forward(&x, &statics, &endo).unwrap();
            assert!(a[0] >= 0.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn receptive_field_limits_lookback() {
        // default dilations with K=2 give a receptive field of exactly H, so
        // changing the observation just outside the window must not matter,
        // while the newest in-window observation must.
        let cfg = PolicyConfig::control(32, 1, 0, 0, 1);
        let params = init_params(&cfg, 77).unwrap();
        let t_len = 40;
        let base: Vec<f64> = (0..t_len).map(|i| ((i * 13 % 7) as f64) + 1.0).collect();
        let enc_base = params.encode_trace(&[&base]);
        let position = 35; // reads positions 4..=35

        let mut outside = base.clone();
        outside[3] += 50.0;
        let enc_out = params.encode_trace(&[&outside]);
        for c in 0..cfg.cnn_channels {
            assert_eq!(enc_base[c][position], enc_out[c][position]);
        }

        let mut inside = base.clone();
        inside[4] += 50.0;
        let enc_in = params.encode_trace(&[&inside]);
        assert!((0..cfg.cnn_channels).any(|c| enc_base[c][position] != enc_in[c][position]));
    }

    #[test]
    fn batch_equivariance_of_traced_forward() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 21).unwrap();
        let mut rng = CounterRng::new(2, &[tag("batch")]);
        let batch = 5;
        let mut windows: Vec<Vec<f64>> = Vec::new();
        let mut statics: Vec<Vec<f64>> = Vec::new();
        let mut endos: Vec<f64> = Vec::new();
        for _ in 0..batch {
            windows.push((0..8).map(|_| rng.uniform_in(0.0, 50.0)).collect());
            statics.push((0..4).map(|_| rng.uniform_in(0.0, 20.0)).collect());
            endos.push(rng.uniform_in(0.0, 60.0));
        }
        let run = |order: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let mut xdata = Vec::new();
            let mut sd = Vec::new();
            let mut ed = Vec::new();
            for &i in order {
                xdata.extend_from_slice(&windows[i]);
                sd.extend_from_slice(&statics[i]);
                ed.push(endos[i]);
            }
            let x = tape.constant(Array::from_vec(xdata, &[batch, 1, 8]));
            let s = tape.constant(Array::from_vec(sd, &[batch, 4]));
            let e = tape.constant(Array::from_vec(ed, &[batch, 1]));
            let enc = vars.encode(&mut tape, x);
            let enc_last = tape.select_time(enc, 7);
            let act = vars.head_at(&mut tape, enc_last, Some(s), Some(e));
            tape.value(act).values().to_vec()
        };
        let forward_order = run(&[0, 1, 2, 3, 4]);
        let permuted = run(&[4, 2, 0, 3, 1]);
        for (slot, &src) in [4usize, 2, 0, 3, 1].iter().enumerate() {
            assert_eq!(permuted[slot], forward_order[src]);
        }
    }

    #[test]
    fn traced_and_pure_forward_agree_bitwise() {
        let cfg = tiny_config();
        let params = init_params(&cfg, 33).unwrap();
        let mut rng = CounterRng::new(3, &[tag("agree")]);
        let window: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.0, 100.0)).collect();
        let statics: Vec<f64> = (0..4).map(|_| rng.uniform_in(0.0, 50.0)).collect();
        let endo = [rng.uniform_in(0.0, 80.0)];

        let x: Vec<&[f64]> = vec![&window];
        let pure = params.forward(&x, &statics, &endo).unwrap();

        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(Array::from_vec(window.clone(), &[1, 1, 8]));
        let sv = tape.constant(Array::from_vec(statics.to_vec(), &[1, 4]));
        let ev = tape.constant(Array::from_vec(endo.to_vec(), &[1, 1]));
        let enc = vars.encode(&mut tape, xv);
        let enc_last = tape.select_time(enc, 7);
        let act = vars.head_at(&mut tape, enc_last, Some(sv), Some(ev));
        let traced = tape.value(act).values().to_vec();
        assert_eq!(pure, traced);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = PolicyConfig::control(16, 2, 4, 3, 2);
        let params = init_params(&cfg, 1234).unwrap();
        let dir = std::env::temp_dir().join("invlab_policy_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        save_checkpoint(&path, &params).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(params, back);
        for ((_, a), (_, b)) in params.tensors().iter().zip(back.tensors().iter()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let err = load_checkpoint(Path::new("/nonexistent/ckpt.json"));
        assert!(err.is_err());
    }
}
