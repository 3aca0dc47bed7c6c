//! File formats: run configuration, datasets, checkpoints, metrics and
//! heatmap tables.
//!
//! Every writer goes through [`write_atomic`], so readers never observe a
//! half-written file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace, EndKind, EnvSpec};
use crate::error::{Error, Result};
use crate::estimators::{Normalizer, Trajectory};
use crate::numerics::{DenseParams, Linear};
use crate::policy::{Conditioning, PolicyNet, ValueNet};
use crate::target_model::TargetModel;
use crate::trainer::{IterationMetrics, TrainConfig};

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration

/// A training configuration plus where and how often to write artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    /// Rewrite the metrics file every this many iterations.
    pub log_every: usize,
    /// Write a numbered checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

/// `(section, key, TrainConfig field)`. The order here is the order of the
/// rendered file.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("run", "seed", "seed"),
    ("run", "iterations", "iterations"),
    ("run", "out_dir", ""),
    ("run", "log_every", ""),
    ("run", "checkpoint_every", ""),
    ("env", "name", "env"),
    ("env", "gamma", "gamma"),
    ("env", "lambda", "lambda"),
    ("algorithm", "kind", "algorithm"),
    ("algorithm", "weighted", "weighted"),
    ("algorithm", "beta", "beta"),
    ("algorithm", "w_max", "w_max"),
    ("target", "mode", "target_mode"),
    ("target", "temperature", "target_temperature"),
    ("target", "std_floor", "target_std_floor"),
    ("network", "architecture", "architecture"),
    ("network", "hidden_width", "hidden_width"),
    ("network", "embed_width", "embed_width"),
    ("network", "init_log_std", "init_log_std"),
    ("network", "policy_step_size", "policy_step_size"),
    ("network", "value_step_size", "value_step_size"),
    ("training", "buffer_capacity", "buffer_capacity"),
    ("training", "samples_per_iteration", "samples_per_iteration"),
    ("training", "batch_size", "batch_size"),
    ("training", "value_steps", "value_steps"),
    ("training", "policy_steps", "policy_steps"),
    ("training", "eval_episodes", "eval_episodes"),
    ("training", "diagnostic_episodes", "diagnostic_episodes"),
    ("training", "offline_value_warmup", "offline_value_warmup"),
    ("training", "bootstrap_timeouts", "bootstrap_timeouts"),
];

/// Line (1-based) of `key` inside `[section]`, or of the section header when
/// `key` is empty.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn at_line(text: &str, section: &str, key: &str, msg: String) -> Error {
    match line_of(text, section, key) {
        Some(n) => Error::Config(format!("line {n}: {msg}")),
        None => Error::Config(msg),
    }
}

fn as_usize(text: &str, section: &str, key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| at_line(text, section, key, format!("[{section}] {key} must be a non-negative integer")))
}

/// Parses a configuration file. Returns the configuration and one warning
/// per key that was missing and filled from the defaults.
pub fn parse_config(text: &str) -> Result<(RunConfig, Vec<String>)> {
    let doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("invalid configuration: {e}")))?;
    let defaults = RunConfig::default();
    let mut flat = match toml::Value::try_from(&defaults.train) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(Error::Config("default configuration is not a table".into())),
    };
    let mut run = defaults.clone();
    let mut warnings = Vec::new();

    for (section, value) in &doc {
        let toml::Value::Table(table) = value else {
            return Err(at_line(text, section, "", format!("top-level key '{section}' must be a [section]")));
        };
        if !CONFIG_KEYS.iter().any(|(s, _, _)| s == section) {
            return Err(at_line(text, section, "", format!("unknown section [{section}]")));
        }
        for key in table.keys() {
            if !CONFIG_KEYS.iter().any(|(s, k, _)| s == section && k == key) {
                return Err(at_line(text, section, key, format!("unknown key '{key}' in [{section}]")));
            }
        }
    }

    for &(section, key, field) in CONFIG_KEYS {
        let Some(v) = doc.get(section).and_then(|t| t.get(key)) else {
            let shown = if field.is_empty() {
                match key {
                    "out_dir" => format!("{:?}", defaults.out_dir.display().to_string()),
                    "log_every" => defaults.log_every.to_string(),
                    _ => defaults.checkpoint_every.to_string(),
                }
            } else {
                flat[field].to_string()
            };
            warnings.push(format!("missing [{section}] {key}; using default {shown}"));
            continue;
        };
        match key {
            "out_dir" => {
                run.out_dir = PathBuf::from(v.as_str().ok_or_else(|| {
                    at_line(text, section, key, "[run] out_dir must be a string".into())
                })?)
            }
            "log_every" => run.log_every = as_usize(text, section, key, v)?.max(1),
            "checkpoint_every" => run.checkpoint_every = as_usize(text, section, key, v)?,
            _ => {
                // Integers are accepted where floats are expected.
                let value = match (&flat[field], v) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                    _ => v.clone(),
                };
                if std::mem::discriminant(&flat[field]) != std::mem::discriminant(&value) {
                    return Err(at_line(
                        text,
                        section,
                        key,
                        format!("[{section}] {key} has the wrong type (expected {})", flat[field].type_str()),
                    ));
                }
                flat.insert(field.to_string(), value);
            }
        }
    }

    run.train = toml::Value::Table(flat).try_into().map_err(|e: toml::de::Error| {
        let msg = e.message().to_string();
        // Point at the offending key when the message names a variant or value.
        let hit = CONFIG_KEYS
            .iter()
            .filter(|(_, _, f)| !f.is_empty())
            .find(|(s, k, _)| {
                doc.get(*s)
                    .and_then(|t| t.get(*k))
                    .and_then(|v| v.as_str())
                    .is_some_and(|v| msg.contains(v))
            });
        match hit {
            Some((s, k, _)) => at_line(text, s, k, format!("[{s}] {k}: {msg}")),
            None => Error::Config(msg),
        }
    })?;
    run.train.validate().map_err(|e| match e {
        Error::Config(msg) => {
            let hit = CONFIG_KEYS.iter().find(|(_, _, f)| !f.is_empty() && msg.starts_with(f));
            match hit {
                Some((s, k, _)) => at_line(text, s, k, msg),
                None => Error::Config(msg),
            }
        }
        other => other,
    })?;
    Ok((run, warnings))
}

pub fn read_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

/// Renders a configuration with every key present.
pub fn render_config(run: &RunConfig) -> Result<String> {
    let flat = match toml::Value::try_from(&run.train) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(Error::Config("configuration is not a table".into())),
    };
    let mut out = String::new();
    let mut section = "";
    for &(s, key, field) in CONFIG_KEYS {
        if s != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{s}]\n"));
            section = s;
        }
        let value = match key {
            "out_dir" => toml::Value::String(run.out_dir.display().to_string()),
            "log_every" => toml::Value::Integer(run.log_every as i64),
            "checkpoint_every" => toml::Value::Integer(run.checkpoint_every as i64),
            _ => flat[field].clone(),
        };
        out.push_str(&format!("{key} = {value}\n"));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Datasets

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub env: String,
    pub obs_dim: usize,
    /// "continuous" or "discrete".
    pub action_kind: String,
    /// Action vector length, or the number of discrete actions.
    pub action_dim: usize,
}

impl DatasetHeader {
    pub fn for_env(spec: &EnvSpec) -> Self {
        let (action_kind, action_dim) = match &spec.action_space {
            ActionSpace::Continuous { low, .. } => ("continuous", low.len()),
            ActionSpace::Discrete { n } => ("discrete", *n),
        };
        Self {
            version: DATASET_VERSION,
            env: spec.name.clone(),
            obs_dim: spec.obs_dim,
            action_kind: action_kind.into(),
            action_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TerminalKind {
    None,
    Goal,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    traj: usize,
    step: usize,
    obs: Vec<f64>,
    action: Action,
    reward: f64,
    terminal: TerminalKind,
    /// Observation after the last step; present on the last record only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next_obs: Option<Vec<f64>>,
}

/// Serializes whole trajectories as JSON lines: one header line, then one
/// line per transition.
pub fn dataset_to_string(header: &DatasetHeader, trajectories: &[Trajectory]) -> Result<String> {
    let json = |e: serde_json::Error| Error::Format(e.to_string());
    let mut out = serde_json::to_string(header).map_err(json)?;
    out.push('\n');
    for (id, traj) in trajectories.iter().enumerate() {
        let n = traj.len();
        for step in 0..n {
            let last = step + 1 == n;
            let rec = DatasetRecord {
                traj: id,
                step,
                obs: traj.observations[step].clone(),
                action: traj.actions[step].clone(),
                reward: traj.rewards[step],
                terminal: match (last, traj.end) {
                    (false, _) => TerminalKind::None,
                    (true, EndKind::Goal) => TerminalKind::Goal,
                    (true, EndKind::Timeout) => TerminalKind::Timeout,
                },
                next_obs: last.then(|| traj.final_observation.clone()),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(json)?);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, trajectories: &[Trajectory]) -> Result<()> {
    write_atomic(path, dataset_to_string(header, trajectories)?.as_bytes())
}

pub fn parse_dataset(text: &str) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::Format("dataset is empty (no header)".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| Error::Format(format!("line 1: bad header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
    }
    let discrete = match header.action_kind.as_str() {
        "continuous" => false,
        "discrete" => true,
        other => return Err(Error::Format(format!("unknown action kind '{other}'"))),
    };

    let mut out: Vec<Trajectory> = Vec::new();
    let mut open = false;
    for (i, line) in lines {
        let ln = i + 1;
        let bad = |msg: String| Error::Format(format!("line {ln}: {msg}"));
        let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if rec.obs.len() != header.obs_dim {
            return Err(bad(format!("observation has {} entries, header says {}", rec.obs.len(), header.obs_dim)));
        }
        match (&rec.action, discrete) {
            (Action::Continuous(a), false) if a.len() == header.action_dim => {}
            (Action::Discrete(k), true) if *k < header.action_dim => {}
            _ => return Err(bad("action does not match the header".into())),
        }
        if !open {
            if rec.traj != out.len() || rec.step != 0 {
                return Err(bad(format!(
                    "expected trajectory {} step 0, found trajectory {} step {}",
                    out.len(),
                    rec.traj,
                    rec.step
                )));
            }
            out.push(Trajectory {
                observations: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                commanded: Vec::new(),
                end: EndKind::Timeout,
                final_observation: Vec::new(),
            });
            open = true;
        }
        let n_open = out.len();
        let traj = out.last_mut().expect("a trajectory is open");
        if rec.traj + 1 != n_open || rec.step != traj.len() {
            return Err(bad(format!(
                "trajectory {} step {} breaks contiguity",
                rec.traj, rec.step
            )));
        }
        traj.observations.push(rec.obs);
        traj.actions.push(rec.action);
        traj.rewards.push(rec.reward);
        traj.commanded.push(0.0);
        match rec.terminal {
            TerminalKind::None => {
                if rec.next_obs.is_some() {
                    return Err(bad("next_obs is only allowed on the last step".into()));
                }
            }
            kind => {
                traj.end = if kind == TerminalKind::Goal { EndKind::Goal } else { EndKind::Timeout };
                traj.final_observation = rec
                    .next_obs
                    .ok_or_else(|| bad("last step of a trajectory needs next_obs".into()))?;
                if traj.final_observation.len() != header.obs_dim {
                    return Err(bad("next_obs has the wrong length".into()));
                }
                open = false;
            }
        }
    }
    if open {
        return Err(Error::Format(format!(
            "trajectory {} has no terminal record (dataset lacks trajectory boundaries)",
            out.len() - 1
        )));
    }
    Ok((header, out))
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Trajectory>)> {
    parse_dataset(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout, all integers u64 little-endian:
//   b"RCPCKPT1"
//   tensor count
//   per tensor: name length, name (UTF-8), rows, cols
//   per tensor, in header order: rows*cols f64 little-endian, row-major

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RCPCKPT1";

/// Everything needed to resume evaluation of a trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyNet,
    pub value: Option<ValueNet>,
    pub target: TargetModel,
    pub normalizer: Normalizer,
}

struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn dense_tensors(prefix: &str, p: &DenseParams, out: &mut Vec<Tensor>) {
    for (l, layer) in p.layers.iter().enumerate() {
        out.push(Tensor {
            name: format!("{prefix}.{l}.weight"),
            rows: layer.fan_out,
            cols: layer.fan_in,
            data: layer.weights.clone(),
        });
        out.push(Tensor {
            name: format!("{prefix}.{l}.bias"),
            rows: 1,
            cols: layer.fan_out,
            data: layer.bias.clone(),
        });
    }
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    dense_tensors("policy.trunk", &ck.policy.trunk, &mut tensors);
    if let Some(ls) = &ck.policy.log_std {
        tensors.push(Tensor { name: "policy.log_std".into(), rows: 1, cols: ls.len(), data: ls.clone() });
    }
    if let Some(e) = &ck.policy.embed {
        dense_tensors("policy.embed", e, &mut tensors);
    }
    if let Some(v) = &ck.value {
        dense_tensors("value", &v.params, &mut tensors);
        tensors.push(Tensor {
            name: "value.normalizer".into(),
            rows: 1,
            cols: 2,
            data: vec![v.normalizer.mean, v.normalizer.std],
        });
    }
    tensors.push(Tensor { name: "target".into(), rows: 1, cols: 2, data: vec![ck.target.mean, ck.target.std] });
    tensors.push(Tensor {
        name: "normalizer".into(),
        rows: 1,
        cols: 2,
        data: vec![ck.normalizer.mean, ck.normalizer.std],
    });

    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend((tensors.len() as u64).to_le_bytes());
    for t in &tensors {
        out.extend((t.name.len() as u64).to_le_bytes());
        out.extend(t.name.as_bytes());
        out.extend((t.rows as u64).to_le_bytes());
        out.extend((t.cols as u64).to_le_bytes());
    }
    for t in &tensors {
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<usize> {
        let b: [u8; 8] = self.take(8)?.try_into().expect("eight bytes");
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("size overflows".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        let b: [u8; 8] = self.take(8)?.try_into().expect("eight bytes");
        Ok(f64::from_le_bytes(b))
    }
}

fn take_dense(tensors: &mut Vec<Tensor>, prefix: &str) -> Result<Option<DenseParams>> {
    let mut layers = Vec::new();
    loop {
        let l = layers.len();
        let w = tensors.iter().position(|t| t.name == format!("{prefix}.{l}.weight"));
        let Some(w) = w else { break };
        let w = tensors.remove(w);
        let b = tensors
            .iter()
            .position(|t| t.name == format!("{prefix}.{l}.bias"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}.{l}.bias")))?;
        let b = tensors.remove(b);
        if b.cols != w.rows || b.rows != 1 {
            return Err(Error::Format(format!("{prefix}.{l}: bias shape does not match weights")));
        }
        let mut layer = Linear::zeros(w.cols, w.rows);
        layer.weights = w.data;
        layer.bias = b.data;
        layers.push(layer);
    }
    if layers.is_empty() {
        return Ok(None);
    }
    let p = DenseParams { layers };
    p.validate().map_err(|e| Error::Format(format!("{prefix}: {e}")))?;
    Ok(Some(p))
}

fn take_pair(tensors: &mut Vec<Tensor>, name: &str) -> Result<Option<(f64, f64)>> {
    let Some(i) = tensors.iter().position(|t| t.name == name) else {
        return Ok(None);
    };
    let t = tensors.remove(i);
    if t.data.len() != 2 {
        return Err(Error::Format(format!("{name} must hold two values")));
    }
    Ok(Some((t.data[0], t.data[1])))
}

/// Decodes a checkpoint for environment `spec`. The conditioning mode is
/// recovered from the stored shapes.
pub fn checkpoint_from_bytes(bytes: &[u8], spec: &EnvSpec) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let count = r.u64()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u64()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rows = r.u64()?;
        let cols = r.u64()?;
        tensors.push(Tensor { name, rows, cols, data: Vec::new() });
    }
    for t in &mut tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| Error::Format("tensor too large".into()))?;
        t.data = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint data".into()));
    }

    let trunk = take_dense(&mut tensors, "policy.trunk")?
        .ok_or_else(|| Error::Format("checkpoint lacks a policy".into()))?;
    let log_std = tensors
        .iter()
        .position(|t| t.name == "policy.log_std")
        .map(|i| tensors.remove(i).data);
    let embed = take_dense(&mut tensors, "policy.embed")?;
    let conditioning = if embed.is_some() {
        Conditioning::Multiply
    } else if trunk.input_dim() == spec.obs_dim + 1 {
        Conditioning::Concat
    } else {
        Conditioning::None
    };
    let policy = PolicyNet {
        conditioning,
        action_space: spec.action_space.clone(),
        trunk,
        log_std,
        embed,
    };
    policy.validate().map_err(|e| Error::Format(format!("policy does not fit {}: {e}", spec.name)))?;
    if policy.obs_dim() != spec.obs_dim {
        return Err(Error::Format(format!("policy observation width does not fit {}", spec.name)));
    }
    let value = match take_dense(&mut tensors, "value")? {
        Some(params) => {
            let (mean, std) = take_pair(&mut tensors, "value.normalizer")?
                .ok_or_else(|| Error::Format("checkpoint lacks value.normalizer".into()))?;
            let v = ValueNet { params, normalizer: Normalizer { mean, std } };
            v.validate().map_err(|e| Error::Format(format!("value: {e}")))?;
            Some(v)
        }
        None => None,
    };
    let (mean, std) =
        take_pair(&mut tensors, "target")?.ok_or_else(|| Error::Format("checkpoint lacks target".into()))?;
    let (nmean, nstd) = take_pair(&mut tensors, "normalizer")?
        .ok_or_else(|| Error::Format("checkpoint lacks normalizer".into()))?;
    if let Some(t) = tensors.first() {
        return Err(Error::Format(format!("unexpected tensor '{}'", t.name)));
    }
    Ok(Checkpoint {
        policy,
        value,
        target: TargetModel { mean, std, ..TargetModel::default() },
        normalizer: Normalizer { mean: nmean, std: nstd },
    })
}

impl Checkpoint {
    pub fn from_trainer(t: &crate::trainer::Trainer) -> Self {
        Self {
            policy: t.policy.clone(),
            value: t.value.clone(),
            target: t.target.clone(),
            normalizer: t.normalizer,
        }
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ck))
}

pub fn read_checkpoint(path: &Path, spec: &EnvSpec) -> Result<Checkpoint> {
    checkpoint_from_bytes(&fs::read(path)?, spec)
}

// ---------------------------------------------------------------------------
// Metrics

/// Column order of the metrics table.
pub const METRICS_COLUMNS: [&str; 8] = [
    "iteration",
    "eval_mean_return",
    "eval_max_return",
    "target_mean",
    "target_std",
    "policy_loss",
    "value_loss",
    "buffer_size",
];

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Metrics table without wall-clock time, so identical runs produce
/// identical bytes.
pub fn metrics_to_csv(rows: &[IterationMetrics]) -> Result<Vec<u8>> {
    let header: Vec<String> = METRICS_COLUMNS.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|m| {
            vec![
                m.iteration.to_string(),
                m.eval_mean_return.to_string(),
                m.eval_max_return.to_string(),
                m.target_mean.to_string(),
                m.target_std.to_string(),
                m.policy_loss.to_string(),
                m.value_loss.to_string(),
                m.buffer_size.to_string(),
            ]
        })
        .collect();
    csv_bytes(&header, &body)
}

pub fn write_metrics(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    write_atomic(path, &metrics_to_csv(rows)?)
}

/// Wall-clock seconds per iteration.
pub fn write_timing(path: &Path, rows: &[IterationMetrics]) -> Result<()> {
    let header = vec!["iteration".to_string(), "wall_clock_seconds".to_string()];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|m| vec![m.iteration.to_string(), m.wall_clock_seconds.to_string()])
        .collect();
    write_atomic(path, &csv_bytes(&header, &body)?)
}

// ---------------------------------------------------------------------------
// Diagnostics and heatmaps

pub fn write_pairs(path: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let header = vec!["commanded".to_string(), "observed".to_string()];
    let body: Vec<Vec<String>> = pairs.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]).collect();
    write_atomic(path, &csv_bytes(&header, &body)?)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let parse = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("{}: row {} is malformed", path.display(), i + 2)))
        };
        out.push((parse(0)?, parse(1)?));
    }
    Ok(out)
}

/// Pearson correlation of the pairs; `None` when either coordinate is
/// constant or there are fewer than two pairs.
pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Two-dimensional histogram over a shared range for both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub edges: Vec<f64>,
    /// `counts[observed_bin][commanded_bin]`.
    pub counts: Vec<Vec<u64>>,
}

pub fn heatmap(pairs: &[(f64, f64)], bins: usize) -> Result<Heatmap> {
    if pairs.is_empty() {
        return Err(Error::NotAvailable("no diagnostic pairs to bin".into()));
    }
    if bins == 0 {
        return Err(Error::Config("heatmap needs at least one bin".into()));
    }
    let lo = pairs.iter().map(|p| p.0.min(p.1)).fold(f64::INFINITY, f64::min);
    let hi = pairs.iter().map(|p| p.0.max(p.1)).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let bin = |v: f64| (((v - lo) / width).floor() as usize).min(bins - 1);
    let mut counts = vec![vec![0u64; bins]; bins];
    for &(commanded, observed) in pairs {
        counts[bin(observed)][bin(commanded)] += 1;
    }
    Ok(Heatmap { edges, counts })
}

/// Rows are observed-value bins, columns commanded-value bins. The header
/// names each column by its `[lo, hi)` edges.
pub fn heatmap_to_csv(h: &Heatmap) -> Result<Vec<u8>> {
    let span = |i: usize| format!("{}:{}", h.edges[i], h.edges[i + 1]);
    let mut header = vec!["observed_lo".to_string(), "observed_hi".to_string()];
    header.extend((0..h.counts.len()).map(|i| format!("commanded_{}", span(i))));
    let rows: Vec<Vec<String>> = h
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![h.edges[i].to_string(), h.edges[i + 1].to_string()];
            r.extend(row.iter().map(|c| c.to_string()));
            r
        })
        .collect();
    csv_bytes(&header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub pairs: usize,
    pub pearson: Option<f64>,
}

/// Bins the recorded pairs of a run directory and writes `heatmap.csv` and
/// `heatmap_summary.json` next to them.
pub fn export_heatmap(run_dir: &Path, bins: usize) -> Result<HeatmapSummary> {
    let src = run_dir.join("diagnostics.csv");
    if !src.exists() {
        return Err(Error::NotAvailable(format!(
            "{} not found; run training with diagnostic_episodes > 0 first",
            src.display()
        )));
    }
    let pairs = read_pairs(&src)?;
    let h = heatmap(&pairs, bins)?;
    write_atomic(&run_dir.join("heatmap.csv"), &heatmap_to_csv(&h)?)?;
    let summary = HeatmapSummary {
        pairs: pairs.len(),
        pearson: pearson(&pairs),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&run_dir.join("heatmap_summary.json"), json.as_bytes())?;
    Ok(summary)
}
