//! Flat key-value experiment configuration with dotted section paths.
//!
//! Format: one `key = value` per line, `#` starts a comment. Sweep axes are
//! declared as `sweep.<existing.key> = v1, v2, ...` and expand to the
//! Cartesian product of all declared axes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use gfl_core::engine::TrainConfig;
use gfl_core::privacy::PerturbationScheme;
use gfl_core::tasks::PartitionSpec;
use gfl_core::Topology;

#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at '{}': {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Raw parsed key-value map, before typing.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(
                    &format!("line {}", idx + 1),
                    format!("expected 'key = value', found '{line}'"),
                ));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(err(&format!("line {}", idx + 1), "empty key"));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(err(&key, "duplicate key"));
            }
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| err(key, "missing required key"))
    }

    fn f64_opt(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.get(key)
            .map(|v| v.parse::<f64>().map_err(|_| err(key, format!("not a number: '{v}'"))))
            .transpose()
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    fn f64_req(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.required(key)?;
        v.parse().map_err(|_| err(key, format!("not a number: '{v}'")))
    }

    fn u64_opt(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.get(key)
            .map(|v| v.parse::<u64>().map_err(|_| err(key, format!("not an integer: '{v}'"))))
            .transpose()
    }

    fn usize_req(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.required(key)?;
        v.parse().map_err(|_| err(key, format!("not an integer: '{v}'")))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            Some(v) => v.parse().map_err(|_| err(key, format!("not an integer: '{v}'"))),
            None => Ok(default),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

/// Inclusive "lo..hi" range, or a single value.
fn parse_range_u64(key: &str, text: &str) -> Result<(u64, u64), ConfigError> {
    let parse_one = |s: &str| -> Result<u64, ConfigError> {
        s.trim()
            .parse()
            .map_err(|_| err(key, format!("not an integer: '{}'", s.trim())))
    };
    match text.split_once("..") {
        Some((lo, hi)) => Ok((parse_one(lo)?, parse_one(hi)?)),
        None => {
            let v = parse_one(text)?;
            Ok((v, v))
        }
    }
}

#[derive(Clone, Debug)]
pub enum TaskSpec {
    Regression {
        units: usize,
        agents: usize,
        samples: usize,
        dim: usize,
        seed: Option<u64>,
    },
    Classification {
        units: usize,
        agents: usize,
        samples: usize,
        dim: usize,
        shift: f64,
        test_size: usize,
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        units: usize,
        agents: usize,
        partition: PartitionSpec,
        classification: bool,
    },
}

impl TaskSpec {
    pub fn units(&self) -> usize {
        match self {
            TaskSpec::Regression { units, .. }
            | TaskSpec::Classification { units, .. }
            | TaskSpec::Csv { units, .. } => *units,
        }
    }
}

#[derive(Clone, Debug)]
pub enum GraphSpec {
    Complete,
    Ring,
    Star,
    ErdosRenyi { edge_prob: f64, seed: u64 },
    Edges(Vec<(usize, usize)>),
}

impl GraphSpec {
    pub fn build(&self, units: usize) -> Result<Topology, ConfigError> {
        match self {
            GraphSpec::Complete => Ok(Topology::complete(units)),
            GraphSpec::Ring => Ok(Topology::ring(units)),
            GraphSpec::Star => Ok(Topology::star(units)),
            GraphSpec::ErdosRenyi { edge_prob, seed } => {
                Ok(Topology::erdos_renyi(units, *edge_prob, *seed))
            }
            GraphSpec::Edges(edges) => {
                let topo = Topology::new(units, edges.iter().copied())
                    .map_err(|e| err("graph.edges", e.to_string()))?;
                if let Some(node) = topo.unreachable_node() {
                    return Err(err(
                        "graph.edges",
                        format!("graph is disconnected: node {node} is unreachable"),
                    ));
                }
                Ok(topo)
            }
        }
    }
}

/// One fully typed experiment description (a single sweep point).
#[derive(Clone, Debug)]
pub struct Experiment {
    pub task: TaskSpec,
    pub rho: f64,
    pub graph: GraphSpec,
    pub mu: f64,
    pub rounds: u64,
    pub participants: usize,
    pub epoch_range: (u64, u64),
    pub batch_range: (usize, usize),
    pub scheme_kind: String,
    pub sigma_g_sq: f64,
    pub masking: bool,
    pub gradient_bound: Option<f64>,
    pub threads: Option<usize>,
}

impl Experiment {
    pub fn scheme(&self) -> PerturbationScheme {
        let sigma_g = self.sigma_g_sq.sqrt();
        match self.scheme_kind.as_str() {
            "independent_laplace" => PerturbationScheme::independent_laplace(sigma_g),
            "graph_homomorphic" => PerturbationScheme::graph_homomorphic(sigma_g),
            _ => PerturbationScheme::none(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mu: self.mu,
            rounds: self.rounds,
            participants_per_unit: self.participants,
            epoch_range: self.epoch_range,
            batch_range: self.batch_range,
            scheme: self.scheme(),
            secret_sharing_masks: self.masking,
            seed,
            gradient_bound: self.gradient_bound,
            record_history: false,
        }
    }
}

/// Keys that sweep axes are allowed to target.
const SWEEPABLE: &[&str] = &[
    "train.mu",
    "train.rounds",
    "train.l",
    "train.epochs",
    "train.batch",
    "privacy.scheme",
    "privacy.sigma_g_sq",
    "privacy.masking",
    "loss.rho",
    "task.shift",
];

/// The whole experiment file: base config, sweep axes, seeds, output dir.
#[derive(Clone, Debug)]
pub struct ExperimentFile {
    pub base: RawConfig,
    pub sweep: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let base = RawConfig::parse(text)?;
        let mut sweep = Vec::new();
        for key in base.keys() {
            if let Some(path) = key.strip_prefix("sweep.") {
                if !SWEEPABLE.contains(&path) {
                    return Err(err(key, format!("'{path}' is not a sweepable parameter")));
                }
                let values: Vec<String> = base
                    .get(key)
                    .unwrap()
                    .split(',')
                    .map(|v| v.trim().to_string())
                    .filter(|v| !v.is_empty())
                    .collect();
                if values.is_empty() {
                    return Err(err(key, "sweep axis has no values"));
                }
                sweep.push((path.to_string(), values));
            }
        }
        let seeds = match base.get("seeds") {
            Some(text) => {
                let mut seeds = Vec::new();
                for part in text.split(',') {
                    let part = part.trim();
                    seeds.push(
                        part.parse::<u64>()
                            .map_err(|_| err("seeds", format!("not an integer: '{part}'")))?,
                    );
                }
                seeds
            }
            None => vec![base.u64_opt("train.seed")?.unwrap_or(1)],
        };
        let output_dir = std::env::var("GFL_OUTPUT_DIR")
            .ok()
            .or_else(|| base.get("output.dir").map(str::to_string))
            .unwrap_or_else(|| "out".to_string())
            .into();
        // Validate the base point eagerly so errors surface before any run.
        let file = Self { base, sweep, seeds, output_dir };
        file.experiment_at(&file.point(0))?;
        Ok(file)
    }

    /// Number of sweep points (Cartesian product; 1 when no axes).
    pub fn point_count(&self) -> usize {
        self.sweep.iter().map(|(_, v)| v.len()).product::<usize>().max(1)
    }

    /// Overrides for the idx-th point, in axis declaration order.
    pub fn point(&self, mut idx: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (path, values) in &self.sweep {
            let v = &values[idx % values.len()];
            idx /= values.len();
            out.push((path.clone(), v.clone()));
        }
        out
    }

    pub fn experiment_at(&self, overrides: &[(String, String)]) -> Result<Experiment, ConfigError> {
        let mut cfg = self.base.clone();
        for (path, value) in overrides {
            cfg.set(path, value);
        }
        experiment_from(&cfg)
    }
}

fn experiment_from(cfg: &RawConfig) -> Result<Experiment, ConfigError> {
    let kind = cfg.required("task.kind")?;
    let task = match kind {
        "regression" => TaskSpec::Regression {
            units: cfg.usize_req("task.p")?,
            agents: cfg.usize_req("task.k")?,
            samples: cfg.usize_req("task.n")?,
            dim: cfg.usize_or("task.m", 2)?,
            seed: cfg.u64_opt("task.seed")?,
        },
        "classification" => TaskSpec::Classification {
            units: cfg.usize_req("task.p")?,
            agents: cfg.usize_req("task.k")?,
            samples: cfg.usize_req("task.n")?,
            dim: cfg.usize_or("task.m", 2)?,
            shift: cfg.f64_or("task.shift", 1.0)?,
            test_size: cfg.usize_or("task.test_size", 256)?,
            seed: cfg.u64_opt("task.seed")?,
        },
        "csv" => {
            let path = cfg.required("task.csv_path")?.into();
            let partition = match cfg.get("task.partition").unwrap_or("equal") {
                "equal" => PartitionSpec::Equal,
                other if other.starts_with("counts:") => {
                    let mut counts = Vec::new();
                    for part in other["counts:".len()..].split(',') {
                        counts.push(part.trim().parse().map_err(|_| {
                            err("task.partition", format!("bad count '{}'", part.trim()))
                        })?);
                    }
                    PartitionSpec::Counts(counts)
                }
                other if other.starts_with("dirichlet:") => {
                    let rest = &other["dirichlet:".len()..];
                    let (alpha, seed) = rest.split_once(':').ok_or_else(|| {
                        err("task.partition", "expected dirichlet:<alpha>:<seed>")
                    })?;
                    PartitionSpec::Dirichlet {
                        alpha: alpha.trim().parse().map_err(|_| {
                            err("task.partition", format!("bad alpha '{}'", alpha.trim()))
                        })?,
                        seed: seed.trim().parse().map_err(|_| {
                            err("task.partition", format!("bad seed '{}'", seed.trim()))
                        })?,
                    }
                }
                other => {
                    return Err(err(
                        "task.partition",
                        format!("unknown partition '{other}' (equal | counts:... | dirichlet:a:s)"),
                    ))
                }
            };
            let classification = match cfg.get("task.csv_labels").unwrap_or("regression") {
                "regression" => false,
                "classification" => true,
                other => {
                    return Err(err(
                        "task.csv_labels",
                        format!("unknown label kind '{other}' (regression | classification)"),
                    ))
                }
            };
            TaskSpec::Csv {
                path,
                units: cfg.usize_req("task.p")?,
                agents: cfg.usize_req("task.k")?,
                partition,
                classification,
            }
        }
        other => {
            return Err(err(
                "task.kind",
                format!("unknown task '{other}' (regression | classification | csv)"),
            ))
        }
    };

    let graph = match cfg.get("graph.preset") {
        Some("complete") => GraphSpec::Complete,
        Some("ring") => GraphSpec::Ring,
        Some("star") => GraphSpec::Star,
        Some("erdos_renyi") => GraphSpec::ErdosRenyi {
            edge_prob: cfg.f64_or("graph.edge_prob", 0.3)?,
            seed: cfg.u64_opt("graph.seed")?.unwrap_or(0),
        },
        Some(other) => {
            return Err(err(
                "graph.preset",
                format!("unknown preset '{other}' (complete | ring | star | erdos_renyi)"),
            ))
        }
        None => {
            let text = cfg.required("graph.edges")?;
            let mut edges = Vec::new();
            for part in text.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                let (a, b) = part
                    .split_once('-')
                    .ok_or_else(|| err("graph.edges", format!("expected 'a-b', found '{part}'")))?;
                let a = a.trim().parse().map_err(|_| err("graph.edges", format!("bad node '{a}'")))?;
                let b = b.trim().parse().map_err(|_| err("graph.edges", format!("bad node '{b}'")))?;
                edges.push((a, b));
            }
            GraphSpec::Edges(edges)
        }
    };

    let scheme_kind = cfg.get("privacy.scheme").unwrap_or("none").to_string();
    if !["none", "independent_laplace", "graph_homomorphic"].contains(&scheme_kind.as_str()) {
        return Err(err(
            "privacy.scheme",
            format!("unknown scheme '{scheme_kind}' (none | independent_laplace | graph_homomorphic)"),
        ));
    }
    let sigma_g_sq = cfg.f64_or("privacy.sigma_g_sq", 0.0)?;
    if sigma_g_sq < 0.0 {
        return Err(err("privacy.sigma_g_sq", "must be nonnegative"));
    }
    let masking = match cfg.get("privacy.masking").unwrap_or("off") {
        "off" => false,
        "secret_sharing" => true,
        other => {
            return Err(err(
                "privacy.masking",
                format!("unknown masking '{other}' (off | secret_sharing)"),
            ))
        }
    };

    let epoch_text = cfg.get("train.epochs").unwrap_or("1").to_string();
    let batch_text = cfg.get("train.batch").unwrap_or("1").to_string();
    let (b_lo, b_hi) = parse_range_u64("train.batch", &batch_text)?;

    Ok(Experiment {
        task,
        rho: cfg.f64_or("loss.rho", 0.0)?,
        graph,
        mu: cfg.f64_req("train.mu")?,
        rounds: cfg.u64_opt("train.rounds")?.unwrap_or(100),
        participants: cfg.usize_req("train.l")?,
        epoch_range: parse_range_u64("train.epochs", &epoch_text)?,
        batch_range: (b_lo as usize, b_hi as usize),
        scheme_kind,
        sigma_g_sq,
        masking,
        gradient_bound: cfg.f64_opt("privacy.b_bound")?,
        threads: match cfg.get("train.threads") {
            Some(v) => Some(v.parse().map_err(|_| err("train.threads", "not an integer"))?),
            None => None,
        },
    })
}
