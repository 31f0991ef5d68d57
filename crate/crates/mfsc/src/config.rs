//! Experiment configuration: INI-style sections of `key = value` lines.
//!
//! Matrices are written as rows separated by `;` with comma-separated
//! entries (`A = 0.3,0.7; -0.9,0.5`), vectors and ranges as comma-separated
//! lists. Lines starting with `#` are comments. Because `;` separates matrix
//! rows it is not a comment marker here, which is why the format is parsed
//! by hand rather than with a general INI library.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use mfsc_core::dualloop::DualLoopConfig;
use mfsc_core::model::{self, CostSpec, SystemModel};
use mfsc_core::robust::Direction;
use mfsc_core::stabilizer::InitStrategy;
use mfsc_core::Mat;
use thiserror::Error;

use crate::pipeline::{IrlConfig, MeanSource};
use crate::sim::SimConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("[{section}] {key}: {message}")]
    Value { section: String, key: String, message: String },
    #[error("[{section}] is missing required key '{key}'")]
    Missing { section: String, key: String },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Direction family used by the robustness sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionKind {
    Ones,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustConfig {
    pub grid: Vec<f64>,
    pub direction: DirectionKind,
    pub seed: u64,
}

impl RobustConfig {
    pub fn direction(&self) -> Direction {
        match self.direction {
            DirectionKind::Ones => Direction::AllOnes,
            DirectionKind::Random => Direction::Random { seed: self.seed },
        }
    }
}

/// Population sizes and seeds of the consistency study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: SystemModel,
    pub cost: CostSpec,
    pub dualloop: DualLoopConfig,
    pub init: InitStrategy,
    pub sim: SimConfig,
    pub irl: IrlConfig,
    pub robust: RobustConfig,
    pub consistency: ConsistencyConfig,
    pub output: Option<PathBuf>,
}

const EXAMPLE: &str = include_str!("example.ini");

impl ExperimentConfig {
    /// The built-in configuration of the two-state example.
    pub fn example() -> Self {
        Self::parse(EXAMPLE).expect("built-in configuration parses")
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = Document::parse(text)?;
        let cfg = Self::from_document(&mut doc)?;
        if let Some((section, key)) = doc.unused().first() {
            return Err(ConfigError::Value {
                section: section.clone(),
                key: key.clone(),
                message: "unknown key".into(),
            });
        }
        Ok(cfg)
    }

    fn from_document(doc: &mut Document) -> Result<Self, ConfigError> {
        let model = SystemModel::new(
            doc.matrix("model", "A")?,
            doc.matrix("model", "B")?,
            doc.matrix("model", "G")?,
            doc.matrix("model", "C")?,
            doc.matrix("model", "D")?,
        );
        let cost = CostSpec::new(
            doc.matrix("cost", "Q")?,
            doc.matrix("cost", "R")?,
            doc.matrix("cost", "Gamma")?,
            doc.value("cost", "gamma")?,
        );
        let violations = model::validate_model(&model, &cost);
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(ConfigError::Model(text.join("; ")));
        }
        let (n, m1, m2) = (model.n(), model.m1(), model.m2());

        let defaults = DualLoopConfig::default();
        let dualloop = DualLoopConfig {
            xi: doc.value_or("dualloop", "xi", defaults.xi)?,
            max_outer: doc.value_or("dualloop", "max_outer", defaults.max_outer)?,
            max_inner: doc.value_or("dualloop", "max_inner", defaults.max_inner)?,
            epsilon_lmi: doc.value_or("dualloop", "epsilon", defaults.epsilon_lmi)?,
            warm_start: doc.value_or("dualloop", "warm_start", defaults.warm_start)?,
        };
        dualloop.validate().map_err(|e| doc.error("dualloop", "xi", e.to_string()))?;
        let init_seed: u64 = doc.value_or("dualloop", "init_seed", 0)?;
        let init = match doc.value_or("dualloop", "init", "lmi".to_string())?.as_str() {
            "lmi" => InitStrategy::Lmi { seed: init_seed },
            "zero" => InitStrategy::ZeroCheck { seed: init_seed },
            "user" => InitStrategy::User(doc.matrix("dualloop", "K0")?),
            other => return Err(doc.error("dualloop", "init", format!("unknown strategy '{other}'"))),
        };

        let sim = SimConfig {
            agents: doc.value("sim", "N")?,
            samples: doc.value("sim", "Ns")?,
            dt: doc.value("sim", "dt")?,
            horizon: doc.value("sim", "horizon")?,
            seed: doc.value("sim", "seed")?,
            x0_lower: doc.list("sim", "x0_lower")?,
            x0_upper: doc.list("sim", "x0_upper")?,
            keep_paths: doc.value_or("sim", "keep_paths", 0)?,
            substeps: doc.value_or("sim", "substeps", 1)?,
        };
        sim.validate(n).map_err(|e| doc.error("sim", "dt", e.to_string()))?;

        let irl = IrlConfig {
            t1: doc.value("irl", "t1")?,
            t_end: doc.value("irl", "t_end")?,
            window: doc.value("irl", "T")?,
            step: doc.value("irl", "Ts")?,
            k_exp: doc.matrix("irl", "K_exp")?,
            l_exp: doc.matrix("irl", "L_exp")?,
            sigma1: doc.value("irl", "sigma1")?,
            sigma2: doc.value("irl", "sigma2")?,
            n1: doc.value("irl", "n1")?,
            n2: doc.value("irl", "n2")?,
            omega1: doc.range("irl", "omega1")?,
            omega2: doc.range("irl", "omega2")?,
            explore: doc.value_or("irl", "explore", true)?,
            decay_margin: doc.value_or("irl", "decay_margin", mfsc_core::irl::DEFAULT_DECAY_MARGIN)?,
            mean_source: doc.value_or("irl", "mean_source", MeanSource::Expected)?,
        };
        if irl.k_exp.shape() != (m1, n) || irl.l_exp.shape() != (m2, n) {
            return Err(doc.error("irl", "K_exp", "exploration gains do not match the model".into()));
        }
        let ratio = irl.window / irl.step;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(doc.error("irl", "T", "window length must be a multiple of Ts".into()));
        }

        let robust = RobustConfig {
            grid: doc.list_or("robust", "grid", vec![0.0, 1e-4, 1e-3, 1e-2])?,
            direction: match doc.value_or("robust", "direction", "ones".to_string())?.as_str() {
                "ones" => DirectionKind::Ones,
                "random" => DirectionKind::Random,
                other => return Err(doc.error("robust", "direction", format!("unknown direction '{other}'"))),
            },
            seed: doc.value_or("robust", "seed", 0)?,
        };
        check_grid(&robust.grid).map_err(|m| doc.error("robust", "grid", m))?;
        let consistency = ConsistencyConfig {
            sizes: doc.list_or("consistency", "sizes", vec![50, 500])?,
            seeds: doc.list_or("consistency", "seeds", vec![1, 2])?,
        };
        let output = doc.optional::<String>("output", "dir")?.map(PathBuf::from);
        Ok(Self { model, cost, dualloop, init, sim, irl, robust, consistency, output })
    }

    /// Writes the configuration back in the same format; parsing the result
    /// reproduces every value exactly.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, entries: Vec<(&str, String)>| {
            let _ = writeln!(out, "[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        };
        let m = &self.model;
        section(
            "model",
            vec![
                ("A", fmt_matrix(&m.a)),
                ("B", fmt_matrix(&m.b)),
                ("G", fmt_matrix(&m.g)),
                ("C", fmt_matrix(&m.c)),
                ("D", fmt_matrix(&m.d)),
            ],
        );
        section(
            "cost",
            vec![
                ("Q", fmt_matrix(&self.cost.q)),
                ("R", fmt_matrix(&self.cost.r)),
                ("Gamma", fmt_matrix(&self.cost.coupling)),
                ("gamma", self.cost.gamma.to_string()),
            ],
        );
        let d = &self.dualloop;
        let mut dl = vec![
            ("xi", d.xi.to_string()),
            ("max_outer", d.max_outer.to_string()),
            ("max_inner", d.max_inner.to_string()),
            ("epsilon", d.epsilon_lmi.to_string()),
            ("warm_start", d.warm_start.to_string()),
        ];
        match &self.init {
            InitStrategy::Lmi { seed } => {
                dl.push(("init", "lmi".into()));
                dl.push(("init_seed", seed.to_string()));
            }
            InitStrategy::ZeroCheck { seed } => {
                dl.push(("init", "zero".into()));
                dl.push(("init_seed", seed.to_string()));
            }
            InitStrategy::User(k0) => {
                dl.push(("init", "user".into()));
                dl.push(("K0", fmt_matrix(k0)));
            }
        }
        section("dualloop", dl);
        let s = &self.sim;
        section(
            "sim",
            vec![
                ("N", s.agents.to_string()),
                ("Ns", s.samples.to_string()),
                ("dt", s.dt.to_string()),
                ("horizon", s.horizon.to_string()),
                ("seed", s.seed.to_string()),
                ("x0_lower", fmt_list(&s.x0_lower)),
                ("x0_upper", fmt_list(&s.x0_upper)),
                ("keep_paths", s.keep_paths.to_string()),
                ("substeps", s.substeps.to_string()),
            ],
        );
        let i = &self.irl;
        section(
            "irl",
            vec![
                ("t1", i.t1.to_string()),
                ("t_end", i.t_end.to_string()),
                ("T", i.window.to_string()),
                ("Ts", i.step.to_string()),
                ("K_exp", fmt_matrix(&i.k_exp)),
                ("L_exp", fmt_matrix(&i.l_exp)),
                ("sigma1", i.sigma1.to_string()),
                ("sigma2", i.sigma2.to_string()),
                ("n1", i.n1.to_string()),
                ("n2", i.n2.to_string()),
                ("omega1", fmt_list(&[i.omega1.0, i.omega1.1])),
                ("omega2", fmt_list(&[i.omega2.0, i.omega2.1])),
                ("explore", i.explore.to_string()),
                ("decay_margin", i.decay_margin.to_string()),
                ("mean_source", i.mean_source.as_str().to_string()),
            ],
        );
        let r = &self.robust;
        section(
            "robust",
            vec![
                ("grid", fmt_list(&r.grid)),
                (
                    "direction",
                    match r.direction {
                        DirectionKind::Ones => "ones",
                        DirectionKind::Random => "random",
                    }
                    .into(),
                ),
                ("seed", r.seed.to_string()),
            ],
        );
        section(
            "consistency",
            vec![("sizes", fmt_list(&self.consistency.sizes)), ("seeds", fmt_list(&self.consistency.seeds))],
        );
        if let Some(dir) = &self.output {
            section("output", vec![("dir", dir.display().to_string())]);
        }
        out
    }
}

/// Perturbation magnitudes must be finite, nonnegative and ascending.
pub fn check_grid(grid: &[f64]) -> Result<(), String> {
    if grid.is_empty() {
        return Err("magnitude grid is empty".into());
    }
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err("magnitudes must be finite, nonnegative and ascending".into());
    }
    Ok(())
}

fn fmt_list<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Row-major `a,b; c,d` with shortest round-trip float formatting.
pub fn fmt_matrix(m: &Mat) -> String {
    (0..m.nrows())
        .map(|r| m.row(r).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn parse_matrix(text: &str) -> Result<Mat, String> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{}': {e}", v.trim()))).collect()
        })
        .collect::<Result<_, _>>()?;
    let cols = rows.first().map(|r| r.len()).unwrap_or(0);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err("rows must be nonempty and of equal length".into());
    }
    Ok(Mat::from_fn(rows.len(), cols, |r, c| rows[r][c]))
}

/// Comma-separated list of values.
pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',').map(|v| v.trim().parse::<T>().map_err(|e| format!("'{}': {e}", v.trim()))).collect()
}

/// Raw `section -> key -> (value, used)` map.
struct Document {
    entries: BTreeMap<(String, String), (String, bool)>,
}

impl Document {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: line_no, message: "expected 'key = value'".into() })?;
            let section = section
                .clone()
                .ok_or_else(|| ConfigError::Syntax { line: line_no, message: "entry outside any section".into() })?;
            let key = key.trim().to_string();
            if entries.insert((section.clone(), key.clone()), (value.trim().to_string(), false)).is_some() {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    message: format!("duplicate key '{key}' in [{section}]"),
                });
            }
        }
        Ok(Self { entries })
    }

    fn error(&self, section: &str, key: &str, message: String) -> ConfigError {
        ConfigError::Value { section: section.into(), key: key.into(), message }
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries.get_mut(&(section.to_string(), key.to_string())).map(|(v, used)| {
            *used = true;
            v.clone()
        })
    }

    fn optional<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|e| self.error(section, key, e.to_string())),
        }
    }

    fn value<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.optional(section, key)?.ok_or_else(|| ConfigError::Missing { section: section.into(), key: key.into() })
    }

    fn value_or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.optional(section, key)?.unwrap_or(default))
    }

    fn matrix(&mut self, section: &str, key: &str) -> Result<Mat, ConfigError> {
        let raw =
            self.raw(section, key).ok_or_else(|| ConfigError::Missing { section: section.into(), key: key.into() })?;
        parse_matrix(&raw).map_err(|m| self.error(section, key, m))
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw =
            self.raw(section, key).ok_or_else(|| ConfigError::Missing { section: section.into(), key: key.into() })?;
        parse_list(&raw).map_err(|m| self.error(section, key, m))
    }

    fn list_or<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(section, key) {
            None => Ok(default),
            Some(raw) => parse_list(&raw).map_err(|m| self.error(section, key, m)),
        }
    }

    fn range(&mut self, section: &str, key: &str) -> Result<(f64, f64), ConfigError> {
        let v: Vec<f64> = self.list(section, key)?;
        match v.as_slice() {
            [lo, hi] if lo <= hi => Ok((*lo, *hi)),
            _ => Err(self.error(section, key, "expected 'low,high' with low <= high".into())),
        }
    }

    fn unused(&self) -> Vec<(String, String)> {
        self.entries.iter().filter(|(_, (_, used))| !used).map(|(k, _)| k.clone()).collect()
    }
}
