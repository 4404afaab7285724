//! Experiment configuration: a TOML document with `[model]`, `[run]` and
//! `[output]` tables. Complex numbers are `[re, im]` pairs and matrices are
//! two rows of two complex numbers.
//!
//! ```toml
//! [model]
//! H = [[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-0.5, 0.0]]]
//! C = [[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
//! observable = "diagonal"
//! beta = "ground"
//!
//! [run]
//! T = 1.0
//! n_grid = [8, 16, 32, 64]
//! n_paths = 2000
//! grid_points = 1000
//! seed = 1
//!
//! [output]
//! directory = "out"
//! formats = ["csv", "json"]
//! ```

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::discrete::{BlockMode, ModelSpec, ObservableSpec};
use crate::error::{Error, Result};
use crate::qmatrix::{validate_state, ComplexMatrix, DensityState, Mat2, C64, TOL_STATE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObservableConfig {
    Diagonal,
    Projector(Mat2),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StateConfig {
    Ground,
    Excited,
    Matrix(Mat2),
}

impl StateConfig {
    pub fn state(&self) -> DensityState {
        match self {
            StateConfig::Ground => DensityState::ground(),
            StateConfig::Excited => DensityState::excited(),
            StateConfig::Matrix(m) => DensityState::from_matrix_unchecked(*m),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn name(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub h: Mat2,
    pub c: Mat2,
    pub observable: ObservableConfig,
    pub beta: StateConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub horizon: f64,
    pub n_grid: Vec<u32>,
    pub n_paths: u64,
    pub grid_points: usize,
    pub seed: u64,
    pub blocks: BlockMode,
    pub rho0: StateConfig,
    pub workers: Option<usize>,
    /// Partition used by the outcome-law audit.
    pub audit_n: u32,
    /// Number of leading outcomes compared by the outcome-law audit.
    pub audit_outcomes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub run: RunConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let observable = match self.model.observable {
            ObservableConfig::Diagonal => ObservableSpec::diagonal(),
            ObservableConfig::Projector(p0) => ObservableSpec::from_p0(p0)?,
        };
        ModelSpec::with_beta(
            self.model.h,
            self.model.c,
            observable,
            self.model.beta.state(),
        )
    }

    pub fn initial_state(&self) -> DensityState {
        self.run.rho0.state()
    }

    /// SHA-256 of [`ExperimentConfig::experiment_text`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.experiment_text()))
    }

    /// Canonical TOML text; parsing it gives back `self`.
    pub fn to_toml_string(&self) -> String {
        let mut doc = self.tables();
        doc.insert("output".into(), Value::Table(self.output_table()));
        toml::to_string(&doc).expect("tables of plain values serialize")
    }

    /// Canonical `[model]` and `[run]` tables without the worker count: the
    /// part of the configuration that determines results.
    pub fn experiment_text(&self) -> String {
        let mut doc = self.tables();
        if let Some(Value::Table(run)) = doc.get_mut("run") {
            run.remove("workers");
        }
        toml::to_string(&doc).expect("tables of plain values serialize")
    }

    fn output_table(&self) -> Table {
        let mut output = Table::new();
        output.insert(
            "directory".into(),
            Value::from(self.output.directory.to_string_lossy().into_owned()),
        );
        output.insert(
            "formats".into(),
            Value::Array(
                self.output
                    .formats
                    .iter()
                    .map(|f| Value::from(f.name()))
                    .collect(),
            ),
        );
        output
    }

    fn tables(&self) -> Table {
        let mut model = Table::new();
        model.insert("H".into(), matrix_value(&self.model.h));
        model.insert("C".into(), matrix_value(&self.model.c));
        model.insert(
            "observable".into(),
            match self.model.observable {
                ObservableConfig::Diagonal => Value::from("diagonal"),
                ObservableConfig::Projector(p0) => {
                    let mut t = Table::new();
                    t.insert("P0".into(), matrix_value(&p0));
                    Value::Table(t)
                }
            },
        );
        model.insert("beta".into(), state_value(&self.model.beta));

        let mut run = Table::new();
        run.insert("T".into(), Value::Float(self.run.horizon));
        run.insert(
            "n_grid".into(),
            Value::Array(
                self.run
                    .n_grid
                    .iter()
                    .map(|&n| Value::Integer(n.into()))
                    .collect(),
            ),
        );
        run.insert("n_paths".into(), int_value(self.run.n_paths));
        run.insert("grid_points".into(), int_value(self.run.grid_points as u64));
        run.insert("seed".into(), int_value(self.run.seed));
        run.insert(
            "blocks".into(),
            Value::from(match self.run.blocks {
                BlockMode::Asymptotic => "asymptotic",
                BlockMode::Exact => "exact",
            }),
        );
        run.insert("rho0".into(), state_value(&self.run.rho0));
        if let Some(w) = self.run.workers {
            run.insert("workers".into(), int_value(w as u64));
        }
        run.insert("audit_n".into(), Value::Integer(self.run.audit_n.into()));
        run.insert(
            "audit_outcomes".into(),
            int_value(self.run.audit_outcomes as u64),
        );

        let mut doc = Table::new();
        doc.insert("model".into(), Value::Table(model));
        doc.insert("run".into(), Value::Table(run));
        doc
    }
}

fn matrix_value(m: &Mat2) -> Value {
    Value::Array(
        (0..2)
            .map(|r| {
                Value::Array(
                    (0..2)
                        .map(|c| {
                            let z = m.get(r, c);
                            Value::Array(vec![Value::Float(z.re), Value::Float(z.im)])
                        })
                        .collect(),
                )
            })
            .collect(),
    )
}

fn state_value(s: &StateConfig) -> Value {
    match s {
        StateConfig::Ground => Value::from("ground"),
        StateConfig::Excited => Value::from("excited"),
        StateConfig::Matrix(m) => matrix_value(m),
    }
}

/// TOML integers are signed; larger values are written as strings.
fn int_value(x: u64) -> Value {
    match i64::try_from(x) {
        Ok(i) => Value::Integer(i),
        Err(_) => Value::String(x.to_string()),
    }
}

struct Fields<'a> {
    prefix: &'a str,
    table: &'a Table,
}

impl<'a> Fields<'a> {
    fn new(prefix: &'a str, table: &'a Table, allowed: &[&str]) -> Result<Self> {
        if let Some(k) = table.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::config(format!("{prefix}.{k}"), "unknown field"));
        }
        Ok(Fields { prefix, table })
    }

    fn name(&self, key: &str) -> String {
        format!("{}.{key}", self.prefix)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.table.get(key)
    }

    fn required(&self, key: &str) -> Result<&'a Value> {
        self.get(key)
            .ok_or_else(|| Error::config(self.name(key), "missing field"))
    }
}

fn as_float(v: &Value, field: &str) -> Result<f64> {
    let x = match v {
        Value::Float(f) => *f,
        Value::Integer(i) => *i as f64,
        _ => {
            return Err(Error::config(
                field,
                format!("expected a number, found {}", v.type_str()),
            ))
        }
    };
    if !x.is_finite() {
        return Err(Error::config(field, "must be finite"));
    }
    Ok(x)
}

fn as_u64(v: &Value, field: &str) -> Result<u64> {
    match v {
        Value::Integer(i) => {
            u64::try_from(*i).map_err(|_| Error::config(field, "must be non-negative"))
        }
        Value::String(s) => s
            .parse::<u64>()
            .map_err(|_| Error::config(field, format!("'{s}' is not an unsigned 64-bit integer"))),
        _ => Err(Error::config(
            field,
            format!("expected an integer, found {}", v.type_str()),
        )),
    }
}

fn as_str<'a>(v: &'a Value, field: &str) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::config(field, format!("expected a string, found {}", v.type_str())))
}

fn as_array<'a>(v: &'a Value, field: &str, len: Option<usize>) -> Result<&'a Vec<Value>> {
    let a = v.as_array().ok_or_else(|| {
        Error::config(field, format!("expected an array, found {}", v.type_str()))
    })?;
    if let Some(n) = len {
        if a.len() != n {
            return Err(Error::config(
                field,
                format!("expected {n} elements, found {}", a.len()),
            ));
        }
    }
    Ok(a)
}

fn as_matrix(v: &Value, field: &str) -> Result<Mat2> {
    let shape = || Error::config(field, "expected a 2×2 matrix of [re, im] pairs");
    let rows = as_array(v, field, Some(2)).map_err(|_| shape())?;
    let mut m = Mat2::zero();
    for (r, row) in rows.iter().enumerate() {
        let cols = as_array(row, field, Some(2)).map_err(|_| shape())?;
        for (c, z) in cols.iter().enumerate() {
            let pair = as_array(z, field, Some(2)).map_err(|_| shape())?;
            m.0[r][c] = C64::new(as_float(&pair[0], field)?, as_float(&pair[1], field)?);
        }
    }
    Ok(m)
}

fn as_table<'a>(v: &'a Value, field: &str) -> Result<&'a Table> {
    v.as_table()
        .ok_or_else(|| Error::config(field, format!("expected a table, found {}", v.type_str())))
}

fn parse_state(v: &Value, field: &str, keywords: &[&str]) -> Result<StateConfig> {
    let state = match v {
        Value::String(s) if keywords.contains(&s.as_str()) => match s.as_str() {
            "ground" => StateConfig::Ground,
            _ => StateConfig::Excited,
        },
        Value::String(s) => {
            return Err(Error::config(
                field,
                format!("unknown keyword '{s}' (expected {})", keywords.join(" or ")),
            ))
        }
        _ => StateConfig::Matrix(as_matrix(v, field)?),
    };
    if let StateConfig::Matrix(m) = state {
        let report = validate_state(&m, TOL_STATE);
        if !report.pass {
            return Err(Error::config(
                field,
                format!("not a density matrix: {report}"),
            ));
        }
    }
    Ok(state)
}

fn parse_model(t: &Table) -> Result<ModelConfig> {
    let f = Fields::new("model", t, &["H", "C", "observable", "beta"])?;
    let h = as_matrix(f.required("H")?, "model.H")?;
    let defect = h.hermiticity_defect();
    if defect > TOL_STATE {
        return Err(Error::config(
            "model.H",
            format!("not hermitian (‖H − H†‖ = {defect:.3e})"),
        ));
    }
    let c = as_matrix(f.required("C")?, "model.C")?;
    let observable = match f.get("observable") {
        None => ObservableConfig::Diagonal,
        Some(Value::String(s)) if s == "diagonal" => ObservableConfig::Diagonal,
        Some(Value::String(s)) => {
            return Err(Error::config(
                "model.observable",
                format!("unknown keyword '{s}' (expected diagonal)"),
            ))
        }
        Some(v) => {
            let inner = Fields::new(
                "model.observable",
                as_table(v, "model.observable")?,
                &["P0"],
            )?;
            let p0 = as_matrix(inner.required("P0")?, "model.observable.P0")?;
            ObservableSpec::from_p0(p0)
                .map_err(|e| Error::config("model.observable.P0", e.to_string()))?;
            ObservableConfig::Projector(p0)
        }
    };
    let beta = match f.get("beta") {
        None => StateConfig::Ground,
        Some(v) => parse_state(v, "model.beta", &["ground"])?,
    };
    if (*beta.state().matrix() - Mat2::diag(1.0, 0.0)).frobenius_norm() > TOL_STATE {
        return Err(Error::config(
            "model.beta",
            "only the ground state |Ω⟩⟨Ω| is supported",
        ));
    }
    Ok(ModelConfig {
        h,
        c,
        observable,
        beta,
    })
}

fn positive_int(v: &Value, field: &str, max: u64) -> Result<u64> {
    let x = as_u64(v, field)?;
    if x < 1 {
        return Err(Error::config(field, "must be ≥ 1"));
    }
    if x > max {
        return Err(Error::config(field, format!("must be ≤ {max}")));
    }
    Ok(x)
}

fn parse_run(t: &Table) -> Result<RunConfig> {
    let f = Fields::new(
        "run",
        t,
        &[
            "T",
            "n_grid",
            "n_paths",
            "grid_points",
            "seed",
            "blocks",
            "rho0",
            "workers",
            "audit_n",
            "audit_outcomes",
        ],
    )?;
    let horizon = as_float(f.required("T")?, "run.T")?;
    if horizon <= 0.0 {
        return Err(Error::config("run.T", "must be positive"));
    }
    let n_grid = as_array(f.required("n_grid")?, "run.n_grid", None)?
        .iter()
        .map(|v| positive_int(v, "run.n_grid", 1 << 24).map(|n| n as u32))
        .collect::<Result<Vec<u32>>>()?;
    if n_grid.is_empty() {
        return Err(Error::config("run.n_grid", "must not be empty"));
    }
    let n_paths = positive_int(f.required("n_paths")?, "run.n_paths", 1 << 32)?;
    let grid_points =
        positive_int(f.required("grid_points")?, "run.grid_points", 1 << 24)? as usize;
    let seed = as_u64(f.required("seed")?, "run.seed")?;
    let blocks = match f.get("blocks") {
        None => BlockMode::Asymptotic,
        Some(v) => match as_str(v, "run.blocks")? {
            "asymptotic" => BlockMode::Asymptotic,
            "exact" => BlockMode::Exact,
            s => {
                return Err(Error::config(
                    "run.blocks",
                    format!("unknown mode '{s}' (expected asymptotic or exact)"),
                ))
            }
        },
    };
    let rho0 = match f.get("rho0") {
        None => StateConfig::Excited,
        Some(v) => parse_state(v, "run.rho0", &["ground", "excited"])?,
    };
    let workers = f
        .get("workers")
        .map(|v| positive_int(v, "run.workers", 4096).map(|w| w as usize))
        .transpose()?;
    let audit_n = match f.get("audit_n") {
        None => 50,
        Some(v) => positive_int(v, "run.audit_n", 1 << 24)? as u32,
    };
    let audit_outcomes = match f.get("audit_outcomes") {
        None => 6,
        Some(v) => positive_int(v, "run.audit_outcomes", 16)? as usize,
    };
    Ok(RunConfig {
        horizon,
        n_grid,
        n_paths,
        grid_points,
        seed,
        blocks,
        rho0,
        workers,
        audit_n,
        audit_outcomes,
    })
}

fn parse_output(t: Option<&Table>) -> Result<OutputConfig> {
    let empty = Table::new();
    let f = Fields::new("output", t.unwrap_or(&empty), &["directory", "formats"])?;
    let directory = match f.get("directory") {
        None => PathBuf::from("out"),
        Some(v) => {
            let s = as_str(v, "output.directory")?;
            if s.is_empty() {
                return Err(Error::config("output.directory", "must not be empty"));
            }
            PathBuf::from(s)
        }
    };
    let mut formats = match f.get("formats") {
        None => vec![Format::Csv, Format::Json],
        Some(v) => as_array(v, "output.formats", None)?
            .iter()
            .map(|x| match as_str(x, "output.formats")? {
                "csv" => Ok(Format::Csv),
                "json" => Ok(Format::Json),
                s => Err(Error::config(
                    "output.formats",
                    format!("unknown format '{s}' (expected csv or json)"),
                )),
            })
            .collect::<Result<Vec<_>>>()?,
    };
    formats.sort();
    formats.dedup();
    if formats.is_empty() {
        return Err(Error::config(
            "output.formats",
            "must name at least one format",
        ));
    }
    Ok(OutputConfig { directory, formats })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
    let top = Fields::new("<document>", &doc, &["model", "run", "output"])?;
    let model = parse_model(as_table(
        top.required("model")
            .map_err(|_| Error::config("model", "missing table"))?,
        "model",
    )?)?;
    let run = parse_run(as_table(
        top.required("run")
            .map_err(|_| Error::config("run", "missing table"))?,
        "run",
    )?)?;
    let output = parse_output(
        top.get("output")
            .map(|v| as_table(v, "output"))
            .transpose()?,
    )?;
    Ok(ExperimentConfig { model, run, output })
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
