//! Plant configuration files (TOML).
//!
//! Coefficient entries are numbers, expression strings in z, or sampled
//! tables `{ table = [...] }` on a uniform grid. Constant matrices take
//! numbers or constant expressions. Poles are a real number or a
//! `[re, im]` pair; artificial kernel boundary values are
//! `{ i, j, value }` with 1-based indices.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::expr::Expr;
use crate::model::{
    parse_expression, ArtificialBc, DesignParams, ModelError, PlantSpec, ScalarFunction,
};
use crate::simulator::SimConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: std::io::Error },
    #[error("malformed configuration: {0}")]
    Syntax(String),
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(path: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        msg: msg.into(),
    }
}

/// Everything a configuration file describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub plant: PlantSpec,
    pub design: DesignParams,
    pub simulation: SimConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dimensions: RawDims,
    lambda: RawLambda,
    #[serde(rename = "A")]
    a: RawRows,
    #[serde(rename = "C1", default, skip_serializing_if = "Option::is_none")]
    c1: Option<RawRows>,
    boundary: RawBoundary,
    ode: RawOde,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    design: Option<RawDesign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    simulation: Option<RawSimulation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDims {
    n: usize,
    p: usize,
    n_xi: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLambda {
    values: Vec<Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRows {
    rows: Vec<Vec<Value>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBoundary {
    #[serde(rename = "Q0")]
    q0: Vec<Vec<Value>>,
    #[serde(rename = "Q1")]
    q1: Vec<Vec<Value>>,
    #[serde(rename = "C2")]
    c2: Vec<Vec<Value>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOde {
    #[serde(rename = "F")]
    f: Vec<Vec<Value>>,
    #[serde(rename = "B")]
    b: Vec<Vec<Value>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    #[serde(default)]
    controller_poles: Vec<Value>,
    #[serde(default)]
    observer_poles: Vec<Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    controller_bcs: Vec<RawBc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    observer_bcs: Vec<RawBc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBc {
    i: usize,
    j: usize,
    value: Value,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cfl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_final: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decimation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x0: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xi0: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_hat0: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xi_hat0: Option<Vec<Value>>,
}

fn function(v: &Value, path: &str) -> Result<ScalarFunction, ConfigError> {
    match v {
        Value::Integer(k) => Ok(ScalarFunction::constant(*k as f64)),
        Value::Float(x) => Ok(ScalarFunction::constant(*x)),
        Value::String(s) => Ok(parse_expression(s)?),
        Value::Table(t) => {
            let samples = t
                .get("table")
                .and_then(Value::as_array)
                .ok_or_else(|| invalid(path, "table entry needs a `table` array"))?;
            if t.len() != 1 {
                return Err(invalid(path, "table entry takes only the `table` key"));
            }
            let vals = samples
                .iter()
                .enumerate()
                .map(|(k, s)| number(s, &format!("{path}.table[{k}]")))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ScalarFunction::table(vals)?)
        }
        _ => Err(invalid(path, "expected a number, an expression or a table")),
    }
}

fn number(v: &Value, path: &str) -> Result<f64, ConfigError> {
    match v {
        Value::Integer(k) => Ok(*k as f64),
        Value::Float(x) => Ok(*x),
        Value::String(s) => {
            let f = parse_expression(s)?;
            match &f {
                ScalarFunction::Expr { ast, .. } if ast.is_constant() => Ok(ast.eval(0.0)),
                _ => Err(invalid(path, format!("`{s}` depends on z; a constant is required"))),
            }
        }
        _ => Err(invalid(path, "expected a number or a constant expression")),
    }
}

fn matrix(rows: &[Vec<Value>], r: usize, c: usize, path: &str) -> Result<DMatrix<f64>, ConfigError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(invalid(path, format!("expected a {r}x{c} array")));
    }
    let mut m = DMatrix::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = number(v, &format!("{path}[{}][{}]", i + 1, j + 1))?;
        }
    }
    Ok(m)
}

fn function_rows(rows: &[Vec<Value>], r: usize, c: usize, path: &str) -> Result<Vec<Vec<ScalarFunction>>, ConfigError> {
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(invalid(path, format!("expected a {r}x{c} array")));
    }
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| function(v, &format!("{path}[{}][{}]", i + 1, j + 1)))
                .collect()
        })
        .collect()
}

fn pole(v: &Value, path: &str) -> Result<Complex64, ConfigError> {
    match v {
        Value::Array(pair) if pair.len() == 2 => Ok(Complex64::new(
            number(&pair[0], path)?,
            number(&pair[1], path)?,
        )),
        Value::Array(_) => Err(invalid(path, "complex poles are written [re, im]")),
        other => Ok(Complex64::new(number(other, path)?, 0.0)),
    }
}

fn bcs(raw: &[RawBc], path: &str) -> Result<Vec<ArtificialBc>, ConfigError> {
    raw.iter()
        .enumerate()
        .map(|(k, bc)| {
            let p = format!("{path}[{k}]");
            if bc.i == 0 || bc.j == 0 {
                return Err(invalid(&p, "indices are 1-based"));
            }
            Ok(ArtificialBc {
                i: bc.i - 1,
                j: bc.j - 1,
                value: function(&bc.value, &p)?,
            })
        })
        .collect()
}

fn vector(v: &[Value], len: usize, path: &str) -> Result<Vec<f64>, ConfigError> {
    if v.len() != len {
        return Err(invalid(path, format!("expected {len} entries")));
    }
    v.iter()
        .enumerate()
        .map(|(k, x)| number(x, &format!("{path}[{}]", k + 1)))
        .collect()
}

fn functions(v: &[Value], len: usize, path: &str) -> Result<Vec<ScalarFunction>, ConfigError> {
    if v.len() != len {
        return Err(invalid(path, format!("expected {len} entries")));
    }
    v.iter()
        .enumerate()
        .map(|(k, x)| function(x, &format!("{path}[{}]", k + 1)))
        .collect()
}

/// Parse configuration text.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let RawDims { n, p, n_xi } = raw.dimensions;
    if n == 0 || p == 0 || p >= n || n_xi == 0 {
        return Err(invalid("dimensions", "need 0 < p < n and n_xi > 0"));
    }
    let m = n - p;
    let lambda = functions(&raw.lambda.values, n, "lambda.values")?;
    let a = function_rows(&raw.a.rows, n, n, "A.rows")?;
    let c1 = match &raw.c1 {
        Some(rows) => function_rows(&rows.rows, n, n_xi, "C1.rows")?,
        None => vec![vec![ScalarFunction::zero(); n_xi]; n],
    };
    let plant = PlantSpec {
        n,
        p,
        n_xi,
        lambda,
        a,
        c1,
        q0: matrix(&raw.boundary.q0, m, p, "boundary.Q0")?,
        q1: matrix(&raw.boundary.q1, p, m, "boundary.Q1")?,
        f: matrix(&raw.ode.f, n_xi, n_xi, "ode.F")?,
        b: matrix(&raw.ode.b, n_xi, p, "ode.B")?,
        c2: matrix(&raw.boundary.c2, m, n_xi, "boundary.C2")?,
    };
    plant.check_dimensions()?;

    let rd = raw.design.unwrap_or_default();
    let defaults = DesignParams::default();
    let design = DesignParams {
        controller_poles: rd
            .controller_poles
            .iter()
            .enumerate()
            .map(|(k, v)| pole(v, &format!("design.controller_poles[{}]", k + 1)))
            .collect::<Result<_, _>>()?,
        observer_poles: rd
            .observer_poles
            .iter()
            .enumerate()
            .map(|(k, v)| pole(v, &format!("design.observer_poles[{}]", k + 1)))
            .collect::<Result<_, _>>()?,
        controller_bcs: bcs(&rd.controller_bcs, "design.controller_bcs")?,
        observer_bcs: bcs(&rd.observer_bcs, "design.observer_bcs")?,
        grid: rd.grid.unwrap_or(defaults.grid),
        kernel_tol: rd.kernel_tol.unwrap_or(defaults.kernel_tol),
        kernel_max_iter: rd.kernel_max_iter.unwrap_or(defaults.kernel_max_iter),
        seed: rd.seed.unwrap_or(defaults.seed),
    };

    let rs = raw.simulation.unwrap_or_default();
    let mut simulation = SimConfig::zeros(n, n_xi);
    if let Some(v) = rs.cfl {
        simulation.cfl = v;
    }
    if let Some(v) = rs.t_final {
        simulation.t_final = v;
    }
    if let Some(v) = rs.decimation {
        simulation.decimation = v;
    }
    if let Some(v) = &rs.x0 {
        simulation.x0 = functions(v, n, "simulation.x0")?;
    }
    if let Some(v) = &rs.x_hat0 {
        simulation.x_hat0 = functions(v, n, "simulation.x_hat0")?;
    }
    if let Some(v) = &rs.xi0 {
        simulation.xi0 = vector(v, n_xi, "simulation.xi0")?;
    }
    if let Some(v) = &rs.xi_hat0 {
        simulation.xi_hat0 = vector(v, n_xi, "simulation.xi_hat0")?;
    }
    simulation
        .check(n, n_xi)
        .map_err(|m| invalid("simulation", m))?;
    Ok(Config {
        plant,
        design,
        simulation,
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Io {
        path: path.display().to_string(),
        err,
    })?;
    parse_config(&text)
}

fn function_value(f: &ScalarFunction) -> Value {
    match f {
        ScalarFunction::Expr { ast: Expr::Num(v), .. } => Value::Float(*v),
        ScalarFunction::Expr { src, .. } => Value::String(src.clone()),
        ScalarFunction::Table(v) => {
            let mut t = toml::map::Map::new();
            t.insert(
                "table".into(),
                Value::Array(v.iter().map(|x| Value::Float(*x)).collect()),
            );
            Value::Table(t)
        }
    }
}

fn matrix_value(m: &DMatrix<f64>) -> Vec<Vec<Value>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| Value::Float(m[(i, j)])).collect())
        .collect()
}

fn pole_value(z: &Complex64) -> Value {
    if z.im == 0.0 {
        Value::Float(z.re)
    } else {
        Value::Array(vec![Value::Float(z.re), Value::Float(z.im)])
    }
}

fn bc_values(bcs: &[ArtificialBc]) -> Vec<RawBc> {
    bcs.iter()
        .map(|bc| RawBc {
            i: bc.i + 1,
            j: bc.j + 1,
            value: function_value(&bc.value),
        })
        .collect()
}

/// Serialize a configuration back to TOML text.
pub fn config_to_string(cfg: &Config) -> String {
    let pl = &cfg.plant;
    let rows = |fs: &[Vec<ScalarFunction>]| -> Vec<Vec<Value>> {
        fs.iter().map(|r| r.iter().map(function_value).collect()).collect()
    };
    let c1_zero = pl.c1.iter().flatten().all(ScalarFunction::is_zero);
    let d = &cfg.design;
    let s = &cfg.simulation;
    let raw = RawConfig {
        dimensions: RawDims {
            n: pl.n,
            p: pl.p,
            n_xi: pl.n_xi,
        },
        lambda: RawLambda {
            values: pl.lambda.iter().map(function_value).collect(),
        },
        a: RawRows { rows: rows(&pl.a) },
        c1: (!c1_zero).then(|| RawRows { rows: rows(&pl.c1) }),
        boundary: RawBoundary {
            q0: matrix_value(&pl.q0),
            q1: matrix_value(&pl.q1),
            c2: matrix_value(&pl.c2),
        },
        ode: RawOde {
            f: matrix_value(&pl.f),
            b: matrix_value(&pl.b),
        },
        design: Some(RawDesign {
            controller_poles: d.controller_poles.iter().map(pole_value).collect(),
            observer_poles: d.observer_poles.iter().map(pole_value).collect(),
            controller_bcs: bc_values(&d.controller_bcs),
            observer_bcs: bc_values(&d.observer_bcs),
            grid: Some(d.grid),
            kernel_tol: Some(d.kernel_tol),
            kernel_max_iter: Some(d.kernel_max_iter),
            seed: Some(d.seed),
        }),
        simulation: Some(RawSimulation {
            cfl: Some(s.cfl),
            t_final: Some(s.t_final),
            decimation: Some(s.decimation),
            x0: Some(s.x0.iter().map(function_value).collect()),
            xi0: Some(s.xi0.iter().map(|v| Value::Float(*v)).collect()),
            x_hat0: Some(s.x_hat0.iter().map(function_value).collect()),
            xi_hat0: Some(s.xi_hat0.iter().map(|v| Value::Float(*v)).collect()),
        }),
    };
    toml::to_string(&raw).expect("configuration is always representable")
}

pub fn save_config(path: impl AsRef<Path>, cfg: &Config) -> Result<(), ConfigError> {
    let path = path.as_ref();
    std::fs::write(path, config_to_string(cfg)).map_err(|err| ConfigError::Io {
        path: path.display().to_string(),
        err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[dimensions]
n = 2
p = 1
n_xi = 1

[lambda]
values = [1, "-1 - z/2"]

[A]
rows = [[0, "z"], [{ table = [0.0, 1.0, 0.5] }, 0]]

[boundary]
Q0 = [[0.5]]
Q1 = [["e"]]
C2 = [[1]]

[ode]
F = [[0]]
B = [[1]]

[design]
controller_poles = [-2]
observer_poles = [-3]
"#;

    #[test]
    fn parses_small_config() {
        let cfg = parse_config(SMALL).unwrap();
        assert_eq!(cfg.plant.n, 2);
        assert_eq!(cfg.plant.lambda[1].eval(1.0).unwrap(), -1.5);
        assert_eq!(cfg.plant.a[1][0].eval(0.75).unwrap(), 0.75);
        assert!((cfg.plant.q1[(0, 0)] - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(cfg.design.controller_poles, vec![Complex64::new(-2.0, 0.0)]);
        assert!(cfg.plant.c1.iter().flatten().all(ScalarFunction::is_zero));
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = parse_config(SMALL).unwrap();
        let again = parse_config(&config_to_string(&cfg)).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn errors_carry_paths() {
        let bad = SMALL.replace("Q1 = [[\"e\"]]", "Q1 = [[\"z\"]]");
        let err = parse_config(&bad).unwrap_err().to_string();
        assert!(err.contains("boundary.Q1"), "{err}");
        let bad = SMALL.replace("values = [1, \"-1 - z/2\"]", "values = [1]");
        assert!(parse_config(&bad).unwrap_err().to_string().contains("lambda.values"));
        assert!(matches!(parse_config("[dimensions"), Err(ConfigError::Syntax(_))));
        let bad = SMALL.replace("\"z\"]", "\"q\"]");
        assert!(matches!(parse_config(&bad), Err(ConfigError::Model(_))));
    }
}
