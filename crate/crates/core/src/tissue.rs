//! Per-tissue acoustic parameters and their flat optimization layout.
//!
//! Every tissue carries five learnable values. A table of `K` tissues flattens
//! to a vector of length `5K` laid out label-major:
//! `[α₀, Z₀, μ0₀, μ1₀, σ0₀, α₁, Z₁, …]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_FIELDS: usize = 5;
pub const FIELD_ALPHA: usize = 0;
pub const FIELD_IMPEDANCE: usize = 1;
pub const FIELD_MU0: usize = 2;
pub const FIELD_MU1: usize = 3;
pub const FIELD_SIGMA0: usize = 4;
pub const FIELD_NAMES: [&str; NUM_FIELDS] = ["alpha", "impedance", "mu0", "mu1", "sigma0"];

/// Floor applied to impedances by [`project_constraints`].
pub const IMPEDANCE_FLOOR: f64 = 1e-6;

pub const TABLE_VERSION: i64 = 1;

const BUILTIN_DEFAULTS: &str = include_str!("../defaults/tissues.toml");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueParams {
    /// Attenuation coefficient α, ≥ 0.
    pub alpha: f64,
    /// Acoustic impedance Z, > 0.
    pub impedance: f64,
    /// Scatterer brightness μ₀.
    pub mu0: f64,
    /// Scatterer density threshold μ₁ ∈ [0, 1].
    pub mu1: f64,
    /// Scatterer brightness spread σ₀, ≥ 0.
    pub sigma0: f64,
}

impl TissueParams {
    pub fn to_array(&self) -> [f64; NUM_FIELDS] {
        [self.alpha, self.impedance, self.mu0, self.mu1, self.sigma0]
    }

    pub fn from_array(v: [f64; NUM_FIELDS]) -> Self {
        Self {
            alpha: v[FIELD_ALPHA],
            impedance: v[FIELD_IMPEDANCE],
            mu0: v[FIELD_MU0],
            mu1: v[FIELD_MU1],
            sigma0: v[FIELD_SIGMA0],
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.alpha >= 0.0
            && self.impedance >= IMPEDANCE_FLOOR
            && (0.0..=1.0).contains(&self.mu1)
            && self.sigma0 >= 0.0
            && self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Parameters for tissue ids `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterTable {
    entries: Vec<TissueParams>,
    names: Vec<String>,
}

impl ParameterTable {
    pub fn new(entries: Vec<TissueParams>) -> Self {
        let names = (0..entries.len()).map(|i| format!("tissue{i}")).collect();
        Self { entries, names }
    }

    pub fn with_names(entries: Vec<TissueParams>, names: Vec<String>) -> Self {
        assert_eq!(entries.len(), names.len(), "one name per entry");
        Self { entries, names }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TissueParams] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [TissueParams] {
        &mut self.entries
    }

    pub fn get(&self, label: usize) -> Option<&TissueParams> {
        self.entries.get(label)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Table reordered so that new id `perm[old]` holds the entry of `old`.
    pub fn permuted(&self, perm: &[u8]) -> Self {
        let mut entries = self.entries.clone();
        let mut names = self.names.clone();
        for (old, &new) in perm.iter().enumerate() {
            entries[new as usize] = self.entries[old];
            names[new as usize] = self.names[old].clone();
        }
        Self { entries, names }
    }

    pub fn is_feasible(&self) -> bool {
        self.entries.iter().all(TissueParams::is_feasible)
    }
}

/// Flat parameter vector with the label-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_labels(&self) -> usize {
        self.0.len() / NUM_FIELDS
    }

    pub fn index(label: usize, field: usize) -> usize {
        label * NUM_FIELDS + field
    }

    /// Human-readable name of coordinate `i`, e.g. `label2.mu1`.
    pub fn coordinate_name(i: usize) -> String {
        format!("label{}.{}", i / NUM_FIELDS, FIELD_NAMES[i % NUM_FIELDS])
    }
}

pub fn flatten(table: &ParameterTable) -> ParamVector {
    ParamVector(table.entries.iter().flat_map(|e| e.to_array()).collect())
}

pub fn unflatten(v: &ParamVector, num_labels: usize) -> Result<ParameterTable> {
    if v.len() != num_labels * NUM_FIELDS {
        return Err(Error::ParamLength {
            len: v.len(),
            labels: num_labels,
            expected: num_labels * NUM_FIELDS,
        });
    }
    let entries = v
        .0
        .chunks_exact(NUM_FIELDS)
        .map(|c| TissueParams::from_array(c.try_into().expect("chunk of five")))
        .collect();
    Ok(ParameterTable::new(entries))
}

/// Like [`unflatten`] but keeps the tissue names of `like`.
pub fn unflatten_like(v: &ParamVector, like: &ParameterTable) -> Result<ParameterTable> {
    let mut t = unflatten(v, like.len())?;
    t.names = like.names.clone();
    Ok(t)
}

/// Componentwise clamp onto the feasible set. Idempotent.
pub fn project_constraints(v: &ParamVector) -> ParamVector {
    let mut out = v.0.clone();
    for chunk in out.chunks_mut(NUM_FIELDS) {
        for (field, x) in chunk.iter_mut().enumerate() {
            *x = match field {
                FIELD_ALPHA | FIELD_SIGMA0 => x.max(0.0),
                FIELD_IMPEDANCE => x.max(IMPEDANCE_FLOOR),
                FIELD_MU1 => x.clamp(0.0, 1.0),
                _ => *x,
            };
        }
    }
    ParamVector(out)
}

/// Built-in defaults for `num_labels` tissues.
pub fn default_table(num_labels: usize) -> ParameterTable {
    assert!(num_labels >= 1, "default_table needs at least one label");
    let (builtin, _) = parse_table(BUILTIN_DEFAULTS, Path::new("defaults/tissues.toml"))
        .expect("built-in defaults parse");
    let n = builtin.len();
    let entries = (0..num_labels).map(|i| builtin.entries[i % n]).collect();
    let names = (0..num_labels)
        .map(|i| {
            if i < n {
                builtin.names[i].clone()
            } else {
                format!("{}_{i}", builtin.names[i % n])
            }
        })
        .collect();
    ParameterTable { entries, names }
}

pub fn table_to_string(table: &ParameterTable) -> String {
    let mut root = toml::Table::new();
    root.insert("version".into(), toml::Value::Integer(TABLE_VERSION));
    let mut labels = toml::Table::new();
    for (i, (e, name)) in table.entries.iter().zip(&table.names).enumerate() {
        let mut t = toml::Table::new();
        t.insert("name".into(), toml::Value::String(name.clone()));
        for (field, v) in FIELD_NAMES.iter().zip(e.to_array()) {
            t.insert((*field).into(), toml::Value::Float(v));
        }
        labels.insert(i.to_string(), toml::Value::Table(t));
    }
    root.insert("label".into(), toml::Value::Table(labels));
    toml::to_string(&root).expect("table serializes")
}

pub fn save_table(table: &ParameterTable, path: &Path) -> Result<()> {
    fs::write(path, table_to_string(table)).map_err(|e| Error::io(path, e))
}

pub fn load_table(path: &Path) -> Result<ParameterTable> {
    let (table, warnings) = load_table_with_warnings(path)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(table)
}

/// Load a table, returning non-fatal diagnostics (unknown keys) alongside it.
pub fn load_table_with_warnings(path: &Path) -> Result<(ParameterTable, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, path)
}

fn parse_table(text: &str, path: &Path) -> Result<(ParameterTable, Vec<String>)> {
    let root: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::parse(path, e.to_string()))?;
    let mut warnings = Vec::new();
    match root.get("version") {
        Some(toml::Value::Integer(TABLE_VERSION)) => {}
        Some(v) => return Err(Error::parse(path, format!("unsupported table version {v}"))),
        None => return Err(Error::parse(path, "missing `version` field")),
    }
    for key in root.keys().filter(|k| *k != "version" && *k != "label") {
        warnings.push(format!("unknown top-level key `{key}` ignored"));
    }
    let labels = root
        .get("label")
        .and_then(toml::Value::as_table)
        .ok_or_else(|| Error::parse(path, "missing `[label.N]` sections"))?;

    let mut entries = Vec::with_capacity(labels.len());
    let mut names = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let key = i.to_string();
        let section = labels.get(&key).and_then(toml::Value::as_table).ok_or_else(|| {
            Error::parse(path, format!("label ids must be contiguous from 0; `label.{key}` missing"))
        })?;
        let mut values = [0.0; NUM_FIELDS];
        for (slot, field) in values.iter_mut().zip(FIELD_NAMES) {
            *slot = match section.get(field) {
                Some(toml::Value::Float(f)) => *f,
                Some(toml::Value::Integer(n)) => *n as f64,
                Some(other) => {
                    return Err(Error::parse(
                        path,
                        format!("label {key}: field `{field}` is not a number: {other}"),
                    ))
                }
                None => {
                    return Err(Error::MissingField {
                        path: path.to_path_buf(),
                        label: key,
                        field: field.to_string(),
                    })
                }
            };
        }
        for extra in section.keys().filter(|k| *k != "name" && !FIELD_NAMES.contains(&k.as_str())) {
            warnings.push(format!("label {key}: unknown field `{extra}` ignored"));
        }
        let name = match section.get("name") {
            Some(toml::Value::String(s)) => s.clone(),
            _ => format!("tissue{i}"),
        };
        entries.push(TissueParams::from_array(values));
        names.push(name);
    }
    if entries.is_empty() {
        return Err(Error::parse(path, "table has no labels"));
    }
    Ok((ParameterTable { entries, names }, warnings))
}
