//! Run configuration: TOML file, `--set` overrides, flag overrides, path
//! resolution and validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::GradcheckOptions;
use crate::labelmap::{load_labelmap, load_labelmap_ids, AugmentSpec, LabelFormat, LabelMap};
use crate::renderer::{render, FanGeometry, RenderConfig};
use crate::tasks::{OptimConfig, Polarity, TaskSpec};
use crate::tissue::{default_table, load_table, ParameterTable};

use super::output::read_raw;

/// Config error whose message is shown verbatim.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<crate::Error> for ConfigError {
    fn from(e: crate::Error) -> Self {
        ConfigError(e.to_string())
    }
}

type CResult<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub labelmap: Option<PathBuf>,
    pub labelmap_format: Option<LabelFormat>,
    /// Parameter table; built-in defaults when absent.
    pub table: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mse,
    SoftDice,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// MSE target rendered from this table with the run's render settings.
    pub target_table: Option<PathBuf>,
    /// MSE target read from a raw float image (`.f32` with JSON sidecar).
    pub target_image: Option<PathBuf>,
    pub target_label: Option<u8>,
    pub polarity: Option<Polarity>,
    pub gate_gamma: Option<f64>,
    pub gate_tau: Option<f64>,
}

/// `AugmentSpec` fields plus the number of maps to write.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub n: usize,
    pub rotation_deg: [f64; 2],
    pub translation_x_px: [f64; 2],
    pub translation_y_px: [f64; 2],
    pub scale: [f64; 2],
    pub fill_label: u8,
    pub seed: u64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let d = AugmentSpec::default();
        Self {
            n: 1,
            rotation_deg: d.rotation_deg,
            translation_x_px: d.translation_x_px,
            translation_y_px: d.translation_y_px,
            scale: d.scale,
            fill_label: d.fill_label,
            seed: d.seed,
        }
    }
}

impl AugmentSection {
    pub fn spec(&self) -> AugmentSpec {
        AugmentSpec {
            rotation_deg: self.rotation_deg,
            translation_x_px: self.translation_x_px,
            translation_y_px: self.translation_y_px,
            scale: self.scale,
            fill_label: self.fill_label,
            seed: self.seed,
        }
    }
}

/// The file as written by the user.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: PathsSection,
    pub render: Option<toml::Table>,
    pub task: Option<TaskSection>,
    pub optim: Option<OptimConfig>,
    pub augment: Option<AugmentSection>,
    pub gradcheck: Option<GradcheckOptions>,
}

/// Overrides from the command line, applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `dotted.key=value` pairs; values parse as TOML, else as strings.
    pub set: Vec<String>,
}

/// Everything a command needs, loaded and validated.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Top-level seed as given (file or flag); already folded into `render` and `augment`.
    pub global_seed: Option<u64>,
    pub labelmap_path: PathBuf,
    pub labelmap_format: LabelFormat,
    pub table_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub map: LabelMap,
    pub table: ParameterTable,
    pub render: RenderConfig,
    pub task_section: Option<TaskSection>,
    pub optim: OptimConfig,
    pub augment: AugmentSection,
    pub gradcheck: GradcheckOptions,
}

pub fn load(config: &Path, ov: &Overrides) -> CResult<Resolved> {
    let text = fs::read_to_string(config)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", config.display())))?;
    let mut root: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError(format!("{}: {e}", config.display())))?;
    for kv in &ov.set {
        apply_set(&mut root, kv)?;
    }
    let rc: RunConfig = toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("{}: {}", config.display(), e.message())))?;
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    resolve(rc, &base, ov)
}

fn apply_set(root: &mut toml::Table, kv: &str) -> CResult<()> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("--set expects key=value, got `{kv}`")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("--set {key}: `{part}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn resolve_path(base: &Path, p: &Path, key: &str) -> CResult<PathBuf> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.exists() {
        return Err(ConfigError(format!("{key}: file not found: {}", full.display())));
    }
    Ok(full)
}

fn resolve(rc: RunConfig, base: &Path, ov: &Overrides) -> CResult<Resolved> {
    let labelmap_rel = rc
        .paths
        .labelmap
        .as_ref()
        .ok_or_else(|| ConfigError("paths.labelmap: required".into()))?;
    let labelmap_path = resolve_path(base, labelmap_rel, "paths.labelmap")?;
    let labelmap_format = match rc.paths.labelmap_format {
        Some(f) => f,
        None => LabelFormat::from_path(&labelmap_path).ok_or_else(|| {
            ConfigError("paths.labelmap_format: cannot infer from extension; set it explicitly".into())
        })?,
    };
    let table_path = rc
        .paths
        .table
        .as_ref()
        .map(|p| resolve_path(base, p, "paths.table"))
        .transpose()?;
    let out_dir = match (&ov.out, &rc.paths.out_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) if o.is_absolute() => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => base.join("out"),
    };

    // ids index the table directly; without a table, the largest id sizes the defaults
    let probe = load_labelmap(&labelmap_path, labelmap_format).map_err(|e| ConfigError(format!("paths.labelmap: {e}")))?;
    let max_value = probe.source_values().iter().copied().max().unwrap_or(0);
    let table = match &table_path {
        Some(p) => load_table(p).map_err(|e| ConfigError(format!("paths.table: {e}")))?,
        None => {
            let k = usize::try_from(max_value + 1)
                .map_err(|_| ConfigError("paths.labelmap: negative label values".into()))?;
            default_table(k.max(1))
        }
    };
    if max_value < 0 || max_value as usize >= table.len() {
        return Err(ConfigError(format!(
            "paths.table: label map uses id {max_value} but the table has {} labels",
            table.len()
        )));
    }
    let map = load_labelmap_ids(&labelmap_path, labelmap_format, table.len())
        .map_err(|e| ConfigError(format!("paths.labelmap: {e}")))?;

    let seed = ov.seed.or(rc.seed);
    let mut render_table = rc.render.clone().unwrap_or_default();
    if let Some(toml::Value::Table(fan)) = render_table.get_mut("fan") {
        // unspecified fan fields take their size-dependent defaults
        let d = FanGeometry::default_for(map.height(), map.width());
        fan.entry("sector_angle_deg").or_insert(toml::Value::Float(d.sector_angle_deg));
        fan.entry("apex_offset_px").or_insert(toml::Value::Float(d.apex_offset_px));
        fan.entry("output_height").or_insert(toml::Value::Integer(d.output_height as i64));
        fan.entry("output_width").or_insert(toml::Value::Integer(d.output_width as i64));
    }
    let mut render: RenderConfig = toml::Value::Table(render_table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError(format!("render: {}", e.message())))?;
    if let Some(s) = seed {
        render.seed = s;
    }
    render.validate()?;

    let optim = rc.optim.clone().unwrap_or_default();
    let mut augment = rc.augment.clone().unwrap_or_default();
    if let Some(s) = seed {
        augment.seed = s;
    }
    augment.spec().validate(table.len())?;

    let task_section = match rc.task {
        Some(mut t) => {
            if let Some(p) = &t.target_table {
                t.target_table = Some(resolve_path(base, p, "task.target_table")?);
            }
            if let Some(p) = &t.target_image {
                t.target_image = Some(resolve_path(base, p, "task.target_image")?);
            }
            Some(t)
        }
        None => None,
    };

    Ok(Resolved {
        global_seed: seed,
        labelmap_path,
        labelmap_format,
        table_path,
        out_dir,
        map,
        table,
        render,
        task_section,
        optim,
        augment,
        gradcheck: rc.gradcheck.unwrap_or_default(),
    })
}

impl Resolved {
    /// Build the task; MSE targets are rendered or read here.
    pub fn task(&self) -> CResult<TaskSpec> {
        let t = self
            .task_section
            .as_ref()
            .ok_or_else(|| ConfigError("task: section required for this command".into()))?;
        let spec = match t.kind {
            TaskKind::Mse => {
                let target = match (&t.target_table, &t.target_image) {
                    (Some(p), None) => {
                        let table = load_table(p).map_err(|e| ConfigError(format!("task.target_table: {e}")))?;
                        render(&self.map, &table, &self.render)
                            .map_err(|e| ConfigError(format!("task.target_table: {e}")))?
                            .bmode
                    }
                    (None, Some(p)) => read_raw(p).map_err(|e| ConfigError(format!("task.target_image: {e}")))?,
                    _ => {
                        return Err(ConfigError(
                            "task: kind = \"mse\" needs exactly one of target_table, target_image".into(),
                        ))
                    }
                };
                TaskSpec::ReconstructionMse { target }
            }
            TaskKind::SoftDice => TaskSpec::SoftDice {
                target_label: t
                    .target_label
                    .ok_or_else(|| ConfigError("task.target_label: required for soft_dice".into()))?,
                polarity: t.polarity.unwrap_or(Polarity::Dark),
                gate_gamma: t.gate_gamma.unwrap_or(10.0),
                gate_tau: t.gate_tau.unwrap_or(0.3),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fully explicit config reproducing this run when loaded again.
    pub fn snapshot(&self) -> String {
        let render = toml::Value::try_from(&self.render)
            .ok()
            .and_then(|v| v.as_table().cloned())
            .expect("render config serializes");
        let rc = RunConfig {
            seed: self.global_seed,
            paths: PathsSection {
                labelmap: Some(absolute(&self.labelmap_path)),
                labelmap_format: Some(self.labelmap_format),
                table: self.table_path.as_deref().map(absolute),
                out_dir: Some(absolute(&self.out_dir)),
            },
            render: Some(render),
            task: self.task_section.clone().map(|mut t| {
                t.target_table = t.target_table.as_deref().map(absolute);
                t.target_image = t.target_image.as_deref().map(absolute);
                t
            }),
            optim: Some(self.optim.clone()),
            augment: Some(self.augment.clone()),
            gradcheck: Some(self.gradcheck),
        };
        toml::to_string(&rc).expect("run config serializes")
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_keys() {
        let mut t: toml::Table = "[render]\nbeta = 2.0\n".parse().unwrap();
        apply_set(&mut t, "render.beta=30").unwrap();
        apply_set(&mut t, "task.polarity=bright").unwrap();
        assert_eq!(t["render"]["beta"].as_integer(), Some(30));
        assert_eq!(t["task"]["polarity"].as_str(), Some("bright"));
        assert!(apply_set(&mut t, "novalue").is_err());
        assert!(apply_set(&mut t, "render.beta.x=1").is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let t: toml::Table = "bogus_key = 1\n".parse().unwrap();
        let err = toml::Value::Table(t).try_into::<RunConfig>().unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
    }
}
