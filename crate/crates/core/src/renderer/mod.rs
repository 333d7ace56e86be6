//! Ray-cast B-mode rendering.
//!
//! Each column of the label map is one scanline, cast from the transducer at
//! row 0. Per column the renderer accumulates
//!
//! * attenuation `I`: running product of `exp(−α·Δd)`,
//! * transmission `T`: running product of `1 − φ_r`, where `φ_r` is the
//!   impedance reflection coefficient at tissue boundaries,
//!
//! and combines them into the incident energy `I_eff = I ⊙ T(shifted one row)`.
//! The echo is `E = g ⊙ (R + B)` with reflection `R = PSF ∗ |I_eff ⊙ φ_r|` and
//! backscatter `B = I_eff ⊙ (PSF ∗ T̃)`, where `T̃` is the sigmoid-gated random
//! scatterer texture. `g` is a linear depth gain. The echo is optionally
//! clamped to `[0, 1]` and warped into a fan.
//!
//! Everything is recorded on an [`autodiff::Tape`](crate::autodiff::Tape), so
//! the loss gradient with respect to all `5K` tissue parameters comes from one
//! backward sweep.

mod fan;
mod psf;
mod texture;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use fan::{fan_warp, FanGeometry};
pub use psf::psf_kernel;
pub use texture::ScatterTextures;

use crate::autodiff::{LabelIndex, NodeId, Tape};
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};
use crate::labelmap::LabelMap;
use crate::tissue::{
    flatten, ParameterTable, FIELD_ALPHA, FIELD_IMPEDANCE, FIELD_MU0, FIELD_MU1, FIELD_SIGMA0, NUM_FIELDS,
};

/// Non-learnable renderer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Depth per pixel; `None` means `1 / height` so the full image spans unit depth.
    pub delta_d: Option<f64>,
    pub psf_sigma_axial: f64,
    pub psf_sigma_lateral: f64,
    pub psf_radius: usize,
    /// Steepness of the sigmoid scatterer gate.
    pub beta: f64,
    pub tgc_alpha: f64,
    pub tgc_beta: f64,
    pub fan: Option<FanGeometry>,
    pub clamp_output: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            delta_d: None,
            psf_sigma_axial: 1.0,
            psf_sigma_lateral: 1.5,
            psf_radius: 3,
            beta: 20.0,
            tgc_alpha: 1.0,
            tgc_beta: 1.0,
            fan: None,
            clamp_output: true,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn delta_d_for(&self, height: usize) -> f64 {
        self.delta_d.unwrap_or(1.0 / height as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.delta_d {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("render.delta_d must be > 0, got {d}")));
            }
        }
        if !(self.psf_sigma_axial > 0.0 && self.psf_sigma_lateral > 0.0) {
            return Err(Error::Config("render.psf_sigma_axial and psf_sigma_lateral must be > 0".into()));
        }
        if self.psf_radius < 1 {
            return Err(Error::Config("render.psf_radius must be >= 1".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("render.beta must be > 0, got {}", self.beta)));
        }
        if !(self.tgc_alpha.is_finite() && self.tgc_beta.is_finite()) {
            return Err(Error::Config("render.tgc_alpha and tgc_beta must be finite".into()));
        }
        if let Some(fan) = &self.fan {
            fan.validate()?;
        }
        Ok(())
    }

    /// Depth gain per row: `max(tgc_alpha + tgc_beta · r · Δd, 0)`.
    pub fn tgc_curve(&self, height: usize) -> Vec<f64> {
        let dd = self.delta_d_for(height);
        (0..height)
            .map(|r| (self.tgc_alpha + self.tgc_beta * r as f64 * dd).max(0.0))
            .collect()
    }
}

/// Sequential evaluation is bit-deterministic; parallel evaluation splits
/// convolution and fan resampling over the current rayon pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub bmode: Grid,
    pub attenuation_map: Grid,
    pub reflection_map: Grid,
    pub scatter_map: Grid,
    pub transmission_map: Grid,
    pub echo_pre_warp: Grid,
    pub boundary: BinaryGrid,
}

/// Tape nodes of one render.
#[derive(Debug, Clone, Copy)]
pub struct RenderNodes {
    pub attenuation: NodeId,
    pub reflection_coeff: NodeId,
    pub transmission: NodeId,
    pub reflection: NodeId,
    pub texture: NodeId,
    pub scatter: NodeId,
    pub echo: NodeId,
    pub bmode: NodeId,
}

/// Label map prepared for gathering, plus the boundary map.
#[derive(Debug, Clone)]
pub struct RayGeometry {
    here: Arc<LabelIndex>,
    above: Arc<LabelIndex>,
    boundary: BinaryGrid,
}

impl RayGeometry {
    pub fn new(map: &LabelMap) -> Self {
        let (h, w) = map.shape();
        let labels = map.labels().to_vec();
        // row 0 has nothing above it; reuse its own label so φ_r = 0 there
        let above: Vec<u8> = (0..h * w).map(|i| if i < w { labels[i] } else { labels[i - w] }).collect();
        let boundary = labels.iter().zip(&above).map(|(a, b)| u8::from(a != b)).collect();
        Self {
            here: Arc::new(LabelIndex::new(h, w, labels)),
            above: Arc::new(LabelIndex::new(h, w, above)),
            boundary: BinaryGrid::new(h, w, boundary),
        }
    }

    pub fn boundary(&self) -> &BinaryGrid {
        &self.boundary
    }

    pub fn shape(&self) -> (usize, usize) {
        self.here.shape()
    }
}

fn check_table(map: &LabelMap, table: &ParameterTable) -> Result<()> {
    if let Some(&max) = map.present_labels().iter().next_back() {
        if max as usize >= table.len() {
            return Err(Error::MissingLabel {
                label: max as usize,
                table_len: table.len(),
            });
        }
    }
    Ok(())
}

/// Place a table on the tape as a differentiable `K × 5` leaf.
pub fn table_leaf(tape: &mut Tape, table: &ParameterTable) -> Result<NodeId> {
    tape.leaf(Grid::new(table.len(), NUM_FIELDS, flatten(table).0))
}

/// `I[r, c] = Π_{r' ≤ r} exp(−α(L[r', c]) · Δd)`
pub fn attenuation_on_tape(tape: &mut Tape, params: NodeId, geom: &RayGeometry, delta_d: f64) -> Result<NodeId> {
    let alpha = tape.gather_by_label(params, geom.here.clone(), FIELD_ALPHA)?;
    let exponent = tape.scale(alpha, -delta_d)?;
    let step = tape.exp(exponent)?;
    tape.column_cumprod(step)
}

/// `φ_r = G ⊙ ((Z₂ − Z₁) / (Z₂ + Z₁))²` with `Z₁` the impedance one row up.
pub fn reflection_coeff_on_tape(tape: &mut Tape, params: NodeId, geom: &RayGeometry) -> Result<NodeId> {
    let z2 = tape.gather_by_label(params, geom.here.clone(), FIELD_IMPEDANCE)?;
    let z1 = tape.gather_by_label(params, geom.above.clone(), FIELD_IMPEDANCE)?;
    let diff = tape.sub(z2, z1)?;
    let total = tape.add(z2, z1)?;
    let ratio = tape.div(diff, total)?;
    let coeff = tape.square(ratio)?;
    let g = tape.constant(geom.boundary.to_grid())?;
    tape.mul(coeff, g)
}

/// `T[r, c] = Π_{r' ≤ r} (1 − φ_r[r', c])`
pub fn transmission_on_tape(tape: &mut Tape, phi_r: NodeId) -> Result<NodeId> {
    let negated = tape.scale(phi_r, -1.0)?;
    let residual = tape.offset(negated, 1.0)?;
    tape.column_cumprod(residual)
}

/// `T̃ = sigmoid(β · (μ₁ − T₁)) ⊙ (T₀ ⊙ σ₀ + μ₀)`
pub fn scatter_texture_on_tape(
    tape: &mut Tape,
    params: NodeId,
    geom: &RayGeometry,
    textures: &ScatterTextures,
    beta: f64,
) -> Result<NodeId> {
    let shape = geom.shape();
    for t in [&textures.t0, &textures.t1] {
        if t.shape() != shape {
            return Err(Error::Shape {
                op: "scatter_texture",
                left: shape,
                right: t.shape(),
            });
        }
    }
    let mu0 = tape.gather_by_label(params, geom.here.clone(), FIELD_MU0)?;
    let mu1 = tape.gather_by_label(params, geom.here.clone(), FIELD_MU1)?;
    let sigma0 = tape.gather_by_label(params, geom.here.clone(), FIELD_SIGMA0)?;
    let t0 = tape.constant(textures.t0.clone())?;
    let t1 = tape.constant(textures.t1.clone())?;
    let spread = tape.mul(t0, sigma0)?;
    let brightness = tape.add(spread, mu0)?;
    let margin = tape.sub(mu1, t1)?;
    let logits = tape.scale(margin, beta)?;
    let gate = tape.sigmoid(logits)?;
    tape.mul(gate, brightness)
}

/// Record the full render of `map` under the parameters held in `params`.
pub fn render_on_tape(
    tape: &mut Tape,
    params: NodeId,
    geom: &RayGeometry,
    cfg: &RenderConfig,
    textures: &ScatterTextures,
) -> Result<RenderNodes> {
    cfg.validate()?;
    let (h, w) = geom.shape();
    let delta_d = cfg.delta_d_for(h);
    let psf = Arc::new(psf_kernel(cfg.psf_sigma_axial, cfg.psf_sigma_lateral, cfg.psf_radius)?);

    let attenuation = attenuation_on_tape(tape, params, geom, delta_d)?;
    let reflection_coeff = reflection_coeff_on_tape(tape, params, geom)?;
    let transmission = transmission_on_tape(tape, reflection_coeff)?;
    let transmitted = tape.shift_down(transmission, 1.0)?;
    let incident = tape.mul(attenuation, transmitted)?;

    let reflected = tape.mul(incident, reflection_coeff)?;
    let reflected = tape.abs(reflected)?;
    let reflection = tape.conv2d(reflected, psf.clone())?;

    let texture = scatter_texture_on_tape(tape, params, geom, textures, cfg.beta)?;
    let blurred = tape.conv2d(texture, psf)?;
    let scatter = tape.mul(incident, blurred)?;

    let raw = tape.add(reflection, scatter)?;
    let gain = cfg.tgc_curve(h);
    let gain = tape.constant(Grid::from_fn(h, w, |r, _| gain[r]))?;
    let mut echo = tape.mul(raw, gain)?;
    if cfg.clamp_output {
        echo = tape.clamp(echo, 0.0, 1.0)?;
    }
    let bmode = match &cfg.fan {
        Some(fan) => tape.bilinear_sample(echo, Arc::new(fan.sample_plan((h, w))?))?,
        None => echo,
    };
    Ok(RenderNodes {
        attenuation,
        reflection_coeff,
        transmission,
        reflection,
        texture,
        scatter,
        echo,
        bmode,
    })
}

pub fn render(map: &LabelMap, table: &ParameterTable, cfg: &RenderConfig) -> Result<RenderOutput> {
    render_with(map, table, cfg, ExecMode::Sequential)
}

pub fn render_with(map: &LabelMap, table: &ParameterTable, cfg: &RenderConfig, mode: ExecMode) -> Result<RenderOutput> {
    check_table(map, table)?;
    let geom = RayGeometry::new(map);
    let textures = ScatterTextures::generate(map.height(), map.width(), cfg.seed);
    let mut tape = Tape::new();
    tape.set_parallel(mode == ExecMode::Parallel);
    let params = table_leaf(&mut tape, table)?;
    let nodes = render_on_tape(&mut tape, params, &geom, cfg, &textures)?;
    Ok(RenderOutput {
        bmode: tape.value(nodes.bmode).clone(),
        attenuation_map: tape.value(nodes.attenuation).clone(),
        reflection_map: tape.value(nodes.reflection).clone(),
        scatter_map: tape.value(nodes.scatter).clone(),
        transmission_map: tape.value(nodes.transmission).clone(),
        echo_pre_warp: tape.value(nodes.echo).clone(),
        boundary: geom.boundary.clone(),
    })
}

fn eval_on_tape(
    map: &LabelMap,
    table: &ParameterTable,
    build: impl FnOnce(&mut Tape, NodeId, &RayGeometry) -> Result<NodeId>,
) -> Result<Grid> {
    check_table(map, table)?;
    let geom = RayGeometry::new(map);
    let mut tape = Tape::new();
    let params = table_leaf(&mut tape, table)?;
    let out = build(&mut tape, params, &geom)?;
    Ok(tape.value(out).clone())
}

/// Attenuation map `I` alone.
pub fn attenuation_map(map: &LabelMap, table: &ParameterTable, delta_d: f64) -> Result<Grid> {
    eval_on_tape(map, table, |t, p, g| attenuation_on_tape(t, p, g, delta_d))
}

/// Reflection coefficients `φ_r` and the boundary map `G`.
pub fn reflection_terms(map: &LabelMap, table: &ParameterTable) -> Result<(Grid, BinaryGrid)> {
    let phi = eval_on_tape(map, table, reflection_coeff_on_tape)?;
    Ok((phi, RayGeometry::new(map).boundary))
}

/// Cumulative residual signal `T` from reflection coefficients.
pub fn transmission_map(phi_r: &Grid) -> Result<Grid> {
    let mut tape = Tape::new();
    let phi = tape.constant(phi_r.clone())?;
    let t = transmission_on_tape(&mut tape, phi)?;
    Ok(tape.value(t).clone())
}

/// Sigmoid-gated scatterer texture `T̃` for given random fields.
pub fn scatter_texture(
    map: &LabelMap,
    table: &ParameterTable,
    t0: &Grid,
    t1: &Grid,
    beta: f64,
) -> Result<Grid> {
    let textures = ScatterTextures {
        t0: t0.clone(),
        t1: t1.clone(),
    };
    eval_on_tape(map, table, |t, p, g| scatter_texture_on_tape(t, p, g, &textures, beta))
}
