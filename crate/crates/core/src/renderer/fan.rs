//! Scan conversion from rectangular scanline space to a convex-probe sector.
//!
//! Source columns span the sector angle left to right, source rows span the
//! radius from `apex_offset_px` (transducer face) to `apex_offset_px + height`.
//! The annular sector is scaled to fit the output canvas, centered
//! horizontally and touching the top edge.

use serde::{Deserialize, Serialize};

use crate::autodiff::SamplePlan;
use crate::error::{Error, Result};
use crate::grid::{BinaryGrid, Grid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanGeometry {
    pub sector_angle_deg: f64,
    /// Apex distance above the top of the image, in source pixels.
    pub apex_offset_px: f64,
    pub output_height: usize,
    pub output_width: usize,
}

impl FanGeometry {
    /// 60° sector, apex a quarter of the depth above the image, output the same size.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self {
            sector_angle_deg: 60.0,
            apex_offset_px: 0.25 * height as f64,
            output_height: height,
            output_width: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sector_angle_deg > 0.0 && self.sector_angle_deg < 180.0) {
            return Err(Error::Config(format!(
                "fan: sector_angle_deg must be in (0, 180), got {}",
                self.sector_angle_deg
            )));
        }
        if !(self.apex_offset_px >= 0.0 && self.apex_offset_px.is_finite()) {
            return Err(Error::Config(format!(
                "fan: apex_offset_px must be finite and >= 0, got {}",
                self.apex_offset_px
            )));
        }
        if self.output_height == 0 || self.output_width == 0 {
            return Err(Error::Config("fan: output dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Output pixels per source pixel.
    pub fn scale(&self, src_height: usize) -> f64 {
        let half = self.sector_angle_deg.to_radians() / 2.0;
        let (r0, r1) = (self.apex_offset_px, self.apex_offset_px + src_height as f64);
        let width_extent = 2.0 * r1 * half.sin();
        let height_extent = r1 - r0 * half.cos();
        (self.output_width as f64 / width_extent).min(self.output_height as f64 / height_extent)
    }

    /// Inverse map of every output pixel to a source `(row, col)`, or `None` outside the sector.
    pub fn source_coords(&self, src_shape: (usize, usize)) -> Result<Vec<Option<(f64, f64)>>> {
        self.validate()?;
        let (h, w) = src_shape;
        if h == 0 || w == 0 {
            return Err(Error::Config("fan: empty source image".into()));
        }
        let half = self.sector_angle_deg.to_radians() / 2.0;
        let (r0, r1) = (self.apex_offset_px, self.apex_offset_px + h as f64);
        let s = self.scale(h);
        let top = r0 * half.cos();
        let mut coords = Vec::with_capacity(self.output_height * self.output_width);
        for i in 0..self.output_height {
            for j in 0..self.output_width {
                let x = (j as f64 + 0.5 - self.output_width as f64 / 2.0) / s;
                let y = (i as f64 + 0.5) / s + top;
                let radius = x.hypot(y);
                let angle = x.atan2(y);
                if angle.abs() <= half && (r0..=r1).contains(&radius) {
                    let col = (angle + half) / (2.0 * half) * w as f64 - 0.5;
                    let row = (radius - r0) / (r1 - r0) * h as f64 - 0.5;
                    coords.push(Some((row, col)));
                } else {
                    coords.push(None);
                }
            }
        }
        Ok(coords)
    }

    pub fn sample_plan(&self, src_shape: (usize, usize)) -> Result<SamplePlan> {
        let coords = self.source_coords(src_shape)?;
        Ok(SamplePlan::from_coords(
            src_shape,
            (self.output_height, self.output_width),
            &coords,
        ))
    }

    /// Output pixels that fall inside the sector.
    pub fn sector_mask(&self, src_shape: (usize, usize)) -> Result<BinaryGrid> {
        let plan = self.sample_plan(src_shape)?;
        Ok(BinaryGrid::new(self.output_height, self.output_width, plan.coverage()))
    }
}

/// Warp a scanline-space image into the fan; pixels outside the sector are 0.
pub fn fan_warp(image: &Grid, fan: &FanGeometry) -> Result<Grid> {
    Ok(fan.sample_plan(image.shape())?.apply(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image() {
        let fan = FanGeometry::default_for(32, 40);
        let out = fan_warp(&Grid::filled(32, 40, 0.6), &fan).unwrap();
        let mask = fan.sector_mask((32, 40)).unwrap();
        for (v, m) in out.data().iter().zip(mask.values()) {
            let expected = if *m == 1 { 0.6 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
        assert!(mask.count_ones() > 0);
    }

    #[test]
    fn values_stay_within_source_range() {
        let img = Grid::from_fn(20, 30, |r, c| ((r * 7 + c * 13) % 11) as f64 / 10.0 - 0.3);
        let fan = FanGeometry {
            output_height: 50,
            output_width: 45,
            ..FanGeometry::default_for(20, 30)
        };
        let out = fan_warp(&img, &fan).unwrap();
        let mask = fan.sector_mask((20, 30)).unwrap();
        let (lo, hi) = (img.min(), img.max());
        for (v, m) in out.data().iter().zip(mask.values()) {
            if *m == 1 {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sector_area_matches_annulus() {
        // analytic area of the annular sector in output pixels: (θ/2)(r1² − r0²)·s²
        let (h, w) = (128, 128);
        let fan = FanGeometry {
            output_height: 256,
            output_width: 256,
            ..FanGeometry::default_for(h, w)
        };
        let s = fan.scale(h);
        let (r0, r1) = (fan.apex_offset_px * s, (fan.apex_offset_px + h as f64) * s);
        let theta = 60f64.to_radians();
        let analytic = theta / 2.0 * (r1 * r1 - r0 * r0);
        let counted = fan.sector_mask((h, w)).unwrap().count_ones() as f64;
        let rel = (counted - analytic).abs() / analytic;
        assert!(rel < 0.02, "counted {counted}, analytic {analytic}");
    }

    #[test]
    fn degenerate_geometry() {
        let mut fan = FanGeometry::default_for(10, 10);
        fan.sector_angle_deg = 180.0;
        assert!(fan_warp(&Grid::zeros(10, 10), &fan).is_err());
        fan.sector_angle_deg = 0.0;
        assert!(fan.validate().is_err());
        let fan = FanGeometry {
            output_width: 0,
            ..FanGeometry::default_for(10, 10)
        };
        assert!(fan.validate().is_err());
    }
}
