//! Synthetic abdominal phantom: banded soft tissue with a round vessel.

use crate::error::{Error, Result};
use crate::labelmap::LabelMap;
use crate::tissue::default_table;

pub const BACKGROUND: u8 = 0;
pub const FAT: u8 = 1;
pub const VESSEL: u8 = 2;
pub const MUSCLE: u8 = 3;
pub const BONE: u8 = 4;

/// Label layout by depth fraction: fat band, muscle band (K ≥ 4), bone band
/// (K = 5) and a vessel disc below the muscle. `num_labels` must be 3, 4 or 5.
pub fn abdominal(height: usize, width: usize, num_labels: usize) -> Result<LabelMap> {
    if !(3..=5).contains(&num_labels) {
        return Err(Error::LabelMap(format!(
            "phantom supports 3 to 5 labels, got {num_labels}"
        )));
    }
    let (h, w) = (height as f64, width as f64);
    let (cy, cx) = (0.62 * h, 0.5 * w);
    let radius = 0.14 * h.min(w);
    let band = |y: f64, lo: f64, hi: f64| y >= lo * h && y < hi * h;
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let label = if (y - cy).hypot(x - cx) <= radius {
                VESSEL
            } else if band(y, 0.08, 0.22) {
                FAT
            } else if num_labels >= 4 && band(y, 0.30, 0.42) {
                MUSCLE
            } else if num_labels >= 5 && band(y, 0.84, 0.94) {
                BONE
            } else {
                BACKGROUND
            };
            labels.push(label);
        }
    }
    let names = default_table(num_labels).names().to_vec();
    LabelMap::new(height, width, labels, num_labels)?.with_names(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_label_is_present() {
        for (h, w, k) in [(16, 16, 4), (64, 64, 3), (64, 64, 5), (24, 20, 5)] {
            let m = abdominal(h, w, k).unwrap();
            assert_eq!(m.present_labels().len(), k, "{h}x{w} K={k}");
        }
    }

    #[test]
    fn rejects_unsupported_label_counts() {
        assert!(abdominal(16, 16, 2).is_err());
        assert!(abdominal(16, 16, 6).is_err());
    }
}
