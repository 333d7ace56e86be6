use crate::error::{Error, Result};
use crate::grid::Grid;

/// Normalized 2D Gaussian on a `(2·radius+1)²` grid; rows are axial, columns lateral.
pub fn psf_kernel(sigma_axial: f64, sigma_lateral: f64, radius: usize) -> Result<Grid> {
    if !(sigma_axial > 0.0 && sigma_lateral > 0.0) || radius < 1 {
        return Err(Error::Config(format!(
            "psf: sigmas must be > 0 and radius >= 1 (got {sigma_axial}, {sigma_lateral}, {radius})"
        )));
    }
    let n = 2 * radius + 1;
    let r = radius as f64;
    let mut k = Grid::from_fn(n, n, |i, j| {
        let (di, dj) = (i as f64 - r, j as f64 - r);
        (-(di * di / (2.0 * sigma_axial * sigma_axial) + dj * dj / (2.0 * sigma_lateral * sigma_lateral))).exp()
    });
    let total = k.sum();
    k.data_mut().iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_to_one() {
        for (a, l, r) in [(0.3, 2.0, 1), (1.0, 1.0, 3), (5.0, 0.7, 6)] {
            let k = psf_kernel(a, l, r).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-9);
            assert_eq!(k.shape(), (2 * r + 1, 2 * r + 1));
        }
    }

    #[test]
    fn isotropic_is_transpose_symmetric() {
        let k = psf_kernel(1.3, 1.3, 4).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(k.get(i, j), k.get(j, i));
            }
        }
    }

    #[test]
    fn wide_sigma_is_flat() {
        let k = psf_kernel(1e6, 1e6, 1).unwrap();
        for v in k.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_arguments() {
        assert!(psf_kernel(0.0, 1.0, 1).is_err());
        assert!(psf_kernel(1.0, -1.0, 1).is_err());
        assert!(psf_kernel(1.0, 1.0, 0).is_err());
    }
}
