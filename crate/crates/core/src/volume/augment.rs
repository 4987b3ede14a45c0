use serde::{Deserialize, Serialize};

use super::{Dims, Volume};
use crate::rng::SplitMix64;
use crate::{quantize_u8, Error, Result};

/// Intensity sub-range `[lo, hi]` stretched onto the full 8-bit range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntensityWindow {
    lo: u8,
    hi: u8,
}

impl IntensityWindow {
    pub fn new(lo: u8, hi: u8) -> Result<Self> {
        if lo >= hi {
            return Err(Error::param("window", format!("lo ({lo}) must be below hi ({hi})")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> u8 {
        self.lo
    }

    pub fn hi(&self) -> u8 {
        self.hi
    }

    #[inline]
    pub fn map(&self, v: u8) -> u8 {
        let t = (v as f64 - self.lo as f64) / (self.hi as f64 - self.lo as f64);
        quantize_u8(255.0 * t.clamp(0.0, 1.0))
    }
}

pub fn apply_window(v: &Volume, w: IntensityWindow) -> Volume {
    let mut lut = [0u8; 256];
    for (i, slot) in lut.iter_mut().enumerate() {
        *slot = w.map(i as u8);
    }
    let data = v.data().iter().map(|&x| lut[x as usize]).collect();
    Volume::new(v.dims(), data).expect("dims unchanged")
}

/// Weights that evaluate the least-squares polynomial of degree `degree`,
/// fitted over offsets `-half..=half`, at offset 0.
///
/// `degree` is capped at `2 * half` so the normal equations stay non-singular.
pub fn savgol_center_weights(half: usize, degree: usize) -> Vec<f64> {
    let degree = degree.min(2 * half);
    let m = degree + 1;
    let offsets: Vec<f64> = (-(half as i64)..=half as i64).map(|t| t as f64).collect();

    // Normal matrix G[j][k] = sum_t t^(j+k); solve G g = e0.
    let mut g = vec![vec![0.0; m + 1]; m];
    for (j, row) in g.iter_mut().enumerate() {
        for k in 0..m {
            row[k] = offsets.iter().map(|t| t.powi((j + k) as i32)).sum();
        }
        row[m] = if j == 0 { 1.0 } else { 0.0 };
    }
    let sol = solve_dense(g);

    offsets
        .iter()
        .map(|t| sol.iter().enumerate().map(|(k, c)| c * t.powi(k as i32)).sum())
        .collect()
}

/// Gauss-Jordan with partial pivoting on an augmented `m x (m+1)` system.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let m = a.len();
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        for k in col..=m {
            a[col][k] /= p;
        }
        for r in 0..m {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in col..=m {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    a.into_iter().map(|row| row[m]).collect()
}

/// Savitzky-Golay smoothing of every z-profile.
///
/// Near the ends of the z axis the window shrinks to the largest odd,
/// symmetric window that fits.
pub fn sg_smooth_z(v: &Volume, window: usize, order: usize) -> Result<Volume> {
    let Dims { nx, ny, nz } = v.dims();
    if window == 0 || window % 2 == 0 {
        return Err(Error::param("window", format!("must be odd and positive, got {window}")));
    }
    if window > nz {
        return Err(Error::param("window", format!("{window} exceeds nz = {nz}")));
    }
    if order >= window {
        return Err(Error::param("order", format!("{order} must be below window {window}")));
    }
    let half = window / 2;
    let weights: Vec<Vec<f64>> = (0..=half).map(|h| savgol_center_weights(h, order)).collect();

    let plane = nx * ny;
    let src = v.data();
    let mut out = vec![0u8; src.len()];
    for z in 0..nz {
        let h = half.min(z).min(nz - 1 - z);
        let w = &weights[h];
        for xy in 0..plane {
            let acc: f64 = w
                .iter()
                .enumerate()
                .map(|(t, c)| c * src[xy + plane * (z + t - h)] as f64)
                .sum();
            out[xy + plane * z] = quantize_u8(acc);
        }
    }
    Volume::new(v.dims(), out)
}

/// Adds seeded zero-mean Gaussian noise to every voxel (linear order) and clamps.
pub fn add_noise(v: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = SplitMix64::new(seed);
    let data = v
        .data()
        .iter()
        .map(|&x| quantize_u8(x as f64 + sigma * rng.next_gaussian()))
        .collect();
    Volume::new(v.dims(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[u8]) -> Volume {
        Volume::new(Dims::new(1, 1, values.len()), values.to_vec()).unwrap()
    }

    /// Independent least-squares line fit evaluated at the window centre.
    fn ls_line_at_center(ys: &[f64]) -> f64 {
        let n = ys.len() as f64;
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        intercept + slope * xs[ys.len() / 2]
    }

    #[test]
    fn identity_window() {
        let v = Volume::from_fn(Dims::new(16, 16, 1), |x, y, _| (x * 16 + y) as u8).unwrap();
        assert_eq!(apply_window(&v, IntensityWindow::new(0, 255).unwrap()), v);
    }

    #[test]
    fn window_clamps_and_rounds() {
        let w = IntensityWindow::new(50, 150).unwrap();
        assert_eq!(w.map(40), 0);
        assert_eq!(w.map(200), 255);
        assert_eq!(w.map(100), 128);
        assert!(IntensityWindow::new(10, 10).is_err());
    }

    #[test]
    fn sg_constant_unchanged() {
        let v = column(&[7; 7]);
        assert_eq!(sg_smooth_z(&v, 5, 1).unwrap(), v);
    }

    #[test]
    fn sg_linear_ramp_exact() {
        let ramp: Vec<u8> = (0..10).collect();
        let v = column(&ramp);
        let out = sg_smooth_z(&v, 5, 1).unwrap();
        // Shrunken end windows are symmetric, so a line is reproduced there too.
        assert_eq!(out.data(), ramp.as_slice());
    }

    #[test]
    fn sg_interior_is_moving_mean() {
        let mut rng = SplitMix64::new(11);
        let profile: Vec<u8> = (0..40).map(|_| rng.next() as u8).collect();
        let out = sg_smooth_z(&column(&profile), 5, 1).unwrap();
        for z in 2..38 {
            let win: Vec<f64> = profile[z - 2..=z + 2].iter().map(|&b| b as f64).collect();
            let fit = ls_line_at_center(&win);
            let mean = win.iter().sum::<f64>() / 5.0;
            assert!((fit - mean).abs() < 1e-9);
            assert!((out.data()[z] as f64 - fit).abs() <= 0.5 + 1e-9, "z={z}");
        }
    }

    #[test]
    fn sg_weights_known_values() {
        let w = savgol_center_weights(2, 2);
        let expect = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|c| c / 35.0);
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sg_parameter_errors() {
        let v = column(&[1, 2, 3, 4]);
        assert!(sg_smooth_z(&v, 4, 1).is_err());
        assert!(sg_smooth_z(&v, 5, 1).is_err());
        assert!(sg_smooth_z(&v, 3, 3).is_err());
    }

    #[test]
    fn noise_identity_and_determinism() {
        let v = Volume::filled(Dims::cube(16), 128).unwrap();
        assert_eq!(add_noise(&v, 0.0, 1).unwrap(), v);
        let a = add_noise(&v, 10.0, 42).unwrap();
        let b = add_noise(&v, 10.0, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, add_noise(&v, 10.0, 43).unwrap());
        let mean = a.data().iter().map(|&x| x as f64).sum::<f64>() / a.data().len() as f64;
        assert!((126.0..=130.0).contains(&mean), "{mean}");
        assert!(add_noise(&v, -1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn window_monotone(lo in 0u8..255, span in 1u8..=255, a in any::<u8>(), b in any::<u8>()) {
            let hi = lo.saturating_add(span).max(lo + 1);
            let w = IntensityWindow::new(lo, hi).unwrap();
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(w.map(a) <= w.map(b));
        }

        #[test]
        fn sg_exact_on_z_linear(nz in 5usize..20, intercept in 0u8..100, slope in 0u8..8) {
            let v = Volume::from_fn(Dims::new(2, 3, nz), |_, _, z| {
                (intercept as usize + slope as usize * z).min(255) as u8
            }).unwrap();
            prop_assume!(intercept as usize + slope as usize * (nz - 1) <= 255);
            let out = sg_smooth_z(&v, 5, 1).unwrap();
            prop_assert_eq!(out, v);
        }
    }
}
