//! Volume augmentation and normalization on `[D, H, W]` grids.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_shift: i32,
    pub max_degrees: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift: 5,
            max_degrees: 10.0,
        }
    }
}

fn check(data_len: usize, dims: [usize; 3]) -> Result<()> {
    if dims.iter().product::<usize>() != data_len {
        return Err(Error::dim(format!(
            "volume of {data_len} values does not match extents {dims:?}"
        )));
    }
    Ok(())
}

/// Translates by `shift` voxels per axis, zero-filling vacated voxels.
pub fn shift_volume<T: Element>(x: &[T], dims: [usize; 3], shift: [i32; 3]) -> Result<Vec<T>> {
    check(x.len(), dims)?;
    let [d, h, w] = dims.map(|e| e as i64);
    let [sd, sh, sw] = shift.map(|s| s as i64);
    let mut out = vec![T::zero(); x.len()];
    for i in 0..d {
        let si = i - sd;
        if !(0..d).contains(&si) {
            continue;
        }
        for j in 0..h {
            let sj = j - sh;
            if !(0..h).contains(&sj) {
                continue;
            }
            let (lo, hi) = (sw.max(0), (w + sw).min(w));
            if lo >= hi {
                continue;
            }
            let dst = ((i * h + j) * w) as usize;
            let src = ((si * h + sj) * w) as usize;
            out[dst + lo as usize..dst + hi as usize]
                .copy_from_slice(&x[src + (lo - sw) as usize..src + (hi - sw) as usize]);
        }
    }
    Ok(out)
}

/// Random integer shift uniform on `[-max_shift, max_shift]` per axis.
pub fn augment_shift<T: Element>(
    x: &[T],
    dims: [usize; 3],
    max_shift: i32,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    let shift = [(); 3].map(|_| rng.random_range(-max_shift..=max_shift));
    shift_volume(x, dims, shift)
}

/// `R = Rx(a0) * Ry(a1) * Rz(a2)`, rotating about axes 0, 1 and 2.
pub fn rotation_matrix(angles_rad: [f64; 3]) -> [[f64; 3]; 3] {
    let [a, b, c] = angles_rad;
    let rx = [
        [1.0, 0.0, 0.0],
        [0.0, a.cos(), -a.sin()],
        [0.0, a.sin(), a.cos()],
    ];
    let ry = [
        [b.cos(), 0.0, b.sin()],
        [0.0, 1.0, 0.0],
        [-b.sin(), 0.0, b.cos()],
    ];
    let rz = [
        [c.cos(), -c.sin(), 0.0],
        [c.sin(), c.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    mat_mul(&mat_mul(&rx, &ry), &rz)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotates about the grid centre with trilinear resampling; samples outside
/// the grid read as zero.
pub fn rotate_volume<T: Element>(
    x: &[T],
    dims: [usize; 3],
    angles_rad: [f64; 3],
) -> Result<Vec<T>> {
    check(x.len(), dims)?;
    let r = rotation_matrix(angles_rad);
    let centre = dims.map(|e| (e as f64 - 1.0) / 2.0);
    let [d, h, w] = dims;
    let at = |i: i64, j: i64, k: i64| -> f64 {
        if i < 0 || j < 0 || k < 0 || i >= d as i64 || j >= h as i64 || k >= w as i64 {
            0.0
        } else {
            x[(i as usize * h + j as usize) * w + k as usize].as_f64()
        }
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                let p = [
                    i as f64 - centre[0],
                    j as f64 - centre[1],
                    k as f64 - centre[2],
                ];
                // Inverse mapping: source = R^T p.
                let s: [f64; 3] = std::array::from_fn(|a| {
                    (0..3).map(|b| r[b][a] * p[b]).sum::<f64>() + centre[a]
                });
                let f = s.map(f64::floor);
                let t = [s[0] - f[0], s[1] - f[1], s[2] - f[2]];
                let base = f.map(|v| v as i64);
                let mut v = 0.0;
                for corner in 0..8 {
                    let o = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                    let wgt: f64 = (0..3)
                        .map(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] })
                        .product();
                    if wgt != 0.0 {
                        v += wgt
                            * at(
                                base[0] + o[0] as i64,
                                base[1] + o[1] as i64,
                                base[2] + o[2] as i64,
                            );
                    }
                }
                out.push(T::of(v));
            }
        }
    }
    Ok(out)
}

/// Random rotation with independent angles uniform on `±max_degrees`.
pub fn augment_rotate<T: Element>(
    x: &[T],
    dims: [usize; 3],
    max_degrees: f64,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    let angles = [(); 3].map(|_| rng.random_range(-max_degrees..=max_degrees).to_radians());
    rotate_volume(x, dims, angles)
}

/// Shift followed by rotation.
pub fn augment<T: Element>(
    x: &[T],
    dims: [usize; 3],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    let shifted = augment_shift(x, dims, cfg.max_shift, rng)?;
    augment_rotate(&shifted, dims, cfg.max_degrees, rng)
}

/// Standard deviation floor of [`zscore`].
pub const ZSCORE_STD_FLOOR: f64 = 1e-8;

/// Per-volume `(x - mean) / std` with population std.
pub fn zscore<T: Element>(x: &[T]) -> Vec<T> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(ZSCORE_STD_FLOOR);
    x.iter().map(|v| T::of((v.as_f64() - mean) / std)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(dims: [usize; 3]) -> Vec<f64> {
        (0..dims.iter().product::<usize>())
            .map(|i| (i % 17) as f64 + 1.0)
            .collect()
    }

    #[test]
    fn zero_shift_is_identity() {
        let x = ramp([4, 5, 6]);
        assert_eq!(shift_volume(&x, [4, 5, 6], [0, 0, 0]).unwrap(), x);
    }

    #[test]
    fn shift_there_and_back_keeps_interior() {
        let dims = [8, 9, 10];
        let x = ramp(dims);
        let k = 2;
        let y = shift_volume(&x, dims, [k, -k, k]).unwrap();
        let z = shift_volume(&y, dims, [-k, k, -k]).unwrap();
        for i in 0..8 {
            for j in 0..9 {
                for l in 0..10 {
                    let idx = (i * 9 + j) * 10 + l;
                    let interior = i < 8 - k as usize && j >= k as usize && l < 10 - k as usize;
                    if interior {
                        assert_eq!(z[idx], x[idx]);
                    } else {
                        assert_eq!(z[idx], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn single_voxel_shift() {
        let dims = [3, 3, 3];
        let mut x = vec![0.0; 27];
        x[13] = 1.0;
        let y = shift_volume(&x, dims, [1, 0, -1]).unwrap();
        assert_eq!(y[(2 * 3 + 1) * 3], 1.0);
        assert_eq!(y.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let dims = [5, 6, 7];
        let x = ramp(dims);
        let y = rotate_volume(&x, dims, [0.0; 3]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let r = rotation_matrix([0.1, -0.15, 0.17]);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotated_ball_keeps_mass() {
        let dims = [24, 24, 24];
        let c = 11.5;
        let x: Vec<f64> = (0..24 * 24 * 24)
            .map(|i| {
                let (a, b, d) = ((i / 576) as f64, ((i / 24) % 24) as f64, (i % 24) as f64);
                let r2 = (a - c).powi(2) + (b - c).powi(2) + (d - c).powi(2);
                (-r2 / 18.0).exp()
            })
            .collect();
        let mass: f64 = x.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let y = augment_rotate(&x, dims, 10.0, &mut rng).unwrap();
            let rotated: f64 = y.iter().sum();
            assert!((rotated - mass).abs() < 0.02 * mass, "{rotated} vs {mass}");
        }
    }

    #[test]
    fn zscore_cases() {
        let x = ramp([3, 4, 5]);
        let z = zscore(&x);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-5);
        assert!(zscore(&[4.0f32; 10]).iter().all(|&v| v == 0.0));
        let affine: Vec<f64> = x.iter().map(|v| 3.5 * v - 2.0).collect();
        for (a, b) in zscore(&affine).iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_extents_rejected() {
        assert!(shift_volume(&[0.0f32; 10], [2, 2, 2], [0; 3]).is_err());
        assert!(rotate_volume(&[0.0f32; 10], [2, 2, 2], [0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn shift_never_adds_mass(
            sd in -5i32..=5, sh in -5i32..=5, sw in -5i32..=5,
            vals in proptest::collection::vec(-3.0f64..3.0, 4 * 5 * 6),
        ) {
            let y = shift_volume(&vals, [4, 5, 6], [sd, sh, sw]).unwrap();
            let (a, b): (f64, f64) = (vals.iter().map(|v| v.abs()).sum(), y.iter().map(|v| v.abs()).sum());
            prop_assert!(b <= a + 1e-12);
        }
    }
}
