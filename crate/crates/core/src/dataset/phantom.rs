//! Synthetic "brain" volumes whose geometry and intensity depend on age.
//!
//! A phantom is an ellipsoidal shell of tissue around an ellipsoidal
//! ventricle. With `a = (age - 14) / 83`:
//!
//! * ventricle semi-axes are `0.05 + 0.25 a` times the brain semi-axes,
//! * shell intensity is `1 - 0.5 a`,
//! * the ventricle holds a fixed intensity of [`VENTRICLE_INTENSITY`],
//! * background is zero, and Gaussian noise is added everywhere.
//!
//! Boundaries are anti-aliased over one voxel, so voxels farther than half
//! a voxel from a boundary hold the exact region value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agedist::{MAX_AGE, MIN_AGE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Brain semi-axes as a fraction of the half extent of each axis.
pub const BRAIN_FRACTION: f64 = 0.8;
pub const VENTRICLE_INTENSITY: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub shape: [usize; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            shape: [32, 48, 32],
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

fn normalized_age(age: f64) -> Result<f64> {
    if !(MIN_AGE as f64..=MAX_AGE as f64).contains(&age) {
        return Err(Error::Domain(format!(
            "phantom age {age} outside [{MIN_AGE}, {MAX_AGE}]"
        )));
    }
    Ok((age - MIN_AGE as f64) / (MAX_AGE - MIN_AGE) as f64)
}

/// Ventricle semi-axes relative to the brain semi-axes.
pub fn ventricle_fraction(age: f64) -> Result<f64> {
    Ok(0.05 + 0.25 * normalized_age(age)?)
}

pub fn shell_intensity(age: f64) -> Result<f64> {
    Ok(1.0 - 0.5 * normalized_age(age)?)
}

/// Fraction of a voxel inside an ellipsoid, from a linear ramp on the
/// approximate signed distance to its surface.
fn coverage(rho: f64, radius_vox: f64) -> f64 {
    (0.5 + (1.0 - rho) * radius_vox).clamp(0.0, 1.0)
}

/// `[1, D, H, W]` phantom; deterministic in `(age, params)`.
pub fn gen_phantom(age: f64, params: &PhantomParams) -> Result<Tensor<f32>> {
    let frac = ventricle_fraction(age)?;
    let shell = shell_intensity(age)?;
    let [d, h, w] = params.shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::arg(format!(
            "phantom shape {:?} has a zero extent",
            params.shape
        )));
    }
    if !(params.noise_sigma >= 0.0) || !params.noise_sigma.is_finite() {
        return Err(Error::arg(format!(
            "noise sigma {} must be >= 0",
            params.noise_sigma
        )));
    }
    let half = params.shape.map(|e| e as f64 / 2.0);
    let brain_vox = half.map(|x| x * BRAIN_FRACTION);
    let brain_r = (brain_vox[0] * brain_vox[1] * brain_vox[2]).cbrt();
    let vent_r = brain_r * frac;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = (params.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, params.noise_sigma).expect("validated sigma"));
    let mut data = Vec::with_capacity(d * h * w);
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                // Offset from the centre in brain semi-axis units.
                let u = [
                    (i as f64 + 0.5 - half[0]) / brain_vox[0],
                    (j as f64 + 0.5 - half[1]) / brain_vox[1],
                    (k as f64 + 0.5 - half[2]) / brain_vox[2],
                ];
                let rho = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                let in_brain = coverage(rho, brain_r);
                let in_vent = coverage(rho / frac, vent_r);
                let mut v = in_brain * ((1.0 - in_vent) * shell + in_vent * VENTRICLE_INTENSITY);
                if let Some(n) = &noise {
                    v += n.sample(&mut rng);
                }
                data.push(v as f32);
            }
        }
    }
    Tensor::new(&[1, d, h, w], data)
}
