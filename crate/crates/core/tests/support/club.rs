use feddis_core::disentangle::{club_mi_estimate, fit_critic, ClubCritic};
use feddis_core::{init, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const SAMPLES: usize = 10_000;
pub const FIT_STEPS: usize = 300;
pub const FIT_LR: f64 = 0.02;

/// `SAMPLES` pairs `(s, d)` of standard normals with correlation `rho` in
/// every dimension.
pub fn gaussian_pairs(rho: f64, dims: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut s = Matrix::zeros(SAMPLES, dims);
    let mut d = Matrix::zeros(SAMPLES, dims);
    for i in 0..SAMPLES {
        for k in 0..dims {
            let (a, b) = (draw(), draw());
            d.set(i, k, a);
            s.set(i, k, rho * a + (1.0 - rho * rho).sqrt() * b);
        }
    }
    (s, d)
}

/// Fits a fresh critic to one-dimensional pairs and returns the CLUB
/// estimate on the same samples.
pub fn fitted_estimate(rho: f64, seed: u64) -> f64 {
    let (s, d) = gaussian_pairs(rho, 1, seed);
    let mut critic = ClubCritic::xavier(1, 8, 1, &mut init::rng(seed + 1));
    fit_critic(&mut critic, &s, &d, FIT_STEPS, FIT_LR).unwrap();
    club_mi_estimate(&s, &d, &critic).unwrap()
}

/// The mutual information of a unit bivariate normal pair.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}
