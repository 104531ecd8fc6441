use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class-balanced Gaussian blobs.
///
/// Centers are standard normal in `dim` dimensions, drawn from `seed`. Sample
/// `i` belongs to class `i mod classes` and is its center plus isotropic
/// noise of standard deviation `spread`, drawn from stream `draw`.
pub fn gen_synthetic_blobs(
    classes: usize,
    samples: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    draw: u64,
) -> Result<Dataset> {
    if classes < 2 || samples < classes || dim == 0 || !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Config(format!(
            "blobs need classes ≥ 2, samples ≥ classes, dim ≥ 1, spread > 0 (got {classes}, {samples}, {dim}, {spread})"
        )));
    }
    let mut center_rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim)
        .map(|_| StandardNormal.sample(&mut center_rng))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw + 1);
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        for j in 0..dim {
            data.push(centers[c * dim + j] + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![samples, dim], data)?, labels, classes)
}
