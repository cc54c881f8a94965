//! Central finite-difference check of analytic gradients in f64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Model, ModelConfig};
use super::tensor::Tensor;
use crate::encoding::EncodingKind;
use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient pairs with both magnitudes below this are compared absolutely.
const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub probed: usize,
    pub max_relative_error: f64,
    pub worst_parameter: String,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compare analytic and numeric gradients of the inference-mode loss on a
/// random batch `[batch, steps, features]`, probing at most
/// `probes_per_tensor` entries of every parameter tensor.
pub fn check_model(
    name: &str,
    config: &ModelConfig,
    batch: usize,
    steps: usize,
    probes_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let f = config.input_features;
    let input = Tensor::new(
        vec![batch, steps, f],
        (0..batch * steps * f).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let labels: Vec<usize> = (0..batch).map(|i| i % config.class_count).collect();
    let (_, grads) = model.loss_and_grads(&input, &labels, None)?;

    let mut worst = (0.0, String::new());
    let mut probed = 0;
    for p in 0..model.params.len() {
        let len = model.params.tensors()[p].len();
        let picks = sample(&mut rng, len, probes_per_tensor.min(len));
        for i in picks {
            let original = model.params.tensors()[p].data[i];
            model.params.tensors_mut()[p].data[i] = original + STEP;
            let plus = model.loss(&input, &labels)?;
            model.params.tensors_mut()[p].data[i] = original - STEP;
            let minus = model.loss(&input, &labels)?;
            model.params.tensors_mut()[p].data[i] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(grads[p].data[i], numeric);
            probed += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err.max(worst.0), format!("{}[{i}]", model.params.names()[p]));
            }
        }
    }
    Ok(GradCheckReport { name: name.into(), probed, max_relative_error: worst.0, worst_parameter: worst.1 })
}

/// The standard suite: toy GRU and CNN, each with and without layer
/// normalization, on 4 windows of 12 frames.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let gru = ModelConfig::gru(EncodingKind::Bra, 3, 8, 2, 0.0, 1e-3);
    let cnn = ModelConfig::cnn(EncodingKind::Bra, 3, 3, vec![8, 16], 0.0, 1e-3);
    let mut out = Vec::new();
    for (name, base) in [("gru", gru), ("cnn", cnn)] {
        for norm in [false, true] {
            let mut c = base.clone();
            c.layer_norm = norm;
            let label = if norm { format!("{name}+norm") } else { name.to_string() };
            out.push(check_model(&label, &c, 4, 12, 60, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_symmetric_and_floored() {
        assert_eq!(relative_error(1e-9, -1e-9), 0.0);
        assert!((relative_error(1.0, 1.1) - relative_error(1.1, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn small_cnn_gradients_match() {
        let c = ModelConfig::cnn(EncodingKind::Br, 2, 2, vec![3], 0.0, 1e-3);
        let r = check_model("tiny", &c, 2, 5, 1000, 4).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
