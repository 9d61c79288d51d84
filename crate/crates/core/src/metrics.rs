//! Quantitative evaluation: held-out reconstruction MSE, energy separation
//! between data and background probes, and mode coverage for synthetic data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{Error, Result};
use crate::models::{energy_value, EnergyModel, GeneratorModel, InferenceModel};
use crate::rng::uniform_tensor;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recon_mse: f64,
    /// mean f(data) - mean f(probes); invariant to constants added to f.
    pub energy_gap: f64,
    pub mode_coverage: Option<Vec<f64>>,
    pub basin_purity: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Deterministic mean-inference reconstruction: x -> mu(x) -> g(mu(x)).
pub fn reconstruct_mean(
    gen: &GeneratorModel,
    inf: &InferenceModel,
    x: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let inf_bound = inf.bind(&mut tape, false);
    let gen_bound = gen.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (mu, _) = inf.forward(&mut tape, &inf_bound, xv)?;
    let x_hat = gen.forward(&mut tape, &gen_bound, mu)?;
    Ok(tape.value(x_hat).clone())
}

/// Per-pixel mean squared reconstruction error over a test set.
pub fn recon_mse(test: &DataSet, gen: &GeneratorModel, inf: &InferenceModel) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("recon_mse needs a nonempty test set".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    // Chunked so large test sets stay within memory.
    let chunk = 256;
    let n = test.len();
    let mut i = 0;
    while i < n {
        let hi = (i + chunk).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let x = test.examples.gather_rows(&idx);
        let x_hat = reconstruct_mean(gen, inf, &x)?;
        total += x
            .data()
            .iter()
            .zip(x_hat.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += x.numel();
        i = hi;
    }
    Ok(total / count as f64)
}

/// mean f(data) - mean f(probes).
pub fn energy_gap(en: &EnergyModel, data: &Tensor, probes: &Tensor) -> Result<f64> {
    let fd = energy_value(en, data)?;
    let fp = energy_value(en, probes)?;
    if fd.numel() == 0 || fp.numel() == 0 {
        return Err(Error::Data("energy_gap needs nonempty batches".into()));
    }
    Ok(fd.data().iter().sum::<f64>() / fd.numel() as f64
        - fp.data().iter().sum::<f64>() / fp.numel() as f64)
}

/// Model-free background reference: uniform draws over a box.
pub fn uniform_probes(
    signal_shape: &[usize],
    lo: f64,
    hi: f64,
    count: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let mut shape = vec![count];
    shape.extend_from_slice(signal_shape);
    uniform_tensor(rng, &shape, lo, hi)
}

/// Fraction of samples within `radius` (L2) of each mode center.
pub fn mode_coverage(samples: &Tensor, modes: &[Vec<f64>], radius: f64) -> Result<Vec<f64>> {
    if radius <= 0.0 {
        return Err(Error::Domain("mode_coverage radius must be positive".into()));
    }
    let n = samples.shape()[0];
    let dim: usize = samples.shape()[1..].iter().product();
    let mut fractions = vec![0.0; modes.len()];
    for (m, center) in modes.iter().enumerate() {
        if center.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "mode {m} has dim {}, samples have {dim}",
                center.len()
            )));
        }
        let mut hits = 0usize;
        for i in 0..n {
            let d2: f64 =
                samples.row(i).iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2.sqrt() <= radius {
                hits += 1;
            }
        }
        fractions[m] = hits as f64 / n.max(1) as f64;
    }
    Ok(fractions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_synthetic, Synthetic2D};
    use crate::models::{ModelConfig, Models};
    use crate::rng::{normal_tensor, SeedTree};

    #[test]
    fn mse_zero_for_perfect_stub_and_second_moment_for_zero_generator() {
        // "Perfect autoencoder": reconstruction equals the input exactly.
        let x = normal_tensor(&mut SeedTree::new(1).stream("x", &[]), &[10, 3]);
        let mse: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64;

        // Zero-weight generator reconstructs 0, so MSE is the second moment.
        let mut models = Models::new(ModelConfig::mlp(vec![4], 2, 3), &SeedTree::new(2)).unwrap();
        for i in 0..models.gen.params.len() {
            *models.gen.params.value_mut(i) = Tensor::zeros(models.gen.params.value(i).shape());
        }
        let ds = DataSet::new(x, None, "t").unwrap();
        let got = recon_mse(&ds, &models.gen, &models.inf).unwrap();
        assert!((got - mse).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_scalar_loop_and_ignores_order() {
        let models = Models::new(ModelConfig::mlp(vec![4], 2, 3), &SeedTree::new(3)).unwrap();
        let x = normal_tensor(&mut SeedTree::new(4).stream("x", &[]), &[7, 3]);
        let ds = DataSet::new(x.clone(), None, "t").unwrap();
        let got = recon_mse(&ds, &models.gen, &models.inf).unwrap();

        // Brute-force scalar loop, one example at a time.
        let mut total = 0.0;
        for i in 0..7 {
            let xi = Tensor::from_vec(vec![1, 3], x.row(i).to_vec()).unwrap();
            let xr = reconstruct_mean(&models.gen, &models.inf, &xi).unwrap();
            for (a, b) in xi.data().iter().zip(xr.data()) {
                total += (a - b) * (a - b);
            }
        }
        assert!((got - total / 21.0).abs() < 1e-12);

        // Invariant to example order.
        let rev: Vec<usize> = (0..7).rev().collect();
        let ds_rev = DataSet::new(x.gather_rows(&rev), None, "t").unwrap();
        let got_rev = recon_mse(&ds_rev, &models.gen, &models.inf).unwrap();
        assert!((got - got_rev).abs() < 1e-12);
    }

    #[test]
    fn empty_test_set_is_error() {
        let models = Models::new(ModelConfig::mlp(vec![4], 2, 3), &SeedTree::new(5)).unwrap();
        let ds = DataSet::new(Tensor::zeros(&[0, 3]), None, "t").unwrap();
        assert!(recon_mse(&ds, &models.gen, &models.inf).is_err());
    }

    #[test]
    fn energy_gap_invariant_to_constant_shift() {
        let mut models = Models::new(ModelConfig::mlp(vec![4], 2, 3), &SeedTree::new(6)).unwrap();
        let seeds = SeedTree::new(7);
        let data = normal_tensor(&mut seeds.stream("d", &[]), &[8, 3]);
        let probes = uniform_probes(&[3], -1.0, 1.0, 16, &mut seeds.stream("p", &[]));
        let before = energy_gap(&models.en, &data, &probes).unwrap();
        // Shift f by a constant via the final bias.
        let last = models.en.params.len() - 1;
        let shifted = models.en.params.value(last).map(|v| v + 3.25);
        *models.en.params.value_mut(last) = shifted;
        let after = energy_gap(&models.en, &data, &probes).unwrap();
        // The constant cancels analytically; summation rounding leaves only
        // machine-epsilon-scale residue.
        assert!((before - after).abs() <= 1e-12, "{before} vs {after}");
    }

    #[test]
    fn mode_coverage_end_cases_and_binomial_bound() {
        let at_zero = Tensor::from_vec(vec![4, 2], vec![0.0; 8]).unwrap();
        let modes = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
        let f = mode_coverage(&at_zero, &modes, 0.5).unwrap();
        assert_eq!(f, vec![1.0, 0.0]);

        let far = Tensor::from_vec(vec![3, 2], vec![9.0; 6]).unwrap();
        let f = mode_coverage(&far, &modes, 0.5).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);

        // Direct mixture draws: each mode gets ~half within 3 sigma radius.
        let spec = Synthetic2D::GaussianMixture {
            means: vec![[-2.0, 0.0], [2.0, 0.0]],
            weights: vec![0.5, 0.5],
            std: 0.3,
        };
        let n = 10_000;
        let ds = sample_synthetic(&spec, n, &mut SeedTree::new(8).stream("s", &[])).unwrap();
        let f = mode_coverage(&ds.examples, &vec![vec![-2.0, 0.0], vec![2.0, 0.0]], 0.9).unwrap();
        for frac in &f {
            assert!((0.45..=0.55).contains(frac), "fraction {frac}");
        }
    }
}
