//! Test-time corruptions: white Gaussian noise at a target signal-to-noise
//! ratio, Poisson noise and rectangular occlusion.
//!
//! Every generator is a pure function of its input, parameters and seed.
//! Batches derive one seed per image as `seed ^ index`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnrScale {
    /// Power ratio `Var(signal) / Var(noise)`.
    #[default]
    Linear,
    /// Decibels, `10·log10` of the power ratio.
    Db,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Perturbation {
    #[default]
    None,
    GaussianSnr {
        snr: f64,
        #[serde(default)]
        scale: SnrScale,
        /// Clamp the result to `[0, 1]`, for raw-pixel inputs.
        #[serde(default)]
        clip: bool,
    },
    Poisson {
        peak: f64,
    },
    Occlusion {
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub kind: Perturbation,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: Perturbation, seed: u64) -> Self {
        PerturbationSpec { kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            Perturbation::None => Ok(()),
            Perturbation::GaussianSnr { snr, scale, .. } => {
                if !snr.is_finite() || (scale == SnrScale::Linear && snr <= 0.0) {
                    return Err(Error::invalid(format!("SNR must be positive and finite, got {snr}")));
                }
                Ok(())
            }
            Perturbation::Poisson { peak } => {
                if !(peak > 0.0 && peak.is_finite()) {
                    return Err(Error::invalid(format!("Poisson peak must be positive, got {peak}")));
                }
                Ok(())
            }
            Perturbation::Occlusion { height, width } => {
                if height == 0 || width == 0 {
                    return Err(Error::invalid("occlusion block must be non-empty"));
                }
                Ok(())
            }
        }
    }

    /// Applies the perturbation to one image `[C×H×W]` with an explicit seed.
    pub fn apply_seeded(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        match self.kind {
            Perturbation::None => Ok(image.clone()),
            Perturbation::GaussianSnr { snr, scale, clip } => {
                let linear = match scale {
                    SnrScale::Linear => snr,
                    SnrScale::Db => 10f64.powf(snr / 10.0),
                };
                let noisy = gaussian_at_snr(image, linear, seed)?;
                if clip {
                    noisy.map("clip", |v| v.clamp(0.0, 1.0))
                } else {
                    Ok(noisy)
                }
            }
            Perturbation::Poisson { peak } => poisson_noise(image, peak, seed),
            Perturbation::Occlusion { height, width } => occlude(image, (height, width), seed),
        }
    }

    /// Applies the perturbation to every image of `[N×C×H×W]`, image `i`
    /// using seed `self.seed ^ i`.
    pub fn apply_batch(&self, images: &Tensor) -> Result<Tensor> {
        if matches!(self.kind, Perturbation::None) {
            return Ok(images.clone());
        }
        if images.rank() != 4 {
            return Err(Error::shape("perturb", format!("expected [N×C×H×W], got {:?}", images.shape())));
        }
        let out = (0..images.shape()[0])
            .map(|i| self.apply_seeded(&images.slice_outer(i)?, self.seed ^ i as u64))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&out)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Variance attributable to rounding alone for values of this magnitude.
fn rounding_floor(parts: &[&[f64]]) -> f64 {
    let mean_sq: f64 = parts
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64)
        .sum();
    (1e3 * f64::EPSILON).powi(2) * mean_sq
}

/// `x + n` with `n` i.i.d. zero-mean Gaussian of variance `Var(x) / snr`.
pub fn gaussian_at_snr(x: &Tensor, snr: f64, seed: u64) -> Result<Tensor> {
    if !(snr > 0.0 && snr.is_finite()) {
        return Err(Error::invalid(format!("SNR must be positive and finite, got {snr}")));
    }
    let var = variance(x.data());
    if var <= rounding_floor(&[x.data()]) {
        return Err(Error::invalid("cannot set an SNR for a constant image"));
    }
    let sigma = (var / snr).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x
        .data()
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Shot noise with `peak` expected counts at full intensity.
///
/// Inputs already in `[0, 1]` are used as intensities directly; other
/// inputs are min-max rescaled to `[0, 1]` and mapped back afterwards.
/// A constant image outside `[0, 1]` has no intensity scale and is
/// returned unchanged.
pub fn poisson_noise(x: &Tensor, peak: f64, seed: u64) -> Result<Tensor> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("Poisson peak must be positive, got {peak}")));
    }
    let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (offset, range) = if lo >= 0.0 && hi <= 1.0 {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi - lo)
    } else {
        return Ok(x.clone());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(x.len());
    for &v in x.data() {
        let rate = peak * (v - offset) / range;
        let count = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::invalid(format!("Poisson rate {rate}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        out.push(offset + range * count / peak);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Top-left corner of a `block` placed uniformly inside an `H×W` image.
pub fn occlusion_position(height: usize, width: usize, block: (usize, usize), seed: u64) -> Result<(usize, usize)> {
    let (bh, bw) = block;
    if bh == 0 || bw == 0 {
        return Err(Error::invalid("occlusion block must be non-empty"));
    }
    if bh > height || bw > width {
        return Err(Error::invalid(format!(
            "occlusion block {bh}×{bw} does not fit in a {height}×{width} image"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((rng.random_range(0..=height - bh), rng.random_range(0..=width - bw)))
}

/// Zeros a `block` rectangle at a uniformly random position across all
/// channels of `x[C×H×W]`.
pub fn occlude(x: &Tensor, block: (usize, usize), seed: u64) -> Result<Tensor> {
    let [c, h, w] = x.shape() else {
        return Err(Error::shape("occlude", format!("expected [C×H×W], got {:?}", x.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    let (top, left) = occlusion_position(h, w, block, seed)?;
    let mut data = x.data().to_vec();
    for ch in 0..c {
        for r in top..top + block.0 {
            let row = (ch * h + r) * w;
            data[row + left..row + left + block.1].fill(0.0);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

/// `Var(clean) / Var(noisy − clean)`.
pub fn measure_snr(clean: &Tensor, noisy: &Tensor) -> Result<f64> {
    let noise = noisy.sub(clean)?;
    let var_noise = variance(noise.data());
    if var_noise <= rounding_floor(&[clean.data(), noise.data()]) {
        return Err(Error::invalid("noise has no variance; SNR is unbounded"));
    }
    Ok(variance(clean.data()) / var_noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn rms(a: &Tensor, b: &Tensor) -> f64 {
        let d = a.sub(b).unwrap();
        (d.dot(&d).unwrap() / d.len() as f64).sqrt()
    }

    #[test]
    fn gaussian_limits_and_determinism() {
        let x = random_image(1, [1, 28, 28]);
        assert!(rms(&gaussian_at_snr(&x, 1e9, 4).unwrap(), &x) < 1e-3);
        assert_eq!(gaussian_at_snr(&x, 5.0, 7).unwrap(), gaussian_at_snr(&x, 5.0, 7).unwrap());
        assert_ne!(gaussian_at_snr(&x, 5.0, 7).unwrap(), gaussian_at_snr(&x, 5.0, 8).unwrap());
        assert!(gaussian_at_snr(&Tensor::full([1, 4, 4], 0.3), 5.0, 1).is_err());
        assert!(gaussian_at_snr(&x, 0.0, 1).is_err());
    }

    #[test]
    fn gaussian_noise_has_the_requested_variance() {
        // unit-variance image: ±1 pattern over 10k pixels
        let data: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = Tensor::new(vec![1, 100, 100], data).unwrap();
        assert!((variance(x.data()) - 1.0).abs() < 1e-12);
        let noisy = gaussian_at_snr(&x, 10.0, 3).unwrap();
        let noise = noisy.sub(&x).unwrap();
        assert!((variance(noise.data()).sqrt() - 0.1f64.sqrt()).abs() < 0.01);
        let snr = measure_snr(&x, &noisy).unwrap();
        assert!((snr - 10.0).abs() < 0.5, "{snr}");
    }

    #[test]
    fn snr_round_trip_over_many_draws() {
        for target in [1.0, 5.0, 10.0, 20.0] {
            let mut total = 0.0;
            for seed in 0..100 {
                let x = random_image(1000 + seed, [1, 28, 28]);
                total += measure_snr(&x, &gaussian_at_snr(&x, target, seed).unwrap()).unwrap();
            }
            let avg = total / 100.0;
            assert!((avg - target).abs() < 0.05 * target, "{target}: {avg}");
        }
    }

    #[test]
    fn measured_snr_scaling_and_degenerate_noise() {
        let x = random_image(2, [1, 8, 8]);
        let noise = random_image(3, [1, 8, 8]).map("c", |v| v - 0.5).unwrap();
        let once = measure_snr(&x, &x.add(&noise).unwrap()).unwrap();
        let twice = measure_snr(&x, &x.add(&noise.scale(2.0).unwrap()).unwrap()).unwrap();
        assert!((once / twice - 4.0).abs() < 1e-9);
        let shifted = x.map("shift", |v| v + 0.37).unwrap();
        assert!(measure_snr(&x, &shifted).is_err());
        assert!(measure_snr(&x, &x).is_err());
    }

    #[test]
    fn db_scale_converts_to_power_ratio() {
        let x = random_image(4, [1, 28, 28]);
        let db = PerturbationSpec::new(
            Perturbation::GaussianSnr {
                snr: 10.0,
                scale: SnrScale::Db,
                clip: false,
            },
            9,
        );
        let lin = PerturbationSpec::new(
            Perturbation::GaussianSnr {
                snr: 10.0,
                scale: SnrScale::Linear,
                clip: false,
            },
            9,
        );
        let a = db.apply_seeded(&x, 9).unwrap();
        let b = lin.apply_seeded(&x, 9).unwrap();
        // 10 dB is a power ratio of 10
        assert!(rms(&a, &b) < 1e-12);
        let clipped = PerturbationSpec::new(
            Perturbation::GaussianSnr {
                snr: 0.5,
                scale: SnrScale::Linear,
                clip: true,
            },
            1,
        );
        let c = clipped.apply_seeded(&x, 1).unwrap();
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn poisson_limits_and_mean() {
        let x = random_image(5, [1, 16, 16]);
        assert!(rms(&poisson_noise(&x, 1e8, 1).unwrap(), &x) < 1e-3);
        assert_eq!(poisson_noise(&x, 30.0, 2).unwrap(), poisson_noise(&x, 30.0, 2).unwrap());
        assert!(poisson_noise(&x, 0.0, 2).is_err());
        assert!(poisson_noise(&x, -1.0, 2).is_err());

        let v = 0.37;
        let flat = Tensor::full([1, 1, 100_000], v);
        let noisy = poisson_noise(&flat, 20.0, 3).unwrap();
        let m = mean(noisy.data());
        assert!((m - v).abs() < 0.01 * v, "{m}");
    }

    #[test]
    fn poisson_rescales_out_of_range_inputs() {
        let x = Tensor::new(vec![1, 1, 4], vec![-2.0, 0.0, 1.0, 2.0]).unwrap();
        let y = poisson_noise(&x, 1e9, 6).unwrap();
        assert!(rms(&x, &y) < 1e-3);
        assert!(y.data().iter().all(|&v| v >= -2.0));
        let flat = Tensor::full([1, 2, 2], 5.0);
        assert_eq!(poisson_noise(&flat, 10.0, 1).unwrap(), flat);
    }

    #[test]
    fn occlusion_counts() {
        let ones = Tensor::ones([1, 8, 8]);
        let out = occlude(&ones, (2, 2), 11).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 4);
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 60);
        assert!(occlude(&ones, (8, 8), 2).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(occlude(&ones, (9, 1), 2).is_err());
        assert!(occlude(&ones, (0, 1), 2).is_err());

        let rgb = Tensor::ones([3, 6, 5]);
        let out = occlude(&rgb, (3, 2), 4).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 3 * 3 * 2);
    }

    #[test]
    fn occlusion_position_is_uniform() {
        // 8×8 image, 3×3 block: 36 cells; chi-square with 35 dof
        let cells = 6 * 6;
        let draws = 10_000;
        let mut counts = vec![0usize; cells];
        for seed in 0..draws {
            let (r, c) = occlusion_position(8, 8, (3, 3), seed as u64).unwrap();
            counts[r * 6 + c] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let chi2: f64 = counts.iter().map(|&k| (k as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square(35) ≈ 66.6
        assert!(chi2 < 66.6, "{chi2}");
    }

    #[test]
    fn batch_application_uses_per_image_seeds() {
        let a = random_image(20, [1, 6, 6]);
        let b = random_image(21, [1, 6, 6]);
        let batch = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        let spec = PerturbationSpec::new(Perturbation::Occlusion { height: 2, width: 3 }, 40);
        let out = spec.apply_batch(&batch).unwrap();
        assert_eq!(out.slice_outer(0).unwrap(), occlude(&a, (2, 3), 40).unwrap());
        assert_eq!(out.slice_outer(1).unwrap(), occlude(&b, (2, 3), 41).unwrap());
        let none = PerturbationSpec::default();
        assert_eq!(none.apply_batch(&batch).unwrap(), batch);
    }

    #[test]
    fn spec_serialization() {
        let spec = PerturbationSpec::new(
            Perturbation::GaussianSnr {
                snr: 5.0,
                scale: SnrScale::Linear,
                clip: false,
            },
            3,
        );
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(text, r#"{"kind":"gaussian-snr","snr":5.0,"scale":"linear","clip":false,"seed":3}"#);
        let back: PerturbationSpec = serde_json::from_str(r#"{"kind":"occlusion","height":4,"width":2}"#).unwrap();
        assert_eq!(back, PerturbationSpec::new(Perturbation::Occlusion { height: 4, width: 2 }, 0));
        assert!(PerturbationSpec::new(Perturbation::Poisson { peak: 0.0 }, 0).validate().is_err());
        let bad = Perturbation::GaussianSnr {
            snr: -1.0,
            scale: SnrScale::Linear,
            clip: false,
        };
        assert!(PerturbationSpec::new(bad, 0).validate().is_err());
    }
}
