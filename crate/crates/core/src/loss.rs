//! Variational objective: Bernoulli (or squared-error) reconstruction term
//! plus the closed-form KL divergence of a diagonal Gaussian from N(0, I).
//!
//! Both terms are sums over pixels / latent dimensions for a single example.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::LatentDistribution;
use crate::ops::sigmoid;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Cross-entropy against grayscale targets.
    #[default]
    Bernoulli,
    /// Sum of squared errors.
    Mse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(reconstruction: f64, kl: f64) -> Self {
        Self {
            reconstruction,
            kl,
            total: reconstruction + kl,
        }
    }
}

/// `sum ½(exp(logvar) + mu² - 1 - logvar)` with its gradients w.r.t. `mu` and `logvar`.
pub fn kl_divergence<T: Scalar>(dist: &LatentDistribution<T>) -> (f64, Vec<T>, Vec<T>) {
    let half = T::from_f64(0.5);
    let mut kl = 0.0;
    for (&m, &lv) in dist.mu.iter().zip(&dist.logvar) {
        let (m, lv) = (m.as_f64(), lv.as_f64());
        kl += 0.5 * (lv.exp() + m * m - 1.0 - lv);
    }
    let grad_mu = dist.mu.clone();
    let grad_logvar = dist
        .logvar
        .iter()
        .map(|&lv| half * (lv.exp() - T::one()))
        .collect();
    (kl, grad_mu, grad_logvar)
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, other: &Tensor<T>) -> Result<()> {
    if x.shape() != other.shape() {
        return Err(Error::Dimension(format!(
            "target shape {:?} differs from reconstruction shape {:?}",
            x.shape(),
            other.shape()
        )));
    }
    Ok(())
}

/// Reconstruction negative log-likelihood of `x` under `x_hat`, with its
/// gradient w.r.t. `x_hat`.
pub fn reconstruction_loss<T: Scalar>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    likelihood: Likelihood,
) -> Result<(f64, Tensor<T>)> {
    check_shapes(x, x_hat)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&t, &p) in x.data().iter().zip(x_hat.data()) {
        match likelihood {
            Likelihood::Bernoulli => {
                if !(p > T::zero() && p < T::one()) {
                    return Err(Error::Domain(format!(
                        "Bernoulli mean {} outside (0,1)",
                        p.as_f64()
                    )));
                }
                let (tf, pf) = (t.as_f64(), p.as_f64());
                loss -= tf * pf.ln() + (1.0 - tf) * (1.0 - pf).ln();
                grad.push(-(t / p - (T::one() - t) / (T::one() - p)));
            }
            Likelihood::Mse => {
                let d = p - t;
                loss += d.as_f64() * d.as_f64();
                grad.push(d + d);
            }
        }
    }
    Ok((loss, Tensor::from_parts(x.shape().to_vec(), grad)))
}

/// Same objective as [`reconstruction_loss`] evaluated from the decoder's
/// pre-sigmoid logits; the gradient is w.r.t. the logits.
///
/// For the Bernoulli case this uses `softplus(l) - x*l`, which stays finite
/// where a rounded sigmoid would hit exactly 0 or 1.
pub fn reconstruction_loss_logits<T: Scalar>(
    x: &Tensor<T>,
    logits: &Tensor<T>,
    likelihood: Likelihood,
) -> Result<(f64, Tensor<T>)> {
    check_shapes(x, logits)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for (&t, &l) in x.data().iter().zip(logits.data()) {
        let p = sigmoid(l);
        match likelihood {
            Likelihood::Bernoulli => {
                let (tf, lf) = (t.as_f64(), l.as_f64());
                // softplus(l) = max(l, 0) + ln(1 + exp(-|l|))
                loss += lf.max(0.0) + (-lf.abs()).exp().ln_1p() - tf * lf;
                grad.push(p - t);
            }
            Likelihood::Mse => {
                let d = p - t;
                loss += d.as_f64() * d.as_f64();
                grad.push((d + d) * p * (T::one() - p));
            }
        }
    }
    Ok((loss, Tensor::from_parts(x.shape().to_vec(), grad)))
}

/// Gradients of [`total_loss`].
#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub x_hat: Tensor<T>,
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

pub fn total_loss<T: Scalar>(
    x: &Tensor<T>,
    x_hat: &Tensor<T>,
    dist: &LatentDistribution<T>,
    likelihood: Likelihood,
) -> Result<(LossBreakdown, LossGrads<T>)> {
    let (rec, grad_x_hat) = reconstruction_loss(x, x_hat, likelihood)?;
    let (kl, mu, logvar) = kl_divergence(dist);
    Ok((
        LossBreakdown::new(rec, kl),
        LossGrads {
            x_hat: grad_x_hat,
            mu,
            logvar,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(mu: &[f64], logvar: &[f64]) -> LatentDistribution<f64> {
        LatentDistribution {
            mu: mu.to_vec(),
            logvar: logvar.to_vec(),
        }
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&dist(&[0.0; 3], &[0.0; 3])).0, 0.0);
        assert!((kl_divergence(&dist(&[1.0], &[0.0])).0 - 0.5).abs() < 1e-15);
        let expect = 0.5 * (2.0 - 1.0 - 2.0f64.ln());
        let (kl, _, _) = kl_divergence(&dist(&[0.0], &[2.0f64.ln()]));
        assert!((kl - expect).abs() < 1e-15);
        assert!((kl - 0.15343).abs() < 1e-5);
    }

    #[test]
    fn bernoulli_values() {
        let x = Tensor::from_vec(vec![0.5f64]);
        let (l, g) = reconstruction_loss(&x, &x, Likelihood::Bernoulli).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(g.data(), &[0.0]);
        let one = Tensor::from_vec(vec![1.0f64]);
        let (l, _) = reconstruction_loss(&one, &Tensor::from_vec(vec![1.0 - 1e-12]), Likelihood::Bernoulli).unwrap();
        assert!(l < 1e-11);
    }

    #[test]
    fn bernoulli_rejects_saturated_means() {
        let x = Tensor::from_vec(vec![0.5f64]);
        for p in [0.0, 1.0] {
            assert!(matches!(
                reconstruction_loss(&x, &Tensor::from_vec(vec![p]), Likelihood::Bernoulli),
                Err(Error::Domain(_))
            ));
        }
        assert!(matches!(
            reconstruction_loss(&x, &Tensor::from_vec(vec![0.5, 0.5]), Likelihood::Bernoulli),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bernoulli_minimized_at_target() {
        for &t in &[0.0, 0.1, 0.35, 0.5, 0.8, 1.0] {
            let x = Tensor::from_vec(vec![t]);
            let loss_at = |p: f64| {
                reconstruction_loss(&x, &Tensor::from_vec(vec![p]), Likelihood::Bernoulli)
                    .unwrap()
                    .0
            };
            let best = (1..1000)
                .map(|i| i as f64 / 1000.0)
                .min_by(|a, b| loss_at(*a).total_cmp(&loss_at(*b)))
                .unwrap();
            let clamped = t.clamp(0.001, 0.999);
            assert!((best - clamped).abs() < 1.5e-3, "target {t}: argmin {best}");
        }
    }

    #[test]
    fn logits_path_agrees_with_probability_path() {
        let x = Tensor::from_vec(vec![0.0f64, 0.2, 0.9, 1.0]);
        let logits = Tensor::from_vec(vec![-3.0f64, 0.1, 2.0, 0.7]);
        let probs = logits.map(sigmoid);
        for lk in [Likelihood::Bernoulli, Likelihood::Mse] {
            let (a, ga) = reconstruction_loss_logits(&x, &logits, lk).unwrap();
            let (b, gb) = reconstruction_loss(&x, &probs, lk).unwrap();
            assert!((a - b).abs() < 1e-12);
            for ((gl, gp), p) in ga.data().iter().zip(gb.data()).zip(probs.data()) {
                assert!((gl - gp * p * (1.0 - p)).abs() < 1e-12);
            }
        }
        // far outside the range where sigmoid rounds to 1
        let (l, _) = reconstruction_loss_logits(
            &Tensor::from_vec(vec![1.0f32]),
            &Tensor::from_vec(vec![60.0f32]),
            Likelihood::Bernoulli,
        )
        .unwrap();
        assert!(l.is_finite() && l < 1e-20);
    }

    #[test]
    fn total_is_sum_and_nonnegative() {
        let x = Tensor::from_vec(vec![0.2f64, 0.7, 0.0]);
        let x_hat = Tensor::from_vec(vec![0.3f64, 0.6, 0.05]);
        let d = dist(&[0.0; 2], &[0.0; 2]);
        let (b, _) = total_loss(&x, &x_hat, &d, Likelihood::Bernoulli).unwrap();
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.total, b.reconstruction);

        let d = dist(&[0.4, -1.1], &[0.3, -0.8]);
        let (b, _) = total_loss(&x, &x_hat, &d, Likelihood::Bernoulli).unwrap();
        // independent recomputation of both closed forms
        let rec: f64 = [(0.2, 0.3), (0.7, 0.6), (0.0, 0.05)]
            .iter()
            .map(|&(t, p): &(f64, f64)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum();
        let kl: f64 = [(0.4, 0.3), (-1.1, -0.8)]
            .iter()
            .map(|&(m, lv): &(f64, f64)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum();
        assert!((b.reconstruction - rec).abs() < 1e-12);
        assert!((b.kl - kl).abs() < 1e-12);
        assert!((b.total - rec - kl).abs() < 1e-12);
        assert!(b.total >= 0.0);
    }
}
