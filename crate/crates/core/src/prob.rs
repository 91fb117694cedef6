//! Diagonal-Gaussian primitives, reparameterized sampling, closed-form KL,
//! and the two pixel likelihoods. The numeric bedrock for every other module.
//!
//! Distribution parameters are tensors so the same code path serves both
//! plain evaluation and the training graph. Leading axes are treated as batch
//! dimensions; reductions here run over the final (latent or pixel) axes only.

use crate::error::{Error, Result};
use crate::gemm::Scalar;
use crate::tensor::{Arr, Tensor};

/// Log-variances are clamped to this interval everywhere to keep `exp` tame.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// A diagonal Gaussian over a latent vector; the unit of all posterior and
/// prior bookkeeping. `mean` and `log_var` share a shape whose last axis is
/// the latent dimension D.
#[derive(Clone)]
pub struct DiagGaussian<T: Scalar> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Scalar> DiagGaussian<T> {
    /// Validates shapes and finiteness; clamps log-variance into
    /// [`LOG_VAR_MIN`, `LOG_VAR_MAX`].
    pub fn new(mean: Tensor<T>, log_var: Tensor<T>) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::Contract(format!(
                "mean shape {:?} != log_var shape {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        if mean.is_empty() {
            return Err(Error::Contract("latent dimension must be >= 1".into()));
        }
        if !mean.value().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite mean".into()));
        }
        let lv = log_var.value();
        if !lv.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite log_var".into()));
        }
        Ok(DiagGaussian {
            mean,
            log_var: log_var.clamp(T::cast_from(LOG_VAR_MIN), T::cast_from(LOG_VAR_MAX)),
        })
    }

    /// N(0, I) with the given shape.
    pub fn standard(shape: &[usize]) -> Self {
        DiagGaussian {
            mean: Tensor::constant(Arr::zeros(ndarray::IxDyn(shape))),
            log_var: Tensor::constant(Arr::zeros(ndarray::IxDyn(shape))),
        }
    }

    pub fn dim(&self) -> usize {
        *self.mean.shape().last().unwrap()
    }
}

/// Closed-form KL(q || p) for diagonal Gaussians, summed over the last axis.
///
/// For 1-D inputs the result is a scalar; leading axes are preserved as batch
/// dimensions. Nonnegative up to numeric slack.
pub fn kl_diag<T: Scalar>(q: &DiagGaussian<T>, p: &DiagGaussian<T>) -> Result<Tensor<T>> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::Contract(format!(
            "kl_diag dimension mismatch: {:?} vs {:?}",
            q.mean.shape(),
            p.mean.shape()
        )));
    }
    let half = T::cast_from(0.5);
    let last = q.mean.shape().len() - 1;
    // 0.5*(lv_p - lv_q) + (exp(lv_q) + (mu_q - mu_p)^2) / (2 exp(lv_p)) - 0.5
    let lv_term = p.log_var.sub(&q.log_var).mul_scalar(half);
    let num = q.log_var.exp().add(&q.mean.sub(&p.mean).square());
    let den = p.log_var.exp().mul_scalar(T::cast_from(2.0));
    let kl = lv_term.add(&num.div(&den)).add_scalar(-half);
    let out = kl.sum_axis_keep(last);
    let shape = out.shape();
    let squeezed: Vec<usize> = shape[..shape.len() - 1].to_vec();
    let out = out.reshape(&squeezed);
    if !out.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite KL".into()));
    }
    Ok(out)
}

/// Reparameterized sample: mean + temperature * exp(log_var / 2) * noise.
///
/// Differentiable w.r.t. the distribution parameters; `noise` is treated as a
/// constant draw.
pub fn sample_reparam<T: Scalar>(
    d: &DiagGaussian<T>,
    noise: &Tensor<T>,
    temperature: T,
) -> Result<Tensor<T>> {
    if temperature <= T::zero() {
        return Err(Error::Contract(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if noise.shape() != d.mean.shape() {
        return Err(Error::Contract(format!(
            "noise shape {:?} != distribution shape {:?}",
            noise.shape(),
            d.mean.shape()
        )));
    }
    let std = d.log_var.mul_scalar(T::cast_from(0.5)).exp();
    Ok(d.mean.add(&std.mul(noise).mul_scalar(temperature)))
}

/// Deterministic sample at zero temperature: just the mean.
pub fn sample_mode<T: Scalar>(d: &DiagGaussian<T>) -> Tensor<T> {
    d.mean.clone()
}

/// Per-pixel mixture weights from mask logits via softmax over the slot axis.
///
/// `mask_logits` has shape [.., K, N] with slots on `slot_axis`; every pixel's
/// weights sum to one.
pub fn normalize_masks<T: Scalar>(mask_logits: &Tensor<T>, slot_axis: usize) -> Tensor<T> {
    mask_logits.softmax(slot_axis)
}

/// Per-slot RGB predictions, mask logits and the shared observation noise.
///
/// Shapes: `rgb_means` [B, K, 3, N] with entries in [0,1], `mask_logits`
/// [B, K, N], sigma > 0 shared across pixels and slots.
pub struct PixelLikelihoodParams<T: Scalar> {
    pub rgb_means: Tensor<T>,
    pub mask_logits: Tensor<T>,
    pub sigma: T,
}

impl<T: Scalar> PixelLikelihoodParams<T> {
    pub fn validate(&self) -> Result<()> {
        let r = self.rgb_means.shape();
        let m = self.mask_logits.shape();
        if r.len() != 4 || m.len() != 3 {
            return Err(Error::Contract(format!(
                "expected rgb [B,K,3,N] and masks [B,K,N], got {:?} / {:?}",
                r, m
            )));
        }
        if r[0] != m[0] || r[1] != m[1] || r[2] != 3 || r[3] != m[2] {
            return Err(Error::Contract(format!(
                "rgb/mask shapes disagree: {:?} vs {:?}",
                r, m
            )));
        }
        if self.sigma <= T::zero() {
            return Err(Error::Contract("sigma must be > 0".into()));
        }
        Ok(())
    }

    fn batch(&self) -> usize {
        self.rgb_means.shape()[0]
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.value().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Negative log-likelihood of `x` under a Gaussian around the mask-weighted
/// mean image, summed over pixels and channels; returns per-scene values [B].
///
/// x: [B, 3, N] with entries in [0,1].
pub fn nll_gaussian_mixture_means<T: Scalar>(
    x: &Tensor<T>,
    params: &PixelLikelihoodParams<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    let b = params.batch();
    let masks = normalize_masks(&params.mask_logits, 1); // [B,K,N]
    let mshape = masks.shape();
    let masks4 = masks.reshape(&[mshape[0], mshape[1], 1, mshape[2]]);
    let mean_img = params.rgb_means.mul(&masks4).sum_axis_keep(1); // [B,1,3,N]
    let rs = mean_img.shape();
    let mean_img = mean_img.reshape(&[rs[0], rs[2], rs[3]]); // [B,3,N]
    let sig2 = params.sigma * params.sigma;
    let log_norm =
        T::cast_from(0.5) * T::cast_from((2.0 * std::f64::consts::PI).ln() + sig2.cast_f64().ln());
    let sq = x.sub(&mean_img).square();
    let per_elem = sq
        .mul_scalar(T::one() / (T::cast_from(2.0) * sig2))
        .add_scalar(log_norm);
    let nll = per_elem
        .reshape(&[b, 3 * x.shape()[2]])
        .sum_axis_keep(1)
        .reshape(&[b]);
    check_finite(&nll, "Gaussian NLL")?;
    Ok(nll)
}

/// Mixture-of-Gaussians negative log-likelihood with a log-sum-exp stabilizer,
/// summed over pixels; per-scene values [B]. Masks are normalized by softmax
/// before entering the log.
pub fn nll_mog<T: Scalar>(x: &Tensor<T>, params: &PixelLikelihoodParams<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let b = params.batch();
    let n = x.shape()[2];
    let k = params.rgb_means.shape()[1];
    let sig2 = params.sigma * params.sigma;
    let log_norm =
        T::cast_from(0.5) * T::cast_from((2.0 * std::f64::consts::PI).ln() + sig2.cast_f64().ln());
    // log N(x | rgb_k, sigma^2) summed over channels: [B,K,N]
    let xb = x.reshape(&[b, 1, 3, n]);
    let sq = xb.sub(&params.rgb_means).square();
    let log_comp = sq
        .mul_scalar(-T::one() / (T::cast_from(2.0) * sig2))
        .add_scalar(-log_norm)
        .sum_axis_keep(2)
        .reshape(&[b, k, n]);
    // log softmax over slots
    let log_m = params.mask_logits.sub(&params.mask_logits.logsumexp(1));
    let joint = log_m.add(&log_comp); // [B,K,N]
    let per_pixel = joint.logsumexp(1).reshape(&[b, n]); // [B,N]
    let nll = per_pixel.sum_axis_keep(1).reshape(&[b]).neg();
    check_finite(&nll, "MoG NLL")?;
    Ok(nll)
}

/// Nats-per-scene to bits-per-dim, with D = pixels * channels.
pub fn nats_to_bpd(nats: f64, pixels: usize, channels: usize) -> f64 {
    nats / ((pixels * channels) as f64 * std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn g1(mean: &[f64], log_var: &[f64]) -> DiagGaussian<f64> {
        DiagGaussian::new(
            Tensor::constant(Arr::from_shape_vec(IxDyn(&[mean.len()]), mean.to_vec()).unwrap()),
            Tensor::constant(
                Arr::from_shape_vec(IxDyn(&[log_var.len()]), log_var.to_vec()).unwrap(),
            ),
        )
        .unwrap()
    }

    #[test]
    fn kl_identity_is_zero() {
        let q = g1(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 0.0]);
        let kl = kl_diag(&q, &q).unwrap().item();
        assert!(kl.abs() < 1e-9);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q = g1(&[1.0], &[0.0]);
        let p = g1(&[0.0], &[0.0]);
        let kl = kl_diag(&q, &p).unwrap().item();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_dimension_mismatch_is_contract_error() {
        let q = g1(&[0.0, 0.0], &[0.0, 0.0]);
        let p = g1(&[0.0], &[0.0]);
        assert!(matches!(kl_diag(&q, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mean = Tensor::constant(Arr::from_elem(IxDyn(&[2]), f64::NAN));
        let lv = Tensor::constant(Arr::zeros(IxDyn(&[2])));
        assert!(matches!(DiagGaussian::new(mean, lv), Err(Error::Numeric(_))));
    }

    #[test]
    fn reparam_zero_noise_gives_mean() {
        let d = g1(&[2.0, -3.0], &[1.0, 0.3]);
        let noise = Tensor::constant(Arr::zeros(IxDyn(&[2])));
        let s = sample_reparam(&d, &noise, 1.0).unwrap().value();
        assert_eq!(s, Arr::from_shape_vec(IxDyn(&[2]), vec![2.0, -3.0]).unwrap());
    }

    #[test]
    fn reparam_analytic_case() {
        // mean 2, var 4 (log_var = ln 4), noise 1, temperature 1 -> 4
        let d = g1(&[2.0], &[4.0f64.ln()]);
        let noise = Tensor::constant(Arr::from_elem(IxDyn(&[1]), 1.0));
        let s = sample_reparam(&d, &noise, 1.0).unwrap().item();
        assert!((s - 4.0).abs() < 1e-12);
    }

    #[test]
    fn reparam_rejects_nonpositive_temperature() {
        let d = g1(&[0.0], &[0.0]);
        let noise = Tensor::constant(Arr::zeros(IxDyn(&[1])));
        assert!(matches!(
            sample_reparam(&d, &noise, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masks_k1_all_ones() {
        let logits = Tensor::constant(Arr::from_elem(IxDyn(&[1, 1, 5]), 3.7f64));
        let m = normalize_masks(&logits, 1).value();
        assert!(m.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn masks_equal_logits_uniform() {
        let logits = Tensor::constant(Arr::<f64>::zeros(IxDyn(&[1, 4, 3])));
        let m = normalize_masks(&logits, 1).value();
        assert!(m.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn masks_softmax_quarter_three_quarters() {
        let logits = Tensor::constant(
            Arr::from_shape_vec(IxDyn(&[1, 2, 1]), vec![0.0, 3.0f64.ln()]).unwrap(),
        );
        let m = normalize_masks(&logits, 1).value();
        assert!((m[[0, 0, 0]] - 0.25).abs() < 1e-12);
        assert!((m[[0, 1, 0]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_perfect_reconstruction_floor() {
        // perfect reconstruction, sigma = 0.7 -> N*3*0.5*ln(2*pi*0.49)
        let n = 6usize;
        let x = Tensor::constant(Arr::from_elem(IxDyn(&[1, 3, n]), 0.3));
        let params = PixelLikelihoodParams {
            rgb_means: Tensor::constant(Arr::from_elem(IxDyn(&[1, 2, 3, n]), 0.3)),
            mask_logits: Tensor::constant(Arr::zeros(IxDyn(&[1, 2, n]))),
            sigma: 0.7,
        };
        let nll = nll_gaussian_mixture_means(&x, &params).unwrap().item();
        let expect = n as f64 * 3.0 * 0.5 * (2.0 * std::f64::consts::PI * 0.49).ln();
        assert!((nll - expect).abs() < 1e-9, "{nll} vs {expect}");
    }

    #[test]
    fn mog_degenerate_mask_equals_single_slot_gaussian() {
        // one mask weight ~ 1 -> same as mixture-of-means on that slot alone
        let n = 4usize;
        let mut rgb = Arr::<f64>::zeros(IxDyn(&[1, 2, 3, n]));
        rgb.slice_mut(ndarray::s![0, 0, .., ..]).fill(0.9);
        rgb.slice_mut(ndarray::s![0, 1, .., ..]).fill(0.2);
        let mut logits = Arr::<f64>::zeros(IxDyn(&[1, 2, n]));
        logits.slice_mut(ndarray::s![0, 0, ..]).fill(60.0);
        logits.slice_mut(ndarray::s![0, 1, ..]).fill(-60.0);
        let x = Tensor::constant(Arr::from_elem(IxDyn(&[1, 3, n]), 0.5));
        let params = PixelLikelihoodParams {
            rgb_means: Tensor::constant(rgb.clone()),
            mask_logits: Tensor::constant(logits.clone()),
            sigma: 0.5,
        };
        let a = nll_mog(&x, &params).unwrap().item();
        let b = nll_gaussian_mixture_means(&x, &params).unwrap().item();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn mog_duplicate_components_collapse() {
        // K=2, equal weights, identical components == single-component NLL
        let n = 5usize;
        let rgb = Arr::from_elem(IxDyn(&[1, 2, 3, n]), 0.4f64);
        let logits = Arr::<f64>::zeros(IxDyn(&[1, 2, n]));
        let x = Tensor::constant(Arr::from_elem(IxDyn(&[1, 3, n]), 0.1));
        let params = PixelLikelihoodParams {
            rgb_means: Tensor::constant(rgb),
            mask_logits: Tensor::constant(logits),
            sigma: 0.3,
        };
        let a = nll_mog(&x, &params).unwrap().item();
        let single = PixelLikelihoodParams {
            rgb_means: Tensor::constant(Arr::from_elem(IxDyn(&[1, 1, 3, n]), 0.4)),
            mask_logits: Tensor::constant(Arr::zeros(IxDyn(&[1, 1, n]))),
            sigma: 0.3,
        };
        let b = nll_mog(&x, &single).unwrap().item();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn masks_row_sums_survive_extreme_logits() {
        let mut logits = Arr::<f64>::zeros(IxDyn(&[1, 3, 4]));
        logits.slice_mut(ndarray::s![0, 0, ..]).fill(100.0);
        logits.slice_mut(ndarray::s![0, 1, ..]).fill(-100.0);
        let m = normalize_masks(&Tensor::constant(logits), 1).value();
        for px in 0..4 {
            let s: f64 = (0..3).map(|k| m[[0, k, px]]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!((0..3).all(|k| (0.0..=1.0).contains(&m[[0, k, px]])));
        }
    }
}
