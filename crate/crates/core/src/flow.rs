//! Optimal-transport conditional probability path and flow-matching losses.
//!
//! The path from a prior draw `x0` to a data point `x1` is
//! `ψ_t(x0) = (1 − (1 − σ_min)·t)·x0 + t·x1`, whose time derivative is the
//! regression target `u = x1 − (1 − σ_min)·x0`, constant in `t`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPathConfig {
    pub sigma_min: f64,
}

impl Default for FlowPathConfig {
    fn default() -> Self {
        FlowPathConfig { sigma_min: 1e-5 }
    }
}

impl FlowPathConfig {
    pub fn new(sigma_min: f64) -> Result<Self> {
        let cfg = FlowPathConfig { sigma_min };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::config(format!(
                "sigma_min must lie in (0, 1), got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

/// One training draw along the path.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub t: f64,
    pub x0: Mat,
    pub x1: Mat,
    pub x_t: Mat,
    pub u_target: Mat,
}

impl FlowSample {
    /// Draw `x0` from the prior and build the path point at time `t`.
    pub fn draw<R: Rng + ?Sized>(x1: Mat, t: f64, cfg: &FlowPathConfig, rng: &mut R) -> Result<Self> {
        let x0 = sample_prior(x1.rows(), x1.cols(), rng);
        Self::from_endpoints(x0, x1, t, cfg)
    }

    pub fn from_endpoints(x0: Mat, x1: Mat, t: f64, cfg: &FlowPathConfig) -> Result<Self> {
        let x_t = path_point(&x0, &x1, t, cfg)?;
        let u_target = target_field(&x0, &x1, cfg)?;
        Ok(FlowSample {
            t,
            x0,
            x1,
            x_t,
            u_target,
        })
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} is outside [0, 1]")));
    }
    Ok(())
}

pub fn path_point(x0: &Mat, x1: &Mat, t: f64, cfg: &FlowPathConfig) -> Result<Mat> {
    x0.same_shape(x1)?;
    check_time(t)?;
    let a = 1.0 - (1.0 - cfg.sigma_min) * t;
    Ok(x0.zip_map(x1, |p, q| a * p + t * q))
}

pub fn target_field(x0: &Mat, x1: &Mat, cfg: &FlowPathConfig) -> Result<Mat> {
    x0.same_shape(x1)?;
    let k = 1.0 - cfg.sigma_min;
    Ok(x0.zip_map(x1, |p, q| q - k * p))
}

/// Mean squared error over the frames flagged in `frames` (all bins of a
/// selected frame count).
pub fn masked_mse(pred: &Mat, target: &Mat, frames: &[bool]) -> Result<f64> {
    pred.same_shape(target)?;
    if frames.len() != pred.rows() {
        return Err(Error::shape(
            format!("frame selection of length {}", pred.rows()),
            frames.len(),
        ));
    }
    let selected = frames.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Err(Error::invalid("loss region selects no frames"));
    }
    let mut sum = 0.0;
    for (r, _) in frames.iter().enumerate().filter(|(_, m)| **m) {
        for (p, q) in pred.row(r).iter().zip(target.row(r)) {
            sum += (p - q) * (p - q);
        }
    }
    Ok(sum / (selected * pred.cols()) as f64)
}

/// Pre-training objective: error on masked frames only.
pub fn cfm_pretrain_loss(pred_field: &Mat, u_target: &Mat, mask: &[bool]) -> Result<f64> {
    masked_mse(pred_field, u_target, mask)
}

/// Fine-tuning objective over an explicit loss region.
pub fn cfm_finetune_loss(pred_field: &Mat, u_target: &Mat, loss_region: &[bool]) -> Result<f64> {
    masked_mse(pred_field, u_target, loss_region)
}

/// I.i.d. standard normal matrix.
pub fn sample_prior<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Mat::from_vec(rows, cols, data).expect("length matches shape")
}

/// Flow time drawn uniformly on `[0, 1]`, one per sequence.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..=1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn path_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FlowPathConfig::default();
        let x0 = rand_mat(4, 3, &mut rng);
        let x1 = rand_mat(4, 3, &mut rng);
        assert_eq!(path_point(&x0, &x1, 0.0, &cfg).unwrap(), x0);
        let end = path_point(&x0, &x1, 1.0, &cfg).unwrap();
        let expect = x1.zip_map(&x0, |a, b| a + cfg.sigma_min * b);
        for (a, b) in end.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn scalar_hand_value() {
        let cfg = FlowPathConfig { sigma_min: 0.0 };
        let p = path_point(&Mat::scalar(2.0), &Mat::scalar(4.0), 0.5, &cfg).unwrap();
        assert_eq!(p.item(), 3.0);
    }

    #[test]
    fn path_errors() {
        let cfg = FlowPathConfig::default();
        let a = Mat::zeros(2, 2);
        assert!(path_point(&a, &Mat::zeros(2, 3), 0.5, &cfg).is_err());
        assert!(path_point(&a, &a, 1.5, &cfg).is_err());
        assert!(path_point(&a, &a, -0.1, &cfg).is_err());
        assert!(target_field(&a, &Mat::zeros(3, 2), &cfg).is_err());
        assert!(FlowPathConfig::new(0.0).is_err());
        assert!(FlowPathConfig::new(1.0).is_err());
    }

    #[test]
    fn target_field_special_cases() {
        let cfg0 = FlowPathConfig { sigma_min: 0.0 };
        let x1 = Mat::from_fn(3, 2, |r, c| (r + c) as f64);
        assert_eq!(target_field(&Mat::zeros(3, 2), &x1, &FlowPathConfig::default()).unwrap(), x1);
        let c = Mat::filled(3, 2, 1.7);
        assert!(target_field(&c, &c, &cfg0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_field_is_central_difference_of_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = FlowPathConfig::default();
        let h = 1e-4;
        for _ in 0..100 {
            let x0 = rand_mat(3, 5, &mut rng);
            let x1 = rand_mat(3, 5, &mut rng);
            let t = rng.random_range(h..1.0 - h);
            let plus = path_point(&x0, &x1, t + h, &cfg).unwrap();
            let minus = path_point(&x0, &x1, t - h, &cfg).unwrap();
            let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * h));
            let u = target_field(&x0, &x1, &cfg).unwrap();
            assert!(fd.zip_map(&u, |a, b| a - b).max_abs() < 1e-6);
        }
    }

    #[test]
    fn pretrain_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let target = rand_mat(5, 4, &mut rng);
        let mask = [true, false, true, true, false];
        assert_eq!(cfm_pretrain_loss(&target, &target, &mask).unwrap(), 0.0);
        let shifted = target.map(|v| v + 1.0);
        assert!((cfm_pretrain_loss(&shifted, &target, &mask).unwrap() - 1.0).abs() < 1e-12);

        let pred = rand_mat(5, 4, &mut rng);
        let mut sum = 0.0;
        let mut n = 0;
        for r in [0, 2, 3] {
            for c in 0..4 {
                sum += (pred.get(r, c) - target.get(r, c)).powi(2);
                n += 1;
            }
        }
        let got = cfm_pretrain_loss(&pred, &target, &mask).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12);
        assert!(cfm_pretrain_loss(&pred, &target, &[false; 5]).is_err());
        assert!(cfm_pretrain_loss(&pred, &target, &[true; 4]).is_err());
    }

    #[test]
    fn finetune_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = rand_mat(6, 3, &mut rng);
        let target = rand_mat(6, 3, &mut rng);
        let all = [true; 6];
        let plain = pred.zip_map(&target, |a, b| (a - b).powi(2)).mean();
        assert!((cfm_finetune_loss(&pred, &target, &all).unwrap() - plain).abs() < 1e-12);
        let region = [false, true, true, false, false, true];
        assert_eq!(
            cfm_finetune_loss(&pred, &target, &region).unwrap(),
            cfm_pretrain_loss(&pred, &target, &region).unwrap()
        );
        // two frames, one bin: errors 1 and 3 -> (1 + 9) / 2
        let p = Mat::from_vec(2, 1, vec![1.0, 5.0]).unwrap();
        let q = Mat::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(cfm_finetune_loss(&p, &q, &[true, true]).unwrap(), 5.0);
        assert!(cfm_finetune_loss(&p, &q, &[false, false]).is_err());
    }

    #[test]
    fn prior_moments_and_seeding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = sample_prior(1000, 1000, &mut rng);
        let mean = x.mean();
        let var = x.map(|v| (v - mean).powi(2)).mean();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");

        let a = sample_prior(10, 10, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_prior(10, 10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let c = sample_prior(10, 10, &mut ChaCha8Rng::seed_from_u64(10));
        let differing = a.data().iter().zip(c.data()).filter(|(p, q)| p != q).count();
        assert!(differing >= 99);
    }

    proptest! {
        #[test]
        fn path_is_affine_in_endpoints(seed in 0u64..500, t in 0.0f64..=1.0, c in -4.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = FlowPathConfig::default();
            let x0 = rand_mat(2, 3, &mut rng);
            let x1 = rand_mat(2, 3, &mut rng);
            let base = path_point(&x0, &x1, t, &cfg).unwrap();
            let scaled = path_point(&x0.scale(c), &x1.scale(c), t, &cfg).unwrap();
            for (a, b) in base.data().iter().zip(scaled.data()) {
                prop_assert!((a * c - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn loss_is_nonnegative_and_zero_iff_equal(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_mat(4, 2, &mut rng);
            let q = rand_mat(4, 2, &mut rng);
            let mask = [true, true, false, true];
            prop_assert!(masked_mse(&p, &q, &mask).unwrap() > 0.0);
            prop_assert_eq!(masked_mse(&p, &p, &mask).unwrap(), 0.0);
        }
    }
}
