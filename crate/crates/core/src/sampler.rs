//! Fixed-step ODE integration of a vector field from prior noise (t = 0)
//! to data (t = 1), with optional classifier-free guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::flow::sample_prior;
use crate::model::{ConditionBundle, VectorFieldModel};
use crate::tensor::Mat;

/// Guidance weight used for enhancement.
pub const CFG_ALPHA_ENHANCE: f64 = 0.5;
/// Guidance weight used for separation and synthesis.
pub const CFG_ALPHA_DEFAULT: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Midpoint,
}

impl OdeMethod {
    pub fn evals_per_step(self) -> usize {
        match self {
            OdeMethod::Euler => 1,
            OdeMethod::Midpoint => 2,
        }
    }
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "midpoint" => Ok(OdeMethod::Midpoint),
            other => Err(Error::config(format!("unknown ODE method {other:?}"))),
        }
    }
}

/// How the unconditional field enters the guided field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfgSign {
    /// `(1 + α)·v_cond − α·v_uncond`
    Subtract,
    /// `(1 + α)·v_cond + α·v_uncond`; kept for comparison only.
    Add,
}

impl std::str::FromStr for CfgSign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subtract" => Ok(CfgSign::Subtract),
            "add" => Ok(CfgSign::Add),
            other => Err(Error::config(format!("unknown guidance sign {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub method: OdeMethod,
    pub step_size: f64,
    pub cfg_alpha: f64,
    pub cfg_sign: CfgSign,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: OdeMethod::Midpoint,
            step_size: 0.0625,
            cfg_alpha: CFG_ALPHA_DEFAULT,
            cfg_sign: CfgSign::Subtract,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.steps().map(|_| ())
    }

    /// Number of integration steps, `1 / step_size`.
    pub fn steps(&self) -> Result<usize> {
        let h = self.step_size;
        if !(h > 0.0 && h <= 1.0) {
            return Err(Error::config(format!("step_size {h} outside (0, 1]")));
        }
        let n = (1.0 / h).round();
        if ((1.0 / h) - n).abs() > 1e-9 * n {
            return Err(Error::config(format!("1 / step_size = {} is not an integer", 1.0 / h)));
        }
        if !(self.cfg_alpha >= 0.0 && self.cfg_alpha.is_finite()) {
            return Err(Error::config(format!("cfg_alpha {} must be ≥ 0", self.cfg_alpha)));
        }
        Ok(n as usize)
    }

    /// Field evaluations one integration performs.
    pub fn nfe(&self) -> Result<usize> {
        let guided = if self.cfg_alpha > 0.0 { 2 } else { 1 };
        Ok(self.steps()? * self.method.evals_per_step() * guided)
    }
}

/// Anything that can be integrated: the trained model, or an analytic
/// field in tests.
pub trait VectorField {
    fn eval(&self, x: &Mat, t: f64, cond: &ConditionBundle) -> Result<Mat>;

    /// Condition width used to build the dropped (unconditional) bundle.
    fn cond_width(&self) -> usize;
}

impl VectorField for VectorFieldModel {
    fn eval(&self, x: &Mat, t: f64, cond: &ConditionBundle) -> Result<Mat> {
        self.forward(x, t, cond)
    }

    fn cond_width(&self) -> usize {
        self.config().d_cond
    }
}

/// Classifier-free guided field. With `alpha = 0` only the conditional
/// branch is evaluated.
pub fn guided_field<F: VectorField + ?Sized>(
    field: &F,
    x: &Mat,
    t: f64,
    cond: &ConditionBundle,
    alpha: f64,
    sign: CfgSign,
) -> Result<Mat> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("cfg alpha {alpha} must be ≥ 0")));
    }
    let v_cond = field.eval(x, t, cond)?;
    if alpha == 0.0 {
        return Ok(v_cond);
    }
    let dropped = ConditionBundle::dropped(x.rows(), field.cond_width());
    let v_uncond = field.eval(x, t, &dropped)?;
    let s = match sign {
        CfgSign::Subtract => -alpha,
        CfgSign::Add => alpha,
    };
    Ok(v_cond.zip_map(&v_uncond, |c, u| (1.0 + alpha) * c + s * u))
}

/// Integrate from `x0` at t = 0 to t = 1.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    cond: &ConditionBundle,
    x0: &Mat,
    cfg: &SamplerConfig,
) -> Result<Mat> {
    let steps = cfg.steps()?;
    if cond.len() != x0.rows() {
        return Err(Error::shape(format!("condition of length {}", x0.rows()), cond.len()));
    }
    let h = 1.0 / steps as f64;
    let v = |x: &Mat, t: f64| guided_field(field, x, t, cond, cfg.cfg_alpha, cfg.cfg_sign);
    let mut x = x0.clone();
    for i in 0..steps {
        let t = i as f64 * h;
        let dx = match cfg.method {
            OdeMethod::Euler => v(&x, t)?,
            OdeMethod::Midpoint => {
                let k1 = v(&x, t)?;
                let mut mid = x.clone();
                mid.axpy(0.5 * h, &k1);
                check_finite(&mid, i)?;
                v(&mid, t + 0.5 * h)?
            }
        };
        x.axpy(h, &dx);
        check_finite(&x, i)?;
    }
    Ok(x)
}

fn check_finite(x: &Mat, step: usize) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            context: "sampler state".into(),
        })
    }
}

/// Draw prior noise, integrate, and map the result back to log-Mel space.
pub fn sample_task<R: Rng + ?Sized>(
    model: &VectorFieldModel,
    task_cond: &ConditionBundle,
    length: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<MelSpectrogram> {
    if length == 0 {
        return Err(Error::invalid("cannot sample an empty sequence"));
    }
    let x0 = sample_prior(length, model.config().d_feat, rng);
    let x1 = integrate(model, task_cond, &x0, cfg)?;
    model.norm().denormalize(&x1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowPathConfig, path_point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    struct Constant {
        v: Mat,
    }

    impl VectorField for Constant {
        fn eval(&self, _: &Mat, _: f64, _: &ConditionBundle) -> Result<Mat> {
            Ok(self.v.clone())
        }
        fn cond_width(&self) -> usize {
            1
        }
    }

    /// v(x, t) = −x
    struct Decay;

    impl VectorField for Decay {
        fn eval(&self, x: &Mat, _: f64, _: &ConditionBundle) -> Result<Mat> {
            Ok(x.scale(-1.0))
        }
        fn cond_width(&self) -> usize {
            1
        }
    }

    /// Returns `cond_value` unless the condition was dropped.
    struct Stub {
        cond_value: f64,
        uncond_value: f64,
        calls: Cell<usize>,
    }

    impl VectorField for Stub {
        fn eval(&self, x: &Mat, _: f64, cond: &ConditionBundle) -> Result<Mat> {
            self.calls.set(self.calls.get() + 1);
            let v = if cond.cond_dropped { self.uncond_value } else { self.cond_value };
            Ok(Mat::filled(x.rows(), x.cols(), v))
        }
        fn cond_width(&self) -> usize {
            1
        }
    }

    struct Blowup;

    impl VectorField for Blowup {
        fn eval(&self, x: &Mat, t: f64, _: &ConditionBundle) -> Result<Mat> {
            let v = if t > 0.3 { f64::INFINITY } else { 1.0 };
            Ok(Mat::filled(x.rows(), x.cols(), v))
        }
        fn cond_width(&self) -> usize {
            1
        }
    }

    fn cfg(method: OdeMethod, h: f64, alpha: f64) -> SamplerConfig {
        SamplerConfig {
            method,
            step_size: h,
            cfg_alpha: alpha,
            cfg_sign: CfgSign::Subtract,
        }
    }

    fn cond(len: usize) -> ConditionBundle {
        ConditionBundle::new(Mat::zeros(len, 1))
    }

    #[test]
    fn constant_field_reaches_path_endpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let path = FlowPathConfig::default();
        let x0 = Mat::from_fn(7, 4, |_, _| rng.random_range(-2.0..2.0));
        let x1 = Mat::from_fn(7, 4, |_, _| rng.random_range(-2.0..2.0));
        let v = x1.zip_map(&x0, |b, a| b - (1.0 - path.sigma_min) * a);
        let expected = path_point(&x0, &x1, 1.0, &path).unwrap();
        for method in [OdeMethod::Euler, OdeMethod::Midpoint] {
            let got = integrate(&Constant { v: v.clone() }, &cond(7), &x0, &cfg(method, 0.0625, 0.0)).unwrap();
            let err = got.zip_map(&expected, |a, b| (a - b).abs()).max_abs();
            assert!(err < 1e-6, "{method:?}: {err}");
        }
    }

    fn decay_error(method: OdeMethod, h: f64) -> f64 {
        let x0 = Mat::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let got = integrate(&Decay, &cond(1), &x0, &cfg(method, h, 0.0)).unwrap();
        let exact = x0.scale((-1f64).exp());
        got.zip_map(&exact, |a, b| (a - b).abs()).max_abs()
    }

    #[test]
    fn linear_ode_accuracy() {
        // On v = −x one midpoint step multiplies by 1 − h + h²/2 exactly.
        let h: f64 = 0.0625;
        let x0 = Mat::from_rows(&[vec![1.0]]).unwrap();
        let got = integrate(&Decay, &cond(1), &x0, &cfg(OdeMethod::Midpoint, h, 0.0)).unwrap();
        let discrete = (1.0 - h + h * h / 2.0).powi(16);
        assert!((got.item() - discrete).abs() < 1e-14);

        // Global error ≈ e^{-1}·h²/6 per unit of x0, about 2.4e-4 here.
        let mid = (got.item() - (-1f64).exp()).abs();
        let bound = (-1f64).exp() * h * h / 6.0;
        assert!(mid < 1.05 * bound, "{mid} vs {bound}");
        assert!(decay_error(OdeMethod::Euler, h) > decay_error(OdeMethod::Midpoint, h));
    }

    #[test]
    fn solver_order() {
        let hs = [0.25, 0.125, 0.0625, 0.03125];
        for (method, order) in [(OdeMethod::Euler, 1.0), (OdeMethod::Midpoint, 2.0)] {
            let errs: Vec<f64> = hs.iter().map(|&h| decay_error(method, h)).collect();
            let n = hs.len() as f64;
            let lx: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
            let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
            let mx = lx.iter().sum::<f64>() / n;
            let my = ly.iter().sum::<f64>() / n;
            let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
                / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
            assert!((slope - order).abs() < 0.3, "{method:?}: slope {slope}");
        }
    }

    #[test]
    fn nfe_accounting() {
        for method in [OdeMethod::Euler, OdeMethod::Midpoint] {
            for h in [1.0, 0.5, 0.25, 0.0625, 0.1] {
                for alpha in [0.0, 0.5] {
                    let c = cfg(method, h, alpha);
                    let stub = Stub { cond_value: 1.0, uncond_value: 0.0, calls: Cell::new(0) };
                    integrate(&stub, &cond(3), &Mat::zeros(3, 2), &c).unwrap();
                    assert_eq!(stub.calls.get(), c.nfe().unwrap(), "{c:?}");
                }
            }
        }
        assert_eq!(cfg(OdeMethod::Midpoint, 0.0625, 0.0).nfe().unwrap(), 32);
        assert_eq!(cfg(OdeMethod::Midpoint, 0.0625, 0.7).nfe().unwrap(), 64);
    }

    #[test]
    fn guidance_arithmetic() {
        let x = Mat::zeros(4, 3);
        let c = cond(4);
        let stub = |u| Stub { cond_value: 1.0, uncond_value: u, calls: Cell::new(0) };
        let v = |f: &Stub, a, s| guided_field(f, &x, 0.2, &c, a, s).unwrap();
        assert!(v(&stub(0.0), 0.7, CfgSign::Subtract).data().iter().all(|&e| (e - 1.7).abs() < 1e-12));
        assert!(v(&stub(0.0), 0.7, CfgSign::Add).data().iter().all(|&e| (e - 1.7).abs() < 1e-12));
        assert!(v(&stub(1.0), 0.7, CfgSign::Subtract).data().iter().all(|&e| (e - 1.0).abs() < 1e-12));
        assert!(v(&stub(1.0), 0.7, CfgSign::Add).data().iter().all(|&e| (e - 2.4).abs() < 1e-12));
        for s in [CfgSign::Subtract, CfgSign::Add] {
            let f = stub(5.0);
            assert_eq!(v(&f, 0.0, s), Mat::filled(4, 3, 1.0));
            assert_eq!(f.calls.get(), 1);
        }
        assert!(guided_field(&stub(0.0), &x, 0.2, &c, -0.1, CfgSign::Subtract).is_err());
    }

    #[test]
    fn step_size_validation() {
        assert!(cfg(OdeMethod::Euler, 0.3, 0.0).validate().is_err());
        assert!(cfg(OdeMethod::Euler, 0.0, 0.0).validate().is_err());
        assert!(cfg(OdeMethod::Euler, 1.5, 0.0).validate().is_err());
        assert!(cfg(OdeMethod::Euler, 0.5, -1.0).validate().is_err());
        assert_eq!(cfg(OdeMethod::Euler, 0.1, 0.0).steps().unwrap(), 10);
        assert!(SamplerConfig::default().validate().is_ok());
    }

    #[test]
    fn non_finite_state_reports_step() {
        let err = integrate(&Blowup, &cond(2), &Mat::zeros(2, 2), &cfg(OdeMethod::Euler, 0.125, 0.0)).unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert_eq!(step, 3),
            e => panic!("unexpected {e}"),
        }
        assert!(integrate(&Decay, &cond(3), &Mat::zeros(2, 2), &cfg(OdeMethod::Euler, 0.5, 0.0)).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        use crate::model::VectorFieldModelConfig;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = VectorFieldModel::new(VectorFieldModelConfig::tiny(), &mut rng).unwrap();
        let c = ConditionBundle::new(Mat::zeros(12, 80));
        let cfg = SamplerConfig { step_size: 0.25, ..Default::default() };
        let a = sample_task(&model, &c, 12, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let b = sample_task(&model, &c, 12, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let d = sample_task(&model, &c, 12, &mut ChaCha8Rng::seed_from_u64(6), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, d);
        assert_eq!(a.n_frames(), 12);
    }
}
