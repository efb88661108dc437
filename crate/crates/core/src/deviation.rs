//! Latent deviation: lifting an x0-space edit into the denoising trajectory.
//!
//! For one step `t → t_prev` with incoming latent `x_t`, its noise estimate
//! `ε(x_t)` and clean estimate `x0 = predict_x0(x_t, ε(x_t))`:
//!
//! ```text
//! x'_t      = √a_t·(x0 + T) + √(1−a_t)·ε(x_t)      (= x_t + √a_t·T)
//! x*_t      = λ·x_t + (1−λ)·x'_t
//! ε(x*_t)   = γ·ε(x_t) + (1−γ)·ε(x'_t)
//! x*_{t−1}  = ddim_step(x*_t, ε(x*_t))
//! ```
//!
//! which collapses to the closed form
//!
//! ```text
//! x*_{t−1} = √a_{t−1}·(x0 + (1−λ)·T) + √(1−a_{t−1})·ε*
//!          + √(a_{t−1}(1−a_t)/a_t)·(ε(x_t) − ε*)
//! ```

use ndarray::Zip;

use crate::latent::{mix, Latent};
use crate::schedule::{ddim_step, Schedule, Timestep};
use crate::transfer::check_unit;
use crate::{Error, Result};

/// `x'_t = √a_t·(x0 + T) + √(1−a_t)·ε(x_t)`.
pub fn deviate_latent(x0: &Latent, tdelta: &Latent, eps_xt: &Latent, t: Timestep, s: &Schedule) -> Result<Latent> {
    x0.ensure_same_shape(tdelta)?;
    x0.ensure_same_shape(eps_xt)?;
    let (sa, sb) = s.sqrt_coefficients(t)?;
    let data = Zip::from(&x0.data)
        .and(&tdelta.data)
        .and(&eps_xt.data)
        .map_collect(|&x, &d, &e| (sa * (f64::from(x) + f64::from(d)) + sb * f64::from(e)) as f32);
    Ok(Latent::new(data).with_step(t))
}

/// `x'_t` written relative to the incoming latent: `x_t + √a_t·T`.
///
/// Equal to [`deviate_latent`] whenever `x0 = predict_x0(x_t, ε(x_t))`, and
/// returns `x_t` bit-for-bit wherever `T` is zero.
pub fn shift_latent(x_t: &Latent, tdelta: &Latent, t: Timestep, s: &Schedule) -> Result<Latent> {
    x_t.ensure_same_shape(tdelta)?;
    let (sa, _) = s.sqrt_coefficients(t)?;
    let data = Zip::from(&x_t.data).and(&tdelta.data).map_collect(|&x, &d| {
        if d == 0.0 {
            x
        } else {
            (f64::from(x) + sa * f64::from(d)) as f32
        }
    });
    Ok(Latent::new(data).with_step(t))
}

/// `λ·x_t + (1−λ)·x'_t`.
pub fn blend_latent(x_t: &Latent, x_t_prime: &Latent, lambda_: f32) -> Result<Latent> {
    check_unit("lambda", lambda_)?;
    x_t.zip_map(x_t_prime, |a, b| mix(a, b, lambda_))
}

/// `γ·ε(x_t) + (1−γ)·ε(x'_t)`.
pub fn blend_noise(eps_xt: &Latent, eps_xt_prime: &Latent, gamma: f32) -> Result<Latent> {
    check_unit("gamma", gamma)?;
    eps_xt.zip_map(eps_xt_prime, |a, b| mix(a, b, gamma))
}

/// Every intermediate of one deviated denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationStep {
    pub t: Timestep,
    pub t_prev: Timestep,
    pub lambda_: f32,
    pub gamma: f32,
    pub x_t: Latent,
    pub x_t_prime: Latent,
    pub x_t_star: Latent,
    pub eps_xt: Latent,
    pub eps_xt_prime: Latent,
    pub eps_star: Latent,
    pub x_prev_star: Latent,
}

impl DeviationStep {
    /// Named fields for diagnostic dumps.
    pub fn fields(&self) -> [(&'static str, &Latent); 7] {
        [
            ("x_t", &self.x_t),
            ("x_t_prime", &self.x_t_prime),
            ("x_t_star", &self.x_t_star),
            ("eps_xt", &self.eps_xt),
            ("eps_xt_prime", &self.eps_xt_prime),
            ("eps_star", &self.eps_star),
            ("x_prev_star", &self.x_prev_star),
        ]
    }
}

/// Position of a deviated step within the sampling run.
#[derive(Debug, Clone, Copy)]
pub struct StepWindow {
    pub index: usize,
    pub start_step: usize,
    pub end_step: usize,
}

/// Runs one deviated step. `noise` evaluates the backend's guided noise
/// prediction at timestep `t` under the same conditioning as the replay pass.
#[allow(clippy::too_many_arguments)]
pub fn deviation_step(
    x_t: &Latent,
    eps_xt: &Latent,
    tdelta: &Latent,
    t: Timestep,
    t_prev: Timestep,
    window: StepWindow,
    lambda_: f32,
    gamma: f32,
    s: &Schedule,
    noise: &dyn Fn(&Latent) -> Result<Latent>,
) -> Result<DeviationStep> {
    if !(window.start_step..window.end_step).contains(&window.index) {
        return Err(Error::Contract(format!(
            "step {} lies outside the deviation window [{}, {})",
            window.index, window.start_step, window.end_step
        )));
    }
    check_unit("lambda", lambda_)?;
    check_unit("gamma", gamma)?;
    x_t.ensure_same_shape(eps_xt)?;

    let x_t_prime = shift_latent(x_t, tdelta, t, s)?;
    let eps_xt_prime = if x_t_prime.bit_eq(x_t) {
        eps_xt.clone()
    } else {
        noise(&x_t_prime)?
    };
    let x_t_star = blend_latent(x_t, &x_t_prime, lambda_)?;
    let eps_star = blend_noise(eps_xt, &eps_xt_prime, gamma)?;
    let x_prev_star = ddim_step(&x_t_star, &eps_star, t, t_prev, s)?;
    Ok(DeviationStep {
        t,
        t_prev,
        lambda_,
        gamma,
        x_t: x_t.clone(),
        x_t_prime,
        x_t_star,
        eps_xt: eps_xt.clone(),
        eps_xt_prime,
        eps_star,
        x_prev_star,
    })
}

/// Closed-form `x*_{t−1}` from `x0`, `T`, `ε(x_t)` and the mixed noise `ε*`.
#[allow(clippy::too_many_arguments)]
pub fn closed_form_step(
    x0: &Latent,
    tdelta: &Latent,
    eps_xt: &Latent,
    eps_star: &Latent,
    t: Timestep,
    t_prev: Timestep,
    lambda_: f32,
    s: &Schedule,
) -> Result<Latent> {
    check_unit("lambda", lambda_)?;
    x0.ensure_same_shape(tdelta)?;
    x0.ensure_same_shape(eps_xt)?;
    x0.ensure_same_shape(eps_star)?;
    if t_prev > t {
        return Err(Error::Ordering(format!("closed form from {t} to noisier {t_prev}")));
    }
    let a_t = s.alpha(t)?;
    let a_prev = s.alpha(t_prev)?;
    let shift = 1.0 - f64::from(lambda_);
    let c_x0 = a_prev.sqrt();
    let c_eps = (1.0 - a_prev).sqrt();
    let c_adapt = (a_prev * (1.0 - a_t) / a_t).sqrt();
    let mut out = x0.data.clone();
    Zip::from(&mut out)
        .and(&tdelta.data)
        .and(&eps_xt.data)
        .and(&eps_star.data)
        .for_each(|o, &d, &e, &es| {
            let (x, d, e, es) = (f64::from(*o), f64::from(d), f64::from(e), f64::from(es));
            *o = (c_x0 * (x + shift * d) + c_eps * es + c_adapt * (e - es)) as f32;
        });
    Ok(Latent::new(out).with_step(t_prev))
}

/// The `κ = √(1−a_t) − √(a_{t−1}(1−a_t)/a_t)` coefficient multiplying the
/// mixed noise when the step is written in terms of `x*_t`.
pub fn kappa(t: Timestep, t_prev: Timestep, s: &Schedule) -> Result<f64> {
    let a_t = s.alpha(t)?;
    let a_prev = s.alpha(t_prev)?;
    Ok((1.0 - a_prev).sqrt() - (a_prev * (1.0 - a_t) / a_t).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{compose_latent, predict_x0};
    use ndarray::Array3;

    fn scalar(v: f32) -> Latent {
        Latent::filled([1, 1, 1], v)
    }

    fn sched(a_t: f64, a_prev: f64) -> Schedule {
        Schedule::from_alphas(vec![Timestep(20), Timestep(10)], vec![a_t, a_prev], 1.0).unwrap()
    }

    fn field(seed: u64, scale: f32) -> Latent {
        let mut r = crate::rng::stream(seed, "deviation-test");
        Latent::new(Array3::from_shape_vec((4, 8, 8), crate::rng::normals(&mut r, 256, scale)).unwrap())
    }

    fn window() -> StepWindow {
        StepWindow {
            index: 0,
            start_step: 0,
            end_step: 1,
        }
    }

    #[test]
    fn deviate_scalar_reference() {
        let s = sched(0.25, 0.64);
        let out = deviate_latent(&scalar(1.0), &scalar(0.5), &scalar(1.0), Timestep(20), &s).unwrap();
        assert!((out.data[[0, 0, 0]] - (0.75 + 0.75f32.sqrt())).abs() < 1e-6);
        assert!((out.data[[0, 0, 0]] - 1.6160).abs() < 1e-4);
    }

    #[test]
    fn zero_transfer_reproduces_latent() {
        let s = sched(0.3, 0.6);
        let x0 = field(1, 1.0);
        let e = field(2, 1.0);
        let x_t = compose_latent(&x0, &e, Timestep(20), &s).unwrap();
        let zero = Latent::zeros(4, 8, 8);
        let a = deviate_latent(&x0, &zero, &e, Timestep(20), &s).unwrap();
        assert!(a.max_abs_diff(&x_t) < 1e-6);
        assert!(shift_latent(&x_t, &zero, Timestep(20), &s).unwrap().bit_eq(&x_t));
    }

    #[test]
    fn shifted_and_formula_forms_agree() {
        let s = sched(0.1, 0.4);
        let e = field(3, 1.0);
        let x_t = field(4, 1.0);
        let d = field(5, 0.3);
        let x0 = predict_x0(&x_t, &e, Timestep(20), &s).unwrap();
        let a = deviate_latent(&x0, &d, &e, Timestep(20), &s).unwrap();
        let b = shift_latent(&x_t, &d, Timestep(20), &s).unwrap();
        assert!(a.max_abs_diff(&b) < 2e-6);
    }

    #[test]
    fn deviation_is_additive() {
        let s = sched(0.36, 0.5);
        let x0 = field(6, 1.0);
        let e = field(7, 1.0);
        let d1 = field(8, 0.5);
        let d2 = field(9, 0.5);
        let sum = d1.zip_map(&d2, |a, b| a + b).unwrap();
        let a = deviate_latent(&x0, &sum, &e, Timestep(20), &s).unwrap();
        let b = deviate_latent(&x0, &d1, &e, Timestep(20), &s).unwrap();
        let diff = a.zip_map(&b, |x, y| x - y).unwrap();
        let expected = d2.map(|v| 0.6 * v);
        assert!(diff.max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn blend_endpoints_and_reference() {
        let a = Latent::filled([1, 2, 2], 1.0);
        let b = Latent::zeros(1, 2, 2);
        assert!(blend_latent(&a, &b, 1.0).unwrap().bit_eq(&a));
        assert!(blend_latent(&a, &b, 0.0).unwrap().bit_eq(&b));
        assert!(blend_latent(&a, &b, 0.2).unwrap().data.iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert!(blend_noise(&a, &b, 1.0).unwrap().bit_eq(&a));
        assert!(blend_noise(&a, &b, 0.0).unwrap().bit_eq(&b));
        assert!(blend_noise(&a, &b, 0.2).unwrap().data.iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert!(matches!(blend_latent(&a, &b, 1.1), Err(Error::Domain(_))));
        assert!(matches!(blend_noise(&a, &b, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_transfer_collapses_to_plain_step() {
        let s = sched(0.3, 0.6);
        let x_t = field(10, 1.0);
        let e = field(11, 1.0);
        let zero = Latent::zeros(4, 8, 8);
        let noise = |_: &Latent| -> Result<Latent> { panic!("no backend call expected") };
        let step = deviation_step(&x_t, &e, &zero, Timestep(20), Timestep(10), window(), 0.2, 0.2, &s, &noise).unwrap();
        let plain = ddim_step(&x_t, &e, Timestep(20), Timestep(10), &s).unwrap();
        assert!(step.x_prev_star.bit_eq(&plain));
    }

    #[test]
    fn unit_weights_ignore_transfer() {
        let s = sched(0.3, 0.6);
        let x_t = field(12, 1.0);
        let e = field(13, 1.0);
        let d = field(14, 0.4);
        let noise = |x: &Latent| Ok(x.map(|v| (0.5 * v).tanh()));
        let step = deviation_step(&x_t, &e, &d, Timestep(20), Timestep(10), window(), 1.0, 1.0, &s, &noise).unwrap();
        assert!(step.x_t_star.bit_eq(&x_t));
        assert!(step.eps_star.bit_eq(&e));
        // The blends recompute bit-exactly from the stored fields.
        assert!(blend_latent(&step.x_t, &step.x_t_prime, step.lambda_).unwrap().bit_eq(&step.x_t_star));
        assert!(blend_noise(&step.eps_xt, &step.eps_xt_prime, step.gamma).unwrap().bit_eq(&step.eps_star));
    }

    #[test]
    fn window_and_ordering_errors() {
        let s = sched(0.3, 0.6);
        let x = field(15, 1.0);
        let noise = |x: &Latent| Ok(x.clone());
        let outside = StepWindow {
            index: 3,
            start_step: 0,
            end_step: 3,
        };
        assert!(matches!(
            deviation_step(&x, &x, &x, Timestep(20), Timestep(10), outside, 0.2, 0.2, &s, &noise),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            closed_form_step(&x, &x, &x, &x, Timestep(10), Timestep(20), 0.2, &s),
            Err(Error::Ordering(_))
        ));
    }

    #[test]
    fn closed_form_plain_step_special_case() {
        let s = sched(0.3, 0.6);
        let x0 = field(16, 1.0);
        let e = field(17, 1.0);
        let x_t = compose_latent(&x0, &e, Timestep(20), &s).unwrap();
        let zero = Latent::zeros(4, 8, 8);
        let cf = closed_form_step(&x0, &zero, &e, &e, Timestep(20), Timestep(10), 0.2, &s).unwrap();
        let plain = ddim_step(&x_t, &e, Timestep(20), Timestep(10), &s).unwrap();
        assert!(cf.max_abs_diff(&plain) < 1e-5);
    }

    #[test]
    fn kappa_form_matches_closed_form() {
        // x*_{t−1} = √(a_{t−1}/a_t)·x*_t + κ·ε*
        let s = sched(0.2, 0.7);
        let x_star = field(18, 1.0);
        let eps_star = field(19, 1.0);
        let k = kappa(Timestep(20), Timestep(10), &s).unwrap();
        let r = (0.7f64 / 0.2).sqrt();
        let via_kappa = x_star.zip_map(&eps_star, |x, e| (r * f64::from(x) + k * f64::from(e)) as f32).unwrap();
        let via_step = ddim_step(&x_star, &eps_star, Timestep(20), Timestep(10), &s).unwrap();
        assert!(via_kappa.max_abs_diff(&via_step) < 1e-5);
    }
}
