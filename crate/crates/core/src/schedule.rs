//! Masking schedules. `alpha(t)` is the probability that a token survives
//! unmasked until time `t`; the per-token masking rate is
//! `beta(t) = -alpha'(t) / alpha(t)`. The time horizon is fixed to 1.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingSchedule {
    /// `alpha(t) = 1 - t`
    Linear,
    /// `alpha(t) = cos(pi t / 2)`
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub alpha: f64,
    pub alpha_prime: f64,
}

impl ScheduleValues {
    /// `-alpha'/alpha`, or a singular-schedule error once `alpha` hits zero.
    pub fn beta(&self, t: f64) -> Result<f64> {
        if self.alpha <= 0.0 {
            return Err(Error::SingularSchedule { t, alpha: self.alpha });
        }
        Ok(-self.alpha_prime / self.alpha)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

impl MaskingSchedule {
    pub fn eval(&self, t: f64) -> Result<ScheduleValues> {
        check_time(t)?;
        Ok(ScheduleValues { alpha: self.alpha_unchecked(t), alpha_prime: self.alpha_prime_unchecked(t) })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_unchecked(t))
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_prime_unchecked(t))
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        self.eval(t)?.beta(t)
    }

    /// `(alpha, alpha', beta)` in one call.
    pub fn eval_with_beta(&self, t: f64) -> Result<(f64, f64, f64)> {
        let v = self.eval(t)?;
        Ok((v.alpha, v.alpha_prime, v.beta(t)?))
    }

    /// `int_{t0}^{t1} beta(s) ds = ln(alpha(t0) / alpha(t1))`.
    pub fn integrated_rate(&self, t0: f64, t1: f64) -> Result<f64> {
        if t0 > t1 {
            return Err(Error::Domain(format!("t0 = {t0} > t1 = {t1}")));
        }
        let a0 = self.alpha(t0)?;
        let a1 = self.alpha(t1)?;
        if a1 <= 0.0 {
            return Err(Error::SingularSchedule { t: t1, alpha: a1 });
        }
        Ok((a0 / a1).ln())
    }

    pub(crate) fn alpha_unchecked(&self, t: f64) -> f64 {
        match self {
            MaskingSchedule::Linear => 1.0 - t,
            MaskingSchedule::Cosine => {
                if t >= 1.0 {
                    0.0
                } else {
                    (FRAC_PI_2 * t).cos()
                }
            }
        }
    }

    pub(crate) fn alpha_prime_unchecked(&self, t: f64) -> f64 {
        match self {
            MaskingSchedule::Linear => -1.0,
            MaskingSchedule::Cosine => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
        }
    }
}

impl std::str::FromStr for MaskingSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gauss_quad::GaussLegendre;
    use proptest::prelude::*;

    const KINDS: [MaskingSchedule; 2] = [MaskingSchedule::Linear, MaskingSchedule::Cosine];

    #[test]
    fn linear_values() {
        let s = MaskingSchedule::Linear;
        assert_eq!(s.alpha(0.25).unwrap(), 0.75);
        assert!((s.beta(0.5).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn boundaries() {
        for s in KINDS {
            assert!((s.alpha(0.0).unwrap() - 1.0).abs() < 1e-12);
            assert!(s.alpha(1.0).unwrap() <= 1e-9);
            assert!(matches!(s.beta(1.0), Err(Error::SingularSchedule { .. })));
            assert!(matches!(s.eval(1.5), Err(Error::Domain(_))));
            assert!(matches!(s.eval(-0.1), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for s in KINDS {
            for &t in &[0.1, 0.3, 0.7, 0.95] {
                let h = 1e-6;
                let fd = (s.alpha(t + h).unwrap() - s.alpha(t - h).unwrap()) / (2.0 * h);
                assert!((fd - s.alpha_prime(t).unwrap()).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_and_consistent(t in 0.0f64..0.999, dt in 1e-6f64..1e-3) {
            let quad = GaussLegendre::new(64.try_into().unwrap());
            for s in KINDS {
                let (a, ap, b) = s.eval_with_beta(t).unwrap();
                prop_assert!(ap <= 0.0);
                prop_assert!(b >= 0.0);
                let t2 = (t + dt).min(1.0);
                prop_assert!(s.alpha(t2).unwrap() < a);
                let integral = quad.integrate(0.0, t, |u| s.beta(u).unwrap());
                prop_assert!((a - (-integral).exp()).abs() < 1e-6);
            }
        }
    }
}
