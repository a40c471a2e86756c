//! Continuous (rectified-linear) noise schedule and discrete masking schedule.

use crate::error::{Error, Result};
use crate::latent::LatentImage;

pub const DEFAULT_T_MIN: f64 = 1e-3;
pub const DEFAULT_K: usize = 4;

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    RectifiedLinear,
}

/// Noise path `z_t = α(t)·z0 + σ(t)·ε` with `α = 1 − t`, `σ = t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuousSchedule {
    pub kind: ScheduleKind,
    pub t_min: f64,
}

impl Default for ContinuousSchedule {
    fn default() -> Self {
        Self { kind: ScheduleKind::RectifiedLinear, t_min: DEFAULT_T_MIN }
    }
}

impl ContinuousSchedule {
    pub fn new(t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::Domain(format!("t_min {t_min} must lie in (0, 1)")));
        }
        Ok(Self { kind: ScheduleKind::RectifiedLinear, t_min })
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        check_unit(t)?;
        match self.kind {
            ScheduleKind::RectifiedLinear => Ok((1.0 - t, t)),
        }
    }

    /// Time derivatives `(α̇, σ̇)`.
    pub fn alpha_sigma_dot(&self, t: f64) -> Result<(f64, f64)> {
        check_unit(t)?;
        match self.kind {
            ScheduleKind::RectifiedLinear => Ok((-1.0, 1.0)),
        }
    }

    /// `(1 − σ_t)·z0 + σ_t·ε`, elementwise.
    pub fn add_noise(&self, z0: &LatentImage, eps: &LatentImage, t: f64) -> Result<LatentImage> {
        z0.check_same_shape(eps)?;
        let (_, sigma) = self.alpha_sigma(t)?;
        let keep = 1.0 - sigma;
        let data = z0
            .data
            .iter()
            .zip(&eps.data)
            .map(|(&a, &e)| keep * a + sigma * e)
            .collect();
        Ok(LatentImage::new(z0.shape, data))
    }

    /// Regression target `ε − z0`, the constant velocity of the straight path.
    pub fn velocity_target(&self, z0: &LatentImage, eps: &LatentImage) -> Result<LatentImage> {
        z0.check_same_shape(eps)?;
        let data = z0.data.iter().zip(&eps.data).map(|(&a, &e)| e - a).collect();
        Ok(LatentImage::new(z0.shape, data))
    }

    /// `t_i = max(t_min, (i − u)/K)` for `i = 1..=K`: one shared offset stratifies (0, 1].
    pub fn stratified_times(&self, k: usize, u: f64) -> Result<Vec<f64>> {
        if k == 0 {
            return Err(Error::Domain("stratified_times needs K ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&u) {
            return Err(Error::Domain(format!("offset {u} outside [0, 1)")));
        }
        let kf = k as f64;
        Ok((1..=k).map(|i| ((i as f64 - u) / kf).max(self.t_min)).collect())
    }
}

/// Per-position masking probability of the discrete forward process.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DiscreteSchedule;

impl DiscreteSchedule {
    /// Linear law `mask_prob(t) = t`.
    pub fn mask_prob(&self, t: f64) -> Result<f64> {
        check_unit(t)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lat(v: &[f64]) -> LatentImage {
        LatentImage::new((1, 1, v.len()), v.to_vec())
    }

    #[test]
    fn alpha_sigma_examples() {
        let s = ContinuousSchedule::default();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(s.alpha_sigma(1.0).unwrap(), (0.0, 1.0));
        let (a, b) = s.alpha_sigma(0.3).unwrap();
        assert!((a - 0.7).abs() < 1e-15 && b == 0.3);
        assert!(matches!(s.alpha_sigma(1.5), Err(Error::Domain(_))));
        assert!(matches!(s.alpha_sigma(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn add_noise_examples() {
        let s = ContinuousSchedule::default();
        let z0 = lat(&[2.0, 0.0]);
        let eps = lat(&[0.0, 2.0]);
        assert_eq!(s.add_noise(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(s.add_noise(&z0, &eps, 1.0).unwrap(), eps);
        assert_eq!(s.add_noise(&z0, &eps, 0.5).unwrap().data, vec![1.0, 1.0]);
        assert!(matches!(s.add_noise(&z0, &lat(&[1.0]), 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn velocity_target_examples() {
        let s = ContinuousSchedule::default();
        let z = lat(&[0.3, -1.2, 4.0]);
        assert!(s.velocity_target(&z, &z).unwrap().data.iter().all(|&v| v == 0.0));
        assert_eq!(s.velocity_target(&lat(&[1.0, 1.0]), &lat(&[0.0, 0.0])).unwrap().data, vec![-1.0, -1.0]);
    }

    #[test]
    fn stratified_examples() {
        let s = ContinuousSchedule::default();
        assert_eq!(s.stratified_times(1, 0.0).unwrap(), vec![1.0]);
        assert_eq!(s.stratified_times(4, 0.5).unwrap(), vec![0.125, 0.375, 0.625, 0.875]);
        let t = s.stratified_times(4, 0.9999).unwrap();
        assert!(t[0] >= 1e-3);
        assert!(matches!(s.stratified_times(0, 0.2), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_prob_endpoints() {
        let d = DiscreteSchedule;
        assert_eq!(d.mask_prob(0.0).unwrap(), 0.0);
        assert_eq!(d.mask_prob(1.0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn path_matches_alpha_sigma_and_velocity(
            z in prop::collection::vec(-3.0f64..3.0, 6),
            e in prop::collection::vec(-3.0f64..3.0, 6),
            t in 0.0f64..0.99,
        ) {
            let s = ContinuousSchedule::default();
            let (z0, eps) = (lat(&z), lat(&e));
            let (a, b) = s.alpha_sigma(t).unwrap();
            prop_assert!((a + b - 1.0).abs() <= 1e-15);
            let zt = s.add_noise(&z0, &eps, t).unwrap();
            let h = 1e-2;
            let zth = s.add_noise(&z0, &eps, t + h).unwrap();
            let v = s.velocity_target(&z0, &eps).unwrap();
            for i in 0..z.len() {
                prop_assert!((zt.data[i] - (a * z[i] + b * e[i])).abs() <= 1e-12 * (1.0 + zt.data[i].abs()));
                prop_assert!((zth.data[i] - (zt.data[i] + h * v.data[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn stratified_times_cover_strata(k in 1usize..32, u in 0.0f64..1.0) {
            let s = ContinuousSchedule::new(1e-9).unwrap();
            let t = s.stratified_times(k, u).unwrap();
            let d = DiscreteSchedule;
            for i in 0..k {
                let lo = i as f64 / k as f64;
                let hi = (i + 1) as f64 / k as f64;
                prop_assert!(t[i] > lo - 1e-12 || t[i] == 1e-9);
                prop_assert!(t[i] <= hi + 1e-15);
                if i > 0 {
                    prop_assert!(t[i] > t[i - 1]);
                    prop_assert!(d.mask_prob(t[i]).unwrap() >= d.mask_prob(t[i - 1]).unwrap());
                }
            }
        }
    }
}
