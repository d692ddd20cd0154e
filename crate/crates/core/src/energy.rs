//! Convex quadratic battery-power model, its least-squares calibration, and
//! energy integration over sampled trajectories.
//!
//! Power is `z' P z + q' z + r` with `z = [v, a]`, in watts. Negative values
//! are regeneration. A physics-based powertrain model stands in for measured
//! data: it generates calibration samples and meters energy in the simulator.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Eigenvalue floor used when projecting a fitted `P` onto the PD cone.
pub const EIGEN_FLOOR: f64 = 1e-6;

/// Anything that maps `(v, a)` to battery power in watts.
pub trait PowerModel {
    fn power(&self, v: f64, a: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub p: [[f64; 2]; 2],
    pub q: [f64; 2],
    pub r: f64,
}

impl EnergyParams {
    pub fn new(p: [[f64; 2]; 2], q: [f64; 2], r: f64) -> Result<Self> {
        let params = Self { p, q, r };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.p.iter().flatten().chain(self.q.iter()).all(|x| x.is_finite()) && self.r.is_finite();
        if !finite {
            return Err(Error::Calibration("energy parameters must be finite".into()));
        }
        if self.p[0][1] != self.p[1][0] {
            return Err(Error::Calibration("P must be symmetric".into()));
        }
        if !self.is_positive_definite() {
            return Err(Error::Calibration(format!("P must be positive definite: {:?}", self.p)));
        }
        Ok(())
    }

    /// Leading principal minors test.
    pub fn is_positive_definite(&self) -> bool {
        let det = self.p[0][0] * self.p[1][1] - self.p[0][1] * self.p[1][0];
        self.p[0][0] > 0.0 && det > 0.0
    }

    /// Hessian of the power with respect to `(v, a)`, i.e. `2P`.
    pub fn hessian(&self) -> [[f64; 2]; 2] {
        [[2.0 * self.p[0][0], 2.0 * self.p[0][1]], [2.0 * self.p[1][0], 2.0 * self.p[1][1]]]
    }

    /// Speed minimising steady-state (zero acceleration) power.
    pub fn cruise_minimizer(&self) -> f64 {
        -self.q[0] / (2.0 * self.p[0][0])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            p: [[c * self.p[0][0], c * self.p[0][1]], [c * self.p[1][0], c * self.p[1][1]]],
            q: [c * self.q[0], c * self.q[1]],
            r: c * self.r,
        }
    }

    /// The shipped default: the calibration of [`PowertrainModel::default`]
    /// over the standard speed/acceleration grid.
    pub fn default_fit() -> EnergyParams {
        static DEFAULT: OnceLock<EnergyParams> = OnceLock::new();
        *DEFAULT.get_or_init(|| {
            fit_energy_model(&oracle_grid_samples(&PowertrainModel::default()))
                .expect("default calibration grid is full rank")
        })
    }
}

impl PowerModel for EnergyParams {
    fn power(&self, v: f64, a: f64) -> f64 {
        energy_rate(self, v, a)
    }
}

/// Battery power (W) at velocity `v` and acceleration `a`.
pub fn energy_rate(params: &EnergyParams, v: f64, a: f64) -> f64 {
    let p = &params.p;
    v * (p[0][0] * v + p[0][1] * a) + a * (p[1][0] * v + p[1][1] * a) + params.q[0] * v + params.q[1] * a + params.r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySample {
    pub v: f64,
    pub a: f64,
    pub power: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResiduals {
    /// `sum |error| / sum |power|`.
    pub mean_abs_rel_error: f64,
    pub max_abs_error: f64,
    pub rms_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: EnergyParams,
    /// True when the unconstrained `P` was not positive definite and had to
    /// be projected.
    pub projected: bool,
    pub residuals: FitResiduals,
}

pub fn fit_energy_model(samples: &[EnergySample]) -> Result<EnergyParams> {
    fit_energy_model_with_report(samples).map(|report| report.params)
}

/// Least-squares fit of `(P, q, r)`. A non-PD `P` is projected onto the PD
/// cone (eigenvalues floored at [`EIGEN_FLOOR`]) and `q, r` are refitted with
/// `P` frozen.
pub fn fit_energy_model_with_report(samples: &[EnergySample]) -> Result<FitReport> {
    check_sample_coverage(samples)?;

    let n = samples.len();
    let x = DMatrix::from_fn(n, 6, |i, j| {
        let EnergySample { v, a, .. } = samples[i];
        match j {
            0 => v * v,
            1 => 2.0 * v * a,
            2 => a * a,
            3 => v,
            4 => a,
            _ => 1.0,
        }
    });
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.power));
    let coef = least_squares(x, &y)?;

    let p = Matrix2::new(coef[0], coef[1], coef[1], coef[2]);
    let mut params = EnergyParams { p: to_array(&p), q: [coef[3], coef[4]], r: coef[5] };
    let mut projected = false;

    if !params.is_positive_definite() {
        projected = true;
        let eig = p.symmetric_eigen();
        let clipped = eig.eigenvalues.map(|l| l.max(EIGEN_FLOOR));
        let p_pd = eig.eigenvectors * Matrix2::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let mut p_arr = to_array(&p_pd);
        let off = 0.5 * (p_arr[0][1] + p_arr[1][0]);
        p_arr[0][1] = off;
        p_arr[1][0] = off;
        let frozen = EnergyParams { p: p_arr, q: [0.0, 0.0], r: 0.0 };

        let x_lin = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => samples[i].v,
            1 => samples[i].a,
            _ => 1.0,
        });
        let y_lin = DVector::from_iterator(n, samples.iter().map(|s| s.power - energy_rate(&frozen, s.v, s.a)));
        let lin = least_squares(x_lin, &y_lin)?;
        params = EnergyParams { p: p_arr, q: [lin[0], lin[1]], r: lin[2] };
    }
    params.validate()?;

    Ok(FitReport { params, projected, residuals: fit_residuals(&params, samples) })
}

pub fn fit_residuals(params: &EnergyParams, samples: &[EnergySample]) -> FitResiduals {
    let mut abs_err = 0.0;
    let mut abs_pow = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut sq = 0.0;
    for s in samples {
        let e = energy_rate(params, s.v, s.a) - s.power;
        abs_err += e.abs();
        abs_pow += s.power.abs();
        max_abs = max_abs.max(e.abs());
        sq += e * e;
    }
    let n = samples.len().max(1) as f64;
    FitResiduals {
        mean_abs_rel_error: if abs_pow > 0.0 { abs_err / abs_pow } else { abs_err },
        max_abs_error: max_abs,
        rms_error: (sq / n).sqrt(),
    }
}

fn check_sample_coverage(samples: &[EnergySample]) -> Result<()> {
    if samples.iter().any(|s| !(s.v.is_finite() && s.a.is_finite() && s.power.is_finite())) {
        return Err(Error::Calibration("samples must be finite".into()));
    }
    if samples.len() < 6 {
        return Err(Error::Calibration(format!("need at least 6 samples, got {}", samples.len())));
    }
    let distinct = |f: fn(&EnergySample) -> f64| {
        let mut vals: Vec<f64> = samples.iter().map(f).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        vals.len()
    };
    let (nv, na) = (distinct(|s| s.v), distinct(|s| s.a));
    if nv < 3 || na < 3 {
        return Err(Error::Calibration(format!(
            "samples span {nv} distinct speeds and {na} distinct accelerations; need at least 3 of each"
        )));
    }
    Ok(())
}

fn least_squares(x: DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    // Equilibrate columns so the rank test is scale free.
    let scales: Vec<f64> = x.column_iter().map(|c| c.amax().max(f64::MIN_POSITIVE)).collect();
    let mut xs = x;
    for (j, s) in scales.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = xs.svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(max_sv > 0.0) || min_sv / max_sv < 1e-10 {
        return Err(Error::Calibration("sample set is rank deficient".into()));
    }
    let coef = svd.solve(y, 0.0).map_err(|e| Error::Calibration(e.to_string()))?;
    Ok(DVector::from_iterator(coef.len(), coef.iter().zip(&scales).map(|(c, s)| c / s)))
}

fn to_array(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Energy (Wh) of a trajectory of `(v, a)` samples held for `dt` seconds each.
pub fn trajectory_energy<M: PowerModel + ?Sized>(model: &M, traj: &[(f64, f64)], dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    traj.iter().fold(0.0, |acc, &(v, a)| acc + model.power(v, a) * dt / 3600.0)
}

/// Road-load battery model of a mid-size BEV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowertrainModel {
    /// kg
    pub mass: f64,
    /// kg/m^3
    pub air_density: f64,
    /// Drag area (m^2).
    pub cda: f64,
    pub rolling_resistance: f64,
    pub gravity: f64,
    pub drive_efficiency: f64,
    pub regen_efficiency: f64,
}

impl Default for PowertrainModel {
    fn default() -> Self {
        Self {
            mass: 2100.0,
            air_density: 1.2,
            cda: 0.75,
            rolling_resistance: 0.01,
            gravity: 9.81,
            drive_efficiency: 0.9,
            regen_efficiency: 0.7,
        }
    }
}

impl PowertrainModel {
    pub fn mechanical_power(&self, v: f64, a: f64) -> f64 {
        self.mass * a * v
            + 0.5 * self.air_density * self.cda * v * v * v
            + self.rolling_resistance * self.mass * self.gravity * v
    }
}

impl PowerModel for PowertrainModel {
    fn power(&self, v: f64, a: f64) -> f64 {
        let mech = self.mechanical_power(v, a);
        if mech >= 0.0 {
            mech / self.drive_efficiency
        } else {
            mech * self.regen_efficiency
        }
    }
}

/// Samples of `model` on the grid v in {0..11} m/s, a in {-4..2} m/s^2.
pub fn oracle_grid_samples<M: PowerModel>(model: &M) -> Vec<EnergySample> {
    let mut out = Vec::with_capacity(12 * 7);
    for vi in 0..=11 {
        for ai in -4..=2 {
            let (v, a) = (vi as f64, ai as f64);
            out.push(EnergySample { v, a, power: model.power(v, a) });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn known() -> EnergyParams {
        EnergyParams::new([[30.0, 12.0], [12.0, 400.0]], [250.0, 1800.0], 900.0).unwrap()
    }

    fn exact_samples(params: &EnergyParams) -> Vec<EnergySample> {
        let mut out = Vec::new();
        for vi in 0..8 {
            for ai in -3..3 {
                let (v, a) = (vi as f64 * 1.5, ai as f64 * 0.7);
                out.push(EnergySample { v, a, power: energy_rate(params, v, a) });
            }
        }
        out
    }

    #[test]
    fn rate_at_origin_is_offset() {
        let p = known();
        assert_eq!(energy_rate(&p, 0.0, 0.0), p.r);
    }

    #[test]
    fn even_function_without_linear_term() {
        let p = EnergyParams::new([[3.0, 0.0], [0.0, 5.0]], [0.0, 0.0], 7.0).unwrap();
        for (v, a) in [(1.0, 2.0), (3.5, -1.0), (0.2, 0.0)] {
            assert_eq!(energy_rate(&p, v, a), energy_rate(&p, -v, -a));
        }
    }

    #[test]
    fn exact_quadratic_is_recovered() {
        let truth = known();
        let report = fit_energy_model_with_report(&exact_samples(&truth)).unwrap();
        assert!(!report.projected);
        let fit = report.params;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!(rel(fit.p[i][j], truth.p[i][j]) <= 1e-6);
            }
            assert!(rel(fit.q[i], truth.q[i]) <= 1e-6);
        }
        assert!(rel(fit.r, truth.r) <= 1e-6);
        assert!(report.residuals.mean_abs_rel_error <= 1e-6);
    }

    #[test]
    fn collinear_samples_rejected() {
        let samples: Vec<EnergySample> =
            (0..5).map(|i| EnergySample { v: i as f64, a: i as f64, power: 100.0 * i as f64 }).collect();
        assert!(matches!(fit_energy_model(&samples), Err(Error::Calibration(_))));

        // Enough rows but every sample on the line a = v.
        let samples: Vec<EnergySample> =
            (0..12).map(|i| EnergySample { v: i as f64, a: i as f64, power: 3.0 * i as f64 }).collect();
        assert!(matches!(fit_energy_model(&samples), Err(Error::Calibration(_))));
    }

    #[test]
    fn too_few_distinct_values_rejected() {
        let samples: Vec<EnergySample> = (0..10)
            .map(|i| EnergySample { v: (i % 2) as f64, a: i as f64, power: i as f64 })
            .collect();
        assert!(fit_energy_model(&samples).is_err());
    }

    #[test]
    fn default_fit_is_projected_and_pd() {
        let report = fit_energy_model_with_report(&oracle_grid_samples(&PowertrainModel::default())).unwrap();
        assert!(report.projected);
        assert!(report.params.is_positive_definite());
        assert_eq!(report.params, EnergyParams::default_fit());
    }

    #[test]
    fn steady_state_power_matches_oracle_within_fit_residual() {
        let oracle = PowertrainModel::default();
        let samples = oracle_grid_samples(&oracle);
        let report = fit_energy_model_with_report(&samples).unwrap();
        let err = (energy_rate(&report.params, 10.0, 0.0) - oracle.power(10.0, 0.0)).abs();
        assert!(err <= report.residuals.max_abs_error);
    }

    #[test]
    fn constant_trajectory_energy() {
        let p = known();
        assert_eq!(trajectory_energy(&p, &[], 0.5), 0.0);
        let traj = vec![(10.0, 0.0); 10];
        let e = trajectory_energy(&p, &traj, 0.5);
        assert!((e - 5.0 * energy_rate(&p, 10.0, 0.0) / 3600.0).abs() < 1e-12);
    }

    #[test]
    fn sawtooth_matches_hand_sum() {
        let oracle = PowertrainModel::default();
        let dt = 0.5;
        let mut traj = Vec::new();
        let mut v: f64 = 0.0;
        for k in 0..40 {
            let a = if (k / 5) % 2 == 0 { 1.5 } else { -1.5 };
            traj.push((v, a));
            v = (v + a * dt).max(0.0);
        }
        let mut hand = 0.0;
        for &(v, a) in &traj {
            let mech = 2100.0 * a * v + 0.5 * 1.2 * 0.75 * v.powi(3) + 0.01 * 2100.0 * 9.81 * v;
            let batt = if mech >= 0.0 { mech / 0.9 } else { mech * 0.7 };
            hand += batt * dt;
        }
        let e = trajectory_energy(&oracle, &traj, dt);
        assert!((e - hand / 3600.0).abs() <= 1e-12 * hand.abs().max(1.0));
    }

    fn arb_params() -> impl Strategy<Value = EnergyParams> {
        (1.0f64..500.0, -0.9f64..0.9, 1.0f64..500.0, -1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3).prop_map(
            |(p11, corr, p22, q1, q2, r)| {
                let off = corr * (p11 * p22).sqrt();
                EnergyParams::new([[p11, off], [off, p22]], [q1, q2], r).unwrap()
            },
        )
    }

    proptest! {
        #[test]
        fn hessian_is_2p_and_pd(params in arb_params(), v in -20.0f64..20.0, a in -5.0f64..5.0) {
            let h = 1e-3;
            let f = |v: f64, a: f64| energy_rate(&params, v, a);
            let hvv = (f(v + h, a) - 2.0 * f(v, a) + f(v - h, a)) / (h * h);
            let haa = (f(v, a + h) - 2.0 * f(v, a) + f(v, a - h)) / (h * h);
            let hva = (f(v + h, a + h) - f(v + h, a - h) - f(v - h, a + h) + f(v - h, a - h)) / (4.0 * h * h);
            let hess = params.hessian();
            let tol = 1e-3 * (1.0 + hess[0][0].abs() + hess[1][1].abs());
            prop_assert!((hvv - hess[0][0]).abs() < tol);
            prop_assert!((haa - hess[1][1]).abs() < tol);
            prop_assert!((hva - hess[0][1]).abs() < tol);
            let tr = hess[0][0] + hess[1][1];
            let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
            prop_assert!(det > 0.0 && tr > 0.0);
        }

        #[test]
        fn fit_is_scale_consistent(params in arb_params(), c in 0.1f64..50.0) {
            let samples = exact_samples(&params);
            let scaled: Vec<EnergySample> =
                samples.iter().map(|s| EnergySample { power: c * s.power, ..*s }).collect();
            let a = fit_energy_model(&samples).unwrap().scaled(c);
            let b = fit_energy_model(&scaled).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * (1.0 + x.abs().max(y.abs()));
            prop_assert!(close(a.p[0][0], b.p[0][0]) && close(a.p[0][1], b.p[0][1]) && close(a.p[1][1], b.p[1][1]));
            prop_assert!(close(a.q[0], b.q[0]) && close(a.q[1], b.q[1]) && close(a.r, b.r));
        }

        #[test]
        fn trajectory_energy_is_additive(
            first in proptest::collection::vec((0.0f64..12.0, -4.0f64..2.0), 0..30),
            second in proptest::collection::vec((0.0f64..12.0, -4.0f64..2.0), 0..30),
        ) {
            let model = PowertrainModel::default();
            let mut joined = first.clone();
            joined.extend_from_slice(&second);
            let whole = trajectory_energy(&model, &joined, 0.1);
            let parts = trajectory_energy(&model, &first, 0.1) + trajectory_energy(&model, &second, 0.1);
            prop_assert!((whole - parts).abs() <= 1e-9 * (1.0 + whole.abs()));
        }
    }
}
