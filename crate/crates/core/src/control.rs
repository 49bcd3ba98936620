//! Plant dynamics, LQR synthesis, the controller's open-loop estimator and
//! LQG cost accounting.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::Step;

/// Iteration cap for the Riccati fixed point.
pub const RICCATI_MAX_ITER: usize = 1_000_000;
/// Convergence tolerance on the largest elementwise change of `P`.
pub const RICCATI_TOL: f64 = 1e-12;
/// Default number of applied inputs the controller retains.
pub const DEFAULT_INPUT_WINDOW: usize = 1024;

/// Number of samples in one cost window.
pub const COST_WINDOW_LEN: usize = 1001;
/// Number of cost windows recorded per run.
pub const COST_WINDOWS: usize = 5;

/// Constants of one control loop.
///
/// `p` and `k` are derived by [`solve_lqr`] at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    p: DMatrix<f64>,
    k: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    period_ms: f64,
}

impl LoopModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        sigma: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        period_ms: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        let m = b.ncols();
        if b.nrows() != n || m == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm, got {}x{}", b.nrows(), b.ncols())));
        }
        if sigma.shape() != (n, n) || q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Sigma and Q must be {n}x{n}")));
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R must be {m}x{m}")));
        }
        if !(period_ms.is_finite() && period_ms > 0.0) {
            return Err(Error::InvalidModel(format!("sampling period must be positive, got {period_ms}")));
        }
        check_psd("Sigma", &sigma)?;
        check_psd("Q", &q)?;
        check_symmetric("R", &r)?;
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidModel("R must be positive definite".into()));
        }

        let (p, k) = solve_lqr(&a, &b, &q, &r)?;
        let noise_factor = psd_factor(&sigma);
        Ok(Self { a, b, sigma, q, r, p, k, noise_factor, period_ms })
    }

    /// Scalar loop, `n = m = 1`.
    pub fn scalar(a: f64, b: f64, sigma: f64, q: f64, r: f64, period_ms: f64) -> Result<Self> {
        let s = |v| DMatrix::from_element(1, 1, v);
        Self::new(s(a), s(b), s(sigma), s(q), s(r), period_ms)
    }

    /// The reference loop: A=1.2, B=1, Sigma=1, Q=R=1, T=10 ms.
    pub fn reference() -> Self {
        Self::scalar(1.2, 1.0, 1.0, 1.0, 1.0, 10.0).expect("reference loop is stabilizable")
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    /// Stabilizing Riccati solution.
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Feedback gain, `u = -K x_hat`.
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn period_ms(&self) -> f64 {
        self.period_ms
    }

    /// Optimal average cost with perfect, instantaneous state information: `tr(P Sigma)`.
    pub fn optimal_cost(&self) -> f64 {
        (&self.p * &self.sigma).trace()
    }

    /// `A - B K`.
    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a - &self.b * &self.k
    }

    /// Largest elementwise residual of the Riccati fixed point at `P`.
    pub fn riccati_residual(&self) -> f64 {
        riccati_map(&self.a, &self.b, &self.q, &self.r, &self.p)
            .map(|next| (next - &self.p).amax())
            .unwrap_or(f64::INFINITY)
    }

    /// Draw one disturbance vector `w ~ N(0, Sigma)`.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim());
        self.sample_noise_into(rng, out.as_mut_slice());
        out
    }

    pub fn sample_noise_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let n = self.state_dim();
        debug_assert_eq!(out.len(), n);
        if n == 1 {
            let z: f64 = rng.sample(StandardNormal);
            out[0] = self.noise_factor[(0, 0)] * z;
            return;
        }
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        out.fill(0.0);
        matvec_acc(&self.noise_factor, &z, out);
    }

    /// `out = A x + B u` on raw slices.
    #[inline]
    pub(crate) fn propagate_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        matvec_acc(&self.a, x, out);
        matvec_acc(&self.b, u, out);
    }

    /// `out = -K x` on raw slices.
    #[inline]
    pub(crate) fn feedback_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        matvec_acc(&self.k, x, out);
        for v in out.iter_mut() {
            *v = -*v;
        }
    }
}

/// `out += m x` for a column-major matrix.
#[inline]
pub(crate) fn matvec_acc(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = &data[j * rows..(j + 1) * rows];
        for (o, &c) in out.iter_mut().zip(col) {
            *o += c * xj;
        }
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    let tol = 1e-9 * (1.0 + m.amax());
    if (m - m.transpose()).amax() > tol {
        return Err(Error::InvalidModel(format!("{name} must be symmetric")));
    }
    Ok(())
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(name, m)?;
    let tol = 1e-9 * (1.0 + m.amax());
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig < -tol {
        return Err(Error::InvalidModel(format!("{name} must be positive semidefinite (eigenvalue {min_eig})")));
    }
    Ok(())
}

/// Factor `L` with `L Lᵀ = S` for a symmetric PSD matrix.
fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = s.clone().cholesky() {
        return chol.l();
    }
    let eig = s.clone().symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

/// One application of `P -> Q + AᵀPA - AᵀPB (R + BᵀPB)⁻¹ BᵀPA`.
fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let s_inv = s.try_inverse().ok_or(Error::Singular("R + BᵀPB"))?;
    let next = q + a.transpose() * &pa - a.transpose() * &pb * s_inv * (b.transpose() * &pa);
    Ok((&next + next.transpose()) * 0.5)
}

/// Solve the discrete algebraic Riccati equation by fixed-point iteration
/// from `P = Q` and return `(P, K)` with `K = (R + BᵀPB)⁻¹ BᵀPA`.
pub fn solve_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }

    let mut p = q.clone();
    let mut change = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        let next = riccati_map(a, b, q, r, &p)?;
        change = (&next - &p).amax();
        p = next;
        if !change.is_finite() || !p.iter().all(|v| v.is_finite()) {
            break;
        }
        if change < RICCATI_TOL {
            let s = r + b.transpose() * &p * b;
            let s_inv = s.try_inverse().ok_or(Error::Singular("R + BᵀPB"))?;
            let k = s_inv * b.transpose() * &p * a;
            let rho = spectral_radius(&(a - b * &k));
            if rho >= 1.0 {
                return Err(Error::Unstable(rho));
            }
            return Ok((p, k));
        }
    }
    Err(Error::Synthesis { iterations: RICCATI_MAX_ITER, last_change: change })
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// `x' = A x + B u + w`.
pub fn step_plant(x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>, model: &LoopModel) -> Result<DVector<f64>> {
    let n = model.state_dim();
    if x.len() != n || w.len() != n || u.len() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "x {}, u {}, w {} for a {}-state {}-input loop",
            x.len(),
            u.len(),
            w.len(),
            n,
            model.input_dim()
        )));
    }
    Ok(model.a() * x + model.b() * u + w)
}

/// `u = -K x_hat`.
pub fn control_input(x_hat: &DVector<f64>, gain: &DMatrix<f64>) -> DVector<f64> {
    -(gain * x_hat)
}

/// A measurement of the state generated at `gen_step` and made available to
/// the controller at `recv_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub gen_step: Step,
    pub recv_step: Step,
    pub measurement: DVector<f64>,
}

impl Observation {
    pub fn new(gen_step: Step, recv_step: Step, measurement: DVector<f64>) -> Result<Self> {
        if recv_step < gen_step {
            return Err(Error::Dimension(format!("reception step {recv_step} precedes generation step {gen_step}")));
        }
        Ok(Self { gen_step, recv_step, measurement })
    }
}

/// Observations known to a controller, ordered by reception step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationHistory {
    entries: Vec<Observation>,
}

impl ObservationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = Observation>) -> Self {
        let mut h = Self::new();
        for e in entries {
            h.push(e);
        }
        h
    }

    /// Insert keeping entries sorted by `(recv_step, gen_step)`.
    pub fn push(&mut self, obs: Observation) {
        let key = (obs.recv_step, obs.gen_step);
        let at = self.entries.partition_point(|e| (e.recv_step, e.gen_step) <= key);
        self.entries.insert(at, obs);
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Freshest observation usable at step `k`: largest generation step among
    /// those received no later than `k`.
    pub fn freshest_at(&self, k: Step) -> Option<&Observation> {
        let upto = self.entries.partition_point(|e| e.recv_step <= k);
        self.entries[..upto].iter().max_by_key(|e| e.gen_step)
    }

    /// Age of information `k - nu(k)`, if anything has been received.
    pub fn aoi(&self, k: Step) -> Option<Step> {
        self.freshest_at(k).map(|e| k - e.gen_step)
    }
}

/// Applied inputs over a bounded window of consecutive steps.
#[derive(Debug, Clone)]
struct InputLog {
    first: Step,
    values: VecDeque<DVector<f64>>,
    capacity: usize,
}

impl InputLog {
    fn new(capacity: usize) -> Self {
        Self { first: 0, values: VecDeque::with_capacity(capacity.min(4096)), capacity: capacity.max(1) }
    }

    fn push(&mut self, u: DVector<f64>) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
            self.first += 1;
        }
        self.values.push_back(u);
    }

    fn get(&self, step: Step) -> Result<&DVector<f64>> {
        if step < self.first {
            return Err(Error::InputWindow { needed: step, oldest: self.first });
        }
        self.values.get((step - self.first) as usize).ok_or(Error::InputWindow { needed: step, oldest: self.first })
    }
}

/// Controller side of one loop: observation history, current estimate and
/// the record of applied inputs.
#[derive(Debug, Clone)]
pub struct ControllerState {
    history: ObservationHistory,
    x_hat: DVector<f64>,
    inputs: InputLog,
    fresh_gen: Option<Step>,
    next_step: Step,
}

impl ControllerState {
    pub fn new(model: &LoopModel) -> Self {
        Self::with_input_window(model, DEFAULT_INPUT_WINDOW)
    }

    pub fn with_input_window(model: &LoopModel, window: usize) -> Self {
        Self {
            history: ObservationHistory::new(),
            x_hat: DVector::zeros(model.state_dim()),
            inputs: InputLog::new(window),
            fresh_gen: None,
            next_step: 0,
        }
    }

    pub fn estimate(&self) -> &DVector<f64> {
        &self.x_hat
    }

    pub fn history(&self) -> &ObservationHistory {
        &self.history
    }

    /// Generation step of the measurement behind the current estimate.
    pub fn fresh_gen(&self) -> Option<Step> {
        self.fresh_gen
    }

    pub fn applied_input(&self, step: Step) -> Result<&DVector<f64>> {
        self.inputs.get(step)
    }

    /// Advance to step `k`, consuming the observations that became available
    /// during it, and return the applied input `u_k`.
    ///
    /// Observations older than the one currently in use are recorded but do
    /// not change the estimate.
    pub fn tick(&mut self, model: &LoopModel, k: Step, arrivals: &[Observation]) -> Result<DVector<f64>> {
        if k != self.next_step {
            return Err(Error::TickOrder { expected: self.next_step, got: k });
        }
        let fresher = arrivals
            .iter()
            .filter(|o| o.gen_step <= k && self.fresh_gen.is_none_or(|g| o.gen_step > g))
            .max_by_key(|o| o.gen_step);

        if let Some(obs) = fresher {
            // Open-loop prediction from the measurement using the inputs applied since it was taken.
            let mut z = obs.measurement.clone();
            for j in obs.gen_step..k {
                z = model.a() * z + model.b() * self.inputs.get(j)?;
            }
            self.x_hat = z;
            self.fresh_gen = Some(obs.gen_step);
        } else if k > 0 {
            let u_prev = self.inputs.get(k - 1)?;
            self.x_hat = model.a() * &self.x_hat + model.b() * u_prev;
        }
        for obs in arrivals {
            self.history.push(obs.clone());
        }

        let u = control_input(&self.x_hat, model.gain());
        self.inputs.push(u.clone());
        self.next_step = k + 1;
        Ok(u)
    }
}

/// Stage cost `xᵀQx + uᵀRu`.
pub fn stage_cost(x: &DVector<f64>, u: &DVector<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    (x.transpose() * q * x)[(0, 0)] + (u.transpose() * r * u)[(0, 0)]
}

/// First and last (inclusive) step of cost window `q`.
pub fn cost_window_bounds(q: usize) -> (usize, usize) {
    (1000 * (2 + q), 1000 * (3 + q))
}

/// Mean stage cost over window `q` (1001 samples starting at step `1000(2+q)`).
pub fn lqg_window_cost(
    x_traj: &[DVector<f64>],
    u_traj: &[DVector<f64>],
    q_weight: &DMatrix<f64>,
    r_weight: &DMatrix<f64>,
    q: usize,
) -> Result<f64> {
    if q >= COST_WINDOWS {
        return Err(Error::WindowIndex(q));
    }
    let (start, end) = cost_window_bounds(q);
    let have = x_traj.len().min(u_traj.len());
    if have <= end {
        return Err(Error::TrajectoryTooShort { needed: end + 1, have });
    }
    let total: f64 = (start..=end).map(|k| stage_cost(&x_traj[k], &u_traj[k], q_weight, r_weight)).sum();
    Ok(total / COST_WINDOW_LEN as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    /// Positive root of `P² - (A² - 1 + ...)`: for Q=R=B=1 the scalar DARE
    /// reduces to `P² - A² P - 1 = 0`.
    fn scalar_dare_root(a: f64) -> (f64, f64) {
        let a2 = a * a;
        let p = (a2 + (a2 * a2 + 4.0).sqrt()) / 2.0;
        (p, p * a / (1.0 + p))
    }

    #[test]
    fn lqr_matches_scalar_quadratic() {
        for &a in &[1.2, 0.5, 0.0, 2.0] {
            let m = LoopModel::scalar(a, 1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
            let (p, k) = scalar_dare_root(a);
            assert!((m.p()[(0, 0)] - p).abs() < 1e-10, "a={a}");
            assert!((m.gain()[(0, 0)] - k).abs() < 1e-10, "a={a}");
            assert!(m.riccati_residual() < 1e-10);
        }
    }

    #[test]
    fn lqr_reference_values() {
        let m = LoopModel::reference();
        assert!((m.p()[(0, 0)] - 1.952234).abs() < 1e-6);
        assert!((m.gain()[(0, 0)] - 0.793528).abs() < 1e-6);
        let m = LoopModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        assert!((m.p()[(0, 0)] - 1.132783).abs() < 1e-6);
        assert!((m.gain()[(0, 0)] - 0.265564).abs() < 1e-6);
        let m = LoopModel::scalar(0.0, 1.0, 1.0, 1.0, 1.0, 10.0).unwrap();
        assert_eq!(m.p()[(0, 0)], 1.0);
        assert_eq!(m.gain()[(0, 0)], 0.0);
    }

    #[test]
    fn lqr_two_state_is_stabilizing() {
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, 0.0, 0.9]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let m = LoopModel::new(a, b, DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(1, 1), 10.0)
            .unwrap();
        assert!(m.riccati_residual() < 1e-10);
        assert!(spectral_radius(&m.closed_loop()) < 1.0);
    }

    #[test]
    fn lqr_rejects_unstabilizable() {
        // Unstable mode that the input cannot reach.
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let err = solve_lqr(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Synthesis { .. } | Error::Unstable(_)), "{err:?}");
    }

    #[test]
    fn lqr_singular_input_weight() {
        let z = DMatrix::zeros(1, 1);
        let err = solve_lqr(&DMatrix::from_element(1, 1, 1.2), &z, &z, &z).unwrap_err();
        assert_eq!(err, Error::Singular("R + BᵀPB"));
    }

    #[test]
    fn model_validation() {
        assert!(LoopModel::scalar(1.2, 1.0, -1.0, 1.0, 1.0, 10.0).is_err());
        assert!(LoopModel::scalar(1.2, 1.0, 1.0, 1.0, 0.0, 10.0).is_err());
        assert!(LoopModel::scalar(1.2, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn plant_and_input_examples() {
        let m = LoopModel::reference();
        let k = m.gain()[(0, 0)];
        assert_eq!(step_plant(&v(1.0), &v(0.0), &v(0.0), &m).unwrap()[0], 1.2);
        assert_eq!(step_plant(&v(0.0), &v(0.0), &v(0.5), &m).unwrap()[0], 0.5);
        let x1 = step_plant(&v(1.0), &v(-k), &v(0.0), &m).unwrap()[0];
        assert!((x1 - 0.406472).abs() < 1e-6);

        assert_eq!(control_input(&v(0.0), m.gain())[0], 0.0);
        assert!((control_input(&v(1.0), m.gain())[0] + 0.793528).abs() < 1e-6);
        assert!((control_input(&v(-2.0), m.gain())[0] - 1.587056).abs() < 1e-6);

        let bad = DVector::zeros(2);
        assert!(matches!(step_plant(&bad, &v(0.0), &v(0.0), &m), Err(Error::Dimension(_))));
    }

    #[test]
    fn history_freshest_rule() {
        let mut h = ObservationHistory::new();
        h.push(Observation::new(5, 9, v(5.0)).unwrap());
        h.push(Observation::new(3, 4, v(3.0)).unwrap());
        h.push(Observation::new(4, 10, v(4.0)).unwrap());
        assert!(h.freshest_at(3).is_none());
        assert_eq!(h.freshest_at(4).unwrap().gen_step, 3);
        assert_eq!(h.freshest_at(9).unwrap().gen_step, 5);
        // A stale arrival never takes over.
        assert_eq!(h.freshest_at(12).unwrap().gen_step, 5);
        assert_eq!(h.aoi(12), Some(7));
        assert!(Observation::new(5, 4, v(0.0)).is_err());
    }

    #[test]
    fn controller_tick_examples() {
        let m = LoopModel::reference();
        let k = m.gain()[(0, 0)];

        // Delivered at its own generation step: estimate equals the measurement.
        let mut c = ControllerState::new(&m);
        c.tick(&m, 0, &[Observation::new(0, 0, v(1.0)).unwrap()]).unwrap();
        assert_eq!(c.estimate()[0], 1.0);
        assert_eq!(c.history().aoi(0), Some(0));

        // One propagation step with the recorded input.
        let u1 = c.tick(&m, 1, &[]).unwrap();
        assert!((c.estimate()[0] - 0.406472).abs() < 1e-6);
        assert!((u1[0] + k * 0.406472).abs() < 1e-6);

        // A stale arrival leaves the estimate on its propagation path.
        let mut stale = c.clone();
        let mut fresh = c.clone();
        stale.tick(&m, 2, &[Observation::new(0, 2, v(100.0)).unwrap()]).unwrap();
        fresh.tick(&m, 2, &[]).unwrap();
        assert_eq!(stale.estimate(), fresh.estimate());
        assert_eq!(stale.fresh_gen(), Some(0));

        assert!(matches!(c.tick(&m, 5, &[]), Err(Error::TickOrder { .. })));
    }

    /// `A^(k-ν) x_ν + Σ A^(k-1-t) B u_t` with explicit matrix powers.
    fn closed_form_estimate(
        m: &LoopModel,
        x_nu: &DVector<f64>,
        inputs: &[DVector<f64>],
        nu: usize,
        k: usize,
    ) -> DVector<f64> {
        let delta = k - nu;
        let mut est = m.a().pow(delta as u32) * x_nu;
        for q in 1..=delta {
            est += m.a().pow((q - 1) as u32) * m.b() * &inputs[k - q];
        }
        est
    }

    #[test]
    fn reset_matches_closed_form_and_error_identity() {
        use rand::SeedableRng;
        let m = LoopModel::reference();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut c = ControllerState::new(&m);
        let mut x = v(0.3);
        let mut xs = vec![x.clone()];
        let mut us = Vec::new();
        let mut ws = Vec::new();
        // Deliver x_0 at step 0, then nothing until x_4 arrives at step 9.
        for k in 0..12usize {
            let arrivals = match k {
                0 => vec![Observation::new(0, 0, xs[0].clone()).unwrap()],
                9 => vec![Observation::new(4, 9, xs[4].clone()).unwrap()],
                _ => vec![],
            };
            let u = c.tick(&m, k as Step, &arrivals).unwrap();
            if k == 9 {
                let expect = closed_form_estimate(&m, &xs[4], &us, 4, 9);
                assert!((c.estimate() - &expect).amax() < 1e-12);
                // x_k - x_hat_k = sum_{q=1}^{Δ} A^{q-1} w_{k-q}
                let mut err = DVector::zeros(1);
                for q in 1..=5usize {
                    err += m.a().pow((q - 1) as u32) * &ws[9 - q];
                }
                assert!(((&xs[9] - c.estimate()) - err).amax() < 1e-9);
            }
            us.push(u.clone());
            let w = m.sample_noise(&mut rng);
            x = step_plant(&x, &u, &w, &m).unwrap();
            ws.push(w);
            xs.push(x.clone());
        }
    }

    #[test]
    fn input_window_overflow_is_an_error() {
        let m = LoopModel::reference();
        let mut c = ControllerState::with_input_window(&m, 4);
        for k in 0..10 {
            c.tick(&m, k, &[]).unwrap();
        }
        let err = c.tick(&m, 10, &[Observation::new(2, 10, v(1.0)).unwrap()]).unwrap_err();
        assert!(matches!(err, Error::InputWindow { needed: 2, .. }));
    }

    #[test]
    fn window_cost() {
        let m = LoopModel::reference();
        let n = 7001;
        let zeros = vec![v(0.0); n];
        let ones = vec![v(1.0); n];
        for q in 0..COST_WINDOWS {
            assert_eq!(lqg_window_cost(&zeros, &zeros, m.q(), m.r(), q).unwrap(), 0.0);
            assert!((lqg_window_cost(&ones, &zeros, m.q(), m.r(), q).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(
            lqg_window_cost(&ones[..7000], &zeros, m.q(), m.r(), 4),
            Err(Error::TrajectoryTooShort { needed: 7001, .. })
        ));
        assert_eq!(lqg_window_cost(&ones, &zeros, m.q(), m.r(), 5), Err(Error::WindowIndex(5)));
        // Only the window's own samples count.
        let mut spike = zeros.clone();
        spike[1999] = v(10.0);
        spike[3001] = v(10.0);
        assert_eq!(lqg_window_cost(&spike, &zeros, m.q(), m.r(), 0).unwrap(), 0.0);
    }

    #[test]
    fn ideal_loop_cost_close_to_optimum() {
        use rand::SeedableRng;
        let m = LoopModel::reference();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut x = v(0.0);
        let (mut xs, mut us) = (Vec::new(), Vec::new());
        for _ in 0..7001 {
            let u = control_input(&x, m.gain());
            xs.push(x.clone());
            us.push(u.clone());
            x = step_plant(&x, &u, &m.sample_noise(&mut rng), &m).unwrap();
        }
        let mean: f64 = (0..5).map(|q| lqg_window_cost(&xs, &us, m.q(), m.r(), q).unwrap()).sum::<f64>() / 5.0;
        // Steady-state variance 1/(1-a²) times (Q + K² R).
        let k = m.gain()[(0, 0)];
        let a = 1.2 - k;
        let analytic = (1.0 + k * k) / (1.0 - a * a);
        assert!((analytic - m.optimal_cost()).abs() < 1e-9);
        assert!((mean - analytic).abs() / analytic < 0.1, "mean {mean}");
    }
}
