//! Energy-efficient receding-horizon control: minimize the sum of squared
//! flows subject to a comfort band, with soft input bounds relaxed by a
//! ρ‖ε‖₂-penalized slack. Runs against the data-driven model as a convex QP
//! and against the bilinear RC model via successive linearization.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::datadriven::DataDrivenModel;
use crate::error::{Error, Result};
use crate::optim::{solve_qp, Qp};
use crate::rcnet::{GainsMode, RcModel};
use crate::timeseries::SeasonLabel;

/// Quadratic penalty weight on the state-constraint slack; the comfort band
/// is only softened as a guarded fallback, and activations are reported as
/// violations.
const STATE_SLACK_PENALTY: f64 = 1e6;
/// Tiny ridge on the QP Hessian so temperature-neutral inputs resolve to the
/// minimum-norm solution deterministically.
const TIE_BREAK_REG: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct MpcConfig {
    /// Horizon length in steps.
    pub n: usize,
    pub t_min: f64,
    pub t_max: f64,
    /// Per-channel flow bounds, kg/s.
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    /// Input-slack penalty ρ.
    pub rho: f64,
    pub sl_max_iters: usize,
    pub sl_tol: f64,
}

impl MpcConfig {
    /// Band [20, 22] °C, horizon 3, ρ = 100, uniform flow bounds.
    pub fn uniform(n_channels: usize, u_min: f64, u_max: f64) -> Self {
        MpcConfig {
            n: 3,
            t_min: 20.0,
            t_max: 22.0,
            u_min: DVector::from_element(n_channels, u_min),
            u_max: DVector::from_element(n_channels, u_max),
            rho: 100.0,
            sl_max_iters: 10,
            sl_tol: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.t_min < self.t_max) {
            return Err(Error::Config("t_min must be below t_max".into()));
        }
        if self.rho <= 0.0 {
            return Err(Error::Config("rho must be positive".into()));
        }
        if self.u_min.len() != self.u_max.len() {
            return Err(Error::Shape("u_min/u_max length mismatch".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(a, b)| a > b) {
            return Err(Error::Config("u_min must not exceed u_max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolverStatus {
    Optimal,
    /// Successive linearization hit sl_max_iters without meeting sl_tol.
    LinearizationNotConverged,
}

#[derive(Debug, Clone)]
pub struct MpcStepResult {
    /// First input of the optimal plan (the one applied).
    pub u: DVector<f64>,
    /// Full planned input sequence, N x n_channels.
    pub u_plan: DMatrix<f64>,
    /// Predicted zone temperatures, (N+1) x n_zones, row 0 = current.
    pub predicted: DMatrix<f64>,
    /// Input slack per channel.
    pub eps: DVector<f64>,
    /// Comfort-band slack (0 unless the band itself was unreachable).
    pub state_slack: f64,
    /// ‖u‖² of the applied input.
    pub input_cost: f64,
    /// ρ‖ε‖₂ for this solve.
    pub slack_cost: f64,
    pub status: SolverStatus,
    pub sl_iters: usize,
    pub solve_ms: f64,
}

/// Affine horizon map for the condensed QP: predicted outputs at steps
/// 1..=N as y_j = cst[j-1] + phi[j-1] · vec(u).
struct Condensed {
    cst: Vec<DVector<f64>>,
    phi: Vec<DMatrix<f64>>,
}

/// Solve the condensed problem
///   min Σ‖u(k)‖² + ρ‖ε‖₂ + 10⁶ s²
///   s.t. t_min − s ≤ y_j ≤ t_max + s,  u_min − ε ≤ u(k) ≤ u_max + ε,
///        ε ≥ 0, s ≥ 0.
/// The exact ε-norm penalty is reached by iteratively reweighting its
/// quadratic surrogate.
fn solve_condensed(
    cond: &Condensed,
    nu: usize,
    cfg: &MpcConfig,
) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let horizon = cfg.n;
    let n_u = horizon * nu;
    let dim = n_u + nu + 1; // inputs, input slack, state slack
    let eps_off = n_u;
    let s_off = n_u + nu;

    let n_y = cond.cst[0].len();
    let n_state_rows = 2 * horizon * n_y;
    let n_input_rows = 2 * n_u;
    let mut a_in = DMatrix::zeros(n_state_rows + n_input_rows, dim);
    let mut b_in = DVector::zeros(n_state_rows + n_input_rows);
    let mut row = 0;
    for j in 0..horizon {
        for z in 0..n_y {
            // y ≤ t_max + s
            for c in 0..n_u {
                a_in[(row, c)] = cond.phi[j][(z, c)];
            }
            a_in[(row, s_off)] = -1.0;
            b_in[row] = cfg.t_max - cond.cst[j][z];
            row += 1;
            // y ≥ t_min − s
            for c in 0..n_u {
                a_in[(row, c)] = -cond.phi[j][(z, c)];
            }
            a_in[(row, s_off)] = -1.0;
            b_in[row] = cond.cst[j][z] - cfg.t_min;
            row += 1;
        }
    }
    for k in 0..horizon {
        for c in 0..nu {
            let col = k * nu + c;
            // u ≤ u_max + ε
            a_in[(row, col)] = 1.0;
            a_in[(row, eps_off + c)] = -1.0;
            b_in[row] = cfg.u_max[c];
            row += 1;
            // u ≥ u_min − ε
            a_in[(row, col)] = -1.0;
            a_in[(row, eps_off + c)] = -1.0;
            b_in[row] = -cfg.u_min[c];
            row += 1;
        }
    }

    let mut lo = DVector::from_element(dim, f64::NEG_INFINITY);
    let hi = DVector::from_element(dim, f64::INFINITY);
    for c in 0..nu {
        lo[eps_off + c] = 0.0;
    }
    lo[s_off] = 0.0;

    let solve_with_weight = |w: f64, s_free: bool| -> Result<DVector<f64>> {
        let mut h = DMatrix::zeros(dim, dim);
        for c in 0..n_u {
            h[(c, c)] = 2.0;
        }
        for c in 0..nu {
            h[(eps_off + c, eps_off + c)] = 2.0 * w;
        }
        h[(s_off, s_off)] = 2.0 * STATE_SLACK_PENALTY;
        for c in 0..dim {
            h[(c, c)] += TIE_BREAK_REG;
        }
        let mut hi_s = hi.clone();
        if !s_free {
            hi_s[s_off] = 0.0;
        }
        let qp = Qp {
            a_ineq: a_in.clone(),
            b_ineq: b_in.clone(),
            lo: lo.clone(),
            hi: hi_s,
            ..Qp::new(h, DVector::zeros(dim))
        };
        Ok(solve_qp(&qp, crate::optim::DEFAULT_QP_TOL)?.x)
    };
    // the comfort band is hard unless that is infeasible; the penalized state
    // slack is a guarded fallback only
    let solve_guarded = |w: f64| -> Result<DVector<f64>> {
        match solve_with_weight(w, false) {
            Err(Error::QpInfeasible(_)) => solve_with_weight(w, true),
            other => other,
        }
    };

    // iteratively reweighted surrogate for the exact ρ‖ε‖₂ penalty
    let mut eps_norm_prev = 1e-3;
    let mut z = solve_guarded(cfg.rho / (2.0 * eps_norm_prev))?;
    for _ in 0..25 {
        let eps_norm = z.rows(eps_off, nu).norm();
        if (eps_norm - eps_norm_prev).abs() < 1e-12 {
            break;
        }
        eps_norm_prev = eps_norm;
        z = solve_guarded(cfg.rho / (2.0 * eps_norm.max(1e-8)))?;
    }

    let u_plan = DMatrix::from_fn(horizon, nu, |k, c| z[k * nu + c]);
    let eps = z.rows(eps_off, nu).into_owned().map(|e| e.max(0.0));
    let s = z[s_off].max(0.0);
    Ok((u_plan, eps, s))
}

fn season_gains_a(m: &DataDrivenModel, season: SeasonLabel) -> Result<&DMatrix<f64>> {
    m.gains
        .get(&season)
        .ok_or_else(|| Error::Config(format!("model has no gains profile for {season:?}")))
}

/// One receding-horizon solve against the data-driven difference equation.
/// `v` must supply at least N disturbance rows starting at the current step.
pub fn solve_step_model_a(
    m: &DataDrivenModel,
    x0: &DVector<f64>,
    v: &DMatrix<f64>,
    season: SeasonLabel,
    start_tow: usize,
    cfg: &MpcConfig,
) -> Result<MpcStepResult> {
    cfg.validate()?;
    let n = m.n_zones();
    if x0.len() != n || cfg.u_min.len() != n {
        return Err(Error::Shape("model A MPC dimension mismatch".into()));
    }
    if v.nrows() < cfg.n || v.ncols() != 2 {
        return Err(Error::Shape("disturbance forecast shorter than the horizon".into()));
    }
    let started = Instant::now();
    let gains = season_gains_a(m, season)?;
    let spw = gains.nrows();

    // condense: x(j) = cst + phi · vec(u)
    let horizon = cfg.n;
    let n_u = horizon * n;
    let mut cst = Vec::with_capacity(horizon);
    let mut phi = Vec::with_capacity(horizon);
    let mut c_prev = x0.clone();
    let mut p_prev = DMatrix::<f64>::zeros(n, n_u);
    for j in 0..horizon {
        let q = gains.row((start_tow + j) % spw).transpose();
        let vj = DVector::from_column_slice(&[v[(j, 0)], v[(j, 1)]]);
        let mut c_next = &m.a * &c_prev + &m.c * vj + q;
        let _ = &mut c_next;
        let mut p_next = &m.a * &p_prev;
        for z in 0..n {
            p_next[(z, j * n + z)] += m.b[z];
        }
        cst.push(c_next.clone());
        phi.push(p_next.clone());
        c_prev = c_next;
        p_prev = p_next;
    }

    let cond = Condensed { cst, phi };
    let (u_plan, eps, s) = solve_condensed(&cond, n, cfg)?;

    let mut predicted = DMatrix::zeros(horizon + 1, n);
    predicted.row_mut(0).copy_from(&x0.transpose());
    for j in 0..horizon {
        let u_flat = DVector::from_fn(n_u, |i, _| u_plan[(i / n, i % n)]);
        let xj = &cond.cst[j] + &cond.phi[j] * &u_flat;
        predicted.row_mut(j + 1).copy_from(&xj.transpose());
    }

    let u = u_plan.row(0).transpose();
    Ok(MpcStepResult {
        input_cost: u.norm_squared(),
        slack_cost: cfg.rho * eps.norm(),
        u,
        u_plan,
        predicted,
        eps,
        state_slack: s,
        status: SolverStatus::Optimal,
        sl_iters: 1,
        solve_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn gains_mode_b(m: &RcModel, season: SeasonLabel, start_tow: usize) -> GainsMode {
    if m.gains_v.contains_key(&season) {
        GainsMode::Full { season, start_tow }
    } else {
        GainsMode::ConstOnly
    }
}

fn rollout_b(
    m: &RcModel,
    x0: &DVector<f64>,
    u_plan: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mode: GainsMode,
) -> Result<DMatrix<f64>> {
    let sim = crate::rcnet::simulate(m, x0, u_plan, &v.rows(0, u_plan.nrows()).into_owned(), mode)?;
    Ok(sim.states)
}

/// One receding-horizon solve against the bilinear RC model by successive
/// linearization: the state trajectory inside the bilinear term is frozen at
/// the previous iterate, the resulting QP is solved, and the bilinear
/// dynamics are re-simulated under the new plan until the trajectory stops
/// moving.
pub fn solve_step_model_b(
    m: &RcModel,
    x0: &DVector<f64>,
    v: &DMatrix<f64>,
    season: SeasonLabel,
    start_tow: usize,
    cfg: &MpcConfig,
    warm_start: Option<&DMatrix<f64>>,
) -> Result<MpcStepResult> {
    cfg.validate()?;
    let (n_x, n_y, nu) = (m.n_states(), m.n_zones(), m.n_vavs());
    if x0.len() != n_x || cfg.u_min.len() != nu {
        return Err(Error::Shape("model B MPC dimension mismatch".into()));
    }
    if v.nrows() < cfg.n || v.ncols() != 2 {
        return Err(Error::Shape("disturbance forecast shorter than the horizon".into()));
    }
    let started = Instant::now();
    let horizon = cfg.n;
    let n_u = horizon * nu;
    let mode = gains_mode_b(m, season, start_tow);

    let mut u_plan = match warm_start {
        Some(w) if w.nrows() == horizon && w.ncols() == nu => w.clone(),
        _ => DMatrix::zeros(horizon, nu),
    };
    let mut xbar = rollout_b(m, x0, &u_plan, v, mode)?;
    let mut eps = DVector::zeros(nu);
    let mut s = 0.0;
    let mut status = SolverStatus::LinearizationNotConverged;
    let mut iters = 0;
    for it in 0..cfg.sl_max_iters {
        iters = it + 1;
        // input-affine dynamics with the bilinear term frozen at xbar
        let mut cst = Vec::with_capacity(horizon);
        let mut phi = Vec::with_capacity(horizon);
        let mut c_prev = x0.clone();
        let mut p_prev = DMatrix::<f64>::zeros(n_x, n_u);
        for j in 0..horizon {
            let vj = DVector::from_column_slice(&[v[(j, 0)], v[(j, 1)]]);
            let f = gains_vec(m, mode, j)?;
            let c_next = &m.a * &c_prev + &m.b_v * &vj + &m.b_ig * &f;
            let mut p_next = &m.a * &p_prev;
            let xj = xbar.row(j).transpose();
            for i in 0..nu {
                let col = &m.b_xu[i] * &xj + &m.b_vu[i] * &vj;
                for r in 0..n_x {
                    p_next[(r, j * nu + i)] += col[r];
                }
            }
            cst.push(&m.c * &c_next);
            phi.push(&m.c * &p_next);
            c_prev = c_next;
            p_prev = p_next;
        }
        let cond = Condensed { cst, phi };
        let (u_new, eps_new, s_new) = solve_condensed(&cond, nu, cfg)?;
        let x_new = rollout_b(m, x0, &u_new, v, mode)?;
        let delta = (&x_new - &xbar).amax();
        u_plan = u_new;
        xbar = x_new;
        eps = eps_new;
        s = s_new;
        if delta < cfg.sl_tol {
            status = SolverStatus::Optimal;
            break;
        }
    }

    let predicted = &xbar * m.c.transpose();
    debug_assert_eq!(predicted.nrows(), horizon + 1);
    debug_assert_eq!(predicted.ncols(), n_y);
    let u = u_plan.row(0).transpose();
    Ok(MpcStepResult {
        input_cost: u.norm_squared(),
        slack_cost: cfg.rho * eps.norm(),
        u,
        u_plan,
        predicted,
        eps,
        state_slack: s,
        status,
        sl_iters: iters,
        solve_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn gains_vec(m: &RcModel, mode: GainsMode, k: usize) -> Result<DVector<f64>> {
    match mode {
        GainsMode::None => Ok(DVector::zeros(m.n_zones())),
        GainsMode::ConstOnly => Ok(m.gamma.f_ig_const.clone()),
        GainsMode::Full { season, start_tow } => {
            let prof = m
                .gains_v
                .get(&season)
                .ok_or_else(|| Error::Config(format!("no gains profile for {season:?}")))?;
            let spw = m.steps_per_week();
            Ok(&m.gamma.f_ig_const + prof.row((start_tow + k) % spw).transpose())
        }
    }
}

pub enum ModelVariant<'a> {
    A(&'a DataDrivenModel),
    B(&'a RcModel),
}

/// How the applied input propagates the temperature between solves.
pub enum RolloutMode<'a> {
    /// Paper-style: the controller's own model is also the plant.
    OpenLoop,
    /// Apply inputs to a separate truth model and feed its measurements back.
    Plant { plant: &'a RcModel, x0: DVector<f64> },
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub total_cost: f64,
    pub input_cost: f64,
    pub slack_cost: f64,
    pub violations: usize,
    pub max_violation: f64,
    pub state_slack_activations: usize,
    pub sl_not_converged: usize,
    pub solve_ms_mean: f64,
    pub solve_ms_max: f64,
}

pub struct ClosedLoopRun {
    pub results: Vec<MpcStepResult>,
    /// Realized zone temperatures, (steps + 1) x n_zones.
    pub trajectory: DMatrix<f64>,
    pub total_cost: f64,
    pub input_cost: f64,
    pub slack_cost: f64,
    /// Zone-steps outside the comfort band (beyond 1e-6).
    pub violations: usize,
    pub max_violation: f64,
    pub state_slack_activations: usize,
}

impl ClosedLoopRun {
    pub fn summary(&self) -> RunSummary {
        let times: Vec<f64> = self.results.iter().map(|r| r.solve_ms).collect();
        RunSummary {
            steps: self.results.len(),
            total_cost: self.total_cost,
            input_cost: self.input_cost,
            slack_cost: self.slack_cost,
            violations: self.violations,
            max_violation: self.max_violation,
            state_slack_activations: self.state_slack_activations,
            sl_not_converged: self
                .results
                .iter()
                .filter(|r| r.status == SolverStatus::LinearizationNotConverged)
                .count(),
            solve_ms_mean: if times.is_empty() {
                0.0
            } else {
                times.iter().sum::<f64>() / times.len() as f64
            },
            solve_ms_max: times.iter().cloned().fold(0.0, f64::max),
        }
    }

    /// Per-step CSV: step, inputs, realized temperatures, slack norm, costs.
    pub fn to_csv(&self) -> String {
        let nu = self.results.first().map_or(0, |r| r.u.len());
        let n = self.trajectory.ncols();
        let mut out = String::new();
        let mut header = vec!["step".to_string()];
        header.extend((0..nu).map(|i| format!("u_{i}")));
        header.extend((0..n).map(|z| format!("t_{z}")));
        header.extend(["eps_norm".into(), "state_slack".into(), "input_cost".into(), "slack_cost".into()]);
        out.push_str(&header.join(","));
        out.push('\n');
        for (k, r) in self.results.iter().enumerate() {
            let mut cells = vec![k.to_string()];
            cells.extend(r.u.iter().map(|x| format!("{x:.6}")));
            cells.extend((0..n).map(|z| format!("{:.6}", self.trajectory[(k + 1, z)])));
            cells.push(format!("{:.6}", r.eps.norm()));
            cells.push(format!("{:.6}", r.state_slack));
            cells.push(format!("{:.6}", r.input_cost));
            cells.push(format!("{:.6}", r.slack_cost));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Week-scale receding-horizon rollout. `v` must cover `steps + N` rows.
/// Cost accumulates ‖u(k)‖² of each applied input plus ρ‖ε‖₂ per solve.
pub fn run_receding_horizon(
    variant: &ModelVariant,
    x0: &DVector<f64>,
    v: &DMatrix<f64>,
    season: SeasonLabel,
    start_tow: usize,
    cfg: &MpcConfig,
    steps: usize,
    mode: &RolloutMode,
) -> Result<ClosedLoopRun> {
    cfg.validate()?;
    if v.nrows() < steps + cfg.n {
        return Err(Error::Shape(format!(
            "disturbances cover {} rows; need steps + horizon = {}",
            v.nrows(),
            steps + cfg.n
        )));
    }
    let n_zones = match variant {
        ModelVariant::A(m) => m.n_zones(),
        ModelVariant::B(m) => m.n_zones(),
    };

    let mut model_state = x0.clone();
    let mut plant_state = match mode {
        RolloutMode::OpenLoop => None,
        RolloutMode::Plant { x0, .. } => Some(x0.clone()),
    };
    let mut trajectory = DMatrix::zeros(steps + 1, n_zones);
    let measure = |model_state: &DVector<f64>,
                   plant_state: &Option<DVector<f64>>|
     -> DVector<f64> {
        match (mode, plant_state) {
            (RolloutMode::Plant { plant, .. }, Some(xp)) => &plant.c * xp,
            _ => match variant {
                ModelVariant::A(_) => model_state.clone(),
                ModelVariant::B(m) => &m.c * model_state,
            },
        }
    };
    trajectory.row_mut(0).copy_from(&measure(&model_state, &plant_state).transpose());

    let mut results: Vec<MpcStepResult> = Vec::with_capacity(steps);
    let mut warm: Option<DMatrix<f64>> = None;
    for k in 0..steps {
        let tow = start_tow + k;
        let v_hor = v.rows(k, cfg.n).into_owned();
        let res = match variant {
            ModelVariant::A(m) => {
                let xc = match (&plant_state, mode) {
                    (Some(xp), RolloutMode::Plant { plant, .. }) => &plant.c * xp,
                    _ => model_state.clone(),
                };
                solve_step_model_a(m, &xc, &v_hor, season, tow, cfg)
            }
            ModelVariant::B(m) => {
                let xc = match &plant_state {
                    // perfect state feedback from the truth model
                    Some(xp) => xp.clone(),
                    None => model_state.clone(),
                };
                solve_step_model_b(m, &xc, &v_hor, season, tow, cfg, warm.as_ref())
            }
        }
        .map_err(|e| Error::Evaluation(format!("MPC solve failed at step {k}: {e}")))?;

        // advance
        let vk = DVector::from_column_slice(&[v[(k, 0)], v[(k, 1)]]);
        match (&mut plant_state, mode) {
            (Some(xp), RolloutMode::Plant { plant, .. }) => {
                let u_plant = map_input_to_plant(variant, plant, &res.u)?;
                let f = gains_vec(plant, gains_mode_b(plant, season, tow), 0)?;
                let mut x1 = &plant.a * &*xp + &plant.b_v * &vk + &plant.b_ig * &f;
                for (i, ui) in u_plant.iter().enumerate() {
                    if *ui != 0.0 {
                        x1 += *ui * (&plant.b_xu[i] * &*xp + &plant.b_vu[i] * &vk);
                    }
                }
                *xp = x1;
            }
            _ => match variant {
                ModelVariant::A(m) => {
                    let gains = season_gains_a(m, season)?;
                    let q = gains.row(tow % gains.nrows()).transpose();
                    model_state = &m.a * &model_state
                        + DVector::from_fn(m.n_zones(), |z, _| m.b[z] * res.u[z])
                        + &m.c * &vk
                        + q;
                }
                ModelVariant::B(m) => {
                    let f = gains_vec(m, gains_mode_b(m, season, tow), 0)?;
                    let mut x1 = &m.a * &model_state + &m.b_v * &vk + &m.b_ig * &f;
                    for (i, ui) in res.u.iter().enumerate() {
                        if *ui != 0.0 {
                            x1 += *ui * (&m.b_xu[i] * &model_state + &m.b_vu[i] * &vk);
                        }
                    }
                    model_state = x1;
                }
            },
        }
        trajectory
            .row_mut(k + 1)
            .copy_from(&measure(&model_state, &plant_state).transpose());

        // shift the plan one step for the next warm start
        if let ModelVariant::B(_) = variant {
            let mut w = DMatrix::zeros(res.u_plan.nrows(), res.u_plan.ncols());
            for r in 1..res.u_plan.nrows() {
                w.row_mut(r - 1).copy_from(&res.u_plan.row(r));
            }
            let last = res.u_plan.nrows() - 1;
            let tail = res.u_plan.row(last).into_owned();
            w.row_mut(last).copy_from(&tail);
            warm = Some(w);
        }
        results.push(res);
    }

    let mut violations = 0;
    let mut max_violation: f64 = 0.0;
    for k in 1..=steps {
        for z in 0..n_zones {
            let t = trajectory[(k, z)];
            let excess = (cfg.t_min - t).max(t - cfg.t_max);
            if excess > 1e-6 {
                violations += 1;
                max_violation = max_violation.max(excess);
            }
        }
    }
    let input_cost: f64 = results.iter().map(|r| r.input_cost).sum();
    let slack_cost: f64 = results.iter().map(|r| r.slack_cost).sum();
    let state_slack_activations = results.iter().filter(|r| r.state_slack > 1e-6).count();
    Ok(ClosedLoopRun {
        results,
        trajectory,
        total_cost: input_cost + slack_cost,
        input_cost,
        slack_cost,
        violations,
        max_violation,
        state_slack_activations,
    })
}

/// Translate the controller's input vector into the plant's VAV channels.
/// Model B shares the channel layout; Model A commands zone totals, which are
/// split evenly across each zone's VAV boxes.
fn map_input_to_plant(
    variant: &ModelVariant,
    plant: &RcModel,
    u: &DVector<f64>,
) -> Result<DVector<f64>> {
    match variant {
        ModelVariant::B(_) => {
            if u.len() != plant.n_vavs() {
                return Err(Error::Shape("controller/plant VAV count mismatch".into()));
            }
            Ok(u.clone())
        }
        ModelVariant::A(_) => {
            let zones = plant_vav_zones(plant)?;
            let mut per_zone_count = vec![0usize; plant.n_zones()];
            for &z in &zones {
                per_zone_count[z] += 1;
            }
            if u.len() != plant.n_zones() {
                return Err(Error::Shape("controller/plant zone count mismatch".into()));
            }
            Ok(DVector::from_fn(plant.n_vavs(), |i, _| {
                u[zones[i]] / per_zone_count[zones[i]] as f64
            }))
        }
    }
}

/// Zone index served by each plant VAV, recovered from the bilinear term's
/// sparsity (each B_xu touches exactly its zone's air node).
fn plant_vav_zones(plant: &RcModel) -> Result<Vec<usize>> {
    let n_x = plant.n_states();
    (0..plant.n_vavs())
        .map(|i| {
            let s = (0..n_x)
                .find(|&s| plant.b_xu[i][(s, s)] != 0.0)
                .ok_or_else(|| Error::Shape("VAV bilinear term has no air node".into()))?;
            (0..plant.n_zones())
                .find(|&z| plant.c[(z, s)] != 0.0)
                .ok_or_else(|| Error::Shape("VAV air node not measured by any zone".into()))
        })
        .collect()
}
