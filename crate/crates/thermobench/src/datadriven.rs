//! Model A: difference-equation zone models identified by smoothing-based
//! differencing, Bayesian constrained least squares with excitation-derived
//! priors, and seasonal internal-gains extraction. The lumped single-zone
//! model is the n = 1 special case.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{solve_qp, Qp, DEFAULT_QP_TOL};
use crate::smoother::{lwlr_smooth_with_bandwidth, SmootherConfig};
use crate::timeseries::{Dataset, SeasonLabel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    East,
    North,
    South,
    West,
}

/// Zone set, adjacency, exterior-wall orientations and VAV-to-zone mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneTopology {
    pub zone_names: Vec<String>,
    /// Symmetric with false diagonal.
    pub adjacency: Vec<Vec<bool>>,
    pub exterior_orientation: Vec<Vec<Orientation>>,
    /// vav index -> zone index.
    pub vav_to_zone: Vec<usize>,
    /// Floor areas, used for area-weighted lumping and prior scaling.
    pub floor_areas: Vec<f64>,
}

impl ZoneTopology {
    pub fn n_zones(&self) -> usize {
        self.zone_names.len()
    }

    /// Single-zone topology used by the lumped pipeline.
    pub fn lumped(n_vav: usize) -> Self {
        ZoneTopology {
            zone_names: vec!["floor".into()],
            adjacency: vec![vec![false]],
            exterior_orientation: vec![vec![
                Orientation::East,
                Orientation::North,
                Orientation::South,
                Orientation::West,
            ]],
            vav_to_zone: vec![0; n_vav],
            floor_areas: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_zones();
        if self.adjacency.len() != n
            || self.exterior_orientation.len() != n
            || self.floor_areas.len() != n
        {
            return Err(Error::Shape("topology field lengths disagree".into()));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape("adjacency not square".into()));
            }
            if row[i] {
                return Err(Error::Shape(format!("adjacency diagonal true at zone {i}")));
            }
            for j in 0..n {
                if self.adjacency[i][j] != self.adjacency[j][i] {
                    return Err(Error::Shape(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        if self.vav_to_zone.iter().any(|&z| z >= n) {
            return Err(Error::Shape("vav_to_zone references unknown zone".into()));
        }
        if self.floor_areas.iter().any(|&a| a <= 0.0) {
            return Err(Error::Shape("floor areas must be positive".into()));
        }
        Ok(())
    }
}

/// Gaussian prior means and per-entry variances for the a and b coefficients.
/// Infinite variance disables the penalty; zero variance pins the entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Priors {
    pub mu_a: DMatrix<f64>,
    pub var_a: DMatrix<f64>,
    pub mu_b: DVector<f64>,
    pub var_b: DVector<f64>,
}

impl Priors {
    /// Flat (uninformative) priors at the given dimension.
    pub fn flat(n: usize) -> Self {
        Priors {
            mu_a: DMatrix::zeros(n, n),
            var_a: DMatrix::from_element(n, n, f64::INFINITY),
            mu_b: DVector::zeros(n),
            var_b: DVector::from_element(n, f64::INFINITY),
        }
    }

    /// Defaults: diagonal mu_a 0.8 scaled by each zone's floor-area share of
    /// the mean zone, off-diagonals 0.01 with tight covariance, mu_b from the
    /// excitation prior. sigma_a = 0.1^2, sigma_b = 0.05^2.
    pub fn default_for(topo: &ZoneTopology, mu_b: DVector<f64>) -> Self {
        let n = topo.n_zones();
        let mean_area: f64 = topo.floor_areas.iter().sum::<f64>() / n as f64;
        let mut mu_a = DMatrix::zeros(n, n);
        let mut var_a = DMatrix::from_element(n, n, f64::INFINITY);
        for i in 0..n {
            // smaller thermal mass decays faster
            let share = (topo.floor_areas[i] / mean_area).min(1.0);
            mu_a[(i, i)] = 1.0 - (1.0 - 0.8) / share.max(0.1);
            var_a[(i, i)] = 0.1 * 0.1;
            for j in 0..n {
                if topo.adjacency[i][j] {
                    mu_a[(i, j)] = 0.01;
                    var_a[(i, j)] = 0.02 * 0.02;
                }
            }
        }
        Priors {
            mu_a,
            var_a,
            mu_b,
            var_b: DVector::from_element(n, 0.05 * 0.05),
        }
    }
}

/// Identified coefficients plus per-season weekly internal-gains profiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataDrivenModel {
    pub a: DMatrix<f64>,
    /// Diagonal of B.
    pub b: DVector<f64>,
    /// n x 2 map from [v_Ta, v_Ts].
    pub c: DMatrix<f64>,
    /// Weekly profile per season, steps_per_week x n_zones, deg C per step.
    pub gains: BTreeMap<SeasonLabel, DMatrix<f64>>,
    pub topology: ZoneTopology,
    pub metadata: IdentificationMeta,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IdentificationMeta {
    pub bandwidth: f64,
    pub seed: u64,
    pub prior_mu_b: Vec<f64>,
    /// Spectral radius of the identified A; > 1 means an unstable open-loop
    /// rollout (surfaced as a warning, not an error).
    pub spectral_radius: f64,
}

impl DataDrivenModel {
    pub fn n_zones(&self) -> usize {
        self.a.nrows()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Free-parameter layout for the sparsity-masked coefficient estimation.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    /// (row, col) of free A entries, diagonal first per row.
    pub a_entries: Vec<(usize, usize)>,
    pub n_zones: usize,
    /// (row, disturbance col) of free C entries.
    pub c_entries: Vec<(usize, usize)>,
}

impl SparsityPattern {
    pub fn from_topology(topo: &ZoneTopology) -> Self {
        let n = topo.n_zones();
        let mut a_entries = Vec::new();
        for i in 0..n {
            a_entries.push((i, i));
            for j in 0..n {
                if topo.adjacency[i][j] {
                    a_entries.push((i, j));
                }
            }
        }
        let mut c_entries = Vec::new();
        for i in 0..n {
            if !topo.exterior_orientation[i].is_empty() {
                c_entries.push((i, 0)); // ambient column only with an exterior wall
            }
            c_entries.push((i, 1)); // supply air reaches every zone
        }
        SparsityPattern { a_entries, n_zones: n, c_entries }
    }

    pub fn n_params(&self) -> usize {
        self.a_entries.len() + self.n_zones + self.c_entries.len()
    }

    pub fn b_offset(&self) -> usize {
        self.a_entries.len()
    }

    pub fn c_offset(&self) -> usize {
        self.a_entries.len() + self.n_zones
    }

    pub fn describe_param(&self, p: usize) -> String {
        if p < self.b_offset() {
            let (i, j) = self.a_entries[p];
            format!("A[{i},{j}]")
        } else if p < self.c_offset() {
            format!("B[{0},{0}]", p - self.b_offset())
        } else {
            let (i, j) = self.c_entries[p - self.c_offset()];
            format!("C[{i},{j}]")
        }
    }
}

/// Differenced regressand and regressors for one season: rows are time steps,
/// all series have the conditional-expectation estimate subtracted.
#[derive(Debug, Clone)]
pub struct Residualized {
    /// x(k+1) - xhat(k+1), (T-1) x n.
    pub dx: DMatrix<f64>,
    /// x(k) - xhat(k).
    pub xr: DMatrix<f64>,
    /// u(k) - uhat(k), per-zone aggregated flow.
    pub ur: DMatrix<f64>,
    /// v(k) - vhat(k), (T-1) x 2.
    pub vr: DMatrix<f64>,
}

fn smooth_matrix(m: &DMatrix<f64>, positions: &[f64], bandwidth: f64, period: f64) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        let s = lwlr_smooth_with_bandwidth(&col, positions, bandwidth, period)?;
        for (i, v) in s.values.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

fn tow_positions(d: &Dataset) -> Vec<f64> {
    d.timestamps
        .iter()
        .map(|t| t.time_of_week_index(d.step_minutes) as f64)
        .collect()
}

fn v_matrix(d: &Dataset) -> DMatrix<f64> {
    DMatrix::from_fn(d.len(), 2, |k, j| d.disturbances[k].v2()[j])
}

/// One season's weeks stacked into shared channel matrices, with per-week
/// row ranges, so a single weekly profile can smooth all of them.
struct Pooled {
    pos: Vec<f64>,
    x: DMatrix<f64>,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    week_bounds: Vec<(usize, usize)>,
}

fn pool_weeks(slices: &[Dataset], topo: &ZoneTopology) -> Result<Pooled> {
    if slices.is_empty() {
        return Err(Error::InsufficientData("no slices to pool".into()));
    }
    let n = topo.n_zones();
    let mut pos = Vec::new();
    let mut x_rows = Vec::new();
    let mut u_rows = Vec::new();
    let mut v_rows = Vec::new();
    let mut week_bounds = Vec::new();
    for s in slices {
        let start = pos.len();
        pos.extend(tow_positions(s));
        let uz = s.zone_flows(&topo.vav_to_zone, n);
        let vm = v_matrix(s);
        for k in 0..s.len() {
            x_rows.push(s.zone_temps.row(k).into_owned());
            u_rows.push(uz.row(k).into_owned());
            v_rows.push(vm.row(k).into_owned());
        }
        week_bounds.push((start, pos.len()));
    }
    let total = pos.len();
    let stack = |rows: &[nalgebra::RowDVector<f64>], cols: usize| {
        DMatrix::from_fn(total, cols, |i, j| rows[i][j])
    };
    Ok(Pooled {
        x: stack(&x_rows, n),
        u: stack(&u_rows, n),
        v: stack(&v_rows, 2),
        pos,
        week_bounds,
    })
}

/// Smooth every channel of a season's pooled weeks and subtract, producing the
/// differenced regression data. `slices` must be week slices from one season.
pub fn residualize(
    slices: &[Dataset],
    topo: &ZoneTopology,
    cfg: &SmootherConfig,
) -> Result<Residualized> {
    let n = topo.n_zones();
    let Pooled { pos, x, u, v, week_bounds } = pool_weeks(slices, topo)?;
    let period = (crate::timeseries::MINUTES_PER_WEEK / slices[0].step_minutes as i64) as f64;
    let xs = smooth_matrix(&x, &pos, cfg.bandwidth, period)?;
    let us = smooth_matrix(&u, &pos, cfg.bandwidth, period)?;
    let vs = smooth_matrix(&v, &pos, cfg.bandwidth, period)?;

    // per week: rows k = 0..len-2 pair (k, k+1); the last sample is dropped
    let n_rows: usize = week_bounds.iter().map(|(a, b)| b - a - 1).sum();
    let mut dx = DMatrix::zeros(n_rows, n);
    let mut xr = DMatrix::zeros(n_rows, n);
    let mut ur = DMatrix::zeros(n_rows, n);
    let mut vr = DMatrix::zeros(n_rows, 2);
    let mut r = 0;
    for &(a, b) in &week_bounds {
        for k in a..b - 1 {
            for j in 0..n {
                dx[(r, j)] = x[(k + 1, j)] - xs[(k + 1, j)];
                xr[(r, j)] = x[(k, j)] - xs[(k, j)];
                ur[(r, j)] = u[(k, j)] - us[(k, j)];
            }
            for j in 0..2 {
                vr[(r, j)] = v[(k, j)] - vs[(k, j)];
            }
            r += 1;
        }
    }
    Ok(Residualized { dx, xr, ur, vr })
}

/// Excitation-derived prior mean for b: per zone, the mean of
/// (x(k+1) - x(k)) / u(k) over masked samples with nonzero flow.
pub fn prior_b_from_excitation(d: &Dataset, topo: &ZoneTopology) -> Result<DVector<f64>> {
    let n = topo.n_zones();
    let uz = d.zone_flows(&topo.vav_to_zone, n);
    let mut mu = DVector::zeros(n);
    for z in 0..n {
        let mut acc = 0.0;
        let mut count = 0usize;
        for k in 0..d.len().saturating_sub(1) {
            if d.excitation_mask[k] && uz[(k, z)] > 0.0 {
                acc += (d.zone_temps[(k + 1, z)] - d.zone_temps[(k, z)]) / uz[(k, z)];
                count += 1;
            }
        }
        if count < 8 {
            return Err(Error::InsufficientExcitation(format!(
                "zone {z} has {count} masked samples with nonzero flow; need at least 8"
            )));
        }
        mu[z] = acc / count as f64;
    }
    Ok(mu)
}

/// Bayesian constrained least squares over the stacked per-season residual
/// data: one coefficient set shared across seasons, Gaussian prior penalties
/// on a and b, sign/interval constraints, adjacency sparsity.
pub fn identify_bcls(
    res: &BTreeMap<SeasonLabel, Residualized>,
    priors: &Priors,
    topo: &ZoneTopology,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    topo.validate()?;
    let n = topo.n_zones();
    let pat = SparsityPattern::from_topology(topo);
    let np = pat.n_params();

    // stack the design: one scalar equation per (season, time row, zone)
    let total_rows: usize = res.values().map(|r| r.dx.nrows() * n).sum();
    if total_rows < np {
        return Err(Error::InsufficientData(format!(
            "{total_rows} equations for {np} parameters"
        )));
    }
    let mut phi = DMatrix::zeros(total_rows, np);
    let mut y = DVector::zeros(total_rows);
    let mut row = 0;
    for r in res.values() {
        for k in 0..r.dx.nrows() {
            for i in 0..n {
                y[row] = r.dx[(k, i)];
                for (p, &(ai, aj)) in pat.a_entries.iter().enumerate() {
                    if ai == i {
                        phi[(row, p)] = r.xr[(k, aj)];
                    }
                }
                phi[(row, pat.b_offset() + i)] = r.ur[(k, i)];
                for (p, &(ci, cj)) in pat.c_entries.iter().enumerate() {
                    if ci == i {
                        phi[(row, pat.c_offset() + p)] = r.vr[(k, cj)];
                    }
                }
                row += 1;
            }
        }
    }

    // prior precision (diagonal) and mean per parameter
    let mut prec = DVector::zeros(np);
    let mut mu = DVector::zeros(np);
    let mut pinned: Vec<(usize, f64)> = Vec::new();
    for (p, &(i, j)) in pat.a_entries.iter().enumerate() {
        let var = priors.var_a[(i, j)];
        mu[p] = priors.mu_a[(i, j)];
        if var <= 1e-15 {
            pinned.push((p, priors.mu_a[(i, j)]));
        } else if var.is_finite() {
            prec[p] = 1.0 / var;
        }
    }
    for i in 0..n {
        let p = pat.b_offset() + i;
        let var = priors.var_b[i];
        mu[p] = priors.mu_b[i];
        if var <= 1e-15 {
            pinned.push((p, priors.mu_b[i]));
        } else if var.is_finite() {
            prec[p] = 1.0 / var;
        }
    }

    // identifiability: effective normal matrix must be full rank
    let mut gram = phi.transpose() * &phi;
    for p in 0..np {
        gram[(p, p)] += prec[p];
    }
    for &(p, _) in &pinned {
        gram[(p, p)] += 1.0; // pinned entries are determined by construction
    }
    let svd = gram.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1.0);
    if svd.singular_values.iter().any(|&s| s < tol) {
        // name the columns dominating the null space
        let vt = svd.v_t.as_ref().expect("svd with v");
        let mut deficient = Vec::new();
        for (si, &s) in svd.singular_values.iter().enumerate() {
            if s < tol {
                let rowv = vt.row(si);
                let mut idx: Vec<usize> = (0..np).collect();
                idx.sort_by(|&a, &b| rowv[b].abs().partial_cmp(&rowv[a].abs()).unwrap());
                for &p in idx.iter().take(2) {
                    if rowv[p].abs() > 0.1 {
                        deficient.push(pat.describe_param(p));
                    }
                }
            }
        }
        deficient.dedup();
        return Err(Error::Identifiability(format!(
            "regressor matrix is rank deficient in columns: {}",
            deficient.join(", ")
        )));
    }

    // QP: min ||phi t - y||^2 + sum prec_p (t_p - mu_p)^2
    let mut h = &gram * 2.0;
    // gram already includes prec on the diagonal; remove the pin stabilizer
    for &(p, _) in &pinned {
        h[(p, p)] -= 2.0;
    }
    let mut g = phi.transpose() * &y * -2.0;
    for p in 0..np {
        g[p] -= 2.0 * prec[p] * mu[p];
    }
    let mut qp = Qp::new(h, g);
    const EPS: f64 = 1e-6; // strict inequalities 0 < a < 1 as closed bounds
    for (p, &(i, j)) in pat.a_entries.iter().enumerate() {
        if i == j {
            qp.lo[p] = EPS;
            qp.hi[p] = 1.0 - EPS;
        }
    }
    for i in 0..n {
        qp.hi[pat.b_offset() + i] = 0.0;
    }
    for p in 0..pat.c_entries.len() {
        qp.lo[pat.c_offset() + p] = 0.0;
    }
    if !pinned.is_empty() {
        let mut a_eq = DMatrix::zeros(pinned.len(), np);
        let mut b_eq = DVector::zeros(pinned.len());
        for (r, &(p, v)) in pinned.iter().enumerate() {
            a_eq[(r, p)] = 1.0;
            b_eq[r] = v;
            qp.lo[p] = f64::NEG_INFINITY;
            qp.hi[p] = f64::INFINITY;
        }
        qp.a_eq = a_eq;
        qp.b_eq = b_eq;
    }
    let sol = solve_qp(&qp, DEFAULT_QP_TOL)?;

    let mut a = DMatrix::zeros(n, n);
    for (p, &(i, j)) in pat.a_entries.iter().enumerate() {
        a[(i, j)] = sol.x[p];
    }
    let b = DVector::from_fn(n, |i, _| sol.x[pat.b_offset() + i]);
    let mut c = DMatrix::zeros(n, 2);
    for (p, &(i, j)) in pat.c_entries.iter().enumerate() {
        c[(i, j)] = sol.x[pat.c_offset() + p];
    }
    Ok((a, b, c))
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// Seasonal weekly internal-gains profiles from the smoothed series and the
/// identified coefficients: q(k) = xhat(k+1) - (A xhat(k) + B uhat(k) + C vhat(k)),
/// averaged per time-of-week index over the season's training weeks.
pub fn estimate_gains(
    train: &BTreeMap<SeasonLabel, Vec<Dataset>>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DMatrix<f64>,
    topo: &ZoneTopology,
    cfg: &SmootherConfig,
) -> Result<BTreeMap<SeasonLabel, DMatrix<f64>>> {
    let n = topo.n_zones();
    let mut out = BTreeMap::new();
    for (&season, weeks) in train {
        if weeks.is_empty() {
            continue;
        }
        let spw = weeks[0].steps_per_week();
        let mut acc = DMatrix::zeros(spw, n);
        let mut counts = vec![0usize; spw];
        let pooled = pool_weeks(weeks, topo)?;
        let period = spw as f64;
        let xs = smooth_matrix(&pooled.x, &pooled.pos, cfg.bandwidth, period)?;
        let us = smooth_matrix(&pooled.u, &pooled.pos, cfg.bandwidth, period)?;
        let vs = smooth_matrix(&pooled.v, &pooled.pos, cfg.bandwidth, period)?;
        for (&(lo, hi), w) in pooled.week_bounds.iter().zip(weeks) {
            for k in lo..hi {
                // smoothed series are functions of time-of-week, so the week
                // wraps onto itself for the final step
                let k1 = if k + 1 < hi { k + 1 } else { lo };
                let tow = w.timestamps[k - lo].time_of_week_index(w.step_minutes);
                for i in 0..n {
                    let mut pred = 0.0;
                    for j in 0..n {
                        pred += a[(i, j)] * xs[(k, j)];
                    }
                    pred += b[i] * us[(k, i)];
                    pred += c[(i, 0)] * vs[(k, 0)] + c[(i, 1)] * vs[(k, 1)];
                    acc[(tow, i)] += xs[(k1, i)] - pred;
                }
                counts[tow] += 1;
            }
        }
        for tow in 0..spw {
            if counts[tow] > 0 {
                for i in 0..n {
                    acc[(tow, i)] /= counts[tow] as f64;
                }
            }
        }
        out.insert(season, acc);
    }
    Ok(out)
}

/// Open-loop rollout of the identified model. `start_tow` indexes the gains
/// profile at the first step; returns (steps + 1) x n including the initial
/// condition.
pub fn simulate_model_a(
    m: &DataDrivenModel,
    x0: &DVector<f64>,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    season: SeasonLabel,
    start_tow: usize,
) -> Result<DMatrix<f64>> {
    let n = m.n_zones();
    if x0.len() != n || u.ncols() != n || v.ncols() != 2 || u.nrows() != v.nrows() {
        return Err(Error::Shape("simulate_model_a dimension mismatch".into()));
    }
    let gains = m
        .gains
        .get(&season)
        .ok_or_else(|| Error::Config(format!("no gains profile for season {season}")))?;
    let spw = gains.nrows();
    let steps = u.nrows();
    let mut traj = DMatrix::zeros(steps + 1, n);
    let mut x = x0.clone();
    traj.row_mut(0).copy_from(&x.transpose());
    for k in 0..steps {
        let tow = (start_tow + k) % spw;
        let mut next = DVector::zeros(n);
        for i in 0..n {
            let mut v_acc = 0.0;
            for j in 0..n {
                v_acc += m.a[(i, j)] * x[j];
            }
            v_acc += m.b[i] * u[(k, i)];
            v_acc += m.c[(i, 0)] * v[(k, 0)] + m.c[(i, 1)] * v[(k, 1)];
            v_acc += gains[(tow, i)];
            next[i] = v_acc;
        }
        if next.iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        x = next;
        traj.row_mut(k + 1).copy_from(&x.transpose());
    }
    Ok(traj)
}

/// Collapse a multi-zone dataset to the lumped single-zone form: area-weighted
/// temperature average and summed flows.
pub fn lump_dataset(d: &Dataset, topo: &ZoneTopology) -> Dataset {
    let n = topo.n_zones();
    let total_area: f64 = topo.floor_areas.iter().sum();
    let t = d.len();
    let mut temps = DMatrix::zeros(t, 1);
    let mut flows = DMatrix::zeros(t, 1);
    for k in 0..t {
        let mut acc = 0.0;
        for j in 0..n.min(d.n_zones()) {
            acc += d.zone_temps[(k, j)] * topo.floor_areas[j];
        }
        temps[(k, 0)] = acc / total_area;
        flows[(k, 0)] = d.vav_flows.row(k).sum();
    }
    Dataset {
        step_minutes: d.step_minutes,
        timestamps: d.timestamps.clone(),
        zone_names: vec!["floor".into()],
        vav_names: vec!["total".into()],
        zone_temps: temps,
        vav_flows: flows,
        disturbances: d.disturbances.clone(),
        excitation_mask: d.excitation_mask.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};

    use crate::timeseries::{DisturbanceFrame, Timestamp};

    /// Paper-style lumped coefficients used throughout the tests.
    const A0: f64 = 0.80;
    const B0: f64 = -0.18;
    const C0: [f64; 2] = [0.0019, 0.028];

    fn monday() -> Timestamp {
        Timestamp::from_datetime(
            NaiveDate::from_ymd_opt(2015, 9, 7).unwrap().and_hms_opt(0, 0, 0).unwrap(),
        )
    }

    /// Generate `weeks` Monday-aligned weeks from the scalar recursion
    /// x(k+1) = a x + b u + c'v + q with q constant, seeded input variation.
    fn generate_lumped(weeks: usize, q: f64, noise: f64, seed: u64) -> Dataset {
        let spw = 672;
        let t = weeks * spw;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut temps = DMatrix::zeros(t, 1);
        let mut flows = DMatrix::zeros(t, 1);
        let mut frames = Vec::with_capacity(t);
        let mut x = 21.0;
        for k in 0..t {
            let tow = k % spw;
            let daily = (tow as f64 / 96.0 * std::f64::consts::TAU).sin();
            let u = (1.0 + 0.5 * daily + rng.gen_range(-0.4..0.4)).max(0.0);
            let ta = 14.0 + 5.0 * daily + rng.gen_range(-1.0..1.0);
            let ts = 12.8 + rng.gen_range(-0.3..0.3);
            temps[(k, 0)] = x + noise * rng.gen_range(-1.0..1.0);
            flows[(k, 0)] = u;
            frames.push(DisturbanceFrame::new(ta, ts));
            x = A0 * x + B0 * u + C0[0] * ta + C0[1] * ts + q;
        }
        Dataset {
            step_minutes: 15,
            timestamps: (0..t)
                .map(|i| Timestamp::new(monday().epoch_minutes + i as i64 * 15))
                .collect(),
            zone_names: vec!["floor".into()],
            vav_names: vec!["v0".into()],
            zone_temps: temps,
            vav_flows: flows,
            disturbances: frames,
            excitation_mask: vec![false; t],
        }
    }

    /// Like `generate_lumped` but with inputs that are pure functions of
    /// time-of-week and a burn-in long enough that the recorded state sits on
    /// the periodic orbit; every recorded week is then identical, which makes
    /// the smoothed-series recursion hold exactly at every position.
    fn generate_periodic(weeks: usize, q: f64) -> Dataset {
        let spw = 672usize;
        let t = weeks * spw;
        let input = |tow: usize| {
            let daily = (tow as f64 / 96.0 * std::f64::consts::TAU).sin();
            let wob = (tow as f64 / 672.0 * std::f64::consts::TAU * 3.0).cos();
            let u = (1.0 + 0.5 * daily + 0.3 * wob).max(0.0);
            let ta = 14.0 + 5.0 * daily;
            (u, ta, 12.8)
        };
        let mut x = 21.0;
        for k in 0..2 * spw {
            let (u, ta, ts) = input(k % spw);
            x = A0 * x + B0 * u + C0[0] * ta + C0[1] * ts + q;
        }
        let mut temps = DMatrix::zeros(t, 1);
        let mut flows = DMatrix::zeros(t, 1);
        let mut frames = Vec::with_capacity(t);
        for k in 0..t {
            let (u, ta, ts) = input(k % spw);
            temps[(k, 0)] = x;
            flows[(k, 0)] = u;
            frames.push(DisturbanceFrame::new(ta, ts));
            x = A0 * x + B0 * u + C0[0] * ta + C0[1] * ts + q;
        }
        Dataset {
            step_minutes: 15,
            timestamps: (0..t)
                .map(|i| Timestamp::new(monday().epoch_minutes + i as i64 * 15))
                .collect(),
            zone_names: vec!["floor".into()],
            vav_names: vec!["v0".into()],
            zone_temps: temps,
            vav_flows: flows,
            disturbances: frames,
            excitation_mask: vec![false; t],
        }
    }

    fn week_slices(d: &Dataset) -> Vec<Dataset> {
        d.week_starts()
            .into_iter()
            .map(|s| d.slice(s, s + d.steps_per_week()))
            .collect()
    }

    #[test]
    fn residualize_constant_dataset_is_zero() {
        let spw = 672;
        let t = spw;
        let d = Dataset {
            step_minutes: 15,
            timestamps: (0..t)
                .map(|i| Timestamp::new(monday().epoch_minutes + i as i64 * 15))
                .collect(),
            zone_names: vec!["z".into()],
            vav_names: vec!["v".into()],
            zone_temps: DMatrix::from_element(t, 1, 21.0),
            vav_flows: DMatrix::from_element(t, 1, 1.0),
            disturbances: vec![DisturbanceFrame::new(10.0, 12.8); t],
            excitation_mask: vec![false; t],
        };
        let topo = ZoneTopology::lumped(1);
        let r = residualize(&[d], &topo, &SmootherConfig::default()).unwrap();
        assert!(r.dx.amax() < 1e-9);
        assert!(r.xr.amax() < 1e-9);
        assert!(r.ur.amax() < 1e-9);
        assert!(r.vr.amax() < 1e-9);
    }

    #[test]
    fn residualize_is_exact_for_noiseless_generator() {
        // constant q equals its own weekly smooth, so the differenced
        // regression must be satisfied exactly by the generator coefficients
        let d = generate_lumped(2, 3.0, 0.0, 42);
        let topo = ZoneTopology::lumped(1);
        let cfg = SmootherConfig::default();
        let r = residualize(&week_slices(&d), &topo, &cfg).unwrap();
        // windows that wrap across the first/last record index reference a
        // predecessor or successor outside the data, so skip those positions
        let guard = cfg.bandwidth as usize + 2;
        let spw = 672usize;
        let mut worst: f64 = 0.0;
        for k in 0..r.dx.nrows() {
            let tow = k % (spw - 1);
            let dist_from_end = (spw - 1 - tow).min(tow + 1);
            if dist_from_end <= guard {
                continue;
            }
            let pred = A0 * r.xr[(k, 0)] + B0 * r.ur[(k, 0)] + C0[0] * r.vr[(k, 0)] + C0[1] * r.vr[(k, 1)];
            worst = worst.max((r.dx[(k, 0)] - pred).abs());
        }
        assert!(worst < 1e-8, "max residual {worst}");
    }

    #[test]
    fn ols_on_residuals_recovers_generator() {
        let d = generate_lumped(3, 3.0, 0.0, 7);
        let topo = ZoneTopology::lumped(1);
        let r = residualize(&week_slices(&d), &topo, &SmootherConfig::default()).unwrap();
        // plain OLS oracle on the residualized data
        let rows = r.dx.nrows();
        let mut phi = DMatrix::zeros(rows, 4);
        for k in 0..rows {
            phi[(k, 0)] = r.xr[(k, 0)];
            phi[(k, 1)] = r.ur[(k, 0)];
            phi[(k, 2)] = r.vr[(k, 0)];
            phi[(k, 3)] = r.vr[(k, 1)];
        }
        let y = r.dx.column(0).into_owned();
        let theta = (phi.transpose() * &phi)
            .lu()
            .solve(&(phi.transpose() * y))
            .unwrap();
        assert!((theta[0] - A0).abs() / A0 < 0.02, "a {}", theta[0]);
        assert!((theta[1] - B0).abs() / B0.abs() < 0.02, "b {}", theta[1]);
    }

    #[test]
    fn bcls_with_flat_priors_matches_ols() {
        let d = generate_lumped(3, 3.0, 0.01, 9);
        let topo = ZoneTopology::lumped(1);
        let r = residualize(&week_slices(&d), &topo, &SmootherConfig::default()).unwrap();
        let rows = r.dx.nrows();
        let mut phi = DMatrix::zeros(rows, 4);
        for k in 0..rows {
            phi[(k, 0)] = r.xr[(k, 0)];
            phi[(k, 1)] = r.ur[(k, 0)];
            phi[(k, 2)] = r.vr[(k, 0)];
            phi[(k, 3)] = r.vr[(k, 1)];
        }
        let y = r.dx.column(0).into_owned();
        let ols = (phi.transpose() * &phi)
            .lu()
            .solve(&(phi.transpose() * y))
            .unwrap();
        let mut map = BTreeMap::new();
        map.insert(SeasonLabel::Fall, r);
        let (a, b, c) = identify_bcls(&map, &Priors::flat(1), &topo).unwrap();
        // constraints inactive here, so BCLS must agree with OLS
        assert_relative_eq!(a[(0, 0)], ols[0], epsilon = 1e-6);
        assert_relative_eq!(b[0], ols[1], epsilon = 1e-6);
        assert_relative_eq!(c[(0, 0)], ols[2], epsilon = 1e-6);
        assert_relative_eq!(c[(0, 1)], ols[3], epsilon = 1e-6);
    }

    #[test]
    fn bcls_zero_variance_prior_pins_coefficients() {
        let d = generate_lumped(2, 3.0, 0.05, 5);
        let topo = ZoneTopology::lumped(1);
        let r = residualize(&week_slices(&d), &topo, &SmootherConfig::default()).unwrap();
        let mut priors = Priors::flat(1);
        priors.mu_a[(0, 0)] = 0.75;
        priors.var_a[(0, 0)] = 0.0;
        priors.mu_b[0] = -0.2;
        priors.var_b[0] = 0.0;
        let mut map = BTreeMap::new();
        map.insert(SeasonLabel::Fall, r);
        let (a, b, _c) = identify_bcls(&map, &priors, &topo).unwrap();
        assert_relative_eq!(a[(0, 0)], 0.75, epsilon = 1e-8);
        assert_relative_eq!(b[0], -0.2, epsilon = 1e-8);
    }

    #[test]
    fn bcls_recovers_generator_with_mild_noise() {
        let d = generate_lumped(4, 3.0, 0.02, 13);
        let topo = ZoneTopology::lumped(1);
        let r = residualize(&week_slices(&d), &topo, &SmootherConfig::default()).unwrap();
        let mut map = BTreeMap::new();
        map.insert(SeasonLabel::Fall, r);
        let priors = Priors::default_for(&topo, DVector::from_element(1, -0.18));
        let (a, b, _c) = identify_bcls(&map, &priors, &topo).unwrap();
        assert!((a[(0, 0)] - A0).abs() < 0.05, "a {}", a[(0, 0)]);
        assert!((b[0] - B0).abs() < 0.05, "b {}", b[0]);
    }

    #[test]
    fn bcls_prior_shrinkage_is_monotone() {
        let d = generate_lumped(2, 3.0, 0.05, 21);
        let topo = ZoneTopology::lumped(1);
        let r = residualize(&week_slices(&d), &topo, &SmootherConfig::default()).unwrap();
        let mut map = BTreeMap::new();
        map.insert(SeasonLabel::Fall, r);
        let target = -0.4; // deliberately far from the generator value
        let mut last_dist = f64::INFINITY;
        for var in [1.0, 1e-2, 1e-4] {
            let mut priors = Priors::flat(1);
            priors.mu_b[0] = target;
            priors.var_b[0] = var;
            let (_a, b, _c) = identify_bcls(&map, &priors, &topo).unwrap();
            let dist = (b[0] - target).abs();
            assert!(dist <= last_dist + 1e-9, "var {var}: {dist} > {last_dist}");
            last_dist = dist;
        }
    }

    #[test]
    fn bcls_respects_sparsity_and_constraints() {
        // 3 zones in a line: 0-1 adjacent, 1-2 adjacent, 0-2 not
        let topo = ZoneTopology {
            zone_names: vec!["a".into(), "b".into(), "c".into()],
            adjacency: vec![
                vec![false, true, false],
                vec![true, false, true],
                vec![false, true, false],
            ],
            exterior_orientation: vec![vec![Orientation::North], vec![], vec![Orientation::South]],
            vav_to_zone: vec![0, 1, 2],
            floor_areas: vec![100.0, 100.0, 100.0],
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let rows = 600;
        let mut r = Residualized {
            dx: DMatrix::zeros(rows, 3),
            xr: DMatrix::from_fn(rows, 3, |_, _| rng.gen_range(-1.0..1.0)),
            ur: DMatrix::from_fn(rows, 3, |_, _| rng.gen_range(-1.0..1.0)),
            vr: DMatrix::from_fn(rows, 2, |_, _| rng.gen_range(-1.0..1.0)),
        };
        let a_true = DMatrix::from_row_slice(
            3,
            3,
            &[0.8, 0.05, 0.0, 0.04, 0.75, 0.06, 0.0, 0.03, 0.85],
        );
        let b_true = DVector::from_column_slice(&[-0.2, -0.15, -0.25]);
        let c_true = DMatrix::from_row_slice(3, 2, &[0.002, 0.03, 0.0, 0.025, 0.0015, 0.02]);
        for k in 0..rows {
            for i in 0..3 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += a_true[(i, j)] * r.xr[(k, j)];
                }
                acc += b_true[i] * r.ur[(k, i)];
                acc += c_true[(i, 0)] * r.vr[(k, 0)] + c_true[(i, 1)] * r.vr[(k, 1)];
                r.dx[(k, i)] = acc;
            }
        }
        let mut map = BTreeMap::new();
        map.insert(SeasonLabel::Fall, r);
        let (a, b, c) = identify_bcls(&map, &Priors::flat(3), &topo).unwrap();
        // sparsity pattern holds exactly
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(2, 0)], 0.0);
        assert_eq!(c[(1, 0)], 0.0); // no exterior wall in zone 1
        // constraints hold exactly
        for i in 0..3 {
            assert!(a[(i, i)] > 0.0 && a[(i, i)] < 1.0);
            assert!(b[i] <= 0.0);
            assert!(c[(i, 1)] >= 0.0);
        }
        // recovery of the generating coefficients
        assert!((&a - &a_true).amax() < 1e-6);
        assert!((&b - &b_true).amax() < 1e-6);
        assert!((&c - &c_true).amax() < 1e-6);
    }

    #[test]
    fn bcls_rank_deficiency_names_columns() {
        let topo = ZoneTopology::lumped(1);
        let rows = 100;
        let r = Residualized {
            dx: DMatrix::zeros(rows, 1),
            xr: DMatrix::from_element(rows, 1, 1.0),
            ur: DMatrix::zeros(rows, 1), // u residual identically zero
            vr: DMatrix::zeros(rows, 2),
        };
        let mut map = BTreeMap::new();
        map.insert(SeasonLabel::Fall, r);
        let err = identify_bcls(&map, &Priors::flat(1), &topo).unwrap_err();
        match err {
            Error::Identifiability(msg) => assert!(msg.contains("B[0,0]") || msg.contains("C["), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn prior_b_from_excitation_examples() {
        let t = 40;
        let mut d = generate_lumped(1, 0.0, 0.0, 1).slice(0, t);
        // overwrite with exact delta x = -0.18 u steps
        let mut x = 22.0;
        for k in 0..t {
            d.zone_temps[(k, 0)] = x;
            d.vav_flows[(k, 0)] = 2.0;
            d.excitation_mask[k] = k < t - 1;
            x += B0 * 2.0;
        }
        let topo = ZoneTopology::lumped(1);
        let mu = prior_b_from_excitation(&d, &topo).unwrap();
        assert_relative_eq!(mu[0], -0.18, epsilon = 1e-12);
    }

    #[test]
    fn prior_b_mean_of_two_ratios() {
        let t = 20;
        let mut d = generate_lumped(1, 0.0, 0.0, 1).slice(0, t);
        let mut x = 22.0;
        for k in 0..t {
            d.zone_temps[(k, 0)] = x;
            d.vav_flows[(k, 0)] = 1.0;
            d.excitation_mask[k] = k < 16;
            let slope = if k % 2 == 0 { -0.2 } else { -0.16 };
            x += slope;
        }
        let topo = ZoneTopology::lumped(1);
        let mu = prior_b_from_excitation(&d, &topo).unwrap();
        assert_relative_eq!(mu[0], -0.18, epsilon = 1e-12);
    }

    #[test]
    fn prior_b_insufficient_excitation() {
        let d = generate_lumped(1, 0.0, 0.0, 1).slice(0, 30);
        let topo = ZoneTopology::lumped(1);
        assert!(matches!(
            prior_b_from_excitation(&d, &topo),
            Err(Error::InsufficientExcitation(_))
        ));
    }

    fn model_with(a: DMatrix<f64>, b: DVector<f64>, c: DMatrix<f64>, q: f64, n: usize) -> DataDrivenModel {
        let mut gains = BTreeMap::new();
        gains.insert(SeasonLabel::Fall, DMatrix::from_element(672, n, q));
        DataDrivenModel {
            a,
            b,
            c,
            gains,
            topology: ZoneTopology::lumped(1),
            metadata: IdentificationMeta::default(),
        }
    }

    #[test]
    fn simulate_homogeneous_decay() {
        let m = model_with(
            DMatrix::from_element(1, 1, 0.8),
            DVector::from_element(1, -0.18),
            DMatrix::zeros(1, 2),
            0.0,
            1,
        );
        let traj = simulate_model_a(
            &m,
            &DVector::from_element(1, 10.0),
            &DMatrix::zeros(5, 1),
            &DMatrix::zeros(5, 2),
            SeasonLabel::Fall,
            0,
        )
        .unwrap();
        for k in 0..=5 {
            assert_relative_eq!(traj[(k, 0)], 10.0 * 0.8f64.powi(k as i32), epsilon = 1e-12);
        }
    }

    #[test]
    fn simulate_matches_hand_computed_step() {
        let m = model_with(
            DMatrix::from_element(1, 1, A0),
            DVector::from_element(1, B0),
            DMatrix::from_row_slice(1, 2, &C0),
            4.2,
            1,
        );
        let traj = simulate_model_a(
            &m,
            &DVector::from_element(1, 21.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_row_slice(1, 2, &[15.0, 12.0]),
            SeasonLabel::Fall,
            0,
        )
        .unwrap();
        assert_relative_eq!(traj[(1, 0)], 21.1845, epsilon = 1e-12);
    }

    #[test]
    fn gains_one_step_hand_value() {
        // direct evaluation of the gains formula at the paper-style point
        let pred = A0 * 21.0 + B0 * 1.0 + C0[0] * 15.0 + C0[1] * 12.0;
        assert_relative_eq!(21.1845 - pred, 4.2, epsilon = 1e-12);
    }

    #[test]
    fn gains_recover_constant_profile() {
        let d = generate_periodic(2, 3.0);
        let topo = ZoneTopology::lumped(1);
        let mut train = BTreeMap::new();
        train.insert(SeasonLabel::Fall, week_slices(&d));
        let a = DMatrix::from_element(1, 1, A0);
        let b = DVector::from_element(1, B0);
        let c = DMatrix::from_row_slice(1, 2, &C0);
        let gains =
            estimate_gains(&train, &a, &b, &c, &topo, &SmootherConfig::default()).unwrap();
        let prof = &gains[&SeasonLabel::Fall];
        for k in 0..prof.nrows() {
            assert!((prof[(k, 0)] - 3.0).abs() < 1e-6, "tow {k}: {}", prof[(k, 0)]);
        }
    }

    #[test]
    fn gains_average_of_identical_weeks() {
        let d = generate_periodic(2, 2.0);
        let topo = ZoneTopology::lumped(1);
        let one = vec![week_slices(&d)[0].clone()];
        let both = week_slices(&d);
        let a = DMatrix::from_element(1, 1, A0);
        let b = DVector::from_element(1, B0);
        let c = DMatrix::from_row_slice(1, 2, &C0);
        let cfg = SmootherConfig::default();
        let mut t1 = BTreeMap::new();
        t1.insert(SeasonLabel::Fall, one);
        let mut t2 = BTreeMap::new();
        t2.insert(SeasonLabel::Fall, both);
        let g1 = estimate_gains(&t1, &a, &b, &c, &topo, &cfg).unwrap();
        let g2 = estimate_gains(&t2, &a, &b, &c, &topo, &cfg).unwrap();
        // both weeks carry the same constant gains, so averaging is neutral
        assert!((&g1[&SeasonLabel::Fall] - &g2[&SeasonLabel::Fall]).amax() < 1e-6);
    }

    #[test]
    fn model_json_round_trip() {
        let m = model_with(
            DMatrix::from_element(1, 1, A0),
            DVector::from_element(1, B0),
            DMatrix::from_row_slice(1, 2, &C0),
            4.2,
            1,
        );
        let s = m.to_json().unwrap();
        let back = DataDrivenModel::from_json(&s).unwrap();
        assert_eq!(back.a, m.a);
        assert_eq!(back.gains[&SeasonLabel::Fall], m.gains[&SeasonLabel::Fall]);
    }

    #[test]
    fn lump_dataset_area_weights() {
        let d = generate_lumped(1, 0.0, 0.0, 1).slice(0, 4);
        let mut topo = ZoneTopology::lumped(1);
        topo.zone_names = vec!["a".into(), "b".into()];
        topo.floor_areas = vec![100.0, 300.0];
        topo.adjacency = vec![vec![false, true], vec![true, false]];
        topo.exterior_orientation = vec![vec![], vec![]];
        let mut d2 = d.clone();
        d2.zone_names = vec!["a".into(), "b".into()];
        d2.zone_temps = DMatrix::from_fn(4, 2, |_, j| if j == 0 { 20.0 } else { 24.0 });
        let lumped = lump_dataset(&d2, &topo);
        assert_relative_eq!(lumped.zone_temps[(0, 0)], 23.0);
    }
}
