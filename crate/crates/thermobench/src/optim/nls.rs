//! Derivative-free nonlinear least squares: multi-start Nelder-Mead with a
//! log transform for positivity-constrained components.

use crate::error::{Error, Result};

pub struct NlsProblem<'a> {
    /// Residual oracle; SSE is the sum of squared entries.
    pub residual: &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync),
    pub dim: usize,
    /// Components that must stay strictly positive (handled in log space).
    pub positive: Vec<bool>,
    pub initial_guesses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct NlsSolution {
    pub theta: Vec<f64>,
    pub sse: f64,
    pub evaluations: usize,
    /// Best SSE after each completed Nelder-Mead run; non-increasing.
    pub trace: Vec<f64>,
}

const POSITIVITY_FLOOR: f64 = 1e-6;
const SIMPLEX_TOL: f64 = 1e-9;

fn to_internal(theta: &[f64], positive: &[bool]) -> Vec<f64> {
    theta
        .iter()
        .zip(positive)
        .map(|(&v, &p)| if p { v.max(POSITIVITY_FLOOR).ln() } else { v })
        .collect()
}

fn to_external(z: &[f64], positive: &[bool]) -> Vec<f64> {
    z.iter()
        .zip(positive)
        .map(|(&v, &p)| if p { v.exp().max(POSITIVITY_FLOOR) } else { v })
        .collect()
}

/// Minimize the SSE of the residual oracle over at most `budget` evaluations.
///
/// Each initial guess gets an equal share of the budget; a run restarts from
/// its best point when the simplex collapses before the share is spent. Ties
/// between starts break toward the lowest start index.
pub fn solve_nls(p: &NlsProblem, budget: usize) -> Result<NlsSolution> {
    if p.dim == 0 || p.initial_guesses.is_empty() {
        return Err(Error::Config("NLS needs a dimension and at least one start".into()));
    }
    if p.positive.len() != p.dim {
        return Err(Error::Shape("positivity mask length != dim".into()));
    }
    if budget < 50 * p.dim {
        return Err(Error::Config(format!(
            "budget {budget} below minimum {}",
            50 * p.dim
        )));
    }
    for g in &p.initial_guesses {
        if g.len() != p.dim {
            return Err(Error::Shape("initial guess length != dim".into()));
        }
    }

    let mut evaluations = 0usize;
    let mut sse_of = |z: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let theta = to_external(z, &p.positive);
        let r = (p.residual)(&theta);
        let sse: f64 = r.iter().map(|v| v * v).sum();
        if sse.is_finite() {
            sse
        } else {
            f64::INFINITY
        }
    };

    let per_start = budget / p.initial_guesses.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut trace = Vec::new();
    let mut any_finite = false;

    for guess in &p.initial_guesses {
        let z0 = to_internal(guess, &p.positive);
        if sse_of(&z0, &mut evaluations).is_finite() {
            any_finite = true;
        }
        let mut remaining = per_start.saturating_sub(1);
        let mut center = z0;
        let mut scale = 1.0;
        loop {
            let (z_best, f_best, used) =
                nelder_mead(&mut sse_of, &center, scale, remaining, &mut evaluations);
            remaining = remaining.saturating_sub(used);
            let improved = best.as_ref().map(|(b, _)| f_best < *b).unwrap_or(true);
            if improved {
                best = Some((f_best, z_best.clone()));
            }
            trace.push(best.as_ref().unwrap().0);
            center = z_best;
            scale *= 0.25; // restart with a tighter simplex around the incumbent
            if f_best.is_finite() {
                any_finite = true;
            }
            if remaining <= 50 {
                break;
            }
        }
    }

    if !any_finite {
        return Err(Error::Evaluation(
            "all starts produced non-finite residuals".into(),
        ));
    }
    let (sse, z) = best.expect("at least one run completed");
    Ok(NlsSolution {
        theta: to_external(&z, &p.positive),
        sse,
        evaluations,
        trace,
    })
}

/// One Nelder-Mead run from `center`. Returns (best point, best value,
/// evaluations used).
fn nelder_mead<F: FnMut(&[f64], &mut usize) -> f64>(
    f: &mut F,
    center: &[f64],
    scale: f64,
    max_evals: usize,
    evaluations: &mut usize,
) -> (Vec<f64>, f64, usize) {
    let n = center.len();
    let start_evals = *evaluations;
    let mut used = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize, used: &mut usize| -> f64 {
        *used += 1;
        f(x, evals)
    };

    // initial simplex: perturb each coordinate
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let fc = eval(center, evaluations, &mut used);
    simplex.push((center.to_vec(), fc));
    for j in 0..n {
        let mut x = center.to_vec();
        let step = scale * (0.10 * x[j].abs() + 0.05);
        x[j] += step;
        let fx = eval(&x, evaluations, &mut used);
        simplex.push((x, fx));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    while used + n + 2 < max_evals {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let f_best = simplex[0].1;
        let f_worst = simplex[n].1;
        if f_worst.is_finite()
            && (f_worst - f_best).abs() <= SIMPLEX_TOL * (f_best.abs() + SIMPLEX_TOL)
        {
            break;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + alpha * (centroid[j] - simplex[n].0[j]))
            .collect();
        let fr = eval(&reflect, evaluations, &mut used);

        if fr < simplex[0].1 {
            let expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + gamma * (reflect[j] - centroid[j]))
                .collect();
            let fe = eval(&expand, evaluations, &mut used);
            simplex[n] = if fe < fr { (expand, fe) } else { (reflect, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (reflect, fr);
        } else {
            let contracted: Vec<f64> = if fr < simplex[n].1 {
                (0..n).map(|j| centroid[j] + rho * (reflect[j] - centroid[j])).collect()
            } else {
                (0..n).map(|j| centroid[j] + rho * (simplex[n].0[j] - centroid[j])).collect()
            };
            let fcv = eval(&contracted, evaluations, &mut used);
            if fcv < simplex[n].1.min(fr) {
                simplex[n] = (contracted, fcv);
            } else {
                // shrink toward the best vertex
                let best = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for j in 0..n {
                        v.0[j] = best[j] + sigma * (v.0[j] - best[j]);
                    }
                    v.1 = eval(&v.0, evaluations, &mut used);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
    let _ = start_evals;
    (simplex[0].0.clone(), simplex[0].1, used)
}
