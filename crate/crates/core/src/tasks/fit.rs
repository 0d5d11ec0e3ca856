//! Parameter fitting by multi-restart Nelder-Mead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::expr::Expr;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Row-major samples.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_restarts() -> usize {
    8
}
fn default_iters() -> usize {
    200
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { restarts: default_restarts(), iters: default_iters() }
    }
}

/// Mean squared error; any flagged prediction makes it `+inf`.
pub fn mse(ast: &Expr, data: &Dataset, params: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (row, y) in data.inputs.iter().zip(&data.targets) {
        let p = ast.eval_point(row, params);
        if !p.is_finite() {
            return f64::INFINITY;
        }
        sum += (p - y) * (p - y);
    }
    let m = sum / data.len() as f64;
    if m.is_finite() { m } else { f64::INFINITY }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub train_mse: f64,
}

/// Runs `max(1, restarts)` Nelder-Mead searches of `iters` steps each, from
/// starts drawn uniformly in `[0, 1]`, and keeps the best.
pub fn fit_params(ast: &Expr, data: &Dataset, restarts: usize, iters: usize, seed: u64) -> FitResult {
    let dim = ast.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objective = |p: &[f64]| mse(ast, data, p);
    if dim == 0 {
        return FitResult { params: Vec::new(), train_mse: objective(&[]) };
    }
    let mut best: Option<FitResult> = None;
    for _ in 0..restarts.max(1) {
        let start: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let (params, value) = nelder_mead(&objective, start, iters);
        // Strict comparison keeps the earliest run on ties.
        if best.as_ref().is_none_or(|b| value < b.train_mse) {
            best = Some(FitResult { params, train_mse: value });
        }
        if best.as_ref().is_some_and(|b| b.train_mse == 0.0) {
            break;
        }
    }
    best.expect("at least one run")
}

fn centroid(simplex: &[(Vec<f64>, f64)], skip: usize) -> Vec<f64> {
    let dim = simplex[0].0.len();
    let mut c = vec![0.0; dim];
    for (i, (p, _)) in simplex.iter().enumerate() {
        if i != skip {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi;
            }
        }
    }
    let n = (simplex.len() - 1) as f64;
    c.iter_mut().for_each(|v| *v /= n);
    c
}

fn along(c: &[f64], p: &[f64], t: f64) -> Vec<f64> {
    c.iter().zip(p).map(|(ci, pi)| ci + t * (pi - ci)).collect()
}

fn build_simplex<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], step: f64) -> Vec<(Vec<f64>, f64)> {
    let mut simplex = vec![(x0.to_vec(), f(x0))];
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        p[i] += if x0[i].abs() > 1e-3 { step * x0[i].abs().max(1e-2) } else { step };
        let v = f(&p);
        simplex.push((p, v));
    }
    simplex
}

/// Minimizes `f` for `iters` steps; restarts the simplex around the incumbent
/// whenever it collapses.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: Vec<f64>, iters: usize) -> (Vec<f64>, f64) {
    let eval = |p: &[f64]| {
        let v = f(p);
        if v.is_nan() { f64::INFINITY } else { v }
    };
    let mut simplex = build_simplex(&eval, &x0, 0.25);
    let n = x0.len();
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (simplex[0].1, simplex[n].1);
        let size = simplex[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if lo == 0.0 {
            break;
        }
        if (hi - lo).abs() <= 1e-15 * lo.abs() || size < 1e-12 * (1.0 + simplex[0].0.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            let x = simplex[0].0.clone();
            simplex = build_simplex(&eval, &x, 0.05);
            continue;
        }
        let c = centroid(&simplex, n);
        let worst = simplex[n].0.clone();
        let xr = along(&c, &worst, -1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(&c, &worst, -2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(&c, &worst, -0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(&c, &worst, 0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let p = along(&best, &entry.0, 0.5);
                    let v = eval(&p);
                    *entry = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (p, v) = simplex.swap_remove(0);
    (p, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data(f: impl Fn(f64) -> f64) -> Dataset {
        let xs: Vec<f64> = (0..20).map(|i| 0.1 + i as f64 * 0.1).collect();
        Dataset { inputs: xs.iter().map(|&x| vec![x]).collect(), targets: xs.iter().map(|&x| f(x)).collect() }
    }

    #[test]
    fn recovers_logistic_form() {
        let truth: Expr = "(* (* p0 (var 0)) (- 1 (/ (var 0) p1)))".parse().unwrap();
        let data = line_data(|p| 0.8 * p * (1.0 - p / 2.0));
        let fit = fit_params(&truth, &data, 8, 200, 1);
        assert!(fit.train_mse <= 1e-10, "{fit:?}");
        assert!((fit.params[0] - 0.8).abs() < 1e-3 && (fit.params[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn constant_fits_mean() {
        let data = line_data(|x| x * x);
        let n = data.len() as f64;
        let mean = data.targets.iter().sum::<f64>() / n;
        let var = data.targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let fit = fit_params(&Expr::Param(0), &data, 8, 200, 3);
        assert!((fit.params[0] - mean).abs() < 1e-6, "{fit:?} vs {mean}");
        assert!((fit.train_mse - var).abs() < 1e-10);
    }

    #[test]
    fn zero_restarts_runs_once() {
        let data = line_data(|x| 3.0 * x);
        let e: Expr = "(* p0 (var 0))".parse().unwrap();
        let a = fit_params(&e, &data, 0, 200, 9);
        let b = fit_params(&e, &data, 1, 200, 9);
        assert_eq!(a, b);
        assert!(a.train_mse < 1e-10);
    }

    #[test]
    fn flagged_expressions_have_infinite_mse() {
        let data = line_data(|x| x);
        let e: Expr = "(log (- (var 0) 100))".parse().unwrap();
        assert_eq!(fit_params(&e, &data, 2, 20, 0).train_mse, f64::INFINITY);
        assert_eq!(mse(&e, &data, &[]), f64::INFINITY);
    }

    #[test]
    fn deterministic_per_seed() {
        let data = line_data(|x| (1.3 * x).sin());
        let e: Expr = "(sin (* p0 (var 0)))".parse().unwrap();
        assert_eq!(fit_params(&e, &data, 4, 100, 77), fit_params(&e, &data, 4, 100, 77));
    }
}
