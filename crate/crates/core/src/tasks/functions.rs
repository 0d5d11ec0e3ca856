//! Constrained benchmark functions for global minimization and the
//! scale-free closeness reward.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EvalResult, TaskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionName {
    Eggholder,
    MishrasBird,
    KeanesBump,
}

/// Strict lower bound `0 < x_i` of Keane's bump, as a closed bound.
pub const KEANE_LOWER: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Constraint {
    /// `sum x_i^2 >= value`
    SquaredNormAtLeast { value: f64 },
    /// `sum x_i <= value`
    SumAtMost { value: f64 },
    /// `prod x_i >= value`
    ProductAtLeast { value: f64 },
}

impl Constraint {
    /// Non-negative when satisfied.
    pub fn slack(&self, x: &[f64]) -> f64 {
        match *self {
            Constraint::SquaredNormAtLeast { value } => x.iter().map(|v| v * v).sum::<f64>() - value,
            Constraint::SumAtMost { value } => value - x.iter().sum::<f64>(),
            Constraint::ProductAtLeast { value } => x.iter().product::<f64>() - value,
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Constraint::SquaredNormAtLeast { value } => format!("sum of squares >= {value}"),
            Constraint::SumAtMost { value } => format!("sum <= {value}"),
            Constraint::ProductAtLeast { value } => format!("product >= {value}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFunction {
    pub name: FunctionName,
    pub dimension: usize,
    pub bounds: Vec<(f64, f64)>,
    pub extra_constraints: Vec<Constraint>,
    pub known_min_value: f64,
    pub known_min_point: Option<Vec<f64>>,
}

impl BenchmarkFunction {
    pub fn eggholder() -> Self {
        Self {
            name: FunctionName::Eggholder,
            dimension: 2,
            bounds: vec![(-512.0, 512.0); 2],
            extra_constraints: Vec::new(),
            known_min_value: -959.6407,
            known_min_point: Some(vec![512.0, 404.2319]),
        }
    }

    /// Mishra's bird with the bounds and norm constraint as commonly stated
    /// alongside the recorded minimum. That minimum point lies inside the norm
    /// constraint's excluded disk, so the constrained optimum point is treated
    /// as unknown and only the value anchors the reward.
    pub fn mishras_bird() -> Self {
        Self {
            name: FunctionName::MishrasBird,
            dimension: 2,
            bounds: vec![(-10.0, 0.0), (-6.5, 0.0)],
            extra_constraints: vec![Constraint::SquaredNormAtLeast { value: 25.0 }],
            known_min_value: -106.7645,
            known_min_point: None,
        }
    }

    /// Keane's bump in 10, 20 or 30 dimensions; minimum points are not
    /// published, only values.
    pub fn keanes_bump(dimension: usize) -> Result<Self, TaskError> {
        let known_min_value = match dimension {
            10 => -0.747310362,
            20 => -0.803619104,
            30 => -0.818056222,
            d => return Err(TaskError::Misconfigured(format!("keanes-bump has no recorded minimum for d = {d}"))),
        };
        Ok(Self {
            name: FunctionName::KeanesBump,
            dimension,
            bounds: vec![(KEANE_LOWER, 10.0); dimension],
            extra_constraints: vec![
                Constraint::SumAtMost { value: 7.5 * dimension as f64 },
                Constraint::ProductAtLeast { value: 0.75 },
            ],
            known_min_value,
            known_min_point: None,
        })
    }

    pub fn by_name(name: FunctionName, dimension: Option<usize>) -> Result<Self, TaskError> {
        match name {
            FunctionName::Eggholder => Ok(Self::eggholder()),
            FunctionName::MishrasBird => Ok(Self::mishras_bird()),
            FunctionName::KeanesBump => Self::keanes_bump(dimension.unwrap_or(10)),
        }
    }

    pub fn formula(&self) -> &'static str {
        match self.name {
            FunctionName::Eggholder => {
                "f(x) = -(x2 + 47) sin(sqrt(|x2 + 47 + x1/2|)) - x1 sin(sqrt(|x1 - (x2 + 47)|))"
            }
            FunctionName::MishrasBird => {
                "f(x) = sin(x2) exp((1 - cos(x1))^2) + cos(x1) exp((1 - sin(x2))^2) + (x1 - x2)^2"
            }
            FunctionName::KeanesBump => {
                "f(x) = -|sum cos^4(x_i) - 2 prod cos^2(x_i)| / sqrt(sum i x_i^2)"
            }
        }
    }

    pub fn describe_constraints(&self) -> String {
        let mut parts: Vec<String> = self
            .bounds
            .iter()
            .enumerate()
            .take(3)
            .map(|(i, (lo, hi))| format!("{lo} <= x{} <= {hi}", i + 1))
            .collect();
        if self.dimension > 3 {
            parts.push(format!("(same bounds for all {} coordinates)", self.dimension));
        }
        parts.extend(self.extra_constraints.iter().map(Constraint::describe));
        parts.join(", ")
    }

    /// Uniform random points inside the bounds, as JSON contents.
    pub fn restart_seeds<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<String> {
        (0..count)
            .map(|_| {
                let p: Vec<f64> = self.bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
                serde_json::to_string(&p).expect("finite coordinates serialize")
            })
            .collect()
    }
}

fn check_dim(f: &BenchmarkFunction, x: &[f64]) -> Result<(), TaskError> {
    if x.len() != f.dimension {
        return Err(TaskError::DimensionMismatch { expected: f.dimension, got: x.len() });
    }
    Ok(())
}

pub fn eval_benchmark_function(f: &BenchmarkFunction, x: &[f64]) -> Result<f64, TaskError> {
    check_dim(f, x)?;
    Ok(match f.name {
        FunctionName::Eggholder => {
            let (x1, x2) = (x[0], x[1]);
            -(x2 + 47.0) * (x2 + 47.0 + x1 / 2.0).abs().sqrt().sin() - x1 * (x1 - (x2 + 47.0)).abs().sqrt().sin()
        }
        FunctionName::MishrasBird => {
            let (x1, x2) = (x[0], x[1]);
            x2.sin() * (1.0 - x1.cos()).powi(2).exp() + x1.cos() * (1.0 - x2.sin()).powi(2).exp() + (x1 - x2).powi(2)
        }
        FunctionName::KeanesBump => {
            let sum_cos4: f64 = x.iter().map(|v| v.cos().powi(4)).sum();
            let prod_cos2: f64 = x.iter().map(|v| v.cos().powi(2)).product();
            let weighted: f64 = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum();
            -(sum_cos4 - 2.0 * prod_cos2).abs() / weighted.sqrt()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStatus {
    pub description: String,
    /// Non-negative when satisfied.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub constraints: Vec<ConstraintStatus>,
}

impl FeasibilityReport {
    pub fn violated(&self) -> impl Iterator<Item = &ConstraintStatus> {
        self.constraints.iter().filter(|c| !(c.slack >= 0.0))
    }

    pub fn is_feasible(&self) -> bool {
        self.violated().next().is_none()
    }
}

pub fn check_constraints(f: &BenchmarkFunction, x: &[f64]) -> Result<FeasibilityReport, TaskError> {
    check_dim(f, x)?;
    let mut constraints = Vec::new();
    for (i, (&v, &(lo, hi))) in x.iter().zip(&f.bounds).enumerate() {
        constraints.push(ConstraintStatus { description: format!("x{} >= {lo}", i + 1), slack: v - lo });
        constraints.push(ConstraintStatus { description: format!("x{} <= {hi}", i + 1), slack: hi - v });
    }
    for c in &f.extra_constraints {
        constraints.push(ConstraintStatus { description: c.describe(), slack: c.slack(x) });
    }
    Ok(FeasibilityReport { constraints })
}

/// `|f*| / (|f*| + |found - f*|)`.
pub fn minimization_reward(found_value: f64, f: &BenchmarkFunction) -> f64 {
    let best = f.known_min_value;
    let r = best.abs() / (best.abs() + (found_value - best).abs());
    if r.is_finite() { r } else { 0.0 }
}

pub fn parse_point(content: &str) -> Result<Vec<f64>, String> {
    let value: Value = serde_json::from_str(content.trim()).map_err(|e| format!("content is not JSON: {e}"))?;
    let items = value.as_array().ok_or("content must be a JSON array of coordinates")?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_f64().ok_or(format!("coordinate {i} is not a number")))
        .collect()
}

pub fn eval_function_min_task(f: &BenchmarkFunction, content: &str) -> EvalResult {
    let start = Instant::now();
    let point = match parse_point(content) {
        Ok(p) => p,
        Err(msg) => return EvalResult::invalid(msg, start.elapsed()),
    };
    if point.len() != f.dimension {
        return EvalResult::invalid(
            format!("dimension mismatch: expected {} coordinates, got {}", f.dimension, point.len()),
            start.elapsed(),
        );
    }
    let report = check_constraints(f, &point).expect("dimension checked");
    let violated: Vec<String> =
        report.violated().map(|c| format!("{} (slack {:.6e})", c.description, c.slack)).collect();
    if !violated.is_empty() {
        return EvalResult::invalid(format!("infeasible: {}", violated.join("; ")), start.elapsed());
    }
    let value = eval_benchmark_function(f, &point).expect("dimension checked");
    if !value.is_finite() {
        return EvalResult::invalid(format!("f(x) is not finite ({value})"), start.elapsed());
    }
    let reward = minimization_reward(value, f);
    let mut feedback = format!(
        "f(x) = {value:.10}; known minimum f* = {}; gap = {:.6e}",
        f.known_min_value,
        value - f.known_min_value
    );
    let scale = 1e-3;
    let near: Vec<String> = report
        .constraints
        .iter()
        .filter(|c| c.slack < scale * (1.0 + c.slack.abs()))
        .filter(|c| c.slack < scale)
        .map(|c| format!("{} (slack {:.3e})", c.description, c.slack))
        .collect();
    if !near.is_empty() {
        feedback.push_str(&format!("; near-active constraints: {}", near.join(", ")));
    }
    EvalResult::scored(reward, feedback, start.elapsed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recorded_minima() {
        let egg = BenchmarkFunction::eggholder();
        assert!((eval_benchmark_function(&egg, &[512.0, 404.2319]).unwrap() + 959.6407).abs() < 1e-3);
        let bird = BenchmarkFunction::mishras_bird();
        assert!((eval_benchmark_function(&bird, &[-3.1302, -1.5822]).unwrap() + 106.7645).abs() < 1e-3);
    }

    #[test]
    fn eggholder_known_point_is_feasible() {
        let egg = BenchmarkFunction::eggholder();
        let p = egg.known_min_point.clone().unwrap();
        assert!(check_constraints(&egg, &p).unwrap().is_feasible());
    }

    #[test]
    fn mishras_recorded_point_violates_norm_constraint() {
        // (-3.1302)^2 + (-1.5822)^2 = 12.3015... < 25
        let bird = BenchmarkFunction::mishras_bird();
        let report = check_constraints(&bird, &[-3.1302, -1.5822]).unwrap();
        let violated: Vec<_> = report.violated().collect();
        assert_eq!(violated.len(), 1);
        assert!((violated[0].slack - (12.30150888 - 25.0)).abs() < 1e-9);
        assert!(bird.known_min_point.is_none());
    }

    #[test]
    fn keane_all_threes_is_feasible() {
        let k = BenchmarkFunction::keanes_bump(10).unwrap();
        let x = vec![3.0; 10];
        let report = check_constraints(&k, &x).unwrap();
        assert!(report.is_feasible());
        // 75 - 30 and 3^10 - 0.75
        assert_eq!(report.constraints[20].slack, 45.0);
        assert_eq!(report.constraints[21].slack, 59049.0 - 0.75);
        let v = eval_benchmark_function(&k, &x).unwrap();
        let c2 = 3f64.cos().powi(2);
        let expected = -(10.0 * c2 * c2 - 2.0 * c2.powi(10)).abs() / (9.0 * 55.0f64).sqrt();
        assert!((v - expected).abs() < 1e-15);
        assert!(BenchmarkFunction::keanes_bump(7).is_err());
    }

    #[test]
    fn keane_open_lower_bound() {
        let k = BenchmarkFunction::keanes_bump(10).unwrap();
        let mut x = vec![3.0; 10];
        x[0] = 0.0;
        assert!(!check_constraints(&k, &x).unwrap().is_feasible());
    }

    #[test]
    fn out_of_bounds() {
        let egg = BenchmarkFunction::eggholder();
        let report = check_constraints(&egg, &[600.0, 0.0]).unwrap();
        assert!(!report.is_feasible());
        assert!(report.violated().any(|c| c.description == "x1 <= 512"));
        assert!(matches!(check_constraints(&egg, &[1.0]), Err(TaskError::DimensionMismatch { .. })));
        assert!(eval_benchmark_function(&egg, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn reward_formula() {
        let egg = BenchmarkFunction::eggholder();
        assert_eq!(minimization_reward(-959.6407, &egg), 1.0);
        let r = minimization_reward(-900.0, &egg);
        assert!((r - 959.6407 / (959.6407 + 59.6407)).abs() < 1e-12);
        assert!((r - 0.94149).abs() < 1e-5);
        let mut last = 1.0;
        for v in [-950.0, -500.0, 0.0, 1e3, 1e6, 1e12] {
            let r = minimization_reward(v, &egg);
            assert!(r < last && r > 0.0);
            last = r;
        }
        // Overshooting below f* is penalized symmetrically.
        assert!(minimization_reward(-1000.0, &egg) < 1.0);
    }

    #[test]
    fn task_evaluation() {
        let egg = BenchmarkFunction::eggholder();
        let r = eval_function_min_task(&egg, "[512, 404.2319]");
        assert!(r.valid && r.reward >= 0.999999, "{r:?}");
        assert!(r.feedback.contains("near-active"), "{}", r.feedback);
        let r = eval_function_min_task(&egg, "[]");
        assert!(!r.valid && r.feedback.contains("dimension mismatch"));
        let r = eval_function_min_task(&egg, "[0, 0]");
        assert!(r.valid && r.reward > 0.0 && r.reward < 1.0);
        let r = eval_function_min_task(&egg, "[513, 0]");
        assert!(!r.valid && r.reward == 0.0);
        let r = eval_function_min_task(&egg, "hello");
        assert!(!r.valid);
    }

    #[test]
    fn restart_seeds_are_feasible() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for f in [BenchmarkFunction::eggholder(), BenchmarkFunction::keanes_bump(10).unwrap()] {
            for s in f.restart_seeds(5, &mut rng) {
                let p = parse_point(&s).unwrap();
                let report = check_constraints(&f, &p).unwrap();
                assert!(report.constraints[..2 * f.dimension].iter().all(|c| c.slack >= 0.0));
            }
        }
    }
}
