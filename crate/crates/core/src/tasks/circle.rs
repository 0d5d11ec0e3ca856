//! Circle packing in the unit square or unit disk: maximize the sum of radii
//! subject to non-overlap and containment.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EvalResult, TaskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    UnitSquare,
    UnitDisk,
}

impl Domain {
    pub fn describe(self) -> &'static str {
        match self {
            Domain::UnitSquare => "unit square [0,1]x[0,1]",
            Domain::UnitDisk => "unit disk centered at the origin",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Circle {
    pub fn new(x: f64, y: f64, r: f64) -> Self {
        Self { x, y, r }
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CirclePackingInstance {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_domain")]
    pub domain: Domain,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_n() -> usize {
    26
}
fn default_domain() -> Domain {
    Domain::UnitSquare
}
fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl Default for CirclePackingInstance {
    fn default() -> Self {
        Self { n: default_n(), domain: default_domain(), tolerance: default_tolerance() }
    }
}

impl CirclePackingInstance {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.n == 0 {
            return Err(TaskError::Misconfigured("circle count must be positive".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance < 1e-6) {
            return Err(TaskError::Misconfigured("circle tolerance must lie in [0, 1e-6)".into()));
        }
        Ok(())
    }

    /// A row-major lattice of small circles; refinement grows them.
    pub fn initial_solution(&self) -> String {
        let cols = (self.n as f64).sqrt().ceil() as usize;
        let rows = self.n.div_ceil(cols);
        let mut circles = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let (c, r) = (i % cols, i / cols);
            let u = (c as f64 + 0.5) / cols as f64;
            let v = (r as f64 + 0.5) / rows as f64;
            let circle = match self.domain {
                Domain::UnitSquare => Circle::new(u, v, 0.01 / cols as f64),
                // Map the lattice into the inscribed square of the disk.
                Domain::UnitDisk => {
                    let s = std::f64::consts::FRAC_1_SQRT_2;
                    Circle::new((2.0 * u - 1.0) * s, (2.0 * v - 1.0) * s, 0.01 / cols as f64)
                }
            };
            circles.push(circle);
        }
        format_circles(&circles)
    }
}

/// `dist(a, b) - (r_a + r_b)`; negative when the circles overlap.
pub fn pair_gap(a: &Circle, b: &Circle) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    (dx * dx + dy * dy).sqrt() - (a.r + b.r)
}

/// Smallest containment slack; negative when the circle leaves the domain.
pub fn containment_slack(c: &Circle, domain: Domain) -> f64 {
    match domain {
        Domain::UnitSquare => (c.x - c.r).min(1.0 - (c.x + c.r)).min(c.y - c.r).min(1.0 - (c.y + c.r)),
        Domain::UnitDisk => 1.0 - ((c.x * c.x + c.y * c.y).sqrt() + c.r),
    }
}

/// Largest radius keeping the center inside the domain.
pub fn wall_distance(x: f64, y: f64, domain: Domain) -> f64 {
    match domain {
        Domain::UnitSquare => x.min(1.0 - x).min(y).min(1.0 - y),
        Domain::UnitDisk => 1.0 - (x * x + y * y).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub description: String,
    pub magnitude: f64,
}

/// Every constraint violated by more than `tolerance`.
pub fn violations(circles: &[Circle], domain: Domain, tolerance: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    for (i, c) in circles.iter().enumerate() {
        if c.r < 0.0 {
            out.push(Violation { description: format!("circle {i} has negative radius"), magnitude: -c.r });
        }
        let slack = containment_slack(c, domain);
        if slack < -tolerance {
            out.push(Violation { description: format!("circle {i} leaves the {}", domain.describe()), magnitude: -slack });
        }
    }
    for i in 0..circles.len() {
        for j in (i + 1)..circles.len() {
            let gap = pair_gap(&circles[i], &circles[j]);
            if gap < -tolerance {
                out.push(Violation { description: format!("circles {i} and {j} overlap"), magnitude: -gap });
            }
        }
    }
    out
}

pub fn is_feasible(circles: &[Circle], domain: Domain, tolerance: f64) -> bool {
    violations(circles, domain, tolerance).is_empty()
}

pub fn parse_circles(content: &str) -> Result<Vec<Circle>, String> {
    let value: Value = serde_json::from_str(content.trim()).map_err(|e| format!("content is not JSON: {e}"))?;
    let items = value.as_array().ok_or("content must be a JSON array of [x, y, r] triples")?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let triple = item.as_array().filter(|a| a.len() == 3).ok_or(format!("entry {i} is not an [x, y, r] triple"))?;
            let nums: Option<Vec<f64>> = triple.iter().map(Value::as_f64).collect();
            let nums = nums.ok_or(format!("entry {i} holds a non-numeric value"))?;
            Ok(Circle::new(nums[0], nums[1], nums[2]))
        })
        .collect()
}

pub fn format_circles(circles: &[Circle]) -> String {
    let rows: Vec<String> = circles.iter().map(|c| format!("[{:?}, {:?}, {:?}]", c.x, c.y, c.r)).collect();
    format!("[\n  {}\n]", rows.join(",\n  "))
}

pub fn eval_circle_packing(instance: &CirclePackingInstance, content: &str) -> EvalResult {
    let start = Instant::now();
    let circles = match parse_circles(content) {
        Ok(c) => c,
        Err(msg) => return EvalResult::invalid(msg, start.elapsed()),
    };
    if circles.len() != instance.n {
        return EvalResult::invalid(
            format!("expected {} circles, got {}", instance.n, circles.len()),
            start.elapsed(),
        );
    }
    let found = violations(&circles, instance.domain, instance.tolerance);
    if let Some(worst) = found.iter().max_by(|a, b| a.magnitude.total_cmp(&b.magnitude)) {
        return EvalResult::invalid(
            format!(
                "infeasible: {} constraint(s) violated; worst: {} by {:.3e}",
                found.len(),
                worst.description,
                worst.magnitude
            ),
            start.elapsed(),
        );
    }
    let sum: f64 = circles.iter().map(|c| c.r).sum();
    let min_gap = (0..circles.len())
        .flat_map(|i| ((i + 1)..circles.len()).map(move |j| (i, j)))
        .map(|(i, j)| pair_gap(&circles[i], &circles[j]))
        .fold(f64::INFINITY, f64::min);
    let min_wall = circles.iter().map(|c| containment_slack(c, instance.domain)).fold(f64::INFINITY, f64::min);
    let smallest = circles.iter().map(|c| c.r).fold(f64::INFINITY, f64::min);
    let mut feedback = format!("feasible; sum of radii = {sum:.8}; smallest radius = {smallest:.6}; min boundary slack = {min_wall:.3e}");
    if min_gap.is_finite() {
        feedback.push_str(&format!("; min pairwise gap = {min_gap:.3e}"));
    }
    EvalResult::scored(sum, feedback, start.elapsed())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize) -> CirclePackingInstance {
        CirclePackingInstance { n, domain: Domain::UnitSquare, tolerance: DEFAULT_TOLERANCE }
    }

    #[test]
    fn inscribed_circles() {
        let r = eval_circle_packing(&square(1), "[[0.5, 0.5, 0.5]]");
        assert!(r.valid);
        assert_eq!(r.reward, 0.5);
        let disk = CirclePackingInstance { n: 1, domain: Domain::UnitDisk, tolerance: DEFAULT_TOLERANCE };
        let r = eval_circle_packing(&disk, "[[0, 0, 1]]");
        assert!(r.valid);
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn overlapping_pair_is_invalid() {
        let r = eval_circle_packing(&square(2), "[[0.25, 0.5, 0.3], [0.75, 0.5, 0.3]]");
        assert!(!r.valid);
        assert_eq!(r.reward, 0.0);
        assert!(r.feedback.contains("overlap"), "{}", r.feedback);
    }

    #[test]
    fn malformed_content() {
        for bad in ["not json", "{}", "[[0.5, 0.5]]", "[[0.5, \"a\", 0.1]]"] {
            let r = eval_circle_packing(&square(1), bad);
            assert!(!r.valid, "{bad}");
        }
        let r = eval_circle_packing(&square(2), "[[0.5, 0.5, 0.1]]");
        assert!(r.feedback.contains("expected 2 circles"));
        let r = eval_circle_packing(&square(1), "[[0.5, 0.5, -0.1]]");
        assert!(!r.valid && r.feedback.contains("negative"));
    }

    #[test]
    fn tolerance_is_respected() {
        let r = eval_circle_packing(&square(1), "[[0.5, 0.5, 0.5000000005]]");
        assert!(r.valid);
        let r = eval_circle_packing(&square(1), "[[0.5, 0.5, 0.500000002]]");
        assert!(!r.valid);
        assert!(r.feedback.contains("leaves"));
    }

    #[test]
    fn instance_validation() {
        assert!(square(26).validate().is_ok());
        assert!(CirclePackingInstance { tolerance: 1e-6, ..square(3) }.validate().is_err());
        assert!(square(0).validate().is_err());
    }

    #[test]
    fn initial_solution_is_feasible() {
        for n in [1, 5, 26] {
            let inst = square(n);
            let r = eval_circle_packing(&inst, &inst.initial_solution());
            assert!(r.valid, "{}", r.feedback);
            let disk = CirclePackingInstance { domain: Domain::UnitDisk, ..inst };
            assert!(eval_circle_packing(&disk, &disk.initial_solution()).valid);
        }
    }

    #[test]
    fn format_round_trips() {
        let circles = vec![Circle::new(0.1, 0.2, 0.05), Circle::new(1.0 / 3.0, 0.7, 1e-9)];
        assert_eq!(parse_circles(&format_circles(&circles)).unwrap(), circles);
    }
}
