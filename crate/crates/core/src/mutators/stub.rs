//! Deterministic stand-ins for a language model. Each outcome depends only on
//! the seed, the parent content and the parameters.

use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};

use super::{MutationOutcome, MutationRequest, Mutator, MutatorError};
use crate::tasks::circle::{Circle, Domain, containment_slack, format_circles, pair_gap, parse_circles, wall_distance};
use crate::tasks::expr::{BinaryOp, Expr, MAX_PARAMS, UnaryOp};

static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"-?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("valid literal pattern"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterParams {
    /// Noise scale, relative to the coordinate's range when bounds are known.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Multipliers of `sigma`; each mutation picks one uniformly.
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
}

fn default_sigma() -> f64 {
    0.01
}
fn default_scales() -> Vec<f64> {
    vec![1.0]
}

impl Default for JitterParams {
    fn default() -> Self {
        Self { sigma: default_sigma(), scales: default_scales() }
    }
}

pub struct NumericJitter {
    params: JitterParams,
    bounds: Option<Vec<(f64, f64)>>,
}

impl NumericJitter {
    pub fn new(params: JitterParams, bounds: Option<Vec<(f64, f64)>>) -> Result<Self, MutatorError> {
        if !(params.sigma >= 0.0 && params.sigma.is_finite()) {
            return Err(MutatorError::Misconfigured("jitter sigma must be finite and non-negative".into()));
        }
        if params.scales.is_empty() || params.scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(MutatorError::Misconfigured("jitter scales must be non-empty and non-negative".into()));
        }
        Ok(Self { params, bounds })
    }

    pub fn jitter(&self, parent: &str, seed: u64) -> Result<String, MutatorError> {
        if !NUMBER.is_match(parent) {
            return Err(MutatorError::UnparseableParent("no numeric literals".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = self.params.sigma * self.params.scales[rng.random_range(0..self.params.scales.len())];
        let mut index = 0;
        let out = NUMBER.replace_all(parent, |caps: &Captures<'_>| {
            let value: f64 = caps[0].parse().unwrap_or(0.0);
            let bound = self.bounds.as_ref().filter(|b| !b.is_empty()).map(|b| b[index % b.len()]);
            index += 1;
            let width = bound.map_or(1.0, |(lo, hi)| hi - lo);
            let noise: f64 = StandardNormal.sample(&mut rng);
            let mut v = value + scale * width * noise;
            if let Some((lo, hi)) = bound {
                v = v.clamp(lo, hi);
            }
            if scale == 0.0 {
                v = value;
            }
            format!("{v:?}")
        });
        Ok(out.into_owned())
    }
}

impl Mutator for NumericJitter {
    fn tag(&self) -> &str {
        "numeric-jitter"
    }

    fn mutate(&self, request: &MutationRequest<'_>) -> Result<MutationOutcome, MutatorError> {
        let content = self.jitter(request.parent_content, request.seed)?;
        Ok(MutationOutcome::success(content.clone(), content))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleRefineParams {
    /// Chance that each circle is moved and regrown.
    #[serde(default = "default_move_probability")]
    pub move_probability: f64,
    /// Standard deviation of a center move.
    #[serde(default = "default_move_sigma")]
    pub move_sigma: f64,
}

fn default_move_probability() -> f64 {
    0.15
}
fn default_move_sigma() -> f64 {
    0.05
}

impl Default for CircleRefineParams {
    fn default() -> Self {
        Self { move_probability: default_move_probability(), move_sigma: default_move_sigma() }
    }
}

pub struct CircleRefine {
    params: CircleRefineParams,
    domain: Domain,
}

/// Largest radius at `i` that keeps circle `i` inside the domain and clear of
/// every other circle, exactly in floating point.
fn max_radius(circles: &[Circle], i: usize, domain: Domain) -> f64 {
    let c = circles[i];
    let mut r = wall_distance(c.x, c.y, domain);
    for (j, o) in circles.iter().enumerate() {
        if j != i {
            let d = ((c.x - o.x).powi(2) + (c.y - o.y).powi(2)).sqrt();
            r = r.min(d - o.r);
        }
    }
    let mut r = r.max(0.0);
    // Rounding in the checks can disagree with the bound above by an ulp.
    let fits = |r: f64| {
        let cand = Circle::new(c.x, c.y, r);
        containment_slack(&cand, domain) >= 0.0
            && circles.iter().enumerate().all(|(j, o)| j == i || pair_gap(&cand, o) >= 0.0)
    };
    let mut guard = 0;
    while r > 0.0 && !fits(r) && guard < 64 {
        r = r.next_down();
        guard += 1;
    }
    if fits(r) { r } else { 0.0 }
}

fn clamp_center(x: f64, y: f64, domain: Domain) -> (f64, f64) {
    match domain {
        Domain::UnitSquare => (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)),
        Domain::UnitDisk => {
            let n = (x * x + y * y).sqrt();
            if n > 1.0 { (x / n, y / n) } else { (x, y) }
        }
    }
}

impl CircleRefine {
    pub fn new(params: CircleRefineParams, domain: Domain) -> Result<Self, MutatorError> {
        if !(0.0..=1.0).contains(&params.move_probability) || !(params.move_sigma >= 0.0) {
            return Err(MutatorError::Misconfigured("move_probability must lie in [0, 1] and move_sigma be >= 0".into()));
        }
        Ok(Self { params, domain })
    }

    pub fn refine(&self, parent: &str, seed: u64) -> Result<Vec<Circle>, MutatorError> {
        let mut circles = parse_circles(parent).map_err(MutatorError::UnparseableParent)?;
        if circles.iter().any(|c| !(c.x.is_finite() && c.y.is_finite() && c.r.is_finite())) {
            return Err(MutatorError::UnparseableParent("non-finite circle".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in circles.iter_mut() {
            c.r = c.r.max(0.0);
            if rng.random::<f64>() < self.params.move_probability {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                let (x, y) = clamp_center(c.x + self.params.move_sigma * dx, c.y + self.params.move_sigma * dy, self.domain);
                *c = Circle::new(x, y, 0.0);
            }
        }
        // Shrink anything the moves made infeasible, then grow in random order.
        for i in 0..circles.len() {
            let r = max_radius(&circles, i, self.domain);
            circles[i].r = circles[i].r.min(r);
        }
        let mut order: Vec<usize> = (0..circles.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            circles[i].r = max_radius(&circles, i, self.domain);
        }
        Ok(circles)
    }
}

impl Mutator for CircleRefine {
    fn tag(&self) -> &str {
        "circle-refine"
    }

    fn mutate(&self, request: &MutationRequest<'_>) -> Result<MutationOutcome, MutatorError> {
        let content = format_circles(&self.refine(request.parent_content, request.seed)?);
        Ok(MutationOutcome::success(content.clone(), content))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtreeParams {}

pub struct ExprSubtree {
    n_vars: usize,
    max_depth: usize,
}

const CONSTANTS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

impl ExprSubtree {
    pub fn new(_params: SubtreeParams, n_vars: usize, max_depth: usize) -> Result<Self, MutatorError> {
        if n_vars == 0 {
            return Err(MutatorError::Misconfigured("expr-subtree needs at least one input variable".into()));
        }
        Ok(Self { n_vars, max_depth })
    }

    fn leaf(&self, rng: &mut ChaCha8Rng, next_param: usize) -> Expr {
        match rng.random_range(0..10) {
            0..4 => Expr::Var(rng.random_range(0..self.n_vars)),
            4..8 => Expr::Param(rng.random_range(0..=next_param.min(MAX_PARAMS - 1))),
            _ => Expr::Const(CONSTANTS[rng.random_range(0..CONSTANTS.len())]),
        }
    }

    /// A random tree of depth at most `depth`.
    pub fn random_tree(&self, rng: &mut ChaCha8Rng, depth: usize, next_param: usize) -> Expr {
        if depth <= 1 || rng.random_bool(0.4) {
            return self.leaf(rng, next_param);
        }
        if rng.random_bool(0.3) {
            let op = UnaryOp::ALL[rng.random_range(0..UnaryOp::ALL.len())];
            Expr::unary(op, self.random_tree(rng, depth - 1, next_param))
        } else {
            let op = BinaryOp::ALL[rng.random_range(0..BinaryOp::ALL.len())];
            let a = self.random_tree(rng, depth - 1, next_param);
            let b = self.random_tree(rng, depth - 1, next_param);
            Expr::binary(op, a, b)
        }
    }

    pub fn mutate_expr(&self, parent: &str, seed: u64) -> Result<Expr, MutatorError> {
        let ast = Expr::parse_with_depth(parent.trim(), usize::MAX).map_err(|e| MutatorError::UnparseableParent(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next_param = ast.param_count();
        let mut last = ast.clone();
        for _ in 0..16 {
            let index = rng.random_range(0..ast.node_count());
            let sub = self.random_tree(&mut rng, 2, next_param);
            last = ast.replace_node(index, &sub);
            if last.depth() <= self.max_depth {
                return Ok(last);
            }
        }
        Ok(last)
    }
}

impl Mutator for ExprSubtree {
    fn tag(&self) -> &str {
        "expr-subtree"
    }

    fn mutate(&self, request: &MutationRequest<'_>) -> Result<MutationOutcome, MutatorError> {
        let content = self.mutate_expr(request.parent_content, request.seed)?.to_string();
        Ok(MutationOutcome::success(content.clone(), content))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::circle::{CirclePackingInstance, eval_circle_packing, is_feasible};
    use proptest::prelude::*;

    #[test]
    fn zero_sigma_is_identity() {
        let j = NumericJitter::new(JitterParams { sigma: 0.0, scales: vec![1.0] }, None).unwrap();
        let parent = "[512, -3.5e2, 0.25]";
        let out = j.jitter(parent, 7).unwrap();
        let a: Vec<f64> = serde_json::from_str(parent).unwrap();
        let b: Vec<f64> = serde_json::from_str(&out).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_respects_bounds() {
        let bounds = vec![(-512.0, 512.0); 2];
        let j = NumericJitter::new(JitterParams { sigma: 2.0, scales: vec![1.0] }, Some(bounds)).unwrap();
        for seed in 0..50 {
            let v: Vec<f64> = serde_json::from_str(&j.jitter("[500, -500]", seed).unwrap()).unwrap();
            assert!(v.iter().all(|x| (-512.0..=512.0).contains(x)));
        }
        assert!(matches!(j.jitter("no numbers", 0), Err(MutatorError::UnparseableParent(_))));
    }

    #[test]
    fn jitter_is_deterministic() {
        let j = NumericJitter::new(JitterParams::default(), None).unwrap();
        assert_eq!(j.jitter("[1, 2]", 3).unwrap(), j.jitter("[1, 2]", 3).unwrap());
        assert_ne!(j.jitter("[1, 2]", 3).unwrap(), j.jitter("[1, 2]", 4).unwrap());
    }

    #[test]
    fn single_circle_grows_to_inscribed() {
        let still = CircleRefine::new(CircleRefineParams { move_probability: 0.0, move_sigma: 0.05 }, Domain::UnitSquare).unwrap();
        let out = still.refine("[[0.5, 0.5, 0.01]]", 1).unwrap();
        assert_eq!(out[0].r, 0.5);
        let disk = CircleRefine::new(CircleRefineParams { move_probability: 0.0, move_sigma: 0.05 }, Domain::UnitDisk).unwrap();
        assert_eq!(disk.refine("[[0, 0, 0.01]]", 1).unwrap()[0].r, 1.0);
    }

    #[test]
    fn refine_stays_feasible_with_zero_tolerance() {
        let m = CircleRefine::new(CircleRefineParams::default(), Domain::UnitSquare).unwrap();
        let inst = CirclePackingInstance { n: 26, domain: Domain::UnitSquare, tolerance: 0.0 };
        let mut content = inst.initial_solution();
        for seed in 0..40 {
            content = format_circles(&m.refine(&content, seed).unwrap());
            let r = eval_circle_packing(&inst, &content);
            assert!(r.valid, "seed {seed}: {}", r.feedback);
        }
        assert!(matches!(m.refine("[[1, 2]]", 0), Err(MutatorError::UnparseableParent(_))));
    }

    #[test]
    fn subtree_respects_depth_and_vars() {
        let m = ExprSubtree::new(SubtreeParams {}, 2, 6).unwrap();
        let mut content = Expr::linear(2).to_string();
        for seed in 0..200 {
            let e = m.mutate_expr(&content, seed).unwrap();
            assert!(e.max_var().is_none_or(|v| v < 2));
            assert!(e.param_count() <= MAX_PARAMS);
            if e.depth() <= 6 {
                content = e.to_string();
            }
        }
        assert_eq!(m.mutate_expr("(+ p0 (var 1))", 5).unwrap(), m.mutate_expr("(+ p0 (var 1))", 5).unwrap());
        assert!(m.mutate_expr("(+ p0", 0).is_err());
    }

    proptest! {
        #[test]
        fn refine_random_parents_feasible(
            raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..0.3), 1..8),
            seed in any::<u64>(),
        ) {
            let parent: Vec<Circle> = raw.into_iter().map(|(x, y, r)| Circle::new(x, y, r)).collect();
            let m = CircleRefine::new(CircleRefineParams::default(), Domain::UnitSquare).unwrap();
            let out = m.refine(&format_circles(&parent), seed).unwrap();
            prop_assert!(is_feasible(&out, Domain::UnitSquare, 0.0));
        }
    }
}
