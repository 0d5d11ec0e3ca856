//! NSGA-II selection over the (reward, diversity) plane. Both objectives are
//! maximized.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SolutionId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub solution_id: SolutionId,
    pub reward: f64,
    pub diversity: f64,
}

impl ObjectivePoint {
    pub fn new(solution_id: SolutionId, reward: f64, diversity: f64) -> Self {
        Self { solution_id, reward, diversity }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("objective of solution {0} is not finite")]
    NonFiniteObjective(SolutionId),
    #[error("selection size must be at least 1")]
    ZeroSelection,
}

/// Fronts in rank order plus per-id rank and crowding distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontAssignment {
    pub fronts: Vec<Vec<SolutionId>>,
    pub rank: BTreeMap<SolutionId, usize>,
    pub crowding: BTreeMap<SolutionId, Crowding>,
}

/// Crowding distance; boundary points are infinite. Serialized as a number
/// or the string `"inf"` since JSON has no infinity.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Crowding(pub f64);

impl Serialize for Crowding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Crowding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(Crowding(v)),
            Repr::Text(t) if t == "inf" => Ok(Crowding(f64::INFINITY)),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad crowding value {t:?}"))),
        }
    }
}

pub fn dominates(a: &ObjectivePoint, b: &ObjectivePoint) -> bool {
    a.reward >= b.reward
        && a.diversity >= b.diversity
        && (a.reward > b.reward || a.diversity > b.diversity)
}

fn check_finite(points: &[ObjectivePoint]) -> Result<(), SelectionError> {
    match points.iter().find(|p| !p.reward.is_finite() || !p.diversity.is_finite()) {
        Some(p) => Err(SelectionError::NonFiniteObjective(p.solution_id)),
        None => Ok(()),
    }
}

/// Front indices into `points`. Each front lists indices in input order.
fn sort_indices(points: &[ObjectivePoint]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<u32>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&points[i], &points[j]) {
                dominates_list[i].push(j as u32);
                dominated_by_count[j] += 1;
            } else if dominates(&points[j], &points[i]) {
                dominates_list[j].push(i as u32);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                let j = j as usize;
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distances for the given front, aligned with its order. Each
/// interior point gets the mean normalized side of its neighbour cuboid.
fn crowding_for(front: &[ObjectivePoint]) -> Vec<f64> {
    let n = front.len();
    let mut dist = vec![0.0f64; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let objectives: [fn(&ObjectivePoint) -> f64; 2] = [|p| p.reward, |p| p.diversity];
    for objective in objectives {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            objective(&front[a]).partial_cmp(&objective(&front[b])).unwrap_or(Ordering::Equal)
        });
        let lo = objective(&front[order[0]]);
        let hi = objective(&front[order[n - 1]]);
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for w in 1..n - 1 {
            let idx = order[w];
            if dist[idx].is_infinite() {
                continue;
            }
            let prev = objective(&front[order[w - 1]]);
            let next = objective(&front[order[w + 1]]);
            dist[idx] += (next - prev) / range / objectives.len() as f64;
        }
    }
    dist
}

pub fn crowding_distance(front: &[ObjectivePoint]) -> BTreeMap<SolutionId, f64> {
    front.iter().map(|p| p.solution_id).zip(crowding_for(front)).collect()
}

pub fn nondominated_sort(points: &[ObjectivePoint]) -> Result<FrontAssignment, SelectionError> {
    check_finite(points)?;
    let fronts_idx = sort_indices(points);
    let mut fronts = Vec::with_capacity(fronts_idx.len());
    let mut rank = BTreeMap::new();
    let mut crowding = BTreeMap::new();
    for (f, idx) in fronts_idx.iter().enumerate() {
        let members: Vec<ObjectivePoint> = idx.iter().map(|&i| points[i]).collect();
        for (p, d) in members.iter().zip(crowding_for(&members)) {
            rank.insert(p.solution_id, f);
            crowding.insert(p.solution_id, Crowding(d));
        }
        fronts.push(members.iter().map(|p| p.solution_id).collect());
    }
    Ok(FrontAssignment { fronts, rank, crowding })
}

/// Fills fronts in rank order; each front is emitted by descending crowding
/// distance, ties kept in input order.
pub fn select_top(points: &[ObjectivePoint], n: usize) -> Result<Vec<SolutionId>, SelectionError> {
    if n == 0 {
        return Err(SelectionError::ZeroSelection);
    }
    check_finite(points)?;
    let mut selected = Vec::with_capacity(n.min(points.len()));
    for idx in sort_indices(points) {
        if selected.len() >= n {
            break;
        }
        let members: Vec<ObjectivePoint> = idx.iter().map(|&i| points[i]).collect();
        let dist = crowding_for(&members);
        let mut order: Vec<usize> = (0..members.len()).collect();
        // Stable sort keeps input order among equal distances.
        order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap_or(Ordering::Equal));
        for k in order {
            if selected.len() >= n {
                break;
            }
            selected.push(members[k].solution_id);
        }
    }
    Ok(selected)
}

/// Population update strategy. `Nsga2` is the full method; the others are
/// ablations that drop one of the objectives or selection altogether.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    Nsga2,
    /// Keep only the single highest-reward record.
    TopScore,
    /// Keep the `n` most diverse records, ignoring reward.
    TopDiv,
    /// Keep `n` records drawn uniformly from the whole dataset.
    Random,
}

impl SelectionMode {
    pub fn select<R: Rng + ?Sized>(
        self,
        points: &[ObjectivePoint],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<SolutionId>, SelectionError> {
        if n == 0 {
            return Err(SelectionError::ZeroSelection);
        }
        check_finite(points)?;
        match self {
            SelectionMode::Nsga2 => select_top(points, n),
            SelectionMode::TopScore => Ok(top_by(points, 1, |p| p.reward)),
            SelectionMode::TopDiv => Ok(top_by(points, n, |p| p.diversity)),
            SelectionMode::Random => {
                let k = n.min(points.len());
                let mut picked = sample(rng, points.len(), k).into_vec();
                picked.sort_unstable();
                Ok(picked.into_iter().map(|i| points[i].solution_id).collect())
            }
        }
    }
}

fn top_by(points: &[ObjectivePoint], n: usize, key: fn(&ObjectivePoint) -> f64) -> Vec<SolutionId> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| key(&points[b]).partial_cmp(&key(&points[a])).unwrap_or(Ordering::Equal));
    order.into_iter().take(n).map(|i| points[i].solution_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn pt(id: u64, r: f64, d: f64) -> ObjectivePoint {
        ObjectivePoint::new(SolutionId(id), r, d)
    }

    /// Repeatedly peel off the points dominated by nobody that remains.
    fn brute_force_fronts(points: &[ObjectivePoint]) -> Vec<BTreeSet<SolutionId>> {
        let mut remaining: Vec<ObjectivePoint> = points.to_vec();
        let mut fronts = Vec::new();
        while !remaining.is_empty() {
            let front: Vec<ObjectivePoint> = remaining
                .iter()
                .filter(|p| !remaining.iter().any(|q| dominates(q, p)))
                .copied()
                .collect();
            remaining.retain(|p| !front.iter().any(|f| f.solution_id == p.solution_id));
            fronts.push(front.iter().map(|p| p.solution_id).collect());
        }
        fronts
    }

    fn as_sets(fa: &FrontAssignment) -> Vec<BTreeSet<SolutionId>> {
        fa.fronts.iter().map(|f| f.iter().copied().collect()).collect()
    }

    #[test]
    fn dominance_cases() {
        assert!(!dominates(&pt(0, 1.0, 0.5), &pt(1, 1.0, 0.5)));
        assert!(dominates(&pt(0, 1.0, 0.6), &pt(1, 1.0, 0.5)));
        assert!(!dominates(&pt(0, 1.0, 0.4), &pt(1, 0.9, 0.5)));
        assert!(!dominates(&pt(1, 0.9, 0.5), &pt(0, 1.0, 0.4)));
    }

    fn abcd() -> Vec<ObjectivePoint> {
        vec![pt(0, 1.0, 1.0), pt(1, 0.0, 0.0), pt(2, 1.0, 0.0), pt(3, 0.0, 1.0)]
    }

    #[test]
    fn four_point_fronts() {
        let fa = nondominated_sort(&abcd()).unwrap();
        assert_eq!(
            fa.fronts,
            vec![vec![SolutionId(0)], vec![SolutionId(2), SolutionId(3)], vec![SolutionId(1)]]
        );
        assert_eq!(as_sets(&fa), brute_force_fronts(&abcd()));
        assert_eq!(fa.rank[&SolutionId(1)], 2);
    }

    #[test]
    fn identical_points_share_front() {
        let pts: Vec<_> = (0..5).map(|i| pt(i, 0.3, 0.3)).collect();
        let fa = nondominated_sort(&pts).unwrap();
        assert_eq!(fa.fronts.len(), 1);
        assert_eq!(fa.fronts[0].len(), 5);
    }

    #[test]
    fn tradeoff_curve_is_one_front() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut xs: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        let pts: Vec<_> = xs.iter().enumerate().map(|(i, &x)| pt(i as u64, x, 1.0 - x * x)).collect();
        let oracle = brute_force_fronts(&pts);
        assert_eq!(oracle.len(), 1);
        assert_eq!(as_sets(&nondominated_sort(&pts).unwrap()), oracle);
    }

    #[test]
    fn nan_is_rejected() {
        let pts = vec![pt(0, f64::NAN, 0.0)];
        assert_eq!(nondominated_sort(&pts).unwrap_err(), SelectionError::NonFiniteObjective(SolutionId(0)));
        assert!(select_top(&pts, 1).is_err());
    }

    #[test]
    fn crowding_small_fronts() {
        assert!(crowding_distance(&[pt(0, 0.0, 0.0)])[&SolutionId(0)].is_infinite());
        let two = crowding_distance(&[pt(0, 0.0, 0.0), pt(1, 1.0, 1.0)]);
        assert!(two.values().all(|d| d.is_infinite()));
    }

    #[test]
    fn crowding_collinear() {
        let d = crowding_distance(&[pt(0, 0.0, 0.0), pt(1, 0.5, 0.5), pt(2, 1.0, 1.0)]);
        assert!(d[&SolutionId(0)].is_infinite());
        assert!(d[&SolutionId(2)].is_infinite());
        assert!((d[&SolutionId(1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn crowding_zero_range_objective() {
        let d = crowding_distance(&[pt(0, 0.0, 0.5), pt(1, 0.5, 0.5), pt(2, 1.0, 0.5)]);
        assert!((d[&SolutionId(1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn select_top_examples() {
        let pts = abcd();
        assert_eq!(select_top(&pts, 2).unwrap(), vec![SolutionId(0), SolutionId(2)]);
        let all = select_top(&pts, 10).unwrap();
        assert_eq!(all, vec![SolutionId(0), SolutionId(2), SolutionId(3), SolutionId(1)]);
        assert_eq!(select_top(&pts, 1).unwrap(), vec![SolutionId(0)]);
        assert_eq!(select_top(&pts, 0).unwrap_err(), SelectionError::ZeroSelection);
    }

    #[test]
    fn select_top_prefers_crowding_in_partial_front() {
        // One front of five on a trade-off curve; the interior point with the
        // largest gap survives truncation to three, after the two extremes.
        let pts = vec![pt(0, 0.0, 1.0), pt(1, 0.1, 0.95), pt(2, 0.5, 0.6), pt(3, 0.9, 0.1), pt(4, 1.0, 0.0)];
        let fa = nondominated_sort(&pts).unwrap();
        assert_eq!(fa.fronts.len(), 1);
        let sel = select_top(&pts, 3).unwrap();
        assert_eq!(sel, vec![SolutionId(0), SolutionId(4), SolutionId(2)]);
    }

    #[test]
    fn ablation_modes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pts = abcd();
        assert_eq!(SelectionMode::TopScore.select(&pts, 3, &mut rng).unwrap(), vec![SolutionId(0)]);
        assert_eq!(
            SelectionMode::TopDiv.select(&pts, 2, &mut rng).unwrap(),
            vec![SolutionId(0), SolutionId(3)]
        );
        let random = SelectionMode::Random.select(&pts, 3, &mut rng).unwrap();
        assert_eq!(random.len(), 3);
        assert_eq!(random.iter().collect::<BTreeSet<_>>().len(), 3);
    }

    #[test]
    fn crowding_serializes_infinity() {
        let json = serde_json::to_string(&Crowding(f64::INFINITY)).unwrap();
        assert_eq!(json, "\"inf\"");
        let back: Crowding = serde_json::from_str(&json).unwrap();
        assert!(back.0.is_infinite());
    }

    fn points_strategy() -> impl Strategy<Value = Vec<ObjectivePoint>> {
        // Coarse grid values force plenty of ties and duplicates.
        prop::collection::vec((0u8..6, 0u8..6), 1..40).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (r, d))| pt(i as u64, r as f64 / 5.0, d as f64 / 5.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in points_strategy()) {
            let fa = nondominated_sort(&pts).unwrap();
            prop_assert_eq!(as_sets(&fa), brute_force_fronts(&pts));
        }

        #[test]
        fn dominance_implies_lower_rank(pts in points_strategy()) {
            let fa = nondominated_sort(&pts).unwrap();
            for a in &pts {
                for b in &pts {
                    if dominates(a, b) {
                        prop_assert!(fa.rank[&a.solution_id] < fa.rank[&b.solution_id]);
                    }
                }
            }
        }

        #[test]
        fn permutation_keeps_front_sets(pts in points_strategy(), seed in any::<u64>()) {
            use rand::{SeedableRng, seq::SliceRandom};
            let mut shuffled = pts.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(as_sets(&nondominated_sort(&pts).unwrap()), as_sets(&nondominated_sort(&shuffled).unwrap()));
        }

        #[test]
        fn selection_contains_small_first_front(pts in points_strategy(), n in 1usize..50) {
            let fa = nondominated_sort(&pts).unwrap();
            let sel: BTreeSet<_> = select_top(&pts, n).unwrap().into_iter().collect();
            prop_assert_eq!(sel.len(), n.min(pts.len()));
            if fa.fronts[0].len() <= n {
                prop_assert!(fa.fronts[0].iter().all(|id| sel.contains(id)));
            }
        }
    }
}
