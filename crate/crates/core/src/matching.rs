//! Soft IoU, Hungarian assignment and its class-masked variant.
//!
//! Infeasible prediction/ground-truth pairs are never priced with sentinel
//! costs: the masked solver splits the problem into one independent
//! assignment per class.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Soft intersection over union between a soft mask `p` and a binary mask `y`:
/// `sum(p*y) / (sum(p) + sum(y) - sum(p*y))`.
pub fn siou(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape("siou", format!("{} vs {} pixels", p.len(), y.len())));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("soft mask values must lie in [0, 1]".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid("target mask must be binary".into()));
    }
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(y) {
        inter += a * b;
        sp += a;
        sy += b;
    }
    if sp + sy == 0.0 {
        return Err(Error::EmptyMasks);
    }
    Ok(inter / (sp + sy - inter))
}

/// Dense `rows x cols` cost table; rows are prediction steps, columns ground
/// truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("cost_matrix", format!("{rows}x{cols} needs {} entries, got {}", rows * cols, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cost matrix entries must be finite".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("cost_matrix", "ragged rows"));
        }
        CostMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        CostMatrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn sub(&self, rows: &[usize], cols: &[usize]) -> CostMatrix {
        let data = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).map(|(r, c)| self.get(r, c)).collect();
        CostMatrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    fn transposed(&self) -> CostMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// A partial injection between rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    fn from_pairs(costs: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
        let unmatched_rows = (0..costs.rows).filter(|r| !pairs.iter().any(|p| p.0 == *r)).collect();
        let unmatched_cols = (0..costs.cols).filter(|c| !pairs.iter().any(|p| p.1 == *c)).collect();
        Assignment {
            pairs,
            total_cost,
            unmatched_rows,
            unmatched_cols,
        }
    }

    /// Column matched to `row`, if any.
    pub fn col_for(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// How many pairs a class-constrained assignment must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    /// `min(rows, cols)` pairs or an infeasibility error.
    Complete,
    /// As many class-respecting pairs as exist.
    Maximal,
}

/// Minimum-cost maximum matching; rectangular inputs leave the surplus side
/// unmatched.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    if costs.rows == 0 || costs.cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    let pairs = if costs.rows <= costs.cols {
        solve_wide(costs)
    } else {
        solve_wide(&costs.transposed()).into_iter().map(|(c, r)| (r, c)).collect()
    };
    Ok(Assignment::from_pairs(costs, pairs))
}

/// Shortest augmenting path with potentials for `rows <= cols`.
fn solve_wide(a: &CostMatrix) -> Vec<(usize, usize)> {
    let (n, m) = (a.rows, a.cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) matched to column j; column 0 is a virtual root.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| (p[j] - 1, j - 1)).collect()
}

fn check_classes(costs: &CostMatrix, row_classes: &[usize], col_classes: &[usize]) -> Result<()> {
    if row_classes.len() != costs.rows || col_classes.len() != costs.cols {
        return Err(Error::shape(
            "masked_hungarian",
            format!(
                "{}x{} costs with {} row and {} column classes",
                costs.rows,
                costs.cols,
                row_classes.len(),
                col_classes.len()
            ),
        ));
    }
    Ok(())
}

fn group(classes: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        g.entry(c).or_default().push(i);
    }
    g
}

fn coverage_target(costs: &CostMatrix, rows: &BTreeMap<usize, Vec<usize>>, cols: &BTreeMap<usize, Vec<usize>>, coverage: Coverage) -> Result<usize> {
    let reachable: usize = rows.iter().map(|(c, r)| r.len().min(cols.get(c).map_or(0, Vec::len))).sum();
    let full = costs.rows.min(costs.cols);
    if coverage == Coverage::Complete && reachable < full {
        let detail = rows
            .iter()
            .chain(cols.iter())
            .map(|(c, _)| *c)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .map(|c| format!("class {c}: {} rows / {} cols", rows.get(&c).map_or(0, Vec::len), cols.get(&c).map_or(0, Vec::len)))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Infeasible(format!("only {reachable} of {full} pairs respect classes ({detail})")));
    }
    Ok(reachable)
}

/// Minimum-cost assignment restricted to pairs whose row and column classes
/// agree, solved as one Hungarian problem per class.
pub fn masked_hungarian(costs: &CostMatrix, row_classes: &[usize], col_classes: &[usize], coverage: Coverage) -> Result<Assignment> {
    if costs.rows == 0 || costs.cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    check_classes(costs, row_classes, col_classes)?;
    let rows = group(row_classes);
    let cols = group(col_classes);
    coverage_target(costs, &rows, &cols, coverage)?;

    let mut pairs = Vec::new();
    for (class, r) in &rows {
        let Some(c) = cols.get(class) else {
            continue;
        };
        let local = hungarian(&costs.sub(r, c))?;
        pairs.extend(local.pairs.iter().map(|&(i, j)| (r[i], c[j])));
    }
    Ok(Assignment::from_pairs(costs, pairs))
}

pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive minimum over (class-respecting) injections of maximum size.
/// Ties go to the lexicographically smallest pair list.
pub fn brute_force_assignment(costs: &CostMatrix, classes: Option<(&[usize], &[usize])>, coverage: Coverage) -> Result<Assignment> {
    if costs.rows == 0 || costs.cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    let small = costs.rows.min(costs.cols);
    if small > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(small));
    }
    let target = match classes {
        Some((rc, cc)) => {
            check_classes(costs, rc, cc)?;
            coverage_target(costs, &group(rc), &group(cc), coverage)?
        }
        None => small,
    };

    struct Search<'a> {
        costs: &'a CostMatrix,
        classes: Option<(&'a [usize], &'a [usize])>,
        target: usize,
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(f64, Vec<(usize, usize)>)>,
    }

    impl Search<'_> {
        fn run(&mut self, row: usize, cost: f64) {
            let remaining_rows = self.costs.rows - row;
            if self.current.len() + remaining_rows < self.target {
                return;
            }
            if row == self.costs.rows || self.current.len() == self.target {
                if self.current.len() == self.target {
                    let better = match &self.best {
                        None => true,
                        Some((b, pairs)) => cost < *b || (cost == *b && self.current < *pairs),
                    };
                    if better {
                        self.best = Some((cost, self.current.clone()));
                    }
                }
                return;
            }
            for col in 0..self.costs.cols {
                if self.used[col] {
                    continue;
                }
                if let Some((rc, cc)) = self.classes {
                    if rc[row] != cc[col] {
                        continue;
                    }
                }
                self.used[col] = true;
                self.current.push((row, col));
                self.run(row + 1, cost + self.costs.get(row, col));
                self.current.pop();
                self.used[col] = false;
            }
            self.run(row + 1, cost);
        }
    }

    let mut search = Search {
        costs,
        classes,
        target,
        used: vec![false; costs.cols],
        current: Vec::new(),
        best: None,
    };
    search.run(0, 0.0);
    let (_, pairs) = search.best.ok_or_else(|| Error::Infeasible("no assignment of the required size".into()))?;
    Ok(Assignment::from_pairs(costs, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn siou_examples() {
        let y = [1.0, 1.0, 0.0, 0.0];
        assert_eq!(siou(&y, &y).unwrap(), 1.0);
        assert_eq!(siou(&[0.0, 0.0, 1.0, 1.0], &y).unwrap(), 0.0);
        assert!((siou(&[0.5; 4], &y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(siou(&[0.0; 4], &[0.0; 4]), Err(Error::EmptyMasks)));
        assert!(matches!(siou(&[0.0; 3], &[0.0; 4]), Err(Error::Shape { .. })));
        assert!(siou(&[1.5, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);

        let eye = CostMatrix::from_fn(5, 5, |r, c| if r == c { 0.0 } else { 1.0 }).unwrap();
        let a = hungarian(&eye).unwrap();
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 0.0);

        let a = hungarian(&CostMatrix::from_rows(&[vec![4.5]]).unwrap()).unwrap();
        assert_eq!(a.total_cost, 4.5);

        assert!(matches!(hungarian(&CostMatrix::new(0, 3, vec![]).unwrap()), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn rectangular_leaves_surplus_unmatched() {
        let tall = CostMatrix::from_rows(&[vec![5.0], vec![0.2], vec![3.0]]).unwrap();
        let a = hungarian(&tall).unwrap();
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.unmatched_rows, vec![0, 2]);
        let wide = CostMatrix::from_rows(&[vec![5.0, 0.1, 3.0]]).unwrap();
        let a = hungarian(&wide).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.unmatched_cols, vec![0, 2]);
    }

    #[test]
    fn masked_examples() {
        let costs = CostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]).unwrap();
        let a = masked_hungarian(&costs, &[1, 2], &[2, 1], Coverage::Complete).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 18.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let costs = CostMatrix::from_fn(5, 5, |_, _| rng.gen::<f64>()).unwrap();
        let same = masked_hungarian(&costs, &[3; 5], &[3; 5], Coverage::Complete).unwrap();
        assert_eq!(same, hungarian(&costs).unwrap());
    }

    #[test]
    fn masked_infeasible_is_an_error_not_a_match() {
        let costs = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(masked_hungarian(&costs, &[1, 1], &[1, 2], Coverage::Complete), Err(Error::Infeasible(_))));
        assert!(matches!(
            brute_force_assignment(&costs, Some((&[1, 1], &[1, 2])), Coverage::Complete),
            Err(Error::Infeasible(_))
        ));
        let partial = masked_hungarian(&costs, &[1, 1], &[1, 2], Coverage::Maximal).unwrap();
        assert_eq!(partial.pairs, vec![(0, 0)]);
        assert_eq!(partial.unmatched_rows, vec![1]);
        let brute = brute_force_assignment(&costs, Some((&[1, 1], &[1, 2])), Coverage::Maximal).unwrap();
        assert_eq!(brute, partial);
    }

    #[test]
    fn brute_force_examples() {
        let a = brute_force_assignment(&CostMatrix::from_rows(&[vec![5.0]]).unwrap(), None, Coverage::Complete).unwrap();
        assert_eq!(a.total_cost, 5.0);
        let big = CostMatrix::from_fn(9, 9, |_, _| 0.0).unwrap();
        assert!(matches!(brute_force_assignment(&big, None, Coverage::Complete), Err(Error::TooLarge(9))));
        // all-equal costs: lexicographically smallest list wins
        let flat = CostMatrix::from_fn(3, 3, |_, _| 1.0).unwrap();
        let a = brute_force_assignment(&flat, None, Coverage::Complete).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..300 {
            let (r, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let costs = CostMatrix::from_fn(r, c, |_, _| rng.gen::<f64>()).unwrap();
            let h = hungarian(&costs).unwrap();
            let b = brute_force_assignment(&costs, None, Coverage::Complete).unwrap();
            assert!((h.total_cost - b.total_cost).abs() < 1e-12);
            assert_eq!(h.pairs.len(), r.min(c));
        }
    }

    #[test]
    fn masked_equals_concatenated_per_class_solutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(1..=7);
            let rc: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
            let mut cc = rc.clone();
            use rand::seq::SliceRandom;
            cc.shuffle(&mut rng);
            let costs = CostMatrix::from_fn(n, n, |_, _| rng.gen::<f64>()).unwrap();
            let masked = masked_hungarian(&costs, &rc, &cc, Coverage::Complete).unwrap();
            let mut total = 0.0;
            for class in 1..=3 {
                let rows: Vec<usize> = (0..n).filter(|&i| rc[i] == class).collect();
                let cols: Vec<usize> = (0..n).filter(|&j| cc[j] == class).collect();
                if rows.is_empty() {
                    continue;
                }
                let sub = CostMatrix::from_fn(rows.len(), cols.len(), |i, j| costs.get(rows[i], cols[j])).unwrap();
                total += hungarian(&sub).unwrap().total_cost;
            }
            assert!((masked.total_cost - total).abs() < 1e-12);
            assert!(masked.pairs.iter().all(|&(r, c)| rc[r] == cc[c]));
        }
    }

    proptest! {
        #[test]
        fn row_shift_moves_cost_not_argmin(n in 1usize..6, seed in 0u64..10_000, row in 0usize..6, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let costs = CostMatrix::from_fn(n, n, |_, _| rng.gen::<f64>()).unwrap();
            let row = row % n;
            let shifted = CostMatrix::from_fn(n, n, |r, c| costs.get(r, c) + if r == row { shift } else { 0.0 }).unwrap();
            let a = hungarian(&costs).unwrap();
            let b = hungarian(&shifted).unwrap();
            prop_assert_eq!(&a.pairs, &b.pairs);
            prop_assert!((b.total_cost - a.total_cost - shift).abs() < 1e-9);
        }

        #[test]
        fn hungarian_beats_every_permutation(n in 1usize..5, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let costs = CostMatrix::from_fn(n, n, |_, _| rng.gen::<f64>()).unwrap();
            let best = hungarian(&costs).unwrap().total_cost;
            let mut perm: Vec<usize> = (0..n).collect();
            // Heap's algorithm over all permutations
            fn heap(k: usize, perm: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
                if k == 1 { f(perm); return; }
                for i in 0..k {
                    heap(k - 1, perm, f);
                    if k.is_multiple_of(2) { perm.swap(i, k - 1) } else { perm.swap(0, k - 1) }
                }
            }
            let mut ok = true;
            heap(n, &mut perm, &mut |p| {
                let c: f64 = p.iter().enumerate().map(|(r, &c)| costs.get(r, c)).sum();
                ok &= best <= c + 1e-12;
            });
            prop_assert!(ok);
        }

        #[test]
        fn siou_properties(bits in proptest::collection::vec(0u8..2, 1..40), soft in proptest::collection::vec(0.0f64..1.0, 40)) {
            let y: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
            let n = y.len();
            let flipped: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
            if y.iter().sum::<f64>() + flipped.iter().sum::<f64>() > 0.0 {
                // both binary: symmetric
                let a = siou(&flipped, &y);
                if let (Ok(a), Ok(b)) = (a, siou(&y, &flipped)) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }
            let p: Vec<f64> = soft[..n].to_vec();
            if let Ok(s) = siou(&p, &y) {
                prop_assert!(s <= 1.0);
                let nonbinary = p.iter().any(|&v| v > 0.0 && v < 1.0);
                if nonbinary && y.contains(&1.0) {
                    prop_assert!(s < 1.0);
                }
            }
        }
    }
}
