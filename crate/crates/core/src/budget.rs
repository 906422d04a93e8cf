//! Annotation-cost model and budget planning.
//!
//! Per-image costs follow the Pascal VOC statistics: 20 classes, 1.5 classes
//! and 2.8 objects per image on average, 1 s to verify a class, 1.48 s extra
//! per present class to count its instances, 79 s per polygon mask and 7 s
//! per extreme-point box.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Slack used when flooring sample counts, so that budgets computed from the
/// same products (e.g. `100 * 239.7 + 912 * 22.22`) admit their own allocation.
const COUNT_SLACK: f64 = 1e-6;

/// Level of supervision attached to one training image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SupervisionKind {
    ImageLevel,
    ImageLevelCounts,
    BoundingBoxes,
    FullMasks,
    Unlabeled,
}

impl SupervisionKind {
    pub const ALL: [SupervisionKind; 5] = [
        SupervisionKind::ImageLevel,
        SupervisionKind::ImageLevelCounts,
        SupervisionKind::BoundingBoxes,
        SupervisionKind::FullMasks,
        SupervisionKind::Unlabeled,
    ];

    /// Short name used on the command line and in CSV output.
    pub fn as_str(self) -> &'static str {
        match self {
            SupervisionKind::ImageLevel => "il",
            SupervisionKind::ImageLevelCounts => "il+c",
            SupervisionKind::BoundingBoxes => "bb",
            SupervisionKind::FullMasks => "full",
            SupervisionKind::Unlabeled => "none",
        }
    }
}

impl fmt::Display for SupervisionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<SupervisionKind> for String {
    fn from(k: SupervisionKind) -> String {
        k.as_str().to_string()
    }
}

impl TryFrom<String> for SupervisionKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for SupervisionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "il" | "image-level" => Ok(SupervisionKind::ImageLevel),
            "il+c" | "ilc" | "image-level-counts" => Ok(SupervisionKind::ImageLevelCounts),
            "bb" | "box" | "boxes" => Ok(SupervisionKind::BoundingBoxes),
            "full" | "mask" | "masks" => Ok(SupervisionKind::FullMasks),
            "none" | "unlabeled" => Ok(SupervisionKind::Unlabeled),
            other => Err(Error::Config(format!("unknown supervision kind `{other}`"))),
        }
    }
}

/// Average per-image annotation statistics and unit times (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub classes_total: f64,
    pub classes_present_avg: f64,
    pub objects_avg: f64,
    pub verify_time: f64,
    pub count_extra_time: f64,
    pub mask_time: f64,
    pub box_time: f64,
    /// Classes verified as absent before drawing masks or boxes. Defaults to
    /// `classes_total - classes_present_avg` but can be overridden on its own.
    pub absent_verify_classes: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            classes_total: 20.0,
            classes_present_avg: 1.5,
            objects_avg: 2.8,
            verify_time: 1.0,
            count_extra_time: 1.48,
            mask_time: 79.0,
            box_time: 7.0,
            absent_verify_classes: 18.5,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("classes_total", self.classes_total),
            ("classes_present_avg", self.classes_present_avg),
            ("objects_avg", self.objects_avg),
            ("verify_time", self.verify_time),
            ("count_extra_time", self.count_extra_time),
            ("mask_time", self.mask_time),
            ("box_time", self.box_time),
            ("absent_verify_classes", self.absent_verify_classes),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("cost model field `{name}` must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Seconds needed to annotate one image at the given supervision level.
    pub fn per_image_cost(&self, kind: SupervisionKind) -> f64 {
        let il = self.classes_total * self.verify_time;
        let absent = self.absent_verify_classes * self.verify_time;
        match kind {
            SupervisionKind::ImageLevel => il,
            SupervisionKind::ImageLevelCounts => il + self.classes_present_avg * self.count_extra_time,
            SupervisionKind::FullMasks => absent + self.objects_avg * self.mask_time,
            SupervisionKind::BoundingBoxes => absent + self.objects_avg * self.box_time,
            SupervisionKind::Unlabeled => 0.0,
        }
    }

    pub fn allocation_cost(&self, alloc: &Allocation) -> f64 {
        alloc.n_strong as f64 * self.per_image_cost(alloc.strong_kind)
            + alloc.m_weak as f64 * self.per_image_cost(alloc.weak_kind)
    }
}

/// Composition of a labelled training set: `n_strong` images at
/// `strong_kind` plus `m_weak` images at `weak_kind`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Allocation {
    pub n_strong: u64,
    pub strong_kind: SupervisionKind,
    pub m_weak: u64,
    pub weak_kind: SupervisionKind,
}

impl Allocation {
    pub fn new(n_strong: u64, strong_kind: SupervisionKind, m_weak: u64, weak_kind: SupervisionKind) -> Self {
        Allocation {
            n_strong,
            strong_kind,
            m_weak,
            weak_kind,
        }
    }
}

pub fn per_image_cost(kind: SupervisionKind, model: &CostModel) -> f64 {
    model.per_image_cost(kind)
}

pub fn allocation_cost(alloc: &Allocation, model: &CostModel) -> f64 {
    model.allocation_cost(alloc)
}

/// A duration in days, truncated (never rounded) to two decimals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaysDisplay {
    pub hundredths: u64,
    pub raw_days: f64,
}

impl DaysDisplay {
    pub fn truncated(&self) -> f64 {
        self.hundredths as f64 / 100.0
    }
}

impl fmt::Display for DaysDisplay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.hundredths / 100, self.hundredths % 100)
    }
}

pub fn seconds_to_days_display(seconds: f64) -> DaysDisplay {
    let s = seconds.max(0.0);
    DaysDisplay {
        hundredths: (s / (SECONDS_PER_DAY / 100.0)).floor() as u64,
        raw_days: s / SECONDS_PER_DAY,
    }
}

fn max_count(remaining: f64, unit: f64) -> u64 {
    if remaining < 0.0 {
        return 0;
    }
    ((remaining + COUNT_SLACK) / unit).floor() as u64
}

/// Pareto-optimal `(N, M)` allocations whose cost fits in `budget` seconds.
///
/// Each row is the largest weak set affordable next to `N` strong images;
/// rows dominated by a larger `N` with the same `M` are dropped. Zero-cost weak
/// kinds are not budget-limited and are reported with `M = 0`; use
/// [`allocations_for_budget_with_pool`] to fill them from a finite pool.
pub fn allocations_for_budget(
    budget: f64,
    strong_kind: SupervisionKind,
    weak_kind: SupervisionKind,
    model: &CostModel,
) -> Vec<Allocation> {
    allocations_for_budget_with_pool(budget, strong_kind, weak_kind, model, None)
}

pub fn allocations_for_budget_with_pool(
    budget: f64,
    strong_kind: SupervisionKind,
    weak_kind: SupervisionKind,
    model: &CostModel,
    weak_pool: Option<u64>,
) -> Vec<Allocation> {
    let budget = budget.max(0.0);
    let strong = model.per_image_cost(strong_kind);
    let weak = model.per_image_cost(weak_kind);
    let n_max = if strong > 0.0 { max_count(budget, strong) } else { 0 };

    let m_for = |n: u64| -> u64 {
        let m = if weak > 0.0 {
            max_count(budget - n as f64 * strong, weak)
        } else {
            weak_pool.unwrap_or(0)
        };
        match weak_pool {
            Some(pool) => m.min(pool),
            None => m,
        }
    };

    let mut rows = Vec::new();
    let mut next_m = None;
    for n in (0..=n_max).rev() {
        let m = m_for(n);
        if next_m != Some(m) {
            rows.push(Allocation::new(n, strong_kind, m, weak_kind));
        }
        next_m = Some(m);
    }
    rows.reverse();
    rows
}

/// Every allocation whose cost, truncated to hundredths of a day, equals
/// `hundredths` — the inverse of the display convention.
pub fn allocations_matching_display(
    hundredths: u64,
    strong_kind: SupervisionKind,
    weak_kind: SupervisionKind,
    model: &CostModel,
    weak_pool: Option<u64>,
) -> Vec<Allocation> {
    let strong = model.per_image_cost(strong_kind);
    let weak = model.per_image_cost(weak_kind);
    let hi = (hundredths + 1) as f64 * SECONDS_PER_DAY / 100.0;
    let n_max = if strong > 0.0 { ((hi / strong).ceil() as u64).saturating_add(1) } else { 0 };
    let mut rows = Vec::new();
    for n in 0..=n_max {
        let base = n as f64 * strong;
        if seconds_to_days_display(base).hundredths > hundredths {
            break;
        }
        let m_range: Vec<u64> = if weak > 0.0 {
            let m_hi = ((hi - base) / weak).ceil() as u64 + 1;
            (0..=m_hi.min(weak_pool.unwrap_or(u64::MAX))).collect()
        } else {
            vec![weak_pool.unwrap_or(0)]
        };
        for m in m_range {
            let a = Allocation::new(n, strong_kind, m, weak_kind);
            if seconds_to_days_display(model.allocation_cost(&a)).hundredths == hundredths {
                rows.push(a);
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SupervisionKind::*;

    #[test]
    fn default_costs_match_reference_table() {
        let m = CostModel::default();
        assert!((m.per_image_cost(ImageLevel) - 20.0).abs() < 1e-9);
        assert!((m.per_image_cost(ImageLevelCounts) - 22.22).abs() < 1e-9);
        assert!((m.per_image_cost(FullMasks) - 239.7).abs() < 1e-9);
        assert!((m.per_image_cost(BoundingBoxes) - 38.1).abs() < 1e-9);
        assert_eq!(m.per_image_cost(Unlabeled), 0.0);
        assert!((m.absent_verify_classes - (m.classes_total - m.classes_present_avg)).abs() < 1e-12);
    }

    #[test]
    fn allocation_examples() {
        let m = CostModel::default();
        let c = m.allocation_cost(&Allocation::new(100, FullMasks, 912, ImageLevelCounts));
        assert!((c - 44_234.64).abs() < 1e-6);
        assert_eq!(m.allocation_cost(&Allocation::new(0, FullMasks, 0, ImageLevelCounts)), 0.0);
        let c = m.allocation_cost(&Allocation::new(800, FullMasks, 0, Unlabeled));
        assert!((c - 191_760.0).abs() < 1e-6);
        assert_eq!(seconds_to_days_display(c).to_string(), "2.21");
    }

    #[test]
    fn display_truncates() {
        assert_eq!(seconds_to_days_display(191_760.0).to_string(), "2.21");
        assert_eq!(seconds_to_days_display(23_970.0).to_string(), "0.27");
        assert_eq!(seconds_to_days_display(0.0).to_string(), "0.00");
        assert_eq!(seconds_to_days_display(86_400.0 * 12.0).to_string(), "12.00");
        let d = seconds_to_days_display(191_760.0);
        assert!((d.raw_days - 2.219_444_444).abs() < 1e-8);
    }

    #[test]
    fn planner_examples() {
        let m = CostModel::default();
        let rows = allocations_for_budget(47_520.0, FullMasks, Unlabeled, &m);
        assert_eq!(rows.iter().map(|a| a.n_strong).max(), Some(198));
        assert_eq!(198, (47_520.0f64 / 239.7).floor() as u64);

        assert_eq!(
            allocations_for_budget(0.0, FullMasks, ImageLevelCounts, &m),
            vec![Allocation::new(0, FullMasks, 0, ImageLevelCounts)]
        );

        let rows = allocations_for_budget(44_234.64, FullMasks, ImageLevelCounts, &m);
        assert!(rows.contains(&Allocation::new(100, FullMasks, 912, ImageLevelCounts)));
        for a in &rows {
            assert!(m.allocation_cost(a) <= 44_234.64 + 1e-6);
        }
    }

    #[test]
    fn planner_rows_are_pareto() {
        let m = CostModel::default();
        let rows = allocations_for_budget(100_000.0, FullMasks, ImageLevelCounts, &m);
        for w in rows.windows(2) {
            assert!(w[0].n_strong < w[1].n_strong);
            assert!(w[0].m_weak > w[1].m_weak);
        }
        // no row can take one more weak image
        for a in &rows {
            let more = Allocation::new(a.n_strong, a.strong_kind, a.m_weak + 1, a.weak_kind);
            assert!(m.allocation_cost(&more) > 100_000.0);
        }
    }

    #[test]
    fn pool_fills_free_weak_kind() {
        let m = CostModel::default();
        let rows = allocations_for_budget_with_pool(23_970.0, FullMasks, Unlabeled, &m, Some(10_482));
        assert_eq!(rows, vec![Allocation::new(100, FullMasks, 10_482, Unlabeled)]);
    }

    #[test]
    fn display_band_contains_reference_composition() {
        let m = CostModel::default();
        let rows = allocations_matching_display(51, FullMasks, ImageLevelCounts, &m, None);
        assert!(rows.contains(&Allocation::new(100, FullMasks, 912, ImageLevelCounts)));
        assert!(rows
            .iter()
            .all(|a| seconds_to_days_display(m.allocation_cost(a)).hundredths == 51));
    }

    #[test]
    fn parse_kinds() {
        for k in SupervisionKind::ALL {
            assert_eq!(k.as_str().parse::<SupervisionKind>().unwrap(), k);
        }
        assert!("pixels".parse::<SupervisionKind>().is_err());
    }

    fn arb_model() -> impl Strategy<Value = CostModel> {
        (0.1f64..50.0, 0.1f64..5.0, 0.1f64..10.0, 0.1f64..3.0, 0.1f64..3.0, 1.0f64..200.0, 0.5f64..20.0, 0.1f64..40.0)
            .prop_map(|(ct, cp, oa, vt, ce, mt, bt, av)| CostModel {
                classes_total: ct,
                classes_present_avg: cp,
                objects_avg: oa,
                verify_time: vt,
                count_extra_time: ce,
                mask_time: mt,
                box_time: bt,
                absent_verify_classes: av,
            })
    }

    proptest! {
        #[test]
        fn cost_is_linear_in_strong_count(model in arb_model(), n in 0u64..5000, mw in 0u64..5000, ki in 0usize..5, kj in 0usize..5) {
            let (sk, wk) = (SupervisionKind::ALL[ki], SupervisionKind::ALL[kj]);
            let a = Allocation::new(n, sk, mw, wk);
            let b = Allocation::new(n + 1, sk, mw, wk);
            let d = model.allocation_cost(&b) - model.allocation_cost(&a);
            prop_assert!((d - model.per_image_cost(sk)).abs() <= 1e-9 * (1.0 + model.allocation_cost(&b)));
        }

        #[test]
        fn cost_is_monotone_in_times(model in arb_model(), bump in 0.0f64..10.0, ki in 0usize..5) {
            let k = SupervisionKind::ALL[ki];
            let mut bigger = model;
            bigger.verify_time += bump;
            bigger.count_extra_time += bump;
            bigger.mask_time += bump;
            bigger.box_time += bump;
            prop_assert!(bigger.per_image_cost(k) >= model.per_image_cost(k));
        }

        #[test]
        fn display_truncation_bound(s in 0.0f64..1e8) {
            let d = seconds_to_days_display(s);
            prop_assert!(d.truncated() * SECONDS_PER_DAY <= s + 1e-6);
            prop_assert!(s < (d.truncated() + 0.01) * SECONDS_PER_DAY);
        }
    }
}
