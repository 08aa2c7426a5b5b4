//! Concentric disc / annulus toy dataset.
//!
//! Each group contributes two equal-area classes: an inner disc of radius
//! `r` (odd class id) and the surrounding annulus out to `r·√2` (even class
//! id). A disc point and an annulus point of the same group are partially
//! relevant to each other; points of different groups are irrelevant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::RelevanceLabel;
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub n_groups: usize,
    pub inner_radius: f64,
    pub centers: Vec<[f64; 2]>,
    /// Total training budget, split as evenly as possible across classes.
    pub train_points: usize,
    pub test_points_per_class: usize,
    pub seed: u64,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec::new(4, 1.0, 100, 20, 0)
    }
}

impl RingSpec {
    /// Spec with default centers: for four groups `(±3r, ±3r)`, otherwise
    /// the same kind of layout on a circle wide enough to keep groups apart.
    pub fn new(n_groups: usize, inner_radius: f64, train_points: usize, test_points_per_class: usize, seed: u64) -> Self {
        RingSpec {
            n_groups,
            inner_radius,
            centers: default_centers(n_groups, inner_radius),
            train_points,
            test_points_per_class,
            seed,
        }
    }

    pub fn outer_radius(&self) -> f64 {
        self.inner_radius * std::f64::consts::SQRT_2
    }

    pub fn n_classes(&self) -> usize {
        2 * self.n_groups
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 {
            return Err(Error::InvalidSpec("need at least one group".into()));
        }
        if !(self.inner_radius > 0.0 && self.inner_radius.is_finite()) {
            return Err(Error::InvalidSpec(format!("inner radius must be positive, got {}", self.inner_radius)));
        }
        if self.centers.len() != self.n_groups {
            return Err(Error::InvalidSpec(format!("{} centers for {} groups", self.centers.len(), self.n_groups)));
        }
        if self.centers.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("ring centers"));
        }
        let min_sep = 2.0 * self.outer_radius();
        for a in 0..self.n_groups {
            for b in a + 1..self.n_groups {
                let (ca, cb) = (self.centers[a], self.centers[b]);
                let sep = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
                if sep <= min_sep {
                    return Err(Error::InvalidSpec(format!("groups {a} and {b} overlap (separation {sep})")));
                }
            }
        }
        Ok(())
    }

    /// Training points per class (index 0 is class 1).
    pub fn train_counts(&self) -> Vec<usize> {
        let k = self.n_classes();
        (0..k).map(|c| self.train_points / k + usize::from(c < self.train_points % k)).collect()
    }

    pub fn center_of(&self, class_id: u32) -> [f64; 2] {
        self.centers[(class_id as usize - 1) / 2]
    }
}

fn default_centers(n_groups: usize, r: f64) -> Vec<[f64; 2]> {
    let spacing = 3.0 * r;
    match n_groups {
        1 => return vec![[0.0, 0.0]],
        4 => return vec![[spacing, spacing], [-spacing, spacing], [-spacing, -spacing], [spacing, -spacing]],
        _ => {}
    }
    let radius = (spacing * std::f64::consts::SQRT_2).max(spacing / (std::f64::consts::PI / n_groups as f64).sin());
    (0..n_groups)
        .map(|k| {
            let angle = std::f64::consts::FRAC_PI_4 + 2.0 * std::f64::consts::PI * k as f64 / n_groups as f64;
            [radius * angle.cos(), radius * angle.sin()]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub xy: [f64; 2],
    /// 1-based; odd ids are discs, even ids annuli.
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingDataset {
    pub train: Vec<LabeledPoint>,
    pub test: Vec<LabeledPoint>,
}

fn sample_point(spec: &RingSpec, class_id: u32, rng: &mut SeededRng) -> LabeledPoint {
    let theta = 2.0 * std::f64::consts::PI * rng.uniform();
    // 1 - u lies in (0, 1]: disc radii in (0, r], annulus radii in (r, r√2]
    let u = 1.0 - rng.uniform();
    let r_in = spec.inner_radius;
    let r_out = spec.outer_radius();
    let radius = if class_id % 2 == 1 { r_in * u.sqrt() } else { (r_in * r_in + u * (r_out * r_out - r_in * r_in)).sqrt() };
    let c = spec.center_of(class_id);
    LabeledPoint { xy: [c[0] + radius * theta.cos(), c[1] + radius * theta.sin()], class_id }
}

/// Draws the train and test sets, area-uniform within each class region.
pub fn generate_rings(spec: &RingSpec) -> Result<RingDataset> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let mut train = Vec::with_capacity(spec.train_points);
    for (c, &count) in spec.train_counts().iter().enumerate() {
        for _ in 0..count {
            train.push(sample_point(spec, c as u32 + 1, &mut rng));
        }
    }
    let mut test = Vec::with_capacity(spec.n_classes() * spec.test_points_per_class);
    for c in 1..=spec.n_classes() as u32 {
        for _ in 0..spec.test_points_per_class {
            test.push(sample_point(spec, c, &mut rng));
        }
    }
    Ok(RingDataset { train, test })
}

/// Relevance between two classes of the default four-group layout.
pub fn ring_relevance(class_a: u32, class_b: u32) -> Result<RelevanceLabel> {
    ring_relevance_in(class_a, class_b, 4)
}

/// Same class is positive, disc and annulus of one group are partial,
/// everything else negative.
pub fn ring_relevance_in(class_a: u32, class_b: u32, n_groups: usize) -> Result<RelevanceLabel> {
    let max = 2 * n_groups as u32;
    for c in [class_a, class_b] {
        if c == 0 || c > max {
            return Err(Error::ClassOutOfRange(c));
        }
    }
    Ok(if class_a == class_b {
        RelevanceLabel::Positive
    } else if class_a.div_ceil(2) == class_b.div_ceil(2) {
        RelevanceLabel::Partial
    } else {
        RelevanceLabel::Negative
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radius(p: &LabeledPoint, spec: &RingSpec) -> f64 {
        let c = spec.center_of(p.class_id);
        ((p.xy[0] - c[0]).powi(2) + (p.xy[1] - c[1]).powi(2)).sqrt()
    }

    #[test]
    fn equal_area_radius() {
        let spec = RingSpec::new(4, 1.0, 100, 20, 0);
        assert!((spec.outer_radius() - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(spec.centers, vec![[3.0, 3.0], [-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0]]);
        spec.validate().unwrap();
    }

    #[test]
    fn counts_and_region_membership() {
        let spec = RingSpec::new(4, 1.0, 100, 20, 3);
        assert_eq!(spec.train_counts(), vec![13, 13, 13, 13, 12, 12, 12, 12]);
        let data = generate_rings(&spec).unwrap();
        assert_eq!(data.train.len(), 100);
        assert_eq!(data.test.len(), 160);
        for p in data.train.iter().chain(&data.test) {
            let r = radius(p, &spec);
            if p.class_id % 2 == 1 {
                assert!(r <= spec.inner_radius + 1e-12);
            } else {
                assert!(r > spec.inner_radius && r <= spec.outer_radius() + 1e-12, "{r}");
            }
        }
        for c in 1..=8 {
            assert_eq!(data.test.iter().filter(|p| p.class_id == c).count(), 20);
        }
    }

    #[test]
    fn disc_second_moment() {
        let spec = RingSpec { train_points: 800_000, test_points_per_class: 0, ..RingSpec::new(4, 1.5, 0, 0, 11) };
        let data = generate_rings(&spec).unwrap();
        let class1: Vec<f64> = data.train.iter().filter(|p| p.class_id == 1).map(|p| radius(p, &spec).powi(2)).collect();
        assert_eq!(class1.len(), 100_000);
        let mean = class1.iter().sum::<f64>() / class1.len() as f64;
        let expected = 1.5 * 1.5 / 2.0;
        assert!((mean - expected).abs() / expected < 0.01, "{mean}");
        let class2: Vec<f64> = data.train.iter().filter(|p| p.class_id == 2).map(|p| radius(p, &spec).powi(2)).collect();
        let mean2 = class2.iter().sum::<f64>() / class2.len() as f64;
        // (r_in² + r_out²)/2 = 1.5 r²
        assert!((mean2 - 1.5 * 2.25).abs() / (1.5 * 2.25) < 0.01, "{mean2}");
    }

    #[test]
    fn equal_area_densities() {
        // Classes of one group are equal area, so points drawn uniformly over
        // the full outer disc land in either class half of the time.
        let spec = RingSpec::default();
        let mut rng = SeededRng::new(4);
        let n = 100_000;
        let r_out = spec.outer_radius();
        let mut inner = 0usize;
        let mut drawn = 0usize;
        while drawn < 2 * n {
            let x = rng.uniform_range(-r_out, r_out);
            let y = rng.uniform_range(-r_out, r_out);
            let r2 = x * x + y * y;
            if r2 > r_out * r_out {
                continue;
            }
            drawn += 1;
            if r2 <= spec.inner_radius * spec.inner_radius {
                inner += 1;
            }
        }
        let ratio = inner as f64 / (drawn - inner) as f64;
        assert!((ratio - 1.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn deterministic_by_seed() {
        let spec = RingSpec::new(4, 1.0, 100, 20, 42);
        assert_eq!(generate_rings(&spec).unwrap(), generate_rings(&spec).unwrap());
        let other = RingSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate_rings(&spec).unwrap(), generate_rings(&other).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = RingSpec::default();
        spec.centers[1] = [3.5, 3.0];
        assert!(matches!(generate_rings(&spec), Err(Error::InvalidSpec(_))));
        assert!(generate_rings(&RingSpec { inner_radius: 0.0, ..RingSpec::default() }).is_err());
        assert!(generate_rings(&RingSpec { centers: vec![], ..RingSpec::default() }).is_err());
        for g in [1, 2, 3, 6] {
            RingSpec::new(g, 0.7, 10, 1, 0).validate().unwrap();
        }
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(ring_relevance(1, 1).unwrap(), RelevanceLabel::Positive);
        assert_eq!(ring_relevance(1, 2).unwrap(), RelevanceLabel::Partial);
        assert_eq!(ring_relevance(1, 3).unwrap(), RelevanceLabel::Negative);
        assert_eq!(ring_relevance(2, 1).unwrap(), RelevanceLabel::Partial);
        assert_eq!(ring_relevance(0, 1), Err(Error::ClassOutOfRange(0)));
        assert_eq!(ring_relevance(1, 9), Err(Error::ClassOutOfRange(9)));
    }

    #[test]
    fn relevance_is_symmetric_partition() {
        let mut counts = [0usize; 3];
        for a in 1..=8 {
            for b in 1..=8 {
                let l = ring_relevance(a, b).unwrap();
                assert_eq!(l, ring_relevance(b, a).unwrap());
                counts[l as usize] += 1;
            }
        }
        assert_eq!(counts, [8, 8, 48]);
    }
}
