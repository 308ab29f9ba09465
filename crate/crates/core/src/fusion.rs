//! IOU-vote fusion of transductive boxes into the basic detections.

use alloc::vec::Vec;

use crate::detection::{iou, BBox};
use crate::error::invalid;
use crate::Result;

pub const DEFAULT_EPSILON: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    epsilon: f32,
}

impl FusionConfig {
    pub fn new(epsilon: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(invalid!("epsilon must lie in [0, 1], got {}", epsilon));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f32 {
        self.epsilon
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// A candidate box for association, tagged with where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    /// `true` when the box was added from the transductive set.
    pub restored: bool,
}

/// `1 - max IOU` against the basic detections; 1 when there are none.
pub fn targetness_score(b: &BBox, d_base: &[BBox]) -> f64 {
    let best = d_base.iter().map(|d| iou(b, d)).fold(0.0f64, f64::max);
    1.0 - best
}

/// Basic detections first, in order, followed by every transductive box whose
/// targetness reaches `epsilon`.
pub fn fuse(d_trans: &[BBox], d_base: &[BBox], cfg: FusionConfig) -> Vec<Candidate> {
    let eps = f64::from(cfg.epsilon);
    let mut out: Vec<Candidate> = d_base
        .iter()
        .map(|&bbox| Candidate {
            bbox,
            restored: false,
        })
        .collect();
    out.extend(
        d_trans
            .iter()
            .filter(|b| targetness_score(b, d_base) >= eps)
            .map(|&bbox| Candidate {
                bbox,
                restored: true,
            }),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corner(x: f32, y: f32, w: f32, h: f32) -> BBox {
        BBox::from_corner(x, y, w, h, 0.9)
    }

    #[test]
    fn targetness_cases() {
        let a = corner(0.0, 0.0, 2.0, 2.0);
        assert_eq!(targetness_score(&a, &[a]), 0.0);
        assert_eq!(targetness_score(&a, &[corner(9.0, 9.0, 1.0, 1.0)]), 1.0);
        assert_eq!(targetness_score(&a, &[]), 1.0);
        let s = targetness_score(&a, &[corner(1.0, 1.0, 2.0, 2.0)]);
        assert!((s - 6.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn duplicates_are_not_restored() {
        let base = vec![corner(0.0, 0.0, 2.0, 3.0), corner(5.0, 5.0, 2.0, 3.0)];
        let fused = fuse(&base, &base, FusionConfig::default());
        assert_eq!(fused.len(), 2);
        assert!(fused.iter().all(|c| !c.restored));
    }

    #[test]
    fn empty_base_takes_every_transductive_box() {
        let trans = vec![corner(0.0, 0.0, 2.0, 3.0), corner(0.5, 0.0, 2.0, 3.0)];
        let fused = fuse(&trans, &[], FusionConfig::default());
        assert_eq!(fused.len(), 2);
        assert!(fused.iter().all(|c| c.restored));
    }

    #[test]
    fn epsilon_one_keeps_only_disjoint() {
        let base = vec![corner(0.0, 0.0, 2.0, 2.0)];
        let trans = vec![corner(1.0, 1.0, 2.0, 2.0), corner(2.0, 0.0, 2.0, 2.0), corner(7.0, 7.0, 1.0, 1.0)];
        let fused = fuse(&trans, &base, FusionConfig::new(1.0).unwrap());
        let restored: Vec<BBox> = fused.iter().filter(|c| c.restored).map(|c| c.bbox).collect();
        // Touching edges have zero intersection, so they count as disjoint.
        assert_eq!(restored, vec![trans[1], trans[2]]);
    }

    #[test]
    fn tie_at_epsilon_is_restored() {
        let base = vec![corner(0.0, 0.0, 2.0, 2.0)];
        // IOU exactly 0.5: same height, half-width shift on a 1-wide union.
        let trans = vec![corner(0.0, 0.0, 1.0, 2.0)];
        let fused = fuse(&trans, &base, FusionConfig::new(0.5).unwrap());
        assert_eq!(fused.len(), 2);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        assert!(FusionConfig::new(1.5).is_err());
        assert!(FusionConfig::new(-0.1).is_err());
    }

    #[test]
    fn fused_set_shrinks_as_epsilon_rises() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut gen = |n: usize| -> Vec<BBox> {
                (0..n)
                    .map(|_| {
                        corner(
                            rng.random_range(0.0..10.0),
                            rng.random_range(0.0..10.0),
                            rng.random_range(1.0..4.0),
                            rng.random_range(1.0..4.0),
                        )
                    })
                    .collect()
            };
            let base = gen(5);
            let trans = gen(8);
            let mut prev = usize::MAX;
            for step in 0..=10 {
                let eps = step as f32 / 10.0;
                let fused = fuse(&trans, &base, FusionConfig::new(eps).unwrap());
                assert!(fused.len() <= prev);
                prev = fused.len();
                assert_eq!(&fused.iter().take(base.len()).map(|c| c.bbox).collect::<Vec<_>>(), &base);
                for c in fused.iter().filter(|c| c.restored) {
                    let worst = base.iter().map(|b| iou(&c.bbox, b)).fold(0.0, f64::max);
                    assert!(worst <= 1.0 - f64::from(eps) + 1e-9);
                }
            }
        }
    }
}
