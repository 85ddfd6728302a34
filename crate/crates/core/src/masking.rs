//! Masking policy for pre-training conditions.
//!
//! With probability `p_cond` the model sees a partially masked copy of the
//! target; otherwise the whole condition is hidden. Partial masks cover a
//! uniformly drawn fraction of frames using spans of at least `l_mask`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPolicy {
    /// Probability of a partial (rather than full) mask. Equal to `1 − p_drop`.
    pub p_cond: f64,
    pub n_mask_lo: f64,
    pub n_mask_hi: f64,
    /// Minimum span length in frames.
    pub l_mask: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            p_cond: 0.9,
            n_mask_lo: 0.7,
            n_mask_hi: 1.0,
            l_mask: 10,
        }
    }
}

impl MaskPolicy {
    pub fn with_p_cond(p_cond: f64) -> Self {
        MaskPolicy {
            p_cond,
            ..Default::default()
        }
    }

    pub fn p_drop(&self) -> f64 {
        1.0 - self.p_cond
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_cond) {
            return Err(Error::config(format!("p_cond {} outside [0, 1]", self.p_cond)));
        }
        if !(0.0 <= self.n_mask_lo && self.n_mask_lo <= self.n_mask_hi && self.n_mask_hi <= 1.0) {
            return Err(Error::config(format!(
                "mask fraction range [{}, {}] is not a sub-interval of [0, 1]",
                self.n_mask_lo, self.n_mask_hi
            )));
        }
        if self.l_mask == 0 {
            return Err(Error::config("l_mask must be at least 1"));
        }
        Ok(())
    }
}

/// Per-frame mask; `true` hides the frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    frame_mask: Vec<bool>,
    fully_masked: bool,
}

impl MaskPlan {
    pub fn full(len: usize) -> Self {
        MaskPlan {
            frame_mask: vec![true; len],
            fully_masked: true,
        }
    }

    /// Nothing hidden.
    pub fn none(len: usize) -> Self {
        MaskPlan {
            frame_mask: vec![false; len],
            fully_masked: false,
        }
    }

    /// Keep the first `keep` frames visible and hide the rest.
    pub fn keep_prefix(len: usize, keep: usize) -> Self {
        MaskPlan {
            frame_mask: (0..len).map(|i| i >= keep).collect(),
            fully_masked: keep == 0,
        }
    }

    pub fn from_frames(frame_mask: Vec<bool>) -> Self {
        let fully_masked = !frame_mask.is_empty() && frame_mask.iter().all(|&m| m);
        MaskPlan {
            frame_mask,
            fully_masked,
        }
    }

    pub fn frame_mask(&self) -> &[bool] {
        &self.frame_mask
    }

    pub fn fully_masked(&self) -> bool {
        self.fully_masked
    }

    pub fn len(&self) -> usize {
        self.frame_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_mask.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.frame_mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.frame_mask.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.frame_mask.len() as f64
        }
    }

    /// Maximal masked runs as `(start, length)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &m) in self.frame_mask.iter().enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, self.frame_mask.len() - s));
        }
        runs
    }

    /// The complementary plan (visible frames become hidden).
    pub fn complement(&self) -> MaskPlan {
        MaskPlan::from_frames(self.frame_mask.iter().map(|m| !m).collect())
    }
}

pub fn sample_mask_plan<R: Rng + ?Sized>(len: usize, policy: &MaskPolicy, rng: &mut R) -> MaskPlan {
    let partial = rng.random::<f64>() < policy.p_cond;
    if !partial {
        return MaskPlan::full(len);
    }
    let l_mask = policy.l_mask.max(1);
    if len <= l_mask {
        return MaskPlan {
            frame_mask: vec![true; len],
            fully_masked: false,
        };
    }
    let frac = if policy.n_mask_hi > policy.n_mask_lo {
        rng.random_range(policy.n_mask_lo..policy.n_mask_hi)
    } else {
        policy.n_mask_lo
    };
    let lo = (policy.n_mask_lo * len as f64).ceil() as usize;
    let hi = (policy.n_mask_hi * len as f64).floor() as usize;
    let target = ((frac * len as f64).round() as usize)
        .clamp(lo.min(hi), hi)
        .max(l_mask)
        .min(len);

    let mut mask = vec![false; len];
    let mut masked = 0;
    while masked < target {
        let remaining = target - masked;
        let span = if remaining < 2 * l_mask { remaining } else { l_mask };
        let starts: Vec<usize> = (0..=len - span)
            .filter(|&s| mask[s..s + span].iter().all(|&m| !m))
            .collect();
        if starts.is_empty() {
            grow_runs(&mut mask, remaining, rng);
            break;
        }
        let s = starts[rng.random_range(0..starts.len())];
        mask[s..s + span].iter_mut().for_each(|m| *m = true);
        masked += span;
    }
    MaskPlan {
        frame_mask: mask,
        fully_masked: false,
    }
}

/// Extend existing masked runs one frame at a time; runs only get longer.
fn grow_runs<R: Rng + ?Sized>(mask: &mut [bool], mut remaining: usize, rng: &mut R) {
    while remaining > 0 {
        let frontier: Vec<usize> = (0..mask.len())
            .filter(|&i| {
                !mask[i] && ((i > 0 && mask[i - 1]) || (i + 1 < mask.len() && mask[i + 1]))
            })
            .collect();
        if frontier.is_empty() {
            return;
        }
        mask[frontier[rng.random_range(0..frontier.len())]] = true;
        remaining -= 1;
    }
}

/// Zero every masked frame; visible frames are copied verbatim.
pub fn apply_mask(x1: &Mat, plan: &MaskPlan) -> Result<Mat> {
    if plan.len() != x1.rows() {
        return Err(Error::shape(
            format!("mask of length {}", x1.rows()),
            plan.len(),
        ));
    }
    let mut out = x1.clone();
    for (r, _) in plan.frame_mask.iter().enumerate().filter(|(_, m)| **m) {
        out.row_mut(r).fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unconditional_policy_always_fully_masks() {
        let policy = MaskPolicy::with_p_cond(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let plan = sample_mask_plan(57, &policy, &mut rng);
            assert!(plan.fully_masked());
            assert_eq!(plan.masked_count(), 57);
        }
    }

    #[test]
    fn reference_policy_bounds_over_1000_draws() {
        let policy = MaskPolicy::with_p_cond(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let plan = sample_mask_plan(100, &policy, &mut rng);
            let n = plan.masked_count();
            assert!((70..=100).contains(&n), "{n}");
            assert!(plan.runs().iter().all(|&(_, l)| l >= 10), "{:?}", plan.runs());
        }
    }

    #[test]
    fn short_sequences_are_masked_entirely() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = sample_mask_plan(6, &MaskPolicy::with_p_cond(1.0), &mut rng);
        assert_eq!(plan.masked_count(), 6);
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_fn(40, 5, |_, _| rng.random_range(-2.0..2.0));
        assert!(apply_mask(&x, &MaskPlan::full(40)).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(apply_mask(&x, &MaskPlan::none(40)).unwrap(), x);
        assert!(apply_mask(&x, &MaskPlan::none(39)).is_err());

        let plan = sample_mask_plan(40, &MaskPolicy::with_p_cond(1.0), &mut rng);
        let y = apply_mask(&x, &plan).unwrap();
        for r in 0..40 {
            if plan.frame_mask()[r] {
                assert!(y.row(r).iter().all(|&v| v == 0.0));
            } else {
                assert_eq!(y.row(r), x.row(r));
            }
        }
    }

    #[test]
    fn invalid_policies_are_rejected() {
        assert!(MaskPolicy { p_cond: 1.5, ..Default::default() }.validate().is_err());
        assert!(MaskPolicy { n_mask_lo: 0.8, n_mask_hi: 0.5, ..Default::default() }.validate().is_err());
        assert!(MaskPolicy { l_mask: 0, ..Default::default() }.validate().is_err());
        assert!(MaskPolicy::default().validate().is_ok());
        assert!((MaskPolicy::default().p_drop() - 0.1).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn plan_invariants(len in 1usize..300, seed in 0u64..10_000, p in 0.0f64..=1.0) {
            let policy = MaskPolicy::with_p_cond(p);
            let plan = sample_mask_plan(len, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(plan.len(), len);
            if plan.fully_masked() {
                prop_assert_eq!(plan.masked_count(), len);
            } else {
                let frac = plan.masked_fraction();
                prop_assert!((0.7 - 1e-12..=1.0).contains(&frac));
                for (_, l) in plan.runs() {
                    prop_assert!(l >= 10.min(len));
                }
            }
            // partition of [0, L)
            let comp = plan.complement();
            for i in 0..len {
                prop_assert!(plan.frame_mask()[i] ^ comp.frame_mask()[i]);
            }
            // seed determinism
            let again = sample_mask_plan(len, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(plan.clone(), again);
        }

        #[test]
        fn masking_is_idempotent(len in 1usize..80, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Mat::from_fn(len, 3, |_, _| rng.random_range(-1.0..1.0));
            let plan = sample_mask_plan(len, &MaskPolicy::default(), &mut rng);
            let once = apply_mask(&x, &plan).unwrap();
            prop_assert_eq!(apply_mask(&once, &plan).unwrap(), once);
        }
    }
}
