//! Subject-independent k-fold splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Shuffle the distinct subjects (first-appearance order) by `seed` and cut
/// them into `k` contiguous near-equal groups; fold `i` tests group `i`.
pub fn make_folds<S: AsRef<str>>(subjects: &[S], k: usize, seed: u64) -> Result<FoldPlan> {
    let mut distinct: Vec<String> = Vec::new();
    for s in subjects {
        if !distinct.iter().any(|d| d == s.as_ref()) {
            distinct.push(s.as_ref().to_string());
        }
    }
    if k == 0 || distinct.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} subjects cannot fill {k} folds",
            distinct.len()
        )));
    }
    distinct.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = distinct.len();
    let bounds: Vec<usize> = (0..=k).map(|i| i * n / k).collect();
    let folds = (0..k)
        .map(|i| {
            let test = distinct[bounds[i]..bounds[i + 1]].to_vec();
            let train = distinct.iter().filter(|s| !test.contains(s)).cloned().collect();
            Fold { train, test }
        })
        .collect();
    Ok(FoldPlan { folds })
}

impl FoldPlan {
    pub fn for_samples(samples: &[Sample], k: usize, seed: u64) -> Result<Self> {
        let subjects: Vec<&str> = samples.iter().map(|s| s.subject.as_str()).collect();
        make_folds(&subjects, k, seed)
    }

    /// `(train, test)` samples of fold `i`.
    pub fn split<'a>(&self, samples: &'a [Sample], i: usize) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
        let fold = self
            .folds
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("fold {i} out of range for {} folds", self.folds.len())))?;
        let (test, train) = samples.iter().partition(|s| fold.test.contains(&s.subject));
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn subjects(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn ten_subjects_five_folds() {
        let plan = make_folds(&subjects(10), 5, 1).unwrap();
        let mut all: Vec<String> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
        assert!(plan.folds.iter().all(|f| f.test.len() == 2 && f.train.len() == 8));
        all.sort();
        let mut want = subjects(10);
        want.sort();
        assert_eq!(all, want);
        assert_eq!(plan, make_folds(&subjects(10), 5, 1).unwrap());
        assert!(make_folds(&subjects(3), 5, 1).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_relabelling(n in 2usize..30, k in 1usize..8, seed in 0u64..100) {
            prop_assume!(k <= n);
            let subs = subjects(n);
            let plan = make_folds(&subs, k, seed).unwrap();
            let mut seen = Vec::new();
            for f in &plan.folds {
                prop_assert!(f.test.iter().all(|s| !f.train.contains(s)));
                prop_assert_eq!(f.test.len() + f.train.len(), n);
                prop_assert!(f.test.len() == n / k || f.test.len() == n / k + 1);
                seen.extend(f.test.clone());
            }
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
            // A bijective renaming yields the same partition shape.
            let renamed: Vec<String> = subs.iter().map(|s| format!("x{s}")).collect();
            let plan2 = make_folds(&renamed, k, seed).unwrap();
            for (a, b) in plan.folds.iter().zip(&plan2.folds) {
                let mapped: Vec<String> = a.test.iter().map(|s| format!("x{s}")).collect();
                prop_assert_eq!(&mapped, &b.test);
            }
        }
    }
}
