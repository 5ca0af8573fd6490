//! Identity-balanced PK batch sampling: P distinct classes, K samples each.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-sample class labels (ground truth for the source split, pseudo labels
/// for the target split). `None` marks samples excluded from training
/// (distractors, clustering outliers).
#[derive(Debug, Clone)]
pub struct ClassAssignment {
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
}

impl ClassAssignment {
    pub fn new(labels: Vec<Option<usize>>, num_classes: usize) -> Self {
        debug_assert!(labels
            .iter()
            .flatten()
            .all(|&l| l < num_classes));
        Self {
            labels,
            num_classes,
        }
    }

    /// Sample indices grouped per class, in index order.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                members[*c].push(i);
            }
        }
        members
    }

    /// Number of samples carrying a label.
    pub fn labeled_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    pub fn label_of(&self, idx: usize) -> Option<usize> {
        self.labels[idx]
    }
}

/// Draw one PK batch: exactly `p` distinct classes, `k` samples per class
/// (with replacement inside classes that have fewer than `k` members).
/// Returns `p * k` dataset indices, grouped by class.
pub fn pk_sample(
    assignment: &ClassAssignment,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let members = assignment.class_members();
    let populated: Vec<usize> = (0..members.len()).filter(|&c| !members[c].is_empty()).collect();
    if populated.len() < p {
        return Err(Error::InsufficientClasses {
            needed: p,
            available: populated.len(),
        });
    }
    let chosen = sample_indices(rng, populated.len(), p);
    let mut batch = Vec::with_capacity(p * k);
    for ci in chosen.iter() {
        let m = &members[populated[ci]];
        if m.len() >= k {
            let picks = sample_indices(rng, m.len(), k);
            batch.extend(picks.iter().map(|i| m[i]));
        } else {
            for _ in 0..k {
                batch.push(m[rng.random_range(0..m.len())]);
            }
        }
    }
    Ok(batch)
}

/// Epoch-shaped PK batch stream: `ceil(labeled / (p*k))` batches per epoch.
#[derive(Debug)]
pub struct PkSampler {
    pub p: usize,
    pub k: usize,
}

impl PkSampler {
    pub fn new(p: usize, k: usize) -> Self {
        Self { p, k }
    }

    pub fn steps_per_epoch(&self, assignment: &ClassAssignment) -> usize {
        let n = assignment.labeled_count();
        n.div_ceil(self.p * self.k).max(1)
    }

    pub fn batch(&self, assignment: &ClassAssignment, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        pk_sample(assignment, self.p, self.k, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn assignment(class_sizes: &[usize]) -> ClassAssignment {
        let mut labels = Vec::new();
        for (c, &n) in class_sizes.iter().enumerate() {
            labels.extend(std::iter::repeat_n(Some(c), n));
        }
        ClassAssignment::new(labels, class_sizes.len())
    }

    #[test]
    fn paper_shape_batch() {
        let a = assignment(&[8; 20]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = pk_sample(&a, 16, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 64);
        let classes: BTreeSet<usize> = batch.iter().map(|&i| a.labels[i].unwrap()).collect();
        assert_eq!(classes.len(), 16);
    }

    #[test]
    fn two_class_batch() {
        let a = assignment(&[3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = pk_sample(&a, 2, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        let classes: BTreeSet<usize> = batch.iter().map(|&i| a.labels[i].unwrap()).collect();
        assert_eq!(classes.len(), 2);
    }

    #[test]
    fn singleton_class_repeats_with_replacement() {
        let a = assignment(&[1, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = pk_sample(&a, 2, 4, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        // the singleton class contributes its only sample four times
        let count0 = batch.iter().filter(|&&i| a.labels[i] == Some(0)).count();
        assert_eq!(count0, 4);
        assert!(batch.iter().filter(|&&i| a.labels[i] == Some(0)).all(|&i| i == 0));
    }

    #[test]
    fn too_few_classes_errors() {
        let a = assignment(&[4, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            pk_sample(&a, 4, 2, &mut rng),
            Err(Error::InsufficientClasses {
                needed: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn unlabeled_samples_never_appear() {
        let mut labels = vec![Some(0); 4];
        labels.extend(vec![None; 10]);
        labels.extend(vec![Some(1); 4]);
        let a = ClassAssignment::new(labels, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let batch = pk_sample(&a, 2, 4, &mut rng).unwrap();
            assert!(batch.iter().all(|&i| a.labels[i].is_some()));
        }
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        let a = assignment(&[8; 20]); // 160 labeled
        assert_eq!(PkSampler::new(16, 4).steps_per_epoch(&a), 3);
        assert_eq!(PkSampler::new(4, 4).steps_per_epoch(&a), 10);
    }
}
