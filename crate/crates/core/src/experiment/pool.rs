use std::collections::HashSet;

use super::ExperimentError;

/// Ids of the first `x` records (`S_x`) of a split holding `size` records.
pub fn make_subset(size: usize, x: usize) -> Result<Vec<usize>, ExperimentError> {
    if x > size {
        return Err(ExperimentError::Config(format!(
            "subset of {x} from {size} records"
        )));
    }
    Ok((0..x).collect())
}

/// Labeled set T and unlabeled pool U, both as element ids. U keeps its
/// stored order so that capped scoring always sees the same prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolState {
    labeled: Vec<(usize, usize)>,
    unlabeled: Vec<usize>,
    class_counts: Vec<usize>,
}

impl PoolState {
    pub fn new(
        labeled: Vec<(usize, usize)>,
        unlabeled: Vec<usize>,
        classes: usize,
    ) -> Result<Self, ExperimentError> {
        let mut seen = HashSet::new();
        for id in labeled.iter().map(|l| l.0).chain(unlabeled.iter().copied()) {
            if !seen.insert(id) {
                return Err(ExperimentError::Pool(format!("element {id} appears twice")));
            }
        }
        let mut class_counts = vec![0; classes];
        for &(id, c) in &labeled {
            *class_counts.get_mut(c).ok_or_else(|| {
                ExperimentError::Pool(format!("element {id}: class {c} out of range"))
            })? += 1;
        }
        Ok(PoolState {
            labeled,
            unlabeled,
            class_counts,
        })
    }

    pub fn labeled(&self) -> &[(usize, usize)] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn t_size(&self) -> usize {
        self.labeled.len()
    }

    pub fn u_size(&self) -> usize {
        self.unlabeled.len()
    }

    /// Moves newly labeled elements from U to T.
    pub fn add_labels(&mut self, labels: &[(usize, usize)]) -> Result<(), ExperimentError> {
        let ids: HashSet<usize> = labels.iter().map(|l| l.0).collect();
        if ids.len() != labels.len() {
            return Err(ExperimentError::Pool(
                "duplicate ids in one labeling batch".into(),
            ));
        }
        let in_pool: HashSet<usize> = self.unlabeled.iter().copied().collect();
        for &(id, c) in labels {
            if !in_pool.contains(&id) {
                return Err(ExperimentError::Pool(format!(
                    "element {id} is not in the unlabeled pool"
                )));
            }
            if c >= self.class_counts.len() {
                return Err(ExperimentError::Pool(format!(
                    "element {id}: class {c} out of range"
                )));
            }
        }
        self.unlabeled.retain(|id| !ids.contains(id));
        for &(id, c) in labels {
            self.labeled.push((id, c));
            self.class_counts[c] += 1;
        }
        Ok(())
    }

    /// Recounts classes from scratch and re-checks disjointness.
    pub fn check(&self) -> Result<(), ExperimentError> {
        let fresh = PoolState::new(
            self.labeled.clone(),
            self.unlabeled.clone(),
            self.class_counts.len(),
        )?;
        if fresh.class_counts != self.class_counts {
            return Err(ExperimentError::Pool(format!(
                "class counts {:?} but recount gives {:?}",
                self.class_counts, fresh.class_counts
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_are_prefixes() {
        assert!(make_subset(5, 0).unwrap().is_empty());
        let a = make_subset(200, 10).unwrap();
        let b = make_subset(200, 110).unwrap();
        assert_eq!(&b[..10], &a[..]);
        assert!(make_subset(5, 6).is_err());
    }

    #[test]
    fn pool_of_twenty_thousand_prefix() {
        let pool = make_subset(25_000, 20_000).unwrap();
        let initial = make_subset(25_000, 10).unwrap();
        let u: Vec<usize> = pool.into_iter().filter(|i| !initial.contains(i)).collect();
        assert_eq!(u.len(), 19_990);
    }

    #[test]
    fn labeling_moves_elements() {
        let mut p = PoolState::new(vec![(0, 0), (1, 1)], vec![2, 3, 4, 5], 2).unwrap();
        p.add_labels(&[(4, 1), (2, 1)]).unwrap();
        assert_eq!(p.unlabeled(), &[3, 5]);
        assert_eq!(p.class_counts(), &[1, 3]);
        assert_eq!(p.t_size(), 4);
        p.check().unwrap();
        assert!(p.add_labels(&[(4, 0)]).is_err(), "already labeled");
        assert!(p.add_labels(&[(3, 0), (3, 1)]).is_err(), "duplicate");
        assert!(p.add_labels(&[(3, 2)]).is_err(), "bad class");
    }

    #[test]
    fn overlapping_sets_rejected() {
        assert!(PoolState::new(vec![(1, 0)], vec![1], 2).is_err());
    }
}
