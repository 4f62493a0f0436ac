use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{KeciError, Result};

/// Document indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles `0..n` with `seed` and cuts it into `k` test folds whose sizes
/// differ by at most one. Train indices are returned in ascending order.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(KeciError::Argument(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > n {
        return Err(KeciError::Argument(format!(
            "cannot split {n} documents into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut test = order[at..at + size].to_vec();
        test.sort_unstable();
        let mut train: Vec<usize> = order[..at]
            .iter()
            .chain(&order[at + size..])
            .copied()
            .collect();
        train.sort_unstable();
        folds.push(Fold { train, test });
        at += size;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_docs_ten_folds() {
        let folds = kfold_split(10, 10, 1).unwrap();
        assert_eq!(folds.len(), 10);
        assert!(folds
            .iter()
            .all(|f| f.test.len() == 1 && f.train.len() == 9));
        let mut all: Vec<_> = folds.iter().flat_map(|f| f.test.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(
            kfold_split(23, 4, 9).unwrap(),
            kfold_split(23, 4, 9).unwrap()
        );
        assert_ne!(
            kfold_split(23, 4, 9).unwrap(),
            kfold_split(23, 4, 10).unwrap()
        );
    }

    #[test]
    fn rejects_too_many_folds() {
        assert!(matches!(kfold_split(3, 4, 0), Err(KeciError::Argument(_))));
        assert!(matches!(kfold_split(3, 1, 0), Err(KeciError::Argument(_))));
    }
}
