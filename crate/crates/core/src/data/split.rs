use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SequenceManifest, Split};
use crate::error::{Error, Result};

/// Assigns whole sequences to train/val/test. Counts are the largest-remainder
/// rounding of `ratios · n`; which sequences land where is a seeded shuffle.
pub fn split_dataset(manifests: &[SequenceManifest], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) || ((ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9) {
        return Err(Error::InvalidConfig(format!("split ratios must be nonnegative and sum to 1, got {ratios:?}")));
    }
    let n = manifests.len();
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Train; n];
    let mut pos = 0;
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for &i in &idx[pos..pos + count] {
            out[i] = split;
        }
        pos += count;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(n: usize) -> Vec<SequenceManifest> {
        (0..n)
            .map(|i| SequenceManifest {
                sequence_id: format!("s{i}"),
                split: Split::Train,
                frames: vec![],
            })
            .collect()
    }

    fn count(s: &[Split], which: Split) -> usize {
        s.iter().filter(|&&x| x == which).count()
    }

    #[test]
    fn twenty_two_sequences_split_twelve_five_five() {
        let s = split_dataset(&seqs(22), [12.0 / 22.0, 5.0 / 22.0, 5.0 / 22.0], 3).unwrap();
        assert_eq!((count(&s, Split::Train), count(&s, Split::Val), count(&s, Split::Test)), (12, 5, 5));
    }

    #[test]
    fn single_sequence_all_train() {
        assert_eq!(split_dataset(&seqs(1), [1.0, 0.0, 0.0], 9).unwrap(), vec![Split::Train]);
    }

    #[test]
    fn deterministic_and_seed_dependent() {
        let r = [0.5, 0.25, 0.25];
        let a = split_dataset(&seqs(22), r, 7).unwrap();
        assert_eq!(a, split_dataset(&seqs(22), r, 7).unwrap());
        assert!((0..20).any(|s| split_dataset(&seqs(22), r, s).unwrap() != a));
    }

    #[test]
    fn rejects_bad_ratios() {
        assert!(split_dataset(&seqs(3), [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_dataset(&seqs(3), [1.5, -0.5, 0.0], 0).is_err());
    }
}
