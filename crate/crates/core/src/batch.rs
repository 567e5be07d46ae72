use rand::seq::SliceRandom;
use rand::Rng;

/// Splits `indices` into `⌈n / max_size⌉` batches whose sizes differ by at
/// most one, so no trailing batch is left with only a handful of negatives.
pub fn even_batches(indices: &[usize], max_size: usize) -> Vec<Vec<usize>> {
    assert!(max_size > 0, "batch size must be positive");
    let n = indices.len();
    if n == 0 {
        return Vec::new();
    }
    let count = n.div_ceil(max_size);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let len = base + usize::from(b < extra);
        out.push(indices[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Shuffled copy of `indices`.
pub fn shuffled(indices: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(rng);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_balanced_and_cover_everything() {
        let idx: Vec<usize> = (0..2000).collect();
        let batches = even_batches(&idx, 128);
        assert_eq!(batches.len(), 16);
        assert!(batches.iter().all(|b| b.len() == 125));
        let idx: Vec<usize> = (0..10).collect();
        let batches = even_batches(&idx, 4);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert_eq!(batches.concat(), idx);
        assert!(even_batches(&[], 4).is_empty());
    }
}
