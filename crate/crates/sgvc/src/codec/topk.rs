//! Selection of the most informative shallow channels.

use crate::error::{Error, Result};

/// Indices of the `k` largest stats, ties broken toward the lower index,
/// returned in ascending order.
pub fn select_topk_channels(stats: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > stats.len() {
        return Err(Error::config(format!(
            "cannot select {k} channels out of {}",
            stats.len()
        )));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| {
        stats[b]
            .partial_cmp(&stats[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_largest_and_sorts() {
        // brute-force oracle: all pairs, best two of [3,1,4,2] are 4 and 3
        assert_eq!(select_topk_channels(&[3.0, 1.0, 4.0, 2.0], 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn full_selection_returns_everything() {
        assert_eq!(select_topk_channels(&[5.0, 1.0, 2.0], 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(select_topk_channels(&[5.0, 5.0, 1.0], 1).unwrap(), vec![0]);
    }

    #[test]
    fn oversized_k_is_rejected() {
        assert!(select_topk_channels(&[1.0], 2).is_err());
    }
}
