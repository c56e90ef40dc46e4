use rand::Rng;

use crate::error::{Error, Result};

/// The nucleus of a distribution: candidate token indices in descending
/// probability order and their renormalized probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    pub indices: Vec<usize>,
    pub probs: Vec<f64>,
}

const NORMALIZATION_TOL: f64 = 1e-6;

/// Top-p filtering: add tokens in descending probability (ties by ascending
/// index) until the accumulated mass strictly exceeds `p`, then renormalize.
///
/// If no prefix exceeds `p` (only possible for `p` at or near 1) the whole
/// vocabulary is the nucleus.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Nucleus> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Contract(format!("nucleus p must be in (0, 1], got {p}")));
    }
    if probs.is_empty() {
        return Err(Error::Contract("empty probability vector".into()));
    }
    if probs.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Contract("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
    }

    let mut order: Vec<usize> = (0..probs.len()).collect();
    // stable sort keeps ascending index among equal probabilities
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));

    let mut mass = 0.0;
    let mut take = order.len();
    for (k, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass > p {
            take = k + 1;
            break;
        }
    }
    order.truncate(take);
    let kept: f64 = order.iter().map(|&i| probs[i]).sum();
    let renorm = order.iter().map(|&i| probs[i] / kept).collect();
    Ok(Nucleus {
        indices: order,
        probs: renorm,
    })
}

impl Nucleus {
    /// Draws one token index from the renormalized candidates.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&i, &q) in self.indices.iter().zip(&self.probs) {
            acc += q;
            if u < acc {
                return i;
            }
        }
        *self.indices.last().expect("nucleus is never empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let n = nucleus_filter(&[0.5, 0.3, 0.2], 0.7).unwrap();
        assert_eq!(n.indices, vec![0, 1]);
        assert!((n.probs[0] - 0.625).abs() < 1e-12 && (n.probs[1] - 0.375).abs() < 1e-12);

        let n = nucleus_filter(&[0.5, 0.3, 0.2], 0.4).unwrap();
        assert_eq!(n.indices, vec![0]);
        assert_eq!(n.probs, vec![1.0]);
    }

    #[test]
    fn boundary_mass_equal_to_p_needs_one_more_token() {
        // 0.5 is not > 0.5, so token 1 joins
        let n = nucleus_filter(&[0.5, 0.25, 0.25], 0.5).unwrap();
        assert_eq!(n.indices, vec![0, 1]);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let n = nucleus_filter(&[0.25, 0.25, 0.25, 0.25], 0.3).unwrap();
        assert_eq!(n.indices, vec![0, 1]);
    }

    #[test]
    fn p_one_keeps_everything() {
        let n = nucleus_filter(&[0.7, 0.2, 0.1], 1.0).unwrap();
        assert_eq!(n.indices.len(), 3);
    }

    #[test]
    fn rejects_unnormalized_input_and_bad_p() {
        assert!(nucleus_filter(&[0.5, 0.2], 0.9).is_err());
        assert!(nucleus_filter(&[0.5, 0.5], 0.0).is_err());
        assert!(nucleus_filter(&[0.5, 0.5], 1.5).is_err());
    }
}
