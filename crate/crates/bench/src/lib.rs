//! Fixtures shared by the benchmarks.

use galamm::simulate::{CognitiveDesign, Scenario, SesDesign};
use galamm::sparse::CscMatrix;

/// Ses-like scenario with the interaction loading free.
pub fn ses_scenario(subjects: usize) -> Scenario {
    SesDesign { subjects, ..Default::default() }.scenario(1).expect("built-in design is valid")
}

/// Cognitive-like scenario with binomial and Gaussian items.
pub fn cognitive_scenario(subjects: usize) -> Scenario {
    CognitiveDesign { subjects, ..Default::default() }.scenario(1).expect("built-in design is valid")
}

/// Block-arrow SPD matrix: `blocks` dense diagonal blocks of size `block`
/// coupled through a dense trailing border of width `border`, the pattern of
/// `ΛᵀZᵀWZΛ + I` for nested random effects.
pub fn block_arrow(blocks: usize, block: usize, border: usize) -> CscMatrix<f64> {
    let n = blocks * block + border;
    let mut t = Vec::new();
    for b in 0..blocks {
        let o = b * block;
        for i in 0..block {
            for j in 0..block {
                let v = if i == j { block as f64 + border as f64 + 2.0 } else { 0.5 };
                t.push((o + i, o + j, v));
            }
            for k in 0..border {
                let v = 0.1 / (1.0 + k as f64);
                t.push((o + i, blocks * block + k, v));
                t.push((blocks * block + k, o + i, v));
            }
        }
    }
    for i in 0..border {
        for j in 0..border {
            let v = if i == j { (blocks * block) as f64 } else { 0.2 };
            t.push((blocks * block + i, blocks * block + j, v));
        }
    }
    CscMatrix::from_triplets(n, n, &t).expect("valid triplets")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_arrow_is_positive_definite() {
        let a = block_arrow(5, 3, 2).to_dense();
        assert_eq!(a.nrows(), 17);
        assert!(a.clone().cholesky().is_some());
        assert_eq!(a, a.transpose());
    }
}
