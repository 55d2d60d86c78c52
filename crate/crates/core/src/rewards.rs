//! Verifiable reward functions.
//!
//! Two rule-based formulas (object counting and text rendering accuracy) are
//! implemented exactly, plus two-dimensional analogs that score a terminal
//! sample against its condition.

use crate::error::{Error, Result};
use crate::numerics::dist_sq;

/// `1 - |n_gen - n_ref| / n_ref`. Not clamped: overshooting by more than
/// `n_ref` gives a negative reward.
pub fn counting_reward(n_gen: u64, n_ref: u64) -> Result<f64> {
    if n_ref == 0 {
        return Err(Error::InvalidArgument("reference count must be at least 1".into()));
    }
    let diff = n_gen.abs_diff(n_ref) as f64;
    Ok(1.0 - diff / n_ref as f64)
}

/// `max(1 - n_e / n_ref, 0)`.
pub fn edit_distance_reward(n_e: u64, n_ref: u64) -> Result<f64> {
    if n_ref == 0 {
        return Err(Error::InvalidArgument("reference length must be at least 1".into()));
    }
    Ok((1.0 - n_e as f64 / n_ref as f64).max(0.0))
}

/// Insert/delete/substitute edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Index of the nearest centre; ties go to the lowest index.
pub fn nearest_center(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = dist_sq(x, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// 1 if the nearest centre to `x` is `centers[c]`, else 0.
pub fn mode_match_reward(x: &[f64], c: usize, centers: &[Vec<f64>]) -> f64 {
    if nearest_center(x, centers) == c {
        1.0
    } else {
        0.0
    }
}

/// `exp(-‖x - target‖² / (2 s²))`.
pub fn distance_reward(x: &[f64], target: &[f64], scale: f64) -> f64 {
    (-dist_sq(x, target) / (2.0 * scale * scale)).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() >= 2
            && (self.min[0]..=self.max[0]).contains(&x[0])
            && (self.min[1]..=self.max[1]).contains(&x[1])
    }
}

/// Reward used by the trainers; `score(x, c)` is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    ModeMatch { centers: Vec<Vec<f64>> },
    /// Gaussian bump around `targets[c]`.
    Distance { targets: Vec<Vec<f64>>, scale: f64 },
    /// 1 inside `regions[c]`, else 0.
    Region { regions: Vec<Rect> },
    /// Counting analog: the requested count is `c + 1`, the generated count
    /// is `round(‖x‖ / unit)`.
    Counting { unit: f64 },
    /// Text analog: `x` is decoded to a two-letter word (one letter per
    /// coordinate, `unit` wide bins from 'a') and compared to `words[c]`.
    EditDistance { words: Vec<String>, unit: f64 },
}

impl RewardSpec {
    pub fn validate(&self, conditions: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        match self {
            RewardSpec::ModeMatch { centers } => {
                if centers.len() < 2 || centers.len() < conditions {
                    return bad("mode_match needs at least two centres and one per condition");
                }
                for i in 0..centers.len() {
                    for j in 0..i {
                        if centers[i] == centers[j] {
                            return bad("mode_match centres must be distinct");
                        }
                    }
                }
            }
            RewardSpec::Distance { targets, scale } => {
                if targets.len() < conditions || !(*scale > 0.0) {
                    return bad("distance needs one target per condition and scale > 0");
                }
            }
            RewardSpec::Region { regions } => {
                if regions.len() < conditions
                    || regions
                        .iter()
                        .any(|r| r.min[0] > r.max[0] || r.min[1] > r.max[1])
                {
                    return bad("region needs one well-formed rectangle per condition");
                }
            }
            RewardSpec::Counting { unit } => {
                if !(*unit > 0.0) {
                    return bad("counting unit must be positive");
                }
            }
            RewardSpec::EditDistance { words, unit } => {
                if words.len() < conditions || words.iter().any(String::is_empty) || !(*unit > 0.0)
                {
                    return bad("edit_distance needs a non-empty word per condition and unit > 0");
                }
            }
        }
        Ok(())
    }

    pub fn score(&self, x: &[f64], c: usize) -> f64 {
        match self {
            RewardSpec::ModeMatch { centers } => mode_match_reward(x, c, centers),
            RewardSpec::Distance { targets, scale } => distance_reward(x, &targets[c], *scale),
            RewardSpec::Region { regions } => f64::from(u8::from(regions[c].contains(x))),
            RewardSpec::Counting { unit } => {
                let n_gen = (crate::numerics::norm_sq(x).sqrt() / unit).round() as u64;
                counting_reward(n_gen, c as u64 + 1).expect("n_ref >= 1")
            }
            RewardSpec::EditDistance { words, unit } => {
                let decoded: String = x
                    .iter()
                    .map(|v| {
                        let bin = (v / unit + 13.0).floor().clamp(0.0, 25.0) as u8;
                        (b'a' + bin) as char
                    })
                    .collect();
                let word = &words[c];
                let n_e = levenshtein(&decoded, word) as u64;
                edit_distance_reward(n_e, word.chars().count() as u64).expect("non-empty word")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_cases() {
        assert_eq!(counting_reward(4, 4).unwrap(), 1.0);
        assert_eq!(counting_reward(3, 4).unwrap(), 0.75);
        assert_eq!(counting_reward(9, 4).unwrap(), -0.25);
        assert!(counting_reward(1, 0).is_err());
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance_reward(0, 8).unwrap(), 1.0);
        assert_eq!(edit_distance_reward(2, 8).unwrap(), 0.75);
        assert_eq!(edit_distance_reward(20, 8).unwrap(), 0.0);
        assert!(edit_distance_reward(0, 0).is_err());
    }

    #[test]
    fn levenshtein_cases() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("flow", "flow"), 0);
    }

    #[test]
    fn mode_match_cases() {
        let centers = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 5.0]];
        assert_eq!(mode_match_reward(&[1.0, 0.0], 0, &centers), 1.0);
        assert_eq!(mode_match_reward(&[-1.0, 0.0], 0, &centers), 0.0);
        // Midpoint of centres 0 and 1 breaks toward index 0.
        assert_eq!(mode_match_reward(&[0.0, 0.0], 0, &centers), 1.0);
        assert_eq!(mode_match_reward(&[0.0, 0.0], 1, &centers), 0.0);
    }

    #[test]
    fn distance_cases() {
        assert_eq!(distance_reward(&[1.0, 2.0], &[1.0, 2.0], 0.5), 1.0);
        let r = distance_reward(&[0.0, 0.5], &[0.0, 0.0], 0.5);
        assert!((r - (-0.5f64).exp()).abs() < 1e-15);
        assert!((r - 0.6065).abs() < 1e-4);
        let far = distance_reward(&[0.0, 1.0], &[0.0, 0.0], 0.5);
        assert!(far < r);
    }

    #[test]
    fn spec_scores() {
        let counting = RewardSpec::Counting { unit: 1.0 };
        assert_eq!(counting.score(&[3.0, 0.0], 2), 1.0);
        assert_eq!(counting.score(&[2.0, 0.0], 3), 0.5);
        let region = RewardSpec::Region {
            regions: vec![Rect {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            }],
        };
        assert_eq!(region.score(&[0.5, 0.5], 0), 1.0);
        assert_eq!(region.score(&[1.5, 0.5], 0), 0.0);
        let text = RewardSpec::EditDistance {
            words: vec!["nn".into()],
            unit: 1.0,
        };
        assert_eq!(text.score(&[0.5, 0.2], 0), 1.0);
        assert_eq!(text.score(&[1.5, 0.2], 0), 0.5);
    }

    #[test]
    fn validation() {
        assert!(RewardSpec::ModeMatch {
            centers: vec![vec![0.0, 0.0]]
        }
        .validate(1)
        .is_err());
        assert!(RewardSpec::Distance {
            targets: vec![vec![0.0, 0.0]],
            scale: 0.0
        }
        .validate(1)
        .is_err());
    }
}
