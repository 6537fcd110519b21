use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, TmfError};

/// A distribution over hyperparameter points.
pub trait SearchSpace {
    type Point: Clone + Send + Sync;

    fn sample<R: Rng>(&self, rng: &mut R) -> Self::Point;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTrace<P> {
    /// Every sampled point with its objective value, in sampling order.
    pub evaluations: Vec<(P, f64)>,
    pub best: usize,
}

impl<P: Clone> SearchTrace<P> {
    pub fn best_point(&self) -> &P {
        &self.evaluations[self.best].0
    }

    pub fn best_score(&self) -> f64 {
        self.evaluations[self.best].1
    }
}

/// Samples `budget` points i.i.d. and maximizes `objective` over them.
///
/// Points and per-candidate seeds are drawn sequentially from the master
/// seed, then evaluated in parallel. Ties (and NaN scores) go to the
/// earliest sample.
pub fn random_search<S, F>(
    space: &S,
    budget: usize,
    objective: F,
    seed: u64,
) -> Result<SearchTrace<S::Point>>
where
    S: SearchSpace,
    F: Fn(&S::Point, u64) -> f64 + Sync,
{
    if budget == 0 {
        return Err(TmfError::Config("search budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<(S::Point, u64)> = (0..budget)
        .map(|_| {
            let p = space.sample(&mut rng);
            (p, rng.random())
        })
        .collect();
    let evaluations: Vec<(S::Point, f64)> = candidates
        .into_par_iter()
        .map(|(p, s)| {
            let v = objective(&p, s);
            (p, v)
        })
        .collect();
    let mut best = 0;
    for (i, (_, v)) in evaluations.iter().enumerate() {
        let current = evaluations[best].1;
        if *v > current || (current.is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    Ok(SearchTrace { evaluations, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;

    impl SearchSpace for Square {
        type Point = (f64, f64);

        fn sample<R: Rng>(&self, rng: &mut R) -> Self::Point {
            (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
        }
    }

    #[test]
    fn budget_one_returns_the_sample() {
        let t = random_search(&Square, 1, |p, _| p.0, 5).unwrap();
        assert_eq!(t.evaluations.len(), 1);
        assert_eq!(t.best, 0);
    }

    #[test]
    fn constant_objective_keeps_first() {
        let t = random_search(&Square, 50, |_, _| 1.0, 5).unwrap();
        assert_eq!(t.best, 0);
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(random_search(&Square, 0, |_, _| 1.0, 5).is_err());
    }

    #[test]
    fn finds_a_known_optimum() {
        // For 1000 uniform draws on the unit square, the nearest one to an
        // interior point is within 0.05 except with probability
        // (1 − π·0.05²)^1000 ≈ 4e−4.
        let target = (0.3, 0.7);
        let t = random_search(
            &Square,
            1000,
            |p, _| -((p.0 - target.0).powi(2) + (p.1 - target.1).powi(2)).sqrt(),
            11,
        )
        .unwrap();
        assert!(-t.best_score() < 0.05, "{}", t.best_score());
        assert!(t.evaluations.iter().all(|e| e.1 <= t.best_score()));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = random_search(&Square, 20, |p, s| p.0 + (s % 7) as f64, 3).unwrap();
        let b = random_search(&Square, 20, |p, s| p.0 + (s % 7) as f64, 3).unwrap();
        assert_eq!(a, b);
    }
}
