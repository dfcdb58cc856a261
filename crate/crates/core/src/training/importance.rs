//! Loss-aware timestep sampling: `p_t ∝ √E[L_t²]`, reweighted by `1/(T·p_t)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const HISTORY_LEN: usize = 10;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    steps: usize,
    /// Ring buffers of squared losses, indexed by `t − 1`.
    history: Vec<Vec<f64>>,
    cursor: Vec<usize>,
    counts: Vec<u64>,
}

impl ImportanceState {
    pub fn new(steps: usize) -> Self {
        ImportanceState {
            steps,
            history: vec![Vec::with_capacity(HISTORY_LEN); steps],
            cursor: vec![0; steps],
            counts: vec![0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn count(&self, t: usize) -> u64 {
        self.counts[t - 1]
    }

    /// Records the diffusion loss observed at step `t`.
    pub fn update(&mut self, t: usize, loss: f64) {
        let i = t - 1;
        let sq = loss * loss;
        if self.history[i].len() < HISTORY_LEN {
            self.history[i].push(sq);
        } else {
            self.history[i][self.cursor[i]] = sq;
        }
        self.cursor[i] = (self.cursor[i] + 1) % HISTORY_LEN;
        self.counts[i] += 1;
    }

    pub fn warmed_up(&self) -> bool {
        self.history.iter().all(|h| h.len() >= HISTORY_LEN)
    }

    /// Probabilities over `t = 1..=T` (entry `t − 1`).
    pub fn probs(&self) -> Vec<f64> {
        let n = self.steps;
        if !self.warmed_up() {
            return vec![1.0 / n as f64; n];
        }
        let mut p: Vec<f64> = self
            .history
            .iter()
            .map(|h| (h.iter().sum::<f64>() / h.len() as f64).sqrt().max(PROB_FLOOR))
            .collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        p
    }

    /// Draws `t` and its unbiasing weight `1/(T·p_t)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        sample_from(&self.probs(), rng)
    }
}

pub(crate) fn sample_from<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut idx = probs.len() - 1;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            idx = i;
            break;
        }
    }
    (idx + 1, 1.0 / (probs.len() as f64 * probs[idx]))
}

/// Uniform timestep draw with unit weight.
pub fn sample_uniform<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> (usize, f64) {
    (rng.gen_range(1..=steps), 1.0)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_until_every_step_has_ten_samples() {
        let mut s = ImportanceState::new(3);
        for _ in 0..10 {
            s.update(1, 5.0);
            s.update(2, 1.0);
        }
        for _ in 0..9 {
            s.update(3, 1.0);
        }
        assert_eq!(s.probs(), vec![1.0 / 3.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(s.sample(&mut rng).1, 1.0);
        }
        s.update(3, 1.0);
        assert!(s.warmed_up());
        assert!(s.probs()[0] > 0.5);
    }

    #[test]
    fn equal_histories_are_uniform() {
        let mut s = ImportanceState::new(5);
        for t in 1..=5 {
            for _ in 0..12 {
                s.update(t, 0.7);
            }
        }
        for p in s.probs() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn ring_buffer_keeps_last_ten() {
        let mut s = ImportanceState::new(2);
        for _ in 0..10 {
            s.update(1, 100.0);
        }
        for _ in 0..10 {
            s.update(1, 1.0);
            s.update(2, 2.0);
        }
        let p = s.probs();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.count(1), 20);
    }

    #[test]
    fn floor_keeps_zero_loss_steps_reachable() {
        let mut s = ImportanceState::new(2);
        for _ in 0..10 {
            s.update(1, 0.0);
            s.update(2, 1.0);
        }
        let p = s.probs();
        assert!(p[0] > 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_uniform() {
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
