//! Early stopping on dev loss: halt after `patience` consecutive
//! evaluations without strict improvement, keep the best-dev epoch.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    streak: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be >= 1");
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            streak: 0,
            epoch: 0,
        }
    }

    /// Feed the dev loss measured after the next epoch (epochs count from 1).
    pub fn observe(&mut self, dev_loss: f64) -> StopDecision {
        self.epoch += 1;
        if dev_loss < self.best {
            self.best = dev_loss;
            self.best_epoch = self.epoch;
            self.streak = 0;
            StopDecision::Improved
        } else {
            self.streak += 1;
            if self.streak >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::NoImprovement
            }
        }
    }

    /// Epoch (1-based) whose dev loss was lowest; 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn epochs_seen(&self) -> usize {
        self.epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Reference semantics: run to the first epoch `e` such that the last
    /// `patience` observations were all >= the running minimum before them.
    fn oracle(seq: &[f64], patience: usize) -> (usize, usize) {
        let mut best = f64::INFINITY;
        let mut best_epoch = 0;
        let mut streak = 0;
        for (i, &x) in seq.iter().enumerate() {
            if x < best {
                best = x;
                best_epoch = i + 1;
                streak = 0;
            } else {
                streak += 1;
                if streak >= patience {
                    return (i + 1, best_epoch);
                }
            }
        }
        (seq.len(), best_epoch)
    }

    fn run(seq: &[f64], patience: usize) -> (usize, usize) {
        let mut s = EarlyStopper::new(patience);
        for &x in seq {
            if s.observe(x) == StopDecision::Stop {
                break;
            }
        }
        (s.epochs_seen(), s.best_epoch())
    }

    #[test]
    fn documented_sequence_stops_after_epoch_four() {
        let seq = [1.0, 0.9, 0.95, 0.97];
        let (stopped, best) = run(&seq, 2);
        assert_eq!(stopped, 4);
        assert_eq!(best, 2);
    }

    #[test]
    fn monotone_decrease_never_stops() {
        let seq: Vec<f64> = (0..50).map(|i| 1.0 / (i + 1) as f64).collect();
        let (stopped, best) = run(&seq, 2);
        assert_eq!(stopped, 50);
        assert_eq!(best, 50);
    }

    #[test]
    fn plateau_counts_as_no_improvement() {
        // Equal values are not strict improvements.
        let seq = [1.0, 1.0, 1.0];
        let (stopped, best) = run(&seq, 2);
        assert_eq!(stopped, 3);
        assert_eq!(best, 1);
    }

    #[test]
    fn matches_oracle_on_random_sequences() {
        let mut rng = Rng::new(404);
        for case in 0..100 {
            let len = 1 + rng.below(30);
            let patience = 1 + rng.below(4);
            let seq: Vec<f64> = (0..len).map(|_| (rng.next_f64() * 8.0).round() / 4.0).collect();
            assert_eq!(
                run(&seq, patience),
                oracle(&seq, patience),
                "case {case}: seq {seq:?} patience {patience}"
            );
        }
    }
}
