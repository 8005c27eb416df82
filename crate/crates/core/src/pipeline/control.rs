/// What the training loop should do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Keep going; `improved` marks a new best development loss.
    Continue { improved: bool },
    /// Reload the best checkpoint and restart with a halved initial rate.
    Restart,
    Stop,
}

/// Watches the development loss: after `patience` consecutive epochs
/// without beating the best value it asks for a restart from the best
/// checkpoint, and once `max_restarts` are spent it asks to stop.
#[derive(Clone, Debug, PartialEq)]
pub struct RestartController {
    pub patience: usize,
    pub max_restarts: u32,
    best: f64,
    bad_epochs: usize,
    restarts: u32,
}

impl RestartController {
    pub fn new(patience: usize, max_restarts: u32) -> Self {
        RestartController {
            patience: patience.max(1),
            max_restarts,
            best: f64::INFINITY,
            bad_epochs: 0,
            restarts: 0,
        }
    }

    /// Rebuilds a controller from saved counters.
    pub fn from_parts(patience: usize, max_restarts: u32, best: f64, bad_epochs: usize, restarts: u32) -> Self {
        RestartController {
            patience: patience.max(1),
            max_restarts,
            best,
            bad_epochs,
            restarts,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    /// Restarts performed so far; also the number of learning-rate halvings.
    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    pub fn observe(&mut self, dev_loss: f64) -> Action {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.bad_epochs = 0;
            return Action::Continue { improved: true };
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return Action::Continue { improved: false };
        }
        self.bad_epochs = 0;
        if self.restarts >= self.max_restarts {
            return Action::Stop;
        }
        self.restarts += 1;
        Action::Restart
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(losses: &[f64]) -> (Vec<Action>, RestartController) {
        let mut c = RestartController::new(2, 3);
        (losses.iter().map(|&l| c.observe(l)).collect(), c)
    }

    #[test]
    fn decreasing_losses_continue() {
        let (a, _) = run(&[5.0, 4.0, 3.0]);
        assert!(a.iter().all(|x| *x == Action::Continue { improved: true }));
    }

    #[test]
    fn two_worse_epochs_restart() {
        let (a, c) = run(&[3.0, 3.5, 3.6]);
        assert_eq!(a[2], Action::Restart);
        assert_eq!(c.restarts(), 1);
        assert_eq!(c.best(), 3.0);
    }

    #[test]
    fn budget_exhausted_stops() {
        let (a, c) = run(&[3.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0, 4.0]);
        let restarts = a.iter().filter(|x| **x == Action::Restart).count();
        assert_eq!(restarts, 3);
        assert_eq!(*a.last().unwrap(), Action::Stop);
        assert_eq!(c.restarts(), 3);
    }

    #[test]
    fn nan_never_counts_as_improvement() {
        let (a, _) = run(&[1.0, f64::NAN]);
        assert_eq!(a[1], Action::Continue { improved: false });
    }
}
