/// Outcome of recording one epoch's validation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Tracks the best value of a higher-is-better metric. Improvement must be
/// strict; training stops once `patience` epochs pass without one.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: Option<usize>,
    best: Option<(usize, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: Option<usize>) -> Self {
        Self { patience, best: None }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_value(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }

    /// `epoch` is 1-based.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some((_, b)) => metric > b,
        };
        if improved {
            self.best = Some((epoch, metric));
        }
        let since = epoch - self.best.map_or(epoch, |b| b.0);
        StopDecision { improved, stop: self.patience.is_some_and(|p| since >= p) }
    }
}
