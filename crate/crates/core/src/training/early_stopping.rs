use crate::metrics::Metric;

/// Stops after `patience + 1` consecutive epochs without a strict
/// improvement of the validation metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    metric: Metric,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, metric: Metric) -> Self {
        EarlyStopping { patience, metric, best: None, bad_epochs: 0 }
    }

    pub fn update(&mut self, epoch: usize, value: f64) -> Decision {
        let better = match self.best {
            None => true,
            Some((_, b)) => self.metric.improves(value, b),
        };
        if better {
            self.best = Some((epoch, value));
            self.bad_epochs = 0;
            return Decision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }

    /// `(epoch, value)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}
