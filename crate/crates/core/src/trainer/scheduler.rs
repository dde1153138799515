use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    /// Absolute improvement needed to reset the patience counter.
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 3,
            floor: 1e-8,
            min_delta: 1e-4,
        }
    }
}

/// Reduces the learning rate when a maximized metric stops improving.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceLrOnPlateau {
    config: PlateauConfig,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    /// After `patience` consecutive epochs without an improvement above
    /// `min_delta`, the rate is multiplied by `factor`, never below `floor`.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric <= best + self.config.min_delta => self.bad_epochs += 1,
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
            }
        }
        if self.bad_epochs >= self.config.patience {
            self.lr = (self.lr * self.config.factor).max(self.config.floor);
            self.bad_epochs = 0;
        }
        self.lr
    }
}
