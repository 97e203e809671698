//! Plateau learning-rate rule: halve when the windowed mean loss stops
//! improving.

use serde::{Deserialize, Serialize};

/// Observes one loss value per evaluation. Once `window` observations have
/// accumulated (since start or since the last halving), the mean of the last
/// `window` values must beat the best seen so far by a relative margin of
/// `min_improve`; otherwise the rate halves and a cooldown of `window`
/// further observations begins. The initial baseline is the first observed
/// loss.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlateauScheduler {
    pub window: usize,
    pub min_improve: f64,
    pub factor: f64,
    /// Multiplier applied to the base learning rate (product of halvings).
    pub scale: f64,
    best: Option<f64>,
    recent: Vec<f64>,
    cooldown: usize,
}

impl PlateauScheduler {
    pub fn new(window: usize, min_improve: f64, factor: f64) -> Self {
        assert!(window >= 1);
        assert!(factor > 0.0 && factor < 1.0);
        PlateauScheduler {
            window,
            min_improve,
            factor,
            scale: 1.0,
            best: None,
            recent: Vec::new(),
            cooldown: 0,
        }
    }

    /// Feed one evaluation; returns true when the rate was halved.
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.best.is_none() {
            self.best = Some(loss);
        }
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return false;
        }
        self.recent.push(loss);
        if self.recent.len() < self.window {
            return false;
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.recent.remove(0);
        let best = self.best.unwrap();
        if mean < best * (1.0 - self.min_improve) {
            self.best = Some(mean);
            false
        } else {
            self.scale *= self.factor;
            self.cooldown = self.window;
            self.recent.clear();
            true
        }
    }
}
