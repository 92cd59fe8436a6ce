use super::TrainingConfig;
use crate::error::{Error, Result};

/// Stepwise-linear decay: the rate drops by an equal amount at every
/// `lr_decay_every` boundary and would reach zero one window past the
/// final epoch.
pub fn lr_schedule(config: &TrainingConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::validation(
            "epoch",
            format!("{epoch} outside schedule of {} epochs", config.epochs),
        ));
    }
    let windows = config.epochs.div_ceil(config.lr_decay_every);
    let window = epoch / config.lr_decay_every;
    Ok(config.lr_initial * (1.0 - window as f64 / windows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            epochs,
            lr_decay_every: 2,
            lr_initial: 1e-4,
            ..Default::default()
        }
    }

    #[test]
    fn initial_rate_and_window_constancy() {
        let c = cfg(10);
        assert_eq!(lr_schedule(&c, 0).unwrap(), 1e-4);
        assert_eq!(lr_schedule(&c, 1).unwrap(), 1e-4);
        assert!(lr_schedule(&c, 10).is_err());
    }

    #[test]
    fn matches_explicit_decrement_loop() {
        for epochs in [1, 2, 5, 10, 11, 50] {
            let c = cfg(epochs);
            let windows = epochs.div_ceil(2);
            let step = 1e-4 / windows as f64;
            let mut rate = 1e-4;
            for e in 0..epochs {
                if e > 0 && e % 2 == 0 {
                    rate -= step;
                }
                let got = lr_schedule(&c, e).unwrap();
                assert!((got - rate).abs() < 1e-15, "epochs {epochs} epoch {e}");
                assert!(got > 0.0);
            }
        }
        assert!((lr_schedule(&cfg(10), 4).unwrap() - 6e-5).abs() < 1e-18);
    }
}
