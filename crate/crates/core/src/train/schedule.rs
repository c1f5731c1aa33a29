use crate::error::{Error, Result};

/// Reference length the decay epochs are stated against.
pub const REFERENCE_EPOCHS: f64 = 90.0;
pub const BASE_LR: f64 = 3e-4;
pub const DECAY_EPOCHS: [f64; 2] = [40.0, 70.0];

/// Piecewise-constant learning rate, divided by 10 at each decay epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_epochs: Vec<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self::unscaled()
    }
}

impl Schedule {
    /// Decays at epochs 40 and 70.
    pub fn unscaled() -> Self {
        Self {
            base_lr: BASE_LR,
            decay_epochs: DECAY_EPOCHS.to_vec(),
        }
    }

    /// Decay epochs rescaled from the 90-epoch reference to `total_epochs`.
    pub fn scaled(total_epochs: usize) -> Self {
        let f = total_epochs as f64 / REFERENCE_EPOCHS;
        Self {
            base_lr: BASE_LR,
            decay_epochs: DECAY_EPOCHS.iter().map(|e| e * f).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base learning rate must be positive, got {}", self.base_lr)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] > w[1]) || self.decay_epochs.iter().any(|e| *e < 0.0) {
            return Err(Error::invalid(format!("decay epochs must be ascending and >= 0: {:?}", self.decay_epochs)));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch`.
///
/// Division by powers of ten is done on the decimal exponent, so `3e-4`
/// becomes exactly the double nearest `3e-5`, not `3e-4 / 10`.
pub fn lr_at(epoch: usize, s: &Schedule) -> f64 {
    let drops = s.decay_epochs.iter().filter(|&&e| epoch as f64 >= e).count() as i32;
    shift_decimal(s.base_lr, -drops)
}

fn shift_decimal(x: f64, by: i32) -> f64 {
    let repr = format!("{x:e}");
    let (mantissa, exp) = repr.split_once('e').expect("`{:e}` output has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mantissa}e{}", exp + by).parse().expect("valid float literal")
}
