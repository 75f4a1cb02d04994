//! Expected share of usability problems found by a panel of test users.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum UsabilityError {
    #[error("per-user discovery rate {0} is outside [0, 1]")]
    Rate(f64),
}

/// `1 - (1 - rate)^users`: the fraction of problems a panel of `users`
/// finds when each user independently finds a `rate` share of them.
pub fn usability_coverage(rate: f64, users: u32) -> Result<f64, UsabilityError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(UsabilityError::Rate(rate));
    }
    Ok(1.0 - (1.0 - rate).powi(users as i32))
}
