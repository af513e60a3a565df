use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Split sizes `(train, val, test)` for `n` items.
///
/// Validation and test sizes are rounded from their ratios; training takes
/// the remainder.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratios.iter().any(|r| !(*r >= 0.0)) {
        return Err(Error::Param(format!("split ratios must be >= 0: {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-2 {
        return Err(Error::Param(format!(
            "split ratios must sum to 1, got {sum}"
        )));
    }
    let val = ((n as f64 * ratios[1]).round() as usize).min(n);
    let test = ((n as f64 * ratios[2]).round() as usize).min(n - val);
    Ok((n - val - test, val, test))
}

/// Deterministic contiguous split: the first items train, then val, then test.
pub fn split_dataset<T: Clone>(items: &[T], ratios: [f64; 3]) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (tr, va, _) = split_counts(items.len(), ratios)?;
    Ok((
        items[..tr].to_vec(),
        items[tr..tr + va].to_vec(),
        items[tr + va..].to_vec(),
    ))
}
