use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggMode {
    TokenMean,
    SeqMeanTokenMean,
    SeqMeanTokenSum,
}

/// Per-token weights `w` such that `aggregate(v) = sum(w * v)` over a
/// `rows x width` masked array.
pub fn agg_weights(mask: &[f64], width: usize, mode: AggMode) -> Result<Vec<f64>> {
    let total: f64 = mask.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("aggregation over an empty mask".into()));
    }
    let rows = if width == 0 { 0 } else { mask.len() / width };
    let mut w = vec![0.0; mask.len()];
    match mode {
        AggMode::TokenMean => {
            for (wi, &m) in w.iter_mut().zip(mask) {
                *wi = m / total;
            }
        }
        AggMode::SeqMeanTokenMean | AggMode::SeqMeanTokenSum => {
            for r in 0..rows {
                let row = &mask[r * width..(r + 1) * width];
                let count: f64 = row.iter().sum();
                if count == 0.0 {
                    continue;
                }
                let scale = match mode {
                    AggMode::SeqMeanTokenMean => 1.0 / (count * rows as f64),
                    _ => 1.0 / rows as f64,
                };
                for (wi, &m) in w[r * width..(r + 1) * width].iter_mut().zip(row) {
                    *wi = m * scale;
                }
            }
        }
    }
    Ok(w)
}

pub fn aggregate(values: &[f64], mask: &[f64], width: usize, mode: AggMode) -> Result<f64> {
    let w = agg_weights(mask, width, mode)?;
    Ok(values.iter().zip(&w).map(|(v, w)| v * w).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_aggregation() {
        // rows with sums [2, 4] over lengths [1, 4]
        let values = [2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let mask = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert!(
            (aggregate(&values, &mask, 4, AggMode::SeqMeanTokenSum).unwrap() - 3.0).abs() < 1e-15
        );
        assert!((aggregate(&values, &mask, 4, AggMode::TokenMean).unwrap() - 1.2).abs() < 1e-15);
        assert!(
            (aggregate(&values, &mask, 4, AggMode::SeqMeanTokenMean).unwrap() - 1.5).abs() < 1e-15
        );
    }

    #[test]
    fn empty_mask_is_degenerate() {
        assert!(matches!(
            aggregate(&[1.0], &[0.0], 1, AggMode::TokenMean),
            Err(Error::Degenerate(_))
        ));
    }
}
