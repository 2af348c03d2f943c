use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionScore {
    pub device: String,
    pub score: f64,
}

/// Mean over rows of `||d loss / d features||_2`.
///
/// Features with no path to `loss` score zero.
pub fn contribution_score(
    device: impl Into<String>,
    tape: &Tape,
    loss: Var,
    features: Var,
) -> Result<ContributionScore> {
    let value = tape.value(features)?;
    let (rows, _) = value.expect_matrix("contribution_score")?;
    let grads = tape.backward(loss)?;
    let score = match grads.get(features)? {
        Some(g) if rows > 0 => {
            (0..rows)
                .map(|r| g.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .sum::<f64>()
                / rows as f64
        }
        _ => 0.0,
    };
    Ok(ContributionScore {
        device: device.into(),
        score,
    })
}

/// Splits `budget` in proportion to the scores; all-zero scores split evenly.
pub fn allocate_resources(scores: &[ContributionScore], budget: f64) -> Result<Vec<f64>> {
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget {budget}")));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no devices to allocate to".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !(s.score.is_finite() && s.score >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "device {}: score {}",
            bad.device, bad.score
        )));
    }
    let total: f64 = scores.iter().map(|s| s.score).sum();
    if total == 0.0 {
        return Ok(vec![budget / scores.len() as f64; scores.len()]);
    }
    Ok(scores.iter().map(|s| budget * (s.score / total)).collect())
}
