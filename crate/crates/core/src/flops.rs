//! Analytical FLOPs model for one forward pass.
//!
//! The encoder cost is approximated as 2*L*D*M*(12*D + M) non-embedding
//! floating-point operations; the entity attention layer adds
//! 2*D^2*(2*N + 1) for the key-query-value projections plus 2*D*N for the
//! score dot products. All counts are exact integers in u128, wide enough
//! for inputs up to 10^6 per dimension.

use serde::Serialize;

use crate::error::{KprError, Result};

/// Encoder forward-pass FLOPs: 2*L*D*M*(12*D + M).
pub fn flops_bert(layers: u64, dim: u64, tokens: u64) -> Result<u128> {
    if layers == 0 || dim == 0 || tokens == 0 {
        return Err(KprError::Parameter(
            "flops_bert: layers, dim, tokens must be positive".into(),
        ));
    }
    let (l, d, m) = (layers as u128, dim as u128, tokens as u128);
    Ok(2 * l * d * m * (12 * d + m))
}

/// Entity attention layer FLOPs: 2*D^2*(2*N + 1) + 2*D*N. Defined for
/// N = 0, where only the no-op row is projected.
pub fn flops_kpr_att(dim: u64, entities: u64) -> Result<u128> {
    if dim == 0 {
        return Err(KprError::Parameter("flops_kpr_att: dim must be positive".into()));
    }
    let (d, n) = (dim as u128, entities as u128);
    Ok(2 * d * d * (2 * n + 1) + 2 * d * n)
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopsReport {
    pub flops_bert: u128,
    pub flops_kpr_att: u128,
    pub total: u128,
    pub overhead_fraction: f64,
}

impl FlopsReport {
    /// Overhead as a percentage string, rounded half-up to two decimals.
    pub fn overhead_percent(&self) -> String {
        let hundredths = (self.overhead_fraction * 100.0 * 100.0).round() as u64;
        format!("{}.{:02}%", hundredths / 100, hundredths % 100)
    }
}

/// Assembles both counts and the attention layer's share of the total.
pub fn overhead_report(layers: u64, dim: u64, tokens: u64, entities: u64) -> Result<FlopsReport> {
    let bert = flops_bert(layers, dim, tokens)?;
    let att = flops_kpr_att(dim, entities)?;
    let total = bert + att;
    Ok(FlopsReport {
        flops_bert: bert,
        flops_kpr_att: att,
        total,
        overhead_fraction: att as f64 / total as f64,
    })
}
