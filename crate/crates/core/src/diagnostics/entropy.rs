//! Attention diffusion probe: Shannon entropy of attention rows plus the
//! mass on each row's strongest position.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropySummary {
    /// Mean over rows of `-sum a ln a`, in nats.
    pub mean_entropy: f64,
    /// Mean over rows of `max a`.
    pub mean_max_mass: f64,
    /// Mean over rows of `ln(visible positions)`, the entropy ceiling.
    pub mean_entropy_bound: f64,
    pub rows: usize,
}

/// Row statistics of a `[Tq x Tkv]` attention-weight matrix.
///
/// With `causal`, query `m` sees keys `0..=m + (Tkv - Tq)`; masked entries
/// must already be zero. Rows must sum to one within `1e-6`.
pub fn attention_entropy(weights: &Tensor, causal: bool) -> Result<EntropySummary> {
    let (tq, tkv) = weights.expect_matrix("attention_entropy")?;
    let offset = tkv.saturating_sub(tq);
    let mut h_sum = 0.0;
    let mut max_sum = 0.0;
    let mut bound_sum = 0.0;
    for m in 0..tq {
        let visible = if causal {
            (m + offset + 1).min(tkv)
        } else {
            tkv
        };
        let row = &weights.row(m)[..visible];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Unnormalized { row: m, sum });
        }
        let entropy: f64 = row.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum();
        h_sum += entropy.max(0.0);
        max_sum += row.iter().copied().fold(0.0, f64::max);
        bound_sum += (visible as f64).ln();
    }
    let n = tq as f64;
    Ok(EntropySummary {
        mean_entropy: h_sum / n,
        mean_max_mass: max_sum / n,
        mean_entropy_bound: bound_sum / n,
        rows: tq,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDiffusion {
    pub layer: usize,
    pub head: usize,
    pub mean_entropy: f64,
    pub mean_max_mass: f64,
    pub mean_entropy_bound: f64,
}

impl HeadDiffusion {
    pub fn label(&self) -> String {
        format!("l{}h{}", self.layer, self.head)
    }
}

/// Per-head diffusion of one model over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionReport {
    pub label: String,
    pub checkpoint_step: usize,
    pub heads: Vec<HeadDiffusion>,
    pub mean_entropy: f64,
    pub mean_max_mass: f64,
}

pub const DIFFUSION_CSV_HEADER: &str =
    "variant,head,mean_entropy_nats,mean_max_mass,checkpoint_step";

impl DiffusionReport {
    /// `samples[s][layer][head]` holds one sequence's attention weights.
    pub fn from_samples(
        label: impl Into<String>,
        checkpoint_step: usize,
        samples: &[Vec<Vec<Tensor>>],
        causal: bool,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidTensor("diffusion report without samples".into()))?;
        let mut heads = Vec::new();
        for (layer, layer_heads) in first.iter().enumerate() {
            for head in 0..layer_heads.len() {
                let mut acc = (0.0, 0.0, 0.0);
                for s in samples {
                    let e = attention_entropy(&s[layer][head], causal)?;
                    acc.0 += e.mean_entropy;
                    acc.1 += e.mean_max_mass;
                    acc.2 += e.mean_entropy_bound;
                }
                let n = samples.len() as f64;
                heads.push(HeadDiffusion {
                    layer,
                    head,
                    mean_entropy: acc.0 / n,
                    mean_max_mass: acc.1 / n,
                    mean_entropy_bound: acc.2 / n,
                });
            }
        }
        let k = heads.len().max(1) as f64;
        Ok(Self {
            label: label.into(),
            checkpoint_step,
            mean_entropy: heads.iter().map(|h| h.mean_entropy).sum::<f64>() / k,
            mean_max_mass: heads.iter().map(|h| h.mean_max_mass).sum::<f64>() / k,
            heads,
        })
    }

    /// CSV rows (no header), full float precision.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for h in &self.heads {
            writeln!(
                s,
                "{},{},{},{},{}",
                self.label,
                h.label(),
                h.mean_entropy,
                h.mean_max_mass,
                self.checkpoint_step
            )
            .unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_rows() {
        let w = Tensor::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let e = attention_entropy(&w, false).unwrap();
        assert_eq!(e.mean_entropy, 0.0);
        assert_eq!(e.mean_max_mass, 1.0);
    }

    #[test]
    fn uniform_row() {
        let w = Tensor::filled(&[1, 4], 0.25);
        let e = attention_entropy(&w, false).unwrap();
        assert!((e.mean_entropy - 4f64.ln()).abs() < 1e-15);
        assert!((e.mean_entropy - 1.3863).abs() < 1e-4);
        assert_eq!(e.mean_max_mass, 0.25);
    }

    #[test]
    fn half_quarter_quarter() {
        let w = Tensor::from_rows(&[&[0.5, 0.25, 0.25]]);
        let e = attention_entropy(&w, false).unwrap();
        // 0.5 ln 2 + 2 * 0.25 ln 4 = 1.5 ln 2
        assert!((e.mean_entropy - 1.5 * 2f64.ln()).abs() < 1e-15);
        assert!((e.mean_entropy - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn causal_bound_uses_visible_positions() {
        let w = Tensor::from_rows(&[&[1.0, 0.0], &[0.5, 0.5]]);
        let e = attention_entropy(&w, true).unwrap();
        assert!((e.mean_entropy_bound - 2f64.ln() / 2.0).abs() < 1e-15);
        assert!((e.mean_entropy - 2f64.ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let w = Tensor::from_rows(&[&[0.5, 0.4]]);
        assert!(matches!(
            attention_entropy(&w, false),
            Err(Error::Unnormalized { row: 0, .. })
        ));
    }
}
