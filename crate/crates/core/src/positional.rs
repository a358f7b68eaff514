//! Positional schemes: additive sinusoidal encodings, the multiplicative
//! power-law position coefficient (AGF) and its value-side use (PCM-V).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosKind {
    None,
    Sinusoidal,
    Agf,
}

fn default_alpha() -> f64 {
    1.0
}

/// How token positions enter attention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosScheme {
    pub kind: PosKind,
    /// Power-law exponent of the AGF coefficient.
    #[serde(default = "default_alpha")]
    pub agf_alpha: f64,
    /// Also weight each value by the position coefficient in the output sum.
    #[serde(default)]
    pub pcm_v: bool,
}

impl Default for PosScheme {
    fn default() -> Self {
        Self::none()
    }
}

impl PosScheme {
    pub fn none() -> Self {
        Self {
            kind: PosKind::None,
            agf_alpha: default_alpha(),
            pcm_v: false,
        }
    }

    pub fn sinusoidal() -> Self {
        Self {
            kind: PosKind::Sinusoidal,
            ..Self::none()
        }
    }

    pub fn agf(alpha: f64, pcm_v: bool) -> Self {
        Self {
            kind: PosKind::Agf,
            agf_alpha: alpha,
            pcm_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.agf_alpha.is_finite() && self.agf_alpha > 0.0) {
            return Err(Error::config(format!(
                "agf_alpha must be positive and finite, got {}",
                self.agf_alpha
            )));
        }
        if self.pcm_v && self.kind != PosKind::Agf {
            return Err(Error::config("pcm_v requires the agf positional scheme"));
        }
        Ok(())
    }

    /// Short human label, e.g. `AGF + PCM-V`.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.pcm_v) {
            (PosKind::None, _) => "No PE",
            (PosKind::Sinusoidal, _) => "Default (Sinusoidal PE)",
            (PosKind::Agf, false) => "AGF",
            (PosKind::Agf, true) => "AGF + PCM-V",
        }
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_value(pos: usize, col: usize, d_model: usize) -> f64 {
    let pair = (col / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
    if col.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Sinusoidal encodings for positions `start..start + len`.
pub fn sinusoidal_pe_from(start: usize, len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sinusoidal encoding needs a positive even d_model, got {d_model}"
        )));
    }
    if len == 0 {
        return Err(Error::config("sinusoidal encoding needs seq_len >= 1"));
    }
    let data = (start..start + len)
        .flat_map(|p| (0..d_model).map(move |c| sinusoidal_value(p, c, d_model)))
        .collect();
    Tensor::matrix(len, d_model, data)
}

pub fn sinusoidal_pe(seq_len: usize, d_model: usize) -> Result<Tensor> {
    sinusoidal_pe_from(0, seq_len, d_model)
}

/// `(1 + distance)^(-alpha)`
pub fn agf_coefficient(distance: usize, alpha: f64) -> f64 {
    (1.0 + distance as f64).powf(-alpha)
}

/// Coefficient matrix between query positions `q_start..q_start + tq` and
/// key positions `0..tkv`.
pub fn agf_pos_coeff_between(
    q_start: usize,
    tq: usize,
    tkv: usize,
    scheme: &PosScheme,
) -> Result<Tensor> {
    if scheme.kind != PosKind::Agf {
        return Err(Error::config(format!(
            "position coefficients need the agf scheme, got {:?}",
            scheme.kind
        )));
    }
    scheme.validate()?;
    let data = (q_start..q_start + tq)
        .flat_map(|m| (0..tkv).map(move |n| agf_coefficient(m.abs_diff(n), scheme.agf_alpha)))
        .collect();
    Tensor::matrix(tq, tkv, data)
}

/// Square `seq_len x seq_len` coefficient matrix.
pub fn agf_pos_coeff(seq_len: usize, scheme: &PosScheme) -> Result<Tensor> {
    agf_pos_coeff_between(0, seq_len, seq_len, scheme)
}

/// Positional treatment of raw attention inputs.
///
/// Sinusoidal: encodings are added to both sides, no coefficient matrix.
/// AGF: inputs pass through and the coefficient matrix is returned for use
/// inside attention. None: inputs pass through.
///
/// Queries are aligned to the end of the key sequence, so for `tq < tkv`
/// query row `m` sits at absolute position `tkv - tq + m`.
pub fn apply_positions(
    x_q: &Tensor,
    x_kv: &Tensor,
    scheme: &PosScheme,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    scheme.validate()?;
    let (tq, dq) = x_q.expect_matrix("apply_positions")?;
    let (tkv, dkv) = x_kv.expect_matrix("apply_positions")?;
    if tq > tkv {
        return Err(Error::shape("apply_positions", x_q.shape(), x_kv.shape()));
    }
    let q_start = tkv - tq;
    match scheme.kind {
        PosKind::None => Ok((x_q.clone(), x_kv.clone(), None)),
        PosKind::Sinusoidal => {
            let add = |x: &Tensor, start: usize, len: usize, d: usize| -> Result<Tensor> {
                let pe = sinusoidal_pe_from(start, len, d)?;
                let data = x.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
                Tensor::matrix(len, d, data)
            };
            Ok((add(x_q, q_start, tq, dq)?, add(x_kv, 0, tkv, dkv)?, None))
        }
        PosKind::Agf => {
            let coeff = agf_pos_coeff_between(q_start, tq, tkv, scheme)?;
            Ok((x_q.clone(), x_kv.clone(), Some(coeff)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_row() {
        let pe = sinusoidal_pe(3, 8).unwrap();
        for c in 0..8 {
            let expect = if c % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(pe.get(0, c), expect);
        }
    }

    #[test]
    fn first_position_first_column() {
        let pe = sinusoidal_pe(2, 4).unwrap();
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(1, 0) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn encodings_are_bounded() {
        let pe = sinusoidal_pe(64, 32).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(sinusoidal_pe(4, 5).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let s1 = PosScheme::agf(1.0, false);
        let c = agf_pos_coeff(5, &s1).unwrap();
        assert_eq!(c.get(3, 3), 1.0);
        assert_eq!(c.get(1, 2), 0.5);
        let s2 = PosScheme::agf(2.0, false);
        let c = agf_pos_coeff(5, &s2).unwrap();
        assert_eq!(c.get(0, 3), 0.0625);
        assert_eq!(c.get(4, 1), 0.0625);
    }

    #[test]
    fn coefficient_requires_agf() {
        assert!(agf_pos_coeff(3, &PosScheme::sinusoidal()).is_err());
        assert!(agf_pos_coeff(3, &PosScheme::none()).is_err());
    }

    #[test]
    fn coefficients_decrease_with_distance() {
        let c = agf_pos_coeff(8, &PosScheme::agf(0.7, true)).unwrap();
        for d in 1..8 {
            assert!(c.get(0, d) < c.get(0, d - 1));
            assert!(c.get(0, d) > 0.0 && c.get(0, d) <= 1.0);
        }
    }

    #[test]
    fn scheme_validation() {
        assert!(PosScheme::agf(0.0, false).validate().is_err());
        assert!(PosScheme::agf(f64::NAN, false).validate().is_err());
        let bad = PosScheme {
            pcm_v: true,
            ..PosScheme::sinusoidal()
        };
        assert!(bad.validate().is_err());
        assert!(PosScheme::agf(1.0, true).validate().is_ok());
    }

    #[test]
    fn apply_positions_cases() {
        let x = Tensor::zeros(&[2, 4]);
        let (q, kv, c) = apply_positions(&x, &x, &PosScheme::none()).unwrap();
        assert_eq!((q, kv.clone(), c), (x.clone(), x.clone(), None));

        let (q, kv, c) = apply_positions(&x, &x, &PosScheme::sinusoidal()).unwrap();
        let pe = sinusoidal_pe(2, 4).unwrap();
        assert_eq!(q, pe);
        assert_eq!(kv, pe);
        assert!(c.is_none());

        let (_, _, c) = apply_positions(&x, &x, &PosScheme::agf(1.0, false)).unwrap();
        assert_eq!(c.unwrap(), Tensor::from_rows(&[&[1.0, 0.5], &[0.5, 1.0]]));
    }

    #[test]
    fn short_query_side_is_end_aligned() {
        let xq = Tensor::zeros(&[1, 4]);
        let xkv = Tensor::zeros(&[3, 4]);
        let (_, _, c) = apply_positions(&xq, &xkv, &PosScheme::agf(1.0, false)).unwrap();
        let c = c.unwrap();
        assert_eq!(c.data(), &[1.0 / 3.0, 0.5, 1.0]);
        let (q, _, _) = apply_positions(&xq, &xkv, &PosScheme::sinusoidal()).unwrap();
        assert_eq!(q, sinusoidal_pe_from(2, 1, 4).unwrap());
    }
}
