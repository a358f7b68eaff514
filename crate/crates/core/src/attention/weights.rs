use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Variant};
use crate::tensor::Tensor;

/// Projection matrices of one attention layer.
///
/// Shared projections are stored once: heads map onto the `w_k` / `w_v`
/// slots through [`ModelConfig::key_slot`] and [`ModelConfig::value_slot`],
/// so heads in one group use the very same matrix. Only the matrices the
/// variant needs are present.
///
/// `T` is [`Tensor`] for stored weights and [`crate::tensor::Var`] once the
/// weights are bound to a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<T> {
    /// `[d_model x d_k]`, one per head.
    pub w_q: Vec<T>,
    /// `[d_model x d_k]` (QV-Ka: `[(d_ctx + d_v) x d_k]`), one per key slot.
    pub w_k: Vec<T>,
    /// `[d_model x d_v]`, one per value group.
    pub w_v: Vec<T>,
    /// `[d_model x d_ctx]`, QV-Ka only.
    pub w_ctx: Option<T>,
    /// `[d_model x d_latent]`, MLA-lite only.
    pub w_dkv: Option<T>,
    /// `[d_latent x d_k]` per head, MLA-lite only.
    pub w_uk: Vec<T>,
    /// `[d_latent x d_v]` per head, MLA-lite only.
    pub w_uv: Vec<T>,
    /// `[heads * d_v x d_model]`
    pub w_o: T,
}

impl<T> AttentionWeights<T> {
    /// Applies `f` to every matrix, in the order of [`Self::named`].
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: self.w_q.iter().map(&mut *f).collect(),
            w_k: self.w_k.iter().map(&mut *f).collect(),
            w_v: self.w_v.iter().map(&mut *f).collect(),
            w_ctx: self.w_ctx.as_ref().map(&mut *f),
            w_dkv: self.w_dkv.as_ref().map(&mut *f),
            w_uk: self.w_uk.iter().map(&mut *f).collect(),
            w_uv: self.w_uv.iter().map(&mut *f).collect(),
            w_o: f(&self.w_o),
        }
    }

    /// Every matrix with a stable name such as `w_q[1]`.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (name, list) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            out.extend(
                list.iter()
                    .enumerate()
                    .map(|(i, t)| (format!("{name}[{i}]"), t)),
            );
        }
        if let Some(t) = &self.w_ctx {
            out.push(("w_ctx".to_string(), t));
        }
        if let Some(t) = &self.w_dkv {
            out.push(("w_dkv".to_string(), t));
        }
        for (name, list) in [("w_uk", &self.w_uk), ("w_uv", &self.w_uv)] {
            out.extend(
                list.iter()
                    .enumerate()
                    .map(|(i, t)| (format!("{name}[{i}]"), t)),
            );
        }
        out.push(("w_o".to_string(), &self.w_o));
        out
    }

    /// Mutable counterpart of [`Self::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        for (name, list) in [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
        ] {
            out.extend(
                list.iter_mut()
                    .enumerate()
                    .map(|(i, t)| (format!("{name}[{i}]"), t)),
            );
        }
        if let Some(t) = &mut self.w_ctx {
            out.push(("w_ctx".to_string(), t));
        }
        if let Some(t) = &mut self.w_dkv {
            out.push(("w_dkv".to_string(), t));
        }
        for (name, list) in [("w_uk", &mut self.w_uk), ("w_uv", &mut self.w_uv)] {
            out.extend(
                list.iter_mut()
                    .enumerate()
                    .map(|(i, t)| (format!("{name}[{i}]"), t)),
            );
        }
        out.push(("w_o".to_string(), &mut self.w_o));
        out
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` matrix with `fan_in = rows`.
pub fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
}

impl AttentionWeights<Tensor> {
    /// Draws exactly the matrices `cfg.variant` needs.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (dm, h, dk, dv) = (cfg.d_model, cfg.heads, cfg.d_k, cfg.d_v);
        let key_rows = match cfg.variant {
            Variant::QvKa { d_ctx } => d_ctx + dv,
            _ => dm,
        };
        let w_q = (0..h).map(|_| init_matrix(dm, dk, rng)).collect();
        let w_k = (0..cfg.variant.key_slots(h))
            .map(|_| init_matrix(key_rows, dk, rng))
            .collect();
        let w_v = match cfg.variant {
            Variant::MlaLite { .. } => Vec::new(),
            _ => (0..cfg.value_groups())
                .map(|_| init_matrix(dm, dv, rng))
                .collect(),
        };
        let w_ctx = match cfg.variant {
            Variant::QvKa { d_ctx } => Some(init_matrix(dm, d_ctx, rng)),
            _ => None,
        };
        let (w_dkv, w_uk, w_uv) = match cfg.variant {
            Variant::MlaLite { d_latent } => (
                Some(init_matrix(dm, d_latent, rng)),
                (0..h).map(|_| init_matrix(d_latent, dk, rng)).collect(),
                (0..h).map(|_| init_matrix(d_latent, dv, rng)).collect(),
            ),
            _ => (None, Vec::new(), Vec::new()),
        };
        let w_o = init_matrix(h * dv, dm, rng);
        Self {
            w_q,
            w_k,
            w_v,
            w_ctx,
            w_dkv,
            w_uk,
            w_uv,
            w_o,
        }
    }

    /// Total number of stored scalars.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}
