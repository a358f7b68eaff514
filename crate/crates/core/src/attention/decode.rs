//! Incremental (token-by-token) decoding of one attention layer that only
//! reads back what the variant declares cacheable.
//!
//! This is a separate, loop-based route from the graph forward: it is used
//! to confirm that the cached components are sufficient and to measure how
//! many scalars each token actually costs.

use super::{AttentionWeights, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::positional::{agf_coefficient, sinusoidal_value, PosKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
struct Buffer {
    name: &'static str,
    width: usize,
    /// `tokens x width`, row-major.
    data: Vec<f64>,
}

impl Buffer {
    fn token(&self, n: usize) -> &[f64] {
        &self.data[n * self.width..(n + 1) * self.width]
    }
}

/// Per-layer decode state.
#[derive(Debug, Clone)]
pub struct LayerDecoder<'w> {
    cfg: ModelConfig,
    w: &'w AttentionWeights<Tensor>,
    buffers: Vec<Buffer>,
    tokens: usize,
}

fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (rows, cols) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for (r, &xv) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w.data()[r * cols..(r + 1) * cols]) {
            *o += xv * wv;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'w> LayerDecoder<'w> {
    pub fn new(cfg: &ModelConfig, w: &'w AttentionWeights<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let (h, dk, dv) = (cfg.heads, cfg.d_k, cfg.d_v);
        let g = cfg.value_groups();
        let buf = |name, width| Buffer {
            name,
            width,
            data: Vec::new(),
        };
        let buffers = match cfg.variant {
            Variant::Qkv | Variant::Mqa | Variant::Gqa { .. } | Variant::VsharedUniqueK { .. } => {
                vec![buf("K", cfg.variant.key_slots(h) * dk), buf("V", g * dv)]
            }
            Variant::Qv | Variant::Qvvv { .. } => vec![buf("V", g * dv)],
            Variant::MlaLite { d_latent } => vec![buf("latent", d_latent)],
            Variant::QvKa { d_ctx } => vec![buf("V", h * dv), buf("ctx", d_ctx)],
        };
        Ok(Self {
            cfg: cfg.clone(),
            w,
            buffers,
            tokens: 0,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Stored scalars per token, by component name.
    pub fn cached_components(&self) -> Vec<(&'static str, usize)> {
        self.buffers.iter().map(|b| (b.name, b.width)).collect()
    }

    /// Measured scalars held in the cache divided by tokens seen.
    pub fn cached_elements_per_token(&self) -> usize {
        let total: usize = self.buffers.iter().map(|b| b.data.len()).sum();
        total.checked_div(self.tokens).unwrap_or(0)
    }

    fn buffer(&self, name: &str) -> &Buffer {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .expect("declared buffer")
    }

    /// Feeds the next token's layer input and returns the layer output row.
    pub fn step(&mut self, x_t: &[f64]) -> Result<Vec<f64>> {
        let cfg = &self.cfg;
        if x_t.len() != cfg.d_model {
            return Err(Error::shape("decode step", &[x_t.len()], &[cfg.d_model]));
        }
        let pos = self.tokens;
        let mut x = x_t.to_vec();
        if cfg.positions.kind == PosKind::Sinusoidal {
            for (c, v) in x.iter_mut().enumerate() {
                *v += sinusoidal_value(pos, c, cfg.d_model);
            }
        }

        let w = self.w;
        for b in &mut self.buffers {
            let entry: Vec<f64> = match b.name {
                "K" => w.w_k.iter().flat_map(|wk| row_times(&x, wk)).collect(),
                "V" => w.w_v.iter().flat_map(|wv| row_times(&x, wv)).collect(),
                "latent" => row_times(&x, w.w_dkv.as_ref().expect("mla weights")),
                "ctx" => row_times(&x, w.w_ctx.as_ref().expect("qv-ka weights")),
                other => unreachable!("unknown cache component {other}"),
            };
            debug_assert_eq!(entry.len(), b.width);
            b.data.extend(entry);
        }
        self.tokens += 1;

        let (dk, dv) = (cfg.d_k, cfg.d_v);
        let scale = 1.0 / (dk as f64).sqrt();
        let coeff = |n: usize| match cfg.positions.kind {
            PosKind::Agf => Some(agf_coefficient(pos - n, cfg.positions.agf_alpha)),
            _ => None,
        };
        let mut joined = Vec::with_capacity(cfg.heads * dv);
        for i in 0..cfg.heads {
            let q = row_times(&x, &w.w_q[i]);
            let mut keys = Vec::with_capacity(self.tokens);
            let mut values = Vec::with_capacity(self.tokens);
            for n in 0..self.tokens {
                let (k, v) = self.key_value(i, n);
                keys.push(k);
                values.push(v);
            }
            let logits: Vec<f64> = keys
                .iter()
                .enumerate()
                .map(|(n, k)| {
                    let s = dot(&q, k) * scale;
                    coeff(n).map_or(s, |c| s * c)
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut out = vec![0.0; dv];
            for (n, v) in values.iter().enumerate() {
                let mut a = exps[n] / sum;
                if cfg.positions.pcm_v {
                    a *= coeff(n).unwrap_or(1.0);
                }
                for (o, vv) in out.iter_mut().zip(v) {
                    *o += a * vv;
                }
            }
            joined.extend(out);
        }
        Ok(row_times(&joined, &w.w_o))
    }

    /// Rebuilds head `i`'s key and value for cached token `n`.
    fn key_value(&self, i: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.cfg;
        let (dk, dv) = (cfg.d_k, cfg.d_v);
        let slice = |buf: &Buffer, slot: usize, width: usize| {
            buf.token(n)[slot * width..(slot + 1) * width].to_vec()
        };
        match cfg.variant {
            Variant::Qkv | Variant::Mqa | Variant::Gqa { .. } | Variant::VsharedUniqueK { .. } => {
                let k = slice(self.buffer("K"), cfg.key_slot(i).expect("keyed"), dk);
                let v = slice(self.buffer("V"), cfg.value_slot(i), dv);
                (k, v)
            }
            Variant::Qv | Variant::Qvvv { .. } => {
                let v = slice(self.buffer("V"), cfg.value_slot(i), dv);
                (v.clone(), v)
            }
            Variant::MlaLite { .. } => {
                let c = self.buffer("latent").token(n);
                (row_times(c, &self.w.w_uk[i]), row_times(c, &self.w.w_uv[i]))
            }
            Variant::QvKa { .. } => {
                let v = slice(self.buffer("V"), i, dv);
                let mut joined = self.buffer("ctx").token(n).to_vec();
                joined.extend_from_slice(&v);
                (row_times(&joined, &self.w.w_k[i]), v)
            }
        }
    }
}

/// Decodes a whole sequence token by token, returning `[T x d_model]`.
pub fn decode_sequence(
    cfg: &ModelConfig,
    w: &AttentionWeights<Tensor>,
    x: &Tensor,
) -> Result<(Tensor, usize)> {
    let mut dec = LayerDecoder::new(cfg, w)?;
    let (t, d) = x.expect_matrix("decode_sequence")?;
    let mut data = Vec::with_capacity(t * d);
    for r in 0..t {
        data.extend(dec.step(x.row(r))?);
    }
    let per_token = dec.cached_elements_per_token();
    Ok((Tensor::matrix(t, d, data)?, per_token))
}
