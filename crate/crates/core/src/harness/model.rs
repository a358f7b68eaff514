//! Decoder-only transformer stack around any attention variant.
//!
//! Each block is pre-norm: `x + attn(ln1(x))`, then `x + ff(ln2(x))` with a
//! two-layer ReLU feed-forward. Sinusoidal encodings are added once to the
//! token embeddings; AGF coefficients are applied inside every layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, init_matrix, AttentionOutput, AttentionWeights, ModelConfig, Positioned,
};
use crate::error::{Error, Result};
use crate::positional::{sinusoidal_pe, PosKind, PosScheme};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub attn: AttentionWeights<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    /// `[d_model x d_ff]`
    pub ff_in: T,
    /// `[d_ff x d_model]`
    pub ff_out: T,
}

impl<T> BlockWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockWeights<U> {
        BlockWeights {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            attn: self.attn.map(f),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ff_in: f(&self.ff_in),
            ff_out: f(&self.ff_out),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("ln1_gain".to_string(), &self.ln1_gain),
            ("ln1_bias".to_string(), &self.ln1_bias),
        ];
        out.extend(
            self.attn
                .named()
                .into_iter()
                .map(|(n, t)| (format!("attn.{n}"), t)),
        );
        out.push(("ln2_gain".to_string(), &self.ln2_gain));
        out.push(("ln2_bias".to_string(), &self.ln2_bias));
        out.push(("ff_in".to_string(), &self.ff_in));
        out.push(("ff_out".to_string(), &self.ff_out));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![
            ("ln1_gain".to_string(), &mut self.ln1_gain),
            ("ln1_bias".to_string(), &mut self.ln1_bias),
        ];
        out.extend(
            self.attn
                .named_mut()
                .into_iter()
                .map(|(n, t)| (format!("attn.{n}"), t)),
        );
        out.push(("ln2_gain".to_string(), &mut self.ln2_gain));
        out.push(("ln2_bias".to_string(), &mut self.ln2_bias));
        out.push(("ff_in".to_string(), &mut self.ff_in));
        out.push(("ff_out".to_string(), &mut self.ff_out));
        out
    }
}

impl BlockWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            attn: AttentionWeights::init(cfg, rng),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            ff_in: init_matrix(d, cfg.d_ff, rng),
            ff_out: init_matrix(cfg.d_ff, d, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights<T> {
    /// `[vocab x d_model]`
    pub embed: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    /// `[d_model x vocab]`
    pub unembed: T,
}

impl<T> ModelWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelWeights<U> {
        ModelWeights {
            embed: f(&self.embed),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            lnf_gain: f(&self.lnf_gain),
            lnf_bias: f(&self.lnf_bias),
            unembed: f(&self.unembed),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks[{i}].{n}"), t)),
            );
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks[{i}].{n}"), t)),
            );
        }
        out.push(("lnf_gain".to_string(), &mut self.lnf_gain));
        out.push(("lnf_bias".to_string(), &mut self.lnf_bias));
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }
}

impl ModelWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            embed: Tensor::uniform(&[cfg.vocab, d], 1.0, rng),
            blocks: (0..cfg.n_layers)
                .map(|_| BlockWeights::init(cfg, rng))
                .collect(),
            lnf_gain: Tensor::filled(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
            // small readout so initial predictions sit at chance, loss ~ ln(vocab)
            unembed: Tensor::uniform(&[d, cfg.vocab], 0.1 / (d as f64).sqrt(), rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks every stored matrix against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = ModelWeights::init(cfg, &mut rand::rngs::mock::StepRng::new(0, 0));
        let mine = self.named();
        let theirs = reference.named();
        if mine.len() != theirs.len() {
            return Err(Error::config(format!(
                "weights hold {} tensors, config {} expects {}",
                mine.len(),
                cfg.variant,
                theirs.len()
            )));
        }
        for ((name, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, config expects {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Positional treatment inside the stack: sinusoidal encodings were added
/// at the embedding, so layers only see AGF coefficients.
fn layer_scheme(cfg: &ModelConfig) -> PosScheme {
    match cfg.positions.kind {
        PosKind::Sinusoidal => PosScheme::none(),
        _ => cfg.positions,
    }
}

/// One pre-norm block on a single sequence `[T x d_model]`.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    w: &BlockWeights<Var>,
    cfg: &ModelConfig,
) -> Result<(Var, AttentionOutput)> {
    let h = g.layer_norm(x, w.ln1_gain, w.ln1_bias)?;
    let inputs = attention::attach_positions(g, h, h, &layer_scheme(cfg))?;
    let attn = attention::forward_positioned(g, inputs, &w.attn, cfg)?;
    let x = g.add(x, attn.out)?;
    let x = feed_forward(g, x, w)?;
    Ok((x, attn))
}

fn feed_forward(g: &mut Graph, x: Var, w: &BlockWeights<Var>) -> Result<Var> {
    let h = g.layer_norm(x, w.ln2_gain, w.ln2_bias)?;
    let h = g.matmul(h, w.ff_in)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w.ff_out)?;
    g.add(x, h)
}

/// Forward pass over a batch of equal-length sequences.
#[derive(Debug, Clone)]
pub struct StackOutput {
    /// `[B * T x vocab]`, sequences stacked in batch order.
    pub logits: Var,
    /// `attention[s][layer][head]`
    pub attention: Vec<Vec<Vec<Var>>>,
}

pub fn model_forward(
    g: &mut Graph,
    batch: &[&[usize]],
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
) -> Result<StackOutput> {
    let t = batch.first().map_or(0, |s| s.len());
    if t == 0 || batch.iter().any(|s| s.len() != t) {
        return Err(Error::InvalidTensor(
            "batch needs non-empty sequences of equal length".into(),
        ));
    }
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let mut x = g.gather_rows(w.embed, &ids)?;
    if cfg.positions.kind == PosKind::Sinusoidal {
        let pe = sinusoidal_pe(t, cfg.d_model)?;
        let mut tiled = Vec::with_capacity(ids.len() * cfg.d_model);
        for _ in 0..batch.len() {
            tiled.extend_from_slice(pe.data());
        }
        let pe = g.constant(Tensor::matrix(ids.len(), cfg.d_model, tiled)?);
        x = g.add(x, pe)?;
    }
    let scheme = layer_scheme(cfg);
    let mut attention = vec![Vec::with_capacity(w.blocks.len()); batch.len()];
    for block in &w.blocks {
        let h = g.layer_norm(x, block.ln1_gain, block.ln1_bias)?;
        let mut outs = Vec::with_capacity(batch.len());
        for (s, maps) in attention.iter_mut().enumerate() {
            let hs = g.slice_rows(h, s * t, t)?;
            let inputs: Positioned = attention::attach_positions(g, hs, hs, &scheme)?;
            let a = attention::forward_positioned(g, inputs, &block.attn, cfg)?;
            outs.push(a.out);
            maps.push(a.weights);
        }
        let attn = g.concat_rows(&outs)?;
        x = g.add(x, attn)?;
        x = feed_forward(g, x, block)?;
    }
    let x = g.layer_norm(x, w.lnf_gain, w.lnf_bias)?;
    let logits = g.matmul(x, w.unembed)?;
    Ok(StackOutput { logits, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::diagnostics::{gradcheck, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::new(8, 2, Variant::Qkv)
            .with_causal(true)
            .with_positions(PosScheme::agf(1.0, true));
        c.d_ff = 12;
        c.vocab = 6;
        c
    }

    #[test]
    fn zeroed_block_is_identity() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = BlockWeights::init(&c, &mut rng);
        w.attn.w_o = Tensor::zeros(w.attn.w_o.shape());
        w.ff_out = Tensor::zeros(w.ff_out.shape());
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bound = w.map(&mut |t| g.constant(t.clone()));
        let (y, _) = block_forward(&mut g, xv, &bound, &c).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn block_gradients() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = BlockWeights::init(&c, &mut rng);
        let x = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let probe = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let mut params = vec![("x".to_string(), x)];
        params.extend(w.named().into_iter().map(|(n, t)| (n, t.clone())));
        let report = gradcheck(
            &params,
            |g, vars| {
                let mut it = vars[1..].iter().copied();
                let bound = w.map(&mut |_| it.next().unwrap());
                let (y, _) = block_forward(g, vars[0], &bound, &c)?;
                let r = g.constant(probe.clone());
                let m = g.mul(y, r)?;
                g.sum(m)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn batched_stack_matches_per_sequence_blocks() {
        let mut c = cfg();
        c.n_layers = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ModelWeights::init(&c, &mut rng);
        let seqs: Vec<Vec<usize>> = vec![vec![1, 2, 3, 0], vec![5, 4, 0, 1]];
        let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
        let mut g = Graph::new();
        let bound = w.map(&mut |t| g.constant(t.clone()));
        let batched = model_forward(&mut g, &refs, &bound, &c).unwrap();
        let batched = g.value(batched.logits).clone();
        for (s, seq) in seqs.iter().enumerate() {
            let mut g = Graph::new();
            let bound = w.map(&mut |t| g.constant(t.clone()));
            let mut x = g.gather_rows(bound.embed, seq).unwrap();
            for b in &bound.blocks {
                x = block_forward(&mut g, x, b, &c).unwrap().0;
            }
            let x = g.layer_norm(x, bound.lnf_gain, bound.lnf_bias).unwrap();
            let logits = g.matmul(x, bound.unembed).unwrap();
            let single = g.value(logits);
            let rows = batched.slice_rows(s * 4, 4).unwrap();
            assert!(rows.max_abs_diff(single) < 1e-12);
        }
    }

    #[test]
    fn shapes_are_checked() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = ModelWeights::init(&c, &mut rng);
        assert!(w.check_shapes(&c).is_ok());
        let other = c.clone().with_variant(Variant::Qv);
        assert!(w.check_shapes(&other).is_err());
    }
}
