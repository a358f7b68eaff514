//! The attention family behind one kernel.
//!
//! Every variant funnels into [`core_attention`]; they differ only in how
//! the per-head keys and values are built from the kv-side input:
//!
//! | variant              | key for head `i`                 | value for head `i`      |
//! |----------------------|----------------------------------|-------------------------|
//! | QKV                  | `x W_k[i]`                       | `x W_v[i]`              |
//! | QV                   | value of head `i`                | `x W_v[i]`              |
//! | MQA / GQA            | `x W_k[grp(i)]`                  | `x W_v[grp(i)]`         |
//! | QVVV                 | value of head `i`                | `x W_v[grp(i)]`         |
//! | V-shared-unique-K    | `x W_k[i]`                       | `x W_v[grp(i)]`         |
//! | MLA-lite             | `(x W_dkv) W_uk[i]`              | `(x W_dkv) W_uv[i]`     |
//! | QV-Ka                | `[x W_ctx ; x W_v[i]] W_k[i]`    | `x W_v[i]`              |
//!
//! with `grp(i) = floor(i * g / h)`.

mod config;
pub mod decode;
mod weights;

pub use config::{group_of, ModelConfig, Variant};
pub use weights::{init_matrix, AttentionWeights};

use crate::error::{Error, Result};
use crate::positional::{agf_pos_coeff_between, sinusoidal_pe_from, PosKind, PosScheme};
use crate::tensor::{Graph, Mask, Tensor, Var};

/// One kind of per-token tensor a decoder keeps between steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachedComponent {
    pub name: &'static str,
    /// Scalars stored per token (summed over heads or groups).
    pub elements_per_token: usize,
}

/// Result of one attention layer on a graph.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `[Tq x d_model]`
    pub out: Var,
    /// Per head `[Tq x Tkv]` attention weights (rows sum to one).
    pub weights: Vec<Var>,
    /// What a decoder would cache, measured from the tensors this pass built.
    pub cacheables: Vec<CachedComponent>,
}

/// Scaled dot-product attention shared by all variants.
///
/// `logits = (q k^T) / sqrt(d_k)`, multiplied elementwise by `pos_coeff`
/// when given; causal rows only see keys at or before their position
/// (queries are aligned to the end of the key sequence). With `pcm_v` each
/// value term is weighted again by the coefficient: `o_m = sum_n a_mn c_mn v_n`.
///
/// Returns `(output [Tq x d_v], weights [Tq x Tkv])`.
pub fn core_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    causal: bool,
    pos_coeff: Option<Var>,
    pcm_v: bool,
) -> Result<(Var, Var)> {
    let (tq, dk) = g.value(q).expect_matrix("core_attention")?;
    let (tkv, dk2) = g.value(k).expect_matrix("core_attention")?;
    let (tv, _) = g.value(v).expect_matrix("core_attention")?;
    if dk != dk2 || tv != tkv {
        return Err(Error::shape(
            "core_attention",
            g.value(k).shape(),
            g.value(v).shape(),
        ));
    }
    if let Some(c) = pos_coeff {
        if g.value(c).shape() != [tq, tkv] {
            return Err(Error::shape(
                "core_attention",
                g.value(c).shape(),
                &[tq, tkv],
            ));
        }
    }
    if pcm_v && pos_coeff.is_none() {
        return Err(Error::config("pcm_v needs a position coefficient matrix"));
    }
    let mask = if causal {
        Some(Mask::causal(tq, tkv)?)
    } else {
        None
    };
    let scores = g.matmul_nt(q, k)?;
    let mut logits = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(c) = pos_coeff {
        logits = g.mul(logits, c)?;
    }
    let weights = g.softmax_rows(logits, mask.as_ref())?;
    let mixing = match (pcm_v, pos_coeff) {
        (true, Some(c)) => g.mul(weights, c)?,
        _ => weights,
    };
    let out = g.matmul(mixing, v)?;
    Ok((out, weights))
}

/// Attention inputs after the positional scheme has been wired in.
#[derive(Debug, Clone, Copy)]
pub struct Positioned {
    pub x_q: Var,
    pub x_kv: Var,
    /// AGF coefficients `[Tq x Tkv]`, applied inside attention.
    pub coeff: Option<Var>,
    pub pcm_v: bool,
}

impl Positioned {
    /// Inputs whose encodings (if any) were already added upstream.
    pub fn plain(x_q: Var, x_kv: Var) -> Self {
        Self {
            x_q,
            x_kv,
            coeff: None,
            pcm_v: false,
        }
    }
}

/// Wires a positional scheme into a layer's inputs.
///
/// Sinusoidal encodings are added to both inputs before any projection, so
/// every pathway (including values used as keys) carries them. AGF leaves
/// inputs alone and yields the coefficient matrix. `None` passes through.
pub fn attach_positions(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    scheme: &PosScheme,
) -> Result<Positioned> {
    scheme.validate()?;
    let (tq, dq) = g.value(x_q).expect_matrix("attach_positions")?;
    let (tkv, dkv) = g.value(x_kv).expect_matrix("attach_positions")?;
    if tq > tkv {
        return Err(Error::shape(
            "attach_positions",
            g.value(x_q).shape(),
            g.value(x_kv).shape(),
        ));
    }
    let q_start = tkv - tq;
    match scheme.kind {
        PosKind::None => Ok(Positioned::plain(x_q, x_kv)),
        PosKind::Sinusoidal => {
            let pe_q = g.constant(sinusoidal_pe_from(q_start, tq, dq)?);
            let x_q_pe = g.add(x_q, pe_q)?;
            let x_kv_pe = if x_q == x_kv {
                x_q_pe
            } else {
                let pe_kv = g.constant(sinusoidal_pe_from(0, tkv, dkv)?);
                g.add(x_kv, pe_kv)?
            };
            Ok(Positioned::plain(x_q_pe, x_kv_pe))
        }
        PosKind::Agf => {
            let coeff = g.constant(agf_pos_coeff_between(q_start, tq, tkv, scheme)?);
            Ok(Positioned {
                x_q,
                x_kv,
                coeff: Some(coeff),
                pcm_v: scheme.pcm_v,
            })
        }
    }
}

/// Full layer forward for any variant: positions, heads, output projection.
pub fn forward(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let inputs = attach_positions(g, x_q, x_kv, &cfg.positions)?;
    forward_positioned(g, inputs, w, cfg)
}

fn expect_variant(cfg: &ModelConfig, ok: bool, op: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{op} cannot run variant {}",
            cfg.variant.name()
        )))
    }
}

/// Standard multi-head attention.
pub fn forward_qkv(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    expect_variant(cfg, cfg.variant == Variant::Qkv, "forward_qkv")?;
    forward(g, x_q, x_kv, w, cfg)
}

/// Attention where each head's projected values also serve as its keys.
pub fn forward_qv(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    expect_variant(cfg, cfg.variant == Variant::Qv, "forward_qv")?;
    forward(g, x_q, x_kv, w, cfg)
}

/// MQA, GQA, QVVV and V-shared-unique-K.
pub fn forward_grouped(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    let ok = matches!(
        cfg.variant,
        Variant::Mqa | Variant::Gqa { .. } | Variant::Qvvv { .. } | Variant::VsharedUniqueK { .. }
    );
    expect_variant(cfg, ok, "forward_grouped")?;
    forward(g, x_q, x_kv, w, cfg)
}

/// Keys and values up-projected per head from a shared kv-side latent.
pub fn forward_mla_lite(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    expect_variant(
        cfg,
        matches!(cfg.variant, Variant::MlaLite { .. }),
        "forward_mla_lite",
    )?;
    forward(g, x_q, x_kv, w, cfg)
}

/// Key-after-value: `K_i = [x W_ctx ; x W_v[i]] W_k[i]`.
pub fn forward_qv_ka(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    expect_variant(
        cfg,
        matches!(cfg.variant, Variant::QvKa { .. }),
        "forward_qv_ka",
    )?;
    forward(g, x_q, x_kv, w, cfg)
}

fn component(name: &'static str, g: &Graph, vars: &[Var]) -> CachedComponent {
    CachedComponent {
        name,
        elements_per_token: vars.iter().map(|&v| g.value(v).cols()).sum(),
    }
}

fn project_all(g: &mut Graph, x: Var, ws: &[Var]) -> Result<Vec<Var>> {
    ws.iter().map(|&w| g.matmul(x, w)).collect()
}

/// Per-head keys and values plus the cacheable tensors they came from.
fn keys_and_values(
    g: &mut Graph,
    x_kv: Var,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<(Vec<Var>, Vec<Var>, Vec<CachedComponent>)> {
    let h = cfg.heads;
    let missing = |what: &str| Error::config(format!("{} weights lack {what}", cfg.variant.name()));
    match cfg.variant {
        Variant::Qkv | Variant::Mqa | Variant::Gqa { .. } | Variant::VsharedUniqueK { .. } => {
            let ks = project_all(g, x_kv, &w.w_k)?;
            let vs = project_all(g, x_kv, &w.w_v)?;
            let cache = vec![component("K", g, &ks), component("V", g, &vs)];
            let keys = (0..h)
                .map(|i| ks[cfg.key_slot(i).expect("keyed variant")])
                .collect();
            let values = (0..h).map(|i| vs[cfg.value_slot(i)]).collect();
            Ok((keys, values, cache))
        }
        Variant::Qv | Variant::Qvvv { .. } => {
            let vs = project_all(g, x_kv, &w.w_v)?;
            let cache = vec![component("V", g, &vs)];
            let values: Vec<Var> = (0..h).map(|i| vs[cfg.value_slot(i)]).collect();
            Ok((values.clone(), values, cache))
        }
        Variant::MlaLite { .. } => {
            let dkv = w.w_dkv.ok_or_else(|| missing("w_dkv"))?;
            let latent = g.matmul(x_kv, dkv)?;
            let keys = project_all(g, latent, &w.w_uk)?;
            let values = project_all(g, latent, &w.w_uv)?;
            Ok((keys, values, vec![component("latent", g, &[latent])]))
        }
        Variant::QvKa { .. } => {
            let w_ctx = w.w_ctx.ok_or_else(|| missing("w_ctx"))?;
            let ctx = g.matmul(x_kv, w_ctx)?;
            let values = project_all(g, x_kv, &w.w_v)?;
            let mut keys = Vec::with_capacity(h);
            for (&v, &wk) in values.iter().zip(&w.w_k) {
                let joined = g.concat_cols(ctx, v)?;
                keys.push(g.matmul(joined, wk)?);
            }
            let cache = vec![component("V", g, &values), component("ctx", g, &[ctx])];
            Ok((keys, values, cache))
        }
    }
}

/// Layer forward on inputs that already carry their positional treatment.
pub fn forward_positioned(
    g: &mut Graph,
    inputs: Positioned,
    w: &AttentionWeights<Var>,
    cfg: &ModelConfig,
) -> Result<AttentionOutput> {
    if w.w_q.len() != cfg.heads {
        return Err(Error::config(format!(
            "{} query projections for {} heads",
            w.w_q.len(),
            cfg.heads
        )));
    }
    let (keys, values, cacheables) = keys_and_values(g, inputs.x_kv, w, cfg)?;
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let q = g.matmul(inputs.x_q, w.w_q[i])?;
        let (o, a) = core_attention(
            g,
            q,
            keys[i],
            values[i],
            cfg.causal,
            inputs.coeff,
            inputs.pcm_v,
        )?;
        head_outputs.push(o);
        weights.push(a);
    }
    let joined = g.concat_cols_many(&head_outputs)?;
    let out = g.matmul(joined, w.w_o)?;
    Ok(AttentionOutput {
        out,
        weights,
        cacheables,
    })
}

/// Eager result of [`attend`].
#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub out: Tensor,
    pub weights: Vec<Tensor>,
    pub cacheables: Vec<CachedComponent>,
}

/// Runs one layer outside of any training graph.
pub fn attend(
    x_q: &Tensor,
    x_kv: &Tensor,
    w: &AttentionWeights<Tensor>,
    cfg: &ModelConfig,
) -> Result<AttentionResult> {
    let mut g = Graph::new();
    let xq = g.constant(x_q.clone());
    let xkv = if x_q == x_kv {
        xq
    } else {
        g.constant(x_kv.clone())
    };
    let bound = w.map(&mut |t| g.constant(t.clone()));
    let res = forward(&mut g, xq, xkv, &bound, cfg)?;
    Ok(AttentionResult {
        out: g.value(res.out).clone(),
        weights: res.weights.iter().map(|&a| g.value(a).clone()).collect(),
        cacheables: res.cacheables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_core(q: Tensor, k: Tensor, v: Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let (o, a) = core_attention(&mut g, q, k, v, false, None, false).unwrap();
        (g.value(o).clone(), g.value(a).clone())
    }

    #[test]
    fn single_token_returns_its_value() {
        let (o, a) = run_core(
            Tensor::from_rows(&[&[1.0, 0.0]]),
            Tensor::from_rows(&[&[1.0, 0.0]]),
            Tensor::from_rows(&[&[5.0, 7.0]]),
        );
        assert_eq!(o.data(), &[5.0, 7.0]);
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn two_key_example() {
        let (o, a) = run_core(
            Tensor::from_rows(&[&[1.0, 0.0]]),
            Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 2.0]]),
            Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]),
        );
        // logits [2/sqrt2, 0] = [sqrt2, 0]
        let e = 2f64.sqrt().exp();
        let w0 = e / (e + 1.0);
        assert!((a.data()[0] - w0).abs() < 1e-15);
        assert!((a.data()[0] - 0.80436).abs() < 1e-4);
        assert!((a.data()[1] - 0.19564).abs() < 1e-4);
        assert!((o.data()[0] - w0).abs() < 1e-15);
        assert!((o.data()[1] - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let k = Tensor::from_rows(&[&[0.3, -0.2], &[0.3, -0.2], &[0.3, -0.2]]);
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        let q = Tensor::from_rows(&[&[0.9, 0.4], &[-1.0, 2.0], &[0.0, 0.1]]);
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let (_, a) = core_attention(&mut g, q, k, v, true, None, false).unwrap();
        let a = g.value(a);
        for m in 0..3 {
            for n in 0..3 {
                let expect = if n <= m { 1.0 / (m + 1) as f64 } else { 0.0 };
                assert!((a.get(m, n) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pcm_v_without_coefficients_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::identity(2));
        assert!(core_attention(&mut g, x, x, x, false, None, true).is_err());
    }

    #[test]
    fn identity_pipeline_single_token() {
        let mut cfg = ModelConfig::new(3, 1, Variant::Qkv);
        cfg.vocab = 8;
        let id = Tensor::identity(3);
        let w = AttentionWeights {
            w_q: vec![id.clone()],
            w_k: vec![id.clone()],
            w_v: vec![id.clone()],
            w_ctx: None,
            w_dkv: None,
            w_uk: vec![],
            w_uv: vec![],
            w_o: id,
        };
        let x = Tensor::from_rows(&[&[0.2, -1.5, 3.0]]);
        let r = attend(&x, &x, &w, &cfg).unwrap();
        assert_eq!(r.out, x);
    }

    #[test]
    fn variant_entry_points_reject_other_variants() {
        let cfg = ModelConfig::new(8, 2, Variant::Qv);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = AttentionWeights::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[3, 8], 1.0, &mut rng));
        let bound = w.map(&mut |t| g.constant(t.clone()));
        assert!(forward_qkv(&mut g, x, x, &bound, &cfg).is_err());
        assert!(forward_grouped(&mut g, x, x, &bound, &cfg).is_err());
        assert!(forward_qv(&mut g, x, x, &bound, &cfg).is_ok());
    }

    #[test]
    fn param_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in [
            Variant::Qkv,
            Variant::Qv,
            Variant::Mqa,
            Variant::Gqa { groups: 2 },
            Variant::Qvvv { groups: 2 },
            Variant::MlaLite { d_latent: 12 },
            Variant::VsharedUniqueK { groups: 2 },
            Variant::QvKa { d_ctx: 6 },
        ] {
            let cfg = ModelConfig::new(16, 4, variant);
            let w = AttentionWeights::init(&cfg, &mut rng);
            assert_eq!(w.param_count(), cfg.attention_param_count(), "{variant}");
        }
    }
}
