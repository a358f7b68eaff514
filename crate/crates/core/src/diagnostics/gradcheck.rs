use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionWeights, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::positional::PosScheme;
use crate::tensor::{Fault, Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub threshold: f64,
    /// Coordinates probed per parameter; all of them when the parameter is smaller.
    pub max_coords: usize,
    pub seed: u64,
    /// Corrupts a backward rule in the analytic pass (negative control).
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            threshold: 1e-4,
            max_coords: 512,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub eps: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<F>(loss_fn: &F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { value });
    }
    Ok(value)
}

/// Compares tape gradients against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)`.
///
/// `loss_fn` receives one graph variable per entry of `params`, in order,
/// and must return a scalar.
pub fn gradcheck<F>(
    params: &[(String, Tensor)],
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = opts.fault.map_or_else(Graph::new, Graph::with_fault);
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { value });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).expect("param gradient").to_vec())
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let n = params[p].1.numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let orig = params[p].1.data()[c];
            work[p].1.data_mut()[c] = orig + opts.eps;
            let plus = eval_loss(&loss_fn, &work)?;
            work[p].1.data_mut()[c] = orig - opts.eps;
            let minus = eval_loss(&loss_fn, &work)?;
            work[p].1.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            worst = worst.max(relative_error(analytic[p][c], numeric));
        }
        checks.push(ParamCheck {
            name: params[p].0.clone(),
            max_rel_error: worst,
            coords_checked: coords.len(),
        });
    }
    let (max_rel_error, worst_param) = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map_or((0.0, String::new()), |c| (c.max_rel_error, c.name.clone()));
    Ok(GradCheckReport {
        passed: max_rel_error < opts.threshold,
        params: checks,
        max_rel_error,
        worst_param,
        eps: opts.eps,
        threshold: opts.threshold,
    })
}

/// Gradient check of one attention layer: loss `sum(out * R)` for a fixed
/// random `R`, differentiated w.r.t. the input and every weight matrix.
pub fn attention_gradcheck(
    cfg: &ModelConfig,
    seq_len: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let weights = AttentionWeights::init(cfg, &mut rng);
    let x = Tensor::uniform(&[seq_len, cfg.d_model], 1.0, &mut rng);
    let probe = Tensor::uniform(&[seq_len, cfg.d_model], 1.0, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    params.extend(weights.named().into_iter().map(|(n, t)| (n, t.clone())));
    let loss_fn = |g: &mut Graph, vars: &[Var]| -> Result<Var> {
        let mut rest = vars[1..].iter().copied();
        let bound = weights.map(&mut |_| rest.next().expect("one var per weight"));
        let out = attention::forward(g, vars[0], vars[0], &bound, cfg)?;
        let r = g.constant(probe.clone());
        let weighted = g.mul(out.out, r)?;
        g.sum(weighted)
    };
    gradcheck(&params, loss_fn, opts)
}

/// Positional schemes exercised by the supported-configuration matrix.
pub fn scheme_matrix() -> Vec<PosScheme> {
    vec![
        PosScheme::none(),
        PosScheme::sinusoidal(),
        PosScheme::agf(1.0, false),
        PosScheme::agf(1.0, true),
    ]
}

/// Every variant (at `d_model = 16`, `h = 2`) crossed with every positional
/// scheme it accepts. Layers are causal, as in the decoder harness.
pub fn supported_matrix() -> Vec<ModelConfig> {
    let variants = [
        Variant::Qkv,
        Variant::Qv,
        Variant::Mqa,
        Variant::Gqa { groups: 2 },
        Variant::Qvvv { groups: 1 },
        Variant::MlaLite { d_latent: 8 },
        Variant::VsharedUniqueK { groups: 1 },
        Variant::QvKa { d_ctx: 8 },
    ];
    let mut out = Vec::new();
    for v in variants {
        for s in scheme_matrix() {
            let cfg = ModelConfig::new(16, 2, v)
                .with_positions(s)
                .with_causal(true);
            if cfg.validate().is_ok() {
                out.push(cfg);
            }
        }
    }
    out
}
