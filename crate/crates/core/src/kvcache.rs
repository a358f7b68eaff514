//! Closed-form KV-cache footprint for every attention variant.
//!
//! Counts cover steady-state decode caches only: the per-token tensors a
//! decoder keeps for each layer. Weights and activations are excluded.

use std::fmt::Write as _;

use crate::attention::{ModelConfig, Variant};
use crate::error::Result;
use crate::report::render_aligned;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheComponent {
    pub name: &'static str,
    /// Scalars per token per layer.
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheReport {
    pub variant: Variant,
    pub bytes_per_elem: usize,
    pub breakdown: Vec<CacheComponent>,
}

impl CacheReport {
    pub fn elements_per_token_layer(&self) -> usize {
        self.breakdown.iter().map(|c| c.elements).sum()
    }

    pub fn per_token_per_layer_bytes(&self) -> usize {
        self.bytes_per_elem * self.elements_per_token_layer()
    }

    /// Bytes for `seq_len` tokens, `layers` layers and `batch` sequences.
    pub fn total_bytes(&self, seq_len: usize, layers: usize, batch: usize) -> usize {
        seq_len * layers * batch * self.per_token_per_layer_bytes()
    }
}

/// Element counts per token per layer:
///
/// | variant           | components             |
/// |-------------------|------------------------|
/// | QKV               | K `h d_k`, V `h d_v`   |
/// | MQA               | K `d_k`, V `d_v`       |
/// | GQA               | K `g d_k`, V `g d_v`   |
/// | QV                | V `h d_v`              |
/// | QVVV              | V `g d_v`              |
/// | V-shared-unique-K | K `h d_k`, V `g d_v`   |
/// | MLA-lite          | latent `d_latent`      |
/// | QV-Ka             | V `h d_v`, ctx `d_ctx` |
pub fn cache_report(cfg: &ModelConfig, bytes_per_elem: usize) -> Result<CacheReport> {
    cfg.validate()?;
    let (h, dk, dv) = (cfg.heads, cfg.d_k, cfg.d_v);
    let c = |name, elements| CacheComponent { name, elements };
    let breakdown = match cfg.variant {
        Variant::Qkv => vec![c("K", h * dk), c("V", h * dv)],
        Variant::Mqa => vec![c("K", dk), c("V", dv)],
        Variant::Gqa { groups } => vec![c("K", groups * dk), c("V", groups * dv)],
        Variant::Qv => vec![c("V", h * dv)],
        Variant::Qvvv { groups } => vec![c("V", groups * dv)],
        Variant::VsharedUniqueK { groups } => vec![c("K", h * dk), c("V", groups * dv)],
        Variant::MlaLite { d_latent } => vec![c("latent", d_latent)],
        Variant::QvKa { d_ctx } => vec![c("V", h * dv), c("ctx", d_ctx)],
    };
    Ok(CacheReport {
        variant: cfg.variant,
        bytes_per_elem,
        breakdown,
    })
}

/// Header of [`reports_csv`].
pub const CACHE_CSV_HEADER: &str = "variant,component,elements,bytes_per_token_layer,total_bytes";

/// One row per component plus a `total` row per report.
pub fn reports_csv(reports: &[CacheReport], seq_len: usize, layers: usize, batch: usize) -> String {
    let mut s = String::new();
    writeln!(s, "{CACHE_CSV_HEADER}").unwrap();
    for r in reports {
        let scale = seq_len * layers * batch * r.bytes_per_elem;
        for c in &r.breakdown {
            let bytes = c.elements * r.bytes_per_elem;
            writeln!(
                s,
                "{},{},{},{},{}",
                r.variant.name(),
                c.name,
                c.elements,
                bytes,
                c.elements * scale
            )
            .unwrap();
        }
        writeln!(
            s,
            "{},total,{},{},{}",
            r.variant.name(),
            r.elements_per_token_layer(),
            r.per_token_per_layer_bytes(),
            r.total_bytes(seq_len, layers, batch)
        )
        .unwrap();
    }
    s
}

/// Aligned text rendering of the same rows as [`reports_csv`].
pub fn reports_table(
    reports: &[CacheReport],
    seq_len: usize,
    layers: usize,
    batch: usize,
) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        "variant".into(),
        "component".into(),
        "elements".into(),
        "bytes/token/layer".into(),
        "total bytes".into(),
    ]];
    for r in reports {
        let scale = seq_len * layers * batch * r.bytes_per_elem;
        for c in &r.breakdown {
            rows.push([
                r.variant.to_string(),
                c.name.to_string(),
                c.elements.to_string(),
                (c.elements * r.bytes_per_elem).to_string(),
                (c.elements * scale).to_string(),
            ]);
        }
        rows.push([
            r.variant.to_string(),
            "total".into(),
            r.elements_per_token_layer().to_string(),
            r.per_token_per_layer_bytes().to_string(),
            r.total_bytes(seq_len, layers, batch).to_string(),
        ]);
    }
    render_aligned(&rows)
}

/// One head-organization scenario of the six-direction toy model.
#[derive(Debug, Clone, PartialEq)]
pub struct SharingScenario {
    pub name: &'static str,
    /// Shared value vectors per layer.
    pub values_per_layer: usize,
    /// Queries that read each shared value.
    pub queries_per_value: usize,
    pub values_total: usize,
    /// Cache of the unshared organization divided by this one.
    pub saving_vs_unshared: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimalModelTable {
    /// Expression directions per token (verb, adjective, noun, ...).
    pub directions: usize,
    /// `directions^2` modifier pairings that must be covered.
    pub pairings: usize,
    pub layers: usize,
    pub heads_per_layer: usize,
    pub scenarios: Vec<SharingScenario>,
}

/// Six directions give 36 pairings, spread as 6 heads over 6 layers. The
/// cached values per layer come from [`cache_report`] on a one-dimensional
/// value head: QV for the unshared case, QVVV with one or two groups for the
/// shared ones.
pub fn minimal_model_table() -> Result<MinimalModelTable> {
    const N: usize = 6;
    let pairings = N * N;
    let layers = N;
    let heads = pairings / layers;
    let mut base = ModelConfig::new(heads, heads, Variant::Qv);
    base.d_k = 1;
    base.d_v = 1;
    let unshared = cache_report(&base, 1)?.elements_per_token_layer();
    let mut scenarios = Vec::new();
    for (name, variant) in [
        ("unshared", Variant::Qv),
        ("scenario 1: {a..f} -> V_a", Variant::Qvvv { groups: 1 }),
        (
            "scenario 2: {a,b,c} -> V_a, {d,e,f} -> V_b",
            Variant::Qvvv { groups: 2 },
        ),
    ] {
        let per_layer =
            cache_report(&base.clone().with_variant(variant), 1)?.elements_per_token_layer();
        scenarios.push(SharingScenario {
            name,
            values_per_layer: per_layer,
            queries_per_value: heads / per_layer,
            values_total: per_layer * layers,
            saving_vs_unshared: unshared as f64 / per_layer as f64,
        });
    }
    Ok(MinimalModelTable {
        directions: N,
        pairings,
        layers,
        heads_per_layer: heads,
        scenarios,
    })
}

impl MinimalModelTable {
    pub fn render(&self) -> String {
        let mut s = format!(
            "directions N = {}, pairings N^2 = {}, layers = {}, heads/layer = {}\n",
            self.directions, self.pairings, self.layers, self.heads_per_layer
        );
        let mut rows = vec![[
            "scenario".to_string(),
            "V/layer".to_string(),
            "queries/V".to_string(),
            "V total".to_string(),
            "saving".to_string(),
        ]];
        for sc in &self.scenarios {
            rows.push([
                sc.name.to_string(),
                sc.values_per_layer.to_string(),
                sc.queries_per_value.to_string(),
                sc.values_total.to_string(),
                format!("{:.6}x", sc.saving_vs_unshared),
            ]);
        }
        s.push_str(&render_aligned(&rows));
        s
    }
}
