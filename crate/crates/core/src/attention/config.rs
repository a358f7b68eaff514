use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positional::{PosKind, PosScheme};

/// Attention mechanism family member.
///
/// All variants share one attention kernel; they differ only in how keys
/// and values are produced and which projections are shared across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawVariant")]
pub enum Variant {
    /// Per-head query, key and value projections.
    Qkv,
    /// Keys are the projected values themselves.
    Qv,
    /// One key/value projection shared by every head.
    Mqa,
    /// Key/value projections shared within contiguous head groups.
    Gqa { groups: usize },
    /// Key-free grouped attention: group-shared values act as keys.
    Qvvv { groups: usize },
    /// Keys and values are up-projected per head from one cached latent.
    MlaLite { d_latent: usize },
    /// Group-shared values with one key projection per head.
    VsharedUniqueK { groups: usize },
    /// Per-head keys built from a shared context projection and the head's values.
    QvKa { d_ctx: usize },
}

/// Flat wire form, so stray parameters on any variant are rejected.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariant {
    kind: String,
    groups: Option<usize>,
    d_latent: Option<usize>,
    d_ctx: Option<usize>,
}

impl TryFrom<RawVariant> for Variant {
    type Error = String;

    fn try_from(r: RawVariant) -> std::result::Result<Self, String> {
        let (needs, v) = match r.kind.as_str() {
            "qkv" => (None, Variant::Qkv),
            "qv" => (None, Variant::Qv),
            "mqa" => (None, Variant::Mqa),
            "gqa" => (
                Some("groups"),
                Variant::Gqa {
                    groups: r.groups.unwrap_or(0),
                },
            ),
            "qvvv" => (
                Some("groups"),
                Variant::Qvvv {
                    groups: r.groups.unwrap_or(0),
                },
            ),
            "mla_lite" => (
                Some("d_latent"),
                Variant::MlaLite {
                    d_latent: r.d_latent.unwrap_or(0),
                },
            ),
            "vshared_unique_k" => (
                Some("groups"),
                Variant::VsharedUniqueK {
                    groups: r.groups.unwrap_or(0),
                },
            ),
            "qv_ka" => (
                Some("d_ctx"),
                Variant::QvKa {
                    d_ctx: r.d_ctx.unwrap_or(0),
                },
            ),
            other => {
                return Err(format!(
                    "unknown variant {other:?}; expected one of {:?}",
                    Variant::NAMES
                ))
            }
        };
        let given = [
            ("groups", r.groups),
            ("d_latent", r.d_latent),
            ("d_ctx", r.d_ctx),
        ];
        for (field, value) in given {
            match (value, needs == Some(field)) {
                (Some(_), false) => return Err(format!("variant {:?} takes no {field}", r.kind)),
                (None, true) => return Err(format!("variant {:?} requires {field}", r.kind)),
                _ => {}
            }
        }
        Ok(v)
    }
}

impl Variant {
    pub const NAMES: [&'static str; 8] = [
        "qkv",
        "qv",
        "mqa",
        "gqa",
        "qvvv",
        "mla_lite",
        "vshared_unique_k",
        "qv_ka",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Qkv => "qkv",
            Variant::Qv => "qv",
            Variant::Mqa => "mqa",
            Variant::Gqa { .. } => "gqa",
            Variant::Qvvv { .. } => "qvvv",
            Variant::MlaLite { .. } => "mla_lite",
            Variant::VsharedUniqueK { .. } => "vshared_unique_k",
            Variant::QvKa { .. } => "qv_ka",
        }
    }

    /// Number of distinct value projections for `heads` query heads.
    pub fn value_groups(&self, heads: usize) -> usize {
        match *self {
            Variant::Mqa => 1,
            Variant::Gqa { groups }
            | Variant::Qvvv { groups }
            | Variant::VsharedUniqueK { groups } => groups,
            Variant::Qkv | Variant::Qv | Variant::MlaLite { .. } | Variant::QvKa { .. } => heads,
        }
    }

    /// Number of key projection matrices held directly in `w_k`.
    pub fn key_slots(&self, heads: usize) -> usize {
        match *self {
            Variant::Qkv | Variant::VsharedUniqueK { .. } | Variant::QvKa { .. } => heads,
            Variant::Mqa => 1,
            Variant::Gqa { groups } => groups,
            Variant::Qv | Variant::Qvvv { .. } | Variant::MlaLite { .. } => 0,
        }
    }

    /// Whether attention scores come from the values (no key pathway).
    pub fn key_free(&self) -> bool {
        matches!(self, Variant::Qv | Variant::Qvvv { .. })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Variant::Qkv => write!(f, "QKV"),
            Variant::Qv => write!(f, "QV"),
            Variant::Mqa => write!(f, "MQA"),
            Variant::Gqa { groups } => write!(f, "GQA(g={groups})"),
            Variant::Qvvv { groups } => write!(f, "QVVV(g={groups})"),
            Variant::MlaLite { d_latent } => write!(f, "MLA-lite(d_latent={d_latent})"),
            Variant::VsharedUniqueK { groups } => write!(f, "V-shared-unique-K(g={groups})"),
            Variant::QvKa { d_ctx } => write!(f, "QV-Ka(d_ctx={d_ctx})"),
        }
    }
}

/// Head `head` of `heads` belongs to kv group `floor(head * groups / heads)`.
pub fn group_of(head: usize, heads: usize, groups: usize) -> usize {
    head * groups / heads
}

/// Full architectural description; one value drives every module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub variant: Variant,
    pub positions: PosScheme,
    pub causal: bool,
    pub d_ff: usize,
    pub vocab: usize,
}

impl ModelConfig {
    /// Config in the `d_k = d_v = d_model / heads` regime.
    pub fn new(d_model: usize, heads: usize, variant: Variant) -> Self {
        let d_head = d_model.checked_div(heads).unwrap_or(0);
        Self {
            d_model,
            heads,
            d_k: d_head,
            d_v: d_head,
            n_layers: 1,
            variant,
            positions: PosScheme::none(),
            causal: false,
            d_ff: 4 * d_model,
            vocab: 16,
        }
    }

    pub fn with_positions(mut self, positions: PosScheme) -> Self {
        self.positions = positions;
        self
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn value_groups(&self) -> usize {
        self.variant.value_groups(self.heads)
    }

    /// Value-projection slot used by `head`.
    pub fn value_slot(&self, head: usize) -> usize {
        group_of(head, self.heads, self.value_groups())
    }

    /// Key-projection slot used by `head`, when the variant has one.
    pub fn key_slot(&self, head: usize) -> Option<usize> {
        match self.variant.key_slots(self.heads) {
            0 => None,
            n => Some(group_of(head, self.heads, n)),
        }
    }

    /// Checks every structural invariant; the message names the violated one.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.vocab < 3 {
            return Err(Error::config("vocab must be at least 3"));
        }
        self.positions.validate()?;
        if self.positions.kind == PosKind::Sinusoidal && !self.d_model.is_multiple_of(2) {
            return Err(Error::config("sinusoidal positions need an even d_model"));
        }
        let h = self.heads;
        match self.variant {
            Variant::Gqa { groups }
            | Variant::Qvvv { groups }
            | Variant::VsharedUniqueK { groups } => {
                if groups == 0 || groups > h || !h.is_multiple_of(groups) {
                    return Err(Error::config(format!(
                        "kv groups g={groups} must divide heads h={h} with 1 <= g <= h"
                    )));
                }
            }
            Variant::MlaLite { d_latent } => {
                if d_latent == 0 {
                    return Err(Error::config("d_latent must be positive"));
                }
                let full = h * (self.d_k + self.d_v);
                if d_latent >= full {
                    return Err(Error::config(format!(
                        "d_latent={d_latent} must be below h*(d_k+d_v)={full} to compress the cache"
                    )));
                }
            }
            Variant::QvKa { d_ctx } => {
                if d_ctx == 0 {
                    return Err(Error::config("d_ctx must be positive"));
                }
            }
            Variant::Qkv | Variant::Qv | Variant::Mqa => {}
        }
        if self.variant.key_free() && self.d_k != self.d_v {
            return Err(Error::config(format!(
                "{} scores queries against values and needs d_k == d_v (got {} and {})",
                self.variant.name(),
                self.d_k,
                self.d_v
            )));
        }
        if self.positions.kind == PosKind::Sinusoidal {
            match self.variant {
                Variant::Qvvv { .. } => {
                    return Err(Error::config(
                        "qvvv has no key to carry sinusoidal encodings; use agf or none",
                    ))
                }
                Variant::MlaLite { .. } => {
                    return Err(Error::config(
                        "mla_lite supports agf or none positions only",
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Closed-form count of attention parameters in one layer.
    pub fn attention_param_count(&self) -> usize {
        let (dm, h, dk, dv) = (self.d_model, self.heads, self.d_k, self.d_v);
        let queries = h * dm * dk;
        let output = h * dv * dm;
        let kv = match self.variant {
            Variant::Qkv => h * dm * (dk + dv),
            Variant::Qv => h * dm * dv,
            Variant::Mqa => dm * (dk + dv),
            Variant::Gqa { groups } => groups * dm * (dk + dv),
            Variant::Qvvv { groups } => groups * dm * dv,
            Variant::VsharedUniqueK { groups } => h * dm * dk + groups * dm * dv,
            Variant::MlaLite { d_latent } => dm * d_latent + h * d_latent * (dk + dv),
            Variant::QvKa { d_ctx } => h * dm * dv + dm * d_ctx + h * (d_ctx + dv) * dk,
        };
        queries + kv + output
    }
}
