//! Scaled dot-product attention and multi-head self-attention.
//!
//! Self-attention feeds the same sequence as queries, keys and values. In
//! the default [`HeadProjection::Full`] layout every head projects `D -> D`
//! and the concatenated `[T, h*D]` heads are mapped back to `D` by an
//! `[h*D, D]` output matrix. Scores are always divided by `sqrt(D / h)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tape::{Tape, Var};

/// Per-head projection width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadProjection {
    /// Each head projects `D -> D`; output weight is `[h*D, D]`.
    Full,
    /// Each head projects `D -> D/h`; output weight is `[D, D]`.
    Split,
}

impl std::str::FromStr for HeadProjection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(HeadProjection::Full),
            "split" => Ok(HeadProjection::Split),
            _ => Err(Error::Config(format!("unknown head projection `{s}`"))),
        }
    }
}

impl std::fmt::Display for HeadProjection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadProjection::Full => "full",
            HeadProjection::Split => "split",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub projection: HeadProjection,
    /// One shared matrix per head for queries, keys and values.
    pub tied: bool,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Self {
        AttentionConfig {
            model_dim,
            heads,
            projection: HeadProjection::Full,
            tied: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 {
            return Err(Error::contract("attention needs positive heads and model_dim"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "heads ({}) must divide model_dim ({})",
                self.heads, self.model_dim
            )));
        }
        Ok(())
    }

    /// `d_k = D / h`.
    pub fn scale(&self) -> f64 {
        self.model_dim as f64 / self.heads as f64
    }

    pub fn head_dim(&self) -> usize {
        match self.projection {
            HeadProjection::Full => self.model_dim,
            HeadProjection::Split => self.model_dim / self.heads,
        }
    }

    /// Names of the per-head projection matrices, in `(q, k, v)` order.
    pub fn head_weight_names(&self, prefix: &str, head: usize) -> [String; 3] {
        if self.tied {
            let w = format!("{prefix}.head{head}.w");
            [w.clone(), w.clone(), w]
        } else {
            ["wq", "wk", "wv"].map(|n| format!("{prefix}.head{head}.{n}"))
        }
    }
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) {
    let (d, hd) = (cfg.model_dim, cfg.head_dim());
    for head in 0..cfg.heads {
        let names = cfg.head_weight_names(prefix, head);
        let distinct = if cfg.tied { 1 } else { 3 };
        for name in &names[..distinct] {
            store.insert(name.clone(), glorot([d, hd], d, hd, rng));
        }
    }
    let cat = cfg.heads * hd;
    store.insert(format!("{prefix}.wo"), glorot([cat, d], cat, d, rng));
}

/// Attention weights `softmax(q k^T / sqrt(d_k))`, shape `[T_q, T_k]`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, d_k: f64) -> Result<Var> {
    if d_k <= 0.0 {
        return Err(Error::contract("d_k must be positive"));
    }
    let (dq, dk) = (tape.shape(q)[1], tape.shape(k)[1]);
    if dq != dk {
        return Err(Error::dim("scaled_dot_attention", "key feature axis", dq, dk));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    Ok(tape.softmax(scaled))
}

/// `softmax(q k^T / sqrt(d_k)) v`.
pub fn scaled_dot_attention(tape: &mut Tape, q: Var, k: Var, v: Var, d_k: f64) -> Result<Var> {
    let (tk, tv) = (tape.shape(k)[0], tape.shape(v)[0]);
    if tk != tv {
        return Err(Error::dim("scaled_dot_attention", "value time axis", tk, tv));
    }
    let w = attention_weights(tape, q, k, d_k)?;
    tape.matmul(w, v)
}

/// Multi-head self-attention on `x: [T, D]`, returning `[T, D]`.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    cfg.validate()?;
    let d = match *tape.shape(x) {
        [_, d] => d,
        ref s => return Err(Error::dim("multi_head_self_attention", "input rank", 2, s.len())),
    };
    if d != cfg.model_dim {
        return Err(Error::dim("multi_head_self_attention", "feature axis", cfg.model_dim, d));
    }
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let [nq, nk, nv] = cfg.head_weight_names(prefix, head);
        let q = tape.matmul(x, bound.get(&nq)?)?;
        let (k, v) = if cfg.tied {
            (q, q)
        } else {
            (tape.matmul(x, bound.get(&nk)?)?, tape.matmul(x, bound.get(&nv)?)?)
        };
        heads.push(scaled_dot_attention(tape, q, k, v, cfg.scale())?);
    }
    let cat = tape.concat(&heads, 1)?;
    tape.matmul(cat, bound.var(prefix, "wo")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_dim() {
        assert!(AttentionConfig::new(10, 4).validate().is_err());
        assert!(AttentionConfig::new(120, 4).validate().is_ok());
        assert_eq!(AttentionConfig::new(120, 4).scale(), 30.0);
    }

    #[test]
    fn parameter_shapes_per_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut full = ParamStore::new();
        init_attention(&mut full, "a", &AttentionConfig::new(8, 2), &mut rng);
        assert_eq!(full.get("a.head1.wv").unwrap().shape(), &[8, 8]);
        assert_eq!(full.get("a.wo").unwrap().shape(), &[16, 8]);

        let mut split = ParamStore::new();
        let cfg = AttentionConfig {
            projection: HeadProjection::Split,
            ..AttentionConfig::new(8, 2)
        };
        init_attention(&mut split, "a", &cfg, &mut rng);
        assert_eq!(split.get("a.head0.wq").unwrap().shape(), &[8, 4]);
        assert_eq!(split.get("a.wo").unwrap().shape(), &[8, 8]);

        let mut tied = ParamStore::new();
        let cfg = AttentionConfig {
            tied: true,
            ..AttentionConfig::new(8, 2)
        };
        init_attention(&mut tied, "a", &cfg, &mut rng);
        assert_eq!(tied.len(), 3);
    }

    #[test]
    fn mismatched_feature_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AttentionConfig::new(8, 2);
        let mut store = ParamStore::new();
        init_attention(&mut store, "a", &cfg, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(&Tensor::zeros([3, 6]));
        assert!(multi_head_self_attention(&mut tape, &bound, "a", x, &cfg).is_err());
    }
}
