//! Word-level spatial attention and channel-wise attention.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{Graph, LinearSpec, ParamStore, Var};

/// Result of one attention pass; `weights` rows each sum to one.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub output: Var,
    /// Spatial: `[H*W, L]`. Channel: `[C, L]`.
    pub weights: Var,
}

fn chw(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(dim_err!("attention expects C x H x W hidden features, got {s:?}")),
    }
}

fn check_words(g: &Graph, words: Var, d_text: usize) -> Result<usize> {
    match g.shape(words) {
        [l, d] if *d == d_text && *l >= 1 => Ok(*l),
        s => Err(dim_err!("attention expects [L, {d_text}] word features, got {s:?}")),
    }
}

/// Each location attends over the words projected to the hidden width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialAttention {
    pub proj: LinearSpec,
    pub tau: f32,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_text: usize,
        channels: usize,
        tau: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = LinearSpec::new(store, &format!("{name}/proj"), d_text, channels, 1.0 / (d_text as f32).sqrt(), rng)?;
        Ok(Self { proj, tau })
    }

    /// `out_i = sum_j softmax_j(h_i . e_j / tau) e_j` with `e = words W`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var, words: Var) -> Result<Attended> {
        let (c, h, w) = chw(g, hidden)?;
        check_words(g, words, self.proj.in_features)?;
        if c != self.proj.out_features {
            return Err(dim_err!("spatial attention built for {} channels, got {c}", self.proj.out_features));
        }
        let e = g.linear(store, &self.proj, words)?;
        let flat = g.reshape(hidden, &[c, h * w])?;
        let scores = g.matmul_t(flat, e, true, true)?;
        let scores = g.mul_scalar(scores, 1.0 / self.tau);
        let alpha = g.softmax_rows(scores)?;
        let out = g.matmul_t(e, alpha, true, true)?;
        let output = g.reshape(out, &[c, h, w])?;
        Ok(Attended { output, weights: alpha })
    }
}

/// Each channel attends over the words projected onto the spatial grid and
/// is rescaled by the attended word relevance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelAttention {
    /// `d_text -> H*W`.
    pub spatial: LinearSpec,
    /// `d_text -> 1`.
    pub relevance: LinearSpec,
    pub tau: f32,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_text: usize,
        locations: usize,
        tau: f32,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (d_text as f32).sqrt();
        let spatial = LinearSpec::new(store, &format!("{name}/spatial"), d_text, locations, std, rng)?;
        let relevance = LinearSpec::new(store, &format!("{name}/relevance"), d_text, 1, std, rng)?;
        Ok(Self { spatial, relevance, tau })
    }

    /// `beta_k = softmax_j(h_k . p_j / tau)`, output channel `k` is
    /// `h_k * sum_j beta_kj r_j`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, hidden: Var, words: Var) -> Result<Attended> {
        let (c, h, w) = chw(g, hidden)?;
        check_words(g, words, self.spatial.in_features)?;
        if h * w != self.spatial.out_features {
            return Err(dim_err!(
                "channel attention built for {} locations, got {}",
                self.spatial.out_features,
                h * w
            ));
        }
        let p = g.linear(store, &self.spatial, words)?;
        let r = g.linear(store, &self.relevance, words)?;
        let flat = g.reshape(hidden, &[c, h * w])?;
        let scores = g.matmul_t(flat, p, false, true)?;
        let scores = g.mul_scalar(scores, 1.0 / self.tau);
        let beta = g.softmax_rows(scores)?;
        let scale = g.matmul(beta, r)?;
        let output = g.channel_scale(hidden, scale)?;
        Ok(Attended { output, weights: beta })
    }
}
