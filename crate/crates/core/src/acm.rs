//! Affine combination of hidden features with image features:
//! `h' = h * W(v) + b(v)`.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{ConvSpec, Graph, ParamStore, Tensor, Var};

/// Parameters of one insertion point. Each branch is
/// upsample^k(v) -> conv3x3 -> GLU -> conv3x3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AcmParams {
    pub upsample: usize,
    pub w1: ConvSpec,
    pub w2: ConvSpec,
    pub b1: ConvSpec,
    pub b2: ConvSpec,
}

impl AcmParams {
    /// Branches from `v_channels` image features to `h_channels` outputs.
    /// The W branch starts with a bias of one, so a fresh module passes
    /// `h` through and adds `b(v)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        v_channels: usize,
        h_channels: usize,
        upsample: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mid = (h_channels / 2).max(1);
        let w1 = ConvSpec::same3(store, &format!("{name}/w1"), v_channels, 2 * mid, rng)?;
        let w2 = ConvSpec::same3(store, &format!("{name}/w2"), mid, h_channels, rng)?;
        let b1 = ConvSpec::same3(store, &format!("{name}/b1"), v_channels, 2 * mid, rng)?;
        let b2 = ConvSpec::same3(store, &format!("{name}/b2"), mid, h_channels, rng)?;
        store.set(w2.bias, Tensor::full(&[h_channels], 1.0))?;
        Ok(Self {
            upsample,
            w1,
            w2,
            b1,
            b2,
        })
    }
}

/// The three maps of one fusion: `W(v)`, `h * W(v)` and `b(v)`.
#[derive(Debug, Clone, Copy)]
pub struct AcmMaps {
    pub w: Var,
    pub hw: Var,
    pub b: Var,
}

fn branch(g: &mut Graph, store: &ParamStore, c1: &ConvSpec, c2: &ConvSpec, v: Var) -> Result<Var> {
    let x = g.conv2d(store, c1, v)?;
    let x = g.glu(x)?;
    g.conv2d(store, c2, x)
}

pub fn acm_inspect(g: &mut Graph, store: &ParamStore, p: &AcmParams, h: Var, v: Var) -> Result<AcmMaps> {
    let vu = g.upsample_n(v, p.upsample)?;
    let w = branch(g, store, &p.w1, &p.w2, vu)?;
    let b = branch(g, store, &p.b1, &p.b2, vu)?;
    if g.shape(w) != g.shape(h) {
        return Err(dim_err!(
            "fusion branches produce {:?} but h is {:?}",
            g.shape(w),
            g.shape(h)
        ));
    }
    let hw = g.mul(h, w)?;
    Ok(AcmMaps { w, hw, b })
}

pub fn acm_forward(g: &mut Graph, store: &ParamStore, p: &AcmParams, h: Var, v: Var) -> Result<Var> {
    let m = acm_inspect(g, store, p, h, v)?;
    g.add(m.hw, m.b)
}
