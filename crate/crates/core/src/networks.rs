//! Generator stages, detail correction network and discriminators.
//!
//! All parameter names live under one of three prefixes: [`GEN`] for the
//! three-stage main generator, [`DCM`] for the detail correction network and
//! [`DISC`] for every discriminator. Training selects groups by prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::acm::{acm_forward, AcmParams};
use crate::attention::{ChannelAttention, SpatialAttention};
use crate::config::ModelConfig;
use crate::encoders::{fit_resolution, to_net, Encoders};
use crate::error::{config_err, dim_err, Error, Result};
use crate::metrics::ShapeClassifier;
use crate::objectives::StageLogits;
use crate::tensor::{ConvSpec, Graph, LinearSpec, ParamId, ParamStore, Tensor, Var};
use crate::text::{TextVars, Vocabulary};

pub const GEN: &str = "gen/";
pub const DCM: &str = "dcm/";
pub const DISC: &str = "disc/";

const SLOPE: f32 = 0.2;
const IN_EPS: f32 = 1e-5;

/// Architecture variants used for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Ablation {
    #[default]
    None,
    /// Fusion replaced by pass-through; image features are concatenated
    /// once with the initial text features.
    NoAcm,
    /// Fusion replaced by channel concatenation and a 1x1 convolution.
    Concat,
    /// No main generator; the correction network starts from the image.
    NoMain,
    /// Final output is the last generator stage.
    NoDcm,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoAcm,
        Ablation::Concat,
        Ablation::NoMain,
        Ablation::NoDcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoAcm => "no-acm",
            Ablation::Concat => "concat",
            Ablation::NoMain => "no-main",
            Ablation::NoDcm => "no-dcm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| config_err!("unknown ablation {s:?}; expected none, no-acm, concat, no-main or no-dcm"))
    }

    pub fn has_main(self) -> bool {
        self != Ablation::NoMain
    }

    pub fn has_dcm(self) -> bool {
        self != Ablation::NoDcm
    }
}

/// Generator noise input.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector(Tensor);

impl NoiseVector {
    pub fn sample<R: Rng + ?Sized>(d_z: usize, rng: &mut R) -> Self {
        Self(Tensor::from_fn(&[d_z], |_| rng.sample::<f32, _>(StandardNormal)))
    }

    pub fn new(z: Tensor) -> Result<Self> {
        if z.ndim() != 1 {
            return Err(dim_err!("noise must be a vector, got {:?}", z.shape()));
        }
        z.ensure_finite("noise vector")?;
        Ok(Self(z))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-sample conditioning inputs, all already on the graph.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `[3, S, S]` in `[-1, 1]`.
    pub image: Var,
    pub regional: Var,
    pub shallow: Var,
    pub text: TextVars,
}

impl Conditioning {
    /// Runs the frozen encoders on a `[0, 1]` image and a caption.
    pub fn build(g: &mut Graph, store: &ParamStore, enc: &Encoders, image: &Tensor, tokens: &[usize]) -> Result<Self> {
        enc.require_pretrained(store)?;
        let image = g.constant(to_net(image));
        let (shallow, regional) = enc.both(g, store, image)?;
        let text = enc.text.encode(g, store, tokens)?;
        Ok(Self {
            image,
            regional,
            shallow,
            text,
        })
    }

    /// Copies the values into another graph as constants.
    pub fn detach_into(&self, src: &Graph, dst: &mut Graph) -> Self {
        Self {
            image: dst.constant(src.value(self.image).clone()),
            regional: dst.constant(src.value(self.regional).clone()),
            shallow: dst.constant(src.value(self.shallow).clone()),
            text: TextVars::constant(dst, &self.text.values(src)),
        }
    }
}

/// Output of one generator stage.
#[derive(Debug, Clone, Copy)]
pub struct StagePack {
    pub index: usize,
    pub h: Var,
    pub h_fused: Var,
    /// `[3, R, R]` in `[-1, 1]`.
    pub image: Var,
}

/// Intermediates of the detail correction network.
#[derive(Debug, Clone, Copy)]
pub struct DcmPack {
    pub h_last: Var,
    pub s: Var,
    pub c: Var,
    /// `[3C', H, W]`.
    pub a: Var,
    /// Shallow features upsampled to the working resolution.
    pub v_up: Var,
    pub fused: Var,
    pub image: Var,
}

/// How image features enter a hidden map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Acm(AcmParams),
    Concat { conv: ConvSpec, upsample: usize },
    Pass,
}

impl Fusion {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        ablation: Ablation,
        v_channels: usize,
        h_channels: usize,
        upsample: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match ablation {
            Ablation::NoAcm => Fusion::Pass,
            Ablation::Concat => Fusion::Concat {
                conv: ConvSpec::new(store, name, h_channels + v_channels, h_channels, 1, 1, 0, rng)?,
                upsample,
            },
            _ => Fusion::Acm(AcmParams::new(store, name, v_channels, h_channels, upsample, rng)?),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, v: Var) -> Result<Var> {
        match self {
            Fusion::Acm(p) => acm_forward(g, store, p, h, v),
            Fusion::Concat { conv, upsample } => {
                let vu = g.upsample_n(v, *upsample)?;
                if g.shape(vu)[1..] != g.shape(h)[1..] {
                    return Err(dim_err!(
                        "fusion: image features {:?} do not match hidden {:?}",
                        g.shape(vu),
                        g.shape(h)
                    ));
                }
                let cat = g.concat(&[h, vu])?;
                g.conv2d(store, conv, cat)
            }
            Fusion::Pass => Ok(h),
        }
    }
}

/// Upsample, 3x3 convolution to twice the width, normalization, GLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct UpBlock {
    conv: ConvSpec,
    /// Running mean and variance when batch-normalized.
    bn: Option<(ParamId, ParamId)>,
}

impl UpBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        batch_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = ConvSpec::same3(store, &format!("{name}/conv"), c_in, 2 * c_out, rng)?;
        let bn = if batch_norm {
            Some(bn_buffers(store, &format!("{name}/bn"), 2 * c_out)?)
        } else {
            None
        };
        Ok(Self { conv, bn })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<Vec<Var>> {
        let mut ys = Vec::with_capacity(xs.len());
        for &x in xs {
            let u = g.upsample2x(x)?;
            ys.push(g.conv2d(store, &self.conv, u)?);
        }
        let ys = match self.bn {
            Some((m, v)) => g.batch_norm(store, &ys, m, v)?,
            None => ys
                .into_iter()
                .map(|y| g.instance_norm(y, IN_EPS))
                .collect::<Result<Vec<_>>>()?,
        };
        ys.into_iter().map(|y| g.glu(y)).collect()
    }
}

fn bn_buffers(store: &mut ParamStore, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
    let m = store.add_buffer(format!("{name}/running_mean"), Tensor::zeros(&[c]))?;
    let v = store.add_buffer(format!("{name}/running_var"), Tensor::full(&[c], 1.0))?;
    Ok((m, v))
}

fn head(g: &mut Graph, store: &ParamStore, conv: &ConvSpec, x: Var) -> Result<Var> {
    let y = g.conv2d(store, conv, x)?;
    Ok(g.tanh(y))
}

/// Over the dataset palette tanh(1.2 x) is within 0.06 pixel units of x.
const IDENTITY_HEAD_GAIN: f32 = 1.2;

/// Rewrites the first three output channels of a 3x3 conv to copy the
/// first three input channels, scaled by `gain`.
fn center_taps(store: &mut ParamStore, conv: &ConvSpec, gain: f32) -> Result<()> {
    let mut w = store.get(conv.weight).clone();
    let mut b = store.get(conv.bias).clone();
    let c_in = conv.in_channels;
    let k = conv.kernel_size * conv.kernel_size;
    for o in 0..3 {
        let row = &mut w.data_mut()[o * c_in * k..(o + 1) * c_in * k];
        row.fill(0.0);
        row[o * k + k / 2] = gain;
        b.data_mut()[o] = 0.0;
    }
    store.set(conv.weight, w)?;
    store.set(conv.bias, b)
}

/// 1x1 conv weights that copy the first `c` input channels.
fn pass_first(store: &mut ParamStore, conv: &ConvSpec, c: usize) -> Result<()> {
    let shape = store.get(conv.weight).shape().to_vec();
    let mut w = Tensor::zeros(&shape);
    let c_in = shape[1];
    for o in 0..c {
        w.data_mut()[o * c_in + o] = 1.0;
    }
    store.set(conv.weight, w)?;
    store.set(conv.bias, Tensor::zeros(&[c]))
}

fn log2_exact(n: usize, what: &str) -> Result<usize> {
    if n == 0 || !n.is_power_of_two() {
        return Err(config_err!("{what} must be a power of two, got {n}"));
    }
    Ok(n.trailing_zeros() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Refine {
    up: UpBlock,
    attn: SpatialAttention,
    joint: ConvSpec,
}

/// The three-stage main generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub stage_sizes: [usize; 3],
    pub stage_channels: [usize; 3],
    d_z: usize,
    fc: LinearSpec,
    fc_bn: (ParamId, ParamId),
    init_fuse: Option<ConvSpec>,
    stage0_up: Vec<UpBlock>,
    refine: [Refine; 2],
    fusions: [Fusion; 3],
    heads: [ConvSpec; 3],
}

impl Generator {
    pub fn final_head(&self) -> &ConvSpec {
        &self.heads[2]
    }

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, ablation: Ablation, rng: &mut R) -> Result<Self> {
        let sizes = cfg.stage_sizes();
        let ch = cfg.stage_channels;
        let c0 = ch[0];
        let d_in = cfg.d_text + cfg.d_z;
        let fc = LinearSpec::new(store, "gen/fc", d_in, 2 * c0 * 16, 1.0 / (d_in as f32).sqrt(), rng)?;
        let fc_bn = bn_buffers(store, "gen/fc_bn", 2 * c0)?;
        let init_fuse = if ablation == Ablation::NoAcm {
            Some(ConvSpec::new(store, "gen/init_fuse", c0 + cfg.regional_channels, c0, 1, 1, 0, rng)?)
        } else {
            None
        };
        let ups = log2_exact(sizes[0] / 4, "first stage size / 4")?;
        let stage0_up = (0..ups)
            .map(|j| UpBlock::new(store, &format!("gen/s0/up{j}"), c0, c0, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let reg_ups = |s: usize| log2_exact(s / cfg.regional_size(), "stage size / regional size");
        let mut fusions = Vec::with_capacity(3);
        let mut heads = Vec::with_capacity(3);
        for k in 0..3 {
            fusions.push(Fusion::new(
                store,
                &format!("gen/s{k}/fuse"),
                ablation,
                cfg.regional_channels,
                ch[k],
                reg_ups(sizes[k])?,
                rng,
            )?);
            heads.push(ConvSpec::same3(store, &format!("gen/s{k}/head"), ch[k], 3, rng)?);
        }
        let mut refine = Vec::with_capacity(2);
        for k in 1..3 {
            refine.push(Refine {
                up: UpBlock::new(store, &format!("gen/s{k}/up"), ch[k - 1], ch[k], false, rng)?,
                attn: SpatialAttention::new(store, &format!("gen/s{k}/attn"), cfg.d_text, ch[k], cfg.tau_spatial, rng)?,
                joint: ConvSpec::same3(store, &format!("gen/s{k}/joint"), 2 * ch[k], 2 * ch[k], rng)?,
            });
        }
        Ok(Self {
            stage_sizes: sizes,
            stage_channels: ch,
            d_z: cfg.d_z,
            fc,
            fc_bn,
            init_fuse,
            stage0_up,
            refine: [refine[0], refine[1]],
            fusions: [fusions[0], fusions[1], fusions[2]],
            heads: [heads[0], heads[1], heads[2]],
        })
    }

    /// Runs all three stages over a batch. Batch normalization in the first
    /// stage couples the samples when the graph is in training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        conds: &[Conditioning],
        zs: &[NoiseVector],
    ) -> Result<Vec<[StagePack; 3]>> {
        if conds.is_empty() || conds.len() != zs.len() {
            return Err(config_err!("{} conditioning inputs with {} noise vectors", conds.len(), zs.len()));
        }
        let c0 = self.stage_channels[0];
        let mut xs = Vec::with_capacity(conds.len());
        for (c, z) in conds.iter().zip(zs) {
            if z.0.numel() != self.d_z {
                return Err(dim_err!("noise has {} entries, expected {}", z.0.numel(), self.d_z));
            }
            let zv = g.constant(z.0.clone());
            let cat = g.concat(&[c.text.sentence, zv])?;
            let n = g.value(cat).numel();
            let row = g.reshape(cat, &[1, n])?;
            let y = g.linear(store, &self.fc, row)?;
            xs.push(g.reshape(y, &[2 * c0, 4, 4])?);
        }
        let xs = g.batch_norm(store, &xs, self.fc_bn.0, self.fc_bn.1)?;
        let mut hs = xs.into_iter().map(|x| g.glu(x)).collect::<Result<Vec<_>>>()?;
        if let Some(conv) = &self.init_fuse {
            for (h, c) in hs.iter_mut().zip(conds) {
                let mut v = c.regional;
                while g.shape(v)[1] > 4 {
                    v = g.avg_pool2x(v)?;
                }
                let cat = g.concat(&[*h, v])?;
                *h = g.conv2d(store, conv, cat)?;
            }
        }
        for up in &self.stage0_up {
            hs = up.forward(g, store, &hs)?;
        }
        let mut out: Vec<Vec<StagePack>> = conds.iter().map(|_| Vec::with_capacity(3)).collect();
        for (i, c) in conds.iter().enumerate() {
            out[i].push(self.finish_stage(g, store, 0, hs[i], c)?);
        }
        for k in 1..3 {
            let r = &self.refine[k - 1];
            let prev: Vec<Var> = out.iter().map(|p| p[k - 1].h_fused).collect();
            let ups = r.up.forward(g, store, &prev)?;
            for (i, c) in conds.iter().enumerate() {
                let att = r.attn.forward(g, store, ups[i], c.text.words)?;
                let cat = g.concat(&[ups[i], att.output])?;
                let j = g.conv2d(store, &r.joint, cat)?;
                let j = g.instance_norm(j, IN_EPS)?;
                let h = g.glu(j)?;
                out[i].push(self.finish_stage(g, store, k, h, c)?);
            }
        }
        Ok(out.into_iter().map(|p| [p[0], p[1], p[2]]).collect())
    }

    fn finish_stage(&self, g: &mut Graph, store: &ParamStore, k: usize, h: Var, c: &Conditioning) -> Result<StagePack> {
        let h_fused = self.fusions[k].forward(g, store, h, c.regional)?;
        let image = head(g, store, &self.heads[k], h_fused)?;
        Ok(StagePack {
            index: k,
            h,
            h_fused,
            image,
        })
    }

    pub fn fusion(&self, k: usize) -> &Fusion {
        &self.fusions[k]
    }
}

/// `x + IN(conv(GLU(IN(conv(x)))))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResBlock {
    pub c1: ConvSpec,
    pub c2: ConvSpec,
    /// Scalar on the residual branch, zero at init so a fresh block is
    /// an identity.
    pub gate: ParamId,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            c1: ConvSpec::same3(store, &format!("{name}/c1"), c, 2 * c, rng)?,
            c2: ConvSpec::same3(store, &format!("{name}/c2"), c, c, rng)?,
            gate: store.add(format!("{name}/gate"), Tensor::scalar(0.0))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = g.conv2d(store, &self.c1, x)?;
        let y = g.instance_norm(y, IN_EPS)?;
        let y = g.glu(y)?;
        let y = g.conv2d(store, &self.c2, y)?;
        let y = g.instance_norm(y, IN_EPS)?;
        let gate = g.param(store, self.gate);
        let y = g.scale_by(y, gate)?;
        g.add(x, y)
    }
}

/// Detail correction network.
#[derive(Debug, Clone, PartialEq)]
pub struct Dcm {
    pub channels: usize,
    pub size: usize,
    spatial: SpatialAttention,
    channel: ChannelAttention,
    reduce: ConvSpec,
    fusion: Fusion,
    shallow_ups: usize,
    pub res: [ResBlock; 2],
    head: ConvSpec,
    /// Present without a main generator: builds `h_last` from the image.
    from_image: Option<ConvSpec>,
    trained: ParamId,
}

impl Dcm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, ablation: Ablation, rng: &mut R) -> Result<Self> {
        let c = cfg.stage_channels[2];
        let size = cfg.image_size;
        let spatial = SpatialAttention::new(store, "dcm/spatial", cfg.d_text, c, cfg.tau_spatial, rng)?;
        let channel = ChannelAttention::new(store, "dcm/channel", cfg.d_text, size * size, cfg.tau_channel, rng)?;
        let reduce = ConvSpec::new(store, "dcm/reduce", 3 * c, c, 1, 1, 0, rng)?;
        let shallow_ups = log2_exact(size / cfg.shallow_size(), "image size / shallow size")?;
        let fusion = Fusion::new(store, "dcm/fuse", ablation, cfg.shallow_channels, c, 0, rng)?;
        let res = [
            ResBlock::new(store, "dcm/res0", c, rng)?,
            ResBlock::new(store, "dcm/res1", c, rng)?,
        ];
        let head = ConvSpec::same3(store, "dcm/head", c, 3, rng)?;
        let from_image = if ablation == Ablation::NoMain {
            // the first three hidden channels carry the image itself and
            // the head reads them back, so the untrained path is close to
            // an identity map
            let conv = ConvSpec::same3(store, "dcm/from_image", 3, c, rng)?;
            center_taps(store, &conv, 1.0)?;
            center_taps(store, &head, IDENTITY_HEAD_GAIN)?;
            Some(conv)
        } else {
            None
        };
        let trained = store.add_buffer("dcm/trained", Tensor::scalar(0.0))?;
        // start as a pass-through of h_last so the first epochs refine the
        // main output instead of relearning it
        pass_first(store, &reduce, c)?;
        match &fusion {
            Fusion::Acm(p) => {
                for conv in [p.w2, p.b2] {
                    let s = store.get(conv.weight).shape().to_vec();
                    store.set(conv.weight, Tensor::zeros(&s))?;
                }
                store.set(p.b2.bias, Tensor::zeros(&[c]))?;
            }
            Fusion::Concat { conv, .. } => pass_first(store, conv, c)?,
            Fusion::Pass => {}
        }
        Ok(Self {
            channels: c,
            size,
            spatial,
            channel,
            reduce,
            fusion,
            shallow_ups,
            res,
            head,
            from_image,
            trained,
        })
    }

    /// Copies the final generator head, so an untrained network reproduces
    /// the main module's image.
    pub fn warm_start(&self, store: &mut ParamStore, main_head: &ConvSpec) -> Result<()> {
        for (dst, src) in [(self.head.weight, main_head.weight), (self.head.bias, main_head.bias)] {
            let t = store.get(src).clone();
            store.set(dst, t)?;
        }
        Ok(())
    }

    pub fn is_trained(&self, store: &ParamStore) -> bool {
        store.get(self.trained).item() != 0.0
    }

    pub fn set_trained(&self, store: &mut ParamStore) -> Result<()> {
        store.set(self.trained, Tensor::scalar(1.0))
    }

    /// Hidden features built from the input image alone.
    pub fn h_from_image(&self, g: &mut Graph, store: &ParamStore, cond: &Conditioning) -> Result<Var> {
        let conv = self
            .from_image
            .as_ref()
            .ok_or_else(|| Error::State("this correction network expects generator features".into()))?;
        g.conv2d(store, conv, cond.image)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h_last: Var, cond: &Conditioning) -> Result<DcmPack> {
        let (c, s) = (self.channels, self.size);
        if g.shape(h_last) != [c, s, s] {
            return Err(dim_err!("correction network expects [{c}, {s}, {s}] features, got {:?}", g.shape(h_last)));
        }
        let sp = self.spatial.forward(g, store, h_last, cond.text.words)?.output;
        let ch = self.channel.forward(g, store, h_last, cond.text.words)?.output;
        let a = g.concat(&[h_last, sp, ch])?;
        let reduced = g.conv2d(store, &self.reduce, a)?;
        let v_up = g.upsample_n(cond.shallow, self.shallow_ups)?;
        let fused = self.fusion.forward(g, store, reduced, v_up)?;
        let mut x = fused;
        for r in &self.res {
            x = r.forward(g, store, x)?;
        }
        let image = head(g, store, &self.head, x)?;
        Ok(DcmPack {
            h_last,
            s: sp,
            c: ch,
            a,
            v_up,
            fused,
            image,
        })
    }
}

/// Downsampling convolutional critic with an unconditional and a
/// sentence-conditioned head.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub resolution: usize,
    trunk: Vec<ConvSpec>,
    uncond: ConvSpec,
    joint: ConvSpec,
    cond: ConvSpec,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        resolution: usize,
        ndf: usize,
        d_text: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = log2_exact(resolution / 4, "discriminator resolution / 4")?;
        if n == 0 {
            return Err(config_err!("discriminator resolution must be at least 8"));
        }
        let mut trunk = Vec::with_capacity(n);
        let mut c_in = 3;
        let mut c_out = ndf;
        for j in 0..n {
            trunk.push(ConvSpec::new(store, &format!("{name}/down{j}"), c_in, c_out, 4, 2, 1, rng)?);
            c_in = c_out;
            c_out *= 2;
        }
        let uncond = ConvSpec::new(store, &format!("{name}/uncond"), c_in, 1, 4, 4, 0, rng)?;
        let joint = ConvSpec::same3(store, &format!("{name}/joint"), c_in + d_text, c_in, rng)?;
        let cond = ConvSpec::new(store, &format!("{name}/cond"), c_in, 1, 4, 4, 0, rng)?;
        Ok(Self {
            resolution,
            trunk,
            uncond,
            joint,
            cond,
        })
    }

    /// Raw logits `(uncond, cond)`, each of shape `[1]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, image: Var, sentence: Var) -> Result<(Var, Var)> {
        let r = self.resolution;
        if g.shape(image) != [3, r, r] {
            return Err(dim_err!("discriminator for {r}x{r} got image {:?}", g.shape(image)));
        }
        let mut x = image;
        for conv in &self.trunk {
            let y = g.conv2d(store, conv, x)?;
            x = g.leaky_relu(y, SLOPE);
        }
        let u = g.conv2d(store, &self.uncond, x)?;
        let u = g.reshape(u, &[1])?;
        let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
        let t = g.tile_spatial(sentence, h, w)?;
        let cat = g.concat(&[x, t])?;
        let j = g.conv2d(store, &self.joint, cat)?;
        let j = g.leaky_relu(j, SLOPE);
        let c = g.conv2d(store, &self.cond, j)?;
        let c = g.reshape(c, &[1])?;
        Ok((u, c))
    }

    /// Batch logits stacked into `[B]` vectors.
    pub fn batch_logits(&self, g: &mut Graph, store: &ParamStore, images: &[Var], sentences: &[Var]) -> Result<StageLogits> {
        if images.is_empty() || images.len() != sentences.len() {
            return Err(config_err!("{} images with {} sentences", images.len(), sentences.len()));
        }
        let mut us = Vec::with_capacity(images.len());
        let mut cs = Vec::with_capacity(images.len());
        for (&img, &s) in images.iter().zip(sentences) {
            let (u, c) = self.logits(g, store, img, s)?;
            us.push(u);
            cs.push(c);
        }
        Ok(StageLogits {
            uncond: g.concat(&us)?,
            cond: g.concat(&cs)?,
        })
    }

    /// Sigmoid scores `(uncond, cond)` in `(0, 1)`.
    pub fn score(&self, store: &ParamStore, image: &Tensor, sentence: &Tensor) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let s = g.constant(sentence.clone());
        let (u, c) = self.logits(&mut g, store, x, s)?;
        let sig = |l: f32| 1.0 / (1.0 + (-(l as f64)).exp());
        Ok((sig(g.value(u).item()), sig(g.value(c).item())))
    }
}

/// One discriminator per generator stage plus one for the correction output.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminators {
    pub stages: Vec<Discriminator>,
    pub dcm: Option<Discriminator>,
}

impl Discriminators {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, ablation: Ablation, rng: &mut R) -> Result<Self> {
        let stages = if ablation.has_main() {
            cfg.stage_sizes()
                .iter()
                .enumerate()
                .map(|(k, &r)| Discriminator::new(store, &format!("disc/s{k}"), r, cfg.ndf, cfg.d_text, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let dcm = if ablation.has_dcm() {
            Some(Discriminator::new(store, "disc/dcm", cfg.image_size, cfg.ndf, cfg.d_text, rng)?)
        } else {
            None
        };
        Ok(Self { stages, dcm })
    }

    pub fn stage(&self, k: usize) -> Result<&Discriminator> {
        self.stages
            .get(k)
            .ok_or_else(|| config_err!("no discriminator for stage {k} in this model"))
    }

    pub fn for_dcm(&self) -> Result<&Discriminator> {
        self.dcm
            .as_ref()
            .ok_or_else(|| config_err!("no discriminator for the correction output in this model"))
    }
}

/// Images produced by one manipulation, all `[3, R, R]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manipulation {
    pub stages: Vec<Tensor>,
    pub dcm: Option<Tensor>,
}

impl Manipulation {
    /// The correction output when present, otherwise the last stage.
    pub fn final_image(&self) -> &Tensor {
        self.dcm
            .as_ref()
            .or(self.stages.last())
            .expect("a manipulation always holds at least one image")
    }
}

/// Forward outputs of a whole model on one batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub stages: Vec<[StagePack; 3]>,
    pub dcm: Vec<DcmPack>,
}

/// Every network of one model sharing a single parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoders: Encoders,
    pub classifier: ShapeClassifier,
    pub generator: Option<Generator>,
    pub dcm: Option<Dcm>,
    pub discriminators: Discriminators,
}

impl Model {
    /// Deterministic construction from `seed`.
    pub fn new(config: ModelConfig, ablation: Ablation, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = Encoders::new(&mut store, &config, vocab.size(), &mut rng)?;
        let classifier = ShapeClassifier::new(&mut store, &config, &mut rng)?;
        let generator = if ablation.has_main() {
            Some(Generator::new(&mut store, &config, ablation, &mut rng)?)
        } else {
            None
        };
        let dcm = if ablation.has_dcm() {
            Some(Dcm::new(&mut store, &config, ablation, &mut rng)?)
        } else {
            None
        };
        let discriminators = Discriminators::new(&mut store, &config, ablation, &mut rng)?;
        log::info!(
            "model ({}) with {} parameters in {} tensors",
            ablation.name(),
            store.num_scalars(),
            store.len()
        );
        Ok(Self {
            config,
            ablation,
            vocab,
            store,
            encoders,
            classifier,
            generator,
            dcm,
            discriminators,
        })
    }

    pub fn generator(&self) -> Result<&Generator> {
        self.generator
            .as_ref()
            .ok_or_else(|| Error::State("this model has no main generator".into()))
    }

    pub fn dcm(&self) -> Result<&Dcm> {
        self.dcm
            .as_ref()
            .ok_or_else(|| Error::State("this model has no correction network".into()))
    }

    /// Number of scalar parameters under `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.store
            .ids_with_prefix(prefix)
            .filter(|&id| !self.store.is_buffer(id))
            .map(|id| self.store.get(id).numel())
            .sum()
    }

    /// Builds conditioning for a batch of `[0, 1]` images and captions.
    pub fn condition(&self, g: &mut Graph, images: &[Tensor], tokens: &[Vec<usize>]) -> Result<Vec<Conditioning>> {
        if images.len() != tokens.len() {
            return Err(config_err!("{} images but {} captions", images.len(), tokens.len()));
        }
        images
            .iter()
            .zip(tokens)
            .map(|(img, tok)| {
                let img = fit_resolution(img, self.config.image_size)?;
                Conditioning::build(g, &self.store, &self.encoders, &img, tok)
            })
            .collect()
    }

    /// Main generator over a batch.
    pub fn main_forward(&self, g: &mut Graph, conds: &[Conditioning], zs: &[NoiseVector]) -> Result<Vec<[StagePack; 3]>> {
        self.encoders.require_pretrained(&self.store)?;
        self.generator()?.forward(g, &self.store, conds, zs)
    }

    /// Correction network over a batch, starting from `h_last` values
    /// (or from the image when there is no main generator).
    pub fn dcm_forward(&self, g: &mut Graph, conds: &[Conditioning], h_last: Option<&[Var]>) -> Result<Vec<DcmPack>> {
        let dcm = self.dcm()?;
        conds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let h = match h_last {
                    Some(hs) => hs[i],
                    None => dcm.h_from_image(g, &self.store, c)?,
                };
                dcm.forward(g, &self.store, h, c)
            })
            .collect()
    }

    /// Whether the correction output is the model's final image: once
    /// trained, or always when there is no main generator.
    pub fn dcm_ready(&self) -> bool {
        match &self.dcm {
            Some(d) => !self.ablation.has_main() || d.is_trained(&self.store),
            None => false,
        }
    }

    /// Full forward pass on one graph. The correction network runs only
    /// when [`dcm_ready`](Self::dcm_ready) or `force_dcm` is set.
    pub fn forward(&self, g: &mut Graph, conds: &[Conditioning], zs: &[NoiseVector], force_dcm: bool) -> Result<ForwardPass> {
        self.encoders.require_pretrained(&self.store)?;
        let stages = if self.ablation.has_main() {
            self.main_forward(g, conds, zs)?
        } else {
            Vec::new()
        };
        let dcm = if self.ablation.has_dcm() && (force_dcm || self.dcm_ready()) {
            if stages.is_empty() {
                self.dcm_forward(g, conds, None)?
            } else {
                let hs: Vec<Var> = stages.iter().map(|p| p[2].h_fused).collect();
                self.dcm_forward(g, conds, Some(&hs))?
            }
        } else {
            Vec::new()
        };
        Ok(ForwardPass { stages, dcm })
    }

    /// Inference-mode manipulation of one `[0, 1]` image.
    pub fn manipulate(&self, image: &Tensor, tokens: &[usize], z: &NoiseVector) -> Result<Manipulation> {
        let mut g = Graph::new();
        let conds = self.condition(&mut g, std::slice::from_ref(image), &[tokens.to_vec()])?;
        let pass = self.forward(&mut g, &conds, std::slice::from_ref(z), false)?;
        let unit = |g: &Graph, v: Var| g.value(v).map(|x| (x + 1.0) * 0.5);
        Ok(Manipulation {
            stages: pass.stages.first().map_or_else(Vec::new, |p| p.iter().map(|s| unit(&g, s.image)).collect()),
            dcm: pass.dcm.first().map(|d| unit(&g, d.image)),
        })
    }
}
