//! Two-phase adversarial training, checkpoint selection and persistence.
//!
//! Each batch runs one discriminator step on detached generator outputs,
//! then one generator step against the updated discriminators. The main
//! generator is trained first; the correction network is trained afterwards
//! with the main generator in inference mode.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_model, model_checkpoint, model_from_checkpoint, save_model, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC,
};

use crate::config::TrainConfig;
use crate::dataset::{sample_mismatch, CaptionedSample, Grammar, MismatchKind, MismatchedPair};
use crate::encoders::{batches, fit_resolution, pretrain_matching, to_net};
use crate::error::{config_err, Error, Result};
use crate::metrics::{evaluate, Judge, MetricsReport, SeededModel};
use crate::networks::{Conditioning, Discriminator, Model, NoiseVector, DCM, DISC, GEN};
use crate::objectives::{
    corre_loss, damsm_loss, discriminator_loss, generator_loss, l_reg, rec_loss, to_unit, GeneratorTerms, LossReport,
    StageLogits,
};
use crate::optim::Adam;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// One validation evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub diff: f64,
    pub sim: f64,
    pub mp: f64,
}

impl EpochRecord {
    fn from_report(epoch: usize, r: &MetricsReport) -> Self {
        Self {
            epoch,
            diff: r.diff,
            sim: r.sim,
            mp: r.mp,
        }
    }
}

/// `epoch,diff,sim,mp` lines with a header.
pub fn mp_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,diff,sim,mp\n");
    for r in log {
        s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.epoch, r.diff, r.sim, r.mp));
    }
    s
}

/// Index of the highest value; ties go to the earliest.
pub fn select_checkpoint(mp_log: &[f64]) -> Result<usize> {
    if mp_log.is_empty() {
        return Err(config_err!("cannot select from an empty precision log"));
    }
    let mut best = 0;
    for (i, &v) in mp_log.iter().enumerate() {
        if v > mp_log[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Outcome of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Position in `log` of the snapshot the model was restored to.
    pub selected: usize,
    pub generator_loss: Vec<f32>,
    pub discriminator_loss: Vec<f32>,
}

impl TrainReport {
    pub fn selected_epoch(&self) -> usize {
        self.log[self.selected].epoch
    }

    pub fn mp_history(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.mp).collect()
    }
}

/// Validation pairs with mismatched captions.
pub fn validation_pairs(grammar: &Grammar, samples: &[CaptionedSample], kind: MismatchKind, seed: u64) -> Result<Vec<MismatchedPair>> {
    crate::metrics::mismatch_set(grammar, samples, kind, seed)
}

/// Validation metrics of the model's final output.
pub fn validate(model: &Model, pairs: &[MismatchedPair], seed: u64) -> Result<MetricsReport> {
    evaluate(&SeededModel { model, seed }, pairs, &Judge::of(model))
}

/// Copies encoder and classifier tensors from a checkpoint.
pub fn load_pretrained(model: &mut Model, ck: &Checkpoint) -> Result<()> {
    let keep: Vec<(String, Tensor)> = ck
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("encoders/") || n.starts_with("classifier/"))
        .cloned()
        .collect();
    if keep.is_empty() {
        return Err(Error::Load("checkpoint holds no encoder tensors".into()));
    }
    model.store.load_from(&keep, false)?;
    model.encoders.require_pretrained(&model.store)
}

/// Loss histories of [`pretrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub matching_loss: Vec<f32>,
    pub classifier_loss: Vec<f32>,
}

/// Learning rate of the shape classifier.
const CLASSIFIER_LR: f32 = 3e-3;

/// Trains the matching encoders, then the shape classifier used by the
/// inception proxy. Both are frozen afterwards.
pub fn pretrain(model: &mut Model, grammar: &Grammar, samples: &[CaptionedSample], cfg: &TrainConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let size = model.config.image_size;
    let images = samples
        .iter()
        .map(|s| fit_resolution(&s.image, size).map(|t| to_net(&t)))
        .collect::<Result<Vec<_>>>()?;
    let tokens: Vec<Vec<usize>> = samples.iter().map(|s| model.vocab.encode(&s.tokens)).collect();
    let enc = model.encoders.clone();
    let matching_loss = pretrain_matching(
        &mut model.store,
        &enc,
        &images,
        &tokens,
        cfg.epochs_pretrain,
        cfg.batch_size.max(2),
        cfg.lr_pretrain,
        model.config.gamma,
        cfg.seed,
    )?;
    let labels = samples
        .iter()
        .map(|s| {
            grammar
                .shape_index(&s.attributes.shape)
                .ok_or_else(|| config_err!("shape {} is not in the grammar", s.attributes.shape))
        })
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let cls = model.classifier.clone();
    let classifier_loss = cls.train(
        &mut model.store,
        &raw,
        &labels,
        cfg.epochs_pretrain,
        cfg.batch_size.max(2),
        CLASSIFIER_LR,
        cfg.seed,
    )?;
    Ok(PretrainReport {
        matching_loss,
        classifier_loss,
    })
}

struct Batch {
    images: Vec<Tensor>,
    tokens: Vec<Vec<usize>>,
    mismatched: Vec<Vec<usize>>,
    zs: Vec<NoiseVector>,
}

fn make_batch(model: &Model, grammar: &Grammar, samples: &[CaptionedSample], idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut b = Batch {
        images: Vec::with_capacity(idx.len()),
        tokens: Vec::with_capacity(idx.len()),
        mismatched: Vec::with_capacity(idx.len()),
        zs: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let s = &samples[i];
        let m = sample_mismatch(grammar, s, MismatchKind::Any, rng)?;
        b.images.push(fit_resolution(&s.image, model.config.image_size)?);
        b.tokens.push(model.vocab.encode(&s.tokens));
        b.mismatched.push(model.vocab.encode(&m.new_tokens));
        b.zs.push(NoiseVector::sample(model.config.d_z, rng));
    }
    Ok(b)
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.mul_scalar(acc, 1.0 / xs.len() as f32))
}

/// Rejects gradients outside the allowed prefixes.
fn checked_grads(g: &Graph, store: &ParamStore, allowed: &[&str]) -> Result<Vec<(ParamId, Tensor)>> {
    let grads = g.param_grads();
    if let Some((id, _)) = grads.iter().find(|(id, _)| !allowed.iter().any(|p| store.name(*id).starts_with(p))) {
        return Err(Error::Invariant(format!(
            "parameter {} received a gradient outside the trained group",
            store.name(*id)
        )));
    }
    Ok(grads)
}

/// Per-sample discriminator step over one output resolution. Real and fake
/// images are network-space values; correspondence terms are constants.
#[allow(clippy::too_many_arguments)]
fn discriminator_step(
    model: &mut Model,
    adam: &mut Adam,
    discs: &[(Discriminator, Vec<Tensor>, Vec<Tensor>)],
    sentences: &[Tensor],
    corre_matched: f32,
    corre_mismatched: f32,
    lambda3: f32,
) -> Result<LossReport> {
    let mut g = Graph::with_trainable(&[DISC]);
    let sents: Vec<Var> = sentences.iter().map(|s| g.constant(s.clone())).collect();
    let cm = g.constant(Tensor::scalar(corre_matched));
    let cx = g.constant(Tensor::scalar(corre_mismatched));
    let mut total: Option<Var> = None;
    let mut terms = Vec::new();
    for (k, (d, real, fake)) in discs.iter().enumerate() {
        let rv: Vec<Var> = real.iter().map(|t| g.constant(t.clone())).collect();
        let fv: Vec<Var> = fake.iter().map(|t| g.constant(t.clone())).collect();
        let rl = d.batch_logits(&mut g, &model.store, &rv, &sents)?;
        let fl = d.batch_logits(&mut g, &model.store, &fv, &sents)?;
        let (l, rep) = discriminator_loss(&mut g, rl, fl, cm, cx, lambda3)?;
        terms.push((format!("d{k}"), rep.total));
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| config_err!("no discriminator to train"))?;
    let value = g.value(total).item();
    g.backward(total)?;
    let grads = checked_grads(&g, &model.store, &[DISC])?;
    adam.step(&mut model.store, &grads)?;
    Ok(LossReport { terms, total: value })
}

/// Mean correspondence of real images with matched and mismatched captions.
fn corre_constants(model: &Model, g: &Graph, conds: &[Conditioning], mismatched: &[Vec<usize>]) -> Result<(f32, f32)> {
    let mut cg = Graph::new();
    let (mut m, mut x) = (0.0f32, 0.0f32);
    for (c, tok) in conds.iter().zip(mismatched) {
        let r = cg.constant(g.value(c.regional).clone());
        let w = cg.constant(g.value(c.text.words).clone());
        let a = corre_loss(&mut cg, &model.store, &model.encoders, r, w)?;
        m += cg.value(a).item();
        let t = model.encoders.text.encode(&mut cg, &model.store, tok)?;
        let b = corre_loss(&mut cg, &model.store, &model.encoders, r, t.words)?;
        x += cg.value(b).item();
    }
    let n = conds.len() as f32;
    Ok((m / n, x / n))
}

/// Auxiliary generator terms on the final images (network space).
fn auxiliary_terms(
    model: &Model,
    g: &mut Graph,
    finals: &[Var],
    conds: &[Conditioning],
    with_rec: bool,
) -> Result<(Var, Var, Option<Var>, Var)> {
    let enc = &model.encoders;
    let store = &model.store;
    let (mut iv, mut tv, mut corre, mut rec, mut reg) = (vec![], vec![], vec![], vec![], vec![]);
    for (&img, c) in finals.iter().zip(conds) {
        let (shallow, regional) = enc.both(g, store, img)?;
        iv.push(enc.image_global(g, store, regional)?);
        tv.push(enc.text_global(g, store, c.text.sentence)?);
        corre.push(corre_loss(g, store, enc, regional, c.text.words)?);
        let gen_u = to_unit(g, img);
        let orig_u = to_unit(g, c.image);
        if with_rec {
            rec.push(rec_loss(g, gen_u, orig_u, shallow, c.shallow)?);
        }
        reg.push(l_reg(g, gen_u, orig_u)?);
    }
    let damsm = damsm_loss(g, &iv, &tv, model.config.gamma)?;
    let corre = mean_of(g, &corre)?;
    let rec = if with_rec { Some(mean_of(g, &rec)?) } else { None };
    let reg = mean_of(g, &reg)?;
    Ok((damsm, corre, rec, reg))
}

fn apply_buffers(store: &mut ParamStore, g: &mut Graph) -> Result<()> {
    for (id, t) in g.take_buffer_updates() {
        store.set(id, t)?;
    }
    Ok(())
}

/// Snapshot of the tensors under `prefixes`.
fn snapshot(store: &ParamStore, prefixes: &[&str]) -> Vec<(String, Tensor)> {
    store
        .named()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect()
}

struct Phase {
    prefixes: &'static [&'static str],
    epochs: usize,
}

/// Trains the main generator and its stage discriminators.
pub fn train_main(
    model: &mut Model,
    grammar: &Grammar,
    train: &[CaptionedSample],
    val: &[MismatchedPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if !model.ablation.has_main() {
        return Err(config_err!("model {} has no main generator to train", model.ablation.name()));
    }
    run_phase(
        model,
        grammar,
        train,
        val,
        cfg,
        Phase {
            prefixes: &[GEN, "disc/s"],
            epochs: cfg.epochs_main,
        },
        main_step,
    )
}

/// Trains the correction network with the main generator frozen.
pub fn train_dcm(
    model: &mut Model,
    grammar: &Grammar,
    train: &[CaptionedSample],
    val: &[MismatchedPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let dcm = model.dcm()?.clone();
    let before = snapshot(&model.store, &[GEN]);
    if !dcm.is_trained(&model.store) && model.ablation.has_main() {
        let head = *model.generator()?.final_head();
        dcm.warm_start(&mut model.store, &head)?;
    }
    dcm.set_trained(&mut model.store)?;
    let report = run_phase(
        model,
        grammar,
        train,
        val,
        cfg,
        Phase {
            prefixes: &[DCM, "disc/dcm"],
            epochs: cfg.epochs_dcm,
        },
        dcm_step,
    )?;
    if snapshot(&model.store, &[GEN]) != before {
        return Err(Error::Invariant("main generator parameters changed while training the correction network".into()));
    }
    Ok(report)
}

type StepFn = fn(&mut Model, &Batch, &TrainConfig, &mut Adam, &mut Adam) -> Result<(f32, f32)>;

fn run_phase(
    model: &mut Model,
    grammar: &Grammar,
    train: &[CaptionedSample],
    val: &[MismatchedPair],
    cfg: &TrainConfig,
    phase: Phase,
    step: StepFn,
) -> Result<TrainReport> {
    cfg.validate()?;
    model.encoders.require_pretrained(&model.store)?;
    if train.len() < 2 {
        return Err(config_err!("training needs at least 2 samples, got {}", train.len()));
    }
    if val.is_empty() {
        return Err(config_err!("validation set is empty"));
    }
    let mut adam_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2)?;
    let mut adam_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        log: Vec::new(),
        selected: 0,
        generator_loss: Vec::new(),
        discriminator_loss: Vec::new(),
    };
    let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
    for epoch in 0..phase.epochs {
        order.shuffle(&mut rng);
        let (mut gsum, mut dsum, mut n) = (0.0f64, 0.0f64, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let batch = make_batch(model, grammar, train, &idx, &mut rng)?;
            let (gl, dl) = step(model, &batch, cfg, &mut adam_g, &mut adam_d)?;
            gsum += gl as f64;
            dsum += dl as f64;
            n += 1;
        }
        report.generator_loss.push((gsum / n as f64) as f32);
        report.discriminator_loss.push((dsum / n as f64) as f32);
        log::info!(
            "epoch {epoch}: generator {:.4} discriminator {:.4}",
            gsum / n as f64,
            dsum / n as f64
        );
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == phase.epochs {
            let r = validate(model, val, cfg.seed)?;
            log::info!("epoch {epoch}: diff {:.4} sim {:.4} mp {:.4}", r.diff, r.sim, r.mp);
            report.log.push(EpochRecord::from_report(epoch, &r));
            if best.as_ref().is_none_or(|(mp, _)| r.mp > *mp) {
                best = Some((r.mp, snapshot(&model.store, phase.prefixes)));
            }
        }
    }
    report.selected = select_checkpoint(&report.mp_history())?;
    if let Some((_, snap)) = best {
        model.store.load_from(&snap, false)?;
    }
    Ok(report)
}

fn main_step(model: &mut Model, b: &Batch, cfg: &TrainConfig, adam_g: &mut Adam, adam_d: &mut Adam) -> Result<(f32, f32)> {
    let mut g = Graph::with_trainable(&[GEN]);
    let conds = model.condition(&mut g, &b.images, &b.tokens)?;
    let packs = model.main_forward(&mut g, &conds, &b.zs)?;
    let sentences: Vec<Tensor> = conds.iter().map(|c| g.value(c.text.sentence).clone()).collect();
    let (cm, cx) = corre_constants(model, &g, &conds, &b.mismatched)?;
    let sizes = model.config.stage_sizes();
    let mut discs = Vec::with_capacity(3);
    for (k, &size) in sizes.iter().enumerate() {
        let real = b
            .images
            .iter()
            .map(|i| fit_resolution(i, size).map(|t| to_net(&t)))
            .collect::<Result<Vec<_>>>()?;
        let fake = packs.iter().map(|p| g.value(p[k].image).clone()).collect();
        discs.push((model.discriminators.stage(k)?.clone(), real, fake));
    }
    let d_rep = discriminator_step(model, adam_d, &discs, &sentences, cm, cx, cfg.weights.lambda3)?;

    let mut adversarial = Vec::with_capacity(3);
    for (k, (d, _, _)) in discs.iter().enumerate() {
        let imgs: Vec<Var> = packs.iter().map(|p| p[k].image).collect();
        let sents: Vec<Var> = conds.iter().map(|c| c.text.sentence).collect();
        adversarial.push(d.batch_logits(&mut g, &model.store, &imgs, &sents)?);
    }
    let finals: Vec<Var> = packs.iter().map(|p| p[2].image).collect();
    let (damsm, corre, rec, reg) = auxiliary_terms(model, &mut g, &finals, &conds, true)?;
    let terms = GeneratorTerms {
        adversarial,
        damsm: Some(damsm),
        corre: Some(corre),
        rec,
        reg: Some(reg),
    };
    let (loss, g_rep) = generator_loss(&mut g, &terms, &cfg.weights)?;
    g.backward(loss)?;
    let grads = checked_grads(&g, &model.store, &[GEN])?;
    adam_g.step(&mut model.store, &grads)?;
    apply_buffers(&mut model.store, &mut g)?;
    Ok((g_rep.total, d_rep.total))
}

fn dcm_step(model: &mut Model, b: &Batch, cfg: &TrainConfig, adam_g: &mut Adam, adam_d: &mut Adam) -> Result<(f32, f32)> {
    let mut eval = Graph::new();
    let eval_conds = model.condition(&mut eval, &b.images, &b.tokens)?;
    let h_last: Option<Vec<Tensor>> = if model.ablation.has_main() {
        let packs = model.main_forward(&mut eval, &eval_conds, &b.zs)?;
        Some(packs.iter().map(|p| eval.value(p[2].h_fused).clone()).collect())
    } else {
        None
    };
    let mut g = Graph::with_trainable(&[DCM]);
    let conds: Vec<Conditioning> = eval_conds.iter().map(|c| c.detach_into(&eval, &mut g)).collect();
    let hv: Option<Vec<Var>> = h_last.map(|hs| hs.into_iter().map(|h| g.constant(h)).collect());
    let packs = model.dcm_forward(&mut g, &conds, hv.as_deref())?;
    let sentences: Vec<Tensor> = conds.iter().map(|c| g.value(c.text.sentence).clone()).collect();
    let (cm, cx) = corre_constants(model, &g, &conds, &b.mismatched)?;
    let d = model.discriminators.for_dcm()?.clone();
    let real: Vec<Tensor> = b.images.iter().map(to_net).collect();
    let fake: Vec<Tensor> = packs.iter().map(|p| g.value(p.image).clone()).collect();
    let d_rep = discriminator_step(model, adam_d, &[(d.clone(), real, fake)], &sentences, cm, cx, cfg.weights.lambda3)?;

    let imgs: Vec<Var> = packs.iter().map(|p| p.image).collect();
    let sents: Vec<Var> = conds.iter().map(|c| c.text.sentence).collect();
    let adv: StageLogits = d.batch_logits(&mut g, &model.store, &imgs, &sents)?;
    let (damsm, corre, _, reg) = auxiliary_terms(model, &mut g, &imgs, &conds, false)?;
    let terms = GeneratorTerms {
        adversarial: vec![adv],
        damsm: Some(damsm),
        corre: Some(corre),
        rec: None,
        reg: Some(reg),
    };
    let (loss, g_rep) = generator_loss(&mut g, &terms, &cfg.weights)?;
    g.backward(loss)?;
    let grads = checked_grads(&g, &model.store, &[DCM])?;
    adam_g.step(&mut model.store, &grads)?;
    apply_buffers(&mut model.store, &mut g)?;
    Ok((g_rep.total, d_rep.total))
}

/// Generator objective of the correction network on a fixed batch, without
/// updating anything. Used to follow its trajectory.
pub fn dcm_generator_loss(
    model: &Model,
    grammar: &Grammar,
    samples: &[CaptionedSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..samples.len()).collect();
    let b = make_batch(model, grammar, samples, &idx, &mut rng)?;
    let mut g = Graph::new();
    let conds = model.condition(&mut g, &b.images, &b.tokens)?;
    let h: Option<Vec<Var>> = if model.ablation.has_main() {
        let packs = model.main_forward(&mut g, &conds, &b.zs)?;
        Some(packs.iter().map(|p| p[2].h_fused).collect())
    } else {
        None
    };
    let packs = model.dcm_forward(&mut g, &conds, h.as_deref())?;
    let d = model.discriminators.for_dcm()?;
    let imgs: Vec<Var> = packs.iter().map(|p| p.image).collect();
    let sents: Vec<Var> = conds.iter().map(|c| c.text.sentence).collect();
    let adv = d.batch_logits(&mut g, &model.store, &imgs, &sents)?;
    let (damsm, corre, _, reg) = auxiliary_terms(model, &mut g, &imgs, &conds, false)?;
    let terms = GeneratorTerms {
        adversarial: vec![adv],
        damsm: Some(damsm),
        corre: Some(corre),
        rec: None,
        reg: Some(reg),
    };
    Ok(generator_loss(&mut g, &terms, &cfg.weights)?.1.total)
}
