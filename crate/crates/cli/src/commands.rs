use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use textmanip_core::dataset::imageio::{hstack, read_png, upscale, write_png};
use textmanip_core::dataset::{load_manifest, make_dataset, Dataset, Grammar, MismatchKind, Split, MANIFEST_FILE};
use textmanip_core::encoders::fit_resolution;
use textmanip_core::metrics::{evaluate, IdentityModel, Judge, MetricsReport, SeededModel};
use textmanip_core::networks::{Ablation, Model, NoiseVector};
use textmanip_core::trainer::{
    load_model, load_pretrained, mp_log_csv, pretrain, save_model, train_dcm, train_main, validation_pairs, Checkpoint,
    CheckpointMeta, TrainReport,
};
use textmanip_core::Tensor;

use crate::config::RunConfig;
use crate::{Cli, Command, EvalArgs, ManipulateArgs, TrainArgs};

struct Ctx {
    root: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn data_dir(&self) -> PathBuf {
        self.path(&self.cfg.dataset_dir)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let d = self.path(&self.cfg.output_dir);
        std::fs::create_dir_all(&d).with_context(|| format!("cannot create {}", d.display()))?;
        Ok(d)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        Ok(self.out_dir()?.join(name))
    }

    fn dataset(&self) -> Result<Dataset> {
        let m = self.data_dir().join(MANIFEST_FILE);
        load_manifest(&m).with_context(|| "no dataset found; run make-dataset first")
    }

    fn encoders_path(&self) -> Result<PathBuf> {
        self.out_file("encoders.ckpt")
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(&cli.root.join(p))?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    let mut ctx = Ctx { root: cli.root, cfg };
    match cli.command {
        Command::MakeDataset { train, val, test } => {
            if let Some(n) = train {
                ctx.cfg.train_size = n;
            }
            if let Some(n) = val {
                ctx.cfg.val_size = n;
            }
            if let Some(n) = test {
                ctx.cfg.test_size = n;
            }
            ctx.cfg.validate()?;
            make_dataset_cmd(&ctx)
        }
        Command::PretrainEncoders { epochs } => {
            if let Some(e) = epochs {
                ctx.cfg.train.epochs_pretrain = e;
            }
            ctx.cfg.validate()?;
            pretrain_cmd(&ctx)
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                ctx.cfg.train.epochs_main = e;
            }
            ctx.cfg.validate()?;
            train_cmd(&ctx, &a)
        }
        Command::TrainDcm(a) => {
            if let Some(e) = a.epochs {
                ctx.cfg.train.epochs_dcm = e;
            }
            ctx.cfg.validate()?;
            train_dcm_cmd(&ctx, &a)
        }
        Command::Eval(a) => {
            ctx.cfg.validate()?;
            eval_cmd(&ctx, &a)
        }
        Command::Manipulate(a) => {
            ctx.cfg.validate()?;
            manipulate_cmd(&ctx, &a)
        }
    }
}

fn make_dataset_cmd(ctx: &Ctx) -> Result<()> {
    let c = &ctx.cfg;
    let dir = ctx.data_dir();
    let ds = make_dataset(&dir, &Grammar::default(), c.train_size, c.val_size, c.test_size, c.train.seed)?;
    println!("wrote {} samples to {}", ds.len(), dir.display());
    Ok(())
}

fn pretrain_cmd(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let train = ds.load_split(Split::Train)?;
    let mut model = Model::new(ctx.cfg.model.clone(), Ablation::None, ds.vocabulary()?, ctx.cfg.train.seed)?;
    let r = pretrain(&mut model, &ds.grammar, &train, &ctx.cfg.train)?;
    let path = ctx.encoders_path()?;
    let meta = CheckpointMeta {
        phase: "pretrain".into(),
        epoch: ctx.cfg.train.epochs_pretrain.saturating_sub(1) as u32,
        ..CheckpointMeta::default()
    };
    save_model(&model, meta, &path)?;
    println!(
        "matching loss {:.4}, classifier loss {:.4}",
        r.matching_loss.last().copied().unwrap_or(f32::NAN),
        r.classifier_loss.last().copied().unwrap_or(f32::NAN)
    );
    println!("wrote {}", path.display());
    Ok(())
}

/// Fresh model of `ablation` carrying the pretrained encoders of `path`.
fn model_from_encoders(path: &Path, ablation: Ablation, seed: u64) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("cannot load encoders from {}; run pretrain-encoders first", path.display()))?;
    let (base, _) = load_model(path)?;
    let mut model = Model::new(base.config.clone(), ablation, base.vocab.clone(), seed)?;
    load_pretrained(&mut model, &ck)?;
    Ok(model)
}

fn val_pairs(ctx: &Ctx, ds: &Dataset, split: Split, kind: MismatchKind) -> Result<Vec<textmanip_core::dataset::MismatchedPair>> {
    let samples = ds.load_split(split)?;
    Ok(validation_pairs(&ds.grammar, &samples, kind, ctx.cfg.train.seed)?)
}

fn finish_phase(ctx: &Ctx, model: &Model, phase: &str, report: &TrainReport) -> Result<()> {
    let name = format!("{phase}-{}", model.ablation.name());
    let meta = CheckpointMeta {
        phase: phase.into(),
        epoch: report.selected_epoch() as u32,
        mp_history: report.mp_history(),
        extras: vec![],
    };
    let ck = ctx.out_file(&format!("{name}.ckpt"))?;
    save_model(model, meta, &ck)?;
    let log = ctx.out_file(&format!("{name}.csv"))?;
    std::fs::write(&log, mp_log_csv(&report.log)).with_context(|| format!("cannot write {}", log.display()))?;
    let best = &report.log[report.selected];
    println!("selected epoch {} (mp {:.6})", best.epoch, best.mp);
    println!("wrote {} and {}", ck.display(), log.display());
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let ablation = Ablation::parse(&a.ablation)?;
    if !ablation.has_main() {
        bail!("ablation {} has no main generator; use train-dcm", ablation.name());
    }
    let enc = match &a.checkpoint {
        Some(p) => ctx.path(p),
        None => ctx.encoders_path()?,
    };
    let mut model = model_from_encoders(&enc, ablation, ctx.cfg.train.seed)?;
    let ds = ctx.dataset()?;
    let train = ds.load_split(Split::Train)?;
    let val = val_pairs(ctx, &ds, Split::Val, MismatchKind::Any)?;
    let report = train_main(&mut model, &ds.grammar, &train, &val, &ctx.cfg.train)?;
    finish_phase(ctx, &model, "main", &report)
}

fn train_dcm_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let ablation = Ablation::parse(&a.ablation)?;
    if !ablation.has_dcm() {
        bail!("ablation {} has no correction network", ablation.name());
    }
    let mut model = match (&a.checkpoint, ablation.has_main()) {
        (Some(p), _) => load_model(&ctx.path(p))?.0,
        (None, true) => {
            let p = ctx.out_file(&format!("main-{}.ckpt", ablation.name()))?;
            load_model(&p).with_context(|| format!("cannot load {}; run train first", p.display()))?.0
        }
        (None, false) => model_from_encoders(&ctx.encoders_path()?, ablation, ctx.cfg.train.seed)?,
    };
    let ds = ctx.dataset()?;
    let train = ds.load_split(Split::Train)?;
    let val = val_pairs(ctx, &ds, Split::Val, MismatchKind::Any)?;
    let report = train_dcm(&mut model, &ds.grammar, &train, &val, &ctx.cfg.train)?;
    finish_phase(ctx, &model, "dcm", &report)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        _ => bail!("unknown split {s:?} (expected train, val or test)"),
    })
}

fn parse_kind(s: &str) -> Result<MismatchKind> {
    Ok(match s {
        "any" => MismatchKind::Any,
        "color" => MismatchKind::ObjectColor,
        _ => bail!("unknown mismatch kind {s:?} (expected any or color)"),
    })
}

fn print_report(r: &MetricsReport) {
    print!("{}", r.to_text());
    if let Some((inside, outside)) = r.region_diffs() {
        println!("diff_object = {inside:.6}");
        println!("diff_background = {outside:.6}");
    }
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let ds = ctx.dataset()?;
    let pairs = val_pairs(ctx, &ds, parse_split(&a.split)?, parse_kind(&a.kind)?)?;
    let (report, name) = match a.model.as_str() {
        "identity" => {
            let judge_model = model_from_encoders(&ctx.encoders_path()?, Ablation::None, 0)?;
            (evaluate(&IdentityModel, &pairs, &Judge::of(&judge_model))?, "identity".to_string())
        }
        "checkpoint" => {
            let path = match &a.checkpoint {
                Some(p) => ctx.path(p),
                None => {
                    let ablation = Ablation::parse(&a.ablation)?;
                    let dcm = ctx.out_file(&format!("dcm-{}.ckpt", ablation.name()))?;
                    if dcm.exists() {
                        dcm
                    } else {
                        ctx.out_file(&format!("main-{}.ckpt", ablation.name()))?
                    }
                }
            };
            let (model, _) = load_model(&path).with_context(|| format!("cannot load {}", path.display()))?;
            let seeded = SeededModel {
                model: &model,
                seed: ctx.cfg.train.seed,
            };
            (evaluate(&seeded, &pairs, &Judge::of(&model))?, model.ablation.name().to_string())
        }
        other => bail!("unknown model {other:?} (expected checkpoint or identity)"),
    };
    print_report(&report);
    let out = match &a.out {
        Some(p) => ctx.path(p),
        None => ctx.out_file(&format!("eval-{name}.jsonl"))?,
    };
    report.write_records(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn to_rgb(t: Tensor) -> Result<Tensor> {
    match t.shape() {
        [3, _, _] => Ok(t),
        [1, h, w] => {
            let (h, w) = (*h, *w);
            Ok(Tensor::from_fn(&[3, h, w], |i| t.data()[i % (h * w)]))
        }
        s => bail!("unsupported image shape {s:?}"),
    }
}

/// Brings `t` up to `size` by an integer nearest-neighbour factor.
fn to_size(t: &Tensor, size: usize) -> Result<Tensor> {
    let h = t.shape()[1];
    if h == size {
        return Ok(t.clone());
    }
    if h > size || !size.is_multiple_of(h) {
        bail!("cannot resize {h}x{h} output to {size}x{size}");
    }
    Ok(upscale(t, size / h))
}

fn manipulate_cmd(ctx: &Ctx, a: &ManipulateArgs) -> Result<()> {
    let (model, _) = load_model(&ctx.path(&a.checkpoint))?;
    let img_path = ctx.path(&a.image);
    let source = to_rgb(read_png(&img_path)?)?;
    let size = source.shape()[1];
    if source.shape()[2] != size {
        bail!("{} is not square", img_path.display());
    }
    let input = fit_resolution(&source, model.config.image_size)?;
    let words: Vec<String> = a.text.to_lowercase().split_whitespace().map(str::to_string).collect();
    if words.is_empty() {
        bail!("empty caption");
    }
    if let Some(w) = words.iter().find(|w| model.vocab.index_of(w) == textmanip_core::text::Vocabulary::UNK) {
        bail!("word {w:?} is not in the vocabulary");
    }
    let tokens = model.vocab.encode(&words);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.train.seed);
    let z = NoiseVector::sample(model.config.d_z, &mut rng);
    let m = model.manipulate(&input, &tokens, &z)?;
    let final_image = to_size(m.final_image(), size)?;
    let out = match &a.out {
        Some(p) => ctx.path(p),
        None => ctx.out_file("manipulated.png")?,
    };
    write_png(&out, &final_image)?;
    let mut tiles = vec![source];
    for s in &m.stages {
        tiles.push(to_size(s, size)?);
    }
    if let Some(d) = &m.dcm {
        tiles.push(to_size(d, size)?);
    }
    let grid = match &a.grid {
        Some(p) => ctx.path(p),
        None => ctx.out_file("manipulated-grid.png")?,
    };
    write_png(&grid, &hstack(&tiles)?)?;
    println!("wrote {} and {}", out.display(), grid.display());
    Ok(())
}
