use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn ln_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

#[test]
fn l_reg_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let a = g.constant(img.clone());
    let b = g.constant(img);
    let v = l_reg(&mut g, a, b).unwrap();
    assert_eq!(g.value(v).item(), 1.0);

    let black = g.constant(Tensor::zeros(&[3, 4, 4]));
    let white = g.constant(Tensor::full(&[3, 4, 4], 1.0));
    let v = l_reg(&mut g, black, white).unwrap();
    assert_eq!(g.value(v).item(), 0.0);

    let quarter = g.constant(Tensor::full(&[3, 4, 4], 0.25));
    let v = l_reg(&mut g, quarter, black).unwrap();
    assert_eq!(g.value(v).item(), 0.75);

    let odd = g.constant(Tensor::zeros(&[3, 4, 2]));
    assert!(l_reg(&mut g, odd, black).is_err());
}

#[test]
fn l_reg_is_linear_in_mean_difference() {
    let mut g = Graph::new();
    let base = g.constant(Tensor::full(&[3, 2, 2], 0.5));
    for d in [0.0f32, 0.1, 0.2, 0.4] {
        let other = g.constant(Tensor::full(&[3, 2, 2], 0.5 + d));
        let v = l_reg(&mut g, other, base).unwrap();
        assert!((g.value(v).item() - (1.0 - d)).abs() < 1e-6);
    }
}

fn damsm_value(images: &[Tensor], texts: &[Tensor], gamma: f32) -> f64 {
    let mut g = Graph::new();
    let iv: Vec<Var> = images.iter().map(|t| g.constant(t.clone())).collect();
    let tv: Vec<Var> = texts.iter().map(|t| g.constant(t.clone())).collect();
    let l = damsm_loss(&mut g, &iv, &tv, gamma).unwrap();
    scalar(&g, l)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Direct enumeration of both softmax directions.
fn damsm_oracle(images: &[Tensor], texts: &[Tensor], gamma: f64) -> f64 {
    let b = images.len();
    let s: Vec<Vec<f64>> = (0..b)
        .map(|i| (0..b).map(|j| gamma * cosine(images[i].data(), texts[j].data())).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..b {
        let z: f64 = (0..b).map(|j| s[i][j].exp()).sum();
        total -= (s[i][i].exp() / z).ln();
        let z: f64 = (0..b).map(|j| s[j][i].exp()).sum();
        total -= (s[i][i].exp() / z).ln();
    }
    total / b as f64
}

#[test]
fn damsm_uniform_and_separated() {
    let v = Tensor::new(&[3], vec![0.3, -0.2, 0.9]).unwrap();
    let l = damsm_value(&[v.clone(), v.clone()], &[v.clone(), v], 10.0);
    assert!((l - 2.0 * 2f64.ln()).abs() < 1e-6);

    let e = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
    let ne = Tensor::new(&[2], vec![-1.0, 0.0]).unwrap();
    let l = damsm_value(&[e.clone(), ne.clone()], &[e, ne], 10.0);
    assert!(l < 1e-6, "{l}");
}

#[test]
fn damsm_matches_enumeration_oracle() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let im: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[5], 1.0, &mut rng)).collect();
        let tx: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[5], 1.0, &mut rng)).collect();
        let got = damsm_value(&im, &tx, 10.0);
        let want = damsm_oracle(&im, &tx, 10.0);
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn damsm_chance_level_on_random_features() {
    // random unit directions give cosines near zero, hence ~2 ln B
    let b = 8;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let im: Vec<Tensor> = (0..b).map(|_| Tensor::randn(&[256], 1.0, &mut rng)).collect();
        let tx: Vec<Tensor> = (0..b).map(|_| Tensor::randn(&[256], 1.0, &mut rng)).collect();
        let l = damsm_value(&im, &tx, 10.0);
        let chance = 2.0 * (b as f64).ln();
        worst = worst.max((l - chance).abs() / chance);
    }
    assert!(worst < 0.2, "{worst}");
}

#[test]
fn damsm_rejects_singleton_batch() {
    let mut g = Graph::new();
    let v = g.constant(Tensor::full(&[3], 1.0));
    assert!(matches!(damsm_loss(&mut g, &[v], &[v], 10.0), Err(Error::Config(_))));
}

fn corre_value(regions: &Tensor, words: &Tensor) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(regions.clone());
    let w = g.constant(words.clone());
    let c = corre_core(&mut g, r, w).unwrap();
    scalar(&g, c)
}

fn corre_oracle(regions: &Tensor, words: &Tensor) -> f64 {
    let (n, d) = (regions.shape()[0], regions.shape()[1]);
    let l = words.shape()[0];
    let rr = |i: usize| &regions.data()[i * d..(i + 1) * d];
    let mut total = 0.0;
    for j in 0..l {
        let w = &words.data()[j * d..(j + 1) * d];
        let s: Vec<f64> = (0..n)
            .map(|i| rr(i).iter().zip(w).map(|(a, b)| *a as f64 * *b as f64).sum())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
        let pooled: Vec<f32> = (0..d)
            .map(|k| (0..n).map(|i| (s[i] - m).exp() / z * rr(i)[k] as f64).sum::<f64>() as f32)
            .collect();
        total += cosine(&pooled, w);
    }
    total / l as f64
}

#[test]
fn corre_identical_and_orthogonal() {
    let r = Tensor::from_fn(&[4, 3], |i| [1.0, 2.0, 0.0][i % 3]);
    let same = Tensor::new(&[1, 3], vec![1.0, 2.0, 0.0]).unwrap();
    assert!((corre_value(&r, &same) - 1.0).abs() < 1e-6);
    let ortho = Tensor::new(&[1, 3], vec![0.0, 0.0, 1.5]).unwrap();
    assert!(corre_value(&r, &ortho).abs() < 1e-6);
}

#[test]
fn corre_matches_oracle() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let got = corre_value(&r, &w);
        assert!((got - corre_oracle(&r, &w)).abs() < 1e-5);
        assert!((-1.0..=1.0).contains(&got));
    }
}

#[test]
fn rec_loss_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
    let fa = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
    let fb = Tensor::randn(&[2, 2, 2], 1.0, &mut rng);
    let mut g = Graph::new();
    let (av, bv, fav, fbv) = (
        g.constant(a.clone()),
        g.constant(b.clone()),
        g.constant(fa.clone()),
        g.constant(fb.clone()),
    );
    let same = rec_loss(&mut g, av, av, fav, fav).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let ab = rec_loss(&mut g, av, bv, fav, fbv).unwrap();
    let ba = rec_loss(&mut g, bv, av, fbv, fav).unwrap();
    assert_eq!(g.value(ab).item(), g.value(ba).item());
    let pix: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.numel() as f64;
    let feat: f64 = fa.data().iter().zip(fb.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / fa.numel() as f64;
    assert!((scalar(&g, ab) - (pix + 0.1 * feat)).abs() < 1e-5);
    let small = g.constant(Tensor::zeros(&[3, 2, 2]));
    assert!(rec_loss(&mut g, av, small, fav, fbv).is_err());
}

fn logits(g: &mut Graph, u: &[f32], c: &[f32]) -> StageLogits {
    StageLogits {
        uncond: g.constant(Tensor::new(&[u.len()], u.to_vec()).unwrap()),
        cond: g.constant(Tensor::new(&[c.len()], c.to_vec()).unwrap()),
    }
}

#[test]
fn generator_adversarial_at_half_is_ln2() {
    let mut g = Graph::new();
    let l = logits(&mut g, &[0.0, 0.0], &[0.0, 0.0]);
    let l2 = logits(&mut g, &[0.0], &[0.0]);
    let terms = GeneratorTerms {
        adversarial: vec![l, l2],
        ..Default::default()
    };
    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
    };
    let (total, report) = generator_loss(&mut g, &terms, &zero).unwrap();
    assert!((report.get("adv0").unwrap() as f64 - 2f64.ln()).abs() < 1e-6);
    assert!((scalar(&g, total) - 2.0 * 2f64.ln()).abs() < 1e-6);
    assert!(matches!(
        generator_loss(&mut g, &GeneratorTerms::default(), &zero),
        Err(Error::Config(_))
    ));
}

fn full_terms(g: &mut Graph) -> GeneratorTerms {
    let l = logits(g, &[0.3, -1.2], &[2.0, 0.1]);
    GeneratorTerms {
        adversarial: vec![l],
        damsm: Some(g.constant(Tensor::scalar(1.7))),
        corre: Some(g.constant(Tensor::scalar(0.2))),
        rec: Some(g.constant(Tensor::scalar(0.4))),
        reg: Some(g.constant(Tensor::scalar(0.9))),
    }
}

#[test]
fn generator_loss_composes_and_is_linear_in_weights() {
    let mut g = Graph::new();
    let t = full_terms(&mut g);
    let w = LossWeights {
        lambda1: 1.5,
        lambda2: 0.5,
        lambda3: 2.0,
        lambda4: 0.25,
    };
    let (total, _) = generator_loss(&mut g, &t, &w).unwrap();
    let adv = 0.5 * (ln_softplus(-0.3) + ln_softplus(1.2)) / 2.0 + 0.5 * (ln_softplus(-2.0) + ln_softplus(-0.1)) / 2.0;
    let want = adv + 0.5 * 1.7 + 2.0 * (1.0 - 0.2) + 0.25 * 0.4 + 1.5 * 0.9;
    assert!((scalar(&g, total) - want).abs() < 1e-5);

    let w2 = LossWeights {
        lambda1: 3.0,
        ..w
    };
    let (total2, _) = generator_loss(&mut g, &t, &w2).unwrap();
    assert!((scalar(&g, total2) - scalar(&g, total) - 1.5 * 0.9).abs() < 1e-5);

    let no_rec = GeneratorTerms { rec: None, ..t.clone() };
    let (t3, report) = generator_loss(&mut g, &no_rec, &w).unwrap();
    assert!(report.get("rec").is_none());
    assert!((scalar(&g, total) - scalar(&g, t3) - 0.25 * 0.4).abs() < 1e-5);
}

#[test]
fn identity_output_costs_more_than_an_edit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let orig = Tensor::uniform(&[3, 4, 4], 0.35, 0.65, &mut rng);
    let edited = orig.map(|v| v + 0.3);
    let w = LossWeights::default();
    let mut totals = Vec::new();
    for candidate in [&orig, &edited] {
        let mut g = Graph::new();
        let o = g.constant(orig.clone());
        let c = g.constant(candidate.clone());
        let reg = l_reg(&mut g, c, o).unwrap();
        let l = logits(&mut g, &[0.5], &[0.5]);
        let t = GeneratorTerms {
            adversarial: vec![l],
            reg: Some(reg),
            ..Default::default()
        };
        let total = generator_loss(&mut g, &t, &w).unwrap().0;
        totals.push(scalar(&g, total));
    }
    assert!(totals[0] > totals[1]);
    assert!((totals[0] - totals[1] - 0.3).abs() < 1e-5);
}

#[test]
fn nan_term_is_named() {
    let mut g = Graph::new();
    let mut t = full_terms(&mut g);
    t.corre = Some(g.constant(Tensor::scalar(f32::NAN)));
    let err = generator_loss(&mut g, &t, &LossWeights::default()).unwrap_err().to_string();
    assert!(err.contains("corre"), "{err}");
}

#[test]
fn discriminator_loss_cases() {
    let mut g = Graph::new();
    let real = logits(&mut g, &[0.0, 0.0], &[0.0, 0.0]);
    let fake = logits(&mut g, &[0.0, 0.0], &[0.0, 0.0]);
    let zero = g.constant(Tensor::scalar(0.0));
    let (l, _) = discriminator_loss(&mut g, real, fake, zero, zero, 0.0).unwrap();
    assert!((scalar(&g, l) - 2.0 * 2f64.ln()).abs() < 1e-6);

    let real = logits(&mut g, &[40.0], &[40.0]);
    let fake = logits(&mut g, &[-40.0], &[-40.0]);
    let (l, _) = discriminator_loss(&mut g, real, fake, zero, zero, 0.0).unwrap();
    assert!(scalar(&g, l) < 1e-6);

    let real = logits(&mut g, &[0.7, -0.4], &[1.1, 0.2]);
    let fake = logits(&mut g, &[-0.3, 0.9], &[0.5, -2.0]);
    let cm = g.constant(Tensor::scalar(0.6));
    let cx = g.constant(Tensor::scalar(0.1));
    let (l, _) = discriminator_loss(&mut g, real, fake, cm, cx, 2.0).unwrap();
    let want = 0.5 * ((ln_softplus(-0.7) + ln_softplus(0.4)) / 2.0 + (ln_softplus(-0.3) + ln_softplus(0.9)) / 2.0)
        + 0.5 * ((ln_softplus(-1.1) + ln_softplus(-0.2)) / 2.0 + (ln_softplus(0.5) + ln_softplus(-2.0)) / 2.0)
        + 2.0 * ((1.0 - 0.6) + 0.1);
    assert!((scalar(&g, l) - want).abs() < 1e-5);

    let odd = logits(&mut g, &[0.0], &[0.0]);
    assert!(discriminator_loss(&mut g, real, odd, cm, cx, 1.0).is_err());
}

#[test]
fn losses_pass_grad_check() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let a = Tensor::uniform(&[2, 3, 3], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 3, 3], 0.0, 1.0, &mut rng);
        let fb = Tensor::randn(&[2, 3, 3], 1.0, &mut rng);
        let vecs = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let texts: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4], 1.0, &mut rng)).collect();
        let regions = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let words = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let lg = Tensor::randn(&[4], 1.5, &mut rng);
        let bb = b.clone();
        let checks = [
            grad_check(
                |g, x| {
                    let o = g.constant(bb.clone());
                    l_reg(g, x, o)
                },
                &a,
                1e-3,
            ),
            grad_check(
                |g, x| {
                    let o = g.constant(bb.clone());
                    let f = g.constant(fb.clone());
                    rec_loss(g, x, o, x, f)
                },
                &a,
                1e-3,
            ),
            grad_check(
                |g, x| {
                    let rows: Vec<Var> = (0..3)
                        .map(|i| {
                            let r = g.narrow(x, i, 1)?;
                            g.reshape_flat(r)
                        })
                        .collect::<Result<_>>()?;
                    let tv: Vec<Var> = texts.iter().map(|t| g.constant(t.clone())).collect();
                    damsm_loss(g, &rows, &tv, 10.0)
                },
                &vecs,
                1e-3,
            ),
            grad_check(
                |g, x| {
                    let w = g.constant(words.clone());
                    corre_core(g, x, w)
                },
                &regions,
                1e-2,
            ),
            grad_check(
                |g, x| {
                    let r = g.constant(regions.clone());
                    corre_core(g, r, x)
                },
                &words,
                1e-2,
            ),
            grad_check(
                |g, x| {
                    let u = g.narrow(x, 0, 2)?;
                    let c = g.narrow(x, 2, 2)?;
                    Ok(generator_adversarial(g, StageLogits { uncond: u, cond: c }))
                },
                &lg,
                1e-2,
            ),
            grad_check(
                |g, x| {
                    let ru = g.narrow(x, 0, 1)?;
                    let rc = g.narrow(x, 1, 1)?;
                    let fu = g.narrow(x, 2, 1)?;
                    let fc = g.narrow(x, 3, 1)?;
                    let z = g.constant(Tensor::scalar(0.3));
                    let (l, _) = discriminator_loss(
                        g,
                        StageLogits { uncond: ru, cond: rc },
                        StageLogits { uncond: fu, cond: fc },
                        z,
                        z,
                        1.0,
                    )?;
                    Ok(l)
                },
                &lg,
                1e-2,
            ),
        ];
        for (i, c) in checks.into_iter().enumerate() {
            let err = c.unwrap();
            assert!(err < 1e-3, "loss {i} seed {seed}: {err}");
        }
    }
}
