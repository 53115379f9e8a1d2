use std::path::PathBuf;

use drd_core::adversarial::{
    adversarial_term, alternating_step, discriminator_forward, discriminator_loss, gradient_penalty, Batch,
    CriticSide, Discriminator, DiscriminatorInput, DiscriminatorSpec, StepConfig, StepOutcome, StudentSide,
    GP_WEIGHT,
};
use drd_core::data::{generate_synthetic, images_to_tensor, ShapeFamily, SyntheticSpec};
use drd_core::distill::{LossToggles, LossWeights};
use drd_core::models::{build_model, FeatureProjection, ModelSpec, SegModel};
use drd_core::Error;
use drd_nn::optim::{Adam, AdamConfig, Sgd, SgdConfig};
use drd_nn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: usize = 4;

fn batches(count: usize, size: usize) -> Vec<Batch> {
    let d = generate_synthetic(&SyntheticSpec {
        num_images: count * size,
        size: (32, 32),
        num_classes: CLASSES,
        shape_family: ShapeFamily::Rects,
        seed: 17,
    })
    .unwrap();
    let all: Vec<_> = d.train.samples().iter().chain(d.val.samples()).collect();
    all.chunks(size)
        .take(count)
        .map(|chunk| Batch {
            images: images_to_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap(),
            labels: chunk.iter().map(|s| s.labels.clone()).collect(),
        })
        .collect()
}

fn sgd(store: &ParamStore) -> Sgd {
    Sgd::new(
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        },
        store,
    )
}

struct Rig {
    teacher: SegModel,
    student: SegModel,
    opt: Sgd,
    projection: FeatureProjection,
    proj_opt: Sgd,
    critic: Discriminator,
    adam: Adam,
    rng: ChaCha8Rng,
}

impl Rig {
    fn new(critic_seed: u64) -> Self {
        let mut teacher = build_model(&ModelSpec::from_name("tiny_cnn", CLASSES).unwrap(), 1).unwrap();
        teacher.store_mut().set_frozen(true);
        let student = build_model(&ModelSpec::from_name("tiny_student", CLASSES).unwrap(), 2).unwrap();
        let projection = FeatureProjection::new(student.tap_channels(), teacher.tap_channels(), 3);
        let critic = Discriminator::new(&DiscriminatorSpec::desk(), 3 + CLASSES, critic_seed).unwrap();
        let adam = Adam::new(
            AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            critic.store(),
        );
        Self {
            opt: sgd(student.store()),
            proj_opt: sgd(projection.store()),
            teacher,
            student,
            projection,
            critic,
            adam,
            rng: ChaCha8Rng::seed_from_u64(critic_seed + 100),
        }
    }

    fn step(&mut self, step: usize, batch: &Batch, cfg: &StepConfig, with_critic: bool) -> drd_core::Result<StepOutcome> {
        let critic = with_critic.then(|| CriticSide {
            discriminator: &mut self.critic,
            optimizer: &mut self.adam,
            rng: &mut self.rng,
        });
        alternating_step(
            step,
            batch,
            Some(&mut self.teacher),
            StudentSide {
                model: &mut self.student,
                optimizer: &mut self.opt,
                projection: Some((&mut self.projection, &mut self.proj_opt)),
                lr: 0.01,
            },
            critic,
            cfg,
        )
    }
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden").join(name)
}

/// Compares against a recorded reference, writing it when absent or when
/// `DRD_BLESS` is set.
fn check_golden(name: &str, values: &[f64]) {
    let path = golden_path(name);
    if std::env::var_os("DRD_BLESS").is_some() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(values).unwrap()).unwrap();
        eprintln!("recorded {}", path.display());
        return;
    }
    let expected: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(expected.len(), values.len(), "{name}");
    for (i, (e, v)) in expected.iter().zip(values).enumerate() {
        let tol = 1e-4 * e.abs().max(1e-3);
        assert!((e - v).abs() <= tol, "{name}[{i}]: expected {e}, got {v}");
    }
}

fn random_input(seed: u64, n: usize) -> DiscriminatorInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::from_vec(&[n, 3, 32, 32], (0..n * 3 * 1024).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut p: Vec<f32> = (0..n * CLASSES * 1024).map(|_| rng.gen_range(0.0..1.0)).collect();
    for b in 0..n {
        for px in 0..1024 {
            let idx = |k: usize| b * CLASSES * 1024 + k * 1024 + px;
            let s: f32 = (0..CLASSES).map(|k| p[idx(k)]).sum();
            for k in 0..CLASSES {
                p[idx(k)] /= s;
            }
        }
    }
    DiscriminatorInput::new(&img, &Tensor::from_vec(&[n, CLASSES, 32, 32], p).unwrap()).unwrap()
}

/// The head starts at zero, where the input gradient vanishes; move it off.
fn perturb_head(d: &mut Discriminator, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in d.store_mut().params_mut() {
        if p.name.contains("head") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

#[test]
fn loss_examples() {
    assert_eq!(discriminator_loss(&[0.7], &[0.7]), 0.0);
    assert_eq!(discriminator_loss(&[2.0], &[0.5]), 1.5);
    assert_eq!(discriminator_loss(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert_eq!(adversarial_term(&[0.0]), 0.0);
    assert_eq!(adversarial_term(&[1.0, 3.0]), 2.0);
    assert_eq!(adversarial_term(&[-0.25]), -0.25);
}

#[test]
fn trained_critic_score_matches_golden() {
    let mut d = Discriminator::new(&DiscriminatorSpec::desk(), 3 + CLASSES, 5).unwrap();
    let mut adam = Adam::new(AdamConfig::default(), d.store());
    let (real, fake) = (random_input(1, 2), random_input(2, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    perturb_head(&mut d, 0);
    for _ in 0..3 {
        d.store_mut().zero_grad();
        gradient_penalty(&mut d, &real, &fake, GP_WEIGHT, &mut rng).unwrap();
        adam.step(d.store_mut());
    }
    let x = random_input(3, 2);
    let scores = discriminator_forward(&d, &x).unwrap();
    assert_eq!(scores, discriminator_forward(&d, &x).unwrap());
    assert!(scores.iter().any(|s| *s != 0.0));
    check_golden("critic_scores.json", &scores);
}

#[test]
fn penalty_gradient_matches_finite_differences() {
    let mut d = Discriminator::new(&DiscriminatorSpec::desk(), 3 + CLASSES, 8).unwrap();
    perturb_head(&mut d, 4);
    let (real, fake) = (random_input(5, 2), random_input(6, 2));
    let penalty = |d: &mut Discriminator| {
        gradient_penalty(d, &real, &fake, GP_WEIGHT, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    };
    d.store_mut().zero_grad();
    penalty(&mut d);
    let analytic: Vec<f64> = d.store().params().iter().flat_map(|p| p.grad.data().iter().map(|&v| v as f64)).collect();

    // the penalty jumps where a perturbation flips an activation; only
    // coordinates whose one-sided differences agree are compared
    let mut numeric = Vec::new();
    let mut picked = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let sizes: Vec<usize> = d.store().params().iter().map(|p| p.value.numel()).collect();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &n| { let o = *acc; *acc += n; Some(o) }).collect();
    let centre = penalty(&mut d.clone()).value;
    let mut tried = 0;
    for (pi, &n) in sizes.iter().enumerate() {
        for _ in 0..6 {
            let i = rng.gen_range(0..n);
            let h = 1e-3f32;
            let eval = |delta: f32| {
                let mut probe = d.clone();
                probe.store_mut().params_mut()[pi].value.data_mut()[i] += delta;
                penalty(&mut probe).value
            };
            let (up, down) = (eval(h) - centre, centre - eval(-h));
            tried += 1;
            if (up - down).abs() <= 0.05 * up.abs().max(down.abs()).max(1e-4) {
                numeric.push((up + down) / (2.0 * h as f64));
                picked.push(offsets[pi] + i);
            }
        }
    }
    assert!(2 * picked.len() > tried, "only {} of {tried} coordinates were smooth", picked.len());
    let a: Vec<f64> = picked.iter().map(|&i| analytic[i]).collect();
    let dot: f64 = a.iter().zip(&numeric).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = dot / (na * nn);
    assert!(cosine > 0.99, "cosine similarity {cosine}");
    assert!((na / nn - 1.0).abs() < 0.05, "norm ratio {}", na / nn);
}

#[test]
fn five_step_loss_trace_matches_golden() {
    let batch = &batches(1, 4)[0];
    let mut rig = Rig::new(4);
    let cfg = StepConfig::default();
    let trace: Vec<f64> = (0..5).map(|s| rig.step(s, batch, &cfg, true).unwrap().losses.total).collect();
    assert!(trace.iter().all(|v| v.is_finite()));
    check_golden("loss_trace_5.json", &trace);
}

#[test]
fn teacher_is_never_modified() {
    let bs = batches(3, 2);
    let mut rig = Rig::new(0);
    let before = rig.teacher.store().checksum();
    for (i, b) in bs.iter().enumerate() {
        rig.step(i, b, &StepConfig::default(), true).unwrap();
        assert_eq!(rig.teacher.store().checksum(), before);
    }
}

#[test]
fn zero_adversarial_weight_decouples_the_student() {
    let bs = batches(3, 2);
    let cfg = StepConfig {
        weights: LossWeights::new(10.0, 0.0, 25.0).unwrap(),
        ..StepConfig::default()
    };
    let mut a = Rig::new(1);
    let mut b = Rig::new(2);
    let mut c = Rig::new(3);
    let no_adv = StepConfig {
        toggles: LossToggles {
            use_adv: false,
            ..LossToggles::ALL
        },
        ..cfg
    };
    for (i, batch) in bs.iter().enumerate() {
        a.step(i, batch, &cfg, true).unwrap();
        b.step(i, batch, &cfg, true).unwrap();
        c.step(i, batch, &no_adv, false).unwrap();
    }
    assert_ne!(a.critic.store().checksum(), b.critic.store().checksum());
    assert_eq!(a.student.store().checksum(), b.student.store().checksum());
    assert_eq!(a.student.store().checksum(), c.student.store().checksum());
}

#[test]
fn zero_weighted_terms_match_disabled_terms() {
    let bs = batches(3, 2);
    let zero = StepConfig {
        weights: LossWeights::new(0.0, 0.0, 0.0).unwrap(),
        toggles: LossToggles {
            use_adv: false,
            ..LossToggles::ALL
        },
        ..StepConfig::default()
    };
    let off = StepConfig {
        toggles: LossToggles::NONE,
        ..StepConfig::default()
    };
    let mut a = Rig::new(0);
    let mut b = Rig::new(0);
    for (i, batch) in bs.iter().enumerate() {
        let oa = a.step(i, batch, &zero, false).unwrap();
        let ob = b.step(i, batch, &off, false).unwrap();
        assert!(oa.losses.l_p > 0.0 && oa.losses.l_s > 0.0 && oa.losses.l_c > 0.0);
        assert_eq!((ob.losses.l_p, ob.losses.l_s, ob.losses.l_c, ob.losses.l_adv), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(oa.losses.total, ob.losses.total);
    }
    assert_eq!(a.student.store().checksum(), b.student.store().checksum());
}

#[test]
fn missing_networks_and_non_finite_inputs_are_rejected() {
    let batch = &batches(1, 2)[0];
    let mut rig = Rig::new(0);
    let err = rig.step(0, batch, &StepConfig::default(), false).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");

    let mut poisoned = Batch {
        images: batch.images.clone(),
        labels: batch.labels.clone(),
    };
    poisoned.images.data_mut()[0] = f32::NAN;
    let err = rig.step(0, &poisoned, &StepConfig::default(), true).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
}

#[test]
fn critic_input_gradient_stays_bounded() {
    let bs = batches(8, 2);
    let mut rig = Rig::new(6);
    rig.adam = Adam::new(AdamConfig::default(), rig.critic.store());
    let norms: Vec<f64> = (0..200)
        .map(|step| {
            rig.step(step, &bs[step % bs.len()], &StepConfig::default(), true)
                .unwrap()
                .critic_grad_norm
        })
        .collect();
    let tail = norms[190..].iter().sum::<f64>() / 10.0;
    assert!((0.1..=10.0).contains(&tail), "mean input-gradient norm {tail}");
}
