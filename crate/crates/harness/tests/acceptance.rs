//! Acceptance suite. Each criterion prints one PASS or FAIL line; the test
//! fails if any criterion does.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use drd_core::data::{stitch_predictions, tile_raster, LabelMask, PadMode, TileSpec};
use drd_core::distill::{pixel_kl_loss, pixel_kl_loss_and_grad, softmax_scores, LossToggles, ScoreKind, ScoreMap};
use drd_core::metrics::{f1_scores, mean_iou, overall_accuracy, ConfusionMatrix};
use drd_core::models::{build_model, count_flops, count_params, FlopConvention, ModelSpec};
use drd_core::relation::{
    channel_relation, relation_loss_and_grad, row_sums, spatial_relation, FeatureMap, RelationKind, Source,
};
use drd_harness::artifacts::write_loss_csv;
use drd_harness::config::ExperimentConfig;
use drd_harness::train::{distill, load_data, train_student_baseline, train_teacher, RunRecord};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Suite {
    failed: Vec<&'static str>,
}

impl Suite {
    fn criterion(&mut self, name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {:.1} s, limit {} s", took.as_secs_f64(), l.as_secs())),
            (r, _) => r,
        };
        let line = match &result {
            Ok(detail) => format!("PASS  {name}: {detail} [{:.1} s]\n", took.as_secs_f64()),
            Err(why) => format!("FAIL  {name}: {why} [{:.1} s]\n", took.as_secs_f64()),
        };
        // straight to the terminal, past the test harness's output capture
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if result.is_err() {
            self.failed.push(name);
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn feature(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0)), Source::Student).unwrap()
}

/// Row-softmax of the `n x n` score table, by explicit loops.
fn softmax_rows(n: usize, score: impl Fn(usize, usize) -> f64) -> Array2<f64> {
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += score(i, j).exp();
        }
        for j in 0..n {
            m[[i, j]] = score(i, j).exp() / denom;
        }
    }
    m
}

fn oracle_spatial(f: &FeatureMap) -> Array2<f64> {
    let (c, _, w) = f.data().dim();
    let d = f.data();
    softmax_rows(f.positions(), |i, j| {
        let mut s = 0.0;
        for k in 0..c {
            s += d[[k, j / w, j % w]] * d[[k, i / w, i % w]];
        }
        s
    })
}

fn oracle_channel(f: &FeatureMap) -> Array2<f64> {
    let (c, h, w) = f.data().dim();
    let d = f.data();
    softmax_rows(c, |i, j| {
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += d[[j, y, x]] * d[[i, y, x]];
            }
        }
        s
    })
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn relation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=8);
        let w = rng.gen_range(1..=64 / h);
        let f = feature(&mut rng, c, h, w);
        worst = worst.max(max_abs(spatial_relation(&f).unwrap().matrix(), &oracle_spatial(&f)));
        worst = worst.max(max_abs(channel_relation(&f).unwrap().matrix(), &oracle_channel(&f)));
    }
    ensure(worst < 1e-6, format!("max abs error {worst:e}"))?;
    Ok(format!("50 maps, max abs error {worst:.1e}"))
}

fn feature_strategy() -> impl Strategy<Value = FeatureMap> {
    (1usize..=8, 1usize..=8, 1usize..=8, any::<u64>())
        .prop_map(|(c, h, w, seed)| feature(&mut ChaCha8Rng::seed_from_u64(seed), c, h, w))
}

fn permuted(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

fn relation_properties() -> Outcome {
    let mut runner = TestRunner::new(Config::with_cases(200));
    runner
        .run(&feature_strategy(), |f| {
            let s = spatial_relation(&f).unwrap();
            let c = channel_relation(&f).unwrap();
            for r in row_sums(s.matrix()).into_iter().chain(row_sums(c.matrix())) {
                prop_assert!((r - 1.0).abs() < 1e-6, "row sum {}", r);
            }
            Ok(())
        })
        .map_err(|e| format!("row-stochasticity: {e}"))?;

    let mut runner = TestRunner::new(Config::with_cases(200));
    runner
        .run(&(feature_strategy(), any::<u64>()), |(f, seed)| {
            let (c, h, w) = f.data().dim();
            let p = permuted(h * w, seed);
            let moved = Array3::from_shape_fn((c, h, w), |(k, y, x)| {
                let src = p[y * w + x];
                f.data()[[k, src / w, src % w]]
            });
            let (a, b) = (
                spatial_relation(&f).unwrap(),
                spatial_relation(&FeatureMap::new(moved, Source::Student).unwrap()).unwrap(),
            );
            for i in 0..h * w {
                for j in 0..h * w {
                    prop_assert!((b.matrix()[[i, j]] - a.matrix()[[p[i], p[j]]]).abs() < 1e-12);
                }
            }
            let q = permuted(c, seed ^ 7);
            let moved = Array3::from_shape_fn((c, h, w), |(k, y, x)| f.data()[[q[k], y, x]]);
            let (a, b) = (
                channel_relation(&f).unwrap(),
                channel_relation(&FeatureMap::new(moved, Source::Student).unwrap()).unwrap(),
            );
            for i in 0..c {
                for j in 0..c {
                    prop_assert!((b.matrix()[[i, j]] - a.matrix()[[q[i], q[j]]]).abs() < 1e-12);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("permutation equivariance: {e}"))?;
    Ok("200 cases each".into())
}

fn max_rel(analytic: &Array3<f64>, numeric: &Array3<f64>) -> f64 {
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    analytic.iter().zip(numeric.iter()).map(|(a, n)| (a - n).abs() / scale).fold(0.0, f64::max)
}

fn central(x: &Array3<f64>, f: impl Fn(&Array3<f64>) -> f64) -> Array3<f64> {
    let h = 1e-4;
    let mut g = Array3::zeros(x.dim());
    for (idx, _) in x.indexed_iter() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p[idx] += h;
        m[idx] -= h;
        g[idx] = (f(&p) - f(&m)) / (2.0 * h);
    }
    g
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut report = Vec::new();
    for kind in [RelationKind::Spatial, RelationKind::Channel] {
        let t = feature(&mut rng, 4, 3, 3);
        let s = feature(&mut rng, 4, 3, 3);
        let (_, analytic) = relation_loss_and_grad(kind, &t, &s).unwrap();
        let numeric = central(s.data(), |x| {
            relation_loss_and_grad(kind, &t, &FeatureMap::new(x.clone(), Source::Student).unwrap()).unwrap().0
        });
        let e = max_rel(&analytic, &numeric);
        ensure(e < 1e-3, format!("{kind:?} relative error {e:e}"))?;
        report.push(format!("{kind:?} {e:.1e}"));
    }
    let logits = |rng: &mut ChaCha8Rng| Array3::from_shape_fn((5, 3, 4), |_| rng.gen_range(-3.0..3.0));
    let teacher = softmax_scores(&ScoreMap::new(logits(&mut rng), ScoreKind::Logits).unwrap()).unwrap();
    let student = logits(&mut rng);
    let (_, analytic) =
        pixel_kl_loss_and_grad(&teacher, &ScoreMap::new(student.clone(), ScoreKind::Logits).unwrap()).unwrap();
    let numeric = central(&student, |x| {
        let q = softmax_scores(&ScoreMap::new(x.clone(), ScoreKind::Logits).unwrap()).unwrap();
        pixel_kl_loss(&teacher, &q).unwrap()
    });
    let e = max_rel(&analytic, &numeric);
    ensure(e < 1e-3, format!("pixel KL relative error {e:e}"))?;
    report.push(format!("PixelKl {e:.1e}"));
    Ok(format!("max relative error {}", report.join(", ")))
}

/// Short teacher run on the desk profile, for criteria that only need a
/// working teacher.
fn quick_setup(seed: u64) -> (ExperimentConfig, drd_harness::train::Data, drd_core::models::SegModel) {
    let mut cfg = ExperimentConfig::desk(seed);
    cfg.schedule.teacher_iters = 50;
    let data = load_data(&cfg).unwrap();
    let teacher = train_teacher(&cfg, &data).unwrap().model;
    (cfg, data, teacher)
}

fn recombination_holds(r: &RunRecord) -> Result<(), String> {
    let w = r.config.weights;
    for row in &r.losses {
        let l = &row.losses;
        let expected = l.l_ce + w.lambda1 * l.l_p - w.lambda2 * l.l_adv + w.lambda3 * (l.l_s + l.l_c);
        ensure(
            (expected - l.total).abs() <= 1e-6,
            format!("step {}: total {} vs recombined {expected}", row.step, l.total),
        )?;
    }
    Ok(())
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let f = feature(&mut rng, 6, 4, 5);
    for kind in [RelationKind::Spatial, RelationKind::Channel] {
        let l = relation_loss_and_grad(kind, &f, &f).unwrap().0;
        ensure(l.abs() <= 1e-7, format!("{kind:?} loss {l:e} on identical features"))?;
    }
    let q = softmax_scores(&ScoreMap::new(Array3::from_shape_fn((6, 4, 5), |_| rng.gen_range(-3.0..3.0)), ScoreKind::Logits).unwrap()).unwrap();
    let l = pixel_kl_loss(&q, &q).unwrap();
    ensure(l.abs() <= 1e-7, format!("pixel KL {l:e} on identical maps"))?;

    let (mut cfg, data, mut teacher) = quick_setup(1);
    cfg.schedule.iters = 200;
    cfg.schedule.eval_every = 0;
    let run = distill(&cfg, &data, &mut teacher).map_err(|e| e.to_string())?;
    ensure(run.record.losses.len() == 200, "smoke run did not log 200 steps")?;
    recombination_holds(&run.record)?;
    Ok("zero on identical inputs; recombination exact on 200 logged steps".into())
}

fn metric_oracles() -> Outcome {
    let cm = |rows: [[u64; 2]; 2]| ConfusionMatrix::from_counts(ndarray::arr2(&rows)).unwrap();
    let f1 = f1_scores(&cm([[1, 1], [0, 2]])).per_class[0];
    ensure((f1 - 2.0 / 3.0).abs() < 1e-12, format!("precision 1, recall 0.5 gave F1 {f1}"))?;
    let iou = mean_iou(&cm([[5, 5], [5, 85]])).per_class[0];
    ensure((iou - 1.0 / 3.0).abs() < 1e-12, format!("half overlap gave IoU {iou}"))?;
    let oa = overall_accuracy(&cm([[3, 2], [2, 1]])).unwrap();
    ensure(oa == 0.5, format!("accuracy {oa}"))?;
    let mut before = cm([[3, 1], [2, 4]]);
    let snapshot = before.clone();
    before
        .accumulate(
            &LabelMask::new(Array2::zeros((2, 2)), 2, 255).unwrap(),
            &LabelMask::new(Array2::from_elem((2, 2), 255), 2, 255).unwrap(),
        )
        .unwrap();
    ensure(before == snapshot, "all-ignored truth changed the matrix")?;

    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.gen_range(2..=8);
        let m = ConfusionMatrix::from_counts(Array2::from_shape_fn((k, k), |_| rng.gen_range(0..100u64))).unwrap();
        let (f, j) = (f1_scores(&m), mean_iou(&m));
        for c in 0..k {
            let jc = j.per_class[c];
            worst = worst.max((f.per_class[c] - 2.0 * jc / (1.0 + jc)).abs());
        }
    }
    ensure(worst < 1e-9, format!("F1/IoU identity off by {worst:e}"))?;
    Ok(format!("hand cases exact; F1 = 2J/(1+J) on 100 matrices, max error {worst:.1e}"))
}

fn accounting() -> Outcome {
    let mut lines = Vec::new();
    for (name, params, flops) in [("resnet101", 70.43, 574.9), ("resnet18", 13.07, 125.8), ("resnet18_half", 3.27, 31.53)] {
        let mut m = build_model(&ModelSpec::from_name(name, 6).unwrap(), 0).unwrap();
        let p = count_params(&m);
        let g = count_flops(&mut m, 512, 1024, FlopConvention::Macs).unwrap();
        let (dp, dg) = ((p / params - 1.0).abs(), (g / flops - 1.0).abs());
        ensure(dp <= 0.05, format!("{name}: {p:.2} M params vs {params} (off {:.1}%)", 100.0 * dp))?;
        ensure(dg <= 0.10, format!("{name}: {g:.1} G vs {flops} (off {:.1}%)", 100.0 * dg))?;
        lines.push(format!("{name} {p:.2} M / {g:.1} G"));
    }
    Ok(lines.join(", "))
}

struct Directional {
    teacher_miou: f64,
}

fn directional(teacher_floor: &mut Option<Directional>) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    let mut seed0 = None;
    for seed in 0..5u64 {
        let cfg = ExperimentConfig::desk(seed);
        let data = load_data(&cfg).unwrap();
        let mut teacher = train_teacher(&cfg, &data).map_err(|e| e.to_string())?;
        let ce = train_student_baseline(&cfg, &data).map_err(|e| e.to_string())?;
        let drd = distill(&cfg, &data, &mut teacher.model).map_err(|e| e.to_string())?;
        recombination_holds(&drd.record)?;
        let (c, d) = (ce.record.final_metrics.miou, drd.record.final_metrics.miou);
        if d > c {
            wins += 1;
        }
        let t = teacher.record.final_metrics.miou;
        detail.push(format!("seed {seed}: teacher {t:.3} ce {c:.3} drd {d:.3}"));
        if seed == 0 {
            *teacher_floor = Some(Directional { teacher_miou: t });
            seed0 = Some((cfg, data, teacher.model));
        }
    }
    let summary = detail.join("; ");
    ensure(wins >= 4, format!("DRD beat CE on {wins} of 5 seeds ({summary})"))?;

    let (base, data, mut teacher) = seed0.expect("seed 0 ran");
    let single = [
        ("l_p", LossToggles { use_lp: true, ..LossToggles::NONE }),
        ("l_adv", LossToggles { use_adv: true, ..LossToggles::NONE }),
        ("l_s", LossToggles { use_ls: true, ..LossToggles::NONE }),
        ("l_c", LossToggles { use_lc: true, ..LossToggles::NONE }),
    ];
    for (term, toggles) in single {
        let mut cfg = base.clone();
        cfg.toggles = toggles;
        cfg.schedule.iters = 100;
        cfg.schedule.eval_every = 0;
        let run = distill(&cfg, &data, &mut teacher).map_err(|e| e.to_string())?;
        recombination_holds(&run.record)?;
        let mut seen = false;
        for row in &run.record.losses {
            let l = &row.losses;
            for (name, v) in [("l_p", l.l_p), ("l_adv", l.l_adv), ("l_s", l.l_s), ("l_c", l.l_c)] {
                if name == term {
                    seen |= v != 0.0;
                } else {
                    ensure(v == 0.0, format!("{term}-only run logged {name} = {v} at step {}", row.step))?;
                }
            }
        }
        ensure(seen, format!("{term}-only run never logged a nonzero {term}"))?;
    }
    Ok(format!("DRD > CE on {wins}/5 seeds ({summary}); single-toggle ablations log only their term"))
}

fn tiling_round_trip() -> Outcome {
    let spec = (32usize..=400, 32usize..=400, 0.25f64..=1.0, 0.25f64..=1.0, any::<bool>()).prop_map(|(th, tw, fh, fw, zero)| {
        let pad = if zero { PadMode::Zero } else { PadMode::Reflect };
        TileSpec::new(th, tw, ((th as f64 * fh) as usize).max(1), ((tw as f64 * fw) as usize).max(1), pad).unwrap()
    });
    let mut runner = TestRunner::new(Config::with_cases(100));
    runner
        .run(&(100usize..=800, 100usize..=800, spec, any::<u64>()), |(h, w, spec, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array3::from_shape_fn((3, h, w), |_| rng.gen::<u8>());
            let lab = Array2::from_shape_fn((h, w), |_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..3u8) });
            let lab = LabelMask::new(lab, 3, 255).unwrap();
            let tiles = tile_raster(&img, &lab, &spec).unwrap();

            let mut covered = Array2::from_elem((h, w), false);
            let field = |y: usize, x: usize| ((y * 31 + x * 17) % 97) as f64 / 97.0;
            let mut parts = Vec::with_capacity(tiles.len());
            for t in &tiles {
                let (r0, c0) = t.origin;
                let (r1, c1) = ((r0 + spec.tile_h).min(h), (c0 + spec.tile_w).min(w));
                covered.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(true);
                let inside = (r1 - r0) * (c1 - c0);
                prop_assert_eq!(t.padded_pixels, spec.tile_h * spec.tile_w - inside);
                let ignored = lab.data().slice(ndarray::s![r0..r1, c0..c1]).iter().filter(|&&v| v == 255).count();
                prop_assert_eq!(t.labels.ignored_count(), t.padded_pixels + ignored);
                let probs = Array3::from_shape_fn((2, spec.tile_h, spec.tile_w), |(k, y, x)| {
                    let (gy, gx) = (r0 + y, c0 + x);
                    let p = if gy < h && gx < w { field(gy, gx) } else { 0.5 };
                    if k == 0 { p } else { 1.0 - p }
                });
                parts.push((ScoreMap::new(probs, ScoreKind::Probabilities).unwrap(), t.origin));
            }
            prop_assert!(covered.iter().all(|&c| c), "uncovered pixel");
            let stitched = stitch_predictions(&parts, h, w).unwrap();
            for ((k, y, x), &v) in stitched.data().indexed_iter() {
                let p = field(y, x);
                prop_assert_eq!(v, if k == 0 { p } else { 1.0 - p });
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("100 raster/spec pairs: full coverage, ignore accounting, exact stitch".into())
}

fn determinism() -> Outcome {
    let (mut cfg, data, mut teacher) = quick_setup(2);
    cfg.schedule.iters = 100;
    cfg.schedule.eval_every = 0;
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = distill(&cfg, &data, &mut teacher).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{run}.csv"));
        write_loss_csv(&out.record.losses, &path).unwrap();
        files.push(std::fs::read(path).unwrap());
    }
    ensure(files[0] == files[1], "loss CSVs differ")?;
    Ok(format!("two 100-step runs, {} identical bytes", files[0].len()))
}

#[test]
fn acceptance() {
    let mut suite = Suite { failed: Vec::new() };
    suite.criterion("relation oracle", Some(Duration::from_secs(10)), relation_oracle);
    suite.criterion("row-stochasticity and equivariance", None, relation_properties);
    suite.criterion("gradient checks", Some(Duration::from_secs(60)), gradient_checks);
    suite.criterion("loss identities", None, loss_identities);
    suite.criterion("metric oracles", None, metric_oracles);
    suite.criterion("model accounting", Some(Duration::from_secs(120)), accounting);
    let mut floor = None;
    suite.criterion("DRD vs CE over 5 seeds", Some(Duration::from_secs(30 * 60)), || directional(&mut floor));
    suite.criterion("teacher floor", None, || match &floor {
        Some(d) => {
            ensure(d.teacher_miou >= 0.85, format!("seed 0 teacher val mIoU {:.4} < 0.85", d.teacher_miou))?;
            Ok(format!("seed 0 teacher val mIoU {:.4}", d.teacher_miou))
        }
        None => Err("teacher runs did not complete".into()),
    });
    suite.criterion("tiling and stitching", None, tiling_round_trip);
    suite.criterion("determinism", None, determinism);
    assert!(suite.failed.is_empty(), "failed criteria: {:?}", suite.failed);
}
