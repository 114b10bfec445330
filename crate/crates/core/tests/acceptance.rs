//! Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails. Numeric arguments select a subset, e.g.
//! `cargo test -p roadfuse-core --test acceptance -- 3 9`.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadfuse::evalkit::{evaluate_tiles, stitch_probabilities};
use roadfuse::geodata::{
    rasterize_trajectories, render_ground_truth, epoch_size, TileSampler,
};
use roadfuse::refiner::{build_label_pyramid, LevelPredictions};
use roadfuse::synth::{blank_halves, synth_region, synth_tiles, BlankSide, SynthConfig};
use roadfuse::trainer::{
    pixel_ce, total_loss, BatchSource, RegionSource, RunOutput, TileSetSource, CHECKPOINT_DIR, EPOCH_LOG, TRAIN_LOG,
};
use roadfuse::*;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "shape conformance", shapes),
        (2, "gate complementarity", gate_complementarity),
        (3, "gradient correctness", gradient_check),
        (4, "residual identity", residual_identity),
        (5, "oracle equivalence", oracles),
        (6, "loss arithmetic", loss_arithmetic),
        (7, "overfit experiment", overfit),
        (8, "complementarity behaviour", complementarity),
        (9, "stitching exactness", stitching),
        (10, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let out = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !out.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn uniform32(shape: Shape, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn shapes() -> Outcome {
    let mut m = DualMapper::<f32>::new(ModelConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = uniform32(Shape::new(1, 3, 224, 224), 0.0, 1.0, &mut rng);
    let traj = uniform32(Shape::new(1, 1, 224, 224), 0.0, 1.0, &mut rng);
    let t = Instant::now();
    let mut g = Graph::inference();
    let out = m.forward_full(&mut g, &img, &traj, Mode::Eval).unwrap();
    let elapsed = t.elapsed();

    let mut problems = Vec::new();
    let mut expect = |what: String, got: Shape, want: Shape| {
        if got != want {
            problems.push(format!("{what}: {got:?} != {want:?}"));
        }
    };
    let dims = |l: usize| {
        let s = 224 >> (5 - l);
        (s, 16usize << (5 - l))
    };
    for l in Level::ALL {
        let (side, ch) = dims(l.get());
        let f = Shape::new(1, ch, side, side);
        expect(format!("image branch l{l}"), g.shape(out.image_features.at(l)), f);
        expect(format!("traj branch l{l}"), g.shape(out.traj_features.at(l)), f);
        expect(format!("adapted image l{l}"), g.shape(out.adapted[l.index()].image), f);
        expect(format!("adapted traj l{l}"), g.shape(out.adapted[l.index()].traj), f);
        let gates = out.gates_at(l);
        expect(format!("gate logits l{l}"), g.shape(gates.logits), f.with_c(2));
        expect(format!("gate image l{l}"), g.shape(gates.image), f.with_c(1));
        expect(format!("gate traj l{l}"), g.shape(gates.traj), f.with_c(1));
        expect(format!("fused l{l}"), g.shape(out.fused[l.index()]), f);
        expect(format!("refined l{l}"), g.shape(out.refined[l.index()]), f);
        for s in Stream::ALL {
            expect(format!("{} prediction l{l}", s.name()), g.shape(out.predictions.at(l).get(s)), f.with_c(1));
        }
    }
    expect("coarsest".into(), g.shape(out.fused[0]), Shape::new(1, 256, 14, 14));
    expect("finest".into(), g.shape(out.output_features()), Shape::new(1, 16, 224, 224));
    // Two-class head: the stored road probability is one channel of a softmax over two logits.
    let head = m.store.value(m.predictor_at(Level::FINEST).conv.weight).shape();
    expect("final classifier".into(), head, Shape::new(2, 16, 1, 1));
    let p = g.value(out.output());
    if !p.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
        problems.push("road probability outside [0, 1]".into());
    }
    let fast = elapsed < Duration::from_secs(1);
    Outcome::new(
        problems.is_empty() && fast,
        format!("224x224 forward in {:.3}s; {}", elapsed.as_secs_f64(), if problems.is_empty() { "all shapes match".into() } else { problems.join("; ") }),
    )
}

fn gate_complementarity() -> Outcome {
    let mut worst = 0.0f64;
    let mut negative = false;
    let mut inputs = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for model_seed in 0..10u64 {
        let mut m = DualMapper::<f32>::new(ModelConfig { widths: Widths::REDUCED, init_seed: model_seed });
        for _ in 0..25 {
            let scale = rng.random_range(0.1..20.0f32);
            let img = uniform32(Shape::new(4, 3, 16, 16), -scale, scale, &mut rng);
            let traj = uniform32(Shape::new(4, 1, 16, 16), -scale, scale, &mut rng);
            let mut g = Graph::inference();
            let out = m.forward_full(&mut g, &img, &traj, Mode::Eval).unwrap();
            for l in Level::ALL {
                let st = out.gates_at(l);
                for (&a, &b) in g.value(st.image).data().iter().zip(g.value(st.traj).data()) {
                    worst = worst.max((a as f64 + b as f64 - 1.0).abs());
                    negative |= a < 0.0 || b < 0.0;
                }
            }
            inputs += 4;
        }
    }
    Outcome::new(worst <= 1e-6 && !negative && inputs >= 1000, format!("{inputs} inputs, max |G_I + G_T - 1| = {worst:.3e}"))
}

fn loss_of(m: &mut DualMapper<f64>, img: &Tensor<f64>, traj: &Tensor<f64>, pyr: &refiner::LabelPyramid<f64>) -> f64 {
    let mut g = Graph::inference();
    let out = m.forward_full(&mut g, img, traj, Mode::Train).unwrap();
    let (loss, _) = total_loss(&mut g, &out.predictions, pyr, &LossWeights::default()).unwrap();
    g.value(loss).value()
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = DualMapper::<f64>::new(ModelConfig { widths: Widths::REDUCED, init_seed: 3 });
    let img = uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut rng);
    let traj = uniform(Shape::new(2, 1, 16, 16), 0.0, 1.0, &mut rng);
    let label = Tensor::from_fn(Shape::new(2, 1, 16, 16), |n, _, y, x| ((x + 2 * y + n) % 5 < 2) as u8 as f64);
    let pyr = build_label_pyramid(&label).unwrap();

    let mut g = Graph::new();
    let out = m.forward_full(&mut g, &img, &traj, Mode::Train).unwrap();
    let (loss, _) = total_loss(&mut g, &out.predictions, &pyr, &LossWeights::default()).unwrap();
    let grads = g.backward(loss).unwrap();

    // Parameters along adapt -> gates -> fuse -> refine -> predict, plus a few branch weights.
    let mut ids = Vec::new();
    for gfm in &m.gfm {
        ids.extend([gfm.adapter_image.weight, gfm.adapter_traj.weight, gfm.psi.weight, gfm.psi.bias]);
        ids.extend(gfm.selector.iter().map(|c| c.conv.weight));
    }
    for r in &m.refine {
        ids.push(r.deconv.weight);
        ids.extend(r.convs.iter().map(|c| c.conv.weight));
    }
    ids.extend(m.predictors.iter().map(|p| p.conv.weight));
    let mut branch: Vec<_> = m.store.trainable_ids().filter(|id| m.store.name(*id).starts_with("image") || m.store.name(*id).starts_with("traj")).collect();
    branch.shuffle(&mut rng);
    ids.extend(branch.into_iter().take(6));

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, &id) in ids.iter().cycle().take(3 * ids.len()).enumerate() {
        if k >= ids.len() && checked >= 60 {
            break;
        }
        let n = m.store.value(id).data().len();
        let i = rng.random_range(0..n);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[i]);
        let x0 = m.store.value(id).data()[i];
        m.store.value_mut(id).data_mut()[i] = x0 + h;
        let plus = loss_of(&mut m, &img, &traj, &pyr);
        m.store.value_mut(id).data_mut()[i] = x0 - h;
        let minus = loss_of(&mut m, &img, &traj, &pyr);
        m.store.value_mut(id).data_mut()[i] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
        checked += 1;
    }
    Outcome::new(checked >= 50 && worst < 1e-3, format!("{checked} parameters at widths 16..256, max relative error {worst:.3e}"))
}

fn residual_identity() -> Outcome {
    let mut m = DualMapper::<f32>::new(ModelConfig { widths: Widths::REDUCED, init_seed: 4 });
    m.zero_residuals();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = uniform32(Shape::new(2, 3, 32, 32), 0.0, 1.0, &mut rng);
    let traj = uniform32(Shape::new(2, 1, 32, 32), 0.0, 1.0, &mut rng);
    let mut differing = Vec::new();
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::inference();
        let out = m.forward_full(&mut g, &img, &traj, mode).unwrap();
        for l in Level::ALL {
            let p = out.predictions.at(l);
            let same = g.value(p.refined).data().iter().zip(g.value(p.fused).data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                differing.push(format!("{mode:?} l{l}"));
            }
        }
    }
    Outcome::new(differing.is_empty(), if differing.is_empty() { "P_r == P_f bitwise at all 5 levels".to_string() } else { format!("differs at {}", differing.join(", ")) })
}

// Independent reference implementations.

fn oracle_project(lat: f64, lon: f64, origin: (f64, f64), res: f64) -> (f64, f64) {
    let m_per_deg = 6_378_137.0 * std::f64::consts::PI / 180.0;
    ((origin.0 - lat) * m_per_deg / res, (lon - origin.1) * m_per_deg * origin.0.to_radians().cos() / res)
}

fn oracle_raster(points: &[(f64, f64)], origin: (f64, f64), res: f64, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            for &(lat, lon) in points {
                let (pr, pc) = oracle_project(lat, lon, origin, res);
                if pr >= r as f64 && pr < r as f64 + 1.0 && pc >= c as f64 && pc < c as f64 + 1.0 {
                    out[r * w + c] += 1.0;
                }
            }
        }
    }
    out
}

fn oracle_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let bp = (p.0 - b.0, p.1 - b.1);
    let along = ap.0 * ab.0 + ap.1 * ab.1;
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    if along <= 0.0 {
        ap.0.hypot(ap.1)
    } else if along >= len2 {
        bp.0.hypot(bp.1)
    } else {
        let t = along / len2;
        (ap.0 - t * ab.0).hypot(ap.1 - t * ab.1)
    }
}

fn oracle_render(segs: &[((f64, f64), (f64, f64))], h: usize, w: usize, width: f64) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = (r as f64 + 0.5, c as f64 + 0.5);
            if segs.iter().any(|&(a, b)| a != b && oracle_dist(p, a, b) <= width / 2.0) {
                out[r * w + c] = 1.0;
            }
        }
    }
    out
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    let instances = 100;
    for k in 0..instances {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let origin = (rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0));
        let res = rng.random_range(0.5..3.0);
        let region = GeoRegion::new(origin.0, origin.1, w, h, res).unwrap();
        let deg = res / 111_000.0;
        let pts: Vec<(f64, f64)> = (0..rng.random_range(0..80))
            .map(|_| (origin.0 - rng.random_range(-2.0..h as f64 + 2.0) * deg, origin.1 + rng.random_range(-2.0..w as f64 + 2.0) * deg / origin.0.to_radians().cos()))
            .collect();
        let tp: Vec<_> = pts.iter().map(|&(lat, lon)| Some(TrajectoryPoint { traj_id: "a".into(), timestamp: 0.0, lat, lon })).collect();
        let (grid, _) = rasterize_trajectories(tp, &region);
        if grid.values != oracle_raster(&pts, origin, res, h, w) {
            failures.push(format!("rasterizer #{k}"));
        }

        let roads: Vec<RoadPolyline> = (0..rng.random_range(1..4))
            .map(|i| {
                let v = (0..rng.random_range(2..5))
                    .map(|_| [origin.0 - rng.random_range(-4.0..h as f64 + 4.0) * deg, origin.1 + rng.random_range(-4.0..w as f64 + 4.0) * deg])
                    .collect();
                RoadPolyline::new(format!("r{i}"), v).unwrap()
            })
            .collect();
        let width = rng.random_range(1.0..8.0);
        let gt = render_ground_truth(&roads, &region, width);
        let mut segs = Vec::new();
        for road in &roads {
            let p: Vec<_> = road.vertices.iter().map(|v| oracle_project(v[0], v[1], origin, res)).collect();
            for s in p.windows(2) {
                segs.push((s[0], s[1]));
            }
        }
        if gt.values != oracle_render(&segs, h, w, width) {
            failures.push(format!("renderer #{k}"));
        }

        let (lh, lw) = (16 * rng.random_range(1..3), 16 * rng.random_range(1..3));
        let label = Tensor::from_fn(Shape::new(1, 1, lh, lw), |_, _, _, _| rng.random_bool(0.4) as u8 as f64);
        let pyr = build_label_pyramid(&label).unwrap();
        for l in Level::ALL {
            let s = l.stride();
            let lv = pyr.at(l);
            for y in 0..lh / s {
                for x in 0..lw / s {
                    let mut ones = 0.0;
                    for yy in 0..s {
                        for xx in 0..s {
                            ones += label.at(0, 0, y * s + yy, x * s + xx);
                        }
                    }
                    if (lv.at(0, 0, y, x) - ones / (s * s) as f64).abs() > 1e-12 {
                        failures.push(format!("label pyramid #{k} l{l}"));
                    }
                }
            }
        }

        let n = rng.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.1) { rng.random_range(0..2) as f64 } else { rng.random_range(0.0..1.0) }).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut ce = 0.0;
        for i in 0..n {
            let q = if p[i] < 1e-7 { 1e-7 } else if p[i] > 1.0 - 1e-7 { 1.0 - 1e-7 } else { p[i] };
            ce -= y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln();
        }
        ce /= n as f64;
        let got = pixel_ce(&Tensor::from_vec(Shape::new(1, 1, 1, n), p).unwrap(), &Tensor::from_vec(Shape::new(1, 1, 1, n), y).unwrap()).unwrap();
        if (got - ce).abs() > 1e-6 {
            failures.push(format!("pixel CE #{k}"));
        }

        let (bh, bw) = (rng.random_range(1..20), rng.random_range(1..20));
        let pred: Vec<bool> = (0..bh * bw).map(|_| rng.random_bool(0.5)).collect();
        let truth: Vec<bool> = (0..bh * bw).map(|_| rng.random_bool(0.3)).collect();
        let c = confusion(&BinaryMap::new(bh, bw, pred.clone()).unwrap(), &BinaryMap::new(bh, bw, truth.clone()).unwrap()).unwrap();
        let count = |pv: bool, tv: bool| pred.iter().zip(&truth).filter(|&(&a, &b)| a == pv && b == tv).count() as u64;
        let (tp, fp, fnn, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
        let mt = metrics(&c);
        let iou = if tp + fp + fnn == 0 { None } else { Some(tp as f64 / (tp + fp + fnn) as f64) };
        let f1 = if 2 * tp + fp + fnn == 0 { None } else { Some(2.0 * tp as f64 / (2 * tp + fp + fnn) as f64) };
        let close = |got: f64, want: Option<f64>| want.is_none_or(|w| (got - w).abs() <= 1e-12);
        if (c.tp, c.fp, c.fn_, c.tn) != (tp, fp, fnn, tn) || !close(mt.iou, iou) || !close(mt.f1, f1) {
            failures.push(format!("confusion/metrics #{k}"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{instances} instances each of rasterizer, renderer, label pyramid, pixel CE, confusion and metrics")
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

fn constant_problem(g: &mut Graph<f64>, p: f64) -> (PredictionSet, refiner::LabelPyramid<f64>) {
    let levels = Level::ALL
        .iter()
        .map(|&l| {
            let side = 1 << (l.get() - 1);
            let mut v = || g.leaf(Tensor::full(Shape::new(1, 1, side, side), p));
            LevelPredictions { image: v(), traj: v(), fused: v(), refined: v() }
        })
        .collect();
    (PredictionSet { levels }, build_label_pyramid(&Tensor::full(Shape::new(1, 1, 16, 16), 1.0)).unwrap())
}

fn loss_arithmetic() -> Outcome {
    let mut worst = 0.0f64;
    for p in [0.05, 0.3, 0.5, 0.77, 0.999] {
        let mut g = Graph::new();
        let (preds, pyr) = constant_problem(&mut g, p);
        let (loss, _) = total_loss(&mut g, &preds, &pyr, &LossWeights::default()).unwrap();
        let l0 = -(p.ln());
        worst = worst.max((g.value(loss).value() - 12.5 * l0).abs());
    }
    Outcome::new(worst <= 1e-6, format!("max |total - 12.5 L0| = {worst:.3e} over 5 values of L0"))
}

/// Flat ground, pale roads and dense GPS fixes.
fn overfit_fixture() -> SynthConfig {
    SynthConfig {
        textured_ground: false,
        road_colour: [0.85, 0.85, 0.85],
        image_noise: 0.02,
        fixes_per_px: 2.0,
        gps_sigma_px: 1.0,
        buildings_per_tile: 0.0,
        ..SynthConfig::default()
    }
}

fn overfit() -> Outcome {
    let tiles: Vec<_> = synth_tiles(&overfit_fixture(), 224, 8, 7).unwrap().into_iter().map(|t| t.tile).collect();
    let model = DualMapper::new(ModelConfig { widths: Widths::QUARTER, init_seed: 7 });
    let cfg = TrainConfig { learning_rate: 1e-4, batch_size: 4, seed: 7, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg, LossWeights::default()).unwrap();
    let mut source = TileSetSource { tiles: tiles.clone(), seed: 7 };
    let mut best = (0.0, 0);
    let mut trace = Vec::new();
    for step in 0..500u64 {
        let batch = source.batch(step, 4).unwrap();
        trainer.train_step(&batch, 2).unwrap();
        if (step + 1) % 50 == 0 {
            let iou = metrics(&evaluate_tiles(&mut trainer.model, &tiles).unwrap()).iou;
            trace.push(format!("{:.3}", iou));
            if iou > best.0 {
                best = (iou, step + 1);
            }
            if iou >= 0.95 {
                break;
            }
        }
    }
    Outcome::new(best.0 >= 0.95, format!("best train IoU {:.4} at step {} (every 50 steps: {})", best.0, best.1, trace.join(" ")))
}

/// Mean level-5 trajectory gate over image-blanked and trajectory-blanked columns.
fn blanked_gate_means(m: &mut DualMapper<f32>, tiles: &[TileSample], side: BlankSide) -> (f64, f64) {
    let (mut on_img, mut on_traj, mut n_img, mut n_traj) = (0.0, 0.0, 0usize, 0usize);
    for t in tiles {
        let mut g = Graph::inference();
        let out = m.forward_full(&mut g, &t.image_tensor(), &t.traj_tensor(), Mode::Eval).unwrap();
        let gt = g.value(out.gates_at(Level::FINEST).traj);
        let w = t.width();
        for (i, &v) in gt.data().iter().enumerate() {
            if side.image_blanked(i % w, w) {
                on_img += v as f64;
                n_img += 1;
            } else {
                on_traj += v as f64;
                n_traj += 1;
            }
        }
    }
    (on_img / n_img as f64, on_traj / n_traj as f64)
}

fn complementarity() -> Outcome {
    let size = 64;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let blank = |tiles: Vec<roadfuse::synth::SynthTile>| -> Vec<(TileSample, BlankSide)> {
            tiles
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let side = if i % 2 == 0 { BlankSide::ImageLeft } else { BlankSide::ImageRight };
                    (blank_halves(&t.tile, side), side)
                })
                .collect()
        };
        let train = blank(synth_tiles(&SynthConfig::default(), size, 32, 100 + seed).unwrap());
        let held = blank(synth_tiles(&SynthConfig::default(), size, 8, 200 + seed).unwrap());
        let model = DualMapper::new(ModelConfig { widths: Widths::QUARTER, init_seed: seed });
        let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 4, seed, ..TrainConfig::default() };
        let mut trainer = Trainer::new(model, cfg, LossWeights::default()).unwrap();
        let mut source = TileSetSource { tiles: train.iter().map(|(t, _)| t.clone()).collect(), seed };
        for step in 0..600u64 {
            let batch = source.batch(step, 4).unwrap();
            trainer.train_step(&batch, 8).unwrap();
        }
        let (mut img_blank, mut traj_blank) = (0.0, 0.0);
        for side in [BlankSide::ImageLeft, BlankSide::ImageRight] {
            let tiles: Vec<_> = held.iter().filter(|(_, s)| *s == side).map(|(t, _)| t.clone()).collect();
            let (a, b) = blanked_gate_means(&mut trainer.model, &tiles, side);
            img_blank += a / 2.0;
            traj_blank += b / 2.0;
        }
        if img_blank > traj_blank {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {img_blank:.3} vs {traj_blank:.3}"));
    }
    Outcome::new(wins >= 4, format!("{wins}/5 seeds with mean G_T(image blanked) > mean G_T(trajectories blanked) at level 5; {}", lines.join(", ")))
}

fn stitching() -> Outcome {
    let cell = 32;
    let rasters = synth_region(&SynthConfig::default(), 4 * cell, 4 * cell, 9).unwrap().rasters;
    let mut m = DualMapper::<f32>::new(ModelConfig { widths: Widths::QUARTER, init_seed: 9 });
    let (h, w) = (rasters.height(), rasters.width());
    let half = cell / 2;

    // Pad the region once and cut every context window out of the padded copy.
    let pad = |g: &RasterGrid| {
        let mut p = RasterGrid::zeros(h + 2 * cell, w + 2 * cell, g.kind);
        for r in 0..h {
            for c in 0..w {
                p.set(r + half, c + half, g.get(r, c));
            }
        }
        p
    };
    let padded_img: Vec<_> = rasters.image.iter().map(pad).collect();
    let padded_traj = pad(&rasters.traj);
    let mut expected = vec![0.0f32; h * w];
    for top in (0..h).step_by(cell) {
        for left in (0..w).step_by(cell) {
            let img = Tensor::from_fn(Shape::new(1, 3, 2 * cell, 2 * cell), |_, ch, y, x| padded_img[ch].get(top + y, left + x));
            let traj = Tensor::from_fn(Shape::new(1, 1, 2 * cell, 2 * cell), |_, _, y, x| padded_traj.get(top + y, left + x));
            let p = m.predict(&img, &traj).unwrap();
            for r in 0..cell {
                for c in 0..cell {
                    expected[(top + r) * w + left + c] = p.at(0, 0, half + r, half + c);
                }
            }
        }
    }
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let rect = Rect::new(0, 0, w, h);
    let mut ok = bits(&stitch_probabilities(&mut m, &rasters, &rect, cell, None).unwrap().values) == bits(&expected);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..3 {
        let mut order: Vec<usize> = (0..16).collect();
        order.shuffle(&mut rng);
        ok &= bits(&stitch_probabilities(&mut m, &rasters, &rect, cell, Some(&order)).unwrap().values) == bits(&expected);
    }
    Outcome::new(ok, format!("4x4 cells of {cell} px, row-major and 3 shuffled orders {}", if ok { "bit-identical to the oracle" } else { "differ" }))
}

/// One training run through the same path as the `train` command.
fn train_run(dir: &std::path::Path) {
    let rasters = synth_region(&SynthConfig::default(), 96, 96, 10).unwrap().rasters;
    let split = SplitLayout { train: vec![], val: vec![Rect::new(64, 64, 32, 32)], test: vec![Rect::new(0, 64, 32, 32)] };
    let (tile, seed) = (32, 10);
    let sampler = TileSampler::new(&split, 96, 96, tile).unwrap();
    let epoch_samples = epoch_size(&split, 96, 96, tile);
    let validation = vec![rasters.crop(64, 64, tile)];
    let model = DualMapper::new(ModelConfig { widths: Widths::QUARTER, init_seed: seed });
    let cfg = TrainConfig { batch_size: 2, epochs: 2, seed, max_steps: Some(6), ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg, LossWeights::default()).unwrap();
    let mut source = RegionSource { rasters, sampler, seed, epoch_samples };
    trainer.run(&mut source, Some(&RunOutput { dir: dir.to_path_buf() }), Some(&validation)).unwrap();
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_run(a.path());
    train_run(b.path());
    let mut files = vec![TRAIN_LOG.to_string(), EPOCH_LOG.to_string()];
    let mut names: Vec<_> = std::fs::read_dir(a.path().join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    files.extend(names.iter().map(|n| format!("{CHECKPOINT_DIR}/{n}")));
    let differing: Vec<_> = files
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).unwrap() != std::fs::read(b.path().join(f)).ok().unwrap_or_default())
        .cloned()
        .collect();
    Outcome::new(
        differing.is_empty() && names.len() >= 2,
        if differing.is_empty() { format!("{} files byte-identical across two runs", files.len()) } else { format!("differ: {}", differing.join(", ")) },
    )
}
