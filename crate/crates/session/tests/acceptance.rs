//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xtamer::config::SessionConfig;
use xtamer::engine::Session;
use xtamer::simulate::{collect_presentations, run_simulation, SimulationSummary};
use xtamer_core::cnn::{pretrain, CnnModel, FeatureVector, PretrainConfig};
use xtamer_core::expression::{action_catalog, all_patterns, ExpressionAction, PATTERN_COUNT};
use xtamer_core::face::{standard_heldout_plan, standard_training_plan};
use xtamer_core::learner::{LearnerConfig, RewardModel, RewardSample};
use xtamer_core::numerics::{Activation, Conv2d, Dense, Layer, Network, Tensor};
use xtamer_core::reward::{threshold_distance, RewardConfig};
use xtamer_core::som::{BmuPosition, SomModel};
use xtamer_core::user::{SimulatedUser, UserProfile};

struct Gate {
    failures: usize,
}

impl Gate {
    fn check(&mut self, name: &str, limit_secs: Option<f64>, f: impl FnOnce() -> Result<String>) {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(d) => match limit_secs {
                Some(limit) if secs >= limit => (false, format!("{d}; took {secs:.1}s, limit {limit}s")),
                _ => (true, d),
            },
            Err(e) => (false, format!("{e:#}")),
        };
        if !pass {
            self.failures += 1;
        }
        println!("{} {name}: {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between the backward pass and central differences of
/// `<c, net(x)>`, over every parameter and input element.
fn gradient_error(net: &Network, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64> {
    let h = 1e-5;
    let c = random_tensor(net.forward(x)?.shape().to_vec(), rng);
    let loss = |n: &Network, input: &Tensor| -> Result<f64> { Ok(n.forward(input)?.dot(&c)) };
    let grads = net.backward(&net.forward_trace(x)?, &c)?;
    let mut worst: f64 = 0.0;
    let base = net.flat_params();
    let mut probe = net.clone();
    for (i, &a) in grads.flat().iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat_params(&p)?;
        let up = loss(&probe, x)?;
        p[i] = base[i] - h;
        probe.set_flat_params(&p)?;
        let down = loss(&probe, x)?;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = loss(net, &xp)?;
        xp.data_mut()[i] -= 2.0 * h;
        let down = loss(net, &xp)?;
        worst = worst.max(relative_error(grads.input.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

fn gradients() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x3 = random_tensor(vec![2, 6, 6], &mut r);
        let x1 = random_tensor(vec![6], &mut r);
        let conv = Layer::Conv2d(Conv2d {
            kernels: random_tensor(vec![3, 2, 3, 3], &mut r),
            bias: random_tensor(vec![3], &mut r),
        });
        let dense = Layer::Dense(Dense {
            weights: random_tensor(vec![4, 6], &mut r),
            bias: random_tensor(vec![4], &mut r),
        });
        let cases = [
            ("conv2d", conv, &x3),
            ("maxpool2d", Layer::MaxPool2, &x3),
            ("l1_normalize", Layer::L1Norm, &x3),
            ("l2_normalize", Layer::L2Norm, &x3),
            ("relu", Layer::Act(Activation::Relu), &x3),
            ("flatten", Layer::Flatten, &x3),
            ("dense", dense, &x1),
            ("tanh", Layer::Act(Activation::Tanh), &x1),
            ("scaled_tanh", Layer::Act(Activation::ScaledTanh(2.0)), &x1),
            ("linear", Layer::Act(Activation::Linear), &x1),
        ];
        for (name, layer, x) in cases {
            let err = gradient_error(&Network::new(vec![layer]), x, &mut r)?;
            ensure!(err < 1e-4, "{name} seed {seed}: relative error {err:.2e}");
            worst = worst.max(err);
        }
        let mut model = RewardModel::new(LearnerConfig { seed, ..LearnerConfig::default() })?;
        let actions = action_catalog();
        for i in 0..20 {
            let state = BmuPosition::new(r.random_range(0..20), r.random_range(0..20), 20, 20)?;
            let action = actions.get(i % actions.len()).expect("catalog action");
            model.update(&RewardSample::new(state, action, r.random_range(-2.0..=2.0))?)?;
        }
        let state = BmuPosition::new(r.random_range(0..20), r.random_range(0..20), 20, 20)?;
        let x = RewardModel::input(&state, &actions.get(seed as usize).expect("catalog action"))?;
        let err = gradient_error(model.network(), &x, &mut r)?;
        ensure!(err < 1e-4, "reward MLP seed {seed}: relative error {err:.2e}");
        worst = worst.max(err);
    }
    Ok(format!("10 layer kinds + reward MLP, 5 seeds, max relative error {worst:.2e} < 1e-4"))
}

fn bmu_oracle(som: &SomModel) -> Result<String> {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..1000 {
        let raw: Vec<f64> = (0..som.dim()).map(|_| r.random::<f64>()).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let v = FeatureVector::new(raw.iter().map(|x| x / norm).collect());
        let mut best = (f64::INFINITY, 0);
        for u in 0..som.units() {
            let d: f64 = som.prototype(u).iter().zip(v.as_slice()).map(|(w, x)| (w - x) * (w - x)).sum::<f64>().sqrt();
            if d < best.0 {
                best = (d, u);
            }
        }
        let got = som.best_matching_unit(&v)?;
        ensure!(got.unit_index() == best.1, "vector {i}: unit {} vs brute force {}", got.unit_index(), best.1);
    }
    Ok(format!("1000/1000 random vectors match exhaustive argmin on a trained {}x{} map", som.rows(), som.cols()))
}

fn reward_mapping() -> Result<String> {
    let cfg = RewardConfig::default();
    let mut prev = i8::MAX;
    let mut seen = [false; 5];
    for i in 0..=10_000 {
        let r = threshold_distance(i as f64 / 10_000.0, &cfg)?;
        ensure!(r <= prev, "reward rises at d = {}", i as f64 / 10_000.0);
        seen[(r + 2) as usize] = true;
        prev = r;
    }
    ensure!(seen.iter().all(|&s| s), "not every level reached: {seen:?}");
    ensure!(threshold_distance(0.0, &cfg)? == 2 && threshold_distance(1.0, &cfg)? == -2, "endpoints");
    Ok("monotone over 10,001 points, all 5 levels, d=0 -> +2, d=1 -> -2".into())
}

fn pretraining(out: &Path) -> Result<(String, CnnModel)> {
    let train = standard_training_plan()?.render_all()?;
    let held = standard_heldout_plan()?.render_all()?;
    let config = PretrainConfig::default();
    let (model, stats) = pretrain(&train, &config, |_| {})?;
    let train_acc = model.accuracy(&train)?;
    let held_acc = model.accuracy(&held)?;
    model.save(out)?;
    ensure!(stats.len() <= 30, "{} epochs", stats.len());
    ensure!(
        train_acc >= 0.90 && held_acc >= 0.80,
        "train {train_acc:.3} (need 0.90), held-out {held_acc:.3} (need 0.80)"
    );
    Ok((
        format!(
            "{} training images, {} epochs: train {train_acc:.3} >= 0.90, held-out {held_acc:.3} >= 0.80",
            train.len(),
            stats.len()
        ),
        model,
    ))
}

fn som_clustering(cnn: Arc<CnnModel>) -> Result<(String, SomModel)> {
    let config = SessionConfig::default();
    let mut user = SimulatedUser::new(config.simulated_profile()?)?;
    let samples = collect_presentations(&mut user, config.calibration_samples)?;
    let mut session = Session::new(config.clone(), cnn)?;
    let report = session.calibrate(&samples)?.clone();
    ensure!(report.purity >= 0.7, "purity {:.3} < 0.7", report.purity);
    Ok((
        format!(
            "purity {:.3} >= 0.7 ({} samples, noise {})",
            report.purity,
            report.samples,
            config.simulated_profile()?.expression_noise
        ),
        session.som().context("calibrated")?.clone(),
    ))
}

fn closed_loop(cnn: Arc<CnnModel>, dir: &Path) -> Result<String> {
    let config = SessionConfig::default();
    let profile = config.simulated_profile()?;
    ensure!(profile.mimic_accuracy == 1.0, "default profile is not a perfect mimic");
    let s = run_simulation(&config, cnn, &profile, dir, false, |_| {})?;
    ensure!(s.epochs.len() == 10 && s.epochs.iter().all(|e| e.interactions == 100), "expected 10 x 100");
    let first = s.epochs[0].avg_cost;
    let last = s.epochs[9].avg_cost;
    let acc1 = s.epochs[0].accuracy.unwrap_or(0.0);
    let a = s.evaluation.mapped >= 6;
    let b = last < 0.5 * first;
    let c = acc1 < 0.85 && s.convergence.epoch_start.is_none_or(|start| start >= 100);
    let detail = format!(
        "(a) {}/7 mapped on {} held-out per class [{}], (b) epoch-10 cost {last:.4} vs 0.5 x {first:.4} [{}], \
         (c) epoch-1 accuracy {acc1:.2}, first epoch >= 0.85 starts at {} [{}]",
        s.evaluation.mapped,
        s.evaluation.per_class,
        if a { "ok" } else { "no" },
        if b { "ok" } else { "no" },
        s.convergence.epoch_start.map_or("never".into(), |v| format!("interaction {v}")),
        if c { "ok" } else { "no" },
    );
    ensure!(a && b && c, "{detail}");
    Ok(detail)
}

fn cohort(cnn: Arc<CnnModel>, dir: &Path) -> Result<String> {
    let config = SessionConfig { epochs: 30, ..SessionConfig::default() };
    let run = |accuracy: f64, name: &str| -> Result<SimulationSummary> {
        let profile = UserProfile::new(1, accuracy, 0.05, config.seed)?;
        Ok(run_simulation(&config, cnn.clone(), &profile, &dir.join(name), false, |_| {})?)
    };
    let high = run(0.95, "high")?.convergence.interaction;
    let low = run(0.6, "low")?.convergence.interaction;
    let show = |v: Option<u64>| v.map_or("not within 3000".to_string(), |n| n.to_string());
    let detail = format!("mimic 0.95 converges after {}, mimic 0.6 after {}", show(high), show(low));
    let strictly_later = match (high, low) {
        (Some(h), Some(l)) => l > h,
        (Some(_), None) => true,
        _ => false,
    };
    ensure!(strictly_later, "{detail}");
    Ok(detail)
}

fn determinism(cnn_path: &Path, dir: &Path) -> Result<String> {
    let run = |name: &str| -> Result<()> {
        let status = Command::new(env!("CARGO_BIN_EXE_xtamer"))
            .args(["simulate", "--seed", "5", "--cnn"])
            .arg(cnn_path)
            .arg("--out")
            .arg(dir.join(name))
            .stdout(std::process::Stdio::null())
            .status()?;
        ensure!(status.success(), "simulate exited with {status}");
        Ok(())
    };
    run("a")?;
    run("b")?;
    let mut names: Vec<_> = std::fs::read_dir(dir.join("a"))?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
    names.sort();
    for n in &names {
        let a = std::fs::read(dir.join("a").join(n))?;
        let b = std::fs::read(dir.join("b").join(n)).with_context(|| format!("{n:?} missing in second run"))?;
        ensure!(a == b, "{n:?} differs");
    }
    Ok(format!("two `simulate` runs wrote {} byte-identical files ({:?})", names.len(), names))
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn round_trips(cnn: &CnnModel, cnn_path: &Path, som: &SomModel, dir: &Path) -> Result<String> {
    let loaded = CnnModel::load(cnn_path)?;
    ensure!(
        loaded == *cnn && same_bits(&loaded.feature_network().flat_params(), &cnn.feature_network().flat_params()),
        "CNN differs after reload"
    );

    let som_path = dir.join("som.xt");
    som.save(&som_path)?;
    let som2 = SomModel::load(&som_path)?;
    let som_bits = (0..som.units()).all(|u| same_bits(som.prototype(u), som2.prototype(u)));
    ensure!(som2 == *som && som_bits, "SOM differs after reload");

    let mut model = RewardModel::new(LearnerConfig::default())?;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let state = BmuPosition::new(r.random_range(0..20), r.random_range(0..20), 20, 20)?;
        let action = action_catalog().get(r.random_range(0..7)).expect("catalog action");
        model.update(&RewardSample::new(state, action, r.random_range(-2.0..=2.0))?)?;
    }
    let model_path = dir.join("reward.xt");
    model.save(&model_path)?;
    let model2 = RewardModel::load(&model_path)?;
    ensure!(
        model2 == model && same_bits(&model2.network().flat_params(), &model.network().flat_params()),
        "reward model differs after reload"
    );

    let mut count = 0;
    for a in all_patterns() {
        let code = a.encode();
        ensure!(ExpressionAction::decode(&code)? == a, "{code} does not round-trip");
        count += 1;
    }
    ensure!(count == PATTERN_COUNT, "{count} patterns");
    Ok(format!("CNN, SOM and reward model reload bit-exactly; {count} LED patterns round-trip"))
}

fn main() {
    let mut gate = Gate { failures: 0 };
    let tmp = tempfile::tempdir().expect("temp dir");
    let cnn_path = tmp.path().join("cnn.xt");

    gate.check("gradient correctness", Some(30.0), gradients);
    gate.check("reward mapping", None, reward_mapping);

    let mut cnn = None;
    gate.check("perception pretraining", Some(600.0), || {
        let (detail, model) = pretraining(&cnn_path)?;
        cnn = Some(Arc::new(model));
        Ok(detail)
    });
    let Some(cnn) = cnn else {
        for name in ["SOM clustering", "BMU oracle", "closed-loop convergence", "cohort contrast", "determinism", "round-trip persistence"] {
            println!("FAIL {name}: needs the pretrained CNN");
        }
        std::process::exit(1);
    };

    let mut som = None;
    gate.check("SOM clustering", None, || {
        let (detail, model) = som_clustering(cnn.clone())?;
        som = Some(model);
        Ok(detail)
    });
    match &som {
        Some(som) => gate.check("BMU oracle", Some(10.0), || bmu_oracle(som)),
        None => {
            gate.failures += 1;
            println!("FAIL BMU oracle: needs the calibrated SOM");
        }
    }
    gate.check("closed-loop convergence", Some(900.0), || closed_loop(cnn.clone(), &tmp.path().join("closed")));
    gate.check("cohort contrast", None, || cohort(cnn.clone(), &tmp.path().join("cohort")));
    gate.check("determinism", None, || determinism(&cnn_path, &tmp.path().join("det")));
    match &som {
        Some(som) => gate.check("round-trip persistence", None, || round_trips(&cnn, &cnn_path, som, tmp.path())),
        None => {
            gate.failures += 1;
            println!("FAIL round-trip persistence: needs the calibrated SOM");
        }
    }

    println!("{} criteria failed", gate.failures);
    if gate.failures > 0 {
        std::process::exit(1);
    }
}
