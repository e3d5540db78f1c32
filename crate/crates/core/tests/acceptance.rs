//! Acceptance checks, one status line each. Set `DRN_ACCEPTANCE=1,3,8` to
//! run a subset.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use drn_core::config::{RunConfig, Task};
use drn_core::cost::compare_blocks;
use drn_core::ctc::oracle_suite;
use drn_core::gradcheck::{suite, GradCheckConfig};
use drn_core::kernels::{BatchNormConfig, Mode};
use drn_core::nn::{Combine, ConvFlavor, ConvGroupSpec, DenseBlock, DenseBlockSpec, Gdb, GdbSpec, Pass, RrdbSpec};
use drn_core::session::{self, Datasets, CHECKPOINT_FILE, METRICS_FILE};
use drn_core::train::{evaluate, Checkpoint};
use drn_core::{ParamStore, Result, Rng, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("DRN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")))
}

fn with_mnist(mut cfg: RunConfig) -> Result<RunConfig> {
    cfg.set("data.mnist_dir", &mnist_dir().display().to_string())?;
    Ok(cfg)
}

fn cost_band() -> Result<Outcome> {
    let mut worst = String::new();
    let mut ok = true;
    for l in 3..=8 {
        for r in 1..=4 {
            let k = 12;
            let spec = DenseBlockSpec::new(l, k, r * k, Combine::Concat);
            let rep = compare_blocks(&spec, ConvFlavor::Standard, (28, 28));
            if !rep.in_band {
                ok = false;
                worst = format!(
                    "L={l} c0/k={r} ratio {:.4} outside ({:.4}, {:.4}]",
                    rep.ratio, rep.band.0, rep.band.1
                );
            }
        }
    }
    let pair = compare_blocks(
        &DenseBlockSpec::new(4, 12, 24, Combine::Concat),
        ConvFlavor::Standard,
        (28, 28),
    );
    let exact = pair.standard.params == 18144 && pair.refined.params == 6480 && (pair.ratio - 5.0 / 14.0).abs() == 0.0;
    outcome(
        ok && exact,
        format!(
            "24 grid points in band{}; L=4 k=12 c0=24: {} vs {} ratio {:.5}",
            if worst.is_empty() {
                String::new()
            } else {
                format!(" except {worst}")
            },
            pair.standard.params,
            pair.refined.params,
            pair.ratio
        ),
    )
}

fn gradient_suite() -> Result<Outcome> {
    let reports = suite(&GradCheckConfig::default())?;
    let worst = reports
        .iter()
        .map(|r| (r.max_rel_err(), r.name.as_str()))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let all = reports.iter().all(|r| r.passed() && r.max_rel_err() < 1e-4);
    let has_drn = reports.iter().any(|r| r.name.starts_with("drn"));
    outcome(
        all && has_drn,
        format!(
            "{} checks, worst {} rel err {:.2e} (< 1e-4)",
            reports.len(),
            worst.1,
            worst.0
        ),
    )
}

fn ctc_oracle() -> Result<Outcome> {
    let r = oracle_suite(250, 11)?;
    outcome(r.cases >= 200 && r.passed(1e-10), format!("{r} (tol 1e-10)"))
}

fn gdb_doubling() -> Result<Outcome> {
    let c0 = 16;
    let spec = GdbSpec {
        shallow: ConvGroupSpec::same(1, c0, 5, ConvFlavor::Standard),
        blocks: 5,
        rrdb: RrdbSpec::new(4, 12, c0),
    };
    let mut rng = Rng::new(21);
    let mut store = ParamStore::<f32>::new();
    let gdb = Gdb::build(&mut store, "gdb", spec, &mut rng)?;
    for p in store.params_mut() {
        if p.name.contains("/fusion/") {
            p.value.data_mut().fill(0.0);
        }
    }
    let image = Tensor::from_fn(vec![2, 1, 12, 12], |_| rng.uniform() as f32);
    let mut pass = Pass::new(&mut store, Mode::Infer, BatchNormConfig::default());
    let x = pass.input(image, false);
    let out = gdb.forward(&mut pass, x, 0.0)?;
    let (fs, g) = (pass.value(out.shallow), pass.value(out.global));
    let mut worst = 0.0f64;
    for (&s, &v) in fs.data().iter().zip(g.data()) {
        let want = 32.0 * s as f64;
        let dev = (v as f64 - want).abs();
        worst = worst.max(if want == 0.0 { dev } else { dev / want.abs() });
    }
    outcome(
        worst < 1e-6 && fs.shape() == g.shape(),
        format!("B=5 max relative deviation from 32·F_s {worst:.2e} (< 1e-6)"),
    )
}

fn desk_run(cfg: RunConfig, floor: f64, limit: Duration, what: &str) -> Result<Outcome> {
    let start = Instant::now();
    let data = session::load_datasets(&cfg)?;
    let (n_train, n_test) = (data.train.len(), data.test.len());
    let run = session::run(&cfg, &data, None, None, |records| {
        for r in records {
            eprintln!(
                "    {what} epoch {} {} loss {:.4} accuracy {:.4} ({:.0}s)",
                r.epoch,
                r.split,
                r.metrics.loss,
                r.metrics.accuracy,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let took = start.elapsed();
    let epochs = run.records.len() / 2;
    outcome(
        run.test.accuracy >= floor && took < limit,
        format!(
            "{n_train} train, {epochs} epochs: accuracy {:.4} on {} held-out (>= {floor:.2}), {:.1} min (< {} min)",
            run.test.accuracy,
            n_test.min(run.test.samples),
            took.as_secs_f64() / 60.0,
            limit.as_secs() / 60
        ),
    )
}

fn mnist_desk() -> Result<Outcome> {
    let cfg = with_mnist(RunConfig::new(Task::Mnist))?;
    assert_eq!(cfg.usize("data.train_samples"), 10_000);
    assert_eq!(cfg.usize("run.epochs"), 5);
    desk_run(cfg, 0.97, Duration::from_secs(30 * 60), "mnist")
}

fn sequence_desk() -> Result<Outcome> {
    let cfg = with_mnist(RunConfig::new(Task::Sequence))?;
    assert_eq!(cfg.usize("data.train_samples"), 20_000);
    assert_eq!(cfg.usize("data.test_samples"), 2_000);
    desk_run(cfg, 0.80, Duration::from_secs(60 * 60), "sequence")
}

fn determinism() -> Result<Outcome> {
    let mut cfg = with_mnist(RunConfig::new(Task::Mnist))?;
    for o in [
        "model.blocks=2",
        "data.train_samples=1500",
        "data.test_samples=500",
        "run.epochs=2",
        "run.seed=5",
    ] {
        cfg.apply_override(o)?;
    }
    let data: Datasets = session::load_datasets(&cfg)?;
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut runs = Vec::new();
    for d in &dirs {
        runs.push(session::run(&cfg, &data, Some(d.path()), None, |_| {})?);
    }
    let metrics: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| std::fs::read(d.path().join(METRICS_FILE)))
        .collect::<std::io::Result<_>>()?;
    let same_metrics = metrics[0] == metrics[1];

    let path = dirs[0].path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&path)?;
    let ck = Checkpoint::load(&path)?;
    let (_, mut reloaded, sgd) = session::restore(&ck)?;
    let resaved = Checkpoint::capture(&reloaded, &sgd, ck.epoch()?, &ck.rng()?, &ck.config_text()?).to_bytes();
    let same_bytes = resaved == bytes;

    let before = evaluate(&mut runs[0].model, &data.test, 100)?;
    let after = evaluate(&mut reloaded, &data.test, 100)?;
    let same_eval = before.loss.to_bits() == after.loss.to_bits() && before.accuracy == after.accuracy;
    outcome(
        same_metrics && same_bytes && same_eval,
        format!(
            "metrics files identical: {same_metrics}; checkpoint re-save identical: {same_bytes} ({} bytes); eval after reload bitwise equal: {same_eval}",
            bytes.len()
        ),
    )
}

fn structural() -> Result<Outcome> {
    let mut rng = Rng::new(8);
    let mut cases = 0;
    let mut bad = Vec::new();
    for _ in 0..24 {
        let layers = rng.range_inclusive(1, 6);
        let growth = rng.range_inclusive(1, 12);
        let c0 = rng.range_inclusive(1, 24);
        let flavor = if rng.below(2) == 0 {
            ConvFlavor::Standard
        } else {
            ConvFlavor::DepthwiseSeparable
        };
        let x = Tensor::from_fn(vec![2, c0, 5, 5], |_| rng.normal() as f32);
        let mut shapes = Vec::new();
        let mut refined_inputs = Vec::new();
        for combine in [Combine::Concat, Combine::Sum] {
            let spec = DenseBlockSpec::new(layers, growth, c0, combine).with_flavor(flavor);
            let mut store = ParamStore::<f32>::new();
            let block = DenseBlock::build(&mut store, "b", spec, &mut rng)?;
            let mut pass = Pass::new(&mut store, Mode::Infer, BatchNormConfig::default());
            let input = pass.input(x.clone(), false);
            let out = block.forward(&mut pass, input)?;
            shapes.push(pass.value(out.output).shape().to_vec());
            if combine == Combine::Sum {
                refined_inputs = out.layer_inputs.iter().map(|&v| pass.value(v).shape()[1]).collect();
            }
        }
        let inner_ok = refined_inputs.iter().skip(1).all(|&c| c == growth) && refined_inputs[0] == c0;
        let expected = vec![2, c0 + layers * growth, 5, 5];
        if shapes[0] != shapes[1] || shapes[0] != expected || !inner_ok {
            bad.push(format!("L={layers} k={growth} c0={c0}"));
        }
        cases += 1;
    }
    outcome(
        bad.is_empty(),
        format!(
            "{cases} random specs: equal output shapes and k-channel inner inputs{}",
            if bad.is_empty() {
                String::new()
            } else {
                format!("; failing {}", bad.join(", "))
            }
        ),
    )
}

type Check = (u32, &'static str, Duration, fn() -> Result<Outcome>);

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("DRN_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let checks: [Check; 8] = [
        (1, "cost band", Duration::from_secs(1), cost_band),
        (2, "gradient suite", Duration::from_secs(120), gradient_suite),
        (3, "ctc oracle", Duration::from_secs(30), ctc_oracle),
        (4, "gdb doubling", Duration::from_secs(5), gdb_doubling),
        (5, "mnist desk", Duration::from_secs(30 * 60), mnist_desk),
        (6, "sequence desk", Duration::from_secs(60 * 60), sequence_desk),
        (7, "determinism", Duration::from_secs(5 * 60), determinism),
        (8, "structure", Duration::from_secs(1), structural),
    ];
    let mut failures = 0;
    for (id, name, budget, check) in checks {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && took <= budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "[{}] {id}. {name}: {detail} [{:.2}s, budget {}s]",
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance check(s) failed");
        std::process::exit(1);
    }
}
