//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! nonzero if any hard criterion fails.
//!
//! Positional arguments select criteria (`acceptance c1 c4`). Setting
//! `DMFA_ACCEPTANCE_SKIP_MNIST=1` reports criteria 6 and 8 as `SKIP`.

mod common;

use common::grad::{relative_error, toy_arch, toy_samples};
use common::*;
use dmfa_core::conditional::condition;
use dmfa_core::dmfa::{head_loss, ArchKind, DmfaNetwork, LossMode};
use dmfa_core::eval::{
    dmfa_imputations, eval_samples, evaluate_dmfa, evaluate_mfa, export_imputation_grid, export_parameter_images,
    mfa_imputations, Metrics,
};
use dmfa_core::mfa::train_mfa;
use dmfa_core::tensorio::{load_idx, parse_pnm};
use dmfa_core::trainer::{run_epochs, train_dmfa, EpochLog, TrainConfig, TrainState};
use dmfa_core::{apply_mask, conditional_mixture, Dataset, ImageShape, Imputation, Mask, MaskedSample, MfaTrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Flag,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn failed(e: impl std::fmt::Display) -> Outcome {
    Outcome {
        status: Status::Fail,
        detail: format!("error: {e}"),
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t <= limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

/// Frobenius-norm relative error.
fn norm_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let base: f64 = b.iter().map(|y| y * y).sum();
    diff.sqrt() / base.sqrt().max(1e-300)
}

fn scalar_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn c1_math_oracles() -> Outcome {
    let start = Instant::now();
    let instances = 200;
    let mut worst = [0.0f64; 5];
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=30);
        let l = rng.random_range(0..=6);
        let k = rng.random_range(1..=4);
        let mix = random_mixture(&mut rng, k, n, l);
        let x = random_point(&mut rng, n);
        let observed = rng.random_range(1..n);
        let split = random_split(&mut rng, n, observed);
        let x_o = split.gather_observed(&x);
        for g in mix.components() {
            let cov = covariance(g);
            worst[0] = worst[0].max(scalar_rel(g.log_density(&x).unwrap(), log_pdf(g.mean(), &cov, &x)));
            worst[1] = worst[1].max(scalar_rel(g.log_det_sigma().unwrap(), log_det(&cov)));
            let c = condition(g, &x_o, &split).unwrap();
            let (mean, ccov, _) = dense_conditional(g.mean(), &cov, &split, &x_o);
            worst[2] = worst[2].max(norm_rel(c.gaussian.mean(), &mean));
            worst[3] = worst[3].max(norm_rel(covariance(&c.gaussian).as_slice(), ccov.as_slice()));
        }
        let weights = conditional_mixture(&mix, &x_o, &split).unwrap().weights();
        worst[4] = worst[4].max(norm_rel(&weights, &dense_mixture_weights(&mix, &split, &x_o)));
    }
    let tol = 1e-8;
    let (fast, time) = within(Duration::from_secs(10), start);
    verdict(
        worst.iter().all(|&w| w <= tol) && fast,
        format!(
            "{instances} instances; worst relative error log-density {:.1e}, log-det {:.1e}, cond. mean {:.1e}, cond. cov {:.1e}, weights {:.1e} (tol {tol:.0e}); {time}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

fn c2_chain_rule() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(2..=30);
        let l = rng.random_range(0..=6);
        let g = random_fa(&mut rng, n, l);
        let observed = rng.random_range(1..n);
        let split = random_split(&mut rng, n, observed);
        let x = random_point(&mut rng, n);
        let c = condition(&g, &split.gather_observed(&x), &split).unwrap();
        let parts = c.log_evidence + c.gaussian.log_density(&split.gather_missing(&x)).unwrap();
        worst = worst.max(scalar_rel(parts, g.log_density(&x).unwrap()));
    }
    verdict(worst <= 1e-8, format!("100 instances; worst relative gap {worst:.1e} (tol 1e-8)"))
}

fn c3_gradients() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in [ArchKind::ConvDense, ArchKind::FullConv, ArchKind::Dense] {
        let mut worst = 0.0f64;
        for pair in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + 100 * pair + kind as u64);
            let side = if pair % 2 == 0 { 6 } else { 12 };
            let mode = if pair % 4 < 2 { LossMode::Nll } else { LossMode::NllPlusMse };
            let arch = toy_arch(kind, side, 2);
            let net = DmfaNetwork::new(arch.clone(), None, &mut rng).unwrap();
            let samples = toy_samples(&mut rng, arch.shape, 2);
            worst = worst.max(relative_error(&net, &samples, mode, 32, 1e-3, &mut rng));
        }
        ok &= worst <= 1e-2;
        parts.push(format!("{kind} {worst:.1e}"));
    }

    let mut head_worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for trial in 0..20 {
        let (n, l) = (36, 1 + trial % 4);
        let out: Vec<f64> = (0..(l + 2) * n).map(|_| 0.5 * normal(&mut rng)).collect();
        let mask = Mask::patch(ImageShape::new(1, 6, 6), trial % 4, trial % 3, 3, 3).unwrap();
        let missing = mask.missing_indices();
        let x_m: Vec<f64> = missing.iter().map(|_| rng.random()).collect();
        for mode in [LossMode::Nll, LossMode::NllPlusMse] {
            let f = |o: &[f64]| head_loss(o, n, l, &missing, &x_m, mode, 1.0, false).unwrap().loss;
            let g = head_loss(&out, n, l, &missing, &x_m, mode, 1.0, true).unwrap().grad;
            let h = 1e-6;
            let mut p = out.clone();
            for j in 0..out.len() {
                p[j] = out[j] + h;
                let up = f(&p);
                p[j] = out[j] - h;
                let down = f(&p);
                p[j] = out[j];
                let fd = (up - down) / (2.0 * h);
                head_worst = head_worst.max((g[j] - fd).abs() / fd.abs().max(1.0));
            }
        }
    }
    ok &= head_worst <= 1e-5;
    let (fast, time) = within(Duration::from_secs(120), start);
    verdict(
        ok && fast,
        format!(
            "20 pairs per arch, f32 norm-relative error {} (tol 1e-2); f64 head {head_worst:.1e} (tol 1e-5); {time}",
            parts.join(", ")
        ),
    )
}

fn c4_restriction_invariance() -> Outcome {
    let shape = ImageShape::new(1, 6, 6);
    let (n, l) = (shape.len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = DmfaNetwork::new(toy_arch(ArchKind::ConvDense, 6, l), None, &mut rng).unwrap();
    let x: Vec<f32> = (0..n).map(|_| rng.random()).collect();
    let (mut checked, mut broken) = (0usize, 0usize);
    for top in 0..=3 {
        for left in 0..=3 {
            let s = apply_mask(&x, &Mask::patch(shape, top, left, 3, 3).unwrap()).unwrap();
            let out = net.outputs(&[&s]).unwrap().pop().unwrap();
            let (missing, x_m) = (s.missing_indices(), s.missing_values());
            for mode in [LossMode::Nll, LossMode::NllPlusMse] {
                let base = head_loss(&out, n, l, &missing, &x_m, mode, 1.0, true).unwrap();
                for j in 0..out.len() {
                    if s.mask.is_missing(j % n) {
                        continue;
                    }
                    for delta in [1e-3f32, 1.0, -50.0] {
                        let mut p = out.clone();
                        p[j] += delta;
                        let h = head_loss(&p, n, l, &missing, &x_m, mode, 1.0, true).unwrap();
                        checked += 1;
                        if h.loss.to_bits() != base.loss.to_bits() || h.grad != base.grad {
                            broken += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        broken == 0,
        format!("{checked} observed-coordinate perturbations over all 16 patch positions; {broken} changed the loss"),
    )
}

fn c5_synthetic() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let shape = ImageShape::new(2, 2, 4);
    let gen = unit_box_mixture(&mut rng, 2, shape.len(), 2, 0.05, 0.02);
    let train = Dataset::new(sample_unit_box(&gen, &mut rng, 4000), shape).unwrap();
    let test = Dataset::new(sample_unit_box(&gen, &mut rng, 2000), shape).unwrap();
    let patch = (2, 2);
    let config = TrainConfig {
        lr: 1e-3,
        epochs: 60,
        batch: 64,
        seed: 5,
        patch,
        arch: ArchKind::Dense,
        widths: Some(vec![128, 128]),
        latent: 2,
        ..TrainConfig::default()
    };
    let net = match train_dmfa(&train, &config) {
        Ok(out) => out.net,
        Err(e) => return failed(e),
    };
    let dmfa = evaluate_dmfa(&net, &test, patch, 0).unwrap().mean_nll;

    let (mean, cov) = gaussian_mle(train.samples());
    let samples = eval_samples(&test, patch, 0).unwrap();
    let (mut baseline, mut oracle) = (0.0, 0.0);
    for s in &samples {
        let split = s.mask.split_index();
        let x = to_f64(&s.ground_truth);
        let (x_o, x_m) = (split.gather_observed(&x), split.gather_missing(&x));
        let m = split.missing();
        baseline -= log_pdf(&gather(&mean, m), &submatrix(&cov, m, m), &x_m);
        oracle -= conditional_mixture(&gen, &x_o, &split).unwrap().log_density(&x_m).unwrap();
    }
    baseline /= samples.len() as f64;
    oracle /= samples.len() as f64;
    let gap = (dmfa - oracle).abs() / oracle.abs();
    let (fast, time) = within(Duration::from_secs(300), start);
    verdict(
        dmfa < baseline && gap <= 0.15 && fast,
        format!(
            "test conditional NLL: DMFA {dmfa:.3}, restricted-marginal Gaussian {baseline:.3}, generator {oracle:.3} (gap {:.1}%, limit 15%); {time}",
            100.0 * gap
        ),
    )
}

fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

fn artifact_dir() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

struct MnistRun {
    test: Dataset,
    dmfa: DmfaNetwork,
    mfa: dmfa_core::MfaModel<f32>,
    metrics: (Metrics, Metrics),
}

const MNIST_PATCH: (usize, usize) = (14, 14);

fn mnist_run() -> dmfa_core::Result<(MnistRun, String)> {
    let start = Instant::now();
    let train = load_idx(data_path("mnist-subset-train-images-idx3-ubyte.gz"))?;
    let test = load_idx(data_path("mnist-subset-test-images-idx3-ubyte.gz"))?;
    let config = TrainConfig {
        epochs: 10,
        patch: MNIST_PATCH,
        ..TrainConfig::default()
    };
    let out = train_dmfa(&train, &config)?;
    let dmfa_secs = start.elapsed().as_secs_f64();
    let mfa = train_mfa(
        &train,
        &MfaTrainConfig {
            k: 20,
            latent: 6,
            epochs: 10,
            ..MfaTrainConfig::default()
        },
    )?
    .model;
    let metrics = (
        evaluate_dmfa(&out.net, &test, MNIST_PATCH, 0)?,
        evaluate_mfa(&mfa, &test, MNIST_PATCH, 0, Imputation::TopComponent)?,
    );
    let note = format!(
        "{} train / {} test images; DMFA train {dmfa_secs:.0}s, total {:.0}s",
        train.count(),
        test.count(),
        start.elapsed().as_secs_f64()
    );
    Ok((
        MnistRun {
            test,
            dmfa: out.net,
            mfa,
            metrics,
        },
        note,
    ))
}

fn c6_ordering(run: &MnistRun, note: &str) -> Outcome {
    let (d, m) = &run.metrics;
    verdict(
        d.mean_nll < m.mean_nll && d.mean_mse < m.mean_mse,
        format!(
            "10 epochs each; DMFA NLL {:.3} / MSE {:.3} vs MFA(k=20,l=6) NLL {:.3} / MSE {:.3}; {note}",
            d.mean_nll, d.mean_mse, m.mean_nll, m.mean_mse
        ),
    )
}

fn pnm_dims(path: &Path) -> dmfa_core::Result<(usize, usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| dmfa_core::Error::io(path, e))?;
    let p = parse_pnm(&bytes)?;
    Ok((p.channels, p.height, p.width))
}

fn c8_figures(run: &MnistRun) -> Vec<Outcome> {
    let figures = || -> dmfa_core::Result<(String, f64)> {
        let dir = artifact_dir();
        let shape = run.test.shape();
        let samples = eval_samples(&run.test, MNIST_PATCH, 0)?;
        let rows: Vec<MaskedSample> = samples.iter().take(8).cloned().collect();
        let imps = vec![
            dmfa_imputations(&run.dmfa, &rows)?,
            mfa_imputations(&run.mfa, &rows, Imputation::TopComponent)?,
        ];
        let grid = dir.join("grid.pgm");
        let layout = export_imputation_grid(&grid, &rows, &imps)?;
        let want = (1, 8 * shape.height, 4 * shape.width);
        if pnm_dims(&grid)? != want || (layout.rows, layout.cols) != (8, 4) {
            return Err(dmfa_core::Error::Shape(format!("grid has shape {:?}", pnm_dims(&grid)?)));
        }
        let g = run.dmfa.forward(&rows[0])?;
        let images = export_parameter_images(&g, shape, &dir, "dmfa-")?;
        let files = images.image_files();
        if files.len() != 2 + run.dmfa.latent() {
            return Err(dmfa_core::Error::Shape(format!("{} parameter images", files.len())));
        }
        for f in &files {
            if pnm_dims(f)? != (1, shape.height, shape.width) {
                return Err(dmfa_core::Error::Shape(format!("{} has the wrong shape", f.display())));
            }
        }
        let mut d_missing = Vec::new();
        for chunk in samples.chunks(64) {
            let refs: Vec<&MaskedSample> = chunk.iter().collect();
            for (g, s) in run.dmfa.forward_batch(&refs)?.iter().zip(chunk) {
                d_missing.extend(s.missing_indices().iter().map(|&i| g.noise()[i] as f64));
            }
        }
        d_missing.sort_by(f64::total_cmp);
        let median = d_missing[d_missing.len() / 2];
        Ok((
            format!(
                "grid {}x{} px ({} rows x {} cols), {} parameter images of {}x{} in {}",
                layout.height,
                layout.width,
                layout.rows,
                layout.cols,
                files.len(),
                shape.height,
                shape.width,
                dir.display()
            ),
            median,
        ))
    };
    match figures() {
        Ok((detail, median)) => vec![
            verdict(true, detail),
            Outcome {
                status: if median < 0.05 { Status::Pass } else { Status::Flag },
                detail: format!("median noise variance over missing pixels {median:.4} (flag threshold 0.05)"),
            },
        ],
        Err(e) => vec![failed(e)],
    }
}

fn c7_determinism() -> Outcome {
    let run = || -> dmfa_core::Result<Outcome> {
        let train = load_idx(data_path("mnist-subset-train-images-idx3-ubyte.gz"))?.take(384);
        let test = load_idx(data_path("mnist-subset-test-images-idx3-ubyte.gz"))?.take(100);
        let config = TrainConfig {
            lr: 1e-3,
            epochs: 2,
            batch: 32,
            seed: 3,
            patch: MNIST_PATCH,
            widths: Some(vec![8, 16]),
            ..TrainConfig::default()
        };
        let key = |log: &[EpochLog]| {
            log.iter()
                .map(|r| (r.epoch, r.mean_loss.to_bits(), r.mean_nll.to_bits(), r.mode_switch))
                .collect::<Vec<_>>()
        };
        let a = train_dmfa(&train, &config)?;
        let b = train_dmfa(&train, &config)?;
        let (ma, mb) = (
            evaluate_dmfa(&a.net, &test, MNIST_PATCH, 0)?,
            evaluate_dmfa(&b.net, &test, MNIST_PATCH, 0)?,
        );
        let identical = key(&a.log) == key(&b.log) && a.net.params() == b.net.params() && ma == mb;

        let dir = tempfile::tempdir().map_err(|e| dmfa_core::Error::io(Path::new("tempdir"), e))?;
        let mut state = TrainState::init(&train, &config)?;
        let mut log = run_epochs(&train, &config, &mut state, 1, None, &mut |_| Ok(()))?;
        let path = dir.path().join("resume.dmfa");
        state.save(&path, &config)?;
        let (mut resumed, stored) = TrainState::load(&path)?;
        log.extend(run_epochs(&train, &stored, &mut resumed, 2, None, &mut |_| Ok(()))?);
        let mr = evaluate_dmfa(&resumed.net, &test, MNIST_PATCH, 0)?;
        let log_gap = log
            .iter()
            .zip(&a.log)
            .map(|(x, y)| (x.mean_nll - y.mean_nll).abs())
            .fold(0.0, f64::max);
        let metric_gap = (mr.mean_nll - ma.mean_nll).abs();
        Ok(verdict(
            identical && log_gap <= 1e-4 && metric_gap <= 1e-4,
            format!(
                "two runs bit-identical: {identical}; resume gap train NLL {log_gap:.1e}, test NLL {metric_gap:.1e} (tol 1e-4)"
            ),
        ))
    };
    run().unwrap_or_else(failed)
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).map(|a| a.to_lowercase()).collect();
    let wants = |id: &str| selected.is_empty() || selected.iter().any(|s| s == id);
    let skip_mnist = std::env::var("DMFA_ACCEPTANCE_SKIP_MNIST").is_ok_and(|v| v == "1");

    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut report = |id: &'static str, name: &'static str, o: Outcome| {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Flag => "FLAG",
            Status::Skip => "SKIP",
        };
        println!("{tag} {id} {name}: {}", o.detail);
        results.push((id, name, o));
    };

    if wants("c1") {
        report("C1", "math oracles", c1_math_oracles());
    }
    if wants("c2") {
        report("C2", "chain rule", c2_chain_rule());
    }
    if wants("c3") {
        report("C3", "gradient checks", c3_gradients());
    }
    if wants("c4") {
        report("C4", "restriction invariance", c4_restriction_invariance());
    }
    if wants("c5") {
        report("C5", "synthetic end-to-end", c5_synthetic());
    }
    if wants("c6") || wants("c8") {
        if skip_mnist {
            let skipped = || Outcome {
                status: Status::Skip,
                detail: "DMFA_ACCEPTANCE_SKIP_MNIST=1".into(),
            };
            report("C6", "MNIST ordering", skipped());
            report("C8", "figures", skipped());
        } else {
            match mnist_run() {
                Ok((run, note)) => {
                    report("C6", "MNIST ordering", c6_ordering(&run, &note));
                    let mut parts = c8_figures(&run).into_iter();
                    report("C8", "figures", parts.next().expect("figure outcome"));
                    if let Some(flag) = parts.next() {
                        report("C8", "noise magnitude", flag);
                    }
                }
                Err(e) => {
                    report("C6", "MNIST ordering", failed(&e));
                    report("C8", "figures", failed(&e));
                }
            }
        }
    }
    if wants("c7") {
        report("C7", "determinism and resume", c7_determinism());
    }

    let failures = results.iter().filter(|r| r.2.status == Status::Fail).count();
    println!("acceptance: {} checks, {failures} failed", results.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
