//! Acceptance run: one line per criterion, nonzero exit if any gating
//! criterion fails.
//!
//! Set `SDMAMBA_INDIAN_PINES` to a converted `.hsc` cube to also run the
//! optional real-data check.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use common::*;
use rand::Rng;
use sdmamba::cli::{execute, sha256_hex, Cli};
use sdmamba::data::{extract_batch, load_cube, normalize, stratified_split, HsiCube};
use sdmamba::mamba::scan_values;
use sdmamba::model::{read_checkpoint, write_checkpoint, Mode, SdmambaConfig, SdmambaModel};
use sdmamba::sds::sparse_deformable_selection;
use sdmamba::tensor::{Tape, Tensor};
use sdmamba::train::{count_flops, evaluate, lambda_sweep, sweep_table, train, EvalReport, SWEEP_LAMBDAS};
use sdmamba::Error;

struct Outcome {
    pass: bool,
    detail: String,
    /// Everything the criterion produced, for the determinism rerun.
    artifact: Vec<u8>,
}

fn outcome(pass: bool, detail: String, artifact: impl Into<Vec<u8>>) -> Outcome {
    Outcome {
        pass,
        detail,
        artifact: artifact.into(),
    }
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sds_oracle() -> Outcome {
    let mut r = rng(2);
    let mut artifact = Vec::new();
    let mut mismatches = Vec::new();
    for case in 0..200 {
        let n = r.gen_range(1..=12);
        let d = r.gen_range(1..=4);
        let tokens: Vec<Vec<i64>> = (0..n)
            .map(|_| (0..d).map(|_| r.gen_range(-3..=3)).collect())
            .collect();
        let anchor = r.gen_range(0..n);
        let twentieths = r.gen_range(1..=20);
        let flat = tokens.iter().flatten().map(|&v| v as f32).collect();
        let t = Tensor::new(&[n, d], flat).unwrap();
        let got = sparse_deformable_selection(&t, anchor, twentieths as f64 / 20.0).unwrap();
        if got.indices != brute_force_selection(&tokens, anchor, twentieths) {
            mismatches.push(case);
        }
        artifact.extend(got.indices.iter().flat_map(|&i| (i as u32).to_le_bytes()));
    }
    outcome(
        mismatches.is_empty(),
        format!("200 instances, {} mismatches {:?}", mismatches.len(), mismatches),
        artifact,
    )
}

fn gradient_suite() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    let mut artifact = String::new();
    let mut worst = ("", 0.0f64);
    for (name, r) in primitive_suite() {
        pass &= r.checked > 0 && r.max_rel <= 1e-3;
        if r.max_rel >= worst.1 {
            worst = (name, r.max_rel);
        }
        if r.max_rel > 1e-3 {
            detail.push(format!("{name} {:.2e}", r.max_rel));
        }
        artifact += &format!("{name} {} {:e} {:e}\n", r.checked, r.max_rel, r.max_raw_rel);
    }
    let model = SdmambaModel::new(small_config()).unwrap();
    let batch = extract_batch(&synthetic_cube(), &[(3, 4), (12, 9)], 5).unwrap();
    let (net, flips) = check_network(&model, &batch, &[0, 2], 24, 5);
    pass &= net.checked >= 20 && net.max_rel <= 2e-2;
    artifact += &format!("network {} {:e} {:e} {flips}\n", net.checked, net.max_rel, net.max_raw_rel);
    detail.insert(
        0,
        format!(
            "primitives worst {} {:.1e} (tol 1e-3), network {:.1e} over {} params (tol 2e-2), {flips} resampled",
            worst.0, worst.1, net.max_rel, net.checked
        ),
    );
    outcome(pass, detail.join("; "), artifact)
}

fn scan_oracle() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let mut artifact = Vec::new();
    for _ in 0..100 {
        let len = r.gen_range(1..=8);
        let channels = r.gen_range(1..=4);
        let state = r.gen_range(1..=4);
        let case = ScanCase::random(&mut r, len, channels, state);
        let [u, delta, a, b, c, d] = case.tensors();
        let y = scan_values(&u, &delta, &a, &b, &c, &d).unwrap().y;
        for (got, want) in y.data().iter().zip(case.reference().iter().flatten()) {
            worst = worst.max((*got as f64 - want).abs());
        }
        artifact.extend(f32_bytes(y.data()));
    }
    let ln2 = std::f32::consts::LN_2;
    let t = |shape: &[usize], v: &[f32]| Tensor::new(shape, v.to_vec()).unwrap();
    let worked = scan_values(
        &t(&[2, 1], &[1.0, 1.0]),
        &t(&[2, 1], &[ln2, ln2]),
        &t(&[1, 1], &[-1.0]),
        &t(&[2, 1], &[1.0, 1.0]),
        &t(&[2, 1], &[1.0, 1.0]),
        &t(&[1], &[0.0]),
    )
    .unwrap()
    .y;
    let ln2 = std::f64::consts::LN_2;
    let worked_err = (worked.data()[0] as f64 - ln2)
        .abs()
        .max((worked.data()[1] as f64 - 1.5 * ln2).abs());
    artifact.extend(f32_bytes(worked.data()));
    outcome(
        worst <= 1e-5 && worked_err <= 1e-6,
        format!("100 cases max |err| {worst:.1e} (tol 1e-5), worked example {worked_err:.1e} (tol 1e-6)"),
        artifact,
    )
}

fn flop_claim() -> Outcome {
    let mut pass = true;
    let mut artifact = String::new();
    let mut notes = Vec::new();
    let configs = [
        SdmambaConfig {
            patch_size: 9,
            ..Default::default()
        },
        SdmambaConfig::default(),
        small_config(),
    ];
    for cfg in &configs {
        let sweep = lambda_sweep(cfg, &SWEEP_LAMBDAS);
        for r in &sweep {
            if r.lambda_spatial < 1.0 {
                pass &= r.sparse_flops() < r.dense_flops();
            }
        }
        // Sparse cost may only grow with λ, so the saving never grows.
        for w in sweep.windows(2) {
            pass &= w[0].sparse_flops() <= w[1].sparse_flops();
            pass &= w[0].dense_flops() - w[0].sparse_flops() >= w[1].dense_flops() - w[1].sparse_flops();
        }
        artifact += &sweep_table(&sweep);
    }
    for cfg in [configs[0].clone(), configs[2].clone()] {
        let model = SdmambaModel::new(cfg.clone()).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let p = cfg.patch_size;
        let x = Tensor::uniform(&[1, cfg.in_bands, p, p], 1.0, &mut rng(1));
        let stats = model.forward(&bound, tape.constant(x), Mode::Eval).unwrap().stats;
        let report = count_flops(&cfg);
        pass &= stats.mamba_macs == report.sparse.mamba() && stats.total_macs == report.sparse.total();
        notes.push(format!(
            "patch {p}: mamba MACs {} counted / {} analytic",
            stats.mamba_macs,
            report.sparse.mamba()
        ));
        artifact += &format!("{} {}\n", stats.mamba_macs, stats.total_macs);
    }
    let r = count_flops(&SdmambaConfig {
        patch_size: 9,
        ..Default::default()
    });
    notes.push(format!(
        "λ=0.3 {:.2}M vs dense {:.2}M FLOPs",
        r.sparse_flops() as f64 / 1e6,
        r.dense_flops() as f64 / 1e6
    ));
    outcome(pass, notes.join(", "), artifact)
}

fn metrics() -> Outcome {
    let fixture = EvalReport::from_predictions(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
    let mut r = rng(6);
    let truth: Vec<usize> = (0..10_000).map(|_| r.gen_range(0..5)).collect();
    let pred: Vec<usize> = (0..10_000).map(|_| r.gen_range(0..5)).collect();
    let random = EvalReport::from_predictions(&truth, &pred, 5);
    let pass = fixture.oa == 0.75
        && (fixture.aa - 0.8333).abs() <= 1e-4
        && (fixture.kappa - 0.5).abs() <= 1e-4
        && random.kappa.abs() < 0.05;
    outcome(
        pass,
        format!(
            "fixture OA {} AA {:.4} kappa {:.4}; random kappa {:+.4}",
            fixture.oa, fixture.aa, fixture.kappa, random.kappa
        ),
        format!("{fixture}\n{random}\n{:e}\n", random.kappa),
    )
}

fn end_to_end() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let cube = synthetic_cube();
        let split = reduced_split(&cube);
        let out = train(SdmambaModel::new(reduced_config()).unwrap(), &cube, &split).unwrap();
        let report = evaluate(&out.model, &cube, &split.test).unwrap();
        let mut artifact = write_checkpoint(&out.model);
        artifact.extend(out.history.to_text().bytes());
        artifact.extend(report.to_string().bytes());
        outcome(
            report.oa >= 0.95,
            format!(
                "test OA {:.4} (min 0.95) on {} pixels, best epoch {}, single thread",
                report.oa,
                split.test.len(),
                out.best_epoch
            ),
            artifact,
        )
    })
}

fn cli(args: &[&str]) -> String {
    let mut full = vec!["sdmamba"];
    full.extend_from_slice(args);
    execute(Cli::try_parse_from(full).unwrap()).unwrap()
}

/// Every file of a synth → train → export run, manifest timestamp removed.
fn cli_artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let out = root.to_str().unwrap();
    let cube = cli(&["synth", "--out-dir", out]).trim().to_string();
    let trained = cli(&[
        "train", "--cube", &cube, "--out-dir", out, "--patch", "7", "--hidden", "32", "--lr", "0.001", "--batch", "8",
        "--epochs", "3", "--seed", "7",
    ]);
    let dir = PathBuf::from(trained.lines().next().unwrap().trim_start_matches("run directory "));
    let ckpt = dir.join("model.sdmb");
    cli(&["export", "--checkpoint", ckpt.to_str().unwrap(), "--cube", &cube, "--out-dir", out]);
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = std::fs::read(&path).unwrap();
            if path.ends_with("manifest.txt") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .filter(|l| !l.starts_with("created"))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            files.push((path.strip_prefix(root).unwrap().display().to_string(), bytes));
        }
    }
    files.sort();
    files
}

fn determinism(first: &[(u32, String)]) -> Outcome {
    let reruns: [(u32, fn() -> Outcome); 6] = [
        (2, sds_oracle),
        (3, gradient_suite),
        (4, scan_oracle),
        (5, flop_claim),
        (6, metrics),
        (7, end_to_end),
    ];
    let mut differing: Vec<String> = reruns
        .iter()
        .filter(|(n, f)| first.iter().find(|(m, _)| m == n).map(|(_, d)| d) != Some(&sha256_hex(&f().artifact)))
        .map(|(n, _)| format!("criterion {n}"))
        .collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (run_a, run_b) = (cli_artifacts(a.path()), cli_artifacts(b.path()));
    if run_a != run_b {
        differing.push("cli run".into());
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("criteria 2-7 and {} cli files byte-identical on rerun", run_a.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
        Vec::new(),
    )
}

fn mutate(bytes: &[u8], r: &mut impl Rng) -> Vec<u8> {
    let mut out = bytes.to_vec();
    for _ in 0..r.gen_range(1..=4) {
        let i = r.gen_range(0..out.len());
        out[i] = r.gen();
    }
    out
}

fn survives<T>(f: impl FnOnce() -> sdmamba::Result<T>) -> Option<sdmamba::Result<T>> {
    catch_unwind(AssertUnwindSafe(f)).ok()
}

fn serialization() -> Outcome {
    let mut cube = synthetic_cube();
    cube.class_names = vec!["alfalfa".into(), "corn".into(), "grass".into()];
    let cube_bytes = cube.to_bytes();
    let cube_exact = HsiCube::from_bytes(&cube_bytes).map(|c| c == cube && c.to_bytes() == cube_bytes).unwrap_or(false);

    let model = SdmambaModel::new(small_config()).unwrap();
    let ckpt = write_checkpoint(&model);
    let ckpt_exact = read_checkpoint(&ckpt).map(|m| m == model && write_checkpoint(&m) == ckpt).unwrap_or(false);

    std::panic::set_hook(Box::new(|_| {}));
    let mut r = rng(10);
    let (mut crashes, mut silent_truncations) = (0, 0);
    for _ in 0..500 {
        for bytes in [&cube_bytes, &ckpt] {
            let cut = r.gen_range(0..bytes.len());
            match (survives(|| HsiCube::from_bytes(&bytes[..cut])), survives(|| read_checkpoint(&bytes[..cut]))) {
                (Some(a), Some(b)) => {
                    let is_cube = std::ptr::eq(bytes, &cube_bytes);
                    if (is_cube && a.is_ok()) || (!is_cube && b.is_ok()) {
                        silent_truncations += 1;
                    }
                }
                _ => crashes += 1,
            }
            let bad = mutate(bytes, &mut r);
            if survives(|| HsiCube::from_bytes(&bad)).is_none() || survives(|| read_checkpoint(&bad)).is_none() {
                crashes += 1;
            }
        }
    }
    let _ = std::panic::take_hook();
    let structured = matches!(HsiCube::from_bytes(b"HSC1\x01"), Err(Error::Format { .. }))
        && matches!(read_checkpoint(b"XXXX"), Err(Error::Format { .. }));
    outcome(
        cube_exact && ckpt_exact && crashes == 0 && silent_truncations == 0 && structured,
        format!(
            "round trips exact: cube {cube_exact}, checkpoint {ckpt_exact}; 2000 corrupted inputs, {crashes} crashes, {silent_truncations} truncations accepted"
        ),
        Vec::new(),
    )
}

fn indian_pines(path: &str) -> Outcome {
    let cube = normalize(&load_cube(path).unwrap());
    let cfg = SdmambaConfig {
        patch_size: 9,
        hidden_dim: 64,
        epochs: 25,
        in_bands: cube.bands,
        num_classes: cube.num_classes,
        ..Default::default()
    };
    let split = stratified_split(&cube, 0.1, 0.1, cfg.seed).unwrap();
    let out = train(SdmambaModel::new(cfg).unwrap(), &cube, &split).unwrap();
    let report = evaluate(&out.model, &cube, &split.test).unwrap();
    outcome(
        report.oa >= 0.85,
        format!("test OA {:.4} (target 0.85, not gating)", report.oa),
        Vec::new(),
    )
}

fn report(n: u32, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (bool, Outcome) {
    let start = Instant::now();
    let out = f();
    let took = start.elapsed();
    let in_time = limit.is_none_or(|l| took < l);
    let pass = out.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
    println!(
        "criterion {n}: {} {name}: {} [{:.2}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    (pass, out)
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    println!("criterion 1: SKIP full-scale benchmark accuracy is out of desk-scale budget; criteria 2-10 stand in");
    let mut all = true;
    let mut digests = Vec::new();
    let gating: [(u32, &str, Duration, fn() -> Outcome); 6] = [
        (2, "sparse selection matches brute force", secs(1), sds_oracle),
        (3, "gradients match finite differences", secs(120), gradient_suite),
        (4, "selective scan matches reference recurrence", secs(10), scan_oracle),
        (5, "sparse sequencing cuts FLOPs", secs(5), flop_claim),
        (6, "OA/AA/kappa", secs(5), metrics),
        (7, "synthetic end to end", secs(300), end_to_end),
    ];
    for (n, name, limit, f) in gating {
        let (pass, out) = report(n, name, Some(limit), f);
        all &= pass;
        digests.push((n, sha256_hex(&out.artifact)));
    }
    match std::env::var("SDMAMBA_INDIAN_PINES") {
        Ok(path) => {
            report(8, "Indian Pines stretch (not gating)", None, || indian_pines(&path));
        }
        Err(_) => println!("criterion 8: SKIP optional real-data check; set SDMAMBA_INDIAN_PINES to a converted cube"),
    }
    all &= report(9, "determinism", None, || determinism(&digests)).0;
    all &= report(10, "serialization", None, serialization).0;
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
