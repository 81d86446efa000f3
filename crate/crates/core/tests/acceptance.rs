//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::Outcome;
use msformer_core::autodiff::Graph;
use msformer_core::config::TrainConfig;
use msformer_core::data::{generate_patch_labels, load_dataset, synth_dataset, BiTemporalSample};
use msformer_core::model::{batch_images, MsFormer};
use msformer_core::runner::{apply_row, evaluate, find_row, Trainer, ABLATION_ROWS};
use msformer_core::supervision::{supervision_losses, Targets};

/// Training length of each monotonicity run (the end-to-end run uses 2000).
const MONOTONICITY_ITERATIONS: u64 = 1000;
const MONOTONICITY_SEEDS: [u64; 3] = [0, 1, 2];
const MONOTONICITY_PATCHES: [usize; 3] = [8, 16, 32];
const MONOTONICITY_TOLERANCE: f64 = 0.03;

struct Data {
    train: Vec<BiTemporalSample>,
    test: Vec<BiTemporalSample>,
}

fn benchmark_data() -> Result<Data, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    synth_dataset(dir.path(), 200, 64, 0).map_err(|e| e.to_string())?;
    let train = load_dataset(dir.path(), "train").map_err(|e| e.to_string())?;
    let test = load_dataset(dir.path(), "test").map_err(|e| e.to_string())?;
    Ok(Data { train, test })
}

fn e2e_config() -> TrainConfig {
    let mut cfg = TrainConfig { patch_h: 8, patch_w: 8, seed: 0, log_every: 0, ..TrainConfig::default() };
    cfg.model.channels = 64;
    cfg.model.memory_len = 32;
    cfg.model.blocks = 2;
    cfg.model.backbone_width = 16;
    cfg.optim.max_iteration = 2000;
    cfg.optim.batch_size = 8;
    cfg
}

fn train_and_score(cfg: &TrainConfig, data: &Data) -> Result<(f64, f64), String> {
    let mut t = Trainer::new(cfg.clone(), data.train.clone()).map_err(|e| e.to_string())?;
    t.run(cfg.optim.max_iteration, None).map_err(|e| e.to_string())?;
    let r = evaluate(&t.model, &t.store, cfg, &data.test, false).map_err(|e| e.to_string())?;
    Ok((r.f1, r.kappa))
}

fn end_to_end(data: &Data, pss_f1: &mut Option<f64>) -> Outcome {
    let (f1, kappa) = train_and_score(&e2e_config(), data)?;
    *pss_f1 = Some(f1);
    let detail = format!("F1 {f1:.4} (>= 0.80), kappa {kappa:.4} (>= 0.75)");
    if f1 >= 0.80 && kappa >= 0.75 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_matrix(data: &Data, pss_f1: Option<f64>) -> Outcome {
    let base = e2e_config();
    let batch: Vec<_> = data.train.iter().take(base.optim.batch_size).collect();
    for row in &ABLATION_ROWS[1..] {
        let cfg = apply_row(&base, *row);
        let fail = |e: String| format!("{} {}: {e}", row.id, row.name);
        let (model, store) = MsFormer::new::<f32>(&cfg.model, &cfg.ablation, cfg.seed).map_err(|e| fail(e.to_string()))?;
        let (a, b) = batch_images::<f32>(&batch, cfg.data.mean, cfg.data.std).map_err(|e| fail(e.to_string()))?;
        let grids: Vec<_> = batch
            .iter()
            .map(|s| generate_patch_labels(s.pixel_mask.as_ref().unwrap(), cfg.patch_h, cfg.patch_w).map(|l| l.grid))
            .collect::<Result<_, _>>()
            .map_err(|e| fail(e.to_string()))?;
        let refs: Vec<_> = grids.iter().collect();
        let targets = Targets::from_grids(&refs, cfg.patch_h, cfg.patch_w).map_err(|e| fail(e.to_string()))?;
        let mut g = Graph::new();
        let x1 = g.constant(a);
        let x2 = g.constant(b);
        let out = model.forward(&mut g, &store, x1, x2, cfg.patch_h, cfg.patch_w, true).map_err(|e| fail(e.to_string()))?;
        let loss = supervision_losses(&mut g, out.change_map, &out.aux, &targets, cfg.patch_h, cfg.patch_w, &cfg.loss, &cfg.ablation)
            .map_err(|e| fail(e.to_string()))?;
        if !g.value(loss.total).item().is_finite() {
            return Err(fail("non-finite loss".into()));
        }
        g.backward(loss.total).map_err(|e| fail(e.to_string()))?;
    }
    let pss = pss_f1.ok_or("default PSS run unavailable")?;
    let direct_cfg = apply_row(&base, find_row("#10").map_err(|e| e.to_string())?);
    let (direct, _) = train_and_score(&direct_cfg, data)?;
    let detail = format!("#02-#10 forward+backward ok; Directly sup F1 {direct:.4} vs PSS F1 {pss:.4}");
    if direct < pss {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn monotonicity(data: &Data) -> Outcome {
    let mut means = Vec::new();
    let mut cells = Vec::new();
    for &p in &MONOTONICITY_PATCHES {
        let mut sum = 0.0;
        for &seed in &MONOTONICITY_SEEDS {
            let mut cfg = e2e_config();
            cfg.patch_h = p;
            cfg.patch_w = p;
            cfg.seed = seed;
            cfg.optim.max_iteration = MONOTONICITY_ITERATIONS;
            let (f1, _) = train_and_score(&cfg, data)?;
            cells.push(format!("p{p}/s{seed}={f1:.3}"));
            sum += f1;
        }
        means.push(sum / MONOTONICITY_SEEDS.len() as f64);
    }
    let holds = means.windows(2).all(|w| w[0] >= w[1] - MONOTONICITY_TOLERANCE);
    let detail = format!(
        "mean F1 patch 8/16/32 = {:.4}/{:.4}/{:.4} ({})",
        means[0],
        means[1],
        means[2],
        cells.join(" ")
    );
    if holds {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(name: &str, start: Instant, outcome: &Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => println!("[PASS] {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("[FAIL] {name}: {d} [{secs:.1}s]"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut all = true;
    let quick: [(&str, fn() -> Outcome); 4] = [
        ("oracle equivalence suite", common::oracle_equivalence_suite),
        ("loss oracle suite", common::loss_oracle_suite),
        ("attention invariant suite", common::attention_invariant_suite),
        ("gradient check (C=16, N_m=8, 1 block, 64x64)", common::gradient_check_suite),
    ];
    for (name, f) in quick {
        let t = Instant::now();
        all &= report(name, t, &f());
    }

    let t = Instant::now();
    let data = benchmark_data();
    let mut pss_f1 = None;
    let outcome = data.as_ref().map_err(Clone::clone).and_then(|d| end_to_end(d, &mut pss_f1));
    all &= report("synthetic end-to-end (patch 8, 2000 iterations)", t, &outcome);

    let t = Instant::now();
    let outcome = data.as_ref().map_err(Clone::clone).and_then(|d| ablation_matrix(d, pss_f1));
    all &= report("ablation matrix", t, &outcome);

    let t = Instant::now();
    let outcome = data.as_ref().map_err(Clone::clone).and_then(monotonicity);
    all &= report("patch-size monotonicity (3 seeds)", t, &outcome);

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria FAILED");
        ExitCode::FAILURE
    }
}
