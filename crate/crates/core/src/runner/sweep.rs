//! Ablation rows and the patch-size × ablation sweep table.

use std::fmt::Write;

use crate::config::TrainConfig;
use crate::data::BiTemporalSample;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::runner::evaluate::evaluate;
use crate::runner::train::Trainer;

/// One row of the ablation table: `#01` is the full model, `#02`–`#10` each
/// change exactly one setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub id: &'static str,
    pub name: &'static str,
}

pub const ABLATION_ROWS: [AblationRow; 10] = [
    AblationRow { id: "#01", name: "MS-Former" },
    AblationRow { id: "#02", name: "w/o BAB" },
    AblationRow { id: "#03", name: "N_m=64" },
    AblationRow { id: "#04", name: "N_m=192" },
    AblationRow { id: "#05", name: "w/o P2M" },
    AblationRow { id: "#06", name: "w/o MP" },
    AblationRow { id: "#07", name: "w/o AP" },
    AblationRow { id: "#08", name: "PSS w/o L1" },
    AblationRow { id: "#09", name: "PSS w/o BCE" },
    AblationRow { id: "#10", name: "Directly sup" },
];

pub fn find_row(id: &str) -> Result<AblationRow> {
    let want = if id.starts_with('#') { id.to_string() } else { format!("#{id:0>2}") };
    ABLATION_ROWS
        .iter()
        .copied()
        .find(|r| r.id == want)
        .ok_or_else(|| Error::Config(format!("unknown ablation row {id}")))
}

/// `base` with the row's single change applied.
pub fn apply_row(base: &TrainConfig, row: AblationRow) -> TrainConfig {
    let mut c = base.clone();
    let a = &mut c.ablation;
    match row.id {
        "#02" => a.no_bab = true,
        "#03" => c.model.memory_len = 64,
        "#04" => c.model.memory_len = 192,
        "#05" => a.no_p2m = true,
        "#06" => a.no_mp = true,
        "#07" => a.no_ap = true,
        "#08" => a.no_upcl = true,
        "#09" => a.no_pcl = true,
        "#10" => a.direct_sup = true,
        _ => {}
    }
    c
}

/// Trains and evaluates every `(row, patch size)` pair. Returns the CSV text:
/// row id, name, then κ / IoU / F1 per patch size.
pub fn run_sweep(
    base: &TrainConfig,
    rows: &[AblationRow],
    patch_sizes: &[usize],
    train: &[BiTemporalSample],
    test: &[BiTemporalSample],
    mut on_result: impl FnMut(AblationRow, usize, &MetricsReport),
) -> Result<String> {
    let mut csv = String::from("id,name");
    for p in patch_sizes {
        write!(csv, ",kappa_{p},iou_{p},f1_{p}").unwrap();
    }
    csv.push('\n');
    for &row in rows {
        write!(csv, "{},{}", row.id, row.name).unwrap();
        for &p in patch_sizes {
            let mut cfg = apply_row(base, row);
            cfg.patch_h = p;
            cfg.patch_w = p;
            let mut trainer = Trainer::new(cfg.clone(), train.to_vec())?;
            trainer.run(cfg.optim.max_iteration, None)?;
            let report = evaluate(&trainer.model, &trainer.store, &cfg, test, false)?;
            on_result(row, p, &report);
            write!(csv, ",{:.4},{:.4},{:.4}", report.kappa, report.iou, report.f1).unwrap();
        }
        csv.push('\n');
    }
    Ok(csv)
}
