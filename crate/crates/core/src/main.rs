use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use msformer_core::config::TrainConfig;
use msformer_core::data::dataset::write_mask;
use msformer_core::data::{export_patch_labels, load_dataset, synth_dataset};
use msformer_core::metrics::{binarize, MetricsReport};
use msformer_core::model::MsFormer;
use msformer_core::runner::sweep::{find_row, ABLATION_ROWS};
use msformer_core::runner::train::final_checkpoint_path;
use msformer_core::runner::{apply_row, evaluate, predict_maps, run_sweep, Checkpoint, Trainer};

/// Weakly-supervised change detection from patch-level labels.
#[derive(Parser)]
#[command(name = "msformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export block-constant patch labels for one or more patch sizes.
    PrepareLabels {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Square patch sizes, e.g. 32,64,128,256.
        #[arg(long, value_delimiter = ',', required = true)]
        patch_sizes: Vec<usize>,
    },
    /// Generate a synthetic change dataset (80 % train, 20 % test).
    ///
    /// Each pair shares a smooth sinusoidal texture (amplitude 0.08). Unchanged
    /// objects appear in both frames; one to three rectangles (sides 10-26 px),
    /// discs (radius 6-13 px) or triangles (box 14-28 px), scaled by size/64,
    /// are inserted or removed. The second frame gets a brightness shift within
    /// ±0.05, both frames get Gaussian noise with σ 0.03, and 10 % of pairs
    /// contain no change.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset split.
    Train {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Directory for checkpoints and the resolved config.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint whose `encoder.backbone.*` tensors initialise the backbone.
        #[arg(long)]
        pretrained_backbone: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on a labelled split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Config the checkpoint must be compatible with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Score the ground-truth masks instead of model output.
        #[arg(long)]
        gt_as_prediction: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Append a CSV row (with header if the file is new).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write binarized change maps as 0/255 PNGs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train and evaluate ablation rows across patch sizes.
    Sweep {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        patch_sizes: Vec<usize>,
        /// Row ids such as 01,02,10; all rows when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Config file plus per-key overrides.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square patch size; sets both patch_h and patch_w.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    patch_h: Option<usize>,
    #[arg(long)]
    patch_w: Option<usize>,
    #[arg(long)]
    memory_len: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    backbone_width: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pooling_ratios: Option<Vec<usize>>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    max_iteration: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Apply one ablation row (01-10).
    #[arg(long)]
    ablation_row: Option<String>,
    #[arg(long)]
    no_bab: bool,
    #[arg(long)]
    no_p2m: bool,
    #[arg(long)]
    no_mp: bool,
    #[arg(long)]
    no_ap: bool,
    #[arg(long)]
    no_pcl: bool,
    #[arg(long)]
    no_upcl: bool,
    #[arg(long)]
    direct_sup: bool,
    #[arg(long)]
    no_augment: bool,
}

impl Overrides {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(id) = &self.ablation_row {
            c = apply_row(&c, find_row(id)?);
        }
        if let Some(p) = self.patch_size {
            c.patch_h = p;
            c.patch_w = p;
        }
        set(&mut c.patch_h, self.patch_h);
        set(&mut c.patch_w, self.patch_w);
        set(&mut c.model.memory_len, self.memory_len);
        set(&mut c.model.blocks, self.blocks);
        set(&mut c.model.channels, self.channels);
        set(&mut c.model.backbone_width, self.backbone_width);
        set(&mut c.model.pooling_ratios, self.pooling_ratios.clone());
        set(&mut c.optim.lr0, self.lr0);
        set(&mut c.optim.power, self.power);
        set(&mut c.optim.max_iteration, self.max_iteration);
        set(&mut c.optim.batch_size, self.batch_size);
        set(&mut c.seed, self.seed);
        set(&mut c.threshold, self.threshold);
        let a = &mut c.ablation;
        a.no_bab |= self.no_bab;
        a.no_p2m |= self.no_p2m;
        a.no_mp |= self.no_mp;
        a.no_ap |= self.no_ap;
        a.no_pcl |= self.no_pcl;
        a.no_upcl |= self.no_upcl;
        a.direct_sup |= self.direct_sup;
        if self.no_augment {
            c.data.augment = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_model(checkpoint: &Path, threshold: Option<f64>) -> anyhow::Result<(TrainConfig, MsFormer, msformer_core::nn::ParamStore<f32>)> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let mut cfg = ckpt.header.config.clone();
    set(&mut cfg.threshold, threshold);
    cfg.validate()?;
    let (model, mut store) = MsFormer::new(&cfg.model, &cfg.ablation, cfg.seed)?;
    ckpt.restore_params(&mut store)?;
    Ok((cfg, model, store))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::PrepareLabels { root, split, patch_sizes } => {
            for p in patch_sizes {
                let dir = export_patch_labels(&root, &split, p, p)?;
                println!("{}", dir.display());
            }
        }
        Command::Synth { out, n, size, seed } => {
            synth_dataset(&out, n, size, seed)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Train { root, split, out, resume, pretrained_backbone, overrides } => {
            let cfg = overrides.resolve()?;
            let samples = load_dataset(&root, &split)?;
            info!("{} training pairs from {}", samples.len(), root.join(&split).display());
            let mut trainer = match &resume {
                Some(path) => Trainer::resume(cfg.clone(), &Checkpoint::load(path)?, samples)?,
                None => Trainer::new(cfg.clone(), samples)?,
            };
            if let Some(path) = &pretrained_backbone {
                if resume.is_some() {
                    bail!("--pretrained-backbone cannot be combined with --resume");
                }
                let n = Checkpoint::<f32>::load(path)?.restore_matching(&mut trainer.store, "encoder.backbone.")?;
                info!("loaded {n} backbone tensors from {}", path.display());
            }
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            trainer.run(cfg.optim.max_iteration, Some(&out))?;
            println!("{}", final_checkpoint_path(&out).display());
        }
        Command::Evaluate { checkpoint, root, split, config, threshold, gt_as_prediction, json, csv } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            if let Some(path) = &config {
                ckpt.check_compatible(&TrainConfig::load(path)?)?;
            }
            let (cfg, model, store) = load_model(&checkpoint, threshold)?;
            let samples = load_dataset(&root, &split)?;
            let mut report = evaluate(&model, &store, &cfg, &samples, gt_as_prediction)?;
            report.checkpoint = Some(checkpoint.display().to_string());
            match json {
                Some(path) => fs::write(&path, report.to_json()?)?,
                None => println!("{}", report.to_json()?),
            }
            if let Some(path) = csv {
                let mut text = if path.is_file() { fs::read_to_string(&path)? } else { format!("{}\n", MetricsReport::CSV_HEADER) };
                text.push_str(&report.to_csv_row());
                text.push('\n');
                fs::write(&path, text)?;
            }
        }
        Command::Predict { checkpoint, root, split, out, threshold } => {
            let (cfg, model, store) = load_model(&checkpoint, threshold)?;
            let samples = load_dataset(&root, &split)?;
            let maps = predict_maps(&model, &store, &cfg, &samples)?;
            fs::create_dir_all(&out)?;
            for (sample, map) in samples.iter().zip(&maps) {
                write_mask(&out.join(format!("{}.png", sample.id)), &binarize(map.values(), cfg.threshold)?)?;
            }
            println!("wrote {} maps to {}", maps.len(), out.display());
        }
        Command::Sweep { root, patch_sizes, rows, out, overrides } => {
            let base = overrides.resolve()?;
            let rows = if rows.is_empty() {
                ABLATION_ROWS.to_vec()
            } else {
                rows.iter().map(|r| find_row(r)).collect::<Result<_, _>>()?
            };
            let train = load_dataset(&root, "train")?;
            let test = load_dataset(&root, "test")?;
            let csv = run_sweep(&base, &rows, &patch_sizes, &train, &test, |row, p, r| {
                info!("{} {} patch {p}: kappa {:.4} iou {:.4} f1 {:.4}", row.id, row.name, r.kappa, r.iou, r.f1);
            })?;
            fs::write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
