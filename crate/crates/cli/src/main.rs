use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use image::GrayImage;
use serde_json::json;

use velvet_core::harness::data::split_validation;
use velvet_core::harness::{
    attention_maps, eval_retrieval, load_samples, prep_dataset, synth_dataset, write_synth, Checkpoint, MetricsLog,
    RunConfig, Trainer,
};
use velvet_core::report_prep::Vocabulary;
use velvet_core::vision::preprocess::{PrepConfig, DEFAULT_SIDE};
use velvet_core::vision::read_exclusion_list;

#[derive(Parser)]
#[command(name = "velvet", version, about = "3D scan / report vision-language pre-training")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic volumes and templated reports.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Edge length of the generated cubes.
        #[arg(long, default_value_t = DEFAULT_SIDE)]
        side: usize,
    },
    /// Filter raw scans and resample them to cubes.
    Prep {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// File with one scan id per line to drop.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SIDE)]
        side: usize,
    },
    /// Train from a JSON run config; checkpoints and metrics go to --ckpt.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from <ckpt>/last.ckpt when present.
        #[arg(long)]
        resume: bool,
    },
    /// Recall@K in both directions on a prepared dataset; prints JSON.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Dump final-layer text attention per head as CSV and PNG.
    InspectAttn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Plain-text report.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per attention cell in the PNG.
        #[arg(long, default_value_t = 8)]
        scale: u32,
    },
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Command::Synth { n, seed, out, side } => {
            let samples = synth_dataset(n, seed, side)?;
            write_synth(&out, &samples)?;
            println!("{}", json!({ "written": samples.len(), "out": out }));
        }
        Command::Prep { input, out, exclude, side } => {
            let exclude = match exclude {
                Some(p) => read_exclusion_list(&p).with_context(|| format!("reading {}", p.display()))?,
                None => HashSet::new(),
            };
            let summary = prep_dataset(&input, &out, &exclude, &PrepConfig { side, ..PrepConfig::default() })?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Pretrain { config, data, ckpt, resume } => pretrain(&config, &data, &ckpt, resume)?,
        Command::EvalRetrieval { ckpt, data, k, batch } => {
            if k.is_empty() || k.contains(&0) {
                bail!("--k needs positive ranks");
            }
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.header.config;
            let model = ck.model()?;
            let samples = load_samples(&data, &model.vocab, &cfg.caps(), cfg.volume_side)?;
            let report = eval_retrieval(&model, &samples, &k, batch)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::InspectAttn { ckpt, report, out, scale } => {
            let ck = Checkpoint::load(&ckpt)?;
            let model = ck.model()?;
            let text = std::fs::read_to_string(&report)?;
            let maps = attention_maps(&model, &text, &ck.header.config.caps())?;
            let csvs = maps.write_csvs(&out)?;
            let n = maps.len() as u32;
            for h in 0..maps.heads.len() {
                let gray = maps.head_gray(h);
                let img = GrayImage::from_fn(n * scale, n * scale, |x, y| {
                    image::Luma([gray[((y / scale) * n + x / scale) as usize]])
                });
                img.save(out.join(format!("head{h}.png")))?;
            }
            println!("{}", json!({ "tokens": maps.tokens, "heads": maps.heads.len(), "csv": csvs }));
        }
    }
    Ok(())
}

fn pretrain(config: &Path, data: &Path, ckpt: &Path, resume: bool) -> Result<()> {
    let cfg = RunConfig::from_file(config).with_context(|| format!("loading {}", config.display()))?;
    std::fs::create_dir_all(ckpt)?;
    let last = ckpt.join("last.ckpt");
    let mut trainer = if resume && last.exists() {
        let ck = Checkpoint::load(&last)?;
        let c = &ck.header.config;
        let samples = load_samples(data, &ck.vocab()?, &c.caps(), c.volume_side)?;
        let (train, val) = split_validation(samples, c.val_fraction, c.seed);
        Trainer::from_checkpoint(&ck, train, val)?
    } else {
        let vocab = Vocabulary::default_vocab();
        let samples = load_samples(data, &vocab, &cfg.caps(), cfg.volume_side)?;
        let (train, val) = split_validation(samples, cfg.val_fraction, cfg.seed);
        Trainer::new(cfg, vocab, train, val)?
    };
    let mut metrics = MetricsLog::open(&ckpt.join("metrics.csv"))?;
    let every = trainer.cfg.log_every.max(1);
    let trace = trainer.run(Some(ckpt), Some(&mut metrics), |step, b| {
        if step % every == 0 {
            eprintln!("step {step} total {:.5}", b.total);
        }
    })?;
    println!(
        "{}",
        json!({
            "steps": trainer.state.step,
            "final_total": trace.last().map(|b| b.total),
            "best_val": trainer.state.best_val,
            "metrics": metrics.path(),
        })
    );
    Ok(())
}
