use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vidnarr_core::experiments::{
    ablation_csv, arms_csv, mean_by, run_finetune, run_sampling_ablation, run_semi_sup_sweep, run_stages,
    run_temperature_ablation, sweep_csv, sweep_svg, ExperimentConfig, PipelineOutput, Stage,
};
use vidnarr_core::grammar::Grammar;
use vidnarr_core::rephraser::{Rephraser, RephraserConfig};
use vidnarr_core::training::Arm;

#[derive(Parser)]
#[command(name = "vidnarr", version, about = "Narration-augmented video-language pretraining on synthetic video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML); defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output root; overrides the config.
    #[arg(long, env = "VIDNARR_OUTPUT_ROOT")]
    out: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load_with_output(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = self.load()?;
        let Some(out) = cfg.output_dir.clone() else {
            bail!("no output directory: pass --out, set VIDNARR_OUTPUT_ROOT, or set output_dir in the config");
        };
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic videos.
    GenWorld(Common),
    /// Clean narrations and split train/test.
    Clean(Common),
    /// Keep annotations in every N-th chunk only.
    ChunkSubset {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        keep_every: usize,
    },
    /// Train the ground-truth-only dual encoder.
    TrainBaseline(Common),
    /// Pretrain the language model and fit the narrator.
    TrainNarrator(Common),
    /// Narrate labeled and unlabeled clips into the cache.
    CacheNarrations(Common),
    /// Build the rephrase cache, or paraphrase one sentence with --text.
    Rephrase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        text: Option<String>,
    },
    /// Train the augmented arms.
    TrainLavila(Common),
    /// Max-margin fine-tuning on the held-out videos.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        arm: ArmArg,
    },
    /// Evaluate every arm and write metric reports.
    Eval(Common),
    /// Annotation-budget sweep.
    SweepSemisup {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write an SVG plot next to the CSV.
        #[arg(long)]
        plot: bool,
    },
    /// Nucleus sampling versus beam search for narrator captions.
    AblateSampling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Rephrased/narrated temperature grid.
    AblateTemperature {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Pairs written as `tau_r:tau_n`.
        #[arg(long, value_delimiter = ',', default_value = "0.07:0.07,0.07:0.1,0.1:0.07")]
        taus: Vec<String>,
    },
    /// Print the effective config as TOML.
    PrintConfig(Common),
    /// Run the whole pipeline.
    Run {
        #[command(flatten)]
        common: Common,
        /// Validate the config and print the stage plan only.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ArmArg {
    Baseline,
    Rephraser,
    Recaption,
    All,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Baseline => Arm::Baseline,
            ArmArg::Rephraser => Arm::Rephraser,
            ArmArg::Recaption => Arm::Recaption,
            ArmArg::All => Arm::All,
        }
    }
}

fn print_stages(out: &PipelineOutput) {
    for s in &out.reused {
        println!("reused   {s}");
    }
    for s in &out.computed {
        println!("computed {s}");
    }
}

/// Print checks; true if all passed.
fn report_checks(out: &PipelineOutput) -> bool {
    for c in &out.checks {
        println!("[{}] {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    out.passed()
}

fn stage(common: &Common, until: Stage, mutate: impl FnOnce(&mut ExperimentConfig)) -> Result<bool> {
    let (mut cfg, _) = common.load_with_output()?;
    mutate(&mut cfg);
    let out = run_stages(&cfg, until)?;
    print_stages(&out);
    if let Some(sel) = out.narrator_selected {
        let h = &out.narrator_history;
        println!(
            "narrator: kept epoch {} (held-out acc {:.4}, ppl {:.4}; gates-at-zero ppl {:.4})",
            h[sel].epoch, h[sel].heldout_acc, h[sel].heldout_ppl, h[0].heldout_ppl
        );
    }
    if let Some((clips, nonempty, total)) = out.narration_stats {
        println!("narration cache: {clips} clips, {nonempty} with accepted captions, {total} captions");
    }
    if let Some(p) = out.narration_precision {
        println!("narration precision: {p:.4}");
    }
    if until == Stage::Eval {
        print!("{}", arms_csv(&out.reports));
    }
    Ok(report_checks(&out))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_taus(taus: &[String]) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|t| {
            let (a, b) = t.split_once(':').context("temperature pairs look like 0.07:0.1")?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenWorld(c) => stage(&c, Stage::World, |_| {}),
        Command::Clean(c) => stage(&c, Stage::Corpus, |_| {}),
        Command::ChunkSubset { common, keep_every } => stage(&common, Stage::Corpus, |cfg| cfg.corpus.keep_every = keep_every),
        Command::TrainBaseline(c) => stage(&c, Stage::Baseline, |_| {}),
        Command::TrainNarrator(c) => stage(&c, Stage::Narrator, |_| {}),
        Command::CacheNarrations(c) => stage(&c, Stage::NarrationCache, |_| {}),
        Command::Rephrase { common, text: Some(text) } => {
            let cfg = common.load()?;
            let r = Rephraser::new(Grammar::standard(), RephraserConfig { ..cfg.rephraser });
            for line in r.rephrase(&text) {
                println!("{line}");
            }
            Ok(true)
        }
        Command::Rephrase { common, text: None } => stage(&common, Stage::RephraseCache, |_| {}),
        Command::TrainLavila(c) => stage(&c, Stage::Train, |_| {}),
        Command::Eval(c) => stage(&c, Stage::Eval, |_| {}),
        Command::Finetune { common, arm } => {
            let (cfg, out) = common.load_with_output()?;
            let r = run_finetune(&cfg, arm.into())?;
            let csv = format!(
                "arm,zero_shot_map,finetuned_map,seed\n{},{:.6},{:.6},{}\n",
                Arm::from(arm).name(),
                r.0,
                r.1,
                cfg.seed
            );
            write(&out.join("metrics/finetune.csv"), &csv)?;
            print!("{csv}");
            Ok(r.1 >= r.0)
        }
        Command::SweepSemisup {
            common,
            budgets,
            seeds,
            plot,
        } => {
            let (cfg, out) = common.load_with_output()?;
            let rows = run_semi_sup_sweep(&cfg, &budgets, &seeds)?;
            write(&out.join("sweep_semisup.csv"), &sweep_csv(&rows))?;
            if plot {
                write(&out.join("sweep_semisup.svg"), &sweep_svg(&rows))?;
            }
            print!("{}", sweep_csv(&rows));
            let means = mean_by(rows.iter().map(|r| ((format!("{:.4}", r.fraction), r.arm), r.map)));
            let mut ok = true;
            for n in &budgets {
                let f = format!("{:.4}", 1.0 / *n as f64);
                let get = |arm| means.iter().find(|((ff, a), _)| *ff == f && *a == arm).map(|(_, m)| *m);
                let (b, l) = (get(Arm::Baseline).unwrap_or(f64::NAN), get(Arm::All).unwrap_or(f64::NAN));
                let pass = l >= b;
                ok &= pass;
                println!("[{}] fraction {f}: mean mAP all {l:.4} vs baseline {b:.4}", if pass { "PASS" } else { "FAIL" });
            }
            Ok(ok)
        }
        Command::AblateSampling { common, seeds } => {
            let (cfg, out) = common.load_with_output()?;
            let rows = run_sampling_ablation(&cfg, &seeds)?;
            write(&out.join("ablate_sampling.csv"), &ablation_csv(&rows))?;
            print!("{}", ablation_csv(&rows));
            let means = mean_by(rows.iter().map(|r| (r.setting.clone(), r.map)));
            for (k, m) in &means {
                println!("mean {k}: {m:.4}");
            }
            let get = |k: &str| means.iter().find(|(a, _)| a == k).map_or(f64::NAN, |x| x.1);
            let pass = get("nucleus") >= get("beam");
            println!("[{}] nucleus >= beam", if pass { "PASS" } else { "FAIL" });
            Ok(pass)
        }
        Command::AblateTemperature { common, seeds, taus } => {
            let (cfg, out) = common.load_with_output()?;
            let rows = run_temperature_ablation(&cfg, &parse_taus(&taus)?, &seeds)?;
            write(&out.join("ablate_temperature.csv"), &ablation_csv(&rows))?;
            print!("{}", ablation_csv(&rows));
            Ok(rows.iter().all(|r| r.map.is_finite()))
        }
        Command::PrintConfig(c) => {
            print!("{}", c.load()?.to_toml()?);
            Ok(true)
        }
        Command::Run { common, dry_run } => {
            let cfg = common.load()?;
            if dry_run {
                print!("{}", cfg.plan_text());
                return Ok(true);
            }
            if cfg.output_dir.is_none() {
                bail!("no output directory: pass --out, set VIDNARR_OUTPUT_ROOT, or set output_dir in the config");
            }
            let t = Instant::now();
            let ok = stage(&common, Stage::Eval, |_| {})?;
            println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
