use std::path::PathBuf;
use std::process::ExitCode;

use biqa::checkpoint::Checkpoint;
use biqa::config::RunConfig;
use biqa::error::Result;
use biqa::{harness, io};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "biqa", version, about = "Burst frame-quality assessment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the default run configuration as TOML.
    Config,
    /// Synthesise and annotate a dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write PPM previews of every frame.
        #[arg(long)]
        export_frames: bool,
    },
    /// Add a teacher's annotations to an existing dataset.
    Annotate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        teacher: String,
    },
    /// Attach per-frame scores from a JSON score file as a named annotation set.
    ImportScores {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        name: String,
    },
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path; a CSV with the same stem is written alongside.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the indices of the M best frames of one sequence directory.
    Select {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        #[arg(short = 'M', long = "keep")]
        m: usize,
    },
    /// Downstream PSNR when fusing model-, randomly- and oracle-selected frames.
    Gain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "denoise")]
        teacher: String,
        #[arg(short = 'M', long = "keep", value_delimiter = ',', default_values_t = [2usize, 4, 6])]
        m: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redundancy, truncation stability and cross-teacher agreement.
    Findings {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ["denoise".to_string(), "superres".to_string()])]
        teachers: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 6, 4])]
        lengths: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Config => print!("{}", RunConfig::default().to_toml()),
        Cmd::Generate {
            config,
            out,
            export_frames,
        } => {
            let cfg = load_config(config.as_ref())?;
            let ds = harness::build_dataset(&cfg, &out)?;
            if export_frames {
                for id in &ds.manifest.sequences {
                    let dir = ds.seq_dir(id);
                    io::export_frames(&io::load_sequence(&dir)?, &dir.join("preview"))?;
                }
            }
            println!(
                "{} sequences ({} train, {} test) in {}",
                ds.manifest.sequences.len(),
                ds.split.train.len(),
                ds.split.test.len(),
                out.display()
            );
        }
        Cmd::Annotate { dataset, teacher } => {
            let ds = harness::annotate_dataset(&dataset, &teacher)?;
            println!("annotated {} sequences with {teacher}", ds.manifest.sequences.len());
        }
        Cmd::ImportScores { dataset, scores, name } => {
            let ds = harness::import_scores(&dataset, &scores, &name)?;
            println!("imported {name} for {} sequences", ds.manifest.sequences.len());
        }
        Cmd::Train {
            config,
            dataset,
            checkpoint,
        } => {
            let cfg = load_config(config.as_ref())?;
            for e in harness::train(&cfg, &dataset, &checkpoint)? {
                println!(
                    "epoch {:>3}  l_dist {:.5}  l_mrg {:.5}  l_fnl {:.5}",
                    e.epoch, e.l_dist, e.l_mrg, e.l_fnl
                );
            }
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            split,
            out,
        } => {
            let report = harness::evaluate(&checkpoint, &dataset, &split)?;
            harness::write_report(&report, &out)?;
            let a = &report.aggregate;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "{} sequences  srcc {}  plcc {}  pairwise {}",
                a.sequences,
                show(a.srcc),
                show(a.plcc),
                show(a.pairwise_accuracy_mean)
            );
        }
        Cmd::Select { checkpoint, sequence, m } => {
            let cp = Checkpoint::load(&checkpoint)?;
            let seq = io::load_sequence(&sequence)?;
            let keep = harness::select_frames(&cp.trainer.model, &seq, m)?;
            println!("{}", serde_json::to_string(&keep).expect("indices serialise"));
        }
        Cmd::Gain {
            checkpoint,
            dataset,
            teacher,
            m,
            out,
        } => {
            let rows = harness::downstream_gain(&checkpoint, &dataset, &teacher, &m)?;
            harness::write_gain(&rows, &out)?;
            for r in rows {
                println!(
                    "M={}  model {:.3} dB  random {:.3} dB  oracle {:.3} dB",
                    r.m, r.model_psnr, r.random_psnr, r.oracle_psnr
                );
            }
        }
        Cmd::Findings {
            dataset,
            teachers,
            lengths,
            out,
        } => {
            let report = harness::findings(&dataset, &teachers, &lengths)?;
            io::write_json(&out, &report)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
