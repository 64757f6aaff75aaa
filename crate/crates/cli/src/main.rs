//! `flowlab`: train, sample, rank and audit desk-scale flow models.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::*;

#[derive(Debug, Parser)]
#[command(name = "flowlab", version, about = "Desk-scale rectified-flow laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one variant from a JSON config; writes metrics.csv and checkpoint.bin.
    Train {
        /// Training config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; metrics are appended.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the configured total step count.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw class-balanced samples from a checkpoint with the Euler sampler.
    Sample {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Sampling steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Classifier-free guidance scale.
        #[arg(long, default_value_t = 1.0)]
        guidance: f64,
        /// Timestep shift alpha applied to the sampling grid.
        #[arg(long, default_value_t = 1.0)]
        shift: f64,
        /// Samples per class.
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        /// Use the EMA weights.
        #[arg(long)]
        ema: bool,
        /// Noise seed (default: the training seed; FLOWLAB_SEED wins).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate timestep densities on (0, 1), optionally pushed through a shift.
    Densities {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Density labels.
        #[arg(long = "label", default_values_t = ["rf".to_string(), "rf/lognorm(0.00,1.00)".into(), "rf/mode(1.29)".into(), "rf/cosmap".into()])]
        labels: Vec<String>,
        /// Grid points.
        #[arg(long, default_value_t = 1001)]
        points: usize,
        /// Shift alpha applied to each density.
        #[arg(long, default_value_t = 1.0)]
        shift: f64,
    },
    /// Train, sample and rank a set of variants; writes the rank table and scatter.
    Rank {
        /// Study config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Only enumerate the planned cells.
        #[arg(long)]
        dry_run: bool,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
    },
    /// Sigma curves, log-SNR offsets and shifted sampling grids.
    ShiftStudy {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Pixel counts; later entries also contribute alpha = sqrt(m / first).
        #[arg(long, value_delimiter = ',', default_values_t = [65536.0, 1048576.0])]
        resolutions: Vec<f64>,
        /// Shift values alpha.
        #[arg(long = "alpha", value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
        alphas: Vec<f64>,
        /// t points per curve.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Steps of the shifted sampling grids.
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Cluster-scoped near-duplicate removal over an embedding CSV.
    Dedup {
        /// Embedding corpus: `id,v1,...,vd` rows.
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Euclidean distance thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5])]
        thresholds: Vec<f64>,
        /// k-means cluster count (default: about sqrt(n)).
        #[arg(long)]
        clusters: Option<usize>,
        /// Clustering seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
    },
    /// Flag generations that form large cliques of near-identical images.
    Memcheck {
        /// Generations: `id,prompt,p1,...,pk` rows of square images in [0, 1].
        #[arg(long)]
        generations: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Tiled-distance thresholds.
        #[arg(long = "epsilon", value_delimiter = ',', default_values_t = [flowlab::dataguard::DEFAULT_EPSILON])]
        epsilons: Vec<f64>,
        /// Minimum clique size.
        #[arg(long, default_value_t = flowlab::dataguard::DEFAULT_CLIQUE)]
        clique: usize,
        /// Tiles per image side.
        #[arg(long, default_value_t = flowlab::dataguard::DEFAULT_TILES)]
        tiles: usize,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, out, resume, steps } => train(&TrainArgs { config, out, resume, steps }),
        Command::Sample { checkpoint, out, steps, guidance, shift, per_class, ema, seed } => {
            sample(&SampleArgs { checkpoint, out, steps, guidance, shift, per_class, ema, seed })
        }
        Command::Densities { out, labels, points, shift } => densities(&DensitiesArgs { out, labels, points, shift }),
        Command::Rank { config, out, dry_run, sequential } => rank(&RankArgs { config, out, dry_run, sequential }),
        Command::ShiftStudy { out, resolutions, alphas, points, steps } => {
            shift_study(&ShiftArgs { out, resolutions, alphas, points, steps })
        }
        Command::Dedup { corpus, out, thresholds, clusters, seed, sequential } => {
            dedup(&DedupArgs { corpus, out, thresholds, clusters, seed, sequential })
        }
        Command::Memcheck { generations, out, epsilons, clique, tiles, sequential } => {
            memcheck(&MemcheckArgs { generations, out, epsilons, clique, tiles, sequential })
        }
    }
}

/// 2 for bad configs or inputs, 3 for numerical faults, 4 for I/O.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<flowlab::Error>() {
            return match e {
                flowlab::Error::Numerical(_) | flowlab::Error::Domain(_) => 3,
                flowlab::Error::Io(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_model_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_documents_every_flag() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands() {
            let help = sub.clone().render_long_help().to_string();
            assert!(sub.get_about().is_some(), "`{}` lacks a description", sub.get_name());
            for arg in sub.get_arguments() {
                let Some(long) = arg.get_long() else { continue };
                assert!(help.contains(&format!("--{long}")), "`{} --{long}` missing from help", sub.get_name());
                if long != "help" && long != "version" {
                    assert!(arg.get_help().is_some(), "`{} --{long}` is undocumented", sub.get_name());
                }
            }
        }
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let code = |e: flowlab::Error| exit_code(&anyhow::Error::from(e).context("while running"));
        assert_eq!(code(flowlab::Error::parse("x")), 2);
        assert_eq!(code(flowlab::Error::parameter("x")), 2);
        assert_eq!(code(flowlab::Error::numerical("x")), 3);
        assert_eq!(code(flowlab::Error::Io(std::io::Error::other("x"))), 4);
        let io = anyhow::Error::from(std::io::Error::other("disk")).context("writing");
        assert_eq!(exit_code(&io), 4);
    }
}
