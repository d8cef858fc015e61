//! The `aad` command line: generate a synthetic domain pair, run
//! adaptation experiments over seeds, and sweep the distillation
//! temperature. Results land in `out/<name>/`.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{cmd_gen_data, cmd_run, cmd_sweep, Report};
pub use config::{Command, Settings, VERSION};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "aad", version, about = "Unsupervised domain adaptation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Write the synthetic domain pair (four JSONL splits and a manifest).
    GenData(Flags),
    /// Train and evaluate methods over seeds; write the results table.
    Run(Flags),
    /// Distillation temperature sweep plus the supervised variant.
    Sweep(Flags),
}

/// Every flag may also be given in a `--config` file as `key = value`,
/// where the key is the flag name without dashes. Flags win over the file.
#[derive(Debug, Default, Args)]
pub struct Flags {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Learning-rate preset: `desk` (default) or `bert`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dry_run: bool,

    /// Experiment name; outputs go to <out>/<name>/.
    #[arg(long)]
    pub name: Option<String>,
    /// Output root [env: AAD_OUT, default: out].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest; repeat for several pairs.
    #[arg(long, conflicts_with = "gen")]
    pub data: Vec<PathBuf>,
    /// Use the synthetic generator (the default when no --data is given).
    #[arg(long)]
    pub gen: bool,
    /// Comma-separated methods: baseline, aad, aad-supervised, adda, ddc, dann, coral.
    #[arg(long, alias = "method")]
    pub methods: Option<String>,
    /// A count N (seeds 0..N) or a comma-separated list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated sweep temperatures.
    #[arg(long)]
    pub temperatures: Option<String>,
    /// Parallel runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Save a checkpoint per run (default: on for run, off for sweep).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub checkpoints: Option<bool>,

    #[arg(long, help_heading = "Generator")]
    pub vocab_size: Option<usize>,
    /// Pivot fraction: 1 means no domain shift.
    #[arg(long, help_heading = "Generator")]
    pub rho: Option<f64>,
    #[arg(long, help_heading = "Generator")]
    pub per_class: Option<usize>,
    #[arg(long, help_heading = "Generator")]
    pub min_len: Option<usize>,
    #[arg(long, help_heading = "Generator")]
    pub max_len: Option<usize>,
    #[arg(long, help_heading = "Generator")]
    pub injection_rate: Option<f64>,
    #[arg(long, help_heading = "Generator")]
    pub noise_rate: Option<f64>,
    #[arg(long, help_heading = "Generator")]
    pub pivot_vocab: Option<usize>,
    #[arg(long, help_heading = "Generator")]
    pub specific_vocab: Option<usize>,
    #[arg(long, help_heading = "Generator")]
    pub marker_vocab: Option<usize>,
    #[arg(long, help_heading = "Generator")]
    pub data_seed: Option<u64>,

    #[arg(long, help_heading = "Model")]
    pub embed_dim: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub hidden_dim: Option<usize>,

    #[arg(long, help_heading = "Training")]
    pub epochs1: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub epochs2: Option<usize>,
    /// Step-1 and baseline learning rate.
    #[arg(long, help_heading = "Training")]
    pub lr1: Option<f64>,
    /// Step-2 learning rate.
    #[arg(long, help_heading = "Training")]
    pub lr2: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub batch: Option<usize>,
    /// Distillation temperature.
    #[arg(short = 't', long, help_heading = "Training")]
    pub temperature: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub kd_weight: Option<f64>,
    /// Target-encoder gradient norm clip.
    #[arg(long, help_heading = "Training")]
    pub clip_norm: Option<f64>,
    /// Discriminator gradient value clip.
    #[arg(long, help_heading = "Training")]
    pub clip_value: Option<f64>,
    /// Discriminator updates per encoder update.
    #[arg(long, help_heading = "Training")]
    pub d_steps: Option<usize>,
    /// Also clamp discriminator weights to the clip value.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", help_heading = "Training")]
    pub weight_clip: Option<bool>,
    /// Alignment loss weight for ddc, dann and coral.
    #[arg(long, help_heading = "Training")]
    pub align_weight: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub dann_lambda: Option<f64>,
}

impl Flags {
    /// The flags that were given, as config `(key, value)` pairs.
    pub fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        macro_rules! push {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    out.push(($key, v.to_string()));
                })*
            };
        }
        push!(
            "preset" => preset,
            "name" => name,
            "methods" => methods,
            "seeds" => seeds,
            "temperatures" => temperatures,
            "jobs" => jobs,
            "checkpoints" => checkpoints,
            "vocab-size" => vocab_size,
            "rho" => rho,
            "per-class" => per_class,
            "min-len" => min_len,
            "max-len" => max_len,
            "injection-rate" => injection_rate,
            "noise-rate" => noise_rate,
            "pivot-vocab" => pivot_vocab,
            "specific-vocab" => specific_vocab,
            "marker-vocab" => marker_vocab,
            "data-seed" => data_seed,
            "embed-dim" => embed_dim,
            "hidden-dim" => hidden_dim,
            "epochs1" => epochs1,
            "epochs2" => epochs2,
            "lr1" => lr1,
            "lr2" => lr2,
            "batch" => batch,
            "temperature" => temperature,
            "kd-weight" => kd_weight,
            "clip-norm" => clip_norm,
            "clip-value" => clip_value,
            "d-steps" => d_steps,
            "weight-clip" => weight_clip,
            "align-weight" => align_weight,
            "dann-lambda" => dann_lambda,
        );
        if let Some(out_dir) = &self.out {
            out.push(("out", out_dir.display().to_string()));
        }
        if !self.data.is_empty() {
            let paths: Vec<String> = self.data.iter().map(|p| p.display().to_string()).collect();
            out.push(("data", paths.join(",")));
        }
        if self.gen {
            out.push(("data", String::new()));
        }
        out
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self, command: Command, env_out: Option<&str>) -> Result<Settings, CliError> {
        let mut s = Settings::defaults(command, env_out);
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        for (key, value) in self.overrides() {
            s.set(key, &value)?;
        }
        Ok(s)
    }
}

/// Runs a parsed command line. `env_out` is the value of `AAD_OUT`.
pub fn execute(cli: &Cli, env_out: Option<&str>, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Sub::GenData(f) => cmd_gen_data(&f.resolve(Command::GenData, env_out)?, f.dry_run, out).map(drop),
        Sub::Run(f) => cmd_run(&f.resolve(Command::Run, env_out)?, f.dry_run, out).map(drop),
        Sub::Sweep(f) => cmd_sweep(&f.resolve(Command::Sweep, env_out)?, f.dry_run, out).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_override_is_a_config_key() {
        let cli = Cli::try_parse_from([
            "aad",
            "run",
            "--preset",
            "bert",
            "--name",
            "x",
            "--out",
            "o",
            "--methods",
            "aad",
            "--seeds",
            "2",
            "--temperatures",
            "1,2",
            "--jobs",
            "2",
            "--checkpoints",
            "--vocab-size",
            "100",
            "--rho",
            "0.5",
            "--per-class",
            "10",
            "--min-len",
            "5",
            "--max-len",
            "20",
            "--injection-rate",
            "0.2",
            "--noise-rate",
            "0.5",
            "--pivot-vocab",
            "5",
            "--specific-vocab",
            "5",
            "--marker-vocab",
            "5",
            "--data-seed",
            "1",
            "--embed-dim",
            "4",
            "--hidden-dim",
            "4",
            "--epochs1",
            "1",
            "--epochs2",
            "1",
            "--lr1",
            "0.1",
            "--lr2",
            "0.1",
            "--batch",
            "8",
            "-t",
            "3",
            "--kd-weight",
            "2",
            "--clip-norm",
            "2",
            "--clip-value",
            "0.1",
            "--d-steps",
            "2",
            "--weight-clip",
            "--align-weight",
            "0.5",
            "--dann-lambda",
            "0.3",
            "--gen",
        ])
        .unwrap();
        let Sub::Run(f) = &cli.command else { panic!() };
        let s = f.resolve(Command::Run, None).unwrap();
        assert_eq!(s.adapt.step2.temperature, 3.0);
        assert_eq!(s.adapt.step1.lr, 0.1);
        assert!(s.adapt.step2.weight_clip);
        assert_eq!(s.generator.vocab_size, 100);
        assert_eq!(s.adapt.model.vocab_size, 100);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let conf = dir.path().join("c.conf");
        std::fs::write(&conf, "temperature = 5\nrho = 0.6\n").unwrap();
        let conf = conf.display().to_string();
        let cli = Cli::try_parse_from(["aad", "run", "--config", &conf, "-t", "2"]).unwrap();
        let Sub::Run(f) = &cli.command else { panic!() };
        let s = f.resolve(Command::Run, Some("/tmp/env-root")).unwrap();
        assert_eq!(s.adapt.step2.temperature, 2.0);
        assert_eq!(s.generator.rho, 0.6);
        assert_eq!(s.out, PathBuf::from("/tmp/env-root"));
    }
}
