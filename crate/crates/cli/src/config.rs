//! Experiment settings and their resolution order: built-in defaults, then a
//! flat `key = value` config file, then command-line flags. Keys are the
//! long flag names, so a config file is a list of flags with the dashes
//! stripped.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use aad_core::data::GeneratorConfig;
use aad_core::pipeline::{AdaptConfig, Method, BERT_LR1, BERT_LR2, DESK_LR1, DESK_LR2};

use crate::error::CliError;

/// Tool name and version, recorded in every output file.
pub const VERSION: &str = concat!("aad ", env!("CARGO_PKG_VERSION"));

/// Overrides the default output root (`out`).
pub const OUT_ENV: &str = "AAD_OUT";

/// The temperature grid of the sweep.
pub const SWEEP_TEMPERATURES: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 20.0, 50.0];

/// Every settable key, in echo order. `preset` is write-only: it expands
/// into `lr1` and `lr2`.
pub const KEYS: &[&str] = &[
    "name",
    "out",
    "data",
    "methods",
    "seeds",
    "temperatures",
    "jobs",
    "checkpoints",
    "vocab-size",
    "rho",
    "per-class",
    "min-len",
    "max-len",
    "injection-rate",
    "noise-rate",
    "pivot-vocab",
    "specific-vocab",
    "marker-vocab",
    "data-seed",
    "embed-dim",
    "hidden-dim",
    "epochs1",
    "epochs2",
    "lr1",
    "lr2",
    "batch",
    "temperature",
    "kd-weight",
    "clip-norm",
    "clip-value",
    "d-steps",
    "weight-clip",
    "align-weight",
    "dann-lambda",
];

/// Keys that only say where results go; they are left out of the config
/// embedded in result files so that reruns elsewhere compare byte-equal.
const LOCATION_KEYS: &[&str] = &["out"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Run,
    Sweep,
}

impl Command {
    fn default_name(self) -> &'static str {
        match self {
            Command::GenData => "data",
            Command::Run => "run",
            Command::Sweep => "sweep",
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub name: String,
    pub out: PathBuf,
    /// Dataset manifests; empty means "generate from `generator`".
    pub data: Vec<PathBuf>,
    pub generator: GeneratorConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub temperatures: Vec<f64>,
    pub adapt: AdaptConfig,
    pub jobs: usize,
    pub checkpoints: bool,
}

impl Settings {
    /// Built-in defaults for `command`. `out_root` is normally the value of
    /// [`OUT_ENV`].
    pub fn defaults(command: Command, out_root: Option<&str>) -> Self {
        let generator = GeneratorConfig::default();
        let mut adapt = AdaptConfig::default();
        adapt.model.vocab_size = generator.vocab_size;
        Settings {
            name: command.default_name().to_string(),
            out: PathBuf::from(out_root.filter(|s| !s.is_empty()).unwrap_or("out")),
            data: Vec::new(),
            generator,
            methods: vec![Method::Baseline, Method::Aad],
            seeds: (0..5).collect(),
            temperatures: SWEEP_TEMPERATURES.to_vec(),
            adapt,
            jobs: 1,
            checkpoints: command == Command::Run,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        let s2 = &mut self.adapt.step2;
        match key {
            "name" => {
                if v.is_empty() || v.contains(['/', '\\']) || v == "." || v == ".." {
                    return Err(bad(key, v, "expected a plain directory name"));
                }
                self.name = v.to_string();
            }
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = list(v).map(PathBuf::from).collect(),
            "methods" => self.methods = list(v).map(|m| parse(key, m)).collect::<Result<_, _>>()?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "temperatures" => self.temperatures = list(v).map(|t| parse(key, t)).collect::<Result<_, _>>()?,
            "jobs" => self.jobs = parse(key, v)?,
            "checkpoints" => self.checkpoints = parse(key, v)?,
            "vocab-size" => {
                self.generator.vocab_size = parse(key, v)?;
                self.adapt.model.vocab_size = self.generator.vocab_size;
            }
            "rho" => self.generator.rho = parse(key, v)?,
            "per-class" => self.generator.per_class = parse(key, v)?,
            "min-len" => self.generator.min_len = parse(key, v)?,
            "max-len" => self.generator.max_len = parse(key, v)?,
            "injection-rate" => self.generator.injection_rate = parse(key, v)?,
            "noise-rate" => self.generator.noise_rate = parse(key, v)?,
            "pivot-vocab" => self.generator.pivot_vocab = parse(key, v)?,
            "specific-vocab" => self.generator.specific_vocab = parse(key, v)?,
            "marker-vocab" => self.generator.marker_vocab = parse(key, v)?,
            "data-seed" => self.generator.seed = parse(key, v)?,
            "embed-dim" => self.adapt.model.embed_dim = parse(key, v)?,
            "hidden-dim" => self.adapt.model.hidden_dim = parse(key, v)?,
            "epochs1" => self.adapt.step1.epochs = parse(key, v)?,
            "epochs2" => s2.epochs = parse(key, v)?,
            "lr1" => self.adapt.step1.lr = parse(key, v)?,
            "lr2" => s2.lr = parse(key, v)?,
            "batch" => {
                s2.batch = parse(key, v)?;
                self.adapt.step1.batch = s2.batch;
            }
            "temperature" => s2.temperature = parse(key, v)?,
            "kd-weight" => s2.kd_weight = parse(key, v)?,
            "clip-norm" => s2.clip_norm = parse(key, v)?,
            "clip-value" => s2.clip_value = parse(key, v)?,
            "d-steps" => s2.d_steps_per_g_step = parse(key, v)?,
            "weight-clip" => s2.weight_clip = parse(key, v)?,
            "align-weight" => self.adapt.align_weight = parse(key, v)?,
            "dann-lambda" => self.adapt.dann_lambda = parse(key, v)?,
            "preset" => {
                let (lr1, lr2) = match v {
                    "desk" => (DESK_LR1, DESK_LR2),
                    "bert" => (BERT_LR1, BERT_LR2),
                    _ => return Err(bad(key, v, "expected `desk` or `bert`")),
                };
                self.adapt.step1.lr = lr1;
                s2.lr = lr2;
            }
            _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// The current value of `key`, in a form [`Settings::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.generator;
        let s1 = &self.adapt.step1;
        let s2 = &self.adapt.step2;
        let m = &self.adapt.model;
        Some(match key {
            "name" => self.name.clone(),
            "out" => self.out.display().to_string(),
            "data" => join(self.data.iter().map(|p| p.display())),
            "methods" => join(self.methods.iter()),
            "seeds" => {
                let s = join(self.seeds.iter());
                // a lone number would read back as a seed count
                if self.seeds.len() == 1 {
                    format!("{s},")
                } else {
                    s
                }
            }
            "temperatures" => join(self.temperatures.iter()),
            "jobs" => self.jobs.to_string(),
            "checkpoints" => self.checkpoints.to_string(),
            "vocab-size" => g.vocab_size.to_string(),
            "rho" => g.rho.to_string(),
            "per-class" => g.per_class.to_string(),
            "min-len" => g.min_len.to_string(),
            "max-len" => g.max_len.to_string(),
            "injection-rate" => g.injection_rate.to_string(),
            "noise-rate" => g.noise_rate.to_string(),
            "pivot-vocab" => g.pivot_vocab.to_string(),
            "specific-vocab" => g.specific_vocab.to_string(),
            "marker-vocab" => g.marker_vocab.to_string(),
            "data-seed" => g.seed.to_string(),
            "embed-dim" => m.embed_dim.to_string(),
            "hidden-dim" => m.hidden_dim.to_string(),
            "epochs1" => s1.epochs.to_string(),
            "epochs2" => s2.epochs.to_string(),
            "lr1" => s1.lr.to_string(),
            "lr2" => s2.lr.to_string(),
            "batch" => s2.batch.to_string(),
            "temperature" => s2.temperature.to_string(),
            "kd-weight" => s2.kd_weight.to_string(),
            "clip-norm" => s2.clip_norm.to_string(),
            "clip-value" => s2.clip_value.to_string(),
            "d-steps" => s2.d_steps_per_g_step.to_string(),
            "weight-clip" => s2.weight_clip.to_string(),
            "align-weight" => self.adapt.align_weight.to_string(),
            "dann-lambda" => self.adapt.dann_lambda.to_string(),
            _ => return None,
        })
    }

    /// Applies a config file: one `key = value` per line, `#` starts a
    /// comment, blank lines are ignored.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        }
        Ok(())
    }

    /// Checks everything a run needs before any work starts.
    pub fn validate(&self, command: Command) -> Result<(), CliError> {
        let usage = |m: &str| Err(CliError::Usage(m.to_string()));
        if command == Command::Run && self.methods.is_empty() {
            return usage("at least one method is required");
        }
        if self.seeds.is_empty() {
            return usage("at least one seed is required");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return usage("seeds must be distinct");
        }
        if command == Command::Sweep && self.temperatures.is_empty() {
            return usage("the sweep needs at least one temperature");
        }
        if self.temperatures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return usage("temperatures must be positive");
        }
        if self.jobs == 0 {
            return usage("jobs must be at least 1");
        }
        if command == Command::GenData && !self.data.is_empty() {
            return usage("gen-data writes a generated dataset; drop --data");
        }
        if self.data.is_empty() {
            self.generator.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        self.adapt.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// `key = value` lines for every key, in [`KEYS`] order.
    pub fn echo(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (*k, self.get(k).unwrap_or_default())).collect()
    }

    /// The echo minus output-location keys; this is what result files embed.
    pub fn provenance(&self) -> Vec<(&'static str, String)> {
        self.echo()
            .into_iter()
            .filter(|(k, _)| !LOCATION_KEYS.contains(k))
            .collect()
    }

    /// The experiment directory, `out/<name>`.
    pub fn experiment_dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }
}

fn bad(key: &str, value: &str, why: impl Display) -> CliError {
    CliError::Usage(format!("invalid value {value:?} for `{key}`: {why}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `N` means seeds `0..N`; anything with a comma is an explicit list.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>, CliError> {
    if v.contains(',') {
        list(v).map(|s| parse("seeds", s)).collect()
    } else {
        let n: u64 = parse("seeds", v)?;
        Ok((0..n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let base = Settings::defaults(Command::Run, None);
        for key in KEYS {
            let mut s = base.clone();
            let v = base.get(key).unwrap();
            s.set(key, &v).unwrap();
            assert_eq!(s, base, "{key}");
        }
    }

    #[test]
    fn seeds_syntax() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert_eq!(parse_seeds("7,").unwrap(), vec![7]);
        assert!(parse_seeds("x").is_err());
        let mut s = Settings::defaults(Command::Run, None);
        s.set("seeds", "7,").unwrap();
        assert_eq!(s.get("seeds").unwrap(), "7,");
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let mut s = Settings::defaults(Command::Run, None);
        assert!(matches!(s.set("temprature", "2"), Err(CliError::Usage(_))));
        assert!(matches!(s.set("rho", "lots"), Err(CliError::Usage(_))));
        assert!(matches!(s.set("methods", "aad,bert"), Err(CliError::Usage(_))));
    }

    #[test]
    fn preset_sets_both_rates() {
        let mut s = Settings::defaults(Command::Run, None);
        s.set("preset", "bert").unwrap();
        assert_eq!((s.adapt.step1.lr, s.adapt.step2.lr), (BERT_LR1, BERT_LR2));
        s.set("preset", "desk").unwrap();
        assert_eq!((s.adapt.step1.lr, s.adapt.step2.lr), (DESK_LR1, DESK_LR2));
    }

    #[test]
    fn config_file_comments_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.conf");
        fs::write(&path, "# sweep setup\n\ntemperature = 5  # soft\nseeds = 2\n").unwrap();
        let mut s = Settings::defaults(Command::Run, None);
        s.apply_file(&path).unwrap();
        assert_eq!(s.adapt.step2.temperature, 5.0);
        assert_eq!(s.seeds, vec![0, 1]);
        fs::write(&path, "temperature 5\n").unwrap();
        let err = s.apply_file(&path).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }

    #[test]
    fn validation() {
        let mut s = Settings::defaults(Command::Run, None);
        s.validate(Command::Run).unwrap();
        s.seeds = vec![1, 1];
        assert!(s.validate(Command::Run).is_err());
        s.seeds = vec![1];
        s.set("temperature", "0").unwrap();
        assert!(s.validate(Command::Run).is_err());
    }

    #[test]
    fn out_root_from_environment_value() {
        assert_eq!(
            Settings::defaults(Command::Run, Some("/tmp/x")).out,
            PathBuf::from("/tmp/x")
        );
        assert_eq!(Settings::defaults(Command::Run, Some("")).out, PathBuf::from("out"));
        assert!(!Settings::defaults(Command::Sweep, None).checkpoints);
    }
}
