use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use aad_core::data::{generate_domain_pair, DomainPairDataset};
use aad_core::eval::{aggregate, emit_table, Format, ResultsTable, Sample, CSV_HEADER};
use aad_core::pipeline::{run_experiment, ExperimentOutcome, Method, RunResult, Variant};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Command, Settings, VERSION};
use crate::error::CliError;

/// Name of the reference column every table is compared against.
pub const BASELINE: &str = "baseline";

/// Pair id used for a generated dataset.
pub const SYNTHETIC_PAIR: &str = "synthetic";

/// What a finished `run` or `sweep` produced.
#[derive(Debug)]
pub struct Report {
    pub dir: PathBuf,
    pub columns: Vec<String>,
    pub table: Option<ResultsTable>,
    pub runs: Vec<RunResult>,
}

#[derive(Serialize)]
struct ColumnInfo<'a> {
    name: &'a str,
    method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
}

fn column_info(v: &Variant) -> ColumnInfo<'_> {
    ColumnInfo {
        name: &v.name,
        method: v.method,
        temperature: (v.method == Method::Aad).then_some(v.config.step2.temperature),
    }
}

fn column_line(v: &Variant) -> String {
    let c = column_info(v);
    match c.temperature {
        Some(t) => format!("column {}: method = {}, temperature = {t}", c.name, c.method),
        None => format!("column {}: method = {}", c.name, c.method),
    }
}

fn uses_step1(m: Method) -> bool {
    matches!(m, Method::Baseline | Method::Aad | Method::AadSupervised | Method::Adda)
}

/// One column per requested method. A baseline run is added only when no
/// requested method trains a source-only model on the way.
pub fn run_columns(s: &Settings) -> Vec<Variant> {
    let mut variants: Vec<Variant> = s.methods.iter().map(|&m| Variant::new(m, &s.adapt)).collect();
    if !s.methods.iter().any(|&m| uses_step1(m)) {
        variants.insert(0, Variant::new(Method::Baseline, &s.adapt));
    }
    variants
}

/// The supervised column followed by one AAD column per temperature.
pub fn sweep_columns(s: &Settings) -> Vec<Variant> {
    let mut variants = vec![Variant {
        name: "supervised".into(),
        ..Variant::new(Method::AadSupervised, &s.adapt)
    }];
    for &t in &s.temperatures {
        let mut v = Variant::new(Method::Aad, &s.adapt);
        v.config.step2.temperature = t;
        v.name = format!("t={t}");
        variants.push(v);
    }
    variants
}

/// Loads every manifest, or generates the synthetic pair.
pub fn load_pairs(s: &Settings) -> Result<(Vec<(String, DomainPairDataset)>, usize), CliError> {
    if s.data.is_empty() {
        let ds = generate_domain_pair(&s.generator)?;
        return Ok((vec![(SYNTHETIC_PAIR.to_string(), ds)], s.generator.vocab_size));
    }
    let mut pairs: Vec<(String, DomainPairDataset)> = Vec::new();
    let mut vocab = None;
    for path in &s.data {
        let (ds, manifest) = DomainPairDataset::load(path)?;
        if *vocab.get_or_insert(manifest.vocab_size) != manifest.vocab_size {
            return Err(CliError::Usage(format!(
                "{}: vocab_size {} differs from the other manifests",
                path.display(),
                manifest.vocab_size
            )));
        }
        let stem = path
            .parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| !n.is_empty())
            .unwrap_or_else(|| "pair".into());
        let mut id = stem.clone();
        let mut k = 2;
        while pairs.iter().any(|(p, _)| *p == id) {
            id = format!("{stem}-{k}");
            k += 1;
        }
        pairs.push((id, ds));
    }
    Ok((pairs, vocab.unwrap_or(s.adapt.model.vocab_size)))
}

/// Turns runs into table samples. Without an explicit baseline column the
/// baseline of each (pair, seed) is the Step-1 model of the first run that
/// trained one; that model is the baseline run's model, bit for bit.
pub fn samples(runs: &[RunResult], variants: &[Variant]) -> (Vec<Sample>, Vec<String>) {
    let explicit = variants.iter().any(|v| v.name == BASELINE);
    let mut columns = vec![BASELINE.to_string()];
    columns.extend(variants.iter().map(|v| v.name.clone()).filter(|n| n != BASELINE));
    let mut out: Vec<Sample> = runs
        .iter()
        .map(|r| Sample {
            pair: r.pair.clone(),
            method: r.variant.clone(),
            seed: r.seed,
            accuracy: r.target_accuracy,
        })
        .collect();
    if !explicit {
        let mut seen = BTreeMap::new();
        for r in runs {
            if let Some(acc) = r.step1_target_accuracy {
                seen.entry((r.pair.clone(), r.seed)).or_insert(acc);
            }
        }
        out.extend(seen.into_iter().map(|((pair, seed), accuracy)| Sample {
            pair,
            method: BASELINE.to_string(),
            seed,
            accuracy,
        }));
    }
    (out, columns)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn file_stem(pair: &str, variant: &str, seed: u64) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || "-_.=".contains(c) {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    };
    format!("{}__{}__seed{seed}", clean(pair), clean(variant))
}

/// The header shared by every output file: version, command, resolved
/// config, and the column layout.
fn header(s: &Settings, command: &str, variants: &[Variant]) -> Vec<String> {
    let mut lines = vec![VERSION.to_string(), format!("command = {command}")];
    lines.extend(s.provenance().into_iter().map(|(k, v)| format!("{k} = {v}")));
    lines.extend(variants.iter().map(column_line));
    lines
}

fn config_json(s: &Settings) -> Value {
    let map: serde_json::Map<String, Value> = s
        .provenance()
        .into_iter()
        .map(|(k, v)| (k.to_string(), Value::String(v)))
        .collect();
    Value::Object(map)
}

fn provenance_json(s: &Settings, command: &str) -> Value {
    json!({
        "version": VERSION,
        "command": command,
        "seeds": s.seeds,
        "config": config_json(s),
    })
}

fn write_outputs(
    s: &Settings,
    command: &str,
    variants: &[Variant],
    outcome: &mut ExperimentOutcome,
    table: Option<&ResultsTable>,
) -> Result<PathBuf, CliError> {
    let dir = s.experiment_dir();
    create_dir(&dir)?;
    let head = header(s, command, variants);

    let mut csv: String = head.iter().map(|l| format!("# {l}\n")).collect();
    match table {
        Some(t) => csv.push_str(&emit_table(t, Format::Csv)?),
        None => csv.push_str(&format!("{CSV_HEADER}\n")),
    }
    write(&dir.join("results.csv"), &csv)?;

    let mut md = format!("<!--\n{}\n-->\n\n", head.join("\n"));
    if let Some(t) = table {
        md.push_str(&emit_table(t, Format::Markdown)?);
    }
    write(&dir.join("results.md"), &md)?;

    let mut doc = provenance_json(s, command);
    let summary: Vec<RunResult> = outcome
        .runs
        .iter()
        .map(|r| RunResult {
            traces: Default::default(),
            ..r.clone()
        })
        .collect();
    doc["columns"] = json!(variants.iter().map(column_info).collect::<Vec<_>>());
    doc["table"] = json!(table);
    doc["runs"] = json!(summary);
    doc["failures"] = json!(outcome.failures);
    write(&dir.join("results.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;

    let traces = dir.join("traces");
    create_dir(&traces)?;
    for run in &outcome.runs {
        let mut doc = provenance_json(s, command);
        doc["run"] = json!(run);
        let path = traces.join(file_stem(&run.pair, &run.variant, run.seed) + ".json");
        write(&path, &(serde_json::to_string(&doc)? + "\n"))?;
    }

    if !outcome.checkpoints.is_empty() {
        let ckdir = dir.join("checkpoints");
        create_dir(&ckdir)?;
        for ((pair, variant, seed), ck) in outcome.checkpoints.iter_mut() {
            let mut meta = provenance_json(s, command);
            meta["pair"] = json!(pair);
            meta["variant"] = json!(variant);
            meta["seed"] = json!(seed);
            ck.meta = Some(meta);
            ck.save(&ckdir.join(file_stem(pair, variant, *seed) + ".json"))?;
        }
    }
    Ok(dir)
}

fn print_config(s: &Settings, command: &str, variants: &[Variant], out: &mut dyn Write) -> Result<(), CliError> {
    let io = |e| CliError::Io {
        path: "<stdout>".into(),
        source: e,
    };
    writeln!(out, "# {VERSION}").map_err(io)?;
    writeln!(out, "# command = {command}").map_err(io)?;
    for (k, v) in s.echo() {
        writeln!(out, "{k} = {v}").map_err(io)?;
    }
    for v in variants {
        writeln!(out, "# {}", column_line(v)).map_err(io)?;
    }
    Ok(())
}

/// Writes the generated dataset to `out/<name>/` and returns the manifest
/// path. Same settings, same bytes.
pub fn cmd_gen_data(s: &Settings, dry_run: bool, out: &mut dyn Write) -> Result<Option<PathBuf>, CliError> {
    s.validate(Command::GenData)?;
    if dry_run {
        print_config(s, "gen-data", &[], out)?;
        return Ok(None);
    }
    let ds = generate_domain_pair(&s.generator)?;
    let manifest = ds.save(
        &s.experiment_dir(),
        s.generator.vocab_size,
        Some(&s.generator),
        Some(VERSION),
    )?;
    let _ = writeln!(
        out,
        "wrote {} ({}/{}/{}/{} records)",
        manifest.display(),
        ds.source_train.len(),
        ds.source_dev.len(),
        ds.target_train.len(),
        ds.target_eval.len()
    );
    Ok(Some(manifest))
}

fn experiment(s: &Settings, command: Command, dry_run: bool, out: &mut dyn Write) -> Result<Option<Report>, CliError> {
    s.validate(command)?;
    let (name, mut variants) = match command {
        Command::Sweep => ("sweep", sweep_columns(s)),
        _ => ("run", run_columns(s)),
    };
    if dry_run {
        print_config(s, name, &variants, out)?;
        return Ok(None);
    }
    let (pairs, vocab) = load_pairs(s)?;
    for v in &mut variants {
        v.config.model.vocab_size = vocab;
    }
    let mut outcome = run_experiment(&pairs, &variants, &s.seeds, s.jobs, s.checkpoints)?;
    let (samples, columns) = samples(&outcome.runs, &variants);
    let refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let table = match aggregate(&samples, &refs, BASELINE) {
        Ok(t) => Some(t),
        // failed runs can leave a pair without its baseline
        Err(_) if !outcome.failures.is_empty() => None,
        Err(e) => return Err(e.into()),
    };
    let dir = write_outputs(s, name, &variants, &mut outcome, table.as_ref())?;
    if let Some(t) = &table {
        let _ = write!(out, "{}", emit_table(t, Format::Markdown)?);
    }
    let _ = writeln!(out, "results in {}", dir.display());
    if !outcome.failures.is_empty() {
        return Err(CliError::RunsFailed(outcome.failures));
    }
    Ok(Some(Report {
        dir,
        columns,
        table,
        runs: outcome.runs,
    }))
}

/// Runs every (pair, method, seed) and writes the results table.
pub fn cmd_run(s: &Settings, dry_run: bool, out: &mut dyn Write) -> Result<Option<Report>, CliError> {
    experiment(s, Command::Run, dry_run, out)
}

/// The temperature sweep: a supervised column plus one AAD column per
/// temperature, each against the source-only baseline.
pub fn cmd_sweep(s: &Settings, dry_run: bool, out: &mut dyn Write) -> Result<Option<Report>, CliError> {
    experiment(s, Command::Sweep, dry_run, out)
}
