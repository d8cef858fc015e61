//! Domain-pair datasets: the synthetic pivot/non-pivot generator, JSONL
//! loading with hash tokenisation, the 80/20 split protocol and shuffled
//! batching.
//!
//! Unlabeled target documents are a separate type with no label field, so
//! adaptation code cannot read target labels by construction.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};

/// Longest sequence kept after loading or generation.
pub const MAX_SEQ_LEN: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn index(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// A token sequence with no label attached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<u32>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeled {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub domain: Domain,
}

impl Labeled {
    /// Drops the label.
    pub fn unlabeled(&self) -> Document {
        Document {
            tokens: self.tokens.clone(),
            domain: self.domain,
        }
    }
}

/// A loaded record whose label may be missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: Option<usize>,
    pub domain: Option<Domain>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPairDataset {
    pub source_train: Vec<Labeled>,
    pub source_dev: Vec<Labeled>,
    pub target_train: Vec<Document>,
    pub target_eval: Vec<Labeled>,
}

/// Synthetic generator settings.
///
/// Each token position is a class token with probability `injection_rate`.
/// A class token is a pivot (shared by both domains) with probability `rho`,
/// otherwise it comes from the domain's own class vocabulary. The remaining
/// positions are shared noise with probability `noise_rate`; whatever
/// probability is left over goes to per-domain marker tokens scaled by
/// `1 - rho`, falling back to shared noise, so `rho = 1` always yields
/// identical domain distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub rho: f64,
    pub per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub injection_rate: f64,
    pub noise_rate: f64,
    pub pivot_vocab: usize,
    pub specific_vocab: usize,
    pub marker_vocab: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            vocab_size: 2000,
            rho: 0.3,
            per_class: 1000,
            min_len: 20,
            max_len: MAX_SEQ_LEN,
            injection_rate: 0.1,
            noise_rate: 0.9,
            pivot_vocab: 50,
            specific_vocab: 200,
            marker_vocab: 200,
            seed: 7,
        }
    }
}

/// Where each token family lives in `[0, vocab_size)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabLayout {
    pivots: [Range<u32>; 2],
    specific: [[Range<u32>; 2]; 2],
    markers: [Range<u32>; 2],
    noise: Range<u32>,
}

impl VocabLayout {
    pub fn pivots(&self, class: usize) -> Range<u32> {
        self.pivots[class].clone()
    }

    pub fn specific(&self, domain: Domain, class: usize) -> Range<u32> {
        self.specific[domain.index()][class].clone()
    }

    pub fn markers(&self, domain: Domain) -> Range<u32> {
        self.markers[domain.index()].clone()
    }

    pub fn noise(&self) -> Range<u32> {
        self.noise.clone()
    }

    /// Class indicated by `token`, if it is a class token of either kind.
    pub fn class_of(&self, token: u32) -> Option<usize> {
        (0..2).find(|&c| {
            self.pivots[c].contains(&token)
                || self.specific[0][c].contains(&token)
                || self.specific[1][c].contains(&token)
        })
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<VocabLayout> {
        check_rate("rho", self.rho)?;
        check_rate("injection_rate", self.injection_rate)?;
        check_rate("noise_rate", self.noise_rate)?;
        if self.injection_rate + self.noise_rate > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "injection_rate + noise_rate must not exceed 1, got {} + {}",
                self.injection_rate, self.noise_rate
            )));
        }
        if self.per_class < 5 {
            return Err(Error::invalid(format!(
                "per_class must be at least 5, got {}",
                self.per_class
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > MAX_SEQ_LEN {
            return Err(Error::invalid(format!(
                "document lengths need 1 <= min_len <= max_len <= {MAX_SEQ_LEN}, got [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.pivot_vocab == 0 || self.specific_vocab == 0 {
            return Err(Error::invalid("pivot_vocab and specific_vocab must be positive"));
        }
        let reserved = 2 * self.pivot_vocab + 4 * self.specific_vocab + 2 * self.marker_vocab;
        if reserved >= self.vocab_size || self.vocab_size > u32::MAX as usize {
            return Err(Error::invalid(format!(
                "vocabulary of {} cannot host {reserved} class and marker tokens plus noise",
                self.vocab_size
            )));
        }
        let mut next = 0u32;
        let mut take = |n: usize| {
            let r = next..next + n as u32;
            next = r.end;
            r
        };
        let pivots = [take(self.pivot_vocab), take(self.pivot_vocab)];
        let specific = [
            [take(self.specific_vocab), take(self.specific_vocab)],
            [take(self.specific_vocab), take(self.specific_vocab)],
        ];
        let markers = [take(self.marker_vocab), take(self.marker_vocab)];
        let noise = take(self.vocab_size - reserved);
        Ok(VocabLayout {
            pivots,
            specific,
            markers,
            noise,
        })
    }

    fn document<R: Rng>(&self, layout: &VocabLayout, domain: Domain, class: usize, rng: &mut R) -> Vec<u32> {
        let len = rng.gen_range(self.min_len..=self.max_len);
        let marker_rate = (1.0 - self.injection_rate - self.noise_rate).max(0.0) * (1.0 - self.rho);
        (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                let range = if u < self.injection_rate {
                    if rng.gen::<f64>() < self.rho {
                        layout.pivots(class)
                    } else {
                        layout.specific(domain, class)
                    }
                } else if u < self.injection_rate + marker_rate && !layout.markers(domain).is_empty() {
                    layout.markers(domain)
                } else {
                    layout.noise()
                };
                rng.gen_range(range)
            })
            .collect()
    }

    fn labeled_block(&self, layout: &VocabLayout, domain: Domain, per_class: usize, purpose: u64) -> Vec<Labeled> {
        let mut rng = stream(self.seed, &[tag::GENERATOR, domain.index() as u64, purpose]);
        (0..2)
            .flat_map(|c| std::iter::repeat_n(c, per_class))
            .map(|label| Labeled {
                tokens: self.document(layout, domain, label, &mut rng),
                label,
                domain,
            })
            .collect()
    }
}

/// Generates a seeded domain pair: `2 * per_class` labeled source documents
/// split 80/20, `2 * per_class` labeled target documents for evaluation, and
/// a disjoint draw of `1.6 * per_class` unlabeled target documents.
pub fn generate_domain_pair(cfg: &GeneratorConfig) -> Result<DomainPairDataset> {
    let layout = cfg.validate()?;
    let source = cfg.labeled_block(&layout, Domain::Source, cfg.per_class, 0);
    let target_eval = cfg.labeled_block(&layout, Domain::Target, cfg.per_class, 0);
    let unlabeled_per_class = (cfg.per_class * 4).div_ceil(5);
    let target_train = cfg
        .labeled_block(&layout, Domain::Target, unlabeled_per_class, 1)
        .iter()
        .map(Labeled::unlabeled)
        .collect();
    split_protocol(source, target_train, target_eval, cfg.seed)
}

/// Shuffled, stratified 80/20 split of labeled source data into train and
/// dev; the target sets pass through unchanged.
pub fn split_protocol(
    labeled_source: Vec<Labeled>,
    unlabeled_target: Vec<Document>,
    labeled_target: Vec<Labeled>,
    seed: u64,
) -> Result<DomainPairDataset> {
    if labeled_source.len() < 10 {
        return Err(Error::invalid(format!(
            "split needs at least 10 labeled source examples, got {}",
            labeled_source.len()
        )));
    }
    let mut by_class: Vec<Vec<Labeled>> = Vec::new();
    for ex in labeled_source {
        if by_class.len() <= ex.label {
            by_class.resize_with(ex.label + 1, Vec::new);
        }
        by_class[ex.label].push(ex);
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).filter(|&n| n > 0).collect();
    let (lo, hi) = (sizes.iter().min().copied(), sizes.iter().max().copied());
    if let (Some(lo), Some(hi)) = (lo, hi) {
        if hi - lo > 1 {
            return Err(Error::invalid(format!(
                "labeled source classes are imbalanced: sizes {sizes:?}"
            )));
        }
    }
    let mut rng = stream(seed, &[tag::SPLIT]);
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for mut class in by_class {
        class.shuffle(&mut rng);
        let n_dev = (class.len() + 2) / 5;
        let rest = class.split_off(n_dev);
        dev.extend(class);
        train.extend(rest);
    }
    train.shuffle(&mut rng);
    dev.shuffle(&mut rng);
    Ok(DomainPairDataset {
        source_train: train,
        source_dev: dev,
        target_train: unlabeled_target,
        target_eval: labeled_target,
    })
}

/// Batches of indices into a collection of `len` items, reshuffled per
/// epoch from `(seed, stream_tag, epoch)`. The final short batch is kept.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, stream_tag: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, &[stream_tag, epoch as u64]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// 32-bit FNV-1a of a whitespace token, reduced into `[0, vocab_size)`.
pub fn hash_token(token: &str, vocab_size: usize) -> u32 {
    let h = token
        .bytes()
        .fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193));
    (h as u64 % vocab_size as u64) as u32
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    text: Option<String>,
    tokens: Option<Vec<i64>>,
    label: Option<i64>,
    domain: Option<Domain>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    tokens: &'a [u32],
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    domain: Domain,
}

fn parse_record(line: &str, vocab_size: usize) -> std::result::Result<Example, String> {
    let rec: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let mut tokens = match (rec.text, rec.tokens) {
        (Some(text), None) => text.split_whitespace().map(|t| hash_token(t, vocab_size)).collect(),
        (None, Some(ids)) => ids
            .into_iter()
            .map(|id| {
                u32::try_from(id)
                    .ok()
                    .filter(|&t| (t as usize) < vocab_size)
                    .ok_or_else(|| format!("token id {id} outside [0, {vocab_size})"))
            })
            .collect::<std::result::Result<Vec<u32>, String>>()?,
        (Some(_), Some(_)) => return Err("record has both text and tokens".into()),
        (None, None) => return Err("record needs text or tokens".into()),
    };
    tokens.truncate(MAX_SEQ_LEN);
    if tokens.is_empty() {
        return Err("record has no tokens".into());
    }
    let label = rec
        .label
        .map(|l| usize::try_from(l).map_err(|_| format!("negative label {l}")))
        .transpose()?;
    Ok(Example {
        tokens,
        label,
        domain: rec.domain,
    })
}

/// Reads one JSON object per line. Blank lines are skipped; an empty file
/// yields an empty list.
pub fn load_jsonl(path: &Path, vocab_size: usize) -> Result<Vec<Example>> {
    if vocab_size == 0 {
        return Err(Error::invalid("vocab_size must be positive"));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_record(&line, vocab_size).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        out.push(ex);
    }
    Ok(out)
}

fn write_jsonl<'a>(path: &Path, records: impl Iterator<Item = RecordOut<'a>>) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for rec in records {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

/// Names the four split files of a dataset, relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub vocab_size: usize,
    pub source_train: PathBuf,
    pub source_dev: PathBuf,
    pub target_train: PathBuf,
    pub target_eval: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Name and version of the tool that wrote the files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub producer: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DomainPairDataset {
    /// Writes the four splits as JSONL plus `manifest.json` into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        vocab_size: usize,
        generator: Option<&GeneratorConfig>,
        producer: Option<&str>,
    ) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let labeled = |v: &'static str, xs: &[Labeled]| -> Result<PathBuf> {
            let name = PathBuf::from(format!("{v}.jsonl"));
            write_jsonl(
                &dir.join(&name),
                xs.iter().map(|x| RecordOut {
                    tokens: &x.tokens,
                    label: Some(x.label),
                    domain: x.domain,
                }),
            )?;
            Ok(name)
        };
        let source_train = labeled("source_train", &self.source_train)?;
        let source_dev = labeled("source_dev", &self.source_dev)?;
        let target_eval = labeled("target_eval", &self.target_eval)?;
        let target_train = PathBuf::from("target_train.jsonl");
        write_jsonl(
            &dir.join(&target_train),
            self.target_train.iter().map(|x| RecordOut {
                tokens: &x.tokens,
                label: None,
                domain: x.domain,
            }),
        )?;
        let manifest = Manifest {
            vocab_size,
            source_train,
            source_dev,
            target_train,
            target_eval,
            generator: generator.cloned(),
            producer: producer.map(str::to_string),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Loads a dataset from a manifest. Labels present in the unlabeled
    /// target file are discarded on read.
    pub fn load(manifest_path: &Path) -> Result<(Self, Manifest)> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let labeled = |rel: &Path, default: Domain| -> Result<Vec<Labeled>> {
            let path = base.join(rel);
            load_jsonl(&path, manifest.vocab_size)?
                .into_iter()
                .enumerate()
                .map(|(i, ex)| {
                    let label = ex.label.ok_or_else(|| Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        msg: "labeled split record has no label".into(),
                    })?;
                    Ok(Labeled {
                        tokens: ex.tokens,
                        label,
                        domain: ex.domain.unwrap_or(default),
                    })
                })
                .collect()
        };
        let target_train = load_jsonl(&base.join(&manifest.target_train), manifest.vocab_size)?
            .into_iter()
            .map(|ex| Document {
                tokens: ex.tokens,
                domain: ex.domain.unwrap_or(Domain::Target),
            })
            .collect();
        let ds = DomainPairDataset {
            source_train: labeled(&manifest.source_train, Domain::Source)?,
            source_dev: labeled(&manifest.source_dev, Domain::Source)?,
            target_train,
            target_eval: labeled(&manifest.target_eval, Domain::Target)?,
        };
        Ok((ds, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            per_class: 50,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn default_split_sizes() {
        let ds = generate_domain_pair(&GeneratorConfig::default()).unwrap();
        assert_eq!(ds.source_train.len(), 1600);
        assert_eq!(ds.source_dev.len(), 400);
        assert_eq!(ds.target_train.len(), 1600);
        assert_eq!(ds.target_eval.len(), 2000);
        for split in [&ds.source_train, &ds.source_dev, &ds.target_eval] {
            let pos = split.iter().filter(|x| x.label == 1).count();
            assert_eq!(pos * 2, split.len());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_domain_pair(&small()).unwrap();
        let b = generate_domain_pair(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_domain_pair(&GeneratorConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.source_train, c.source_train);
    }

    #[test]
    fn documents_respect_lengths_and_vocab() {
        let cfg = small();
        let ds = generate_domain_pair(&cfg).unwrap();
        for x in ds.source_train.iter().chain(&ds.target_eval) {
            assert!((cfg.min_len..=cfg.max_len).contains(&x.tokens.len()));
            assert!(x.tokens.iter().all(|&t| (t as usize) < cfg.vocab_size));
        }
    }

    #[test]
    fn class_tokens_follow_rho() {
        let cfg = GeneratorConfig { rho: 1.0, ..small() };
        let layout = cfg.validate().unwrap();
        let ds = generate_domain_pair(&cfg).unwrap();
        for x in ds.source_train.iter().chain(&ds.target_eval) {
            for &t in &x.tokens {
                if let Some(c) = layout.class_of(t) {
                    assert!(layout.pivots(c).contains(&t));
                    assert_eq!(c, x.label);
                }
            }
        }
        let cfg = GeneratorConfig { rho: 0.0, ..small() };
        let layout = cfg.validate().unwrap();
        let ds = generate_domain_pair(&cfg).unwrap();
        let class_tokens = |xs: &[Labeled]| -> HashSet<u32> {
            xs.iter()
                .flat_map(|x| x.tokens.iter().copied())
                .filter(|&t| layout.class_of(t).is_some())
                .collect()
        };
        assert!(class_tokens(&ds.source_train).is_disjoint(&class_tokens(&ds.target_eval)));
    }

    #[test]
    fn infeasible_vocabulary_rejected() {
        let cfg = GeneratorConfig {
            vocab_size: 300,
            ..GeneratorConfig::default()
        };
        assert!(generate_domain_pair(&cfg).is_err());
        let cfg = GeneratorConfig {
            injection_rate: 0.5,
            noise_rate: 0.6,
            ..GeneratorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn labeled(n_per_class: usize) -> Vec<Labeled> {
        (0..2 * n_per_class)
            .map(|i| Labeled {
                tokens: vec![i as u32],
                label: i % 2,
                domain: Domain::Source,
            })
            .collect()
    }

    #[test]
    fn split_scales_proportionally() {
        let ds = split_protocol(labeled(1000), vec![], vec![], 1).unwrap();
        assert_eq!((ds.source_train.len(), ds.source_dev.len()), (1600, 400));
        let ds = split_protocol(labeled(500), vec![], vec![], 1).unwrap();
        assert_eq!((ds.source_train.len(), ds.source_dev.len()), (800, 200));
        let seen: HashSet<u32> = ds
            .source_train
            .iter()
            .chain(&ds.source_dev)
            .map(|x| x.tokens[0])
            .collect();
        assert_eq!(seen.len(), 1000);
    }

    #[test]
    fn split_seeds_permute_differently() {
        let a = split_protocol(labeled(100), vec![], vec![], 1).unwrap();
        let b = split_protocol(labeled(100), vec![], vec![], 2).unwrap();
        assert_eq!(a.source_dev.len(), b.source_dev.len());
        assert_ne!(a.source_dev, b.source_dev);
    }

    #[test]
    fn split_rejects_small_or_imbalanced() {
        assert!(split_protocol(labeled(4), vec![], vec![], 1).is_err());
        let mut xs = labeled(10);
        xs.retain(|x| !(x.label == 0 && x.tokens[0] < 6));
        assert!(split_protocol(xs, vec![], vec![], 1).is_err());
    }

    #[test]
    fn batches() {
        let b = batch_iter(1600, 64, 3, 0, 0).unwrap();
        assert_eq!(b.len(), 25);
        let b = batch_iter(100, 64, 3, 0, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 36]);
        let e0: Vec<usize> = batch_iter(100, 64, 3, 0, 0).unwrap().concat();
        let e1: Vec<usize> = batch_iter(100, 64, 3, 0, 1).unwrap().concat();
        assert_ne!(e0, e1);
        let (mut s0, mut s1) = (e0.clone(), e1.clone());
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, s1);
        assert!(batch_iter(10, 0, 3, 0, 0).is_err());
    }

    #[test]
    fn jsonl_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let long: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let body = format!(
            "{{\"text\": \"{}\", \"label\": 1}}\n\n{{\"tokens\": [1, 2, 3]}}\n",
            long.join(" ")
        );
        fs::write(&path, body).unwrap();
        let xs = load_jsonl(&path, 2000).unwrap();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[0].tokens.len(), 128);
        assert_eq!(xs[0].label, Some(1));
        assert_eq!(xs[1].label, None);
        assert_eq!(xs[1].tokens, vec![1, 2, 3]);

        fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, 2000).unwrap().is_empty());

        fs::write(&path, "{\"tokens\": [1]}\n{\"tokens\": [5000]}\n").unwrap();
        match load_jsonl(&path, 2000) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, "not json\n").unwrap();
        assert!(matches!(load_jsonl(&path, 2000), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn hashing_is_stable() {
        assert_eq!(hash_token("great", 2000), hash_token("great", 2000));
        assert!(hash_token("anything", 7) < 7);
        // FNV-1a 32 of "a" is 0xe40c292c
        assert_eq!(hash_token("a", u32::MAX as usize), 0xe40c_292c);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = small();
        let ds = generate_domain_pair(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.save(dir.path(), cfg.vocab_size, Some(&cfg), None).unwrap();
        let (back, m) = DomainPairDataset::load(&manifest).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m.generator.as_ref(), Some(&cfg));
        let first = fs::read(dir.path().join("source_train.jsonl")).unwrap();
        ds.save(dir.path(), cfg.vocab_size, Some(&cfg), None).unwrap();
        assert_eq!(first, fs::read(dir.path().join("source_train.jsonl")).unwrap());
    }
}
