//! Command-line verbs: train, predict, evaluate, report, synth, validate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_with_overrides, Config, DataConfig};
use crate::data::{read_embeddings, validate_bio, BioMode, Dataset, LabelSet};
use crate::error::{Error, Result};
use crate::eval::{entity_prf, reliability_report};
use crate::synth::{generate_corpus, write_corpus, SynthConfig};
use crate::trainer::{predict_all, train, write_outputs, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "scmm", version, about = "Sparse conditional HMM label model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the three-stage model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Dotted `key=value` config override; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Decode a JSONL split with a trained checkpoint.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Embedding file; defaults to the data path with an `.emb` extension.
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Score predictions against gold labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Comma-separated entity list; inferred from the files when absent.
        #[arg(long, value_delimiter = ',')]
        entities: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reliability versus LF F1 on a gold-labeled split.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Format-check a JSONL file and, optionally, its embeddings.
    Validate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        emb: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        entities: Vec<String>,
    },
}

/// Parses `argv`, runs the verb, and returns the process exit code. Errors go
/// to stderr as a JSON object.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            emit_error("usage", &e.to_string());
            return 2;
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            1
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let obj = json!({"error": {"kind": kind, "message": message.trim()}});
    let _ = writeln!(std::io::stderr(), "{obj}");
}

fn configure_threads() {
    if let Some(n) = std::env::var("SCMM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // fails only if a pool already exists, which is fine
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn print_json<T: Serialize>(v: &T) {
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string(v).expect("serializable"));
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, overrides } => {
            let cfg = Config::load(&config, &overrides)?;
            let dataset = load_training_data(&cfg.data, &cfg.train.eval_split)?;
            let outcome = train(&dataset, &cfg)?;
            create_dir(&out)?;
            write_outputs(&outcome, &out)?;
            let cfg_path = out.join("config.toml");
            let text = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
            std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
            let mut summary = json!({
                "stages": outcome.checkpoints.iter().map(|c| json!({"stage": c.stage.name(), "valid_f1": c.best_valid_f1, "epoch": c.epoch})).collect::<Vec<_>>(),
            });
            if let Some(test) = dataset.splits.get("test") {
                if !test.is_empty() && test.iter().all(|i| i.sentence.gold.is_some()) {
                    let pred = predict_all(&outcome.model, test)?;
                    let gold: Vec<&[usize]> = test.iter().map(|i| i.sentence.gold.as_deref().expect("checked")).collect();
                    let r = entity_prf(&gold, &pred, &outcome.label_set)?;
                    summary["test"] = serde_json::to_value(&r).expect("serializable");
                }
            }
            print_json(&summary);
            Ok(())
        }
        Command::Predict { model, data, emb, out } => {
            let ck = Checkpoint::load(&model)?;
            let ds = load_for_model(&ck, &data, emb.as_deref())?;
            let instances = ds.split("input")?;
            let pred = predict_all(&ck.model, instances)?;
            create_dir(&out)?;
            let path = out.join("predictions.jsonl");
            let mut w = std::io::BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            for (inst, p) in instances.iter().zip(&pred) {
                let line = json!({"id": inst.sentence.id, "labels": ds.label_set.decode(p)});
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            print_json(&json!({"predictions": path, "sentences": pred.len()}));
            Ok(())
        }
        Command::Evaluate { pred, gold, entities, out } => {
            let gold_seqs = read_label_file(&gold)?;
            let pred_seqs = read_label_file(&pred)?;
            let entities = if entities.is_empty() {
                infer_entities(gold_seqs.values().chain(pred_seqs.values()).flatten())
            } else {
                entities
            };
            let ls = LabelSet::new(&entities)?;
            let mut g = Vec::new();
            let mut p = Vec::new();
            for (id, labels) in &gold_seqs {
                let pl = pred_seqs.get(id).ok_or_else(|| Error::Schema {
                    id: id.clone(),
                    message: "no prediction for this sentence".into(),
                })?;
                let enc = |v: &Vec<String>| {
                    ls.encode(v).map_err(|l| Error::Schema {
                        id: id.clone(),
                        message: format!("unknown label '{l}'"),
                    })
                };
                g.push(enc(labels)?);
                p.push(enc(pl)?);
            }
            let report = entity_prf(&g, &p, &ls)?;
            if let Some(out) = out {
                create_dir(&out)?;
                let path = out.join("metrics.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report).expect("serializable"))
                    .map_err(|e| Error::io(&path, e))?;
            }
            print_json(&report);
            Ok(())
        }
        Command::Report { model, data, emb, out } => {
            let ck = Checkpoint::load(&model)?;
            let ds = load_for_model(&ck, &data, emb.as_deref())?;
            let report = reliability_report(&ck.model, ds.split("input")?, &ds.label_set)?;
            create_dir(&out)?;
            report.write(&out.join("reliability_report.json"), Some(&out.join("reliability_report.csv")))?;
            print_json(&json!({"pearson": report.pearson, "lfs": report.lfs}));
            Ok(())
        }
        Command::Synth { config, out, overrides } => {
            let text = match &config {
                Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                None => String::new(),
            };
            let cfg: SynthConfig = parse_with_overrides(&text, &overrides)?;
            let corpus = generate_corpus(&cfg)?;
            write_corpus(&corpus, &out)?;
            let sizes: BTreeMap<&String, usize> = corpus.dataset.splits.iter().map(|(k, v)| (k, v.len())).collect();
            print_json(&json!({"out": out, "splits": sizes, "lfs": corpus.dataset.lf_names.to_vec()}));
            Ok(())
        }
        Command::Validate { data, emb, entities } => {
            let report = validate_files(&data, emb.as_deref(), &entities)?;
            print_json(&report);
            if report["errors"].as_array().is_some_and(|e| !e.is_empty()) {
                return Err(Error::Schema {
                    id: data.display().to_string(),
                    message: format!("{} validation error(s)", report["errors"].as_array().map_or(0, Vec::len)),
                });
            }
            Ok(())
        }
    }
}

fn load_training_data(dc: &DataConfig, eval_split: &str) -> Result<Dataset> {
    let mut ds = Dataset::new(LabelSet::new(&dc.entities)?, Vec::new());
    let mut splits = vec![
        ("train", dc.train.clone(), dc.train_emb.as_ref()),
        (eval_split, dc.valid.clone(), dc.valid_emb.as_ref()),
    ];
    if let Some(test) = &dc.test {
        splits.push(("test", test.clone(), dc.test_emb.as_ref()));
    }
    for (name, path, emb) in splits {
        ds.load_split(name, &path)?;
        ds.attach_embeddings(name, &DataConfig::embedding_path(&path, emb))?;
    }
    Ok(ds)
}

/// Loads a split for a checkpoint, checking its LF list.
fn load_for_model(ck: &Checkpoint, data: &Path, emb: Option<&Path>) -> Result<Dataset> {
    let spec = &ck.model.spec;
    let mut ds = Dataset::new(LabelSet::new(&spec.entities)?, Vec::new());
    ds.load_split("input", data)?;
    let expected = &spec.lf_names[..spec.num_infer_lfs()];
    if ds.lf_names[..] != *expected {
        return Err(Error::Schema {
            id: data.display().to_string(),
            message: format!("LF set {:?} does not match the model's {:?}", ds.lf_names, expected),
        });
    }
    let emb = emb.map(Path::to_path_buf).unwrap_or_else(|| data.with_extension("emb"));
    ds.attach_embeddings("input", &emb)?;
    Ok(ds)
}

/// Reads `{"id", "labels"}` from each JSONL line.
fn read_label_file(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let id = v["id"].as_str().map(str::to_string).ok_or_else(|| Error::Parse {
            line: i + 1,
            message: "missing string field 'id'".into(),
        })?;
        let labels: Vec<String> = serde_json::from_value(v["labels"].clone()).map_err(|_| Error::Schema {
            id: id.clone(),
            message: "missing or malformed 'labels'".into(),
        })?;
        out.insert(id, labels);
    }
    Ok(out)
}

fn infer_entities<'a>(labels: impl Iterator<Item = &'a String>) -> Vec<String> {
    let set: BTreeSet<&str> = labels
        .filter_map(|l| l.strip_prefix("B-").or_else(|| l.strip_prefix("I-")))
        .collect();
    set.into_iter().map(str::to_string).collect()
}

/// Entities mentioned anywhere in a dataset file.
fn scan_entities(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&line) else { continue };
        if let Some(ann) = v["annotations"].as_object() {
            for seq in ann.values().filter_map(|s| s.as_array()) {
                labels.extend(seq.iter().filter_map(|x| x.as_str().map(str::to_string)));
            }
        }
        if let Some(seq) = v["labels"].as_array() {
            labels.extend(seq.iter().filter_map(|x| x.as_str().map(str::to_string)));
        }
    }
    Ok(infer_entities(labels.iter()))
}

fn validate_files(data: &Path, emb: Option<&Path>, entities: &[String]) -> Result<serde_json::Value> {
    let entities = if entities.is_empty() {
        scan_entities(data)?
    } else {
        entities.to_vec()
    };
    let mut errors: Vec<String> = Vec::new();
    if entities.is_empty() {
        errors.push("no entity labels found".into());
        return Ok(json!({"data": data, "errors": errors}));
    }
    let mut ds = Dataset::new(LabelSet::new(&entities)?, Vec::new());
    if let Err(e) = ds.load_split("input", data) {
        errors.push(e.to_string());
        return Ok(json!({"data": data, "entities": entities, "errors": errors}));
    }
    let strict_warnings: usize = ds
        .split("input")?
        .iter()
        .filter_map(|i| i.sentence.gold.as_ref())
        .filter(|g| validate_bio(g, ds.label_set.num_labels(), BioMode::Strict).is_err())
        .count();
    let mut emb_info = serde_json::Value::Null;
    if let Some(emb) = emb {
        match read_embeddings(emb) {
            Ok(blocks) => {
                let dim = blocks.first().map_or(0, |b| b.ncols());
                emb_info = json!({"path": emb, "sentences": blocks.len(), "dim": dim});
                if let Err(e) = ds.attach_embeddings("input", emb) {
                    errors.push(e.to_string());
                }
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    let instances = ds.split("input")?;
    Ok(json!({
        "data": data,
        "entities": entities,
        "sentences": instances.len(),
        "tokens": instances.iter().map(|i| i.len()).sum::<usize>(),
        "lfs": ds.lf_names.to_vec(),
        "with_gold": instances.iter().filter(|i| i.sentence.gold.is_some()).count(),
        "gold_bio_strict_violations": strict_warnings,
        "embeddings": emb_info,
        "errors": errors,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_inference() {
        let labels = ["O", "B-PER", "I-LOC", "I-PER"].map(String::from);
        assert_eq!(infer_entities(labels.iter()), vec!["LOC", "PER"]);
    }

    #[test]
    fn unknown_verb_is_usage_error() {
        assert_eq!(dispatch(["scmm", "frobnicate"]), 2);
        assert_eq!(dispatch(["scmm", "train"]), 2);
    }
}
