//! Domain types and ingestion for weakly annotated sentences.
//!
//! Annotations live in a JSONL file, one sentence per line:
//!
//! ```text
//! {"id": "s0", "tokens": ["Mark", "went"], "annotations": {"lf0": ["B-PER", "O"]}, "labels": ["B-PER", "O"]}
//! ```
//!
//! Embeddings live in a separate little-endian binary file (magic `SCMM`, version 1)
//! holding `T + 1` rows per sentence, sentence embedding first.
//!
//! Labels are indexed from zero with `O` fixed at index 0; entity `i` owns
//! `B-` at `2i + 1` and `I-` at `2i + 2`. An LF that abstains on a token is
//! stored as observing `O`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SCMM";
pub const EMBEDDING_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Label set
// ---------------------------------------------------------------------------

/// BIO label universe built from an ordered list of entity types.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    entities: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    /// Index of the `O` label.
    pub const O: usize = 0;

    pub fn new<S: AsRef<str>>(entities: &[S]) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Config("entity list must not be empty".into()));
        }
        let mut labels = vec!["O".to_string()];
        for e in entities {
            let e = e.as_ref();
            if e.is_empty() || e.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity name '{e}'")));
            }
            labels.push(format!("B-{e}"));
            labels.push(format!("I-{e}"));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate label '{l}'")));
            }
        }
        Ok(Self {
            entities: entities.iter().map(|e| e.as_ref().to_string()).collect(),
            labels,
            index,
        })
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn begin(entity: usize) -> usize {
        2 * entity + 1
    }

    pub fn inside(entity: usize) -> usize {
        2 * entity + 2
    }

    /// Entity index carried by a label, `None` for `O`.
    pub fn entity_of(label: usize) -> Option<usize> {
        if label == Self::O {
            None
        } else {
            Some((label - 1) / 2)
        }
    }

    pub fn is_begin(label: usize) -> bool {
        label != Self::O && label % 2 == 1
    }

    pub fn is_inside(label: usize) -> bool {
        label != Self::O && label.is_multiple_of(2)
    }

    pub fn encode(&self, labels: &[String]) -> std::result::Result<Vec<usize>, String> {
        labels
            .iter()
            .map(|l| self.index_of(l).ok_or_else(|| l.clone()))
            .collect()
    }

    pub fn decode(&self, seq: &[usize]) -> Vec<String> {
        seq.iter().map(|&i| self.labels[i].clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// Per-sentence records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub gold: Option<Vec<usize>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// K×T grid of observed label indices, one row per labeling function.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakAnnotationMatrix {
    pub lf_names: Arc<[String]>,
    pub obs: Array2<usize>,
}

impl WeakAnnotationMatrix {
    pub fn num_lfs(&self) -> usize {
        self.obs.nrows()
    }

    pub fn len(&self) -> usize {
        self.obs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.ncols() == 0
    }

    /// Observation sequence of one labeling function.
    pub fn lf_sequence(&self, k: usize) -> Vec<usize> {
        self.obs.row(k).to_vec()
    }
}

/// Sentence embedding in row 0, token embeddings in rows 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.ncols() == 0 || vectors.nrows() < 2 {
            return Err(Error::Embedding(format!(
                "embedding block must have at least 2 rows and 1 column, got {}x{}",
                vectors.nrows(),
                vectors.ncols()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding value".into()));
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn num_tokens(&self) -> usize {
        self.vectors.nrows() - 1
    }

    pub fn sentence(&self) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(0)
    }

    /// Token embedding for 1-based token position `t`.
    pub fn token(&self, t: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub sentence: Sentence,
    pub weak: WeakAnnotationMatrix,
    pub embedding: Option<EmbeddingSequence>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    pub fn embedding(&self) -> Result<&EmbeddingSequence> {
        self.embedding.as_ref().ok_or_else(|| Error::Schema {
            id: self.sentence.id.clone(),
            message: "no embeddings attached".into(),
        })
    }
}

/// Labeled splits sharing one label set and one LF list.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label_set: LabelSet,
    pub lf_names: Arc<[String]>,
    pub splits: BTreeMap<String, Vec<Instance>>,
    /// Gold-label BIO violations found at load time, keyed by sentence id.
    pub bio_warnings: Vec<(String, Vec<BioViolation>)>,
}

impl Dataset {
    pub fn new(label_set: LabelSet, lf_names: Vec<String>) -> Self {
        Self {
            label_set,
            lf_names: lf_names.into(),
            splits: BTreeMap::new(),
            bio_warnings: Vec::new(),
        }
    }

    pub fn num_lfs(&self) -> usize {
        self.lf_names.len()
    }

    pub fn split(&self, name: &str) -> Result<&[Instance]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("dataset has no split named '{name}'")))
    }

    /// Loads a JSONL file as split `name`, checking LF consistency with existing splits.
    pub fn load_split(&mut self, name: &str, path: &Path) -> Result<()> {
        let parsed = read_jsonl(path, &self.label_set)?;
        if self.splits.is_empty() && self.lf_names.is_empty() {
            self.lf_names = parsed.lf_names.clone();
        } else if parsed.lf_names[..] != self.lf_names[..] && !parsed.instances.is_empty() {
            return Err(Error::Schema {
                id: parsed.instances[0].sentence.id.clone(),
                message: format!(
                    "LF set {:?} differs from dataset LF set {:?}",
                    parsed.lf_names, self.lf_names
                ),
            });
        }
        let lf_names = self.lf_names.clone();
        let mut instances = parsed.instances;
        for inst in &mut instances {
            inst.weak.lf_names = lf_names.clone();
        }
        self.bio_warnings.extend(parsed.bio_warnings);
        self.splits.insert(name.to_string(), instances);
        Ok(())
    }

    /// Attaches embeddings from a binary file to every sentence of split `name`.
    pub fn attach_embeddings(&mut self, name: &str, path: &Path) -> Result<()> {
        let blocks = read_embeddings(path)?;
        let split = self
            .splits
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("dataset has no split named '{name}'")))?;
        if blocks.len() != split.len() {
            return Err(Error::Embedding(format!(
                "count mismatch: file holds {} sentences, split '{name}' has {}",
                blocks.len(),
                split.len()
            )));
        }
        for (inst, block) in split.iter().zip(&blocks) {
            if block.nrows() != inst.len() + 1 {
                return Err(Error::Embedding(format!(
                    "length mismatch for sentence '{}': {} tokens but {} embedding rows",
                    inst.sentence.id,
                    inst.len(),
                    block.nrows()
                )));
            }
        }
        for (inst, block) in split.iter_mut().zip(blocks) {
            inst.embedding = Some(EmbeddingSequence::new(block)?);
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.splits
            .values()
            .flat_map(|s| s.iter())
            .find_map(|i| i.embedding.as_ref().map(|e| e.dim()))
    }
}

/// Loads one JSONL file; the split is named after the file stem.
pub fn load_dataset<S: AsRef<str>>(path: &Path, entities: &[S]) -> Result<Dataset> {
    let label_set = LabelSet::new(entities)?;
    let mut ds = Dataset::new(label_set, Vec::new());
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("train")
        .to_string();
    ds.load_split(&name, path)?;
    Ok(ds)
}

/// Returns `dataset` with embeddings from `path` attached to split `split`.
pub fn load_embeddings(path: &Path, mut dataset: Dataset, split: &str) -> Result<Dataset> {
    dataset.attach_embeddings(split, path)?;
    Ok(dataset)
}

// ---------------------------------------------------------------------------
// BIO validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BioMode {
    Strict,
    #[default]
    Conll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BioViolation {
    pub position: usize,
    pub label: usize,
    pub reason: &'static str,
}

/// Checks a label sequence against the BIO grammar.
///
/// Strict mode rejects any `I-e` not preceded by `B-e` or `I-e`; conll mode
/// treats such a token as a chunk start, so only out-of-range indices fail.
pub fn validate_bio(
    seq: &[usize],
    num_labels: usize,
    mode: BioMode,
) -> std::result::Result<(), Vec<BioViolation>> {
    let mut violations = Vec::new();
    let mut prev = LabelSet::O;
    for (pos, &label) in seq.iter().enumerate() {
        if label >= num_labels {
            violations.push(BioViolation {
                position: pos,
                label,
                reason: "label index out of range",
            });
            prev = LabelSet::O;
            continue;
        }
        if mode == BioMode::Strict && LabelSet::is_inside(label) {
            let ent = LabelSet::entity_of(label);
            if prev == LabelSet::O || LabelSet::entity_of(prev) != ent {
                violations.push(BioViolation {
                    position: pos,
                    label,
                    reason: "inside tag without matching begin",
                });
            }
        }
        prev = label;
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub tokens: Vec<String>,
    pub annotations: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

struct ParsedSplit {
    lf_names: Arc<[String]>,
    instances: Vec<Instance>,
    bio_warnings: Vec<(String, Vec<BioViolation>)>,
}

fn schema(id: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        id: id.to_string(),
        message: message.into(),
    }
}

/// Converts one parsed record into an instance, validating it against `label_set`.
pub fn record_to_instance(
    record: Record,
    label_set: &LabelSet,
    lf_names: &Arc<[String]>,
) -> Result<(Instance, Option<Vec<BioViolation>>)> {
    let id = record.id;
    let t = record.tokens.len();
    if t == 0 {
        return Err(schema(&id, "sentence has no tokens"));
    }
    let names: Vec<&String> = record.annotations.keys().collect();
    if names.len() != lf_names.len() || names.iter().zip(lf_names.iter()).any(|(a, b)| *a != b) {
        return Err(schema(
            &id,
            format!("inconsistent LF set: got {names:?}, expected {lf_names:?}"),
        ));
    }
    let mut obs = Array2::<usize>::zeros((lf_names.len(), t));
    for (k, (lf, seq)) in record.annotations.iter().enumerate() {
        if seq.len() != t {
            return Err(schema(
                &id,
                format!("annotation length {} for LF '{lf}' != {t} tokens", seq.len()),
            ));
        }
        let enc = label_set
            .encode(seq)
            .map_err(|l| schema(&id, format!("unknown label '{l}' from LF '{lf}'")))?;
        for (j, v) in enc.into_iter().enumerate() {
            obs[[k, j]] = v;
        }
    }
    let mut warnings = None;
    let gold = match record.labels {
        Some(labels) => {
            if labels.len() != t {
                return Err(schema(
                    &id,
                    format!("gold length {} != {t} tokens", labels.len()),
                ));
            }
            let enc = label_set
                .encode(&labels)
                .map_err(|l| schema(&id, format!("unknown label '{l}' in gold labels")))?;
            if let Err(v) = validate_bio(&enc, label_set.num_labels(), BioMode::Conll) {
                warnings = Some(v);
            }
            Some(enc)
        }
        None => None,
    };
    Ok((
        Instance {
            sentence: Sentence {
                id,
                tokens: record.tokens,
                gold,
            },
            weak: WeakAnnotationMatrix {
                lf_names: lf_names.clone(),
                obs,
            },
            embedding: None,
        },
        warnings,
    ))
}

fn read_jsonl(path: &Path, label_set: &LabelSet) -> Result<ParsedSplit> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lf_names: Option<Arc<[String]>> = None;
    let mut instances = Vec::new();
    let mut bio_warnings = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("<line {line_no}>"));
        let record: Record = serde_json::from_value(value).map_err(|e| schema(&id, e.to_string()))?;
        let names = lf_names
            .get_or_insert_with(|| record.annotations.keys().cloned().collect::<Vec<_>>().into())
            .clone();
        let (inst, warn) = record_to_instance(record, label_set, &names)?;
        if let Some(w) = warn {
            bio_warnings.push((inst.sentence.id.clone(), w));
        }
        instances.push(inst);
    }
    Ok(ParsedSplit {
        lf_names: lf_names.unwrap_or_else(|| Vec::new().into()),
        instances,
        bio_warnings,
    })
}

pub fn instance_to_record(inst: &Instance, label_set: &LabelSet) -> Record {
    let annotations = inst
        .weak
        .lf_names
        .iter()
        .enumerate()
        .map(|(k, name)| (name.clone(), label_set.decode(&inst.weak.lf_sequence(k))))
        .collect();
    Record {
        id: inst.sentence.id.clone(),
        tokens: inst.sentence.tokens.clone(),
        annotations,
        labels: inst.sentence.gold.as_ref().map(|g| label_set.decode(g)),
    }
}

pub fn write_jsonl(path: &Path, instances: &[Instance], label_set: &LabelSet) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let rec = instance_to_record(inst, label_set);
        serde_json::to_writer(&mut w, &rec).expect("record serialization cannot fail");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Embedding binary
// ---------------------------------------------------------------------------

/// Reads every `(T+1)×d` block of an embedding file.
pub fn read_embeddings(path: &Path) -> Result<Vec<Array2<f64>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::Embedding(format!("truncated or unreadable file: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(Error::Embedding(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Embedding(format!("unsupported version {version}")));
    }
    let m = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let d = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if d == 0 {
        return Err(Error::Embedding("embedding dimension is zero".into()));
    }
    let mut blocks = Vec::with_capacity(m);
    let mut buf = Vec::new();
    for s in 0..m {
        let t = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let n = (t + 1) * d;
        buf.resize(n, 0f32);
        r.read_f32_into::<LittleEndian>(&mut buf).map_err(io)?;
        if let Some(pos) = buf.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding value at sentence {s}, offset {pos}"
            )));
        }
        let block = Array2::from_shape_vec((t + 1, d), buf.iter().map(|&v| v as f64).collect())
            .expect("shape matches buffer length");
        blocks.push(block);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io)? != 0 {
        return Err(Error::Embedding("trailing bytes after last sentence".into()));
    }
    Ok(blocks)
}

/// Writes embedding blocks in file order. All blocks must share one width.
pub fn write_embeddings<'a, I>(path: &Path, blocks: I) -> Result<()>
where
    I: IntoIterator<Item = &'a Array2<f64>>,
{
    let blocks: Vec<&Array2<f64>> = blocks.into_iter().collect();
    let d = blocks.first().map(|b| b.ncols()).unwrap_or(1);
    if let Some(b) = blocks.iter().find(|b| b.ncols() != d) {
        return Err(Error::Dimension {
            context: "embedding width",
            expected: d,
            actual: b.ncols(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(EMBEDDING_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(blocks.len() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
    for b in blocks {
        w.write_u32::<LittleEndian>((b.nrows() - 1) as u32).map_err(io)?;
        for v in b.iter() {
            w.write_f32::<LittleEndian>(*v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
