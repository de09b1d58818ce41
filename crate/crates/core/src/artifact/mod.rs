//! File formats.
//!
//! Binary files (model artifacts, embeddings) use the checksummed tensor
//! [`container`]. Intermediates between pipeline stages are tab-separated
//! text:
//!
//! * vocabulary: `max_item_id<TAB>N` once, then `item<TAB>id<TAB>is_output`
//! * windows: `user_id<TAB>window_index<TAB>i1,i2,...<TAB>label`
//! * sequences: `user_id<TAB>i1,i2,...`
//!
//! Lines starting with `#` are comments.

pub mod container;
mod model;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

pub use container::{Container, Tensor, TensorData, FORMAT_VERSION};
pub use model::{inspect, ModelArtifact, TrainingMetadata};

use crate::corpus::{PurchaseSequence, TrainingWindow, Vocabulary};
use crate::embedding::{Word2VecConfig, Word2VecModel};
use crate::{Error, ItemId, Result};

const EMBEDDINGS_KIND: &str = "embeddings";

pub fn embeddings_to_container(model: &Word2VecModel) -> Result<Container> {
    let mut c = Container::new(EMBEDDINGS_KIND, model::meta_object(model.config())?);
    let (n, d) = (model.items().len(), model.dim());
    c.push(Tensor::u32("items", &[n], model.items().to_vec()))?;
    c.push(Tensor::f32("input_vectors", &[n, d], model.input_vectors().to_vec()))?;
    c.push(Tensor::f32("context_vectors", &[n, d], model.context_vectors().to_vec()))?;
    Ok(c)
}

pub fn embeddings_from_container(mut c: Container) -> Result<Word2VecModel> {
    if c.kind != EMBEDDINGS_KIND {
        return Err(Error::Corrupt(format!("expected an embeddings file, found kind {:?}", c.kind)));
    }
    let cfg = Word2VecConfig::deserialize(&c.meta).map_err(|e| Error::Corrupt(format!("embedding config: {e}")))?;
    let n = c.tensor("items")?.shape.first().copied().unwrap_or(0);
    let items = c.take_u32("items", &[n])?;
    let input = c.take_f32("input_vectors", &[n, cfg.dim])?;
    let context = c.take_f32("context_vectors", &[n, cfg.dim])?;
    Word2VecModel::from_parts(items, input, context, cfg)
}

pub fn save_embeddings(model: &Word2VecModel, path: impl AsRef<Path>) -> Result<()> {
    embeddings_to_container(model)?.save(path)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Word2VecModel> {
    embeddings_from_container(Container::load(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-comment, non-empty lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_item_list(field: &str, line: usize) -> Result<Vec<ItemId>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad item id {s:?}"),
            })
        })
        .collect()
}

fn join_items(items: &[ItemId]) -> String {
    let mut s = String::with_capacity(items.len() * 6);
    for (k, item) in items.iter().enumerate() {
        if k > 0 {
            s.push(',');
        }
        let _ = write!(s, "{item}");
    }
    s
}

pub fn vocab_to_string(vocab: &Vocabulary) -> String {
    let mut s = String::from("# ordrec vocabulary: item<TAB>id<TAB>is_output\n");
    let _ = writeln!(s, "max_item_id\t{}", vocab.max_item_id());
    for &item in vocab.full_items() {
        let out = u8::from(vocab.output_index_of(item).is_some());
        let _ = writeln!(s, "item\t{item}\t{out}");
    }
    s
}

pub fn vocab_from_str(text: &str) -> Result<Vocabulary> {
    let mut max = None;
    let mut full = Vec::new();
    let mut outputs = Vec::new();
    for (line, l) in data_lines(text) {
        let bad = |msg: &str| Error::Parse {
            line,
            msg: msg.to_owned(),
        };
        let fields: Vec<&str> = l.split('\t').collect();
        match fields.as_slice() {
            ["max_item_id", n] => max = Some(n.parse().map_err(|_| bad("bad max_item_id"))?),
            ["item", id, out] => {
                let id: ItemId = id.parse().map_err(|_| bad("bad item id"))?;
                full.push(id);
                match *out {
                    "1" => outputs.push(id),
                    "0" => {}
                    _ => return Err(bad("is_output must be 0 or 1")),
                }
            }
            _ => return Err(bad("unrecognized vocabulary record")),
        }
    }
    let max = max.ok_or_else(|| Error::invalid("vocabulary lacks max_item_id"))?;
    Vocabulary::from_parts(full, outputs, max)
}

pub fn save_vocab(vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &vocab_to_string(vocab))
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    vocab_from_str(&read_text(path.as_ref())?)
}

pub fn windows_to_string(windows: &[TrainingWindow]) -> String {
    let mut s = String::from("# user_id\twindow_index\tinputs\tlabel\n");
    for w in windows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}",
            w.source_user,
            w.window_index,
            join_items(&w.inputs),
            w.label
        );
    }
    s
}

/// Parses a windows file; every window must have the same input length.
pub fn windows_from_str(text: &str) -> Result<Vec<TrainingWindow>> {
    let mut out: Vec<TrainingWindow> = Vec::new();
    for (line, l) in data_lines(text) {
        let bad = |msg: String| Error::Parse { line, msg };
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", fields.len())));
        }
        let window = TrainingWindow {
            source_user: fields[0].to_owned(),
            window_index: fields[1].parse().map_err(|_| bad("bad window index".into()))?,
            inputs: parse_item_list(fields[2], line)?,
            label: fields[3].parse().map_err(|_| bad("bad label".into()))?,
        };
        window.validate().map_err(|e| bad(e.to_string()))?;
        if let Some(first) = out.first() {
            if first.inputs.len() != window.inputs.len() {
                return Err(bad(format!(
                    "window has {} inputs, earlier windows have {}",
                    window.inputs.len(),
                    first.inputs.len()
                )));
            }
        }
        out.push(window);
    }
    Ok(out)
}

pub fn save_windows(windows: &[TrainingWindow], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &windows_to_string(windows))
}

pub fn load_windows(path: impl AsRef<Path>) -> Result<Vec<TrainingWindow>> {
    windows_from_str(&read_text(path.as_ref())?)
}

pub fn sequences_to_string(seqs: &[PurchaseSequence]) -> String {
    let mut s = String::from("# user_id\titems\n");
    for seq in seqs {
        let _ = writeln!(s, "{}\t{}", seq.user_id, join_items(&seq.items));
    }
    s
}

pub fn sequences_from_str(text: &str) -> Result<Vec<PurchaseSequence>> {
    data_lines(text)
        .map(|(line, l)| {
            let (user, items) = l.split_once('\t').ok_or_else(|| Error::Parse {
                line,
                msg: "expected user_id<TAB>items".into(),
            })?;
            Ok(PurchaseSequence {
                user_id: user.to_owned(),
                items: parse_item_list(items, line)?,
            })
        })
        .collect()
}
