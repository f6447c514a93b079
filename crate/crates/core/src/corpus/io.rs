//! Line-delimited file formats for corpus, lexicon, KB and questions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MentionRecord {
    entity_id: EntityId,
    start: u32,
    end: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    doc_id: DocId,
    tokens: Vec<String>,
    #[serde(default)]
    mentions: Vec<MentionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    title_entity: Option<EntityId>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (line_no, line) in lines(path)? {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for rec in records {
        let line = serde_json::to_string(&rec).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the corpus file and entity lexicon and validates them together.
pub fn ingest_corpus(corpus_path: &Path, lexicon_path: &Path) -> Result<Corpus> {
    let entities: Vec<Entity> = read_jsonl(lexicon_path)?;
    let records: Vec<DocumentRecord> = read_jsonl(corpus_path)?;
    let mut documents = Vec::with_capacity(records.len());
    let mut mentions = Vec::new();
    for rec in records {
        for m in rec.mentions {
            mentions.push(Mention {
                mention_id: 0,
                entity_id: m.entity_id,
                doc_id: rec.doc_id,
                start: m.start,
                end: m.end,
            });
        }
        documents.push(Document {
            doc_id: rec.doc_id,
            tokens: rec.tokens,
            title_entity: rec.title_entity,
        });
    }
    let corpus = Corpus::new(documents, entities, mentions)?;
    log::info!(
        "ingested {} docs, |E| = {}, |M| = {}",
        corpus.n_docs(),
        corpus.n_entities(),
        corpus.n_mentions()
    );
    Ok(corpus)
}

pub fn write_corpus(corpus: &Corpus, corpus_path: &Path, lexicon_path: &Path) -> Result<()> {
    write_jsonl(lexicon_path, corpus.entities())?;
    let records = corpus.documents().iter().map(|d| DocumentRecord {
        doc_id: d.doc_id,
        tokens: d.tokens.clone(),
        mentions: corpus
            .mentions_in_doc(d.doc_id)
            .iter()
            .map(|m| MentionRecord {
                entity_id: m.entity_id,
                start: m.start,
                end: m.end,
            })
            .collect(),
        title_entity: d.title_entity,
    });
    write_jsonl(corpus_path, records)
}

pub fn write_kb(kb: &KnowledgeBase, kb_path: &Path, relations_path: &Path) -> Result<()> {
    let mut w = create(kb_path)?;
    for t in kb.triples() {
        writeln!(w, "{}\t{}\t{}", t.subject, t.relation, t.object)
            .map_err(|e| Error::io(kb_path, e))?;
    }
    w.flush().map_err(|e| Error::io(kb_path, e))?;
    let mut w = create(relations_path)?;
    for (r, desc) in kb.relation_descriptions() {
        writeln!(w, "{r}\t{desc}").map_err(|e| Error::io(relations_path, e))?;
    }
    w.flush().map_err(|e| Error::io(relations_path, e))
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line: usize, what: &str) -> Result<T> {
    field
        .and_then(|f| f.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("expected {what}"),
        })
}

pub fn read_kb(kb_path: &Path, relations_path: &Path, n_entities: usize) -> Result<KnowledgeBase> {
    let mut descriptions = BTreeMap::new();
    for (line_no, line) in lines(relations_path)? {
        let line = line.map_err(|e| Error::io(relations_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let r: RelationId = parse_field(parts.next(), line_no, "relation id")?;
        let desc = parts.next().ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected relation<TAB>description".into(),
        })?;
        descriptions.insert(r, desc.to_string());
    }
    let mut triples = Vec::new();
    for (line_no, line) in lines(kb_path)? {
        let line = line.map_err(|e| Error::io(kb_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let subject = parse_field(parts.next(), line_no, "subject id")?;
        let relation = parse_field(parts.next(), line_no, "relation id")?;
        let object = parse_field(parts.next(), line_no, "object id")?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: "expected exactly three tab-separated fields".into(),
            });
        }
        triples.push(Triple {
            subject,
            relation,
            object,
        });
    }
    KnowledgeBase::new(triples, descriptions, n_entities)
}

pub fn write_questions(path: &Path, questions: &[MultiHopQuestion]) -> Result<()> {
    write_jsonl(path, questions)
}

pub fn read_questions(path: &Path) -> Result<Vec<MultiHopQuestion>> {
    let questions: Vec<MultiHopQuestion> = read_jsonl(path)?;
    for q in &questions {
        q.validate()?;
    }
    Ok(questions)
}
