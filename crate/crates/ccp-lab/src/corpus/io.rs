use super::{CorpusError, Document, ParallelIndex, ParallelPair, Result, Sentence};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Wire form of one corpus record: one document per JSON line.
#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    doc_id: String,
    lang: String,
    sentences: Vec<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    latents: Option<Vec<Vec<f64>>>,
}

/// Result of loading a corpus file, with a counter of documents that were
/// skipped for being empty.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    pub skipped_empty: usize,
}

pub fn save_corpus(path: &Path, documents: &[Document]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in documents {
        let latents: Option<Vec<Vec<f64>>> = if doc.sentences.iter().all(|s| s.latent.is_some()) {
            Some(
                doc.sentences
                    .iter()
                    .map(|s| s.latent.clone().unwrap())
                    .collect(),
            )
        } else {
            None
        };
        let record = DocumentRecord {
            doc_id: doc.doc_id.clone(),
            lang: doc.lang.clone(),
            sentences: doc.sentences.iter().map(|s| s.tokens.clone()).collect(),
            latents,
        };
        serde_json::to_writer(&mut w, &record)
            .map_err(|e| CorpusError::Malformed { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a JSON-Lines corpus. Malformed records error with their line number;
/// empty documents are skipped and counted.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut documents = Vec::new();
    let mut skipped_empty = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if record.sentences.is_empty() {
            skipped_empty += 1;
            log::warn!("skipping empty document {:?} at line {line_no}", record.doc_id);
            continue;
        }
        if let Some(lats) = &record.latents {
            if lats.len() != record.sentences.len() {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!(
                        "latents count {} does not match sentence count {}",
                        lats.len(),
                        record.sentences.len()
                    ),
                });
            }
        }
        let mut sentences = Vec::with_capacity(record.sentences.len());
        for (p, tokens) in record.sentences.into_iter().enumerate() {
            if tokens.is_empty() {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    message: format!("sentence {p} has no tokens"),
                });
            }
            sentences.push(Sentence {
                tokens,
                lang: record.lang.clone(),
                latent: record.latents.as_ref().map(|l| l[p].clone()),
            });
        }
        documents.push(Document {
            doc_id: record.doc_id,
            lang: record.lang,
            sentences,
        });
    }
    Ok(LoadedCorpus { documents, skipped_empty })
}

pub fn save_parallel_index(path: &Path, index: &ParallelIndex) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for pair in index {
        serde_json::to_writer(&mut w, pair)
            .map_err(|e| CorpusError::Malformed { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_parallel_index(path: &Path) -> Result<ParallelIndex> {
    let reader = BufReader::new(File::open(path)?);
    let mut index = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: ParallelPair = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        index.push(pair);
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
    use std::io::Write as _;

    #[test]
    fn round_trip_preserves_content() {
        let spec = SyntheticSpec {
            languages: vec!["en".into(), "fr".into()],
            latent_dim: 3,
            walk_correlation: 0.5,
            docs_per_language: 3,
            heldout_docs_per_language: 0,
            sentences_per_doc: 4,
            vocab_size: 8,
            noise_std: 0.0,
            seed: 3,
        };
        let (train, index, _, _) = generate_synthetic_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cpath = dir.path().join("corpus.jsonl");
        let ipath = dir.path().join("index.jsonl");
        save_corpus(&cpath, &train).unwrap();
        save_parallel_index(&ipath, &index).unwrap();
        let loaded = load_corpus(&cpath).unwrap();
        assert_eq!(loaded.documents, train);
        assert_eq!(loaded.skipped_empty, 0);
        assert_eq!(load_parallel_index(&ipath).unwrap(), index);
    }

    #[test]
    fn simple_file_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"doc_id":"a","lang":"en","sentences":[[1,2],[3],[4,5,6]]}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"b","lang":"fr","sentences":[[7],[8],[9]]}}"#).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.documents.len(), 2);
        assert_eq!(loaded.documents[0].len(), 3);
        assert_eq!(loaded.documents[1].len(), 3);
        assert_eq!(loaded.documents[1].sentences[2].tokens, vec![9]);
    }

    #[test]
    fn missing_lang_errors_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"doc_id":"a","lang":"en","sentences":[[1]]}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"b","sentences":[[1]]}}"#).unwrap();
        match load_corpus(&path).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_documents_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"doc_id":"a","lang":"en","sentences":[]}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"b","lang":"en","sentences":[[1,2]]}}"#).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.documents.len(), 1);
        assert_eq!(loaded.skipped_empty, 1);
    }
}
