//! Corpus file IO.
//!
//! Corpus files are JSON Lines, one patient per line:
//! `{"id": str, "events": [{"code": str, "t": f64, "v": f64?}], "anchor": f64,
//!   "labels": {str: f64 | [f64]}}`
//! Vocabulary files are JSON `{"tokens": [str], "utility": [f64]}` with
//! implicit ids `position + 2` (after PAD and MASK).

use super::{bin_events, EventRecord, Label, PatientSequence, Vocabulary};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// How raw event streams are turned into model-ready sequences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub bin_width: f64,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig { bin_width: 24.0 }
    }
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    code: String,
    t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    v: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Scalar(f64),
    Vector(Vec<f64>),
}

#[derive(Serialize, Deserialize)]
struct RawPatient {
    id: String,
    events: Vec<RawEvent>,
    anchor: f64,
    labels: BTreeMap<String, RawLabel>,
}

fn convert_patient(
    raw: RawPatient,
    line: usize,
    schema: &SchemaConfig,
    vocab: &mut Vocabulary,
    fixed_vocab: bool,
) -> Result<PatientSequence> {
    let mut events = Vec::with_capacity(raw.events.len());
    for ev in &raw.events {
        if !ev.t.is_finite() || ev.t < 0.0 {
            return Err(Error::Validation(format!(
                "patient {} (line {line}): negative or non-finite event time {}",
                raw.id, ev.t
            )));
        }
        if ev.t >= raw.anchor {
            return Err(Error::Validation(format!(
                "patient {} (line {line}): event time {} at or past anchor {}",
                raw.id, ev.t, raw.anchor
            )));
        }
        let code = if fixed_vocab {
            vocab.id_of(&ev.code).ok_or_else(|| {
                Error::Validation(format!(
                    "patient {} (line {line}): token '{}' not in fixed vocabulary",
                    raw.id, ev.code
                ))
            })?
        } else {
            vocab.intern(&ev.code)
        };
        events.push(EventRecord {
            code,
            time: ev.t,
            value: ev.v,
        });
    }
    if events.is_empty() {
        return Err(Error::Validation(format!(
            "patient {} (line {line}): no events",
            raw.id
        )));
    }
    let labels = raw
        .labels
        .into_iter()
        .map(|(k, v)| {
            let label = match v {
                RawLabel::Scalar(x) => Label::Binary(x),
                RawLabel::Vector(xs) => Label::MultiHot(xs),
            };
            (k, label)
        })
        .collect();
    Ok(PatientSequence {
        id: raw.id,
        bins: bin_events(&events, schema.bin_width)?,
        labels,
        anchor_time: raw.anchor,
    })
}

fn parse_lines(
    path: &Path,
    schema: &SchemaConfig,
    vocab: &mut Vocabulary,
    fixed_vocab: bool,
) -> Result<Vec<PatientSequence>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut sequences = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPatient = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let seq = convert_patient(raw, line_no, schema, vocab, fixed_vocab)?;
        seq.validate(vocab.size())?;
        sequences.push(seq);
    }
    Ok(sequences)
}

/// Parse a corpus, building a vocabulary with deterministic first-appearance
/// id assignment.
pub fn parse_corpus(
    path: impl AsRef<Path>,
    schema: &SchemaConfig,
) -> Result<(Vec<PatientSequence>, Vocabulary)> {
    let mut vocab = Vocabulary::new();
    let sequences = parse_lines(path.as_ref(), schema, &mut vocab, false)?;
    Ok((sequences, vocab))
}

/// Parse a corpus against an existing vocabulary (e.g. the one a checkpoint
/// was trained with); unknown tokens are an error rather than new ids.
pub fn parse_corpus_with_vocab(
    path: impl AsRef<Path>,
    schema: &SchemaConfig,
    vocab: &Vocabulary,
) -> Result<Vec<PatientSequence>> {
    let mut v = vocab.clone();
    let before = v.size();
    let sequences = parse_lines(path.as_ref(), schema, &mut v, true)?;
    debug_assert_eq!(before, v.size());
    Ok(sequences)
}

/// Serialize sequences back to JSON Lines. Inverse of [`parse_corpus`] up to
/// bin reconstruction: `parse(write(corpus))` is structurally equal.
pub fn write_corpus(
    path: impl AsRef<Path>,
    sequences: &[PatientSequence],
    vocab: &Vocabulary,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in sequences {
        let raw = RawPatient {
            id: seq.id.clone(),
            events: seq
                .events_flat()
                .map(|e| RawEvent {
                    code: vocab
                        .token_of(e.code)
                        .unwrap_or_else(|| panic!("code {} missing from vocabulary", e.code))
                        .to_string(),
                    t: e.time,
                    v: e.value,
                })
                .collect(),
            anchor: seq.anchor_time,
            labels: seq
                .labels
                .iter()
                .map(|(k, v)| {
                    let raw = match v {
                        Label::Binary(x) => RawLabel::Scalar(*x),
                        Label::MultiHot(xs) => RawLabel::Vector(xs.clone()),
                    };
                    (k.clone(), raw)
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    utility: Vec<f64>,
}

pub fn write_vocabulary(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
    let file = VocabFile {
        tokens: vocab.tokens().to_vec(),
        utility: vocab.utilities().to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    let file: VocabFile = serde_json::from_str(&text)?;
    Vocabulary::from_parts(file.tokens, file.utility)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_valid_record() {
        let f = write_temp(
            r#"{"id":"p1","events":[{"code":"DX_A","t":0.0}],"anchor":48,"labels":{"mortality":0}}"#,
        );
        let (seqs, vocab) = parse_corpus(f.path(), &SchemaConfig::default()).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].bins.len(), 1);
        assert_eq!(seqs[0].bins[0].events[0].code, 2);
        assert_eq!(vocab.size(), 3);
        assert_eq!(
            seqs[0].labels.get("mortality"),
            Some(&Label::Binary(0.0))
        );
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = write_temp("");
        let (seqs, vocab) = parse_corpus(f.path(), &SchemaConfig::default()).unwrap();
        assert!(seqs.is_empty());
        assert_eq!(vocab.size(), 2); // only reserved ids
    }

    #[test]
    fn duplicate_codes_counted_once() {
        let f = write_temp(concat!(
            r#"{"id":"p1","events":[{"code":"A","t":0.0},{"code":"B","t":1.0}],"anchor":48,"labels":{}}"#,
            "\n",
            r#"{"id":"p2","events":[{"code":"B","t":0.0},{"code":"C","t":1.0}],"anchor":48,"labels":{}}"#,
            "\n",
            r#"{"id":"p3","events":[{"code":"A","t":2.0}],"anchor":48,"labels":{}}"#,
        ));
        let (_, vocab) = parse_corpus(f.path(), &SchemaConfig::default()).unwrap();
        // 3 distinct codes + 2 reserved
        assert_eq!(vocab.size(), 5);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_temp(concat!(
            r#"{"id":"p1","events":[{"code":"A","t":0.0}],"anchor":48,"labels":{}}"#,
            "\n",
            "not json",
        ));
        match parse_corpus(f.path(), &SchemaConfig::default()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("expected parse error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn negative_time_rejected() {
        let f = write_temp(
            r#"{"id":"p1","events":[{"code":"A","t":-1.0}],"anchor":48,"labels":{}}"#,
        );
        assert!(matches!(
            parse_corpus(f.path(), &SchemaConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn event_past_anchor_names_patient() {
        let f = write_temp(
            r#"{"id":"p42","events":[{"code":"A","t":50.0}],"anchor":48,"labels":{}}"#,
        );
        match parse_corpus(f.path(), &SchemaConfig::default()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("p42"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_vocab_rejects_unknown_tokens() {
        let f = write_temp(
            r#"{"id":"p1","events":[{"code":"NEW","t":0.0}],"anchor":48,"labels":{}}"#,
        );
        let vocab = Vocabulary::from_parts(vec!["OLD".into()], vec![1.0]).unwrap();
        assert!(parse_corpus_with_vocab(f.path(), &SchemaConfig::default(), &vocab).is_err());
    }

    #[test]
    fn corpus_roundtrip_is_structurally_equal() {
        let f = write_temp(concat!(
            r#"{"id":"p1","events":[{"code":"A","t":0.5,"v":1.25},{"code":"B","t":30.0}],"anchor":72,"labels":{"gap":1.0,"multi":[0.0,1.0]}}"#,
            "\n",
            r#"{"id":"p2","events":[{"code":"B","t":3.0}],"anchor":48,"labels":{"gap":0.0}}"#,
        ));
        let schema = SchemaConfig::default();
        let (seqs, vocab) = parse_corpus(f.path(), &schema).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_corpus(out.path(), &seqs, &vocab).unwrap();
        let (reparsed, revocab) = parse_corpus(out.path(), &schema).unwrap();
        assert_eq!(seqs, reparsed);
        assert_eq!(vocab.tokens(), revocab.tokens());
    }

    #[test]
    fn vocabulary_file_roundtrip() {
        let mut vocab = Vocabulary::new();
        vocab.intern("A");
        vocab.intern("B");
        vocab.set_utility(2, 0.25);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_vocabulary(f.path(), &vocab).unwrap();
        let back = read_vocabulary(f.path()).unwrap();
        assert_eq!(back.tokens(), vocab.tokens());
        assert_eq!(back.utility_of(2), 0.25);
        assert_eq!(back.id_of("B"), Some(3));
    }
}
