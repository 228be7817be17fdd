use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Corpus, FieldRole, FieldSchema, SampleRecord, SplitTag};
use crate::error::{Error, Result};

pub const HEADER: &str = "CLSDCORPUS v1";

pub fn write_to<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let schema = &corpus.schema;
    writeln!(out, "{HEADER}")?;
    writeln!(out, "fields {}", schema.field_count())?;
    writeln!(out, "{}", join(schema.cardinalities().iter()))?;
    writeln!(out, "{}", join(schema.roles().iter()))?;
    let mut line = String::with_capacity(64);
    for r in &corpus.records {
        use std::fmt::Write as _;
        line.clear();
        let _ = write!(line, "{} {:.3} {} ", u8::from(r.label), r.dwell_time, r.group_id);
        match r.latent_confidence {
            Some(c) => {
                let _ = write!(line, "{c:.6}");
            }
            None => line.push('-'),
        }
        for id in &r.feature_ids {
            let _ = write!(line, " {id}");
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_to(corpus, BufWriter::new(file))
}

/// Reads a corpus file. The split tag is taken from the file name: names
/// containing `test` load as the test split, everything else as train.
pub fn read(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let split = match path.file_name().and_then(|n| n.to_str()) {
        Some(name) if name.contains("test") => SplitTag::Test,
        _ => SplitTag::Train,
    };
    read_from(BufReader::new(File::open(path)?), split)
}

pub fn read_from<R: BufRead>(reader: R, split: SplitTag) -> Result<Corpus> {
    let mut lines = reader.lines().enumerate();
    let mut header_line = |expect: &str| -> Result<String> {
        match lines.next() {
            Some((_, line)) => Ok(line?),
            None => Err(Error::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {expect}"),
            }),
        }
    };
    let magic = header_line("header")?;
    if magic.trim_end() != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected `{HEADER}`, found `{magic}`"),
        });
    }
    let fields_line = header_line("field count")?;
    let k: usize = fields_line
        .strip_prefix("fields ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            line: 2,
            msg: format!("expected `fields <k>`, found `{fields_line}`"),
        })?;
    let cards: Vec<u32> = parse_list(&header_line("cardinalities")?, 3)?;
    let roles: Vec<FieldRole> = header_line("roles")?
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_>>()?;
    if cards.len() != k || roles.len() != k {
        return Err(Error::Schema(format!(
            "header declares {k} fields but lists {} cardinalities and {} roles",
            cards.len(),
            roles.len()
        )));
    }
    let schema = FieldSchema::new(cards, roles)?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line, k).map_err(|msg| Error::Parse { line: lineno, msg })?;
        schema.check(&record).map_err(|e| match e {
            Error::Schema(msg) => Error::Schema(format!("line {lineno}: {msg}")),
            other => other,
        })?;
        records.push(record);
    }
    Ok(Corpus { schema, records, split })
}

fn parse_record(line: &str, k: usize) -> std::result::Result<SampleRecord, String> {
    let mut tok = line.split_whitespace();
    let mut next = |what: &str| tok.next().ok_or_else(|| format!("missing {what}"));
    let label = match next("label")? {
        "0" => false,
        "1" => true,
        other => return Err(format!("label must be 0 or 1, found `{other}`")),
    };
    let dwell_time: f64 = next("dwell time")?
        .parse()
        .map_err(|e| format!("bad dwell time: {e}"))?;
    let group_id: u32 = next("group id")?.parse().map_err(|e| format!("bad group id: {e}"))?;
    let latent_confidence = match next("confidence")? {
        "-" => None,
        s => Some(s.parse::<f64>().map_err(|e| format!("bad confidence: {e}"))?),
    };
    let mut feature_ids = Vec::with_capacity(k);
    for j in 0..k {
        let id = next(&format!("feature {j}"))?
            .parse::<u32>()
            .map_err(|e| format!("bad feature {j}: {e}"))?;
        feature_ids.push(id);
    }
    if let Some(extra) = tok.next() {
        return Err(format!("trailing token `{extra}`"));
    }
    Ok(SampleRecord {
        feature_ids,
        label,
        dwell_time,
        group_id,
        latent_confidence,
    })
}

fn parse_list<T: std::str::FromStr>(line: &str, lineno: usize) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    line.split_whitespace()
        .map(|s| {
            s.parse::<T>().map_err(|e| Error::Parse {
                line: lineno,
                msg: format!("`{s}`: {e}"),
            })
        })
        .collect()
}

fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::tiny_schema;
    use proptest::prelude::*;

    fn to_bytes(c: &Corpus) -> Vec<u8> {
        let mut buf = Vec::new();
        write_to(c, &mut buf).unwrap();
        buf
    }

    fn from_bytes(b: &[u8]) -> Result<Corpus> {
        read_from(b, SplitTag::Train)
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = Corpus::new(tiny_schema(), vec![], SplitTag::Train).unwrap();
        let bytes = to_bytes(&c);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text, "CLSDCORPUS v1\nfields 3\n4 3 2\nuser_id item_id user_group\n");
        assert_eq!(from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn absent_confidence_uses_dash() {
        let rec = SampleRecord {
            feature_ids: vec![3, 2, 1],
            label: true,
            dwell_time: 12.5,
            group_id: 1,
            latent_confidence: None,
        };
        let c = Corpus::new(tiny_schema(), vec![rec], SplitTag::Train).unwrap();
        let bytes = to_bytes(&c);
        assert!(String::from_utf8_lossy(&bytes).ends_with("1 12.500 1 - 3 2 1\n"));
        assert_eq!(from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "CLSDCORPUS v1\nfields 3\n4 3 2\nuser_id item_id user_group\n0 0.000 0 - 1 1 0\n1 2.000 x - 1 1 0\n";
        match from_bytes(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_cardinality_is_schema_error() {
        let text = "CLSDCORPUS v1\nfields 3\n4 3 2\nuser_id item_id user_group\n0 0.000 0 - 1 3 0\n";
        assert!(matches!(from_bytes(text.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn wrong_magic_rejected() {
        let text = "CLSDCORPUS v2\nfields 3\n4 3 2\nuser_id item_id user_group\n";
        assert!(matches!(from_bytes(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn truncated_header_rejected() {
        assert!(from_bytes(b"CLSDCORPUS v1\nfields 3\n").is_err());
    }

    fn arb_record() -> impl Strategy<Value = SampleRecord> {
        (
            0u32..4,
            0u32..3,
            0u32..2,
            any::<bool>(),
            0u32..5_000_000,
            proptest::option::of(0u32..=1_000_000),
        )
            .prop_map(|(u, i, g, label, dwell_ms, conf)| SampleRecord {
                feature_ids: vec![u, i, g],
                label,
                dwell_time: if label { dwell_ms as f64 / 1e3 } else { 0.0 },
                group_id: g,
                latent_confidence: conf.map(|c| c as f64 / 1e6),
            })
    }

    proptest! {
        #[test]
        fn round_trip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let c = Corpus::new(tiny_schema(), records, SplitTag::Train).unwrap();
            let back = from_bytes(&to_bytes(&c)).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
