//! JSONL ingestion, serialization and deterministic splitting.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{Dataset, PredictionRecord, QueryRecord, QueryRecordWire, RngSeed, SplitTag};

/// Read a JSONL dataset, validating every record. Blank lines are skipped.
pub fn load_jsonl(path: impl AsRef<Path>, split_tag: SplitTag) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, split_tag)
}

pub fn parse_jsonl(text: &str, split_tag: SplitTag) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let wire: QueryRecordWire = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = QueryRecord::from_wire(wire).map_err(|message| Error::Schema {
            line: line_no,
            message,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(Dataset { records, split_tag })
}

pub fn to_jsonl(dataset: &Dataset) -> String {
    let mut out = String::new();
    for record in &dataset.records {
        // QueryRecordWire contains only strings; serialization cannot fail.
        out.push_str(&serde_json::to_string(&record.to_wire()).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(dataset)).map_err(|e| Error::io(path, e))
}

/// Read any serde-decodable JSONL file; errors carry the 1-based line.
pub fn read_jsonl_lines<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_jsonl_lines<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let preds: Vec<PredictionRecord> = read_jsonl_lines(path)?;
    for (i, p) in preds.iter().enumerate() {
        p.validate().map_err(|message| Error::Schema {
            line: i + 1,
            message,
        })?;
    }
    Ok(preds)
}

pub fn save_predictions(preds: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl_lines(preds, path)
}

/// Sizes for `n` items under the largest-remainder rule. Ties in the
/// fractional part go to the earlier bucket.
pub fn largest_remainder_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Partition into train/val/test. Membership comes from a seeded shuffle;
/// each part keeps the input's record order.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: RngSeed,
) -> Result<(Dataset, Dataset, Dataset)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::InvalidFractions(format!(
            "fractions must be finite and nonnegative, got {fr:?}"
        )));
    }
    let total: f64 = fr.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!(
            "fractions sum to {total}, expected 1"
        )));
    }
    let n = dataset.len();
    let sizes = largest_remainder_sizes(n, &fr);
    let mut order: Vec<usize> = (0..n).collect();
    seed.shuffle(&mut order);

    let mut bucket = vec![0u8; n];
    let mut cursor = 0;
    for (b, &size) in sizes.iter().enumerate() {
        for &idx in &order[cursor..cursor + size] {
            bucket[idx] = b as u8;
        }
        cursor += size;
    }
    let part = |b: u8, tag: SplitTag| Dataset {
        records: dataset
            .records
            .iter()
            .zip(&bucket)
            .filter(|(_, &x)| x == b)
            .map(|(r, _)| r.clone())
            .collect(),
        split_tag: tag,
    };
    Ok((
        part(0, SplitTag::Train),
        part(1, SplitTag::Val),
        part(2, SplitTag::Test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AnswerValue, Choice};
    use proptest::prelude::*;

    fn line(id: &str, gt: &str) -> String {
        format!(
            r#"{{"id":"{id}","prompt":"2+2?","choices":[{{"letter":"A","text":"3"}},{{"letter":"B","text":"4"}},{{"letter":"C","text":"5"}},{{"letter":"D","text":"6"}}],"ground_truth":"{gt}","subject":null}}"#
        )
    }

    fn dataset(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| QueryRecord {
                id: format!("q{i}"),
                prompt: format!("prompt {i}"),
                choices: None,
                ground_truth: AnswerValue::Text(i.to_string()),
                subject: None,
            })
            .collect();
        Dataset::new(records, SplitTag::Train)
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let d = parse_jsonl("", SplitTag::Test).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn preserves_file_order() {
        let text = [line("c", "A"), line("a", "B"), line("b", "C")].join("\n");
        let d = parse_jsonl(&text, SplitTag::Train).unwrap();
        assert_eq!(d.ids().collect::<Vec<_>>(), ["c", "a", "b"]);
        assert_eq!(d.records[1].ground_truth, AnswerValue::Choice('B'));
    }

    #[test]
    fn bad_letter_reports_line() {
        let text = [line("a", "A"), line("b", "E")].join("\n");
        match parse_jsonl(&text, SplitTag::Train) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = [line("a", "A"), line("a", "B")].join("\n");
        assert!(matches!(
            parse_jsonl(&text, SplitTag::Train),
            Err(Error::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_json_is_schema_error() {
        assert!(matches!(
            parse_jsonl("{not json", SplitTag::Train),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn split_sizes_follow_largest_remainder() {
        let (tr, va, te) = split(&dataset(10), (0.8, 0.1, 0.1), RngSeed(1)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        assert_eq!(
            largest_remainder_sizes(7, &[0.5, 0.25, 0.25]),
            vec![3, 2, 2]
        );
    }

    #[test]
    fn split_all_train() {
        let (tr, va, te) = split(&dataset(5), (1.0, 0.0, 0.0), RngSeed(3)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (5, 0, 0));
    }

    #[test]
    fn split_is_deterministic() {
        let d = dataset(40);
        assert_eq!(
            split(&d, (0.5, 0.3, 0.2), RngSeed(5)).unwrap(),
            split(&d, (0.5, 0.3, 0.2), RngSeed(5)).unwrap()
        );
    }

    #[test]
    fn split_rejects_bad_fractions() {
        assert!(split(&dataset(3), (0.5, 0.5, 0.5), RngSeed(0)).is_err());
        assert!(split(&dataset(3), (1.2, -0.2, 0.0), RngSeed(0)).is_err());
    }

    fn arb_record() -> impl Strategy<Value = QueryRecord> {
        (
            "[a-z]{1,8}",
            ".{0,20}",
            prop::option::of(prop::collection::vec(".{0,6}", 2..5)),
            any::<prop::sample::Index>(),
            prop::option::of("[a-z]{1,5}"),
        )
            .prop_map(|(id, prompt, texts, pick, subject)| {
                let choices: Option<Vec<Choice>> = texts.map(|t| {
                    t.into_iter()
                        .enumerate()
                        .map(|(i, s)| Choice::new(crate::types::choice_letter(i), s))
                        .collect()
                });
                let ground_truth = match &choices {
                    Some(c) => {
                        AnswerValue::Choice(crate::types::choice_letter(pick.index(c.len())))
                    }
                    None => AnswerValue::Text(format!("t{id}")),
                };
                QueryRecord {
                    id,
                    prompt,
                    choices,
                    ground_truth,
                    subject,
                }
            })
    }

    proptest! {
        #[test]
        fn jsonl_round_trip(records in prop::collection::vec(arb_record(), 0..12)) {
            let mut seen = HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
            let d = Dataset::new(records, SplitTag::Val);
            let back = parse_jsonl(&to_jsonl(&d), SplitTag::Val).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn split_is_a_partition(n in 0usize..60, a in 0.0f64..1.0, b in 0.0f64..1.0, seed: u64) {
            let (fa, fb) = (a * 0.5, b * 0.5);
            let d = dataset(n);
            let (tr, va, te) = split(&d, (fa, fb, 1.0 - fa - fb), RngSeed(seed)).unwrap();
            let mut ids: Vec<&str> = tr.ids().chain(va.ids()).chain(te.ids()).collect();
            prop_assert_eq!(ids.len(), n);
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
        }
    }
}
