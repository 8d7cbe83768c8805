//! CSV ingestion and export.
//!
//! Header row names every schema field plus `label`; values are arbitrary
//! category tokens mapped to ids through the dataset [`Vocab`] (first-seen
//! order for new tokens). Labels must be `0` or `1`.

use std::path::Path;

use super::{Dataset, FieldKind, Sample, Schema, Vocab, LABEL_COLUMN};
use crate::error::{Error, Result};

/// Loads `path` against `schema`. Tokens already present in `vocab` keep
/// their ids; pass [`Vocab::empty`] (or `None`) for a fresh table.
pub fn load_csv(path: &Path, schema: &Schema, vocab: Option<&Vocab>) -> Result<Dataset> {
    let csv_err = |line: u64, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);

    let headers = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| csv_err(1, format!("missing column `{name}`")))
    };
    let field_cols: Vec<usize> = schema.fields().iter().map(|f| column(&f.name)).collect::<Result<_>>()?;
    let label_col = column(LABEL_COLUMN)?;

    let mut vocab = match vocab {
        Some(v) if v.num_fields() == schema.fields().len() => {
            let mut v = v.clone();
            v.rebuild_index();
            v
        }
        Some(_) => return Err(Error::Config("vocabulary does not match schema field count".into())),
        None => Vocab::empty(schema.fields().len()),
    };

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| csv_err(line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(csv_err(
                line,
                format!("expected {} columns, found {}", headers.len(), record.len()),
            ));
        }
        let label = match record[label_col].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(csv_err(line, format!("label `{other}` is not 0 or 1"))),
        };
        let mut aware = Vec::new();
        let mut agnostic = Vec::new();
        for (fi, (field, &col)) in schema.fields().iter().zip(&field_cols).enumerate() {
            let id = vocab.intern(fi, record[col].trim());
            if id >= field.vocab_size {
                return Err(csv_err(
                    line,
                    format!(
                        "field `{}` has more than {} distinct values",
                        field.name, field.vocab_size
                    ),
                ));
            }
            match field.kind {
                FieldKind::Aware => aware.push(id),
                FieldKind::Agnostic => agnostic.push(id),
            }
        }
        samples.push(Sample {
            scenario_id: aware[0],
            aware_features: aware,
            agnostic_features: agnostic,
            label,
        });
    }
    Dataset::new(schema.clone(), samples, vocab)
}

/// Writes `dataset` with its vocabulary tokens, columns in schema order then
/// `label`.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let wrap = |e: csv::Error| Error::io(path, e.into());
    let mut header: Vec<&str> = dataset.schema.fields().iter().map(|f| f.name.as_str()).collect();
    header.push(LABEL_COLUMN);
    writer.write_record(&header).map_err(wrap)?;

    let kinds: Vec<FieldKind> = dataset.schema.fields().iter().map(|f| f.kind).collect();
    for s in &dataset.samples {
        let mut aware = s.aware_features.iter();
        let mut agnostic = s.agnostic_features.iter();
        let mut row = Vec::with_capacity(header.len());
        for (fi, kind) in kinds.iter().enumerate() {
            let id = match kind {
                FieldKind::Aware => *aware.next().expect("validated arity"),
                FieldKind::Agnostic => *agnostic.next().expect("validated arity"),
            };
            let token = dataset
                .vocab
                .token(fi, id)
                .map(str::to_string)
                .unwrap_or_else(|| id.to_string());
            row.push(token);
        }
        row.push(s.label.to_string());
        writer.write_record(&row).map_err(wrap)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
