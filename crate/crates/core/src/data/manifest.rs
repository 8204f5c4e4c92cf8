use super::{DataError, Result, Split};

const HEADER: [&str; 3] = ["id", "label", "split"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: u8,
    pub split: Split,
}

/// Ids become file names, so they are restricted to `[A-Za-z0-9_.-]` and may
/// not start with a dot.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(DataError::Manifest(format!("invalid id {id:?}")))
    }
}

/// Parses `id,label,split` rows. The header is mandatory and must match exactly.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| DataError::Manifest(e.to_string()))?
        .clone();
    if header.iter().ne(HEADER) {
        return Err(DataError::Manifest(format!(
            "header must be `id,label,split`, got `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Manifest(e.to_string()))?;
        let row = line + 2;
        let id = rec[0].to_string();
        validate_id(&id).map_err(|e| DataError::Manifest(format!("row {row}: {e}")))?;
        let label = match &rec[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(DataError::Manifest(format!("row {row}: label must be 0 or 1, got {other:?}"))),
        };
        let split = match &rec[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(DataError::Manifest(format!(
                    "row {row}: split must be train or test, got {other:?}"
                )))
            }
        };
        rows.push(ManifestRow { id, label, split });
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::from("id,label,split\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.id, r.label, r.split.as_str()));
    }
    out
}
