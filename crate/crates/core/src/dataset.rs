//! Dataset ingestion and serialization (JSONL and CSV).
//!
//! JSONL rows look like
//! `{"image_id": "a", "domain": "koniq", "mos": 3.2, "attrs": {"sharpness": 4.0}}`
//! with `attrs` optional. CSV files carry the header
//! `image_id,domain,mos,attr_1..attr_A` with empty cells for missing
//! attributes. Synthetic latents, when present, are written as a `features`
//! array (JSONL) or `feature_0..` columns (CSV).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::types::{check_score, AttributeSchema, Dataset, DimensionId, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Format implied by a file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DataFormat::Jsonl),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat, schema: &AttributeSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        DataFormat::Jsonl => read_jsonl(BufReader::new(file), schema),
        DataFormat::Csv => read_csv(file, schema),
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        DataFormat::Jsonl => write_jsonl(dataset, &mut out).map_err(|e| Error::io(path, e))?,
        DataFormat::Csv => write_csv(dataset, &mut out)?,
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn malformed(line: usize, field: &str, detail: impl Into<String>) -> Error {
    Error::MalformedRow {
        line,
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn get_str(obj: &Map<String, Value>, line: usize, field: &str) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(malformed(line, field, "empty string")),
        Some(_) => Err(malformed(line, field, "expected a string")),
        None => Err(malformed(line, field, "missing")),
    }
}

fn as_number(value: &Value, line: usize, field: &str) -> Result<f64> {
    value
        .as_f64()
        .ok_or_else(|| malformed(line, field, "expected a number"))
}

pub fn read_jsonl<R: BufRead>(reader: R, schema: &AttributeSchema) -> Result<Dataset> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| malformed(lineno, "<row>", e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(malformed(lineno, "<row>", "expected a JSON object"));
        };
        records.push(record_from_json(&obj, lineno, schema)?);
    }
    Dataset::new(schema.clone(), records)
}

fn record_from_json(obj: &Map<String, Value>, line: usize, schema: &AttributeSchema) -> Result<ImageRecord> {
    let image_id = get_str(obj, line, "image_id")?;
    let domain = if obj.contains_key("domain") {
        get_str(obj, line, "domain")?
    } else if obj.contains_key("domain_id") {
        get_str(obj, line, "domain_id")?
    } else {
        return Err(malformed(line, "domain", "missing"));
    };
    let mos = as_number(obj.get("mos").ok_or_else(|| malformed(line, "mos", "missing"))?, line, "mos")?;
    check_score("mos", mos)?;

    let mut attr_mos = vec![None; schema.arity()];
    match obj.get("attrs") {
        None | Some(Value::Null) => {}
        Some(Value::Object(attrs)) => {
            for (name, v) in attrs {
                let field = format!("attrs.{name}");
                let dim = schema
                    .lookup(name)
                    .filter(|d| !d.is_overall())
                    .ok_or_else(|| malformed(line, &field, "unknown attribute"))?;
                if v.is_null() {
                    continue;
                }
                let score = as_number(v, line, &field)?;
                check_score(&field, score)?;
                attr_mos[dim.index() - 1] = Some(score);
            }
        }
        Some(_) => return Err(malformed(line, "attrs", "expected an object")),
    }

    let features = match obj.get("features") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .map(|v| as_number(v, line, "features"))
                .collect::<Result<Vec<_>>>()?,
        ),
        Some(_) => return Err(malformed(line, "features", "expected an array")),
    };

    Ok(ImageRecord {
        image_id,
        domain_id: domain,
        mos,
        attr_mos,
        features,
    })
}

pub fn write_jsonl<W: Write>(dataset: &Dataset, out: &mut W) -> std::io::Result<()> {
    let schema = dataset.schema();
    for r in dataset.records() {
        let mut obj = Map::new();
        obj.insert("image_id".into(), Value::from(r.image_id.as_str()));
        obj.insert("domain".into(), Value::from(r.domain_id.as_str()));
        obj.insert("mos".into(), Value::from(r.mos));
        if r.attr_mos.iter().any(Option::is_some) {
            let mut attrs = Map::new();
            for (i, v) in r.attr_mos.iter().enumerate() {
                if let Some(v) = v {
                    attrs.insert(schema.key(DimensionId::attribute(i + 1)).to_string(), Value::from(*v));
                }
            }
            obj.insert("attrs".into(), Value::Object(attrs));
        }
        if let Some(f) = &r.features {
            obj.insert("features".into(), Value::from(f.clone()));
        }
        serde_json::to_writer(&mut *out, &Value::Object(obj))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_csv<R: Read>(reader: R, schema: &AttributeSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));

    let id_col = column("image_id").ok_or_else(|| malformed(1, "image_id", "missing column"))?;
    let domain_col = column("domain")
        .or_else(|| column("domain_id"))
        .ok_or_else(|| malformed(1, "domain", "missing column"))?;
    let mos_col = column("mos").ok_or_else(|| malformed(1, "mos", "missing column"))?;
    let attr_cols: Vec<Option<usize>> = (1..=schema.arity())
        .map(|a| column(&format!("attr_{a}")).or_else(|| column(schema.key(DimensionId::attribute(a)))))
        .collect();
    let mut feature_cols = Vec::new();
    while let Some(c) = column(&format!("feature_{}", feature_cols.len())) {
        feature_cols.push(c);
    }

    let mut records = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row?;
        let cell = |col: usize| row.get(col).unwrap_or("").trim();
        let number = |col: usize, field: &str| -> Result<f64> {
            cell(col)
                .parse::<f64>()
                .map_err(|_| malformed(line, field, format!("`{}` is not a number", cell(col))))
        };
        let image_id = cell(id_col).to_string();
        if image_id.is_empty() {
            return Err(malformed(line, "image_id", "empty"));
        }
        let domain_id = cell(domain_col).to_string();
        if domain_id.is_empty() {
            return Err(malformed(line, "domain", "empty"));
        }
        let mos = check_score("mos", number(mos_col, "mos")?)?;
        let mut attr_mos = Vec::with_capacity(schema.arity());
        for (i, col) in attr_cols.iter().enumerate() {
            let field = format!("attr_{}", i + 1);
            attr_mos.push(match col {
                Some(c) if !cell(*c).is_empty() => Some(check_score(&field, number(*c, &field)?)?),
                _ => None,
            });
        }
        let features = if feature_cols.is_empty() {
            None
        } else {
            Some(
                feature_cols
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| number(c, &format!("feature_{i}")))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        records.push(ImageRecord {
            image_id,
            domain_id,
            mos,
            attr_mos,
            features,
        });
    }
    Dataset::new(schema.clone(), records)
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: &mut W) -> Result<()> {
    let arity = dataset.schema().arity();
    let num_features = dataset
        .records()
        .iter()
        .filter_map(|r| r.features.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    if dataset
        .records()
        .iter()
        .any(|r| r.features.as_ref().map_or(0, Vec::len) != num_features)
    {
        return Err(Error::Config("CSV output requires equal-length features on every record".into()));
    }

    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["image_id".to_string(), "domain".to_string(), "mos".to_string()];
    header.extend((1..=arity).map(|a| format!("attr_{a}")));
    header.extend((0..num_features).map(|i| format!("feature_{i}")));
    wtr.write_record(&header)?;
    for r in dataset.records() {
        let mut row = vec![r.image_id.clone(), r.domain_id.clone(), r.mos.to_string()];
        row.extend(r.attr_mos.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
        if let Some(f) = &r.features {
            row.extend(f.iter().map(f64::to_string));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
