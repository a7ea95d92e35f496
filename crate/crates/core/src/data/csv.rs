//! Headerless CSV: class ordinal in the first column, features after.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::{Dataset, Split};
use crate::danil::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn parse_csv(reader: impl Read, classes: usize) -> Result<Dataset> {
    let mut rdr =
        ::csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(::csv::Trim::All).from_reader(reader);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse(format!("csv: {e}")))?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |m: String| Error::Parse(format!("csv line {line}: {m}"));
        let mut fields = record.iter();
        let raw = fields.next().unwrap_or_default();
        let y: usize = raw.parse().map_err(|_| fail(format!("label {raw:?} is not a class ordinal")))?;
        if y >= classes {
            return Err(fail(format!("label {y}, but there are {classes} classes")));
        }
        let features = fields
            .enumerate()
            .map(|(col, f)| f.parse::<f64>().map_err(|_| fail(format!("column {}: {f:?} is not a number", col + 2))))
            .collect::<Result<Vec<_>>>()?;
        if features.is_empty() {
            return Err(fail("no feature columns".into()));
        }
        if let Some(first) = inputs.first().map(|t: &Tensor| t.numel()) {
            if first != features.len() {
                return Err(fail(format!("{} features, earlier rows have {first}", features.len())));
            }
        }
        inputs.push(Tensor::vector(features));
        labels.push(Label::new(classes, y)?);
    }
    if inputs.is_empty() {
        return Err(Error::Parse("csv: no rows".into()));
    }
    Dataset::new(inputs, labels, classes, Split::Full)
}

pub fn load_csv(path: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    parse_csv(File::open(path)?, classes)
}
