use std::io::{Read, Write};

use csv::{ErrorKind, ReaderBuilder, StringRecord, Trim, WriterBuilder};
use dualbounds::models::ObservationRecord;

use crate::config::DataConfig;
use crate::error::CliError;

/// Parsed input table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: Vec<ObservationRecord>,
    pub covariates: Vec<String>,
}

struct Layout {
    outcome: usize,
    treatment: usize,
    selection: Option<usize>,
    cluster: Option<usize>,
    propensity: Option<usize>,
    covariates: Vec<usize>,
}

fn csv_error(e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line());
    let msg = match e.kind() {
        ErrorKind::UnequalLengths { expected_len, len, pos } => {
            let line = pos.as_ref().map(|p| p.line()).or(line).unwrap_or(0);
            return CliError::Data(format!("line {line}: expected {expected_len} fields, found {len}"));
        }
        _ => e.to_string(),
    };
    match line {
        Some(l) => CliError::Data(format!("line {l}: {msg}")),
        None => CliError::Data(msg),
    }
}

fn layout(header: &StringRecord, map: &DataConfig) -> Result<(Layout, Vec<String>), CliError> {
    let names: Vec<&str> = header.iter().collect();
    let find = |name: &str, role: &str| {
        names
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Data(format!("{role} column \"{name}\" not found in the CSV header")))
    };
    let opt = |name: &Option<String>, role: &str| name.as_deref().map(|n| find(n, role)).transpose();
    let outcome = find(&map.outcome, "outcome")?;
    let treatment = find(&map.treatment, "treatment")?;
    let selection = opt(&map.selection, "selection")?;
    let cluster = opt(&map.cluster, "cluster")?;
    let propensity = opt(&map.propensity, "propensity")?;
    let used = [Some(outcome), Some(treatment), selection, cluster, propensity];
    let covariates: Vec<usize> = match &map.covariates {
        Some(list) => list.iter().map(|c| find(c, "covariate")).collect::<Result<_, _>>()?,
        None => (0..names.len()).filter(|i| !used.contains(&Some(*i))).collect(),
    };
    let cov_names = covariates.iter().map(|&i| names[i].to_string()).collect();
    Ok((Layout { outcome, treatment, selection, cluster, propensity, covariates }, cov_names))
}

fn field<'a>(rec: &'a StringRecord, i: usize, line: u64, header: &StringRecord) -> Result<&'a str, CliError> {
    let v = rec.get(i).unwrap_or("");
    if v.is_empty() {
        return Err(CliError::Data(format!("line {line}: missing value in column \"{}\"", &header[i])));
    }
    Ok(v)
}

fn number(rec: &StringRecord, i: usize, line: u64, header: &StringRecord) -> Result<f64, CliError> {
    let v = field(rec, i, line, header)?;
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(CliError::Data(format!("line {line}: column \"{}\": \"{v}\" is not a finite number", &header[i]))),
    }
}

fn flag(rec: &StringRecord, i: usize, line: u64, header: &StringRecord) -> Result<bool, CliError> {
    match field(rec, i, line, header)? {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        v => Err(CliError::Data(format!("line {line}: column \"{}\": \"{v}\" is not 0/1", &header[i]))),
    }
}

/// Read a CSV with a header row. Every error names the offending line.
pub fn read_dataset<R: Read>(reader: R, map: &DataConfig) -> Result<Dataset, CliError> {
    let mut rdr = ReaderBuilder::new().has_headers(true).trim(Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    let (lay, covariates) = layout(&header, map)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line());
        let selection = lay.selection.map(|i| flag(&rec, i, line, &header)).transpose()?;
        // Outcomes of unselected units are unobserved; blanks are allowed there.
        let outcome = if selection == Some(false) && rec.get(lay.outcome).is_some_and(str::is_empty) {
            0.0
        } else {
            number(&rec, lay.outcome, line, &header)?
        };
        let propensity = lay.propensity.map(|i| number(&rec, i, line, &header)).transpose()?;
        if let Some(p) = propensity {
            if !(p > 0.0 && p < 1.0) {
                return Err(CliError::Data(format!("line {line}: propensity {p} outside (0, 1)")));
            }
        }
        rows.push(ObservationRecord {
            covariates: lay.covariates.iter().map(|&i| number(&rec, i, line, &header)).collect::<Result<_, _>>()?,
            treatment: flag(&rec, lay.treatment, line, &header)?,
            outcome,
            selection,
            cluster_id: lay.cluster.map(|i| field(&rec, i, line, &header).map(str::to_string)).transpose()?,
            propensity,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Data("the CSV has a header but no rows".into()));
    }
    Ok(Dataset { rows, covariates })
}

/// Write a dataset in the layout `read_dataset` expects under `map`.
/// Floats use the shortest representation that parses back exactly.
pub fn write_dataset<W: Write>(writer: W, data: &Dataset, map: &DataConfig) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(e.to_string());
    let mut w = WriterBuilder::new().from_writer(writer);
    let mut header = vec![map.outcome.clone(), map.treatment.clone()];
    header.extend(map.selection.clone());
    header.extend(map.cluster.clone());
    header.extend(map.propensity.clone());
    header.extend(data.covariates.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for r in &data.rows {
        let mut rec = vec![r.outcome.to_string(), (r.treatment as u8).to_string()];
        if map.selection.is_some() {
            rec.push(r.selection.map_or(String::new(), |s| (s as u8).to_string()));
        }
        if map.cluster.is_some() {
            rec.push(r.cluster_id.clone().unwrap_or_default());
        }
        if map.propensity.is_some() {
            rec.push(r.propensity.map_or(String::new(), |p| p.to_string()));
        }
        rec.extend(r.covariates.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}
