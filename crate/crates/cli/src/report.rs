//! Merging per-seed CSV outputs into mean/std tables.

use std::collections::HashMap;
use std::path::Path;

use crate::CliError;

/// A parsed CSV table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

/// Key columns used when none are given: verification tables group by
/// horizon and mode, training logs by epoch, anything else into one row.
pub fn default_keys(header: &[String]) -> Vec<String> {
    let has = |c: &str| header.iter().any(|h| h == c);
    if has("k") && has("mode") {
        vec!["k".into(), "mode".into()]
    } else if has("epoch") {
        vec!["epoch".into()]
    } else {
        vec![]
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows of equally-shaped tables by `keys` and reports the mean and
/// sample standard deviation of every numeric column per group.
pub fn merge(tables: &[Table], keys: &[String]) -> Result<Table, CliError> {
    let first = tables.first().ok_or_else(|| CliError::Usage("no input tables".into()))?;
    if let Some(t) = tables.iter().find(|t| t.header != first.header) {
        return Err(CliError::Usage(format!(
            "input headers differ: {:?} vs {:?}",
            first.header, t.header
        )));
    }
    let key_idx: Vec<usize> = keys
        .iter()
        .map(|k| first.column(k).ok_or_else(|| CliError::Usage(format!("no column named {k}"))))
        .collect::<Result<_, _>>()?;
    let all_rows = || tables.iter().flat_map(|t| t.rows.iter());
    let numeric: Vec<usize> = (0..first.header.len())
        .filter(|i| !key_idx.contains(i))
        .filter(|&i| all_rows().all(|r| r[i].parse::<f64>().is_ok()))
        .collect();

    let mut order: Vec<Vec<String>> = Vec::new();
    let mut groups: HashMap<Vec<String>, Vec<&Vec<String>>> = HashMap::new();
    for row in all_rows() {
        let key: Vec<String> = key_idx.iter().map(|&i| row[i].clone()).collect();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(row);
    }

    let mut header: Vec<String> = keys.to_vec();
    header.push("runs".into());
    for &i in &numeric {
        header.push(format!("{}_mean", first.header[i]));
        header.push(format!("{}_std", first.header[i]));
    }
    let rows = order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let mut out = key.clone();
            out.push(members.len().to_string());
            for &i in &numeric {
                let values: Vec<f64> = members.iter().map(|r| r[i].parse().expect("checked numeric")).collect();
                let (m, s) = mean_std(&values);
                out.push(m.to_string());
                out.push(s.to_string());
            }
            out
        })
        .collect();
    Ok(Table { header, rows })
}

pub fn write(table: &Table, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for r in &table.rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
