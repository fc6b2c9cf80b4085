//! CSV tables written by the commands. Floats use 17 significant digits so
//! re-reading a table gives back the exact values.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::CliError;

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ScalarRow {
    pub iter: usize,
    pub method: String,
    pub assumed_var: f64,
    pub exact_var: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct StaticRow {
    pub iter: usize,
    pub mean_err: f64,
    pub std_err: f64,
    pub mean_innov: f64,
    #[serde(rename = "mean_trace_BA")]
    pub mean_trace_ba: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct DynamicRow {
    pub cycle: usize,
    pub time: f64,
    pub mean_err_3dvar: f64,
    pub mean_err_cute: f64,
    pub mean_err_pub: f64,
}

pub trait Row {
    const HEADER: &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

impl Row for ScalarRow {
    const HEADER: &'static [&'static str] = &["iter", "method", "assumed_var", "exact_var"];

    fn record(&self) -> Vec<String> {
        vec![self.iter.to_string(), self.method.clone(), f(self.assumed_var), f(self.exact_var)]
    }
}

impl Row for StaticRow {
    const HEADER: &'static [&'static str] = &["iter", "mean_err", "std_err", "mean_innov", "mean_trace_BA"];

    fn record(&self) -> Vec<String> {
        vec![
            self.iter.to_string(),
            f(self.mean_err),
            f(self.std_err),
            f(self.mean_innov),
            f(self.mean_trace_ba),
        ]
    }
}

impl Row for DynamicRow {
    const HEADER: &'static [&'static str] = &["cycle", "time", "mean_err_3dvar", "mean_err_cute", "mean_err_pub"];

    fn record(&self) -> Vec<String> {
        vec![
            self.cycle.to_string(),
            f(self.time),
            f(self.mean_err_3dvar),
            f(self.mean_err_cute),
            f(self.mean_err_pub),
        ]
    }
}

pub fn write_rows<R: Row, W: Write>(rows: &[R], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(R::HEADER).map_err(CliError::io)?;
    for row in rows {
        w.write_record(row.record()).map_err(CliError::io)?;
    }
    w.flush().map_err(CliError::io)?;
    Ok(())
}

pub fn read_rows<R: DeserializeOwned, I: Read>(input: I) -> Result<Vec<R>, CliError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<R>, _>>()
        .map_err(|e| CliError::Config(format!("malformed table: {e}")))
}
