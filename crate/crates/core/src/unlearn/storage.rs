//! Analytic storage models for unlearning support.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageMethod {
    Fedshare,
    GradientHistoryClient,
    GradientHistoryServer,
    Retrain,
}

impl StorageMethod {
    pub const ALL: [StorageMethod; 4] = [
        StorageMethod::Fedshare,
        StorageMethod::GradientHistoryClient,
        StorageMethod::GradientHistoryServer,
        StorageMethod::Retrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StorageMethod::Fedshare => "fedshare",
            StorageMethod::GradientHistoryClient => "gradient_history_client",
            StorageMethod::GradientHistoryServer => "gradient_history_server",
            StorageMethod::Retrain => "retrain",
        }
    }
}

impl fmt::Display for StorageMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StorageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StorageMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown storage method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageParams {
    pub num_items: usize,
    pub dim: usize,
    pub snapshots: usize,
    pub rounds: usize,
    /// Fraction of rounds whose updates are retained.
    pub retention: f64,
    /// Clients taking part in a round.
    pub clients_per_round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub method: StorageMethod,
    pub bytes: u64,
    pub params: StorageParams,
}

const F64_BYTES: u64 = 8;

/// fedshare: `M·|I|·d·8`; gradient history (client or server side):
/// `T·ρ·clients·|I|·d·8`; retrain: nothing extra.
pub fn storage_cost(method: StorageMethod, params: &StorageParams) -> Result<StorageReport> {
    if !(params.retention >= 0.0 && params.retention <= 1.0) {
        return Err(Error::InvalidArgument(format!("retention {} outside [0, 1]", params.retention)));
    }
    let table = params.num_items as u64 * params.dim as u64 * F64_BYTES;
    let bytes = match method {
        StorageMethod::Fedshare => params.snapshots as u64 * table,
        StorageMethod::GradientHistoryClient | StorageMethod::GradientHistoryServer => {
            let tables = params.rounds as f64 * params.retention * params.clients_per_round as f64;
            (tables * table as f64).round() as u64
        }
        StorageMethod::Retrain => 0,
    };
    Ok(StorageReport {
        method,
        bytes,
        params: params.clone(),
    })
}

pub fn storage_reports(params: &StorageParams) -> Result<Vec<StorageReport>> {
    StorageMethod::ALL.into_iter().map(|m| storage_cost(m, params)).collect()
}

/// Aligned text table, one line per report.
pub fn render_storage_table(reports: &[StorageReport]) -> String {
    let header = ["method", "bytes", "|I|", "d", "M", "T", "rho", "clients"];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            let p = &r.params;
            [
                r.method.to_string(),
                r.bytes.to_string(),
                p.num_items.to_string(),
                p.dim.to_string(),
                p.snapshots.to_string(),
                p.rounds.to_string(),
                p.retention.to_string(),
                p.clients_per_round.to_string(),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(k, (c, w))| if k == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in &rows {
        line(row.iter().map(String::as_str).collect());
    }
    out
}
