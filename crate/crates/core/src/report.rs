//! Report documents: per-layer, per-protocol, per-phase breakdowns with
//! totals, latency estimates, pass ledger and optional plan; JSON and CSV.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graphopt::PassReport;
use crate::netsim::{estimate_latency, CommMeter, CostModel, NetworkProfile, Phase};
use crate::ring::PlainTensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "layer,protocol,phase,bits,rounds";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer: String,
    pub protocol: String,
    pub phase: String,
    pub bits: u64,
    pub rounds: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub offline_bits: u64,
    pub online_bits: u64,
    pub total_bits: u64,
    pub rounds: u64,
}

impl Totals {
    pub fn of(rows: &[ReportRow]) -> Self {
        let mut t = Totals::default();
        for r in rows {
            if r.phase == Phase::Offline.as_str() {
                t.offline_bits += r.bits;
            } else {
                t.online_bits += r.bits;
            }
            t.rounds += r.rounds;
        }
        t.total_bits = t.offline_bits + t.online_bits;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub profile: String,
    pub offline_s: f64,
    pub online_s: f64,
    pub total_s: f64,
}

/// Cumulative total after one configuration step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTotal {
    pub step: String,
    pub predicted_bits: u64,
    pub metered_bits: Option<u64>,
    pub output_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub name: String,
    pub l_w: u32,
    pub l_a: u32,
    pub cost_bits: u64,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub budget: u64,
    pub objective: f64,
    pub cost_bits: u64,
    pub layers: Vec<PlanRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    pub cost_model: CostModel,
    pub rows: Vec<ReportRow>,
    pub totals: Totals,
    /// Formula-predicted total for the same graph.
    pub predicted_bits: u64,
    #[serde(default)]
    pub steps: Vec<StepTotal>,
    #[serde(default)]
    pub passes: Vec<PassReport>,
    #[serde(default)]
    pub latency: Vec<LatencyRow>,
    #[serde(default)]
    pub plan: Option<PlanSummary>,
    #[serde(default)]
    pub output_checksum: Option<String>,
}

impl ReportDocument {
    /// Breakdown of a meter with LAN and WAN latency estimates.
    pub fn from_meter(name: &str, seed: u64, cost_model: CostModel, meter: &CommMeter, predicted_bits: u64) -> Self {
        let mut rows = vec![];
        for (layer, tag, pc) in meter.entries() {
            for phase in [Phase::Offline, Phase::Online] {
                let c = pc.get(phase);
                if c.bits > 0 || c.rounds > 0 {
                    rows.push(ReportRow {
                        layer: layer.to_string(),
                        protocol: tag.to_string(),
                        phase: phase.as_str().to_string(),
                        bits: c.bits,
                        rounds: c.rounds,
                    });
                }
            }
        }
        let latency = [NetworkProfile::lan(), NetworkProfile::wan()]
            .iter()
            .map(|p| {
                let e = estimate_latency(meter, p);
                LatencyRow {
                    profile: p.name.to_string(),
                    offline_s: e.offline_s,
                    online_s: e.online_s,
                    total_s: e.total_s,
                }
            })
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            name: name.to_string(),
            seed,
            cost_model,
            totals: Totals::of(&rows),
            rows,
            predicted_bits,
            steps: vec![],
            passes: vec![],
            latency,
            plan: None,
            output_checksum: None,
        }
    }

    pub fn total_megabytes(&self) -> f64 {
        megabytes(self.totals.total_bits)
    }

    /// Totals must equal the sum of the rows.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: self.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        for r in &self.rows {
            if r.phase != Phase::Offline.as_str() && r.phase != Phase::Online.as_str() {
                return Err(Error::Parse(format!("unknown phase {:?}", r.phase)));
            }
        }
        let t = Totals::of(&self.rows);
        if t != self.totals {
            return Err(Error::Invariant(format!("totals {:?} differ from row sums {t:?}", self.totals)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        match v.get("schema_version").and_then(|x| x.as_u64()) {
            Some(found) if found == REPORT_SCHEMA_VERSION as u64 => {}
            Some(found) => {
                return Err(Error::SchemaVersion {
                    found: found as u32,
                    expected: REPORT_SCHEMA_VERSION,
                })
            }
            None => return Err(Error::Parse("missing schema_version".into())),
        }
        let d: ReportDocument = serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                csv_field(&r.layer),
                csv_field(&r.protocol),
                r.phase,
                r.bits,
                r.rounds
            ));
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parse rows back from CSV written by [`ReportDocument::to_csv`].
pub fn rows_from_csv(s: &str) -> Result<Vec<ReportRow>> {
    let mut lines = s.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("CSV header mismatch".into()));
    }
    let mut rows = vec![];
    for (i, line) in lines.enumerate() {
        let fields = split_csv(line);
        let [layer, protocol, phase, bits, rounds] = fields.as_slice() else {
            return Err(Error::Parse(format!("CSV line {} has {} fields", i + 2, fields.len())));
        };
        let num = |f: &str| f.parse::<u64>().map_err(|e| Error::Parse(format!("CSV line {}: {e}", i + 2)));
        rows.push(ReportRow {
            layer: layer.clone(),
            protocol: protocol.clone(),
            phase: phase.clone(),
            bits: num(bits)?,
            rounds: num(rounds)?,
        });
    }
    Ok(rows)
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = vec![];
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub fn megabytes(bits: u64) -> f64 {
    bits as f64 / 8e6
}

/// SHA-256 over shape, scale and signed values; independent of ring width.
pub fn output_checksum(t: &PlainTensor) -> String {
    let mut h = Sha256::new();
    for d in &t.shape {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(t.meta.scale_exp.to_le_bytes());
    for v in t.signed_values() {
        h.update((v as i64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ring::BitWidthMeta;

    fn sample() -> ReportDocument {
        let mut m = CommMeter::new();
        m.add_bits("conv1", "GEMM", Phase::Offline, 1000);
        m.add_rounds("conv1", "GEMM", Phase::Offline, 2);
        m.add_bits("conv1", "GEMM", Phase::Online, 40);
        m.add_rounds("conv1", "GEMM", Phase::Online, 1);
        m.add_bits("a,\"b\"", "Ext", Phase::Online, 7);
        ReportDocument::from_meter("t", 3, CostModel::default(), &m, 1047)
    }

    #[test]
    fn totals_are_row_sums() {
        let d = sample();
        assert_eq!(d.totals.total_bits, 1047);
        assert_eq!(d.totals.offline_bits, 1000);
        assert_eq!(d.totals.rounds, 3);
        assert_eq!(d.latency.len(), 2);
        d.validate().unwrap();
    }

    #[test]
    fn json_and_csv_round_trip() {
        let d = sample();
        let back = ReportDocument::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
        let rows = rows_from_csv(&d.to_csv()).unwrap();
        assert_eq!(rows, d.rows);
        assert_eq!(Totals::of(&rows), d.totals);
    }

    #[test]
    fn empty_report_has_header_only_csv() {
        let d = ReportDocument::from_meter("e", 0, CostModel::default(), &CommMeter::new(), 0);
        assert_eq!(d.to_csv(), format!("{CSV_HEADER}\n"));
        assert!(rows_from_csv(&d.to_csv()).unwrap().is_empty());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let d = sample();
        let s = d.to_json().unwrap().replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert!(matches!(ReportDocument::from_json(&s), Err(Error::SchemaVersion { found: 2, .. })));
        let mut bad = d.clone();
        bad.totals.total_bits += 1;
        assert!(ReportDocument::from_json(&bad.to_json().unwrap()).is_err());
        assert!(ReportDocument::from_json("{").is_err());
        assert!(rows_from_csv("x,y\n").is_err());
        assert!(rows_from_csv(&format!("{CSV_HEADER}\na,b,online,x,1\n")).is_err());
    }

    #[test]
    fn checksum_ignores_width_but_not_values() {
        let a = PlainTensor::from_signed(vec![3], &[1, -2, 3], BitWidthMeta::new(8, 2).unwrap()).unwrap();
        let b = PlainTensor::from_signed(vec![3], &[1, -2, 3], BitWidthMeta::new(17, 2).unwrap()).unwrap();
        let c = PlainTensor::from_signed(vec![3], &[1, -2, 4], BitWidthMeta::new(8, 2).unwrap()).unwrap();
        assert_eq!(output_checksum(&a), output_checksum(&b));
        assert_ne!(output_checksum(&a), output_checksum(&c));
        assert_eq!(output_checksum(&a).len(), 64);
    }
}
