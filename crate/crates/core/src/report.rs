//! Per-subgroup result tables in text, JSON, or CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::manifest::{Subgroup, SubgroupTaxonomy};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no value for subgroup '{0}'")]
    MissingSubgroup(String),
    #[error("no baseline value for subgroup '{0}'")]
    MissingBaseline(String),
    #[error("report input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(format!("unknown format '{s}' (expected text, json or csv)")),
        }
    }
}

/// Summary value printed under the per-subgroup rows, e.g. pooled mIoU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overall {
    /// How the overall value was formed, e.g. "pooled" or "mean".
    pub label: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupReport {
    pub metric: String,
    pub values: BTreeMap<Subgroup, f64>,
    pub baseline: Option<BTreeMap<Subgroup, f64>>,
    pub overall: Option<Overall>,
    /// Decimal places in the text table.
    pub precision: usize,
}

impl SubgroupReport {
    pub fn new(metric: &str, values: BTreeMap<Subgroup, f64>) -> Self {
        Self {
            metric: metric.to_string(),
            values,
            baseline: None,
            overall: None,
            precision: 2,
        }
    }

    pub fn with_baseline(mut self, baseline: BTreeMap<Subgroup, f64>) -> Self {
        self.baseline = Some(baseline);
        self
    }

    pub fn with_overall(mut self, label: &str, value: f64) -> Self {
        self.overall = Some(Overall {
            label: label.to_string(),
            value,
        });
        self
    }
}

/// One table row: phrase, value, optional (baseline, value − baseline).
struct Row {
    phrase: String,
    value: f64,
    baseline: Option<(f64, f64)>,
}

fn rows(taxonomy: &SubgroupTaxonomy, r: &SubgroupReport) -> Result<Vec<Row>, ReportError> {
    taxonomy
        .enumerate()
        .iter()
        .map(|sg| {
            let phrase = taxonomy.phrase(sg);
            let value = *r
                .values
                .get(sg)
                .ok_or_else(|| ReportError::MissingSubgroup(phrase.clone()))?;
            let baseline = match &r.baseline {
                None => None,
                Some(b) => {
                    let bv = *b
                        .get(sg)
                        .ok_or_else(|| ReportError::MissingBaseline(phrase.clone()))?;
                    Some((bv, value - bv))
                }
            };
            Ok(Row {
                phrase,
                value,
                baseline,
            })
        })
        .collect()
}

/// Render the report with one row per subgroup in enumeration order.
///
/// Text is an aligned table rounded to `precision` places. CSV and JSON
/// carry full-precision values (shortest round-trip form).
pub fn render_subgroup_report(
    taxonomy: &SubgroupTaxonomy,
    report: &SubgroupReport,
    fmt: ReportFormat,
) -> Result<Vec<u8>, ReportError> {
    let rows = rows(taxonomy, report)?;
    Ok(match fmt {
        ReportFormat::Text => render_text(report, &rows).into_bytes(),
        ReportFormat::Csv => render_csv(report, &rows),
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(&report_json(report, &rows)).expect("json");
            v.push(b'\n');
            v
        }
    })
}

fn render_text(r: &SubgroupReport, rows: &[Row]) -> String {
    let p = r.precision;
    let num = |v: f64| format!("{v:.p$}");
    let mut header = vec!["subgroup".to_string(), r.metric.clone()];
    if r.baseline.is_some() {
        header.push("baseline".into());
        header.push("delta".into());
    }
    let mut table: Vec<Vec<String>> = vec![header];
    for row in rows {
        let mut cells = vec![row.phrase.clone(), num(row.value)];
        if let Some((b, d)) = row.baseline {
            cells.push(num(b));
            cells.push(num(d));
        }
        table.push(cells);
    }
    if let Some(o) = &r.overall {
        let mut cells = vec![format!("overall ({})", o.label), num(o.value)];
        if r.baseline.is_some() {
            cells.extend([String::new(), String::new()]);
        }
        table.push(cells);
    }
    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            table
                .iter()
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(line, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

fn render_csv(r: &SubgroupReport, rows: &[Row]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subgroup", "value"];
    if r.baseline.is_some() {
        header.extend(["baseline", "delta"]);
    }
    w.write_record(&header).expect("in-memory write");
    for row in rows {
        let mut rec = vec![row.phrase.clone(), row.value.to_string()];
        if let Some((b, d)) = row.baseline {
            rec.push(b.to_string());
            rec.push(d.to_string());
        }
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

fn report_json(r: &SubgroupReport, rows: &[Row]) -> Value {
    let rows: Vec<Value> = rows
        .iter()
        .map(|row| {
            let mut o = Map::new();
            o.insert("subgroup".into(), row.phrase.clone().into());
            o.insert("value".into(), row.value.into());
            if let Some((b, d)) = row.baseline {
                o.insert("baseline".into(), b.into());
                o.insert("delta".into(), d.into());
            }
            Value::Object(o)
        })
        .collect();
    json!({
        "metric": r.metric,
        "rows": rows,
        "overall": r.overall,
    })
}

/// Parse CSV produced by [`render_subgroup_report`] back into values (and
/// baseline, when present).
#[allow(clippy::type_complexity)]
pub fn parse_report_csv(
    taxonomy: &SubgroupTaxonomy,
    bytes: &[u8],
) -> Result<(BTreeMap<Subgroup, f64>, Option<BTreeMap<Subgroup, f64>>), ReportError> {
    let bad = |m: String| ReportError::Input(m);
    let mut rd = csv::Reader::from_reader(bytes);
    let has_baseline = rd.headers().map_err(|e| bad(e.to_string()))?.len() >= 4;
    let mut values = BTreeMap::new();
    let mut baseline = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let sg = taxonomy
            .parse_phrase(&rec[0])
            .map_err(|e| bad(e.to_string()))?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("{}: {e}", &rec[i])))
        };
        values.insert(sg.clone(), num(1)?);
        if has_baseline {
            baseline.insert(sg, num(2)?);
        }
    }
    Ok((values, has_baseline.then_some(baseline)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputFile {
    metric: String,
    values: BTreeMap<String, f64>,
    #[serde(default)]
    baseline: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    overall: Option<Overall>,
}

fn by_phrase(
    taxonomy: &SubgroupTaxonomy,
    raw: BTreeMap<String, f64>,
) -> Result<BTreeMap<Subgroup, f64>, ReportError> {
    let mut out = BTreeMap::new();
    for (phrase, v) in raw {
        let sg = taxonomy
            .parse_phrase(&phrase)
            .map_err(|e| ReportError::Input(e.to_string()))?;
        if out.insert(sg, v).is_some() {
            return Err(ReportError::Input(format!(
                "subgroup '{phrase}' given twice"
            )));
        }
    }
    Ok(out)
}

/// Parse a report input: `{"metric", "values": {phrase: v}, "baseline"?, "overall"?}`.
/// Phrases accept the taxonomy's aliases ("Rainy, Dawn/Dusk").
pub fn parse_report_input(
    taxonomy: &SubgroupTaxonomy,
    text: &str,
) -> Result<SubgroupReport, ReportError> {
    let f: InputFile = serde_json::from_str(text).map_err(|e| ReportError::Input(e.to_string()))?;
    let mut r = SubgroupReport::new(&f.metric, by_phrase(taxonomy, f.values)?);
    if let Some(b) = f.baseline {
        r.baseline = Some(by_phrase(taxonomy, b)?);
    }
    r.overall = f.overall;
    Ok(r)
}

pub fn load_report_input(
    taxonomy: &SubgroupTaxonomy,
    path: impl AsRef<Path>,
) -> Result<SubgroupReport, ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ReportError::Input(format!("{}: {e}", path.display())))?;
    parse_report_input(taxonomy, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t() -> SubgroupTaxonomy {
        SubgroupTaxonomy::weather_time()
    }

    fn constant(v: f64) -> BTreeMap<Subgroup, f64> {
        t().enumerate().into_iter().map(|sg| (sg, v)).collect()
    }

    #[test]
    fn all_zero_table() {
        let r = SubgroupReport::new("FD", constant(0.0));
        let text = String::from_utf8(render_subgroup_report(&t(), &r, ReportFormat::Text).unwrap())
            .unwrap();
        assert_eq!(text.lines().count(), 2 + 9);
        assert!(text.lines().skip(2).all(|l| l.ends_with("0.00")));
        assert!(text.lines().nth(2).unwrap().starts_with("Clear, Day"));
    }

    #[test]
    fn missing_subgroup() {
        let mut v = constant(1.0);
        v.remove(&Subgroup::new(vec![2, 2]));
        let r = SubgroupReport::new("FD", v);
        assert!(matches!(
            render_subgroup_report(&t(), &r, ReportFormat::Csv),
            Err(ReportError::MissingSubgroup(p)) if p == "Rain, Night"
        ));
    }

    #[test]
    fn csv_round_trip() {
        let v: BTreeMap<Subgroup, f64> = t()
            .enumerate()
            .into_iter()
            .enumerate()
            .map(|(i, sg)| (sg, 0.1 * i as f64 + 1.0 / 3.0))
            .collect();
        let b = constant(std::f64::consts::PI);
        let r = SubgroupReport::new("mIoU", v.clone()).with_baseline(b.clone());
        let bytes = render_subgroup_report(&t(), &r, ReportFormat::Csv).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("subgroup,value,baseline,delta\n\"Clear, Day\","));
        let (pv, pb) = parse_report_csv(&t(), &bytes).unwrap();
        assert_eq!(pv, v);
        assert_eq!(pb, Some(b));
    }

    #[test]
    fn input_parsing_with_aliases() {
        let text = r#"{"metric":"FD","values":{"Rainy, Dawn/Dusk":1.5},"overall":{"label":"mean","value":2.0}}"#;
        let r = parse_report_input(&t(), text).unwrap();
        assert_eq!(r.values[&Subgroup::new(vec![2, 1])], 1.5);
        assert_eq!(r.overall.unwrap().label, "mean");
        assert!(parse_report_input(&t(), r#"{"metric":"FD","values":{"Snow, Day":1}}"#).is_err());
        assert!(parse_report_input(&t(), r#"{"metric":"FD","values":{},"x":1}"#).is_err());
    }

    #[test]
    fn json_layout() {
        let r = SubgroupReport::new("FD", constant(2.0)).with_overall("mean", 2.0);
        let v: Value =
            serde_json::from_slice(&render_subgroup_report(&t(), &r, ReportFormat::Json).unwrap())
                .unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 9);
        assert_eq!(v["rows"][8]["subgroup"], "Rain, Night");
        assert_eq!(v["overall"]["value"], 2.0);
    }
}
