use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::manifest::{Subgroup, SubgroupTaxonomy};

/// Multiplicative penalty per infraction kind, each in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PenaltyTable(BTreeMap<String, f64>);

impl Default for PenaltyTable {
    /// Leaderboard-style factors.
    fn default() -> Self {
        Self(
            [
                ("collision_pedestrian", 0.50),
                ("collision_vehicle", 0.60),
                ("collision_static", 0.65),
                ("red_light", 0.70),
                ("stop_sign", 0.80),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        )
    }
}

impl PenaltyTable {
    pub fn new(factors: BTreeMap<String, f64>) -> Result<Self, MetricsError> {
        if let Some((k, v)) = factors.iter().find(|(_, &v)| !(v > 0.0 && v <= 1.0)) {
            return Err(MetricsError::InvalidInput(format!(
                "penalty for '{k}' is {v}, must be in (0, 1]"
            )));
        }
        Ok(Self(factors))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let text =
            fs::read_to_string(path).map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
        let map: BTreeMap<String, f64> =
            serde_json::from_str(&text).map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
        Self::new(map)
    }

    pub fn factor(&self, kind: &str) -> Option<f64> {
        self.0.get(kind).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfractionEvent {
    pub kind: String,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

impl InfractionEvent {
    pub fn once(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            count: 1,
        }
    }
}

/// Product of penalty factors over all events, starting from 1.
///
/// Events are tallied per kind before multiplying, so the result does not
/// depend on event order, not even in the last bit.
pub fn infraction_score(
    events: &[InfractionEvent],
    penalties: &PenaltyTable,
) -> Result<f64, MetricsError> {
    let mut tally: BTreeMap<&str, u64> = BTreeMap::new();
    for e in events {
        if penalties.factor(&e.kind).is_none() {
            return Err(MetricsError::UnknownEventKind(e.kind.clone()));
        }
        *tally.entry(&e.kind).or_insert(0) += u64::from(e.count);
    }
    Ok(tally.into_iter().fold(1.0, |acc, (kind, n)| {
        let f = penalties.factor(kind).expect("checked above");
        acc * f.powi(n.min(i32::MAX as u64) as i32)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResult {
    pub route_id: String,
    pub subgroup: Option<Subgroup>,
    /// Fraction of the route completed.
    pub rc: f64,
    /// Infraction score.
    pub is: f64,
    /// Driving score, `rc × is`.
    pub ds: f64,
}

impl RouteResult {
    pub fn new(
        route_id: &str,
        subgroup: Option<Subgroup>,
        rc: f64,
        is: f64,
    ) -> Result<Self, MetricsError> {
        for (name, v) in [("rc", rc), ("is", is)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricsError::InvalidInput(format!(
                    "route '{route_id}': {name} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self {
            route_id: route_id.to_string(),
            subgroup,
            rc,
            is,
            ds: rc * is,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingMeans {
    pub routes: usize,
    pub rc: f64,
    pub is: f64,
    pub ds: f64,
}

impl DrivingMeans {
    fn of<'a>(routes: impl Iterator<Item = &'a RouteResult>) -> Self {
        let (mut n, mut rc, mut is, mut ds) = (0usize, 0.0, 0.0, 0.0);
        for r in routes {
            n += 1;
            rc += r.rc;
            is += r.is;
            ds += r.ds;
        }
        let k = n.max(1) as f64;
        Self {
            routes: n,
            rc: rc / k,
            is: is / k,
            ds: ds / k,
        }
    }

    /// Table convention: RC and DS as percentages, IS raw, e.g. `64.61 / 0.388 / 21.64`.
    pub fn render(&self) -> String {
        format!(
            "{:.2} / {:.3} / {:.2}",
            self.rc * 100.0,
            self.is,
            self.ds * 100.0
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingSummary {
    pub overall: DrivingMeans,
    pub per_subgroup: BTreeMap<Subgroup, DrivingMeans>,
}

/// Arithmetic means of per-route RC, IS and DS, overall and per subgroup.
pub fn aggregate_driving(routes: &[RouteResult]) -> Result<DrivingSummary, MetricsError> {
    if routes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut groups: BTreeMap<Subgroup, Vec<&RouteResult>> = BTreeMap::new();
    for r in routes {
        if let Some(sg) = &r.subgroup {
            groups.entry(sg.clone()).or_default().push(r);
        }
    }
    Ok(DrivingSummary {
        overall: DrivingMeans::of(routes.iter()),
        per_subgroup: groups
            .into_iter()
            .map(|(sg, rs)| (sg, DrivingMeans::of(rs.into_iter())))
            .collect(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteLine {
    route_id: String,
    #[serde(default)]
    subgroup: Option<Vec<usize>>,
    rc: f64,
    #[serde(default)]
    events: Option<Vec<InfractionEvent>>,
    /// Precomputed infraction score; mutually exclusive with `events`.
    #[serde(default)]
    is: Option<f64>,
}

/// Parse a route log: one JSON object per line with `route_id`,
/// `subgroup` (indices or null), `rc`, and either `events` or a stored `is`.
pub fn parse_route_log(
    text: &str,
    penalties: &PenaltyTable,
    taxonomy: Option<&SubgroupTaxonomy>,
) -> Result<Vec<RouteResult>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| MetricsError::InvalidInput(format!("route log line {}: {m}", i + 1));
        let r: RouteLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let subgroup = r.subgroup.map(Subgroup::new);
        if let (Some(t), Some(sg)) = (taxonomy, &subgroup) {
            t.check(sg).map_err(|e| bad(e.to_string()))?;
        }
        let is = match (r.events, r.is) {
            (Some(_), Some(_)) => return Err(bad("both 'events' and 'is' given".into())),
            (Some(ev), None) => infraction_score(&ev, penalties)?,
            (None, Some(is)) => is,
            (None, None) => 1.0,
        };
        out.push(
            RouteResult::new(&r.route_id, subgroup, r.rc, is).map_err(|e| bad(e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn load_route_log(
    path: impl AsRef<Path>,
    penalties: &PenaltyTable,
    taxonomy: Option<&SubgroupTaxonomy>,
) -> Result<Vec<RouteResult>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
    parse_route_log(&text, penalties, taxonomy)
}
