use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Compared method. Serialized as `baseline`, `deeper`, `looped(K,M)` or
/// `cot(R_train,R_eval)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodId {
    Baseline,
    Deeper,
    Looped { blocks: usize, loops: usize },
    Cot { r_train: usize, r_eval: usize },
}

impl MethodId {
    /// Method family used in reports: `baseline`, `deeper`, `looped`, `cot`.
    pub fn family(&self) -> &'static str {
        match self {
            MethodId::Baseline => "baseline",
            MethodId::Deeper => "deeper",
            MethodId::Looped { .. } => "looped",
            MethodId::Cot { .. } => "cot",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodId::Baseline => f.write_str("baseline"),
            MethodId::Deeper => f.write_str("deeper"),
            MethodId::Looped { blocks, loops } => write!(f, "looped({blocks},{loops})"),
            MethodId::Cot { r_train, r_eval } => write!(f, "cot({r_train},{r_eval})"),
        }
    }
}

fn pair(s: &str, prefix: &str) -> Option<(usize, usize)> {
    let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
    let (a, b) = inner.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => return Ok(MethodId::Baseline),
            "deeper" => return Ok(MethodId::Deeper),
            _ => {}
        }
        if let Some((blocks, loops)) = pair(s, "looped") {
            return Ok(MethodId::Looped { blocks, loops });
        }
        if let Some((r_train, r_eval)) = pair(s, "cot") {
            return Ok(MethodId::Cot { r_train, r_eval });
        }
        Err(Error::Schema(format!("unknown method id {s:?}")))
    }
}

impl Serialize for MethodId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One metric value from one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub dataset: String,
    pub method: MethodId,
    pub seed: u64,
    /// `val` or `test`.
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub config_hash: String,
}

impl MetricRecord {
    fn key(&self) -> (&str, MethodId, u64, &str, &str) {
        (&self.dataset, self.method, self.seed, &self.split, &self.metric)
    }
}

/// Checks the (dataset, method, seed, split, metric) uniqueness invariant.
pub(crate) fn check_unique(records: &[MetricRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::Schema(format!(
                "duplicate record {}/{}/seed {}/{}/{}",
                r.dataset, r.method, r.seed, r.split, r.metric
            )));
        }
    }
    Ok(())
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    check_unique(&out)?;
    Ok(out)
}
