use std::collections::HashSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target images-per-class used by [`balance_repeats`] by default.
pub const DEFAULT_BALANCE_TARGET: u64 = 200;

/// One metric value for one checkpoint on one (sub)class and prompt type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub checkpoint: String,
    pub category: Option<String>,
    pub class: String,
    pub subclass: Option<String>,
    pub prompt_type: String,
    pub metric: String,
    pub value: f64,
    pub higher_is_better: bool,
}

type Key<'a> = (&'a str, &'a str, Option<&'a str>, &'a str, &'a str);

impl ScoreRecord {
    fn key(&self) -> Key<'_> {
        (
            &self.checkpoint,
            &self.class,
            self.subclass.as_deref(),
            &self.prompt_type,
            &self.metric,
        )
    }

    /// Checkpoints are ranked against each other within one of these.
    fn group(&self) -> (&str, &str, Option<&str>, &str) {
        (&self.metric, &self.class, self.subclass.as_deref(), &self.prompt_type)
    }
}

/// Score records with unique `(checkpoint, class, subclass, prompt_type,
/// metric)` keys and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    records: Vec<ScoreRecord>,
}

impl ScoreTable {
    pub fn new(records: Vec<ScoreRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if !r.value.is_finite() {
                return Err(Error::invalid(format!("record {i}: value {} is not finite", r.value)));
            }
            if !seen.insert(r.key()) {
                return Err(Error::invalid(format!(
                    "record {i}: duplicate key (checkpoint '{}', class '{}', subclass {:?}, prompt type '{}', metric '{}')",
                    r.checkpoint, r.class, r.subclass, r.prompt_type, r.metric
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ScoreRecord> {
        self.records
    }
}

/// Replaces each value by its rank among the checkpoints sharing its metric,
/// (sub)class and prompt type, scaled to `[0, 1]` with 1 for the best.
/// Tied values share the mean of the positions they occupy.
pub fn rank_normalize(table: &ScoreTable) -> Result<ScoreTable> {
    let mut groups: IndexMap<_, Vec<usize>> = IndexMap::new();
    for (i, r) in table.records.iter().enumerate() {
        groups.entry(r.group()).or_default().push(i);
    }
    let mut out = table.records.clone();
    for ((metric, class, subclass, prompt), members) in &groups {
        let n = members.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "metric '{metric}', class '{class}', subclass {subclass:?}, prompt type '{prompt}': \
                 only one checkpoint, cannot rank"
            )));
        }
        let higher = table.records[members[0]].higher_is_better;
        if members.iter().any(|&i| table.records[i].higher_is_better != higher) {
            return Err(Error::invalid(format!(
                "metric '{metric}' mixes higher- and lower-is-better records"
            )));
        }
        // Worst first, so position p scores p / (n − 1).
        let mut order = members.clone();
        order.sort_by(|&a, &b| {
            let (va, vb) = (table.records[a].value, table.records[b].value);
            if higher {
                va.total_cmp(&vb)
            } else {
                vb.total_cmp(&va)
            }
        });
        let denom = (n - 1) as f64;
        let mut start = 0;
        while start < n {
            let v = table.records[order[start]].value;
            let mut end = start + 1;
            while end < n && table.records[order[end]].value == v {
                end += 1;
            }
            let score = (start + end - 1) as f64 / 2.0 / denom;
            for &i in &order[start..end] {
                out[i].value = score;
            }
            start = end;
        }
    }
    ScoreTable::new(out)
}

/// Category-level score for one checkpoint, prompt type and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub checkpoint: String,
    pub category: String,
    pub prompt_type: String,
    pub metric: String,
    pub value: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Unweighted two-stage mean: subclasses into their class, then classes
/// into their category. Classes without subclasses enter the second stage
/// as they are.
pub fn aggregate(table: &ScoreTable) -> Result<Vec<CategoryScore>> {
    type ClassKey = (String, String, String, String, String);
    let mut classes: IndexMap<ClassKey, (Vec<f64>, bool, bool)> = IndexMap::new();
    for (i, r) in table.records.iter().enumerate() {
        let category = r.category.clone().ok_or_else(|| {
            Error::invalid(format!("record {i} (class '{}') has no category", r.class))
        })?;
        let key = (
            r.checkpoint.clone(),
            category,
            r.class.clone(),
            r.prompt_type.clone(),
            r.metric.clone(),
        );
        let entry = classes.entry(key).or_insert((Vec::new(), false, false));
        entry.0.push(r.value);
        if r.subclass.is_some() {
            entry.1 = true;
        } else {
            entry.2 = true;
        }
    }
    let mut categories: IndexMap<(String, String, String, String), Vec<f64>> = IndexMap::new();
    for ((checkpoint, category, class, prompt, metric), (values, with_sub, without_sub)) in classes {
        if with_sub && without_sub {
            return Err(Error::invalid(format!(
                "class '{class}' mixes records with and without a subclass"
            )));
        }
        categories
            .entry((checkpoint, category, prompt, metric))
            .or_default()
            .push(mean(&values));
    }
    Ok(categories
        .into_iter()
        .map(|((checkpoint, category, prompt_type, metric), values)| CategoryScore {
            checkpoint,
            category,
            prompt_type,
            metric,
            value: mean(&values),
        })
        .collect())
}

/// `max(1, round(target / size))` per class, rounding halves away from zero.
pub fn balance_repeats(sizes: &[u64], target: u64) -> Result<Vec<u64>> {
    if target == 0 {
        return Err(Error::invalid("balance target must be positive"));
    }
    sizes
        .iter()
        .map(|&size| {
            if size == 0 {
                return Err(Error::invalid("class sizes must be positive"));
            }
            Ok(((2 * target + size) / (2 * size)).max(1))
        })
        .collect()
}
