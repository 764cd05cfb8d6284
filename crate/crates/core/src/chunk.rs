//! Splitting a dataset into prompt-sized chunks.

use std::collections::BTreeMap;

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Dataset;
use crate::ingest::{csv_header_line, csv_row_line};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("row {row} needs {tokens} tokens, budget is {budget}")]
    RowTooLarge {
        row: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
}

/// Pluggable token estimate. Must be deterministic and monotone in length.
pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BytesPerToken;

impl TokenEstimator for BytesPerToken {
    fn estimate(&self, text: &str) -> usize {
        estimate_tokens(text)
    }
}

pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChunkStrategy {
    /// One group per calendar month.
    Temporal,
    /// One group per value of a dimension column.
    Categorical { dimension: String },
    /// Consecutive rows, at most `max_rows` per chunk when set.
    Budget {
        #[serde(default)]
        max_rows: Option<usize>,
    },
}

impl Default for ChunkStrategy {
    fn default() -> Self {
        ChunkStrategy::Budget { max_rows: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub strategy: ChunkStrategy,
    /// Row indices per chunk, each in dataset order.
    pub chunks: Vec<Vec<usize>>,
}

impl ChunkPlan {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Token cost of a chunk's serialized form: the header line plus each row
/// line, each estimated on its own. Summing per-line ceilings bounds the
/// estimate of the concatenated text from above.
pub fn chunk_tokens(d: &Dataset, rows: &[usize], est: &dyn TokenEstimator) -> usize {
    est.estimate(&csv_header_line(d))
        + rows
            .iter()
            .map(|&i| est.estimate(&csv_row_line(d, &d.rows[i])))
            .sum::<usize>()
}

/// Groups rows by strategy, then subdivides any group that overflows the
/// token budget.
pub fn plan_chunks(
    d: &Dataset,
    strategy: &ChunkStrategy,
    budget_tokens: usize,
    est: &dyn TokenEstimator,
) -> Result<ChunkPlan, ChunkError> {
    let header = est.estimate(&csv_header_line(d));
    let row_cost: Vec<usize> = d
        .rows
        .iter()
        .map(|r| est.estimate(&csv_row_line(d, r)))
        .collect();
    for (i, &c) in row_cost.iter().enumerate() {
        if header + c > budget_tokens {
            return Err(ChunkError::RowTooLarge {
                row: i,
                tokens: header + c,
                budget: budget_tokens,
            });
        }
    }

    let all: Vec<usize> = (0..d.rows.len()).collect();
    let (groups, max_rows): (Vec<Vec<usize>>, Option<usize>) = match strategy {
        ChunkStrategy::Temporal => {
            let mut by_month: BTreeMap<(i32, u32), Vec<usize>> = BTreeMap::new();
            for (i, r) in d.rows.iter().enumerate() {
                by_month
                    .entry((r.date.year(), r.date.month()))
                    .or_default()
                    .push(i);
            }
            (by_month.into_values().collect(), None)
        }
        ChunkStrategy::Categorical { dimension } => {
            if !d.dimensions.contains(dimension) {
                return Err(ChunkError::UnknownDimension(dimension.clone()));
            }
            let mut by_value: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, r) in d.rows.iter().enumerate() {
                let v = r.dims.get(dimension).map(String::as_str).unwrap_or("");
                by_value.entry(v).or_default().push(i);
            }
            (by_value.into_values().collect(), None)
        }
        ChunkStrategy::Budget { max_rows } => (vec![all], *max_rows),
    };

    let mut chunks = Vec::new();
    for group in groups {
        let mut current: Vec<usize> = Vec::new();
        let mut used = header;
        for i in group {
            let full = max_rows.is_some_and(|m| current.len() >= m.max(1));
            if !current.is_empty() && (used + row_cost[i] > budget_tokens || full) {
                chunks.push(std::mem::take(&mut current));
                used = header;
            }
            current.push(i);
            used += row_cost[i];
        }
        if !current.is_empty() {
            chunks.push(current);
        }
    }
    Ok(ChunkPlan {
        strategy: strategy.clone(),
        chunks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Date, MetricRegistry, MetricSpec, Record};
    use chrono::Duration;

    fn dataset(days: i64, channels: &[&str]) -> Dataset {
        let start = Date::from_ymd_opt(2024, 1, 1).unwrap();
        let mut rows = Vec::new();
        for i in 0..days {
            for ch in channels {
                rows.push(
                    Record::new(start + Duration::days(i))
                        .dim("channel", ch)
                        .value("sessions", 1000.0),
                );
            }
        }
        let mut d = Dataset::new(
            rows,
            MetricRegistry::from_specs([MetricSpec::additive("sessions")]),
            vec!["channel".into()],
        );
        d.sort_canonical();
        d
    }

    #[test]
    fn estimate_examples() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"x".repeat(400)), 100);
        assert_eq!(estimate_tokens("abcde"), 2);
        let (a, b) = ("hello ", "world!!");
        let ab = format!("{a}{b}");
        assert!(estimate_tokens(&ab) >= estimate_tokens(a));
        assert!(estimate_tokens(&ab) >= estimate_tokens(b));
    }

    #[test]
    fn budget_strategy_even_split() {
        let d = dataset(1000, &["ads"]);
        let est = BytesPerToken;
        let header = est.estimate(&csv_header_line(&d));
        let row = est.estimate(&csv_row_line(&d, &d.rows[0]));
        let plan = plan_chunks(&d, &ChunkStrategy::default(), header + 100 * row, &est).unwrap();
        assert_eq!(plan.len(), 10);
        assert!(plan.chunks.iter().all(|c| c.len() == 100));
    }

    #[test]
    fn max_rows_cap() {
        let d = dataset(25, &["ads"]);
        let plan = plan_chunks(
            &d,
            &ChunkStrategy::Budget { max_rows: Some(10) },
            1_000_000,
            &BytesPerToken,
        )
        .unwrap();
        let sizes: Vec<usize> = plan.chunks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
    }

    #[test]
    fn temporal_month_boundaries() {
        let d = dataset(91, &["ads"]); // Jan, Feb (leap), Mar 2024
        let plan = plan_chunks(&d, &ChunkStrategy::Temporal, 1_000_000, &BytesPerToken).unwrap();
        assert_eq!(plan.len(), 3);
        let months: Vec<u32> = plan
            .chunks
            .iter()
            .map(|c| d.rows[c[0]].date.month())
            .collect();
        assert_eq!(months, vec![1, 2, 3]);
        for c in &plan.chunks {
            let m = d.rows[c[0]].date.month();
            assert!(c.iter().all(|&i| d.rows[i].date.month() == m));
        }
    }

    #[test]
    fn categorical_split() {
        let d = dataset(10, &["ads", "organic"]);
        let plan = plan_chunks(
            &d,
            &ChunkStrategy::Categorical {
                dimension: "channel".into(),
            },
            1_000_000,
            &BytesPerToken,
        )
        .unwrap();
        assert_eq!(plan.len(), 2);
        for c in &plan.chunks {
            let v = &d.rows[c[0]].dims["channel"];
            assert!(c.iter().all(|&i| &d.rows[i].dims["channel"] == v));
        }
    }

    #[test]
    fn overflowing_group_is_subdivided() {
        let d = dataset(31, &["ads"]);
        let est = BytesPerToken;
        let budget = chunk_tokens(&d, &[0, 1, 2, 3, 4], &est);
        let plan = plan_chunks(&d, &ChunkStrategy::Temporal, budget, &est).unwrap();
        assert!(plan.len() > 1);
        for c in &plan.chunks {
            assert!(chunk_tokens(&d, c, &est) <= budget);
        }
    }

    #[test]
    fn row_too_large() {
        let d = dataset(2, &["ads"]);
        let err = plan_chunks(&d, &ChunkStrategy::default(), 3, &BytesPerToken).unwrap_err();
        assert!(matches!(err, ChunkError::RowTooLarge { row: 0, .. }));
    }
}
