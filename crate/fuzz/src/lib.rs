//! Shared inputs for the fuzz targets.

use bizinsight::datamodel::MetricRegistry;
use bizinsight::ingest::{parse_csv_str, IngestConfig};

pub const REGISTRY: &str = r#"[
  {"name": "clicks", "kind": "additive", "unit": "clicks", "direction": "higher_is_better"},
  {"name": "cost", "kind": "additive", "unit": "USD", "direction": "higher_is_better"},
  {"name": "cpc", "kind": "ratio", "numerator": "cost", "denominator": "clicks", "unit": "USD", "direction": "lower_is_better"}
]"#;

pub fn registry() -> MetricRegistry {
    MetricRegistry::from_json(REGISTRY).expect("fixed registry parses")
}

/// A small dataset for plan application: a duplicate, a hole and an outlier.
pub fn sample() -> bizinsight::datamodel::Dataset {
    let csv = "date,channel,clicks,cost,cpc\n\
               2024-01-01,Search,10,5,0.5\n\
               2024-01-01,Search,10,5,0.5\n\
               2024-01-01,Mail,4,,\n\
               2024-01-02,Search,12,6,0.5\n\
               2024-01-02,Mail,900,450,0.5\n\
               2024-01-03,Search,11,5.5,0.5\n";
    parse_csv_str(csv, &registry(), &IngestConfig::default())
        .expect("fixed sample parses")
        .dataset
}
