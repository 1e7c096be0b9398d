//! Per-weather-kind scoring of a model on a dataset.

use std::collections::BTreeMap;

use secdepth_core::train::{evaluate_each, EvalInput, TrainError};
use secdepth_core::{DepthNet, MetricsRecord};
use serde::Serialize;

use crate::dataset::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KindMetrics {
    pub count: usize,
    pub metrics: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Keyed by weather kind name, `"clear"` for undegraded samples.
    pub per_kind: BTreeMap<String, KindMetrics>,
    /// Mean over every scored image.
    pub aggregate: KindMetrics,
}

/// Scores each sample on its degraded image when it has one, else on the
/// clean target. `kind` keeps only samples of that kind name.
pub fn score(net: &DepthNet, ds: &Dataset, kind: Option<&str>) -> Result<EvalReport, TrainError> {
    let cam = ds.camera();
    let mut groups: BTreeMap<String, Vec<MetricsRecord>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let name = ds.kind_name(i);
        if kind.is_some_and(|k| k != name) {
            continue;
        }
        let input = if s.augmented.is_some() { EvalInput::Degraded } else { EvalInput::Clean };
        let m = evaluate_each(net, std::slice::from_ref(s), &cam, input)?;
        groups.entry(name.to_owned()).or_default().extend(m);
    }
    let count = groups.values().map(Vec::len).sum();
    let aggregate = MetricsRecord::mean(groups.values().flatten()).ok_or(TrainError::EmptyDataset)?;
    let per_kind = groups
        .into_iter()
        .map(|(k, v)| {
            let metrics = MetricsRecord::mean(&v).expect("groups are non-empty");
            (k, KindMetrics { count: v.len(), metrics })
        })
        .collect();
    Ok(EvalReport { per_kind, aggregate: KindMetrics { count, metrics: aggregate } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SynthSpec, WeatherChoice};

    fn dataset(count: u64) -> Dataset {
        let spec = SynthSpec { seed: 1, count, height: 16, width: 32, weather: WeatherChoice::Mixed, severity: 0.6 };
        let samples = spec.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        crate::dataset::write(dir.path(), &spec, &samples).unwrap();
        crate::dataset::load(dir.path()).unwrap()
    }

    #[test]
    fn aggregate_is_count_weighted_mean_of_kinds() {
        let ds = dataset(7);
        let net = DepthNet::init(3);
        let r = score(&net, &ds, None).unwrap();
        assert_eq!(r.per_kind.keys().collect::<Vec<_>>(), ["fog", "rain", "snow"]);
        assert_eq!(r.per_kind["fog"].count, 3);
        assert_eq!(r.aggregate.count, 7);
        let w = MetricsRecord::weighted_mean(r.per_kind.values().map(|k| (&k.metrics, k.count as f64))).unwrap();
        for (a, b) in w.values().iter().zip(r.aggregate.metrics.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_and_empty() {
        let ds = dataset(4);
        let net = DepthNet::init(3);
        let r = score(&net, &ds, Some("rain")).unwrap();
        assert_eq!(r.per_kind.len(), 1);
        assert_eq!(r.aggregate, r.per_kind["rain"]);
        assert!(matches!(score(&net, &ds, Some("clear")), Err(TrainError::EmptyDataset)));
    }
}
