//! Dataset model and sources. A stream is an ordered list of domains;
//! each domain is a set of bags (one bag per video) carrying segment
//! features, a video-level weak label, and, for test bags only, frame
//! labels. Train-bag reads are counted so the sequential protocol can
//! prove it never touched past-domain training data.

mod format;
mod synthetic;

pub use format::{load_feature_dataset, save_feature_dataset, FEATURE_MAGIC, LABEL_MAGIC};
pub use synthetic::make_synthetic_stream;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("{path}: {detail} (byte {offset})")]
    Format {
        path: String,
        offset: usize,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type DataResult<T> = Result<T, DataError>;

/// One segment of a video: a feature vector plus the frame range it
/// summarizes (half-open, in frames).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInstance {
    pub values: Vec<f32>,
    pub frame_span: (usize, usize),
}

/// One video as a bag of segment instances. `weak_label` is the only
/// supervision available at training time; `frame_labels` exist on test
/// bags only and drive evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub video_id: String,
    pub domain_id: usize,
    pub weak_label: bool,
    pub instances: Vec<FeatureInstance>,
    pub frame_labels: Option<Vec<u8>>,
}

impl Bag {
    pub fn feature_dim(&self) -> usize {
        self.instances.first().map(|i| i.values.len()).unwrap_or(0)
    }

    pub fn segment_len(&self) -> usize {
        self.instances
            .first()
            .map(|i| i.frame_span.1 - i.frame_span.0)
            .unwrap_or(0)
    }

    pub fn frame_count(&self) -> usize {
        self.instances.last().map(|i| i.frame_span.1).unwrap_or(0)
    }
}

/// All bags of one domain. Training bags sit behind a read counter.
#[derive(Debug)]
pub struct DomainDataset {
    domain_id: usize,
    train: Vec<Bag>,
    test: Vec<Bag>,
    train_reads: AtomicU64,
}

impl DomainDataset {
    pub fn new(domain_id: usize, train: Vec<Bag>, test: Vec<Bag>) -> DataResult<Self> {
        let mut dim: Option<usize> = None;
        let mut ids = std::collections::BTreeSet::new();
        for bag in train.iter().chain(test.iter()) {
            if bag.domain_id != domain_id {
                return Err(DataError::Dataset(format!(
                    "bag `{}` carries domain {} inside domain {}",
                    bag.video_id, bag.domain_id, domain_id
                )));
            }
            if bag.instances.is_empty() {
                return Err(DataError::Dataset(format!(
                    "bag `{}` has no instances",
                    bag.video_id
                )));
            }
            let k = bag.feature_dim();
            if bag.instances.iter().any(|i| i.values.len() != k) {
                return Err(DataError::Dataset(format!(
                    "bag `{}` mixes feature dims",
                    bag.video_id
                )));
            }
            match dim {
                None => dim = Some(k),
                Some(d) if d != k => {
                    return Err(DataError::Dataset(format!(
                        "bag `{}` has feature dim {k}, domain uses {d}",
                        bag.video_id
                    )))
                }
                _ => {}
            }
            if !ids.insert(bag.video_id.clone()) {
                return Err(DataError::Dataset(format!(
                    "duplicate video id `{}`",
                    bag.video_id
                )));
            }
        }
        Ok(Self {
            domain_id,
            train,
            test,
            train_reads: AtomicU64::new(0),
        })
    }

    pub fn domain_id(&self) -> usize {
        self.domain_id
    }

    pub fn feature_dim(&self) -> usize {
        self.train
            .first()
            .or_else(|| self.test.first())
            .map(|b| b.feature_dim())
            .unwrap_or(0)
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    /// Counted access to one training bag.
    pub fn train_bag(&self, idx: usize) -> &Bag {
        self.train_reads.fetch_add(1, Ordering::Relaxed);
        &self.train[idx]
    }

    /// Counted iteration over all training bags.
    pub fn train_bags(&self) -> impl Iterator<Item = &Bag> {
        self.train_reads
            .fetch_add(self.train.len() as u64, Ordering::Relaxed);
        self.train.iter()
    }

    /// Uncounted view, for serialization and dataset tooling only.
    pub(crate) fn train_bags_raw(&self) -> &[Bag] {
        &self.train
    }

    pub fn test_bags(&self) -> &[Bag] {
        &self.test
    }

    /// Number of training-bag reads so far.
    pub fn train_reads(&self) -> u64 {
        self.train_reads.load(Ordering::Relaxed)
    }
}

impl PartialEq for DomainDataset {
    fn eq(&self, other: &Self) -> bool {
        self.domain_id == other.domain_id && self.train == other.train && self.test == other.test
    }
}

impl Clone for DomainDataset {
    fn clone(&self) -> Self {
        Self {
            domain_id: self.domain_id,
            train: self.train.clone(),
            test: self.test.clone(),
            train_reads: AtomicU64::new(0),
        }
    }
}

/// Parameters of the synthetic domain stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticStreamConfig {
    /// Number of domains in arrival order.
    pub domains: usize,
    pub feature_dim: usize,
    /// Training bags per domain; the same count is generated for test.
    pub bags_per_domain: usize,
    /// Segment instances per bag.
    pub bag_size: usize,
    /// Fraction of bags that are anomalous at video level, in (0, 1).
    pub anomaly_bag_fraction: f64,
    /// Fraction of instances inside a positive bag that are anomalous,
    /// in (0, 1); at least one instance is always anomalous.
    pub anomaly_instance_fraction: f64,
    /// Distance of each domain's normal-class center from the origin.
    pub domain_shift_scale: f64,
    /// Distance between normal and anomalous class centers in a domain.
    pub class_separation: f64,
    /// Standard deviation of anomalous-instance coefficients inside the
    /// domain's salience subspace, as a multiple of `class_separation`.
    pub salience_coeff: f64,
    /// Frames summarized by one feature instance.
    pub segment_len: usize,
    pub seed: u64,
}

impl Default for SyntheticStreamConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            feature_dim: 32,
            bags_per_domain: 40,
            bag_size: 16,
            anomaly_bag_fraction: 0.3,
            anomaly_instance_fraction: 0.2,
            domain_shift_scale: 6.0,
            class_separation: 4.0,
            salience_coeff: 1.5,
            segment_len: 16,
            seed: 7,
        }
    }
}

impl SyntheticStreamConfig {
    pub fn validate(&self) -> DataResult<()> {
        if self.domains == 0 {
            return Err(DataError::Config("domains must be >= 1".into()));
        }
        if self.feature_dim < 4 {
            return Err(DataError::Config(
                "feature_dim must be >= 4: two offset-plane dimensions plus \
                 room for a salience subspace"
                    .into(),
            ));
        }
        if self.bags_per_domain < 2 {
            return Err(DataError::Config(
                "bags_per_domain must be >= 2 so both weak labels appear".into(),
            ));
        }
        if self.bag_size == 0 {
            return Err(DataError::Config("bag_size must be >= 1".into()));
        }
        if !(self.anomaly_bag_fraction > 0.0 && self.anomaly_bag_fraction < 1.0) {
            return Err(DataError::Config(
                "anomaly_bag_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.anomaly_instance_fraction > 0.0 && self.anomaly_instance_fraction < 1.0) {
            return Err(DataError::Config(
                "anomaly_instance_fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.class_separation > 0.0) {
            return Err(DataError::Config(
                "class_separation must be positive".into(),
            ));
        }
        if !(self.salience_coeff >= 0.0) || !self.salience_coeff.is_finite() {
            return Err(DataError::Config(
                "salience_coeff must be finite and >= 0".into(),
            ));
        }
        if !(self.domain_shift_scale >= 0.0) || !self.domain_shift_scale.is_finite() {
            return Err(DataError::Config(
                "domain_shift_scale must be finite and >= 0".into(),
            ));
        }
        if self.segment_len == 0 {
            return Err(DataError::Config("segment_len must be >= 1".into()));
        }
        Ok(())
    }

    /// Positive bags per split, clamped so both classes always appear.
    pub fn positive_bags(&self) -> usize {
        let raw = (self.bags_per_domain as f64 * self.anomaly_bag_fraction).round() as usize;
        raw.clamp(1, self.bags_per_domain - 1)
    }

    /// Anomalous instances inside a positive bag, at least one.
    pub fn anomalous_instances(&self) -> usize {
        let raw = (self.bag_size as f64 * self.anomaly_instance_fraction).round() as usize;
        raw.clamp(1, self.bag_size)
    }
}
