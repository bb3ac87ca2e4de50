//! Scoring and metrics. At inference a feature vector's anomaly score is
//! the mean of the discriminators' score heads; segment scores expand to
//! frame scores; frame-level ROC AUC per (checkpoint, domain) pair fills
//! an `AucMatrix`, from which the forgetting metrics are read.

use crate::datagen::{Bag, DomainDataset};
use crate::diffcore::{DiffError, ParamSet};
use crate::multi_discriminator::{lift_bag, DiscriminatorBank};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC is undefined: {0}")]
    Undefined(String),
    #[error("label {value} at index {index} is not 0 or 1")]
    BadLabel { index: usize, value: u8 },
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("matrix cell ({row}, {col}) is unfilled")]
    Unfilled { row: usize, col: usize },
    #[error("bag `{0}` has no frame labels")]
    MissingFrameLabels(String),
    #[error("bag `{video}`: {frames} frames but {labels} labels")]
    LabelCount {
        video: String,
        frames: usize,
        labels: usize,
    },
    #[error("unreadable matrix text: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] DiffError),
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Mean of the per-discriminator score heads.
pub fn average_heads(head_scores: &[f64]) -> EvalResult<f64> {
    if head_scores.is_empty() {
        return Err(EvalError::Argument("no head scores to average".into()));
    }
    Ok(head_scores.iter().sum::<f64>() / head_scores.len() as f64)
}

/// Ensemble anomaly score of one feature vector: the average of every
/// discriminator's score head.
pub fn ensemble_score(bank: &DiscriminatorBank, params: &ParamSet, f: &[f64]) -> EvalResult<f64> {
    let mut heads = Vec::with_capacity(bank.count());
    for k in 1..=bank.count() {
        heads.push(bank.forward(params, f, k)?.score);
    }
    average_heads(&heads)
}

/// Expands segment scores to frame scores: each score repeated
/// `segment_len` times, in order.
pub fn frame_scores(segment_scores: &[f64], segment_len: usize) -> EvalResult<Vec<f64>> {
    if segment_len == 0 {
        return Err(EvalError::Argument("segment_len must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(segment_scores.len() * segment_len);
    for &s in segment_scores {
        out.extend(std::iter::repeat(s).take(segment_len));
    }
    Ok(out)
}

/// Frame-level ROC AUC in Mann-Whitney form: the probability that a
/// uniformly random positive frame outscores a uniformly random negative
/// frame, ties counted half. Computed from average ranks, so tied runs
/// cost O(n log n) rather than O(n^2).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> EvalResult<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l > 1 {
            return Err(EvalError::BadLabel { index: i, value: l });
        }
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(EvalError::NonFiniteScore(i));
        }
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined(format!(
            "{n_pos} positive and {n_neg} negative frames"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Walk tie runs in ascending order; every member of a run gets the
    // run's average 1-based rank.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Segment scores of one bag under the ensemble.
pub fn bag_segment_scores(
    bank: &DiscriminatorBank,
    params: &ParamSet,
    bag: &Bag,
) -> EvalResult<Vec<f64>> {
    Ok(bank.ensemble_scores(params, &lift_bag(bag))?)
}

/// Scores one test bag and expands to frames, checking the bag's frame
/// labels line up.
fn bag_frames(
    bank: &DiscriminatorBank,
    params: &ParamSet,
    bag: &Bag,
) -> EvalResult<(Vec<f64>, Vec<u8>)> {
    let labels = bag
        .frame_labels
        .as_ref()
        .ok_or_else(|| EvalError::MissingFrameLabels(bag.video_id.clone()))?;
    let seg_scores = bag_segment_scores(bank, params, bag)?;
    let frames = frame_scores(&seg_scores, bag.segment_len())?;
    if frames.len() != labels.len() {
        return Err(EvalError::LabelCount {
            video: bag.video_id.clone(),
            frames: frames.len(),
            labels: labels.len(),
        });
    }
    Ok((frames, labels.clone()))
}

/// Frame-level AUC over one domain's test bags.
pub fn domain_frame_auc(
    bank: &DiscriminatorBank,
    params: &ParamSet,
    domain: &DomainDataset,
) -> EvalResult<f64> {
    pooled_frame_auc(bank, params, std::slice::from_ref(&domain))
}

/// Frame-level AUC with every listed domain's test frames pooled into a
/// single ranking.
pub fn pooled_frame_auc(
    bank: &DiscriminatorBank,
    params: &ParamSet,
    domains: &[&DomainDataset],
) -> EvalResult<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for domain in domains {
        for bag in domain.test_bags() {
            let (f, l) = bag_frames(bank, params, bag)?;
            scores.extend(f);
            labels.extend(l);
        }
    }
    roc_auc(&scores, &labels)
}

/// T x T table of frame-level AUC values. Row r holds the state after
/// training domain r (0-based), column c the evaluated domain, so
/// sequential regimes fill the lower triangle plus the diagonal. Each
/// row also carries the AUC pooled over every domain seen by that row.
#[derive(Debug, Clone, PartialEq)]
pub struct AucMatrix {
    t: usize,
    values: Vec<Option<f64>>,
    pooled: Vec<Option<f64>>,
}

impl AucMatrix {
    pub fn new(t: usize) -> EvalResult<Self> {
        if t == 0 {
            return Err(EvalError::Argument("matrix needs at least one domain".into()));
        }
        Ok(Self {
            t,
            values: vec![None; t * t],
            pooled: vec![None; t],
        })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    fn check(&self, row: usize, col: usize) -> EvalResult<()> {
        if row >= self.t || col >= self.t {
            return Err(EvalError::Argument(format!(
                "cell ({row}, {col}) outside a {t} x {t} matrix",
                t = self.t
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, row: usize, col: usize, auc: f64) -> EvalResult<()> {
        self.check(row, col)?;
        if !(0.0..=1.0).contains(&auc) {
            return Err(EvalError::Argument(format!("AUC {auc} outside [0, 1]")));
        }
        self.values[row * self.t + col] = Some(auc);
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> EvalResult<Option<f64>> {
        self.check(row, col)?;
        Ok(self.values[row * self.t + col])
    }

    pub fn set_pooled(&mut self, row: usize, auc: f64) -> EvalResult<()> {
        self.check(row, 0)?;
        if !(0.0..=1.0).contains(&auc) {
            return Err(EvalError::Argument(format!("AUC {auc} outside [0, 1]")));
        }
        self.pooled[row] = Some(auc);
        Ok(())
    }

    pub fn pooled(&self, row: usize) -> EvalResult<Option<f64>> {
        self.check(row, 0)?;
        Ok(self.pooled[row])
    }

    fn cell(&self, row: usize, col: usize) -> EvalResult<f64> {
        self.values[row * self.t + col].ok_or(EvalError::Unfilled { row, col })
    }

    /// Verifies the full sequential fill: every (r, c <= r) cell and
    /// every row's pooled value.
    pub fn require_sequential_fill(&self) -> EvalResult<()> {
        for row in 0..self.t {
            for col in 0..=row {
                self.cell(row, col)?;
            }
            if self.pooled[row].is_none() {
                return Err(EvalError::Unfilled { row, col: self.t });
            }
        }
        Ok(())
    }

    /// Filled cells of the last row, in column order.
    pub fn last_row(&self) -> EvalResult<Vec<f64>> {
        let row = self.t - 1;
        (0..self.t).map(|col| self.cell(row, col)).collect()
    }

    /// Tab-separated text: one line per trained domain, the T evaluation
    /// columns, then the pooled column; unfilled cells print `-`. Floats
    /// use the shortest round-trip form, so parsing back is lossless.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("trained");
        for c in 1..=self.t {
            out.push_str(&format!("\td{c}"));
        }
        out.push_str("\tpooled\n");
        for row in 0..self.t {
            out.push_str(&format!("{}", row + 1));
            for col in 0..self.t {
                match self.values[row * self.t + col] {
                    Some(v) => out.push_str(&format!("\t{v}")),
                    None => out.push_str("\t-"),
                }
            }
            match self.pooled[row] {
                Some(v) => out.push_str(&format!("\t{v}\n")),
                None => out.push_str("\t-\n"),
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> EvalResult<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| EvalError::Parse("empty text".into()))?;
        let cols = header.split('\t').count();
        if cols < 3 || !header.starts_with("trained") || !header.ends_with("pooled") {
            return Err(EvalError::Parse(format!("unrecognized header `{header}`")));
        }
        let t = cols - 2;
        let mut m = Self::new(t)?;
        let mut rows_seen = 0;
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != t + 2 {
                return Err(EvalError::Parse(format!(
                    "line {}: {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    t + 2
                )));
            }
            let row: usize = fields[0]
                .parse::<usize>()
                .ok()
                .and_then(|r| r.checked_sub(1))
                .filter(|&r| r < t)
                .ok_or_else(|| {
                    EvalError::Parse(format!("line {}: bad row id `{}`", lineno + 2, fields[0]))
                })?;
            let parse = |s: &str| -> EvalResult<Option<f64>> {
                if s == "-" {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| EvalError::Parse(format!("bad value `{s}`")))
            };
            for (col, field) in fields[1..=t].iter().enumerate() {
                if let Some(v) = parse(field)? {
                    m.set(row, col, v)?;
                }
            }
            if let Some(v) = parse(fields[t + 1])? {
                m.set_pooled(row, v)?;
            }
            rows_seen += 1;
        }
        if rows_seen != t {
            return Err(EvalError::Parse(format!(
                "{rows_seen} data rows for a {t} x {t} matrix"
            )));
        }
        Ok(m)
    }
}

/// End-of-sequence forgetting metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingSummary {
    /// AUC over all domains' test frames pooled, after the last domain.
    pub final_auc: f64,
    /// Mean of the last matrix row.
    pub avg_final_auc: f64,
    /// Backward transfer: mean over d < T of A(T, d) - A(d, d).
    /// Negative values quantify forgetting. Zero when T = 1.
    pub bwt: f64,
}

/// Reads the forgetting metrics off a sequentially filled matrix.
pub fn forgetting_metrics(matrix: &AucMatrix) -> EvalResult<ForgettingSummary> {
    matrix.require_sequential_fill()?;
    let t = matrix.t();
    let last = matrix.last_row()?;
    let final_auc = matrix.pooled(t - 1)?.unwrap();
    let avg_final_auc = last.iter().sum::<f64>() / t as f64;
    let bwt = if t == 1 {
        0.0
    } else {
        let mut acc = 0.0;
        for d in 0..t - 1 {
            acc += last[d] - matrix.cell(d, d)?;
        }
        acc / (t - 1) as f64
    };
    Ok(ForgettingSummary {
        final_auc,
        avg_final_auc,
        bwt,
    })
}
