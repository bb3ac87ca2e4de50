//! Synthetic domain stream. Each domain places its normal-class center
//! at `domain_shift_scale` times a random unit direction; anomalous
//! instances are displaced from that center along a domain-specific
//! offset direction and carry extra variance inside a domain-specific
//! salience subspace. The offset magnitude is half-Gaussian with mean
//! `class_separation`, so class centers end up `class_separation` apart;
//! the subspace variance makes anomalies project to extreme values under
//! any randomly initialized readout, letting bag-level max selection
//! lock onto true anomalies instead of a coin-flip direction.
//!
//! Salience subspaces come from disjoint blocks of one shared
//! orthonormal basis, so no domain's extra variance doubles as
//! another's. Offset directions are mostly domain-unique too, but each
//! blends in a fixed share of a regular tetrahedron's vertices inside
//! one shared three-dimensional subspace, making every pair of offsets
//! slightly anti-correlated. Pushing scores up along a new domain's
//! offset therefore pulls them down a little along every old one. That
//! is the stream's forgetting pressure, and it cannot be avoided by a
//! model that only ever trains on the current domain; rehearsed
//! pseudo-features keep re-boosting the old directions, forcing the
//! context-conditioned scoring that retains them. Features are quantized
//! to f32 so in-memory data and the on-disk format agree bit for bit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Bag, DataResult, DomainDataset, FeatureInstance, SyntheticStreamConfig};

// Offset magnitude: class_separation/2 + |N(0, (OFFSET_JITTER * class_separation)^2)|.
// This sigma makes the half-Gaussian's mean equal class_separation/2, so
// the expected center gap is exactly class_separation.
const OFFSET_JITTER: f64 = 0.626_657_068_657_750_1; // sqrt(pi/2) / 2

// Basis columns 0..3 span the offset tetrahedron. From column 3 on, each
// domain claims feature_dim/SALIENCE_DIM_DIVISOR - 1 consecutive basis
// vectors (wrapping once the basis is used up) as its salience subspace,
// where anomalies get N(0, (salience_coeff * class_separation)^2)
// coefficients. A random unit readout keeps roughly 1/DIVISOR of that
// variance, so anomaly projections spread well beyond the normals'
// spread for either sign of the readout; the positive tail wins the
// in-bag max from the first step, which is what keeps max-based ranking
// from locking onto an inverted scoring direction. The coefficient scale
// lives in the stream config: it trades init-time argmax reliability
// against how much domain-specific variance the model must explain away
// after the offset is learned.
const SALIENCE_DIM_DIVISOR: usize = 8;

// Tetrahedron vertices in the first three basis columns, unit length.
// Domains cycle through them in order.
const TETRA_SIGNS: [[f64; 3]; 4] = [
    [1.0, 1.0, 1.0],
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
];

// Weight of the shared tetrahedral component inside each offset
// direction; the rest is domain-unique. Pairwise offset cosine is
// -TETRA_WEIGHT^2 / 3, which sets how hard learning a new domain erodes
// the old readouts. Chosen so rehearsal-free training reliably loses
// ground while rehearsal can still defend it.
const TETRA_WEIGHT: f64 = 0.5;

// Per-coordinate Gaussian noise for every instance. Kept below 1 so the
// class structure, not the ambient noise, decides in-bag score maxima
// even for a freshly initialized single discriminator.
const NOISE_SCALE: f64 = 0.25;

struct DomainGeometry {
    center: Vec<f64>,
    offset_dir: Vec<f64>,
    salience_dirs: Vec<Vec<f64>>,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random orthonormal basis of the feature space, via Gram-Schmidt over
/// fresh Gaussian draws.
fn orthonormal_basis(dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn draw_instance(
    geo: &DomainGeometry,
    anomalous: bool,
    sep: f64,
    salience_coeff: f64,
    span: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> FeatureInstance {
    // Draw order is fixed: offset magnitude, subspace coefficients, then
    // per-coordinate noise; reordering would silently change every
    // seeded stream.
    let (m, coeffs) = if anomalous {
        let a: f64 = rng.sample(StandardNormal);
        let coeffs: Vec<f64> = geo
            .salience_dirs
            .iter()
            .map(|_| rng.sample::<f64, _>(StandardNormal) * salience_coeff * sep)
            .collect();
        (sep * 0.5 + (a * OFFSET_JITTER * sep).abs(), coeffs)
    } else {
        (0.0, Vec::new())
    };
    let values = (0..geo.center.len())
        .map(|k| {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_SCALE;
            let salience: f64 = coeffs
                .iter()
                .zip(&geo.salience_dirs)
                .map(|(b, dir)| b * dir[k])
                .sum();
            (geo.center[k] + m * geo.offset_dir[k] + salience + noise) as f32
        })
        .collect();
    FeatureInstance {
        values,
        frame_span: span,
    }
}

fn make_bag(
    cfg: &SyntheticStreamConfig,
    video_id: String,
    domain_id: usize,
    positive: bool,
    with_frame_labels: bool,
    geo: &DomainGeometry,
    rng: &mut ChaCha8Rng,
) -> Bag {
    let seg = cfg.segment_len;
    let mut instance_labels = vec![0u8; cfg.bag_size];
    if positive {
        let k = cfg.anomalous_instances();
        let start = rng.gen_range(0..=cfg.bag_size - k);
        for l in instance_labels.iter_mut().skip(start).take(k) {
            *l = 1;
        }
    }
    let instances = instance_labels
        .iter()
        .enumerate()
        .map(|(i, &lbl)| {
            let span = (i * seg, (i + 1) * seg);
            draw_instance(
                geo,
                lbl == 1,
                cfg.class_separation,
                cfg.salience_coeff,
                span,
                rng,
            )
        })
        .collect();
    let frame_labels = with_frame_labels.then(|| {
        instance_labels
            .iter()
            .flat_map(|&l| std::iter::repeat(l).take(seg))
            .collect()
    });
    Bag {
        video_id,
        domain_id,
        weak_label: positive,
        instances,
        frame_labels,
    }
}

/// Generates the full stream. Deterministic in `cfg.seed`: the same
/// configuration always produces bitwise-identical f32 features.
pub fn make_synthetic_stream(cfg: &SyntheticStreamConfig) -> DataResult<Vec<DomainDataset>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_pos = cfg.positive_bags();

    let basis = orthonormal_basis(cfg.feature_dim, &mut rng);
    let block = (cfg.feature_dim / SALIENCE_DIM_DIVISOR).max(2);
    let free_cols = cfg.feature_dim - 3;

    let mut domains = Vec::with_capacity(cfg.domains);
    for t in 1..=cfg.domains {
        let signs = &TETRA_SIGNS[(t - 1) % 4];
        let start = (t - 1) * block % free_cols;
        let column = |j: usize| basis[3 + (start + j) % free_cols].clone();
        let unique = column(0);
        let unique_weight = (1.0 - TETRA_WEIGHT * TETRA_WEIGHT).sqrt();
        let offset_dir = (0..cfg.feature_dim)
            .map(|k| {
                let shared: f64 = signs
                    .iter()
                    .zip(&basis[..3])
                    .map(|(s, b)| s * b[k])
                    .sum::<f64>()
                    / 3f64.sqrt();
                TETRA_WEIGHT * shared + unique_weight * unique[k]
            })
            .collect();
        let geo = DomainGeometry {
            center: unit_vector(cfg.feature_dim, &mut rng)
                .into_iter()
                .map(|v| v * cfg.domain_shift_scale)
                .collect(),
            offset_dir,
            salience_dirs: (1..block).map(column).collect(),
        };

        let split = |name: &str, with_labels: bool, rng: &mut ChaCha8Rng| -> Vec<Bag> {
            (0..cfg.bags_per_domain)
                .map(|i| {
                    make_bag(
                        cfg,
                        format!("d{t:02}_{name}_{i:03}"),
                        t,
                        i < n_pos,
                        with_labels,
                        &geo,
                        rng,
                    )
                })
                .collect()
        };
        let train = split("train", false, &mut rng);
        let test = split("test", true, &mut rng);
        domains.push(DomainDataset::new(t, train, test)?);
    }
    Ok(domains)
}
