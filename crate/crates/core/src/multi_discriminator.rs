//! Discriminator ensemble. Each discriminator is a small MLP trunk whose
//! 32-dim intermediate feature h feeds two sigmoid heads: an anomaly
//! score and a real/fake probability. One discriminator scores everything
//! (D); with the full ensemble, a second specializes on normal-labeled
//! data against the normal generator (Dn) and a third on positive-bag
//! data against the anomaly generator (Da). A diversity penalty pushes
//! the three trunks toward complementary intermediate features.

use rand_chacha::ChaCha8Rng;

use crate::datagen::Bag;
use crate::diffcore::{
    xavier_uniform, Activation, DiffError, DiffResult, NodeId, ParamSet, Tape, Tensor2,
};
use crate::dual_generator::{
    reparam_graph, ClassTag, DualGenerator, FrozenReplayer, PROB_EPS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub feature_dim: usize,
    /// First trunk layer width. 512 suits real feature extractors;
    /// synthetic-scale runs use 64.
    pub hidden: usize,
    /// Width of the intermediate feature h both heads read.
    pub trunk_out: usize,
}

impl DiscriminatorConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden: 512,
            trunk_out: 32,
        }
    }

    pub fn validate(&self) -> DiffResult<()> {
        for (what, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("trunk_out", self.trunk_out),
        ] {
            if v == 0 {
                return Err(DiffError::Shape {
                    context: "DiscriminatorConfig".into(),
                    expected: format!("{what} >= 1"),
                    got: "0".into(),
                });
            }
        }
        Ok(())
    }
}

/// Output triple for one feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput {
    pub score: f64,
    pub real_prob: f64,
    pub hidden: Vec<f64>,
}

/// Node handles for one discriminator's forward pass over a batch.
pub struct DiscHeadNodes {
    /// n x trunk_out intermediate features.
    pub hidden: NodeId,
    /// n x 1 anomaly scores in (0,1).
    pub score: NodeId,
    /// n x 1 realness probabilities in (0,1).
    pub gan: NodeId,
}

/// A bank of identically shaped discriminators (1 for single-model
/// regimes, 3 for the ensemble). Parameters live in a shared `ParamSet`
/// under `disc{k}.*` names, k starting at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorBank {
    cfg: DiscriminatorConfig,
    count: usize,
}

impl DiscriminatorBank {
    pub fn new(cfg: DiscriminatorConfig, count: usize) -> DiffResult<Self> {
        cfg.validate()?;
        if count != 1 && count != 3 {
            return Err(DiffError::Shape {
                context: "DiscriminatorBank".into(),
                expected: "1 or 3 discriminators".into(),
                got: format!("{count}"),
            });
        }
        Ok(Self { cfg, count })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    fn name(&self, k: usize, part: &str) -> String {
        format!("disc{k}.{part}")
    }

    /// Inserts fresh parameters for every discriminator, in index order.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> DiffResult<()> {
        let (kf, h, t) = (self.cfg.feature_dim, self.cfg.hidden, self.cfg.trunk_out);
        for k in 1..=self.count {
            params.insert(&self.name(k, "l1.w"), xavier_uniform(kf, h, rng))?;
            params.insert(&self.name(k, "l1.b"), Tensor2::zeros(1, h))?;
            params.insert(&self.name(k, "l2.w"), xavier_uniform(h, t, rng))?;
            params.insert(&self.name(k, "l2.b"), Tensor2::zeros(1, t))?;
            params.insert(&self.name(k, "score.w"), xavier_uniform(t, 1, rng))?;
            params.insert(&self.name(k, "score.b"), Tensor2::zeros(1, 1))?;
            params.insert(&self.name(k, "gan.w"), xavier_uniform(t, 1, rng))?;
            params.insert(&self.name(k, "gan.b"), Tensor2::zeros(1, 1))?;
        }
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for k in 1..=self.count {
            for part in ["l1.w", "l1.b", "l2.w", "l2.b", "score.w", "score.b", "gan.w", "gan.b"] {
                out.push(self.name(k, part));
            }
        }
        out.sort();
        out
    }

    /// Tape-side forward of discriminator `k` over x (n x K).
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        k: usize,
    ) -> DiffResult<DiscHeadNodes> {
        self.check_index(k)?;
        let w1 = tape.param(params, &self.name(k, "l1.w"))?;
        let b1 = tape.param(params, &self.name(k, "l1.b"))?;
        let h1 = tape.affine(x, w1, b1, Activation::Relu)?;
        let w2 = tape.param(params, &self.name(k, "l2.w"))?;
        let b2 = tape.param(params, &self.name(k, "l2.b"))?;
        let hidden = tape.affine(h1, w2, b2, Activation::Relu)?;
        let ws = tape.param(params, &self.name(k, "score.w"))?;
        let bs = tape.param(params, &self.name(k, "score.b"))?;
        let score = tape.affine(hidden, ws, bs, Activation::Sigmoid)?;
        let wg = tape.param(params, &self.name(k, "gan.w"))?;
        let bg = tape.param(params, &self.name(k, "gan.b"))?;
        let gan = tape.affine(hidden, wg, bg, Activation::Sigmoid)?;
        Ok(DiscHeadNodes { hidden, score, gan })
    }

    /// Plain forward over a batch: (scores, realness probs, hidden rows).
    pub fn forward_batch(
        &self,
        params: &ParamSet,
        x: &Tensor2,
        k: usize,
    ) -> DiffResult<(Vec<f64>, Vec<f64>, Tensor2)> {
        self.check_index(k)?;
        self.check_input(x)?;
        let relu_affine = |input: &Tensor2, w: &str, b: &str| -> DiffResult<Tensor2> {
            let mut out = input.matmul(params.get(w)?)?;
            let bias = params.get(b)?;
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    let v = (out.get(r, c) + bias.get(0, c)).max(0.0);
                    out.set(r, c, v);
                }
            }
            Ok(out)
        };
        let h1 = relu_affine(x, &self.name(k, "l1.w"), &self.name(k, "l1.b"))?;
        let hidden = relu_affine(&h1, &self.name(k, "l2.w"), &self.name(k, "l2.b"))?;
        let head = |w: &str, b: &str| -> DiffResult<Vec<f64>> {
            let lin = hidden.matmul(params.get(w)?)?;
            let bias = params.get(b)?.get(0, 0);
            Ok(lin
                .data()
                .iter()
                .map(|&v| 1.0 / (1.0 + (-(v + bias)).exp()))
                .collect())
        };
        let scores = head(&self.name(k, "score.w"), &self.name(k, "score.b"))?;
        let gan = head(&self.name(k, "gan.w"), &self.name(k, "gan.b"))?;
        Ok((scores, gan, hidden))
    }

    /// Plain forward of one feature vector through discriminator `k`.
    pub fn forward(&self, params: &ParamSet, f: &[f64], k: usize) -> DiffResult<DiscriminatorOutput> {
        let x = Tensor2::row(f);
        let (scores, gan, hidden) = self.forward_batch(params, &x, k)?;
        Ok(DiscriminatorOutput {
            score: scores[0],
            real_prob: gan[0],
            hidden: hidden.row_slice(0).to_vec(),
        })
    }

    /// Mean anomaly score over all discriminators, one value per row.
    pub fn ensemble_scores(&self, params: &ParamSet, x: &Tensor2) -> DiffResult<Vec<f64>> {
        let mut acc = vec![0.0; x.rows()];
        for k in 1..=self.count {
            let (scores, _, _) = self.forward_batch(params, x, k)?;
            for (a, s) in acc.iter_mut().zip(&scores) {
                *a += s;
            }
        }
        for a in acc.iter_mut() {
            *a /= self.count as f64;
        }
        Ok(acc)
    }

    fn check_index(&self, k: usize) -> DiffResult<()> {
        if k == 0 || k > self.count {
            return Err(DiffError::Shape {
                context: "discriminator index".into(),
                expected: format!("1..={}", self.count),
                got: format!("{k}"),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor2) -> DiffResult<()> {
        if x.cols() != self.cfg.feature_dim {
            return Err(DiffError::Shape {
                context: "discriminator input".into(),
                expected: format!("feature dim {}", self.cfg.feature_dim),
                got: format!("{}", x.cols()),
            });
        }
        if !x.is_finite() {
            return Err(DiffError::NonFinite {
                context: "discriminator input".into(),
            });
        }
        Ok(())
    }
}

/// Hinge on the best instances: max(0, 1 - max(pos) + max(neg)).
pub fn mil_ranking_loss(pos_scores: &[f64], neg_scores: &[f64]) -> DiffResult<f64> {
    let max_of = |scores: &[f64], side: &str| -> DiffResult<f64> {
        scores
            .iter()
            .copied()
            .fold(None, |best: Option<f64>, v| {
                Some(best.map_or(v, |b| if v > b { v } else { b }))
            })
            .ok_or_else(|| DiffError::Shape {
                context: "mil_ranking_loss".into(),
                expected: format!("non-empty {side} bag"),
                got: "0 scores".into(),
            })
    };
    let p = max_of(pos_scores, "positive")?;
    let n = max_of(neg_scores, "negative")?;
    Ok((1.0 - p + n).max(0.0))
}

/// Realness objective in minimized form:
/// -[mean log(real) + mean log(1 - fake)], probabilities clamped away
/// from 0 and 1 before the logs.
pub fn gan_discriminator_loss(real_probs: &[f64], fake_probs: &[f64]) -> DiffResult<f64> {
    if real_probs.is_empty() || fake_probs.is_empty() {
        return Err(DiffError::Shape {
            context: "gan_discriminator_loss".into(),
            expected: "non-empty real and fake sets".into(),
            got: format!("{} real, {} fake", real_probs.len(), fake_probs.len()),
        });
    }
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let real: f64 =
        real_probs.iter().map(|&p| clamp(p).ln()).sum::<f64>() / real_probs.len() as f64;
    let fake: f64 = fake_probs
        .iter()
        .map(|&p| (1.0 - clamp(p)).ln())
        .sum::<f64>()
        / fake_probs.len() as f64;
    Ok(-(real + fake))
}

/// Complementarity penalty over the three intermediate features:
/// sum over unordered pairs (j, k) of ||1 - h_j - h_k||_2.
pub fn diversity_loss(h1: &[f64], h2: &[f64], h3: &[f64]) -> DiffResult<f64> {
    if h1.len() != h2.len() || h2.len() != h3.len() {
        return Err(DiffError::Shape {
            context: "diversity_loss".into(),
            expected: format!("three vectors of length {}", h1.len()),
            got: format!("{}, {}, {}", h1.len(), h2.len(), h3.len()),
        });
    }
    let pair = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (1.0 - x - y) * (1.0 - x - y))
            .sum::<f64>()
            .sqrt()
    };
    Ok(pair(h1, h2) + pair(h1, h3) + pair(h2, h3))
}

/// Weighted step objective: mil + lambda3 * gan + lambda4 * diversity.
pub fn discriminator_loss(mil: f64, gan: f64, diver: f64, lambda3: f64, lambda4: f64) -> f64 {
    mil + lambda3 * gan + lambda4 * diver
}

/// A pseudo-feature appended to a bag, remembering which generator made it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoFeature {
    pub values: Vec<f64>,
    pub source: ClassTag,
}

/// A bag augmented with replayed pseudo-features. The base bag is
/// borrowed untouched; instance order is real rows then appended rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBag<'a> {
    pub base: &'a Bag,
    pub appended: Vec<PseudoFeature>,
}

impl<'a> ReplayBag<'a> {
    pub fn total_instances(&self) -> usize {
        self.base.instances.len() + self.appended.len()
    }

    /// Real instances lifted to f64, one row per instance.
    pub fn real_tensor(&self) -> Tensor2 {
        lift_bag(self.base)
    }

    /// Real rows followed by appended pseudo rows.
    pub fn full_tensor(&self) -> Tensor2 {
        let k = self.base.feature_dim();
        let mut data = Vec::with_capacity(self.total_instances() * k);
        for inst in &self.base.instances {
            data.extend(inst.values.iter().map(|&v| v as f64));
        }
        for p in &self.appended {
            data.extend_from_slice(&p.values);
        }
        Tensor2::from_vec(self.total_instances(), k, data).expect("bag dims")
    }
}

/// Lifts a bag's f32 instances into an f64 matrix.
pub fn lift_bag(bag: &Bag) -> Tensor2 {
    let k = bag.feature_dim();
    let mut data = Vec::with_capacity(bag.instances.len() * k);
    for inst in &bag.instances {
        data.extend(inst.values.iter().map(|&v| v as f64));
    }
    Tensor2::from_vec(bag.instances.len(), k, data).expect("bag dims")
}

/// Augments each bag with pseudo-features from the matching generator:
/// negative bags draw round(r_minus * |bag|) normal samples, positive
/// bags round(r_plus * |bag|) anomaly samples. Without a replayer (the
/// first domain) bags pass through unchanged.
pub fn compose_replay_bags<'a>(
    bags: &[&'a Bag],
    replayer: Option<&FrozenReplayer>,
    r_minus: f64,
    r_plus: f64,
    rng: &mut ChaCha8Rng,
) -> DiffResult<Vec<ReplayBag<'a>>> {
    for (what, r) in [("r_minus", r_minus), ("r_plus", r_plus)] {
        if !(r.is_finite() && r >= 0.0) {
            return Err(DiffError::Shape {
                context: "compose_replay_bags".into(),
                expected: format!("{what} >= 0"),
                got: format!("{r}"),
            });
        }
    }
    bags.iter()
        .map(|bag| {
            let appended = match replayer {
                None => Vec::new(),
                Some(rep) => {
                    let (ratio, class) = if bag.weak_label {
                        (r_plus, ClassTag::Anomaly)
                    } else {
                        (r_minus, ClassTag::Normal)
                    };
                    let count = (ratio * bag.instances.len() as f64).round() as usize;
                    rep.sample(class, count, rng)?
                        .into_iter()
                        .map(|values| PseudoFeature {
                            values,
                            source: class,
                        })
                        .collect()
                }
            };
            Ok(ReplayBag { base: bag, appended })
        })
        .collect()
}

/// One step's replay-augmented bags, positives and negatives paired by
/// index for the ranking hinge.
pub struct StepBags<'a> {
    pub pos: Vec<ReplayBag<'a>>,
    pub neg: Vec<ReplayBag<'a>>,
}

/// Value nodes of the assembled discriminator objective.
pub struct DiscLossNodes {
    pub total: NodeId,
    pub mil: NodeId,
    pub gan: Option<NodeId>,
    pub diversity: Option<NodeId>,
}

/// Builds the joint objective of the whole bank: the ranking hinge for
/// every discriminator (averaged over bag pairs, summed over
/// discriminators), plus `lambda3` times each discriminator's realness
/// loss against live-generator reconstructions of the step's real
/// instances, plus `lambda4` times the pairwise diversity penalty over
/// every scored instance. Zero-weight terms are not built. `fakes`
/// supplies the generator pair and a standard-normal source and is
/// required exactly when `lambda3 > 0`.
pub fn build_discriminator_loss(
    tape: &mut Tape,
    params: &ParamSet,
    bank: &DiscriminatorBank,
    step: &StepBags,
    mut fakes: Option<(&DualGenerator, &mut dyn FnMut(usize, usize) -> Tensor2)>,
    lambda3: f64,
    lambda4: f64,
) -> DiffResult<DiscLossNodes> {
    if step.pos.is_empty() || step.neg.is_empty() || step.pos.len() != step.neg.len() {
        return Err(DiffError::Shape {
            context: "build_discriminator_loss".into(),
            expected: "equal non-zero counts of positive and negative bags".into(),
            got: format!("{} pos, {} neg", step.pos.len(), step.neg.len()),
        });
    }
    let pairs = step.pos.len();

    // One stacked input of every scored instance: positive bags then
    // negative bags, each bag real rows then pseudo rows.
    let mut ranges = Vec::with_capacity(2 * pairs);
    let mut stacked: Option<NodeId> = None;
    for bag in step.pos.iter().chain(step.neg.iter()) {
        let node = tape.constant(bag.full_tensor());
        let len = bag.total_instances();
        let start = match stacked {
            None => {
                stacked = Some(node);
                0
            }
            Some(prev) => {
                let prev_len = tape.value(prev).rows();
                stacked = Some(tape.concat_rows(prev, node)?);
                prev_len
            }
        };
        ranges.push((start, len));
    }
    let stacked = stacked.unwrap();

    // MIL over every discriminator.
    let mut mil_total: Option<NodeId> = None;
    let mut hiddens = Vec::with_capacity(bank.count());
    for k in 1..=bank.count() {
        let heads = bank.forward_graph(tape, params, stacked, k)?;
        hiddens.push(heads.hidden);
        let mut hinge_sum: Option<NodeId> = None;
        for i in 0..pairs {
            let (ps, pl) = ranges[i];
            let (ns, nl) = ranges[pairs + i];
            let pos_scores = tape.slice_rows(heads.score, ps, pl)?;
            let neg_scores = tape.slice_rows(heads.score, ns, nl)?;
            let max_p = tape.max_all(pos_scores)?;
            let max_n = tape.max_all(neg_scores)?;
            let diff = tape.sub(max_n, max_p)?;
            let margin = tape.add_const(diff, 1.0);
            let hinge = tape.relu(margin);
            hinge_sum = Some(match hinge_sum {
                Some(acc) => tape.add(acc, hinge)?,
                None => hinge,
            });
        }
        let mil_k = tape.scale(hinge_sum.unwrap(), 1.0 / pairs as f64);
        mil_total = Some(match mil_total {
            Some(acc) => tape.add(acc, mil_k)?,
            None => mil_k,
        });
    }
    let mil = mil_total.unwrap();
    let mut total = mil;

    // Realness loss with live reconstructions as fakes.
    let gan = if lambda3 > 0.0 {
        let (gen, noise) = fakes.as_mut().ok_or_else(|| DiffError::Shape {
            context: "build_discriminator_loss".into(),
            expected: "generator pair when lambda3 > 0".into(),
            got: "none".into(),
        })?;
        let neg_reals = concat_real_rows(tape, &step.neg)?;
        let pos_reals = concat_real_rows(tape, &step.pos)?;
        let fake_n = reconstruct(tape, params, gen, neg_reals, ClassTag::Normal, noise)?;
        let fake_a = reconstruct(tape, params, gen, pos_reals, ClassTag::Anomaly, noise)?;

        let mut gan_total: Option<NodeId> = None;
        for k in 1..=bank.count() {
            let (reals, fakes_node) = match (bank.count(), k) {
                (1, _) | (3, 1) => (
                    tape.concat_rows(neg_reals, pos_reals)?,
                    tape.concat_rows(fake_n, fake_a)?,
                ),
                (3, 2) => (neg_reals, fake_n),
                (3, 3) => (pos_reals, fake_a),
                _ => unreachable!("bank size validated"),
            };
            let real_heads = bank.forward_graph(tape, params, reals, k)?;
            let fake_heads = bank.forward_graph(tape, params, fakes_node, k)?;
            let real_term = {
                let c = tape.clamp(real_heads.gan, PROB_EPS, 1.0 - PROB_EPS);
                let l = tape.ln(c);
                tape.mean(l)
            };
            let fake_term = {
                let c = tape.clamp(fake_heads.gan, PROB_EPS, 1.0 - PROB_EPS);
                let neg = tape.neg(c);
                let one_minus = tape.add_const(neg, 1.0);
                let l = tape.ln(one_minus);
                tape.mean(l)
            };
            let s = tape.add(real_term, fake_term)?;
            let loss_k = tape.neg(s);
            gan_total = Some(match gan_total {
                Some(acc) => tape.add(acc, loss_k)?,
                None => loss_k,
            });
        }
        let gan = gan_total.unwrap();
        let weighted = tape.scale(gan, lambda3);
        total = tape.add(total, weighted)?;
        Some(gan)
    } else {
        None
    };

    // Diversity over the stacked instances, each unordered pair once.
    let diversity = if lambda4 > 0.0 && bank.count() >= 2 {
        let mut div_total: Option<NodeId> = None;
        for j in 0..hiddens.len() {
            for k in j + 1..hiddens.len() {
                let s = tape.add(hiddens[j], hiddens[k])?;
                let neg = tape.neg(s);
                let v = tape.add_const(neg, 1.0);
                let sq = tape.mul_elem(v, v)?;
                let row_sq = tape.sum_cols(sq);
                let norms = tape.sqrt(row_sq);
                let m = tape.mean(norms);
                div_total = Some(match div_total {
                    Some(acc) => tape.add(acc, m)?,
                    None => m,
                });
            }
        }
        let d = div_total.unwrap();
        let weighted = tape.scale(d, lambda4);
        total = tape.add(total, weighted)?;
        Some(d)
    } else {
        None
    };

    Ok(DiscLossNodes {
        total,
        mil,
        gan,
        diversity,
    })
}

fn concat_real_rows(tape: &mut Tape, bags: &[ReplayBag]) -> DiffResult<NodeId> {
    let mut acc: Option<NodeId> = None;
    for bag in bags {
        let node = tape.constant(bag.real_tensor());
        acc = Some(match acc {
            Some(prev) => tape.concat_rows(prev, node)?,
            None => node,
        });
    }
    Ok(acc.unwrap())
}

/// Live-generator reconstruction used as GAN fakes: encode, sample, decode.
fn reconstruct(
    tape: &mut Tape,
    params: &ParamSet,
    gen: &DualGenerator,
    x: NodeId,
    class: ClassTag,
    noise: &mut dyn FnMut(usize, usize) -> Tensor2,
) -> DiffResult<NodeId> {
    let rows = tape.value(x).rows();
    let cfg = gen.config().clone();
    let post = gen.encode_graph(tape, params, x, class)?;
    let zp = reparam_graph(tape, post.mu_private, post.logvar_private, || {
        noise(rows, cfg.d_private)
    })?;
    let zs = reparam_graph(tape, post.mu_shared, post.logvar_shared, || {
        noise(rows, cfg.d_shared)
    })?;
    gen.decode_graph(tape, params, zp, zs, class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::FeatureInstance;
    use rand::Rng;
    use rand::SeedableRng;

    fn bank_with_params(count: usize, seed: u64) -> (DiscriminatorBank, ParamSet) {
        let cfg = DiscriminatorConfig {
            feature_dim: 6,
            hidden: 10,
            trunk_out: 32,
        };
        let bank = DiscriminatorBank::new(cfg, count).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        bank.init_params(&mut params, &mut rng).unwrap();
        (bank, params)
    }

    fn test_bag(id: &str, positive: bool, n: usize, fill: f32) -> Bag {
        Bag {
            video_id: id.into(),
            domain_id: 1,
            weak_label: positive,
            instances: (0..n)
                .map(|i| FeatureInstance {
                    values: vec![fill + i as f32 * 0.1; 6],
                    frame_span: (i * 16, (i + 1) * 16),
                })
                .collect(),
            frame_labels: None,
        }
    }

    #[test]
    fn zero_weights_give_half_probabilities() {
        let (bank, mut params) = bank_with_params(1, 1);
        for name in bank.param_names() {
            for v in params.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let out = bank.forward(&params, &[0.3; 6], 1).unwrap();
        assert_eq!(out.score, 0.5);
        assert_eq!(out.real_prob, 0.5);
        assert_eq!(out.hidden.len(), 32);
        assert!(out.hidden.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let (bank, params) = bank_with_params(3, 2);
        let f = [0.4, -1.0, 2.0, 0.1, -0.2, 0.9];
        for k in 1..=3 {
            let a = bank.forward(&params, &f, k).unwrap();
            let b = bank.forward(&params, &f, k).unwrap();
            assert_eq!(a, b);
            assert!(a.score > 0.0 && a.score < 1.0);
            assert!(a.real_prob > 0.0 && a.real_prob < 1.0);
        }
        assert!(bank.forward(&params, &[0.0; 5], 1).is_err());
        assert!(bank.forward(&params, &f, 4).is_err());
    }

    #[test]
    fn mil_examples() {
        // hinge arithmetic
        let v = mil_ranking_loss(&[0.2, 0.9], &[0.1, 0.2]).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        // perfectly separated
        let v = mil_ranking_loss(&[1.0], &[0.0]).unwrap();
        assert_eq!(v, 0.0);
        // indistinguishable bags
        let v = mil_ranking_loss(&[0.5, 0.5], &[0.5]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        assert!(mil_ranking_loss(&[], &[0.5]).is_err());
        assert!(mil_ranking_loss(&[0.5], &[]).is_err());
    }

    #[test]
    fn mil_is_strictly_positive_for_sigmoid_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let pos: Vec<f64> = (0..4).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
            let neg: Vec<f64> = (0..4).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
            let v = mil_ranking_loss(&pos, &neg).unwrap();
            assert!(v > 0.0 && v < 2.0);
        }
    }

    #[test]
    fn gan_loss_examples() {
        // symmetric uncertainty
        let v = gan_discriminator_loss(&[0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        // perfect discriminator limit (clamped)
        let v = gan_discriminator_loss(&[1.0], &[0.0]).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
        assert!(v >= 0.0);
        // monotone in real_prob
        let lo = gan_discriminator_loss(&[0.6], &[0.3]).unwrap();
        let hi = gan_discriminator_loss(&[0.7], &[0.3]).unwrap();
        assert!(hi < lo);
        assert!(gan_discriminator_loss(&[], &[0.5]).is_err());
    }

    #[test]
    fn gan_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let real: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let fake: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            assert!(gan_discriminator_loss(&real, &fake).unwrap() >= 0.0);
        }
    }

    #[test]
    fn diversity_examples() {
        let half = vec![0.5; 4];
        assert_eq!(diversity_loss(&half, &half, &half).unwrap(), 0.0);
        // exact complement pair contributes zero
        let ones = vec![1.0; 4];
        let zeros = vec![0.0; 4];
        let pair_only = diversity_loss(&ones, &zeros, &half).unwrap();
        // pairs: (1,0) -> 0, (1,.5) -> sqrt(4*0.25)=1, (0,.5) -> 1
        assert!((pair_only - 2.0).abs() < 1e-12);
        // two saturated vectors: ||-1||_2 over d=4 is 2
        let v = diversity_loss(&ones, &ones, &ones).unwrap();
        assert!((v - 6.0).abs() < 1e-12, "three pairs of norm 2");
        assert!(diversity_loss(&ones, &zeros, &[0.0; 3]).is_err());
    }

    #[test]
    fn diversity_is_permutation_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let h: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let base = diversity_loss(&h[0], &h[1], &h[2]).unwrap();
            for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
                let p = diversity_loss(&h[perm[0]], &h[perm[1]], &h[perm[2]]).unwrap();
                assert!((base - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weighted_sum_examples() {
        assert_eq!(discriminator_loss(0.3, 1.0, 2.0, 0.5, 0.25), 1.3);
        assert_eq!(discriminator_loss(0.7, 9.0, 9.0, 0.0, 0.0), 0.7);
        assert_eq!(discriminator_loss(0.0, 0.0, 0.0, 0.5, 0.25), 0.0);
    }

    #[test]
    fn replay_composition_counts_and_routing() {
        let cfg = crate::dual_generator::GeneratorConfig {
            feature_dim: 6,
            hidden: 8,
            d_private: 3,
            d_shared: 2,
            tie_shared: true,
        };
        let gen = DualGenerator::new(cfg).unwrap();
        let mut gen_params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        gen.init_params(&mut gen_params, &mut rng).unwrap();
        let replayer = FrozenReplayer::new(&gen, &gen_params, 1);

        let neg = test_bag("neg", false, 8, 0.0);
        let pos = test_bag("pos", true, 9, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = compose_replay_bags(
            &[&pos, &neg],
            Some(&replayer),
            1.0,
            1.0 / 3.0,
            &mut rng,
        )
        .unwrap();
        // positive bag: round(9 * 1/3) = 3 anomaly samples
        assert_eq!(out[0].appended.len(), 3);
        assert!(out[0].appended.iter().all(|p| p.source == ClassTag::Anomaly));
        // negative bag: round(8 * 1) = 8 normal samples, 16 total
        assert_eq!(out[1].appended.len(), 8);
        assert_eq!(out[1].total_instances(), 16);
        assert!(out[1].appended.iter().all(|p| p.source == ClassTag::Normal));
        // base bags untouched
        assert_eq!(pos.instances.len(), 9);
        assert_eq!(neg.instances.len(), 8);
    }

    #[test]
    fn zero_ratio_and_missing_replayer_pass_bags_through() {
        let neg = test_bag("neg", false, 5, 0.0);
        let pos = test_bag("pos", true, 5, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let no_replayer = compose_replay_bags(&[&pos, &neg], None, 1.0, 1.0, &mut rng).unwrap();
        assert!(no_replayer.iter().all(|b| b.appended.is_empty()));

        let cfg = crate::dual_generator::GeneratorConfig {
            feature_dim: 6,
            hidden: 8,
            d_private: 3,
            d_shared: 2,
            tie_shared: true,
        };
        let gen = DualGenerator::new(cfg).unwrap();
        let mut gen_params = ParamSet::new();
        let mut grng = ChaCha8Rng::seed_from_u64(9);
        gen.init_params(&mut gen_params, &mut grng).unwrap();
        let replayer = FrozenReplayer::new(&gen, &gen_params, 1);
        let before = rng.clone();
        let zero = compose_replay_bags(&[&pos, &neg], Some(&replayer), 0.0, 0.0, &mut rng).unwrap();
        assert!(zero.iter().all(|b| b.appended.is_empty()));
        // zero ratios consume no randomness
        assert_eq!(rng, before);
    }

    #[test]
    fn step_loss_without_extras_equals_plain_mil() {
        let (bank, params) = bank_with_params(1, 10);
        let pos = test_bag("pos", true, 4, 0.8);
        let neg = test_bag("neg", false, 3, -0.4);
        let step = StepBags {
            pos: vec![ReplayBag { base: &pos, appended: vec![] }],
            neg: vec![ReplayBag { base: &neg, appended: vec![] }],
        };
        let mut tape = Tape::new();
        let nodes =
            build_discriminator_loss(&mut tape, &params, &bank, &step, None, 0.0, 0.0).unwrap();
        assert!(nodes.gan.is_none() && nodes.diversity.is_none());
        let got = tape.value(nodes.total).item().unwrap();

        let (ps, _, _) = bank.forward_batch(&params, &lift_bag(&pos), 1).unwrap();
        let (ns, _, _) = bank.forward_batch(&params, &lift_bag(&neg), 1).unwrap();
        let expected = mil_ranking_loss(&ps, &ns).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn step_loss_diversity_matches_scalar_form() {
        let (bank, params) = bank_with_params(3, 11);
        let pos = test_bag("pos", true, 1, 0.5);
        let neg = test_bag("neg", false, 1, -0.5);
        let step = StepBags {
            pos: vec![ReplayBag { base: &pos, appended: vec![] }],
            neg: vec![ReplayBag { base: &neg, appended: vec![] }],
        };
        let mut tape = Tape::new();
        let nodes =
            build_discriminator_loss(&mut tape, &params, &bank, &step, None, 0.0, 0.7).unwrap();
        let got = tape.value(nodes.diversity.unwrap()).item().unwrap();

        // scalar recomputation: mean over the two stacked instances
        let stacked = {
            let a = lift_bag(&pos);
            let b = lift_bag(&neg);
            let mut rows = vec![a.row_slice(0).to_vec()];
            rows.push(b.row_slice(0).to_vec());
            Tensor2::from_rows(&rows).unwrap()
        };
        let hs: Vec<Tensor2> = (1..=3)
            .map(|k| bank.forward_batch(&params, &stacked, k).unwrap().2)
            .collect();
        let mut expected = 0.0;
        for row in 0..2 {
            expected += diversity_loss(
                hs[0].row_slice(row),
                hs[1].row_slice(row),
                hs[2].row_slice(row),
            )
            .unwrap();
        }
        expected /= 2.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        let total = tape.value(nodes.total).item().unwrap();
        let mil = tape.value(nodes.mil).item().unwrap();
        assert!((total - (mil + 0.7 * got)).abs() < 1e-12);
    }
}
