//! Class-conditional feature generators. Each class (normal / anomalous)
//! owns a VAE whose latent code splits into a private block and a shared
//! block; with tying enabled the shared encoder branch and the shared
//! decoder input weights are the same parameters for both classes, so a
//! given feature vector yields the same shared posterior regardless of
//! class. Frozen copies of the pair serve as replay sources: sampling the
//! latent prior through a frozen decoder regenerates past-domain
//! features without storing any.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{
    xavier_uniform, Activation, DiffError, DiffResult, NodeId, ParamSet, Tape, Tensor2,
};

/// Which class-conditional generator a feature belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTag {
    Normal,
    Anomaly,
}

impl ClassTag {
    pub fn key(self) -> &'static str {
        match self {
            ClassTag::Normal => "normal",
            ClassTag::Anomaly => "anomaly",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub feature_dim: usize,
    /// Width of the encoder/decoder hidden layer.
    pub hidden: usize,
    pub d_private: usize,
    pub d_shared: usize,
    /// Tie the shared latent pathway across classes. Disabled, the pair
    /// degenerates to two independent VAEs (the plain-replay baseline).
    pub tie_shared: bool,
}

impl GeneratorConfig {
    pub fn validate(&self) -> DiffResult<()> {
        for (what, v) in [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("d_private", self.d_private),
            ("d_shared", self.d_shared),
        ] {
            if v == 0 {
                return Err(DiffError::Shape {
                    context: "GeneratorConfig".into(),
                    expected: format!("{what} >= 1"),
                    got: "0".into(),
                });
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.d_private + self.d_shared
    }
}

/// Parameter names for one class branch under the current tying mode.
struct Names {
    enc_priv_l1_w: String,
    enc_priv_l1_b: String,
    enc_priv_head_w: String,
    enc_priv_head_b: String,
    enc_sh_l1_w: String,
    enc_sh_l1_b: String,
    enc_sh_head_w: String,
    enc_sh_head_b: String,
    dec_priv_w: String,
    dec_sh_w: String,
    dec_b: String,
    dec_out_w: String,
    dec_out_b: String,
}

fn names(cfg: &GeneratorConfig, class: ClassTag) -> Names {
    let c = class.key();
    let sh = if cfg.tie_shared {
        "gen.shared".to_string()
    } else {
        format!("gen.{c}.sh")
    };
    Names {
        enc_priv_l1_w: format!("gen.{c}.enc.priv.l1.w"),
        enc_priv_l1_b: format!("gen.{c}.enc.priv.l1.b"),
        enc_priv_head_w: format!("gen.{c}.enc.priv.head.w"),
        enc_priv_head_b: format!("gen.{c}.enc.priv.head.b"),
        enc_sh_l1_w: format!("{sh}.enc.l1.w"),
        enc_sh_l1_b: format!("{sh}.enc.l1.b"),
        enc_sh_head_w: format!("{sh}.enc.head.w"),
        enc_sh_head_b: format!("{sh}.enc.head.b"),
        dec_priv_w: format!("gen.{c}.dec.priv.w"),
        dec_sh_w: format!("{sh}.dec.w"),
        dec_b: format!("gen.{c}.dec.b"),
        dec_out_w: format!("gen.{c}.dec.out.w"),
        dec_out_b: format!("gen.{c}.dec.out.b"),
    }
}

/// Posterior parameter nodes for a batch: each is rows x d.
pub struct PosteriorNodes {
    pub mu_private: NodeId,
    pub logvar_private: NodeId,
    pub mu_shared: NodeId,
    pub logvar_shared: NodeId,
}

/// Posterior parameters for a single feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu_private: Vec<f64>,
    pub logvar_private: Vec<f64>,
    pub mu_shared: Vec<f64>,
    pub logvar_shared: Vec<f64>,
}

/// The generator pair. Holds no parameters itself; everything lives in a
/// `ParamSet` under `gen.*` names so weight tying is literal name reuse.
#[derive(Debug, Clone, PartialEq)]
pub struct DualGenerator {
    cfg: GeneratorConfig,
}

impl DualGenerator {
    pub fn new(cfg: GeneratorConfig) -> DiffResult<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Inserts freshly initialized parameters for both classes. Insertion
    /// order is fixed, so a given rng stream always produces the same
    /// initialization.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> DiffResult<()> {
        let (k, h) = (self.cfg.feature_dim, self.cfg.hidden);
        let (dp, ds) = (self.cfg.d_private, self.cfg.d_shared);
        let weight = |params: &mut ParamSet, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            params.insert(name, xavier_uniform(r, c, rng))
        };
        let bias = |params: &mut ParamSet, name: &str, c: usize| {
            params.insert(name, Tensor2::zeros(1, c))
        };

        for class in [ClassTag::Normal, ClassTag::Anomaly] {
            let n = names(&self.cfg, class);
            weight(params, &n.enc_priv_l1_w, k, h, rng)?;
            bias(params, &n.enc_priv_l1_b, h)?;
            weight(params, &n.enc_priv_head_w, h, 2 * dp, rng)?;
            bias(params, &n.enc_priv_head_b, 2 * dp)?;
        }
        // Shared encoder branch: once when tied, per class otherwise.
        let shared_branches: Vec<Names> = if self.cfg.tie_shared {
            vec![names(&self.cfg, ClassTag::Normal)]
        } else {
            vec![
                names(&self.cfg, ClassTag::Normal),
                names(&self.cfg, ClassTag::Anomaly),
            ]
        };
        for n in &shared_branches {
            weight(params, &n.enc_sh_l1_w, k, h, rng)?;
            bias(params, &n.enc_sh_l1_b, h)?;
            weight(params, &n.enc_sh_head_w, h, 2 * ds, rng)?;
            bias(params, &n.enc_sh_head_b, 2 * ds)?;
        }
        for class in [ClassTag::Normal, ClassTag::Anomaly] {
            let n = names(&self.cfg, class);
            weight(params, &n.dec_priv_w, dp, h, rng)?;
            bias(params, &n.dec_b, h)?;
            weight(params, &n.dec_out_w, h, k, rng)?;
            bias(params, &n.dec_out_b, k)?;
        }
        for n in &shared_branches {
            weight(params, &n.dec_sh_w, ds, h, rng)?;
        }
        Ok(())
    }

    /// Every parameter name owned by the pair, in sorted order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = std::collections::BTreeSet::new();
        for class in [ClassTag::Normal, ClassTag::Anomaly] {
            let n = names(&self.cfg, class);
            for name in [
                n.enc_priv_l1_w,
                n.enc_priv_l1_b,
                n.enc_priv_head_w,
                n.enc_priv_head_b,
                n.enc_sh_l1_w,
                n.enc_sh_l1_b,
                n.enc_sh_head_w,
                n.enc_sh_head_b,
                n.dec_priv_w,
                n.dec_sh_w,
                n.dec_b,
                n.dec_out_w,
                n.dec_out_b,
            ] {
                out.insert(name);
            }
        }
        out.into_iter().collect()
    }

    /// Tape-side encoder: x (n x K) to posterior blocks (n x d each).
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        class: ClassTag,
    ) -> DiffResult<PosteriorNodes> {
        self.check_input(tape.value(x), "encode")?;
        let n = names(&self.cfg, class);
        let dp = self.cfg.d_private;
        let ds = self.cfg.d_shared;

        let w1 = tape.param(params, &n.enc_priv_l1_w)?;
        let b1 = tape.param(params, &n.enc_priv_l1_b)?;
        let e_p = tape.affine(x, w1, b1, Activation::Relu)?;
        let wh = tape.param(params, &n.enc_priv_head_w)?;
        let bh = tape.param(params, &n.enc_priv_head_b)?;
        let head_p = tape.affine(e_p, wh, bh, Activation::None)?;
        let mu_private = tape.slice_cols(head_p, 0, dp)?;
        let logvar_private = tape.slice_cols(head_p, dp, dp)?;

        let w1s = tape.param(params, &n.enc_sh_l1_w)?;
        let b1s = tape.param(params, &n.enc_sh_l1_b)?;
        let e_s = tape.affine(x, w1s, b1s, Activation::Relu)?;
        let whs = tape.param(params, &n.enc_sh_head_w)?;
        let bhs = tape.param(params, &n.enc_sh_head_b)?;
        let head_s = tape.affine(e_s, whs, bhs, Activation::None)?;
        let mu_shared = tape.slice_cols(head_s, 0, ds)?;
        let logvar_shared = tape.slice_cols(head_s, ds, ds)?;

        Ok(PosteriorNodes {
            mu_private,
            logvar_private,
            mu_shared,
            logvar_shared,
        })
    }

    /// Tape-side decoder: private and shared codes (n x dp, n x ds) to
    /// reconstructed features (n x K).
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z_private: NodeId,
        z_shared: NodeId,
        class: ClassTag,
    ) -> DiffResult<NodeId> {
        let n = names(&self.cfg, class);
        let wp = tape.param(params, &n.dec_priv_w)?;
        let ws = tape.param(params, &n.dec_sh_w)?;
        let b = tape.param(params, &n.dec_b)?;
        let hp = tape.matmul(z_private, wp)?;
        let hs = tape.matmul(z_shared, ws)?;
        let lin = tape.add(hp, hs)?;
        let biased = tape.add_row(lin, b)?;
        let h = tape.relu(biased);
        let wo = tape.param(params, &n.dec_out_w)?;
        let bo = tape.param(params, &n.dec_out_b)?;
        tape.affine(h, wo, bo, Activation::None)
    }

    /// Plain encoder over a batch, for frozen snapshots and inspection.
    /// Returns (mu_p, logvar_p, mu_s, logvar_s).
    pub fn encode_batch(
        &self,
        params: &ParamSet,
        x: &Tensor2,
        class: ClassTag,
    ) -> DiffResult<(Tensor2, Tensor2, Tensor2, Tensor2)> {
        self.check_input(x, "encode")?;
        let n = names(&self.cfg, class);
        let dp = self.cfg.d_private;
        let ds = self.cfg.d_shared;
        let branch = |w1: &str, b1: &str, wh: &str, bh: &str| -> DiffResult<Tensor2> {
            let mut e = x.matmul(params.get(w1)?)?;
            add_row_inplace(&mut e, params.get(b1)?);
            let e = e.map(|v| v.max(0.0));
            let mut head = e.matmul(params.get(wh)?)?;
            add_row_inplace(&mut head, params.get(bh)?);
            Ok(head)
        };
        let head_p = branch(
            &n.enc_priv_l1_w,
            &n.enc_priv_l1_b,
            &n.enc_priv_head_w,
            &n.enc_priv_head_b,
        )?;
        let head_s = branch(&n.enc_sh_l1_w, &n.enc_sh_l1_b, &n.enc_sh_head_w, &n.enc_sh_head_b)?;
        Ok((
            slice_cols(&head_p, 0, dp),
            slice_cols(&head_p, dp, dp),
            slice_cols(&head_s, 0, ds),
            slice_cols(&head_s, ds, ds),
        ))
    }

    /// Plain encoder for one feature vector.
    pub fn encode(&self, params: &ParamSet, f: &[f64], class: ClassTag) -> DiffResult<LatentPosterior> {
        let x = Tensor2::row(f);
        let (mp, lp, ms, ls) = self.encode_batch(params, &x, class)?;
        Ok(LatentPosterior {
            mu_private: mp.data().to_vec(),
            logvar_private: lp.data().to_vec(),
            mu_shared: ms.data().to_vec(),
            logvar_shared: ls.data().to_vec(),
        })
    }

    /// Plain decoder over batches of latent codes.
    pub fn decode_batch(
        &self,
        params: &ParamSet,
        z_private: &Tensor2,
        z_shared: &Tensor2,
        class: ClassTag,
    ) -> DiffResult<Tensor2> {
        let n = names(&self.cfg, class);
        let hp = z_private.matmul(params.get(&n.dec_priv_w)?)?;
        let hs = z_shared.matmul(params.get(&n.dec_sh_w)?)?;
        let mut lin = hp.add(&hs)?;
        add_row_inplace(&mut lin, params.get(&n.dec_b)?);
        let h = lin.map(|v| v.max(0.0));
        let mut out = h.matmul(params.get(&n.dec_out_w)?)?;
        add_row_inplace(&mut out, params.get(&n.dec_out_b)?);
        Ok(out)
    }

    /// Plain decoder for one latent vector laid out [private | shared].
    pub fn decode(&self, params: &ParamSet, z: &[f64], class: ClassTag) -> DiffResult<Vec<f64>> {
        let (dp, ds) = (self.cfg.d_private, self.cfg.d_shared);
        if z.len() != dp + ds {
            return Err(DiffError::Shape {
                context: "DualGenerator::decode".into(),
                expected: format!("latent dim {}", dp + ds),
                got: format!("{}", z.len()),
            });
        }
        let zp = Tensor2::row(&z[..dp]);
        let zs = Tensor2::row(&z[dp..]);
        Ok(self.decode_batch(params, &zp, &zs, class)?.data().to_vec())
    }

    fn check_input(&self, x: &Tensor2, what: &str) -> DiffResult<()> {
        if x.cols() != self.cfg.feature_dim {
            return Err(DiffError::Shape {
                context: format!("DualGenerator::{what}"),
                expected: format!("feature dim {}", self.cfg.feature_dim),
                got: format!("{}", x.cols()),
            });
        }
        if x.rows() == 0 {
            return Err(DiffError::Shape {
                context: format!("DualGenerator::{what}"),
                expected: "at least one row".into(),
                got: "0 rows".into(),
            });
        }
        if !x.is_finite() {
            return Err(DiffError::NonFinite {
                context: format!("DualGenerator::{what} input"),
            });
        }
        Ok(())
    }
}

fn add_row_inplace(m: &mut Tensor2, row: &Tensor2) {
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.get(r, c) + row.get(0, c);
            m.set(r, c, v);
        }
    }
}

fn slice_cols(m: &Tensor2, start: usize, len: usize) -> Tensor2 {
    let mut out = Tensor2::zeros(m.rows(), len);
    for r in 0..m.rows() {
        for c in 0..len {
            out.set(r, c, m.get(r, start + c));
        }
    }
    out
}

/// z = mu + exp(logvar / 2) * noise, elementwise.
pub fn reparameterize(mu: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .zip(noise)
        .map(|((&m, &lv), &n)| m + (lv / 2.0).exp() * n)
        .collect()
}

/// KL(q || N(0, I)) for a diagonal Gaussian, summed over dimensions:
/// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar). Non-negative.
pub fn kl_diag_gaussian(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Immutable copy of the generator pair taken at a domain boundary.
/// Sampling decodes latent-prior draws through the frozen decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenReplayer {
    gen: DualGenerator,
    params: ParamSet,
    domains_seen: usize,
}

impl FrozenReplayer {
    /// Copies the `gen.*` subset of `params`.
    pub fn new(gen: &DualGenerator, params: &ParamSet, domains_seen: usize) -> Self {
        Self {
            gen: gen.clone(),
            params: params.subset_by_prefix("gen."),
            domains_seen,
        }
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(cfg: GeneratorConfig, params: ParamSet, domains_seen: usize) -> DiffResult<Self> {
        Ok(Self {
            gen: DualGenerator::new(cfg)?,
            params,
            domains_seen,
        })
    }

    pub fn domains_seen(&self) -> usize {
        self.domains_seen
    }

    pub fn config(&self) -> &GeneratorConfig {
        self.gen.config()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Draws `count` pseudo-features from the class-conditional prior.
    /// Noise order is row by row, private block then shared block, so a
    /// given rng state always yields the same batch.
    pub fn sample(&self, class: ClassTag, count: usize, rng: &mut ChaCha8Rng) -> DiffResult<Vec<Vec<f64>>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let cfg = self.gen.config();
        let (dp, ds) = (cfg.d_private, cfg.d_shared);
        let mut zp = Tensor2::zeros(count, dp);
        let mut zs = Tensor2::zeros(count, ds);
        for i in 0..count {
            for j in 0..dp {
                zp.set(i, j, rng.sample(StandardNormal));
            }
            for j in 0..ds {
                zs.set(i, j, rng.sample(StandardNormal));
            }
        }
        let out = self.gen.decode_batch(&self.params, &zp, &zs, class)?;
        Ok((0..count).map(|i| out.row_slice(i).to_vec()).collect())
    }
}

/// One class branch of the generator objective, assembled on a tape.
struct BranchNodes {
    elbo: NodeId,
    fhat: NodeId,
    mu_private: NodeId,
}

/// Inputs to one generator update. Current-domain batches are grouped by
/// the weak label of their source bags; replay batches are pseudo-features
/// drawn from a frozen snapshot (absent on the first domain).
pub struct GeneratorBatch<'a> {
    pub current_normal: &'a Tensor2,
    pub current_anomaly: &'a Tensor2,
    pub replay_normal: Option<&'a Tensor2>,
    pub replay_anomaly: Option<&'a Tensor2>,
}

/// Value nodes of the assembled generator loss.
pub struct GeneratorLossNodes {
    pub total: NodeId,
    pub elbo_current: NodeId,
    pub elbo_replay: Option<NodeId>,
    pub adversarial: Option<NodeId>,
    pub distance: Option<NodeId>,
}

/// Builds the joint objective of both generators:
/// reconstruction + KL for every batch, an adversarial bonus for fooling
/// each discriminator's realness head (weight `lambda1`), and a latent
/// separation term pushing the class-private posterior means apart
/// (weight `lambda2`). Terms with zero weight are not built at all.
///
/// `noise` must return a fresh standard-normal tensor of the given shape;
/// `gan_heads` maps a feature-matrix node to one realness-probability
/// column per discriminator. `gan_heads` is only invoked when
/// `lambda1 > 0`.
#[allow(clippy::too_many_arguments)]
pub fn build_generator_loss(
    tape: &mut Tape,
    params: &ParamSet,
    gen: &DualGenerator,
    batch: &GeneratorBatch,
    noise: &mut dyn FnMut(usize, usize) -> Tensor2,
    gan_heads: Option<&mut dyn FnMut(&mut Tape, NodeId) -> DiffResult<Vec<NodeId>>>,
    lambda1: f64,
    lambda2: f64,
) -> DiffResult<GeneratorLossNodes> {
    let cfg = gen.config().clone();

    let branch = |tape: &mut Tape,
                      x_val: &Tensor2,
                      class: ClassTag,
                      noise: &mut dyn FnMut(usize, usize) -> Tensor2|
     -> DiffResult<BranchNodes> {
        let rows = x_val.rows();
        let x = tape.constant(x_val.clone());
        let post = gen.encode_graph(tape, params, x, class)?;
        let z_private = reparam_graph(tape, post.mu_private, post.logvar_private, || {
            noise(rows, cfg.d_private)
        })?;
        let z_shared = reparam_graph(tape, post.mu_shared, post.logvar_shared, || {
            noise(rows, cfg.d_shared)
        })?;
        let fhat = gen.decode_graph(tape, params, z_private, z_shared, class)?;
        let diff = tape.sub(x, fhat)?;
        let sq = tape.mul_elem(diff, diff)?;
        let sq_sum = tape.sum(sq);
        let reconstruction = tape.scale(sq_sum, 0.5 / rows as f64);
        let kl_p = kl_graph(tape, post.mu_private, post.logvar_private, rows)?;
        let kl_s = kl_graph(tape, post.mu_shared, post.logvar_shared, rows)?;
        let kl = tape.add(kl_p, kl_s)?;
        let elbo = tape.add(reconstruction, kl)?;
        Ok(BranchNodes {
            elbo,
            fhat,
            mu_private: post.mu_private,
        })
    };

    let cn = branch(tape, batch.current_normal, ClassTag::Normal, &mut *noise)?;
    let ca = branch(tape, batch.current_anomaly, ClassTag::Anomaly, &mut *noise)?;
    let rn = match batch.replay_normal {
        Some(x) => Some(branch(tape, x, ClassTag::Normal, &mut *noise)?),
        None => None,
    };
    let ra = match batch.replay_anomaly {
        Some(x) => Some(branch(tape, x, ClassTag::Anomaly, &mut *noise)?),
        None => None,
    };

    let elbo_current = tape.add(cn.elbo, ca.elbo)?;
    let elbo_replay = match (&rn, &ra) {
        (Some(n), Some(a)) => Some(tape.add(n.elbo, a.elbo)?),
        (Some(n), None) => Some(n.elbo),
        (None, Some(a)) => Some(a.elbo),
        (None, None) => None,
    };
    let mut total = match elbo_replay {
        Some(r) => tape.add(elbo_current, r)?,
        None => elbo_current,
    };

    let adversarial = if lambda1 > 0.0 {
        let heads = gan_heads.ok_or_else(|| DiffError::Shape {
            context: "build_generator_loss".into(),
            expected: "gan_heads when lambda1 > 0".into(),
            got: "none".into(),
        })?;
        let mut fakes = tape.concat_rows(cn.fhat, ca.fhat)?;
        if let Some(n) = &rn {
            fakes = tape.concat_rows(fakes, n.fhat)?;
        }
        if let Some(a) = &ra {
            fakes = tape.concat_rows(fakes, a.fhat)?;
        }
        let probs = heads(tape, fakes)?;
        if probs.is_empty() {
            return Err(DiffError::Shape {
                context: "build_generator_loss".into(),
                expected: "at least one realness head".into(),
                got: "0".into(),
            });
        }
        let count = probs.len();
        let mut acc: Option<NodeId> = None;
        for p in probs {
            let clamped = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
            let lp = tape.ln(clamped);
            let m = tape.mean(lp);
            let term = tape.neg(m);
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let avg = tape.scale(acc.unwrap(), lambda1 / count as f64);
        total = tape.add(total, avg)?;
        Some(avg)
    } else {
        None
    };

    let distance = if lambda2 > 0.0 {
        let mu_n = tape.mean_rows(cn.mu_private);
        let mu_a = tape.mean_rows(ca.mu_private);
        let gap = tape.sub(mu_a, mu_n)?;
        let shifted = tape.add_const(gap, 1.0);
        let sq = tape.mul_elem(shifted, shifted)?;
        let s = tape.sum(sq);
        let norm = tape.sqrt(s);
        let weighted = tape.scale(norm, lambda2);
        total = tape.add(total, weighted)?;
        Some(weighted)
    } else {
        None
    };

    Ok(GeneratorLossNodes {
        total,
        elbo_current,
        elbo_replay,
        adversarial,
        distance,
    })
}

/// Probability floor used inside every log().
pub const PROB_EPS: f64 = 1e-7;

/// Tape-side reparameterization: mu + exp(logvar / 2) * noise, with the
/// noise recorded as a constant so gradients flow to mu and logvar only.
pub fn reparam_graph(
    tape: &mut Tape,
    mu: NodeId,
    logvar: NodeId,
    mut noise: impl FnMut() -> Tensor2,
) -> DiffResult<NodeId> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(noise());
    let scaled = tape.mul_elem(std, eps)?;
    tape.add(mu, scaled)
}

fn kl_graph(tape: &mut Tape, mu: NodeId, logvar: NodeId, rows: usize) -> DiffResult<NodeId> {
    let mu2 = tape.mul_elem(mu, mu)?;
    let var = tape.exp(logvar);
    let s1 = tape.add(mu2, var)?;
    let s2 = tape.add_const(s1, -1.0);
    let s3 = tape.sub(s2, logvar)?;
    let total = tape.sum(s3);
    Ok(tape.scale(total, 0.5 / rows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg(tie: bool) -> GeneratorConfig {
        GeneratorConfig {
            feature_dim: 6,
            hidden: 8,
            d_private: 3,
            d_shared: 2,
            tie_shared: tie,
        }
    }

    fn init(cfg: GeneratorConfig, seed: u64) -> (DualGenerator, ParamSet) {
        let gen = DualGenerator::new(cfg).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gen.init_params(&mut params, &mut rng).unwrap();
        (gen, params)
    }

    #[test]
    fn reparameterize_matches_examples() {
        // zero noise returns the mean
        assert_eq!(
            reparameterize(&[0.5, -1.0], &[0.3, -0.2], &[0.0, 0.0]),
            vec![0.5, -1.0]
        );
        // zero logvar gives unit scale
        let z = reparameterize(&[0.5, -1.0], &[0.0, 0.0], &[0.3, 0.3]);
        assert!((z[0] - 0.8).abs() < 1e-12 && (z[1] + 0.7).abs() < 1e-12);
    }

    #[test]
    fn reparameterize_monte_carlo_mean_approaches_mu() {
        let mu = [0.7, -0.4];
        let logvar = [0.5, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparameterize(&mu, &logvar, &noise);
            sums[0] += z[0];
            sums[1] += z[1];
        }
        for d in 0..2 {
            let mean = sums[d] / n as f64;
            let sigma = (logvar[d] / 2.0_f64).exp();
            let tol = 4.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean - mu[d]).abs() < tol,
                "dim {d}: mean {mean} vs mu {} (tol {tol})",
                mu[d]
            );
        }
    }

    #[test]
    fn kl_is_zero_at_the_prior_and_matches_half_for_unit_mean() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        let v = kl_diag_gaussian(&[1.0, 0.0], &[0.0, 0.0]);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let mu: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..2.0)).collect();
            assert!(kl_diag_gaussian(&mu, &lv) >= -1e-12);
        }
    }

    #[test]
    fn posterior_blocks_have_declared_shapes() {
        let (gen, params) = init(small_cfg(true), 1);
        let f = vec![0.3; 6];
        let post = gen.encode(&params, &f, ClassTag::Normal).unwrap();
        assert_eq!(post.mu_private.len(), 3);
        assert_eq!(post.logvar_private.len(), 3);
        assert_eq!(post.mu_shared.len(), 2);
        assert_eq!(post.logvar_shared.len(), 2);
    }

    #[test]
    fn encode_is_deterministic() {
        let (gen, params) = init(small_cfg(true), 2);
        let f = vec![0.1, -0.5, 2.0, 0.0, 1.5, -1.0];
        let a = gen.encode(&params, &f, ClassTag::Anomaly).unwrap();
        let b = gen.encode(&params, &f, ClassTag::Anomaly).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tied_shared_block_coincides_across_classes() {
        let (gen, params) = init(small_cfg(true), 3);
        let f = vec![0.4, -0.2, 1.1, 0.9, -0.7, 0.3];
        let n = gen.encode(&params, &f, ClassTag::Normal).unwrap();
        let a = gen.encode(&params, &f, ClassTag::Anomaly).unwrap();
        assert_eq!(n.mu_shared, a.mu_shared);
        assert_eq!(n.logvar_shared, a.logvar_shared);
        assert_ne!(n.mu_private, a.mu_private, "private branches are separate");
    }

    #[test]
    fn untied_shared_block_differs_across_classes() {
        let (gen, params) = init(small_cfg(false), 3);
        let f = vec![0.4, -0.2, 1.1, 0.9, -0.7, 0.3];
        let n = gen.encode(&params, &f, ClassTag::Normal).unwrap();
        let a = gen.encode(&params, &f, ClassTag::Anomaly).unwrap();
        assert_ne!(n.mu_shared, a.mu_shared);
    }

    #[test]
    fn tied_pair_shares_parameter_storage() {
        let (gen, params) = init(small_cfg(true), 4);
        let names = gen.param_names();
        assert!(names.iter().any(|n| n.starts_with("gen.shared.")));
        assert_eq!(params.len(), names.len());
        // tied: 2 classes x 9 private pieces + 5 shared pieces
        assert_eq!(params.len(), 2 * 8 + 5);
        let (_, untied_params) = init(small_cfg(false), 4);
        assert_eq!(untied_params.len(), 2 * 13);
    }

    #[test]
    fn decode_maps_latents_to_feature_dim() {
        let (gen, params) = init(small_cfg(true), 5);
        let z = vec![0.2; 5];
        let f = gen.decode(&params, &z, ClassTag::Normal).unwrap();
        assert_eq!(f.len(), 6);
        assert!(gen.decode(&params, &[0.0; 4], ClassTag::Normal).is_err());
    }

    #[test]
    fn frozen_replayer_is_unaffected_by_later_updates() {
        let (gen, mut params) = init(small_cfg(true), 6);
        let frozen = FrozenReplayer::new(&gen, &params, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let before = frozen.sample(ClassTag::Normal, 3, &mut rng).unwrap();
        // mutate the live parameters
        for name in gen.param_names() {
            for v in params.get_mut(&name).unwrap().data_mut() {
                *v += 1.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let after = frozen.sample(ClassTag::Normal, 3, &mut rng).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn replay_sampling_is_deterministic_and_sized() {
        let (gen, params) = init(small_cfg(true), 7);
        let frozen = FrozenReplayer::new(&gen, &params, 2);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = frozen.sample(ClassTag::Anomaly, 4, &mut r1).unwrap();
        let b = frozen.sample(ClassTag::Anomaly, 4, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|f| f.len() == 6));
        assert!(frozen.sample(ClassTag::Normal, 0, &mut r1).unwrap().is_empty());
    }

    /// Degenerate construction: zero encoder makes the posterior exactly
    /// the prior, and a bias-only decoder reproduces the input, so the
    /// loss collapses to its reconstruction floor of zero.
    #[test]
    fn generator_loss_reaches_floor_under_perfect_reconstruction() {
        let cfg = small_cfg(true);
        let gen = DualGenerator::new(cfg.clone()).unwrap();
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        gen.init_params(&mut params, &mut rng).unwrap();
        let f = vec![0.9, -1.2, 0.4, 2.0, -0.3, 0.7];
        for name in gen.param_names() {
            for v in params.get_mut(&name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        for class in ["normal", "anomaly"] {
            let bias = params.get_mut(&format!("gen.{class}.dec.out.b")).unwrap();
            for (b, &fv) in bias.data_mut().iter_mut().zip(&f) {
                *b = fv;
            }
        }
        let x = Tensor2::from_rows(&[f.clone(), f.clone()]).unwrap();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut noise = |r: usize, c: usize| {
            let mut t = Tensor2::zeros(r, c);
            for v in t.data_mut() {
                *v = rng.sample(StandardNormal);
            }
            t
        };
        let nodes = build_generator_loss(
            &mut tape,
            &params,
            &gen,
            &GeneratorBatch {
                current_normal: &x,
                current_anomaly: &x,
                replay_normal: None,
                replay_anomaly: None,
            },
            &mut noise,
            None,
            0.0,
            0.0,
        )
        .unwrap();
        let loss = tape.value(nodes.total).item().unwrap();
        assert!(loss.abs() < 1e-12, "floor loss, got {loss}");
        assert!(nodes.adversarial.is_none());
        assert!(nodes.distance.is_none());
        assert!(nodes.elbo_replay.is_none());
    }

    /// On the first domain the replay terms must not exist: the loss
    /// equals the hand-computed current-domain ELBO exactly.
    #[test]
    fn first_domain_loss_is_current_elbo_only() {
        let (gen, params) = init(small_cfg(true), 10);
        let xn = Tensor2::from_rows(&[vec![0.5, 0.1, -0.3, 0.8, 0.0, 1.0]]).unwrap();
        let xa = Tensor2::from_rows(&[vec![-0.5, 1.1, 0.3, -0.8, 0.2, -1.0]]).unwrap();
        let mut tape = Tape::new();
        let mut noise = |r: usize, c: usize| Tensor2::zeros(r, c);
        let nodes = build_generator_loss(
            &mut tape,
            &params,
            &gen,
            &GeneratorBatch {
                current_normal: &xn,
                current_anomaly: &xa,
                replay_normal: None,
                replay_anomaly: None,
            },
            &mut noise,
            None,
            0.0,
            0.0,
        )
        .unwrap();
        // hand recomputation with zero noise: z = mu
        let mut expected = 0.0;
        for (x, class) in [(&xn, ClassTag::Normal), (&xa, ClassTag::Anomaly)] {
            let post = gen.encode(&params, x.row_slice(0), class).unwrap();
            let z: Vec<f64> = post
                .mu_private
                .iter()
                .chain(&post.mu_shared)
                .copied()
                .collect();
            let fhat = gen.decode(&params, &z, class).unwrap();
            let recon: f64 = x
                .row_slice(0)
                .iter()
                .zip(&fhat)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                * 0.5;
            expected += recon
                + kl_diag_gaussian(&post.mu_private, &post.logvar_private)
                + kl_diag_gaussian(&post.mu_shared, &post.logvar_shared);
        }
        let got = tape.value(nodes.total).item().unwrap();
        assert!(
            (got - expected).abs() < 1e-10,
            "got {got}, expected {expected}"
        );
    }

    #[test]
    fn distance_term_matches_examples() {
        // equal means: ||1 - mu + mu||_2 = sqrt(d)
        let (gen, params) = init(small_cfg(true), 11);
        let x = Tensor2::from_rows(&[vec![0.2; 6]]).unwrap();
        let mut tape = Tape::new();
        let mut noise = |r: usize, c: usize| Tensor2::zeros(r, c);
        let nodes = build_generator_loss(
            &mut tape,
            &params,
            &gen,
            &GeneratorBatch {
                current_normal: &x,
                current_anomaly: &x,
                replay_normal: None,
                replay_anomaly: None,
            },
            &mut noise,
            None,
            0.0,
            1.0,
        )
        .unwrap();
        let post_n = gen.encode(&params, x.row_slice(0), ClassTag::Normal).unwrap();
        let post_a = gen.encode(&params, x.row_slice(0), ClassTag::Anomaly).unwrap();
        let expected: f64 = post_n
            .mu_private
            .iter()
            .zip(&post_a.mu_private)
            .map(|(&n, &a)| (1.0 - n + a) * (1.0 - n + a))
            .sum::<f64>()
            .sqrt();
        let got = tape.value(nodes.distance.unwrap()).item().unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    /// Gradients of tied parameters are the sum of both class branches'
    /// contributions.
    #[test]
    fn tied_gradients_sum_over_classes() {
        let (gen, params) = init(small_cfg(true), 12);
        let xn = Tensor2::from_rows(&[vec![0.5, 0.1, -0.3, 0.8, 0.0, 1.0]]).unwrap();
        let xa = Tensor2::from_rows(&[vec![-0.5, 1.1, 0.3, -0.8, 0.2, -1.0]]).unwrap();

        let elbo_grads = |xn_only: bool, xa_only: bool| {
            let mut tape = Tape::new();
            let noise = |r: usize, c: usize| Tensor2::filled(r, c, 0.25);
            let mut acc: Option<NodeId> = None;
            if xn_only {
                let x = tape.constant(xn.clone());
                let post = gen.encode_graph(&mut tape, &params, x, ClassTag::Normal).unwrap();
                let zp = reparam_graph(&mut tape, post.mu_private, post.logvar_private, || noise(1, 3)).unwrap();
                let zs = reparam_graph(&mut tape, post.mu_shared, post.logvar_shared, || noise(1, 2)).unwrap();
                let fhat = gen.decode_graph(&mut tape, &params, zp, zs, ClassTag::Normal).unwrap();
                let d = tape.sub(x, fhat).unwrap();
                let sq = tape.mul_elem(d, d).unwrap();
                let s = tape.sum(sq);
                acc = Some(s);
            }
            if xa_only {
                let x = tape.constant(xa.clone());
                let post = gen.encode_graph(&mut tape, &params, x, ClassTag::Anomaly).unwrap();
                let zp = reparam_graph(&mut tape, post.mu_private, post.logvar_private, || noise(1, 3)).unwrap();
                let zs = reparam_graph(&mut tape, post.mu_shared, post.logvar_shared, || noise(1, 2)).unwrap();
                let fhat = gen.decode_graph(&mut tape, &params, zp, zs, ClassTag::Anomaly).unwrap();
                let d = tape.sub(x, fhat).unwrap();
                let sq = tape.mul_elem(d, d).unwrap();
                let s = tape.sum(sq);
                acc = Some(match acc {
                    Some(a) => tape.add(a, s).unwrap(),
                    None => s,
                });
            }
            tape.gradients(acc.unwrap(), &params).unwrap()
        };

        let both = elbo_grads(true, true);
        let only_n = elbo_grads(true, false);
        let only_a = elbo_grads(false, true);
        let name = "gen.shared.enc.l1.w";
        let g_both = both.get(name).unwrap();
        let g_n = only_n.get(name).unwrap();
        let g_a = only_a.get(name).unwrap();
        for i in 0..g_both.data().len() {
            let sum = g_n.data()[i] + g_a.data()[i];
            assert!(
                (g_both.data()[i] - sum).abs() < 1e-12,
                "tied grad at {i}: {} vs {}",
                g_both.data()[i],
                sum
            );
        }
    }
}
