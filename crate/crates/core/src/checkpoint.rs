//! Binary checkpoints taken at training-unit boundaries. A checkpoint
//! captures everything `RegimeRunner` needs to continue exactly where it
//! stopped: configuration, parameters, optimizer moments, the frozen
//! replayer, both random streams, and the partially filled result
//! matrix. Resuming from one reproduces the uninterrupted run bit for
//! bit.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::continual_trainer::{
    plan_of, ModelState, RegimeRunner, TrainConfig, TrainError, TrainResult,
};
use crate::datagen::DomainDataset;
use crate::diffcore::{AdamState, DiffError, ParamSet, Tensor2};
use crate::dual_generator::{DualGenerator, FrozenReplayer, GeneratorConfig};
use crate::inference_eval::AucMatrix;
use crate::multi_discriminator::{DiscriminatorBank, DiscriminatorConfig};

const MAGIC: [u8; 4] = *b"CADC";
const VERSION: u32 = 1;

// Caps on length fields so a corrupt file fails cleanly instead of
// triggering a huge allocation.
const MAX_NAME_BYTES: u64 = 1 << 16;
const MAX_JSON_BYTES: u64 = 1 << 20;
const MAX_TENSOR_ELEMS: u64 = 1 << 28;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] DiffError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type CkptResult<T> = Result<T, CheckpointError>;

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

/// A frozen run snapshot, valid at a unit boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub feature_dim: usize,
    pub units_done: usize,
    pub state: ModelState,
    pub matrix: AucMatrix,
}

impl Checkpoint {
    /// Snapshots a runner. Meaningful only between `advance` calls.
    pub fn capture(runner: &RegimeRunner<'_>) -> Self {
        Self {
            cfg: runner.cfg().clone(),
            feature_dim: runner.state().bank().config().feature_dim,
            units_done: runner.units_done(),
            state: runner.state().clone(),
            matrix: runner.matrix().clone(),
        }
    }

    /// Rebuilds a runner over `domains`, continuing after the last
    /// finished unit.
    pub fn resume_runner<'a>(&self, domains: &'a [DomainDataset]) -> TrainResult<RegimeRunner<'a>> {
        if !domains.is_empty() && domains[0].feature_dim() != self.feature_dim {
            return Err(TrainError::Config(format!(
                "checkpoint was trained on {}-dim features, stream has {}",
                self.feature_dim,
                domains[0].feature_dim()
            )));
        }
        RegimeRunner::resume(
            domains,
            self.cfg.clone(),
            self.state.clone(),
            self.matrix.clone(),
            self.units_done,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> CkptResult<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> CkptResult<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let ckpt = Self::read_from(&mut r)?;
        // trailing bytes mean the file is not what we wrote
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(bad("trailing bytes after checkpoint payload"));
        }
        Ok(ckpt)
    }

    pub fn write_to(&self, w: &mut dyn Write) -> CkptResult<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(&self.cfg).map_err(|e| bad(e.to_string()))?;
        write_bytes(w, &cfg_json)?;
        write_u64(w, self.feature_dim as u64)?;
        write_u64(w, self.units_done as u64)?;
        write_u64(w, self.state.domains_done as u64)?;

        write_rng(w, &self.state.rng_sample)?;
        write_rng(w, &self.state.rng_noise)?;
        write_params(w, &self.state.params)?;
        write_adam(w, &self.state.disc_adam)?;
        match &self.state.gen_adam {
            Some(adam) => {
                w.write_all(&[1])?;
                write_adam(w, adam)?;
            }
            None => w.write_all(&[0])?,
        }
        match &self.state.replayer {
            Some(rep) => {
                w.write_all(&[1])?;
                write_u64(w, rep.domains_seen() as u64)?;
                write_params(w, rep.params())?;
            }
            None => w.write_all(&[0])?,
        }

        let t = self.matrix.t();
        write_u64(w, t as u64)?;
        for r in 0..t {
            for c in 0..t {
                let cell = if c <= r {
                    self.matrix.get(r, c).map_err(|e| bad(e.to_string()))?
                } else {
                    None
                };
                write_opt_f64(w, cell)?;
            }
            write_opt_f64(w, self.matrix.pooled(r).map_err(|e| bad(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut dyn Read) -> CkptResult<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let ver = u32::from_le_bytes(ver);
        if ver != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {ver} (expected {VERSION})"
            )));
        }
        let cfg_json = read_bytes(r, MAX_JSON_BYTES)?;
        let cfg: TrainConfig =
            serde_json::from_slice(&cfg_json).map_err(|e| bad(format!("config blob: {e}")))?;
        cfg.validate()?;
        let feature_dim = read_usize(r)?;
        if feature_dim == 0 {
            return Err(bad("feature_dim is zero"));
        }
        let units_done = read_usize(r)?;
        let domains_done = read_usize(r)?;

        let rng_sample = read_rng(r)?;
        let rng_noise = read_rng(r)?;
        let params = read_params(r)?;
        let disc_adam = read_adam(r)?;
        let gen_adam = match read_flag(r)? {
            true => Some(read_adam(r)?),
            false => None,
        };

        let plan = plan_of(&cfg);
        let bank = DiscriminatorBank::new(
            DiscriminatorConfig {
                feature_dim,
                hidden: cfg.disc_hidden,
                trunk_out: cfg.trunk_out,
            },
            plan.disc_count,
        )?;
        for name in bank.param_names() {
            if !params.contains(&name) {
                return Err(bad(format!("missing discriminator parameter {name}")));
            }
        }
        let gen_cfg = GeneratorConfig {
            feature_dim,
            hidden: cfg.gen_hidden,
            d_private: cfg.d_private,
            d_shared: cfg.d_shared,
            tie_shared: plan.tie_shared,
        };
        let gen = if plan.generators {
            let gen = DualGenerator::new(gen_cfg.clone())?;
            for name in gen.param_names() {
                if !params.contains(&name) {
                    return Err(bad(format!("missing generator parameter {name}")));
                }
            }
            if gen_adam.is_none() {
                return Err(bad("generator regime without generator optimizer"));
            }
            Some(gen)
        } else {
            if gen_adam.is_some() {
                return Err(bad("generator optimizer in a generator-free regime"));
            }
            None
        };

        let replayer = match read_flag(r)? {
            true => {
                if !plan.generators {
                    return Err(bad("replay snapshot in a generator-free regime"));
                }
                let domains_seen = read_usize(r)?;
                let rep_params = read_params(r)?;
                Some(FrozenReplayer::from_parts(
                    gen_cfg.clone(),
                    rep_params,
                    domains_seen,
                )?)
            }
            false => None,
        };

        let t = read_usize(r)?;
        let mut matrix = AucMatrix::new(t).map_err(|e| bad(e.to_string()))?;
        for row in 0..t {
            for col in 0..t {
                let cell = read_opt_f64(r)?;
                if let Some(v) = cell {
                    if col > row {
                        return Err(bad(format!("value above the diagonal at ({row}, {col})")));
                    }
                    matrix.set(row, col, v).map_err(|e| bad(e.to_string()))?;
                }
            }
            if let Some(v) = read_opt_f64(r)? {
                matrix.set_pooled(row, v).map_err(|e| bad(e.to_string()))?;
            }
        }

        let state = ModelState {
            bank,
            gen,
            params,
            disc_adam,
            gen_adam,
            replayer,
            domains_done,
            rng_sample,
            rng_noise,
        };
        Ok(Self {
            cfg,
            feature_dim,
            units_done,
            state,
            matrix,
        })
    }
}

fn write_u64(w: &mut dyn Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut dyn Read) -> CkptResult<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize(r: &mut dyn Read) -> CkptResult<usize> {
    usize::try_from(read_u64(r)?).map_err(|_| bad("length field overflows usize"))
}

fn read_flag(r: &mut dyn Read) -> CkptResult<bool> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    match b[0] {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(bad(format!("flag byte must be 0 or 1, got {other}"))),
    }
}

fn write_f64(w: &mut dyn Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64(r: &mut dyn Read) -> CkptResult<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn write_opt_f64(w: &mut dyn Write, v: Option<f64>) -> io::Result<()> {
    match v {
        Some(x) => {
            w.write_all(&[1])?;
            write_f64(w, x)
        }
        None => w.write_all(&[0]),
    }
}

fn read_opt_f64(r: &mut dyn Read) -> CkptResult<Option<f64>> {
    match read_flag(r)? {
        true => Ok(Some(read_f64(r)?)),
        false => Ok(None),
    }
}

fn write_bytes(w: &mut dyn Write, b: &[u8]) -> io::Result<()> {
    write_u64(w, b.len() as u64)?;
    w.write_all(b)
}

fn read_bytes(r: &mut dyn Read, cap: u64) -> CkptResult<Vec<u8>> {
    let len = read_u64(r)?;
    if len > cap {
        return Err(bad(format!("length field {len} exceeds cap {cap}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_str(w: &mut dyn Write, s: &str) -> io::Result<()> {
    write_bytes(w, s.as_bytes())
}

fn read_str(r: &mut dyn Read) -> CkptResult<String> {
    let bytes = read_bytes(r, MAX_NAME_BYTES)?;
    String::from_utf8(bytes).map_err(|_| bad("name is not valid utf-8"))
}

fn write_tensor(w: &mut dyn Write, t: &Tensor2) -> io::Result<()> {
    write_u64(w, t.rows() as u64)?;
    write_u64(w, t.cols() as u64)?;
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut dyn Read) -> CkptResult<Tensor2> {
    let rows = read_u64(r)?;
    let cols = read_u64(r)?;
    let elems = rows
        .checked_mul(cols)
        .filter(|&n| n <= MAX_TENSOR_ELEMS)
        .ok_or_else(|| bad(format!("tensor of {rows} x {cols} is implausibly large")))?;
    let mut data = Vec::with_capacity(elems as usize);
    for _ in 0..elems {
        data.push(read_f64(r)?);
    }
    Tensor2::from_vec(rows as usize, cols as usize, data).map_err(CheckpointError::from)
}

fn write_params(w: &mut dyn Write, params: &ParamSet) -> CkptResult<()> {
    write_u64(w, params.len() as u64)?;
    for (name, tensor) in params.iter() {
        write_str(w, name)?;
        write_tensor(w, tensor)?;
    }
    Ok(())
}

fn read_params(r: &mut dyn Read) -> CkptResult<ParamSet> {
    let count = read_usize(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let tensor = read_tensor(r)?;
        params.insert(&name, tensor)?;
    }
    Ok(params)
}

fn write_adam(w: &mut dyn Write, adam: &AdamState) -> CkptResult<()> {
    let (t, lr, moments) = adam.export();
    write_u64(w, t)?;
    write_f64(w, lr)?;
    write_u64(w, moments.len() as u64)?;
    for (name, m, v) in &moments {
        write_str(w, name)?;
        write_tensor(w, m)?;
        write_tensor(w, v)?;
    }
    Ok(())
}

fn read_adam(r: &mut dyn Read) -> CkptResult<AdamState> {
    let t = read_u64(r)?;
    let lr = read_f64(r)?;
    let count = read_usize(r)?;
    let mut moments = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = read_str(r)?;
        let m = read_tensor(r)?;
        let v = read_tensor(r)?;
        moments.push((name, m, v));
    }
    Ok(AdamState::import(t, lr, moments))
}

// ChaCha8 state round-trips as (seed, stream, word position).
fn write_rng(w: &mut dyn Write, rng: &ChaCha8Rng) -> io::Result<()> {
    w.write_all(&rng.get_seed())?;
    write_u64(w, rng.get_stream())?;
    w.write_all(&rng.get_word_pos().to_le_bytes())
}

fn read_rng(r: &mut dyn Read) -> CkptResult<ChaCha8Rng> {
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let stream = read_u64(r)?;
    let mut pos = [0u8; 16];
    r.read_exact(&mut pos)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from_le_bytes(pos));
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continual_trainer::{run_regime, Regime};
    use crate::datagen::{make_synthetic_stream, SyntheticStreamConfig};

    fn tiny_stream(domains: usize, seed: u64) -> Vec<DomainDataset> {
        make_synthetic_stream(&SyntheticStreamConfig {
            domains,
            feature_dim: 6,
            bags_per_domain: 6,
            bag_size: 4,
            segment_len: 4,
            seed,
            ..SyntheticStreamConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            seed: 3,
            epochs_per_domain: 1,
            disc_hidden: 8,
            trunk_out: 5,
            gen_hidden: 8,
            d_private: 3,
            d_shared: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trips_bitwise() {
        let stream = tiny_stream(2, 31);
        let mut runner = RegimeRunner::new(&stream, tiny_cfg(Regime::Cade)).unwrap();
        runner.advance().unwrap();
        let ckpt = Checkpoint::capture(&runner);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unit1.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let stream = tiny_stream(3, 32);
        let cfg = tiny_cfg(Regime::Cade);
        let whole = run_regime(&stream, cfg.clone()).unwrap();

        let mut first = RegimeRunner::new(&stream, cfg).unwrap();
        first.advance().unwrap();
        let ckpt = Checkpoint::capture(&first);
        drop(first);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut resumed = loaded.resume_runner(&stream).unwrap();
        assert_eq!(resumed.units_done(), 1);
        while !resumed.is_complete() {
            resumed.advance().unwrap();
        }
        let out = resumed.into_result().unwrap();

        assert_eq!(out.matrix, whole.matrix);
        assert_eq!(out.state.params(), whole.state.params());
        assert_eq!(out.state, whole.state);
        // counters restart at the resume point but per-unit draws match
        assert_eq!(out.replay_rows_by_unit.len(), 2);
        assert_eq!(out.replay_rows_by_unit[0], whole.replay_rows_by_unit[1]);
        assert_eq!(out.replay_rows_by_unit[1], whole.replay_rows_by_unit[2]);
    }

    #[test]
    fn resume_works_for_every_regime() {
        let stream = tiny_stream(2, 33);
        for regime in Regime::ALL {
            let cfg = tiny_cfg(regime);
            let whole = run_regime(&stream, cfg.clone()).unwrap();
            let mut first = RegimeRunner::new(&stream, cfg).unwrap();
            first.advance().unwrap();
            let ckpt = Checkpoint::capture(&first);
            let mut resumed = ckpt.resume_runner(&stream).unwrap();
            while !resumed.is_complete() {
                resumed.advance().unwrap();
            }
            let out = resumed.into_result().unwrap();
            assert_eq!(out.matrix, whole.matrix, "{regime} diverged after resume");
            assert_eq!(out.state, whole.state, "{regime} state diverged");
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();

        let empty = dir.path().join("empty.ckpt");
        std::fs::write(&empty, b"").unwrap();
        assert!(Checkpoint::load(&empty).is_err());

        let wrong = dir.path().join("wrong.ckpt");
        std::fs::write(&wrong, b"NOPEnope").unwrap();
        let err = Checkpoint::load(&wrong).unwrap_err();
        assert!(matches!(err, CheckpointError::Format(_)));

        // valid prefix, truncated payload
        let stream = tiny_stream(1, 34);
        let mut runner = RegimeRunner::new(&stream, tiny_cfg(Regime::Ft)).unwrap();
        runner.advance().unwrap();
        let full = dir.path().join("full.ckpt");
        Checkpoint::capture(&runner).save(&full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&cut).is_err());

        // trailing junk
        let padded = dir.path().join("padded.ckpt");
        let mut longer = bytes.clone();
        longer.push(0x5a);
        std::fs::write(&padded, &longer).unwrap();
        assert!(matches!(
            Checkpoint::load(&padded).unwrap_err(),
            CheckpointError::Format(_)
        ));
    }

    #[test]
    fn refuses_mismatched_stream() {
        let stream = tiny_stream(1, 35);
        let mut runner = RegimeRunner::new(&stream, tiny_cfg(Regime::Ft)).unwrap();
        runner.advance().unwrap();
        let ckpt = Checkpoint::capture(&runner);

        let other = make_synthetic_stream(&SyntheticStreamConfig {
            domains: 1,
            feature_dim: 9,
            bags_per_domain: 6,
            bag_size: 4,
            segment_len: 4,
            seed: 36,
            ..SyntheticStreamConfig::default()
        })
        .unwrap();
        assert!(ckpt.resume_runner(&other).is_err());
    }
}
