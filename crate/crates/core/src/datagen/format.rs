//! On-disk dataset layout. A dataset directory holds one JSON manifest
//! plus per-domain subdirectories of binary files, all little-endian:
//!
//! feature file: magic "CADF", version u32, feature_dim u32, instance
//! count u64, segment_len u32, then count x dim f32 row-major.
//!
//! frame-label file: magic "CADL", version u32, frame count u64, then one
//! byte per frame, each 0 or 1.
//!
//! Feature payloads are stored exactly as held in memory (f32), so a
//! save/load round trip is bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Bag, DataError, DataResult, DomainDataset, FeatureInstance};

pub const FEATURE_MAGIC: [u8; 4] = *b"CADF";
pub const LABEL_MAGIC: [u8; 4] = *b"CADL";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    feature_dim: u32,
    segment_len: u32,
    domains: Vec<ManifestDomain>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDomain {
    domain_id: u32,
    train: Vec<ManifestVideo>,
    test: Vec<ManifestVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestVideo {
    video_id: String,
    feature_path: String,
    weak_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_path: Option<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, offset: usize, detail: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        offset,
        detail: detail.into(),
    }
}

fn encode_features(bag: &Bag) -> Vec<u8> {
    let dim = bag.feature_dim() as u32;
    let count = bag.instances.len() as u64;
    let seg = bag.segment_len() as u32;
    let mut out = Vec::with_capacity(24 + bag.instances.len() * dim as usize * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&seg.to_le_bytes());
    for inst in &bag.instances {
        for v in &inst.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    out.extend_from_slice(labels);
    out
}

struct Reader<'a> {
    path: &'a Path,
    buf: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> DataResult<Self> {
        let buf = fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(Self { path, buf, pos: 0 })
    }

    fn take(&mut self, n: usize, what: &str) -> DataResult<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(
                self.path,
                self.pos,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> DataResult<()> {
        let got: [u8; 4] = self.take(4, "magic")?.try_into().expect("exact length");
        if got != expected {
            return Err(fmt_err(
                self.path,
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(&expected)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> DataResult<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> DataResult<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn finish(&self) -> DataResult<()> {
        if self.pos != self.buf.len() {
            return Err(fmt_err(
                self.path,
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_features(path: &Path, expect_dim: u32, expect_seg: u32) -> DataResult<Vec<FeatureInstance>> {
    let mut r = Reader::open(path)?;
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, 4, format!("unsupported version {version}")));
    }
    let dim = r.u32("feature_dim")?;
    if dim != expect_dim {
        return Err(fmt_err(
            path,
            8,
            format!("feature_dim {dim} does not match manifest {expect_dim}"),
        ));
    }
    if dim == 0 {
        return Err(fmt_err(path, 8, "feature_dim 0"));
    }
    let count = r.u64("instance count")?;
    let seg = r.u32("segment_len")?;
    if seg != expect_seg {
        return Err(fmt_err(
            path,
            20,
            format!("segment_len {seg} does not match manifest {expect_seg}"),
        ));
    }
    let mut instances = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let raw = r.take(dim as usize * 4, "feature row")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        instances.push(FeatureInstance {
            values,
            frame_span: (i * seg as usize, (i + 1) * seg as usize),
        });
    }
    r.finish()?;
    Ok(instances)
}

fn read_labels(path: &Path, expected_frames: usize) -> DataResult<Vec<u8>> {
    let mut r = Reader::open(path)?;
    r.magic(LABEL_MAGIC)?;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(path, 4, format!("unsupported version {version}")));
    }
    let count = r.u64("frame count")? as usize;
    if count != expected_frames {
        return Err(fmt_err(
            path,
            8,
            format!("{count} frame labels for {expected_frames} frames"),
        ));
    }
    let offset = r.pos;
    let labels = r.take(count, "frame labels")?.to_vec();
    if let Some(bad) = labels.iter().position(|&l| l > 1) {
        return Err(fmt_err(
            path,
            offset + bad,
            format!("label byte {} not in {{0, 1}}", labels[bad]),
        ));
    }
    r.finish()?;
    Ok(labels)
}

fn write_file(path: &Path, bytes: &[u8]) -> DataResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Writes every domain under `dir` and returns the manifest path.
/// Existing files are overwritten; collision policy belongs to callers.
pub fn save_feature_dataset(dir: &Path, domains: &[DomainDataset]) -> DataResult<PathBuf> {
    let feature_dim = domains
        .iter()
        .map(|d| d.feature_dim())
        .find(|&k| k > 0)
        .ok_or_else(|| DataError::Dataset("no bags to save".into()))? as u32;
    let mut segment_len = 0u32;
    for d in domains {
        for bag in d.train_bags_raw().iter().chain(d.test_bags()) {
            let seg = bag.segment_len() as u32;
            if segment_len == 0 {
                segment_len = seg;
            } else if seg != segment_len {
                return Err(DataError::Dataset(format!(
                    "bag `{}` uses segment_len {seg}, dataset uses {segment_len}",
                    bag.video_id
                )));
            }
        }
    }

    let mut manifest = Manifest {
        version: FORMAT_VERSION,
        feature_dim,
        segment_len,
        domains: Vec::new(),
    };

    for domain in domains {
        let sub = format!("domain_{:02}", domain.domain_id());
        let subdir = dir.join(&sub);
        fs::create_dir_all(&subdir).map_err(|e| io_err(&subdir, e))?;

        let save_split = |bags: &[Bag]| -> DataResult<Vec<ManifestVideo>> {
            bags.iter()
                .map(|bag| {
                    let feature_rel = format!("{sub}/{}.feat", bag.video_id);
                    write_file(&dir.join(&feature_rel), &encode_features(bag))?;
                    let label_path = match &bag.frame_labels {
                        Some(labels) => {
                            let rel = format!("{sub}/{}.labels", bag.video_id);
                            write_file(&dir.join(&rel), &encode_labels(labels))?;
                            Some(rel)
                        }
                        None => None,
                    };
                    Ok(ManifestVideo {
                        video_id: bag.video_id.clone(),
                        feature_path: feature_rel,
                        weak_label: bag.weak_label as u8,
                        label_path,
                    })
                })
                .collect()
        };

        manifest.domains.push(ManifestDomain {
            domain_id: domain.domain_id() as u32,
            train: save_split(domain.train_bags_raw())?,
            test: save_split(domain.test_bags())?,
        });
    }

    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Dataset(format!("manifest encoding: {e}")))?;
    write_file(&manifest_path, json.as_bytes())?;
    Ok(manifest_path)
}

/// Loads a dataset from its manifest. Paths inside the manifest resolve
/// relative to the manifest's directory.
pub fn load_feature_dataset(manifest_path: &Path) -> DataResult<Vec<DomainDataset>> {
    let raw = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| {
        fmt_err(
            manifest_path,
            (e.line().saturating_sub(1)) * 80 + e.column(),
            format!("manifest parse error: {e}"),
        )
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(fmt_err(
            manifest_path,
            0,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut domains = Vec::with_capacity(manifest.domains.len());
    for md in &manifest.domains {
        let load_split = |videos: &[ManifestVideo]| -> DataResult<Vec<Bag>> {
            videos
                .iter()
                .map(|v| {
                    if v.weak_label > 1 {
                        return Err(fmt_err(
                            manifest_path,
                            0,
                            format!("video `{}` weak_label {} not in {{0, 1}}", v.video_id, v.weak_label),
                        ));
                    }
                    let instances = read_features(
                        &base.join(&v.feature_path),
                        manifest.feature_dim,
                        manifest.segment_len,
                    )?;
                    let frame_labels = v
                        .label_path
                        .as_ref()
                        .map(|rel| {
                            read_labels(
                                &base.join(rel),
                                instances.len() * manifest.segment_len as usize,
                            )
                        })
                        .transpose()?;
                    Ok(Bag {
                        video_id: v.video_id.clone(),
                        domain_id: md.domain_id as usize,
                        weak_label: v.weak_label == 1,
                        instances,
                        frame_labels,
                    })
                })
                .collect()
        };
        domains.push(DomainDataset::new(
            md.domain_id as usize,
            load_split(&md.train)?,
            load_split(&md.test)?,
        )?);
    }
    Ok(domains)
}
