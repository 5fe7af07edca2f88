//! On-disk formats: binary checkpoints and corpora, JSON metric reports,
//! plain-text tables and PNG image dumps.
//!
//! Binary containers share one layout, all integers little-endian:
//!
//! ```text
//! magic [8] | version u32 | body length u64 | body | sha256(magic..body) [32]
//! ```
//!
//! Tensors inside a body are a `u32` rank, `u64` dimensions and the raw
//! `f64` payload, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::degrade::{DegradationKind, DegradedPair};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{ModelConfig, RestorationModel};
use crate::train::{Adam, OptimizerConfig};

pub const FORMAT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FGIRCKPT";
const CORPUS_MAGIC: &[u8; 8] = b"FGIRCRPS";
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        t.shape().iter().for_each(|&d| self.u64(d as u64));
        t.values().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn malformed(&self, detail: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.malformed(format!("record at byte {} runs past the body", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.malformed(format!("implausible length {v}")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as u64;
        let n = self.len(n)?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("string is not UTF-8"))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()?;
        let n = self.len(n)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as u64;
        let rank = self.len(rank)?;
        let shape = (0..rank)
            .map(|_| {
                let d = self.u64()?;
                self.len(d)
            })
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= self.bytes.len() / 8)
            .ok_or_else(|| self.malformed(format!("implausible tensor shape {shape:?}")))?;
        let values = (0..count).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, values).map_err(|e| self.malformed(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} unread trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

fn seal(magic: &[u8; 8], body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Validates the container framing and returns the body. Checks run in a
/// fixed order so each kind of damage maps to one error: magic, version,
/// length, digest.
fn unseal<'a>(magic: &[u8; 8], bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < magic.len() {
        return Err(truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic { path: path.to_path_buf() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let body_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = usize::try_from(body_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN + DIGEST_LEN));
    match expected {
        Some(n) if n == bytes.len() => {}
        Some(n) if n > bytes.len() => {
            return Err(truncated(format!("{} bytes, header promises {n}", bytes.len())))
        }
        _ => {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("body length {body_len} disagrees with file size {}", bytes.len()),
            })
        }
    }
    let (sealed, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(sealed).as_slice() != digest {
        return Err(Error::Digest { path: path.to_path_buf() });
    }
    Ok(&sealed[HEADER_LEN..])
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A model with optional optimizer state and free-form string metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: RestorationModel,
    pub optimizer: Option<Adam>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: RestorationModel) -> Self {
        Self {
            model,
            optimizer: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_optimizer(mut self, opt: Adam) -> Self {
        self.optimizer = Some(opt);
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        let cfg = self.model.config();
        w.u64(cfg.width as u64);
        w.u64(cfg.depth as u64);
        w.u64(cfg.seed);
        let params: Vec<_> = self.model.named_params().collect();
        w.u32(params.len() as u32);
        for (name, t) in params {
            w.str(&name);
            w.tensor(t);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                let c = opt.config();
                [c.lr, c.beta1, c.beta2, c.eps].into_iter().for_each(|x| w.f64(x));
                w.u64(opt.steps());
                let (first, second) = opt.moments();
                w.u32(first.len() as u32);
                for (m, v) in first.iter().zip(second) {
                    w.f64s(m);
                    w.f64s(v);
                }
            }
        }
        seal(CHECKPOINT_MAGIC, w.buf)
    }

    /// Parses bytes produced by [`Checkpoint::to_bytes`]; `path` only
    /// labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let body = unseal(CHECKPOINT_MAGIC, bytes, path)?;
        let mut r = Reader { bytes: body, pos: 0, path };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            metadata.insert(k, r.str()?);
        }
        let width = r.u64()?;
        let depth = r.u64()?;
        let config = ModelConfig {
            width: r.len(width)?,
            depth: r.len(depth)?,
            seed: r.u64()?,
        };
        let count = r.u32()?;
        let params = (0..count)
            .map(|_| Ok((r.str()?, r.tensor()?)))
            .collect::<Result<Vec<_>>>()?;
        let model = RestorationModel::from_params(config, params).map_err(|e| r.malformed(e.to_string()))?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = OptimizerConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                let steps = r.u64()?;
                let n = r.u32()?;
                let (mut first, mut second) = (Vec::new(), Vec::new());
                for _ in 0..n {
                    first.push(r.f64s()?);
                    second.push(r.f64s()?);
                }
                let mut opt = Adam::new(config).map_err(|e| r.malformed(e.to_string()))?;
                opt.restore_state(first, second, steps)
                    .map_err(|e| r.malformed(e.to_string()))?;
                Some(opt)
            }
            flag => return Err(r.malformed(format!("unknown optimizer flag {flag}"))),
        };
        r.finish()?;
        Ok(Self {
            model,
            optimizer,
            metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&read_file(path)?, path)
    }
}

pub fn save_checkpoint(model: &RestorationModel, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RestorationModel> {
    Checkpoint::load(path).map(|c| c.model)
}

pub fn corpus_to_bytes(pairs: &[DegradedPair]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(pairs.len() as u64);
    for p in pairs {
        w.u64(p.kind.code());
        w.u64(p.index as u64);
        w.tensor(&p.degraded);
        w.tensor(&p.clean);
    }
    seal(CORPUS_MAGIC, w.buf)
}

pub fn corpus_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<DegradedPair>> {
    let body = unseal(CORPUS_MAGIC, bytes, path)?;
    let mut r = Reader { bytes: body, pos: 0, path };
    let n = r.u64()?;
    let n = r.len(n)?;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let code = r.u64()?;
        let kind = DegradationKind::from_code(code)
            .ok_or_else(|| r.malformed(format!("unknown degradation code {code}")))?;
        let index = r.u64()?;
        let index = r.len(index).unwrap_or(usize::MAX);
        let degraded = r.tensor()?;
        let clean = r.tensor()?;
        if degraded.shape() != clean.shape() {
            return Err(r.malformed(format!("pair {index} has mismatched image shapes")));
        }
        pairs.push(DegradedPair {
            degraded,
            clean,
            kind,
            index,
        });
    }
    r.finish()?;
    Ok(pairs)
}

pub fn save_corpus(pairs: &[DegradedPair], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &corpus_to_bytes(pairs))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<DegradedPair>> {
    let path = path.as_ref();
    corpus_from_bytes(&read_file(path)?, path)
}

/// Everything needed to describe and re-run one experiment.
///
/// Wall-clock timings are kept out of the metrics file so that identical
/// runs produce identical bytes; they go to a file of their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub name: String,
    /// Fully resolved configuration, every default filled in.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<MetricReport>,
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl RunRecord {
    pub fn new(name: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            name: name.into(),
            config,
            seeds: BTreeMap::new(),
            stages: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn stage(&self, label: &str) -> Option<&MetricReport> {
        self.stages.iter().find(|s| s.stage == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn timings_json(&self) -> Result<String> {
        let map: BTreeMap<&str, f64> = self.timings.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut s = serde_json::to_string_pretty(&map)?;
        s.push('\n');
        Ok(s)
    }
}

/// Renders `PSNR/SSIM` cells with one row per stage and one column per
/// degradation kind, e.g. `28.89/0.9559`.
pub fn render_table(record: &RunRecord) -> String {
    let kinds: Vec<DegradationKind> = DegradationKind::ALL
        .into_iter()
        .filter(|&k| record.stages.iter().any(|s| s.get(k).is_some()))
        .collect();
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Stage".to_string())
        .chain(kinds.iter().map(|k| k.task().to_string()))
        .collect()];
    for stage in &record.stages {
        let mut row = vec![stage.stage.clone()];
        for &k in &kinds {
            row.push(match stage.get(k) {
                Some(m) => format!("{:.2}/{:.4}", m.psnr, m.ssim),
                None => "-".to_string(),
            });
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Paths of the files [`write_report`] produces.
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub metrics: PathBuf,
    pub table: PathBuf,
    pub timings: PathBuf,
}

pub fn write_report(record: &RunRecord, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    let files = ReportFiles {
        metrics: dir.join("metrics.json"),
        table: dir.join("table.txt"),
        timings: dir.join("timings.json"),
    };
    write_file(&files.metrics, record.to_json()?.as_bytes())?;
    write_file(&files.table, render_table(record).as_bytes())?;
    write_file(&files.timings, record.timings_json()?.as_bytes())?;
    Ok(files)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<RunRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunRecord::from_json(&text)
}

fn to_rgb8(img: &Tensor, out: &mut image::RgbImage, x0: u32) {
    let [_, h, w] = *img.shape() else { return };
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|c| {
                (img.values()[c * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            out.put_pixel(x0 + x as u32, y as u32, image::Rgb(px));
        }
    }
}

/// Writes `degraded | restored | clean` strips for up to `limit` pairs of
/// each kind into `dir`, named `<kind>-<index>.png`.
pub fn write_triplets(
    dir: impl AsRef<Path>,
    model: &RestorationModel,
    pairs: &[DegradedPair],
    limit: usize,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for kind in DegradationKind::ALL {
        for pair in pairs.iter().filter(|p| p.kind == kind).take(limit) {
            let [_, h, w] = *pair.clean.shape() else {
                return Err(Error::InvalidShape {
                    op: "write_triplets",
                    reason: format!("expected a 3xHxW image, got {:?}", pair.clean.shape()),
                });
            };
            let restored = model.restore(&pair.degraded)?;
            let mut strip = image::RgbImage::new(3 * w as u32, h as u32);
            for (i, img) in [&pair.degraded, &restored, &pair.clean].into_iter().enumerate() {
                to_rgb8(img, &mut strip, (i * w) as u32);
            }
            let path = dir.join(format!("{kind}-{}.png", pair.index));
            strip
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{build_corpus, CorpusConfig, DegradationParams};
    use crate::metrics::KindMetrics;

    fn model() -> RestorationModel {
        let mut m = RestorationModel::new(ModelConfig {
            width: 8,
            depth: 3,
            seed: 3,
        })
        .unwrap();
        // make the zero-initialized output layer non-trivial
        for (i, v) in m.params_mut().last().unwrap().values_mut().iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 1.0 / 3.0;
        }
        m
    }

    fn bits(m: &RestorationModel) -> Vec<u64> {
        m.params().flat_map(|t| t.values().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt-before.bin");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn optimizer_state_and_metadata_survive() {
        let mut opt = Adam::new(OptimizerConfig::default()).unwrap();
        opt.restore_state(vec![vec![0.5, -1.0]], vec![vec![0.25, 1e-300]], 7).unwrap();
        let ckpt = Checkpoint::new(model())
            .with_optimizer(opt)
            .with_meta("stage", "BEFORE");
        let back = Checkpoint::from_bytes(&ckpt.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corrupted_payload_fails_digest() {
        let mut bytes = Checkpoint::new(model()).to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Digest { .. }), "{err}");
    }

    #[test]
    fn bumped_version_is_reported_as_such() {
        let mut bytes = Checkpoint::new(model()).to_bytes();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(
            matches!(err, Error::Version { found, .. } if found == FORMAT_VERSION + 1),
            "{err}"
        );
    }

    #[test]
    fn truncation_is_reported_as_such() {
        let bytes = Checkpoint::new(model()).to_bytes();
        for cut in [3, 15, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Truncated { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn foreign_files_are_rejected() {
        let err = Checkpoint::from_bytes(b"not a checkpoint at all", Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        let corpus = corpus_to_bytes(&[]);
        assert!(matches!(
            Checkpoint::from_bytes(&corpus, Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_checkpoint("/nonexistent/forgetir/ckpt").unwrap_err();
        assert!(err.is_io());
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn corpus_round_trip() {
        let cfg = CorpusConfig {
            per_kind: 2,
            height: 16,
            width: 16,
            seed: 8,
        };
        let pairs = build_corpus(&cfg, &DegradationParams::default()).unwrap();
        let back = corpus_from_bytes(&corpus_to_bytes(&pairs), Path::new("c")).unwrap();
        assert_eq!(back, pairs);
    }

    fn record() -> RunRecord {
        let report = |stage: &str, base: f64| MetricReport {
            stage: stage.into(),
            kinds: DegradationKind::ALL
                .iter()
                .enumerate()
                .map(|(i, &kind)| KindMetrics {
                    kind,
                    psnr: base + i as f64 + 0.123456,
                    ssim: 0.9 - 0.01 * i as f64,
                    count: 30,
                })
                .collect(),
        };
        let mut r = RunRecord::new("t", serde_json::json!({"unlearn": {"w_adv": 1.0}}));
        r.seeds.insert("corpus".into(), 1);
        r.stages = vec![report("BEFORE", 28.0), report("AFTER", 11.0)];
        r.timings.push(("unlearn".into(), 12.5));
        r
    }

    #[test]
    fn table_shape_and_cell_format() {
        let table = render_table(&record());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Stage"));
        for task in ["Dehazing", "Deraining", "Denoising"] {
            assert!(lines[0].contains(task));
        }
        assert!(lines[1].contains("28.12/0.9000"), "{}", lines[1]);
        assert!(lines[2].contains("13.12/0.8800"), "{}", lines[2]);
    }

    #[test]
    fn report_json_is_canonical() {
        let r = record();
        let text = r.to_json().unwrap();
        assert!(!text.contains("12.5"), "timings leaked into metrics");
        let parsed = RunRecord::from_json(&text).unwrap();
        assert_eq!(parsed.to_json().unwrap(), text);
        assert_eq!(parsed.stages, r.stages);
    }

    #[test]
    fn report_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_report(&record(), dir.path().join("run")).unwrap();
        let back = read_report(&files.metrics).unwrap();
        assert_eq!(back.stages.len(), 2);
        assert!(fs::read_to_string(&files.timings).unwrap().contains("12.5"));
    }

    #[test]
    fn triplets_are_three_images_wide() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            per_kind: 2,
            height: 16,
            width: 20,
            seed: 1,
        };
        let pairs = build_corpus(&cfg, &DegradationParams::default()).unwrap();
        let written = write_triplets(dir.path(), &model(), &pairs, 1).unwrap();
        assert_eq!(written.len(), 3);
        let img = image::open(&written[0]).unwrap();
        assert_eq!((img.width(), img.height()), (60, 16));
    }
}
