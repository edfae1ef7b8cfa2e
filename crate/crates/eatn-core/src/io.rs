//! File formats: `.eatn` checkpoints, `.atnm` attention-map exports, and
//! `.pgm` heatmap renderings.
//!
//! All multi-byte integers are little-endian and all payloads are float32,
//! so files round-trip identically across platforms. Model compute stays in
//! the scalar type `S`; the float32 quantization on disk is the only loss.
//!
//! ## `.eatn` checkpoint layout
//! ```text
//! magic "EATN" | version u16 | body | crc32(body) u32
//! body = tensor count u32, then per tensor (canonical traversal order):
//!        name len u32 | name UTF-8 | rank u32 | dims u32 × rank | f32 × numel
//! ```
//!
//! ## `.atnm` attention-map layout
//! ```text
//! magic "ATNM" | version u16 | N_q u32 | N_k u32 | K_heads u32
//! | layer u32 | stage u8 | f32 × (N_q · N_k · K_heads)
//! ```
//! The payload is row-major `[i, j, h]` (query row, key column, head) — the
//! same layout the in-memory attention image uses. `layer` is the flat
//! trace index: encoder blocks in order, then per decoder block its self
//! then cross attention, so the index is unique even when one decoder layer
//! contributes two maps.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{AttnSite, Model, ModelSpec, TraceVars};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EATN";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const ATTN_MAGIC: [u8; 4] = *b"ATNM";
pub const ATTN_VERSION: u16 = 1;

// ---- CRC32 ----

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320), the checksum used
/// by zip/png. Bitwise implementation; files here are small.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

// ---- byte cursor ----

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} truncated at byte {} (wanted {} more)",
                self.what, self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

// ---- checkpoints ----

/// Serializes every named tensor (canonical order, float32 payloads).
pub fn checkpoint_bytes<S: Scalar>(model: &Model<S>) -> Vec<u8> {
    let mut body = Vec::new();
    let mut count = 0u32;
    model.visit_tensors(&mut |_, _| count += 1);
    push_u32(&mut body, count);
    model.visit_tensors(&mut |name, t| {
        push_u32(&mut body, name.len() as u32);
        body.extend_from_slice(name.as_bytes());
        push_u32(&mut body, t.shape().len() as u32);
        for &d in t.shape() {
            push_u32(&mut body, d as u32);
        }
        for &x in t.data() {
            body.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
        }
    });
    let mut out = Vec::with_capacity(4 + 2 + body.len() + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let crc = crc32(&body);
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Rebuilds a model for `spec` from checkpoint bytes.
///
/// Structure, magic, and CRC failures are corruption errors; a tensor-name
/// set that does not exactly match the spec's architecture is a
/// configuration error listing the offending names. Nothing is returned
/// unless every tensor loads, so there is no partial model.
pub fn checkpoint_from_bytes<S: Scalar>(spec: &ModelSpec, bytes: &[u8]) -> Result<Model<S>> {
    if bytes.len() < 10 {
        return Err(Error::Corrupt(format!("checkpoint is only {} bytes", bytes.len())));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("bad checkpoint magic (expected \"EATN\")".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint version {} (expected {})",
            version, CHECKPOINT_VERSION
        )));
    }
    let body = &bytes[6..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Corrupt(format!(
            "checkpoint CRC mismatch: stored {:08x}, computed {:08x}",
            stored, computed
        )));
    }

    let mut r = Reader::new(body, "checkpoint");
    let count = r.u32()? as usize;
    let mut table: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let data = r.f32s(numel)?;
        if table.iter().any(|(n, _, _)| *n == name) {
            return Err(Error::Corrupt(format!("duplicate tensor name {:?}", name)));
        }
        table.push((name, dims, data));
    }
    if !r.done() {
        return Err(Error::Corrupt("trailing bytes after tensor table".into()));
    }

    // Seed value is irrelevant: every tensor is overwritten or we error.
    let mut model: Model<S> = Model::init(spec.clone(), 0)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut used = vec![false; table.len()];
    model.visit_tensors_mut(&mut |name, t| {
        match table.iter().position(|(n, _, _)| n == name) {
            None => missing.push(name.to_string()),
            Some(i) => {
                used[i] = true;
                let (_, dims, data) = &table[i];
                if dims != t.shape() {
                    mismatched.push(format!("{} (file {:?}, model {:?})", name, dims, t.shape()));
                } else {
                    for (dst, src) in t.data_mut().iter_mut().zip(data) {
                        *dst = S::from_f64(*src as f64);
                    }
                }
            }
        }
    });
    let unknown: Vec<&str> = table
        .iter()
        .zip(&used)
        .filter(|(_, u)| !**u)
        .map(|((n, _, _), _)| n.as_str())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() || !mismatched.is_empty() {
        let mut parts = Vec::new();
        if !unknown.is_empty() {
            parts.push(format!("unknown tensor names {:?}", unknown));
        }
        if !missing.is_empty() {
            parts.push(format!("missing tensor names {:?}", missing));
        }
        if !mismatched.is_empty() {
            parts.push(format!("shape mismatches [{}]", mismatched.join(", ")));
        }
        return Err(Error::Config(format!(
            "checkpoint does not fit the configured architecture: {}",
            parts.join("; ")
        )));
    }
    Ok(model)
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(spec: &ModelSpec, path: &Path) -> Result<Model<S>> {
    checkpoint_from_bytes(spec, &fs::read(path)?)
}

// ---- attention maps ----

/// Which stage of Eq. 4 a map snapshots: the masked blend fed to the
/// convolution, the raw blended refinement, or the final normalized rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    PreConv,
    PostConv,
    PostSoftmax,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PreConv, Stage::PostConv, Stage::PostSoftmax];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::PreConv => "pre_conv",
            Stage::PostConv => "post_conv",
            Stage::PostSoftmax => "post_softmax",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Stage::PreConv => 0,
            Stage::PostConv => 1,
            Stage::PostSoftmax => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Stage::PreConv),
            1 => Ok(Stage::PostConv),
            2 => Ok(Stage::PostSoftmax),
            _ => Err(Error::Corrupt(format!("unknown stage tag {}", code))),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|s| s.tag() == tag)
            .ok_or_else(|| Error::Input(format!("unknown stage {:?}", tag)))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One exported attention image (all heads of one layer at one stage).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMapFile {
    pub n_q: u32,
    pub n_k: u32,
    pub k_heads: u32,
    /// Flat trace index (see module docs), unique per file set.
    pub layer: u32,
    pub stage: Stage,
    /// Row-major `[i, j, h]`, length `n_q * n_k * k_heads`.
    pub data: Vec<f32>,
}

impl AttnMapFile {
    pub fn file_name(&self) -> String {
        format!("layer{}_{}.atnm", self.layer, self.stage.tag())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 2 + 4 * 4 + 1 + 4 * self.data.len());
        out.extend_from_slice(&ATTN_MAGIC);
        out.extend_from_slice(&ATTN_VERSION.to_le_bytes());
        push_u32(&mut out, self.n_q);
        push_u32(&mut out, self.n_k);
        push_u32(&mut out, self.k_heads);
        push_u32(&mut out, self.layer);
        out.push(self.stage.code());
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "attention map");
        if r.take(4)? != ATTN_MAGIC {
            return Err(Error::Corrupt("bad attention-map magic (expected \"ATNM\")".into()));
        }
        let version = r.u16()?;
        if version != ATTN_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported attention-map version {} (expected {})",
                version, ATTN_VERSION
            )));
        }
        let n_q = r.u32()?;
        let n_k = r.u32()?;
        let k_heads = r.u32()?;
        let layer = r.u32()?;
        let stage = Stage::from_code(r.u8()?)?;
        let data = r.f32s((n_q * n_k * k_heads) as usize)?;
        if !r.done() {
            return Err(Error::Corrupt("trailing bytes after attention payload".into()));
        }
        Ok(Self { n_q, n_k, k_heads, layer, stage, data })
    }

    /// Sum over key columns for each (query row, head) pair; post-softmax
    /// maps must give 1 per unmasked row (masked entries are stored as 0).
    pub fn row_sums(&self) -> Vec<f64> {
        let (n_q, n_k, k) = (self.n_q as usize, self.n_k as usize, self.k_heads as usize);
        let mut sums = vec![0.0f64; n_q * k];
        for i in 0..n_q {
            for j in 0..n_k {
                for h in 0..k {
                    sums[i * k + h] += self.data[(i * n_k + j) * k + h] as f64;
                }
            }
        }
        sums
    }

    /// Extracts one head's `[n_q, n_k]` slice.
    pub fn head_slice(&self, head: usize) -> Result<Vec<f32>> {
        let k = self.k_heads as usize;
        if head >= k {
            return Err(Error::Input(format!("head {} out of range (K = {})", head, k)));
        }
        let (n_q, n_k) = (self.n_q as usize, self.n_k as usize);
        let mut out = Vec::with_capacity(n_q * n_k);
        for i in 0..n_q {
            for j in 0..n_k {
                out.push(self.data[(i * n_k + j) * k + head]);
            }
        }
        Ok(out)
    }
}

/// One attention instance's recorded stages, pulled off the tape as plain
/// tensors (shape `[n_q, n_k, K]` each).
#[derive(Clone, Debug)]
pub struct TraceEntry<S: Scalar = f64> {
    /// Flat position in the forward trace; the exported `layer` field.
    pub index: usize,
    /// Block index within its stack.
    pub layer: usize,
    pub site: AttnSite,
    pub pre_conv: Tensor<S>,
    pub post_conv: Tensor<S>,
    pub post_softmax: Tensor<S>,
}

/// Materializes the trace captured by a forward pass.
pub fn trace_entries<S: Scalar>(tape: &Tape<S>, trace: &[TraceVars]) -> Vec<TraceEntry<S>> {
    trace
        .iter()
        .enumerate()
        .map(|(index, t)| TraceEntry {
            index,
            layer: t.layer,
            site: t.site,
            pre_conv: tape.value(t.stages.pre_conv).clone(),
            post_conv: tape.value(t.stages.post_conv).clone(),
            post_softmax: tape.value(t.stages.post_softmax).clone(),
        })
        .collect()
}

/// Builds one `AttnMapFile` per (trace entry, stage), optionally filtered by
/// flat layer index and/or stage.
pub fn export_attention<S: Scalar>(
    entries: &[TraceEntry<S>],
    layer: Option<usize>,
    stage: Option<Stage>,
) -> Result<Vec<AttnMapFile>> {
    if entries.is_empty() {
        return Err(Error::Contract("attention export needs a non-empty trace".into()));
    }
    let mut out = Vec::new();
    for e in entries {
        if layer.is_some_and(|l| l != e.index) {
            continue;
        }
        let shape = e.pre_conv.shape();
        let (n_q, n_k, k) = (shape[0] as u32, shape[1] as u32, shape[2] as u32);
        for s in Stage::ALL {
            if stage.is_some_and(|want| want != s) {
                continue;
            }
            let t = match s {
                Stage::PreConv => &e.pre_conv,
                Stage::PostConv => &e.post_conv,
                Stage::PostSoftmax => &e.post_softmax,
            };
            out.push(AttnMapFile {
                n_q,
                n_k,
                k_heads: k,
                layer: e.index as u32,
                stage: s,
                data: t.data().iter().map(|&x| x.to_f64() as f32).collect(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!(
            "no attention maps match layer {:?} stage {:?} ({} trace entries)",
            layer,
            stage.map(|s| s.tag()),
            entries.len()
        )));
    }
    Ok(out)
}

/// Writes each map as `dir/layer{idx}_{stage}.atnm`; returns the paths.
pub fn write_attention_files(maps: &[AttnMapFile], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(maps.len());
    for m in maps {
        let path = dir.join(m.file_name());
        fs::write(&path, m.to_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

// ---- heatmaps ----

/// Renders one head as an 8-bit binary PGM (P5), min-max normalized over
/// that head's map; a constant map renders mid-gray (128).
pub fn render_heatmap(map: &AttnMapFile, head: usize) -> Result<Vec<u8>> {
    let slice = map.head_slice(head)?;
    let (w, h) = (map.n_k, map.n_q);
    let mut out = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    let min = slice.iter().copied().fold(f32::INFINITY, f32::min);
    let max = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = (max - min) as f64;
    for &v in &slice {
        let px = if range <= 0.0 || !range.is_finite() {
            128u8
        } else {
            (((v - min) as f64 / range) * 255.0).round() as u8
        };
        out.push(px);
    }
    Ok(out)
}

/// Writes `dir/layer{idx}_{stage}_head{h}.pgm`.
pub fn write_heatmap(map: &AttnMapFile, head: usize, dir: &Path) -> Result<PathBuf> {
    let bytes = render_heatmap(map, head)?;
    fs::create_dir_all(dir)?;
    let path = dir.join(format!(
        "layer{}_{}_head{}.pgm",
        map.layer,
        map.stage.tag(),
        head
    ));
    fs::write(&path, bytes)?;
    Ok(path)
}
