//! Single-file model container with individually checksummed sections.
//!
//! Layout is documented in `docs/format.md`. Every section can be read on its
//! own, so the gate or one forest can be loaded without touching the rest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::descriptor::{DenseSiftConfig, DescriptorConfig, FisherEncoder, GmmModel, PcaModel};
use crate::error::{Error, Result};
use crate::forest::{EdgeForest, FeatureLayout, ForestConfig, Node, Tree, TreeConfig, FEATURE_LAYOUT_VERSION};
use crate::fusion::SituationModel;
use crate::gating::{GatingModel, LinearModel, SelectedHyper};
use crate::situations::{Situation, SituationKind, SituationPartition};

pub const MAGIC: &[u8; 8] = b"SOBDMODL";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, version, section count.
pub const HEADER_LEN: u64 = 16;
/// Tag, payload length, CRC-32.
pub const SECTION_HEADER_LEN: u64 = 16;

pub const TAG_META: [u8; 4] = *b"META";
pub const TAG_SIFT: [u8; 4] = *b"SIFT";
pub const TAG_PCA: [u8; 4] = *b"PCA ";
pub const TAG_GMM: [u8; 4] = *b"GMM ";
pub const TAG_PART: [u8; 4] = *b"PART";
pub const TAG_GATE: [u8; 4] = *b"GATE";
pub const TAG_FRST: [u8; 4] = *b"FRST";

const NO_CLASS: u32 = u32::MAX;

/// How far along the pipeline a container is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Descriptor encoder only.
    Encoder,
    /// Situations defined, nothing trained on them yet.
    Situations,
    /// Gate trained, no forests.
    Gate,
    /// Forests trained, no gate.
    Forests,
    /// Ready for prediction.
    Complete,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Encoder => "encoder",
            Stage::Situations => "situations",
            Stage::Gate => "gate",
            Stage::Forests => "forests",
            Stage::Complete => "complete",
        })
    }
}

/// JSON metadata stored in the `META` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub stage: Stage,
    pub producer: String,
    pub descriptor: Option<DescriptorConfig>,
    pub descriptor_dim: usize,
    pub partition_kind: Option<SituationKind>,
    pub k: usize,
    pub feature_layout_version: u32,
    /// Seed used by each stochastic stage, keyed by stage name.
    pub seeds: BTreeMap<String, u64>,
    /// Free-form creation parameters (budgets, grids, corpus paths).
    pub params: BTreeMap<String, serde_json::Value>,
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self {
            stage: Stage::Encoder,
            producer: concat!("sitedge ", env!("CARGO_PKG_VERSION")).to_string(),
            descriptor: None,
            descriptor_dim: 0,
            partition_kind: None,
            k: 0,
            feature_layout_version: FEATURE_LAYOUT_VERSION,
            seeds: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub meta: ModelMeta,
    pub encoder: Option<FisherEncoder>,
    pub partition: Option<SituationPartition>,
    pub gate: Option<GatingModel>,
    /// Empty, or one forest per situation in id order.
    pub forests: Vec<EdgeForest>,
}

impl ModelContainer {
    pub fn new(meta: ModelMeta) -> Self {
        Self {
            meta,
            encoder: None,
            partition: None,
            gate: None,
            forests: Vec::new(),
        }
    }

    pub fn from_model(model: SituationModel, meta: ModelMeta) -> Self {
        Self {
            meta,
            encoder: model.encoder,
            partition: Some(model.partition),
            gate: Some(model.gate),
            forests: model.forests,
        }
    }

    /// Stage implied by which sections are present.
    pub fn stage(&self) -> Stage {
        match (&self.partition, &self.gate, self.forests.is_empty()) {
            (None, _, _) => Stage::Encoder,
            (Some(_), None, true) => Stage::Situations,
            (Some(_), Some(_), true) => Stage::Gate,
            (Some(_), None, false) => Stage::Forests,
            (Some(_), Some(_), false) => Stage::Complete,
        }
    }

    /// Checks that the present sections agree with each other.
    pub fn validate(&self) -> Result<()> {
        let incomplete = |m: String| Err(Error::Container(format!("incomplete container: {m}")));
        let Some(part) = &self.partition else {
            if self.gate.is_some() || !self.forests.is_empty() {
                return incomplete("gate or forests without a situation partition".into());
            }
            if self.encoder.is_none() {
                return incomplete("no sections".into());
            }
            return Ok(());
        };
        let k = part.k();
        if k == 0 {
            return incomplete("partition has no situations".into());
        }
        for (i, s) in part.situations.iter().enumerate() {
            if s.id != i {
                return Err(Error::Container(format!("situation at position {i} has id {}", s.id)));
            }
        }
        if let Some(g) = &self.gate {
            if g.k() != k {
                return Err(Error::Container(format!("{k} situations but {} gate models", g.k())));
            }
            if k > 1 {
                match &self.encoder {
                    None => return incomplete("a learned gate needs the descriptor encoder".into()),
                    Some(e) => {
                        let dim = crate::descriptor::GlobalFeatures::dim(e);
                        if dim != g.dim() {
                            return Err(Error::dims(g.dim(), dim));
                        }
                    }
                }
            }
        }
        if !self.forests.is_empty() && self.forests.len() != k {
            return incomplete(format!("{k} situations but {} forests", self.forests.len()));
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<SituationModel> {
        self.validate()?;
        if self.stage() != Stage::Complete {
            return Err(Error::Container(format!(
                "container is at stage `{}`, prediction needs `complete`",
                self.stage()
            )));
        }
        let model = SituationModel {
            encoder: self.encoder,
            partition: self.partition.expect("complete"),
            gate: self.gate.expect("complete"),
            forests: self.forests,
        };
        model.validate()?;
        Ok(model)
    }

    /// Metadata with the derived fields refreshed from the sections.
    fn synced_meta(&self) -> ModelMeta {
        let mut m = self.meta.clone();
        m.stage = self.stage();
        m.k = self.partition.as_ref().map_or(0, SituationPartition::k);
        m.partition_kind = self.partition.as_ref().map(|p| p.kind);
        m.descriptor_dim = self
            .encoder
            .as_ref()
            .map_or(0, crate::descriptor::GlobalFeatures::dim);
        m.feature_layout_version = FEATURE_LAYOUT_VERSION;
        m
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![(TAG_META, serde_json::to_vec_pretty(&self.synced_meta())?)];
        if let Some(e) = &self.encoder {
            sections.push((TAG_SIFT, encode_sift(&e.config)));
            sections.push((TAG_PCA, encode_pca(&e.pca)));
            sections.push((TAG_GMM, encode_gmm(&e.gmm)));
        }
        if let Some(p) = &self.partition {
            sections.push((TAG_PART, encode_partition(p)));
        }
        if let Some(g) = &self.gate {
            sections.push((TAG_GATE, encode_gate(g)));
        }
        let forests: Vec<Vec<u8>> = self
            .forests
            .par_iter()
            .enumerate()
            .map(|(j, f)| encode_forest(j, f))
            .collect();
        sections.extend(forests.into_iter().map(|b| (TAG_FRST, b)));

        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(sections.len() as u32);
        for (tag, payload) in &sections {
            w.bytes(tag);
            w.u64(payload.len() as u64);
            w.u32(crc32fast::hash(payload));
            w.bytes(payload);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let table = read_table(&mut Cursor::new(bytes), bytes.len() as u64)?;
        let sections = table
            .iter()
            .map(|s| {
                let payload = &bytes[s.offset as usize..(s.offset + s.len) as usize];
                s.verify(payload)?;
                Ok((s.clone(), payload.to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        assemble(sections)
    }

    /// Atomic write: a temporary file in the target directory is renamed over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ContainerReader::open(path)?.load_all()
    }
}

/// Writes `bytes` to a sibling temporary file, syncs it, and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionInfo {
    pub tag: [u8; 4],
    /// Byte offset of the payload.
    pub offset: u64,
    pub len: u64,
    pub crc: u32,
}

impl SectionInfo {
    pub fn name(&self) -> String {
        String::from_utf8_lossy(&self.tag).trim_end().to_string()
    }

    fn verify(&self, payload: &[u8]) -> Result<()> {
        let got = crc32fast::hash(payload);
        if got != self.crc {
            return Err(Error::Checksum {
                section: self.name(),
                detail: format!(": stored {:08x}, computed {got:08x}", self.crc),
            });
        }
        Ok(())
    }
}

fn read_table<R: Read + Seek>(r: &mut R, file_len: u64) -> Result<Vec<SectionInfo>> {
    let mut head = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut head)
        .map_err(|_| Error::Container(format!("file is {file_len} bytes, shorter than the header")))?;
    if &head[..8] != MAGIC {
        return Err(Error::Container("not a model container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = u32::from_le_bytes(head[12..16].try_into().expect("4 bytes"));
    let mut pos = HEADER_LEN;
    let mut table = Vec::with_capacity(count as usize);
    for i in 0..count {
        let truncated = |section: String| Error::Checksum {
            section,
            detail: format!(": file truncated at byte {file_len}"),
        };
        if pos + SECTION_HEADER_LEN > file_len {
            return Err(truncated(format!("#{i}")));
        }
        let mut sh = [0u8; SECTION_HEADER_LEN as usize];
        r.seek(SeekFrom::Start(pos)).map_err(|e| Error::Container(e.to_string()))?;
        r.read_exact(&mut sh).map_err(|_| truncated(format!("#{i}")))?;
        let info = SectionInfo {
            tag: sh[..4].try_into().expect("4 bytes"),
            offset: pos + SECTION_HEADER_LEN,
            len: u64::from_le_bytes(sh[4..12].try_into().expect("8 bytes")),
            crc: u32::from_le_bytes(sh[12..16].try_into().expect("4 bytes")),
        };
        let end = info.offset.checked_add(info.len).ok_or_else(|| truncated(info.name()))?;
        if end > file_len {
            return Err(truncated(info.name()));
        }
        pos = end;
        table.push(info);
    }
    if pos != file_len {
        return Err(Error::Container(format!("{} trailing bytes after the last section", file_len - pos)));
    }
    Ok(table)
}

/// Random-access view of a container file; each read opens its own handle,
/// so sections can be loaded concurrently.
#[derive(Clone, Debug)]
pub struct ContainerReader {
    path: PathBuf,
    sections: Vec<SectionInfo>,
}

impl ContainerReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.is_file() {
            return Err(Error::MissingFile(path));
        }
        let mut f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = f.metadata().map_err(|e| Error::io(&path, e))?.len();
        let sections = read_table(&mut f, len)?;
        Ok(Self { path, sections })
    }

    pub fn sections(&self) -> &[SectionInfo] {
        &self.sections
    }

    fn payload(&self, s: &SectionInfo) -> Result<Vec<u8>> {
        let mut f = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        f.seek(SeekFrom::Start(s.offset)).map_err(|e| Error::io(&self.path, e))?;
        let mut buf = vec![0u8; s.len as usize];
        f.read_exact(&mut buf).map_err(|e| Error::io(&self.path, e))?;
        s.verify(&buf)?;
        Ok(buf)
    }

    fn find(&self, tag: [u8; 4]) -> Option<&SectionInfo> {
        self.sections.iter().find(|s| s.tag == tag)
    }

    fn required(&self, tag: [u8; 4]) -> Result<Vec<u8>> {
        let s = self
            .find(tag)
            .ok_or_else(|| Error::MissingSection(String::from_utf8_lossy(&tag).trim_end().to_string()))?;
        self.payload(s)
    }

    pub fn meta(&self) -> Result<ModelMeta> {
        Ok(serde_json::from_slice(&self.required(TAG_META)?)?)
    }

    pub fn encoder(&self) -> Result<Option<FisherEncoder>> {
        if self.find(TAG_PCA).is_none() {
            return Ok(None);
        }
        Ok(Some(FisherEncoder {
            config: decode_sift(&self.required(TAG_SIFT)?)?,
            pca: decode_pca(&self.required(TAG_PCA)?)?,
            gmm: decode_gmm(&self.required(TAG_GMM)?)?,
        }))
    }

    pub fn partition(&self) -> Result<SituationPartition> {
        decode_partition(&self.required(TAG_PART)?)
    }

    pub fn gate(&self) -> Result<GatingModel> {
        decode_gate(&self.required(TAG_GATE)?)
    }

    pub fn forest_count(&self) -> usize {
        self.sections.iter().filter(|s| s.tag == TAG_FRST).count()
    }

    /// Loads the forest of situation `j` alone.
    pub fn forest(&self, j: usize) -> Result<EdgeForest> {
        let s = self
            .sections
            .iter()
            .filter(|s| s.tag == TAG_FRST)
            .nth(j)
            .ok_or_else(|| Error::MissingSection(format!("FRST #{j}")))?;
        let (idx, f) = decode_forest(&self.payload(s)?)?;
        if idx != j {
            return Err(Error::Container(format!("forest section #{j} holds situation {idx}")));
        }
        Ok(f)
    }

    /// Loads every forest in parallel.
    pub fn forests(&self) -> Result<Vec<EdgeForest>> {
        (0..self.forest_count()).into_par_iter().map(|j| self.forest(j)).collect()
    }

    pub fn load_all(&self) -> Result<ModelContainer> {
        let sections = self
            .sections
            .par_iter()
            .map(|s| Ok((s.clone(), self.payload(s)?)))
            .collect::<Result<Vec<_>>>()?;
        assemble(sections)
    }
}

fn assemble(sections: Vec<(SectionInfo, Vec<u8>)>) -> Result<ModelContainer> {
    let mut meta = None;
    let mut sift = None;
    let mut pca = None;
    let mut gmm = None;
    let mut partition = None;
    let mut gate = None;
    let mut forest_payloads = Vec::new();
    for (s, p) in sections {
        let dup = |name: String| Err(Error::Container(format!("duplicate section `{name}`")));
        match s.tag {
            TAG_META if meta.is_some() => return dup(s.name()),
            TAG_META => meta = Some(serde_json::from_slice::<ModelMeta>(&p)?),
            TAG_SIFT if sift.is_some() => return dup(s.name()),
            TAG_SIFT => sift = Some(decode_sift(&p)?),
            TAG_PCA if pca.is_some() => return dup(s.name()),
            TAG_PCA => pca = Some(decode_pca(&p)?),
            TAG_GMM if gmm.is_some() => return dup(s.name()),
            TAG_GMM => gmm = Some(decode_gmm(&p)?),
            TAG_PART if partition.is_some() => return dup(s.name()),
            TAG_PART => partition = Some(decode_partition(&p)?),
            TAG_GATE if gate.is_some() => return dup(s.name()),
            TAG_GATE => gate = Some(decode_gate(&p)?),
            TAG_FRST => forest_payloads.push(p),
            _ => return Err(Error::Container(format!("unknown section `{}`", s.name()))),
        }
    }
    let meta = meta.ok_or_else(|| Error::MissingSection("META".into()))?;
    let encoder = match (sift, pca, gmm) {
        (Some(config), Some(pca), Some(gmm)) => Some(FisherEncoder { config, pca, gmm }),
        (None, None, None) => None,
        _ => return Err(Error::Container("encoder needs SIFT, PCA and GMM sections together".into())),
    };
    let forests = forest_payloads
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let (idx, f) = decode_forest(p)?;
            if idx != j {
                return Err(Error::Container(format!("forest section #{j} holds situation {idx}")));
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = ModelContainer {
        meta,
        encoder,
        partition,
        gate,
        forests,
    };
    c.validate()?;
    if c.meta.stage != c.stage() {
        return Err(Error::Container(format!(
            "metadata declares stage `{}` but sections make it `{}`",
            c.meta.stage,
            c.stage()
        )));
    }
    Ok(c)
}

fn encode_sift(c: &DenseSiftConfig) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(c.stride as u32);
    w.u32(c.patch as u32);
    w.u32(c.cells as u32);
    w.u32(c.bins as u32);
    match c.clamp {
        Some(v) => {
            w.u8(1);
            w.f32(v);
        }
        None => {
            w.u8(0);
            w.f32(0.0);
        }
    }
    w.into_inner()
}

fn decode_sift(b: &[u8]) -> Result<DenseSiftConfig> {
    let mut r = ByteReader::new(b, "SIFT");
    let stride = r.u32()? as usize;
    let patch = r.u32()? as usize;
    let cells = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let has = r.u8()?;
    let v = r.f32()?;
    r.finish()?;
    let c = DenseSiftConfig {
        stride,
        patch,
        cells,
        bins,
        clamp: (has != 0).then_some(v),
    };
    c.validate()?;
    Ok(c)
}

fn encode_pca(p: &PcaModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(p.input_dim() as u64);
    w.u64(p.output_dim() as u64);
    w.f64(p.total_variance);
    for &v in p.mean.iter().chain(&p.eigenvalues).chain(&p.basis) {
        w.f64(v);
    }
    w.into_inner()
}

fn read_n(r: &mut ByteReader, n: usize) -> Result<Vec<f64>> {
    if n.saturating_mul(8) > r.remaining() {
        return Err(Error::Container("array length exceeds section".into()));
    }
    (0..n).map(|_| r.f64()).collect()
}

fn decode_pca(b: &[u8]) -> Result<PcaModel> {
    let mut r = ByteReader::new(b, "PCA");
    let input = r.u64()? as usize;
    let output = r.u64()? as usize;
    let total_variance = r.f64()?;
    let mean = read_n(&mut r, input)?;
    let eigenvalues = read_n(&mut r, output)?;
    let basis = read_n(&mut r, input.saturating_mul(output))?;
    r.finish()?;
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        total_variance,
    })
}

fn encode_gmm(g: &GmmModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(g.components() as u64);
    w.u64(g.dim() as u64);
    for &v in g.weights.iter().chain(&g.means).chain(&g.variances) {
        w.f64(v);
    }
    w.into_inner()
}

fn decode_gmm(b: &[u8]) -> Result<GmmModel> {
    let mut r = ByteReader::new(b, "GMM");
    let k = r.u64()? as usize;
    let d = r.u64()? as usize;
    let weights = read_n(&mut r, k)?;
    let means = read_n(&mut r, k.saturating_mul(d))?;
    let variances = read_n(&mut r, k.saturating_mul(d))?;
    r.finish()?;
    Ok(GmmModel {
        weights,
        means,
        variances,
    })
}

fn kind_code(k: SituationKind) -> u8 {
    match k {
        SituationKind::Monolithic => 0,
        SituationKind::Class => 1,
        SituationKind::Subclass => 2,
        SituationKind::Agnostic => 3,
    }
}

fn kind_from(c: u8) -> Result<SituationKind> {
    Ok(match c {
        0 => SituationKind::Monolithic,
        1 => SituationKind::Class,
        2 => SituationKind::Subclass,
        3 => SituationKind::Agnostic,
        other => return Err(Error::Container(format!("PART: unknown situation kind code {other}"))),
    })
}

fn encode_partition(p: &SituationPartition) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u8(kind_code(p.kind));
    w.u32(p.k() as u32);
    for s in &p.situations {
        w.u32(s.id as u32);
        w.u8(kind_code(s.kind));
        w.u32(s.class_id.unwrap_or(NO_CLASS));
        w.u32(s.members.len() as u32);
        for &m in &s.members {
            w.u32(m as u32);
        }
        match &s.centroid {
            Some(c) => {
                w.u8(1);
                w.f64s(c);
            }
            None => w.u8(0),
        }
    }
    w.into_inner()
}

fn decode_partition(b: &[u8]) -> Result<SituationPartition> {
    let mut r = ByteReader::new(b, "PART");
    let kind = kind_from(r.u8()?)?;
    let k = r.u32()? as usize;
    let mut situations = Vec::new();
    for _ in 0..k {
        let id = r.u32()? as usize;
        let skind = kind_from(r.u8()?)?;
        let class = r.u32()?;
        let n = r.u32()? as usize;
        if n.saturating_mul(4) > r.remaining() {
            return Err(Error::Container("PART: member count exceeds section".into()));
        }
        let members = (0..n).map(|_| r.u32().map(|m| m as usize)).collect::<Result<Vec<_>>>()?;
        let centroid = match r.u8()? {
            0 => None,
            1 => Some(r.f64s()?),
            other => return Err(Error::Container(format!("PART: bad centroid flag {other}"))),
        };
        situations.push(Situation {
            id,
            kind: skind,
            class_id: (class != NO_CLASS).then_some(class),
            members,
            centroid,
        });
    }
    r.finish()?;
    Ok(SituationPartition { kind, situations })
}

fn encode_gate(g: &GatingModel) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(g.k() as u32);
    w.u64(g.dim() as u64);
    w.f64(g.temperature);
    for (m, h) in g.models.iter().zip(&g.hyper) {
        w.f64(m.bias);
        w.f64(h.lambda);
        w.f64(h.pos_freq);
        w.f64(h.cv_ap);
        for &v in &m.weights {
            w.f64(v);
        }
    }
    w.into_inner()
}

fn decode_gate(b: &[u8]) -> Result<GatingModel> {
    let mut r = ByteReader::new(b, "GATE");
    let k = r.u32()? as usize;
    let dim = r.u64()? as usize;
    let temperature = r.f64()?;
    let mut models = Vec::new();
    let mut hyper = Vec::new();
    for _ in 0..k {
        let bias = r.f64()?;
        let h = SelectedHyper {
            lambda: r.f64()?,
            pos_freq: r.f64()?,
            cv_ap: r.f64()?,
        };
        models.push(LinearModel {
            weights: read_n(&mut r, dim)?,
            bias,
        });
        hyper.push(h);
    }
    r.finish()?;
    Ok(GatingModel {
        models,
        temperature,
        hyper,
    })
}

fn encode_forest(j: usize, f: &EdgeForest) -> Vec<u8> {
    let c = &f.config;
    let mut w = ByteWriter::new();
    w.u32(j as u32);
    w.u32(FEATURE_LAYOUT_VERSION);
    w.u32(c.tree.max_depth as u32);
    w.u32(c.tree.min_leaf as u32);
    w.u32(c.tree.features_per_node as u32);
    w.u64(c.budget as u64);
    w.u32(c.stride as u32);
    w.u32(c.shrink as u32);
    w.u64(c.seed);
    w.u32(f.trees.len() as u32);
    for t in &f.trees {
        w.u32(t.nodes.len() as u32);
        for n in &t.nodes {
            match n {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    gain,
                } => {
                    w.u8(0);
                    w.u32(*feature);
                    w.f32(*threshold);
                    w.u32(*left);
                    w.u32(*right);
                    w.f64(*gain);
                }
                Node::Leaf { mask, count } => {
                    w.u8(1);
                    for &m in mask {
                        w.u64(m);
                    }
                    w.u32(*count);
                }
            }
        }
    }
    w.into_inner()
}

fn decode_forest(b: &[u8]) -> Result<(usize, EdgeForest)> {
    let mut r = ByteReader::new(b, "FRST");
    let j = r.u32()? as usize;
    let layout = r.u32()?;
    if layout != FEATURE_LAYOUT_VERSION {
        return Err(Error::Container(format!(
            "forest {j} uses feature layout {layout}, this build computes layout {FEATURE_LAYOUT_VERSION}"
        )));
    }
    let tree = TreeConfig {
        max_depth: r.u32()? as usize,
        min_leaf: r.u32()? as usize,
        features_per_node: r.u32()? as usize,
    };
    let budget = r.u64()? as usize;
    let stride = r.u32()? as usize;
    let shrink = r.u32()? as usize;
    let seed = r.u64()?;
    let n_trees = r.u32()? as usize;
    let config = ForestConfig {
        trees: n_trees,
        tree,
        budget,
        stride,
        shrink,
        seed,
    };
    config.validate()?;
    let n_features = FeatureLayout::new(shrink).len() as u32;
    let mut trees = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let n = r.u32()? as usize;
        if n == 0 || n.saturating_mul(17) > r.remaining() {
            return Err(Error::Container(format!("FRST {j}: tree {t} has a bad node count {n}")));
        }
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let node = match r.u8()? {
                0 => {
                    let feature = r.u32()?;
                    let threshold = r.f32()?;
                    let left = r.u32()?;
                    let right = r.u32()?;
                    let gain = r.f64()?;
                    // Children always follow their parent, which rules out cycles.
                    let ok = |c: u32| (c as usize) > i && (c as usize) < n;
                    if feature >= n_features || !ok(left) || !ok(right) {
                        return Err(Error::Container(format!("FRST {j}: tree {t} node {i} is malformed")));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        gain,
                    }
                }
                1 => {
                    let mut mask = [0u64; 4];
                    for m in &mut mask {
                        *m = r.u64()?;
                    }
                    Node::Leaf { mask, count: r.u32()? }
                }
                other => return Err(Error::Container(format!("FRST {j}: bad node type {other}"))),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
    }
    r.finish()?;
    Ok((j, EdgeForest { config, trees }))
}
