//! Little-endian binary files: features (GILF), embeddings (GILE), the replay
//! buffer (GILB) and named model parameters (GILM).
//!
//! Every file starts with a 4-byte ASCII magic and a `u32` version (1),
//! followed by `u32` counts and `f32` payloads. Decoding errors carry the
//! byte offset at which the input stopped making sense.

use std::fs;
use std::path::Path;

use gil_core::data::Dataset;
use gil_core::replay::{ClassRecord, ReplayBuffer};
use gil_core::semantic::{EmbeddingSource, EmbeddingTable};
use gil_core::Tensor;

use crate::error::{CliError, FormatError};

pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.u32(VERSION);
        w
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn f64s(&mut self, v: &[f64]) {
        self.f32s(v.iter().map(|&x| x as f32));
    }
}

fn len_u32(n: usize, what: &str) -> u32 {
    u32::try_from(n).unwrap_or_else(|_| panic!("{what} {n} does not fit the file format"))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::new(0, format!("truncated before the {} magic", String::from_utf8_lossy(magic))));
        }
        if &bytes[..4] != magic {
            return Err(FormatError::new(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..4]), String::from_utf8_lossy(magic)),
            ));
        }
        let mut r = Reader { bytes, pos: 4 };
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::new(at, format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(FormatError::new(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FormatError::new(self.pos, format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        Ok(self.f32s(n, what)?.into_iter().map(f64::from).collect())
    }

    fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.bytes.len() {
            return Err(FormatError::new(self.pos, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

/// GILF: count, dim, then per item a class id and `dim` features. Instance
/// ids are not stored; loading numbers items by position.
pub fn encode_features(data: &Dataset) -> Vec<u8> {
    let mut w = Writer::new(b"GILF");
    w.u32(len_u32(data.len(), "item count"));
    w.u32(len_u32(data.dim(), "dimension"));
    for i in 0..data.len() {
        w.u32(data.class_of(i));
        w.f32s(data.feature(i).iter().copied());
    }
    w.0
}

pub fn decode_features(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::open(bytes, b"GILF")?;
    let n = r.u32("item count")? as usize;
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(FormatError::new(r.pos - 4, "zero feature dimension".into()));
    }
    let mut data = Dataset::new(dim);
    for i in 0..n {
        let class = r.u32("class id")?;
        let f = r.f32s(dim, "feature vector")?;
        data.push(i as u32, class, &f).expect("dimension checked");
    }
    r.finish()?;
    Ok(data)
}

/// GILE: count, dim, then per entry a class id and `dim` values.
pub fn encode_embeddings(table: &EmbeddingTable) -> Vec<u8> {
    let mut w = Writer::new(b"GILE");
    w.u32(len_u32(table.len(), "entry count"));
    w.u32(len_u32(table.dim(), "dimension"));
    for e in table.iter() {
        w.u32(e.class_id);
        w.f64s(&e.vector);
    }
    w.0
}

/// Vectors are rescaled to unit norm; duplicate ids are rejected.
pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingTable, FormatError> {
    let mut r = Reader::open(bytes, b"GILE")?;
    let n = r.u32("entry count")? as usize;
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(FormatError::new(r.pos - 4, "zero embedding dimension".into()));
    }
    let mut table = EmbeddingTable::new(dim);
    for _ in 0..n {
        let at = r.pos;
        let class = r.u32("class id")?;
        let v = r.f64s(dim, "embedding vector")?;
        table.insert(class, &v, EmbeddingSource::Loaded).map_err(|e| FormatError::new(at, e.to_string()))?;
    }
    r.finish()?;
    Ok(table)
}

/// GILB: count, d, s, then per record class id, mu, sigma, embedding. A
/// second section follows with, per record in the same order, its stage and
/// any stored raw instances (`u32` stage, `u32` count, `count x d` values).
pub fn encode_buffer(buffer: &ReplayBuffer) -> Vec<u8> {
    let mut w = Writer::new(b"GILB");
    let records = buffer.records();
    let (d, s) = records.first().map_or((0, 0), |r| (r.dim(), r.embedding.len()));
    w.u32(len_u32(records.len(), "record count"));
    w.u32(len_u32(d, "feature dimension"));
    w.u32(len_u32(s, "semantic dimension"));
    for rec in records {
        w.u32(rec.class_id);
        w.f64s(&rec.prototype);
        w.f64s(&rec.noise);
        w.f64s(&rec.embedding);
    }
    for rec in records {
        w.u32(len_u32(rec.stage, "stage"));
        w.u32(len_u32(rec.instances.len(), "instance count"));
        for inst in &rec.instances {
            w.f64s(inst);
        }
    }
    w.0
}

pub fn decode_buffer(bytes: &[u8]) -> Result<ReplayBuffer, FormatError> {
    let mut r = Reader::open(bytes, b"GILB")?;
    let n = r.u32("record count")? as usize;
    let d = r.u32("feature dimension")? as usize;
    let s = r.u32("semantic dimension")? as usize;
    let mut parts = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let at = r.pos;
        let class = r.u32("class id")?;
        let mu = r.f64s(d, "prototype")?;
        let sigma = r.f64s(d, "noise")?;
        let emb = r.f64s(s, "embedding")?;
        parts.push((at, class, mu, sigma, emb));
    }
    let mut buffer = ReplayBuffer::new();
    for (at, class, mu, sigma, emb) in parts {
        let stage = r.u32("stage")? as usize;
        let count = r.u32("instance count")? as usize;
        let instances = (0..count).map(|_| r.f64s(d, "instance")).collect::<Result<Vec<_>, _>>()?;
        let rec = ClassRecord::new(class, mu, sigma, emb, stage)
            .map_err(|e| FormatError::new(at, e.to_string()))?
            .with_instances(instances);
        buffer.insert(rec).map_err(|e| FormatError::new(at, e.to_string()))?;
    }
    r.finish()?;
    Ok(buffer)
}

/// GILM: count, then per block the name length, UTF-8 name, rank, dims and
/// values.
pub fn encode_models(blocks: &[(String, Tensor)]) -> Vec<u8> {
    let mut w = Writer::new(b"GILM");
    w.u32(len_u32(blocks.len(), "block count"));
    for (name, t) in blocks {
        w.u32(len_u32(name.len(), "name length"));
        w.0.extend_from_slice(name.as_bytes());
        w.u32(len_u32(t.shape().len(), "rank"));
        for &dim in t.shape() {
            w.u32(len_u32(dim, "dimension"));
        }
        w.f64s(t.data());
    }
    w.0
}

pub fn decode_models(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader::open(bytes, b"GILM")?;
    let n = r.u32("block count")? as usize;
    let mut blocks: Vec<(String, Tensor)> = Vec::new();
    for _ in 0..n {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "block name")?)
            .map_err(|_| FormatError::new(at + 4, "block name is not UTF-8".into()))?
            .to_string();
        if blocks.iter().any(|b| b.0 == name) {
            return Err(FormatError::new(at, format!("duplicate block {name:?}")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| FormatError::new(at, format!("block {name:?} is too large")))?;
        let data = r.f64s(count, "block values")?;
        let t = Tensor::new(shape, data).map_err(|e| FormatError::new(at, e.to_string()))?;
        blocks.push((name, t));
    }
    r.finish()?;
    Ok(blocks)
}

pub fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn decode_file<T>(path: &Path, f: fn(&[u8]) -> Result<T, FormatError>) -> Result<T, CliError> {
    f(&read(path)?).map_err(|e| CliError::Format { path: path.to_path_buf(), source: e })
}

pub fn save_features(data: &Dataset, path: &Path) -> Result<(), CliError> {
    write(path, &encode_features(data))
}

pub fn load_features(path: &Path) -> Result<Dataset, CliError> {
    decode_file(path, decode_features)
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<(), CliError> {
    write(path, &encode_embeddings(table))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, CliError> {
    decode_file(path, decode_embeddings)
}

pub fn save_buffer(buffer: &ReplayBuffer, path: &Path) -> Result<(), CliError> {
    write(path, &encode_buffer(buffer))
}

pub fn load_buffer(path: &Path) -> Result<ReplayBuffer, CliError> {
    decode_file(path, decode_buffer)
}

pub fn save_models(blocks: &[(String, Tensor)], path: &Path) -> Result<(), CliError> {
    write(path, &encode_models(blocks))
}

pub fn load_models(path: &Path) -> Result<Vec<(String, Tensor)>, CliError> {
    decode_file(path, decode_models)
}

/// CSV with header `instance_id,class_id,f0,...`.
pub fn features_csv(data: &Dataset, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut header = vec!["instance_id".to_string(), "class_id".to_string()];
    header.extend((0..data.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| CliError::csv(path, e))?;
    for i in 0..data.len() {
        let mut row = vec![data.instance_id(i).to_string(), data.class_of(i).to_string()];
        row.extend(data.feature(i).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Rows of `class_id, v0, v1, ...` without a header.
pub fn embeddings_from_csv(path: &Path) -> Result<EmbeddingTable, CliError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_path(path).map_err(|e| CliError::csv(path, e))?;
    let mut table: Option<EmbeddingTable> = None;
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let bad = |what: String| CliError::Config(format!("{}:{}: {what}", path.display(), line + 1));
        let mut fields = rec.iter();
        let class: u32 = fields.next().unwrap_or("").trim().parse().map_err(|_| bad("bad class id".into()))?;
        let v = fields.map(|f| f.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("bad value".into()))?;
        let t = table.get_or_insert_with(|| EmbeddingTable::new(v.len()));
        t.insert(class, &v, EmbeddingSource::Loaded).map_err(|e| bad(e.to_string()))?;
    }
    table.ok_or_else(|| CliError::Config(format!("{}: no embeddings", path.display())))
}
