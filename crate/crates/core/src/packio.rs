//! Binary containers: `MPQ1` packed quantized models and `MPC1` 32-bit
//! float checkpoints. All integers little-endian; both end in a CRC32 of
//! every preceding byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{cluster_layout, ModelKind, ModelSpec, TieGranularity};
use crate::quant::{self, PrecisionAssignment, QuantizedCluster};
use crate::tensor::{ParamVector, Tensor};

pub const PACKED_MAGIC: [u8; 4] = *b"MPQ1";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MPC1";
pub const FORMAT_VERSION: u16 = 1;

const SPEC_BYTES: usize = 1 + 4 * 7 + 1;

/// Bytes of an MPQ1 file outside the cluster records.
pub const PACKED_FIXED_BYTES: usize = 4 + 2 + SPEC_BYTES + 8 + 4 + 4;

/// Record bytes of one cluster excluding its packed codes.
pub fn cluster_record_bytes(id: &str) -> usize {
    2 + id.len() + 1 + 4 + 8
}

/// A model whose every cluster is stored as codes and a scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub spec: ModelSpec,
    pub vocab_hash: u64,
    pub clusters: Vec<QuantizedCluster>,
}

impl QuantizedModel {
    pub fn new(spec: ModelSpec, vocab_hash: u64, clusters: Vec<QuantizedCluster>) -> Result<Self> {
        spec.validate()?;
        let layout = cluster_layout(&spec);
        if layout.len() != clusters.len() {
            return Err(Error::config(format!(
                "model has {} clusters, layout expects {}",
                clusters.len(),
                layout.len()
            )));
        }
        for (c, w) in clusters.iter().zip(&layout.clusters) {
            if c.cluster_id != w.id || c.codes.len() != w.count() {
                return Err(Error::config(format!(
                    "cluster {} ({} codes) does not match layout cluster {} ({})",
                    c.cluster_id,
                    c.codes.len(),
                    w.id,
                    w.count()
                )));
            }
        }
        Ok(QuantizedModel { spec, vocab_hash, clusters })
    }

    pub fn assignment(&self) -> PrecisionAssignment {
        PrecisionAssignment { entries: self.clusters.iter().map(|c| (c.cluster_id.clone(), c.bits)).collect() }
    }

    /// Dequantized weights `scale * code` in model parameter order.
    pub fn to_params(&self) -> Result<ParamVector> {
        let layout = cluster_layout(&self.spec);
        let mut params = ParamVector::new(
            self.spec.param_shapes().into_iter().map(|(n, [r, c])| (n, Tensor::zeros(&[r, c]))).collect(),
        )?;
        for (q, w) in self.clusters.iter().zip(&layout.clusters) {
            w.slice_mut(&mut params).copy_from_slice(&q.dequantize());
        }
        Ok(params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&PACKED_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_spec(&mut out, &self.spec)?;
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&u32::try_from(self.clusters.len()).map_err(|_| Error::config("too many clusters"))?.to_le_bytes());
        for c in &self.clusters {
            write_str(&mut out, &c.cluster_id)?;
            out.push(c.bits);
            out.extend_from_slice(&c.scale.to_le_bytes());
            out.extend_from_slice(&(c.codes.len() as u64).to_le_bytes());
            out.extend_from_slice(&quant::pack_codes(&c.codes, c.bits)?);
        }
        finish_crc(&mut out);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, PACKED_MAGIC)?;
        let spec = read_spec(&mut r)?;
        let vocab_hash = r.u64("vocab hash")?;
        let n = r.u32("cluster count")? as usize;
        let mut clusters = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id = r.string("cluster id")?;
            let bits = r.u8("bit-width")?;
            quant::check_bits(bits).map_err(|_| Error::Format(format!("cluster {id}: bit-width {bits}")))?;
            let scale = f32::from_le_bytes(r.array("scale")?);
            let count = usize::try_from(r.u64("code count")?).map_err(|_| Error::Format("code count overflow".into()))?;
            let len = (bits as usize).checked_mul(count).ok_or_else(|| Error::Format("code count overflow".into()))?.div_ceil(8);
            let codes = quant::unpack_codes(r.take(len, "packed codes")?, bits, count)?;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Format(format!("cluster {id}: invalid scale {scale}")));
            }
            clusters.push(QuantizedCluster { cluster_id: id, bits, scale, codes });
        }
        r.finish()?;
        QuantizedModel::new(spec, vocab_hash, clusters).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        QuantizedModel::from_bytes(&fs::read(path)?)
    }
}

/// Full-precision weights stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub vocab_hash: u64,
    pub params: ParamVector,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.spec.check_params(&self.params)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_spec(&mut out, &self.spec)?;
        out.extend_from_slice(&self.vocab_hash.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.entries() {
            write_str(&mut out, name)?;
            let (r, c) = t.rows_cols();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        finish_crc(&mut out);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
        let spec = read_spec(&mut r)?;
        let vocab_hash = r.u64("vocab hash")?;
        let n = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string("tensor name")?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let raw = r.take(rows.checked_mul(cols).and_then(|x| x.checked_mul(4)).ok_or_else(|| Error::Format("tensor size overflow".into()))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            entries.push((name, Tensor::new(vec![rows, cols], data).map_err(|e| Error::Format(e.to_string()))?));
        }
        r.finish()?;
        let params = ParamVector::new(entries).map_err(|e| Error::Format(e.to_string()))?;
        spec.check_params(&params).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint { spec, vocab_hash, params })
    }

    pub fn save(&self, path: &Path) -> Result<usize> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Rounds every weight through `f32`, matching what a checkpoint stores.
pub fn round_to_f32(params: &ParamVector) -> ParamVector {
    let mut p = params.clone();
    for i in 0..p.len() {
        for x in p.tensor_mut(i).data_mut() {
            *x = *x as f32 as f64;
        }
    }
    p
}

fn finish_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::config(format!("name too long: {s}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn write_spec(out: &mut Vec<u8>, spec: &ModelSpec) -> Result<()> {
    out.push(match spec.kind {
        ModelKind::Lstm => 0,
        ModelKind::Transformer => 1,
    });
    for v in [
        spec.vocab_size,
        spec.embed_dim,
        spec.hidden_dim,
        spec.num_layers,
        spec.num_heads,
        spec.max_context,
        spec.ff_dim,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::config("model dimension exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(match spec.tie_granularity {
        TieGranularity::Layer => 0,
        TieGranularity::Node => 1,
    });
    Ok(())
}

fn read_spec(r: &mut Reader) -> Result<ModelSpec> {
    let kind = match r.u8("model kind")? {
        0 => ModelKind::Lstm,
        1 => ModelKind::Transformer,
        k => return Err(Error::Format(format!("unknown model kind {k}"))),
    };
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32("model dimension")? as usize;
    }
    let tie_granularity = match r.u8("tie granularity")? {
        0 => TieGranularity::Layer,
        1 => TieGranularity::Node,
        t => return Err(Error::Format(format!("unknown tie granularity {t}"))),
    };
    let [vocab_size, embed_dim, hidden_dim, num_layers, num_heads, max_context, ff_dim] = dims;
    let spec = ModelSpec {
        kind,
        vocab_size,
        embed_dim,
        hidden_dim,
        num_layers,
        num_heads,
        max_context,
        ff_dim,
        tie_granularity,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(spec)
}

/// Cursor over a CRC-verified body.
struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("missing magic".into()));
        }
        let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if found != magic {
            return Err(Error::BadMagic(found));
        }
        if bytes.len() < PACKED_FIXED_BYTES {
            return Err(Error::Truncated(format!("{} bytes is shorter than any header", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let computed = crc32fast::hash(body);
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(Reader { body, pos: 6 })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.body.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.array(what)?) as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.body.len() - self.pos)));
        }
        Ok(())
    }
}
