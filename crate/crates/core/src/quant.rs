//! Symmetric quantization tables, nearest-code mapping, scale fitting,
//! the bit-level code codec and precision assignments.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClusterLayout;
use crate::packio;

/// Candidate bit-widths searched by the mixed precision methods.
pub const BIT_WIDTHS: [u8; 4] = [1, 2, 4, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if BIT_WIDTHS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!("unsupported bit-width {bits} (1, 2, 4 or 8)")))
    }
}

/// Largest code magnitude: 1 for binary tables, `2^(n-1) - 1` otherwise.
pub fn max_code(bits: u8) -> i8 {
    if bits == 1 {
        1
    } else {
        ((1i32 << (bits - 1)) - 1) as i8
    }
}

/// Codebook `{alpha * V}`: `{-1, +1}` for one bit, `{0, ±1, …, ±(2^(n-1)-1)}` otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantTable {
    pub bits: u8,
    pub scale: f64,
}

impl QuantTable {
    pub fn new(bits: u8, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(QuantTable { bits, scale })
    }

    /// Integer codes in ascending order.
    pub fn codes(&self) -> Vec<i8> {
        let m = max_code(self.bits);
        if self.bits == 1 {
            vec![-1, 1]
        } else {
            (-m..=m).collect()
        }
    }

    pub fn size(&self) -> usize {
        if self.bits == 1 {
            2
        } else {
            2 * max_code(self.bits) as usize + 1
        }
    }
}

#[inline]
fn better(cand: i8, d: f64, best: i8, best_d: f64) -> bool {
    d < best_d
        || (d == best_d && ((cand.unsigned_abs() < best.unsigned_abs()) || (cand.unsigned_abs() == best.unsigned_abs() && cand < best)))
}

/// Code minimizing `|theta - scale * V|`; ties go to the smaller `|V|`, then the negative code.
#[inline]
pub fn nearest_code(theta: f64, table: &QuantTable) -> i8 {
    let a = table.scale;
    if table.bits == 1 {
        let (dn, dp) = ((theta + a).abs(), (theta - a).abs());
        return if dp < dn { 1 } else { -1 };
    }
    let m = max_code(table.bits) as f64;
    let base = (theta / a).floor().clamp(-m - 2.0, m + 2.0) as i32;
    let mut best = 0i8;
    let mut best_d = f64::INFINITY;
    for c in base - 1..=base + 2 {
        let c = c.clamp(-(m as i32), m as i32) as i8;
        let d = (theta - a * c as f64).abs();
        if better(c, d, best, best_d) {
            best = c;
            best_d = d;
        }
    }
    best
}

pub fn quantize_nearest(values: &[f64], table: &QuantTable) -> Result<Vec<i8>> {
    if !(table.scale > 0.0) {
        return Err(Error::config("quantize_nearest needs a positive scale"));
    }
    values
        .iter()
        .map(|&v| {
            if v.is_finite() {
                Ok(nearest_code(v, table))
            } else {
                Err(Error::numeric("quantize_nearest", format!("input {v}")))
            }
        })
        .collect()
}

/// Least-squares scale for fixed codes: `x·V / V·V`.
pub fn fit_scale(values: &[f64], codes: &[i8]) -> Result<f64> {
    if values.len() != codes.len() {
        return Err(Error::config("fit_scale: length mismatch"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &v) in values.iter().zip(codes) {
        let v = v as f64;
        num += x * v;
        den += v * v;
    }
    if den == 0.0 {
        return Err(Error::DegenerateCodes);
    }
    Ok(num / den)
}

pub fn dequantize(codes: &[i8], scale: f64) -> Vec<f64> {
    codes.iter().map(|&c| scale * c as f64).collect()
}

/// `‖x - scale·V‖²`.
pub fn quant_error(values: &[f64], codes: &[i8], scale: f64) -> f64 {
    values.iter().zip(codes).map(|(x, &c)| (x - scale * c as f64).powi(2)).sum()
}

pub fn packed_len(bits: u8, count: usize) -> usize {
    (bits as usize * count).div_ceil(8)
}

/// Packs codes: 1 bit → set bit means +1; 2/4 bits → offset-binary fields
/// filled from the least significant bits; 8 bits → one signed byte each.
pub fn pack_codes(codes: &[i8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let m = max_code(bits);
    let mut out = vec![0u8; packed_len(bits, codes.len())];
    for (i, &c) in codes.iter().enumerate() {
        let field = match bits {
            1 => match c {
                1 => 1u8,
                -1 => 0u8,
                _ => return Err(Error::config(format!("code {c} invalid for 1-bit table"))),
            },
            8 => {
                if c < -m {
                    return Err(Error::config(format!("code {c} out of range for 8 bits")));
                }
                c as u8
            }
            _ => {
                if c < -m || c > m {
                    return Err(Error::config(format!("code {c} out of range for {bits} bits")));
                }
                (c + m) as u8
            }
        };
        let bit = i * bits as usize;
        out[bit / 8] |= field << (bit % 8);
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<i8>> {
    check_bits(bits)?;
    let need = packed_len(bits, count);
    if bytes.len() != need {
        return Err(Error::Format(format!("{count} {bits}-bit codes need {need} bytes, got {}", bytes.len())));
    }
    let m = max_code(bits);
    let mask = if bits == 8 { 0xff } else { (1u8 << bits) - 1 };
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let bit = i * bits as usize;
        let field = (bytes[bit / 8] >> (bit % 8)) & mask;
        let code = match bits {
            1 => {
                if field == 1 {
                    1
                } else {
                    -1
                }
            }
            8 => field as i8,
            _ => field as i8 - m,
        };
        if code < -m || code > m {
            return Err(Error::Format(format!("decoded code {code} out of range for {bits} bits")));
        }
        out.push(code);
    }
    let used = count * bits as usize;
    if used % 8 != 0 && bytes[used / 8] >> (used % 8) != 0 {
        return Err(Error::Format("non-zero padding bits".into()));
    }
    Ok(out)
}

/// Codes and table of one cluster. The scale is kept as `f32` because that
/// is what the packed file stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedCluster {
    pub cluster_id: String,
    pub bits: u8,
    pub scale: f32,
    pub codes: Vec<i8>,
}

impl QuantizedCluster {
    pub fn new(cluster_id: impl Into<String>, bits: u8, scale: f64, codes: Vec<i8>) -> Result<Self> {
        check_bits(bits)?;
        let m = max_code(bits);
        if codes.iter().any(|&c| c < -m || c > m || (bits == 1 && c == 0)) {
            return Err(Error::config(format!("codes out of range for {bits} bits")));
        }
        let scale = scale as f32;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::config("cluster scale must be positive"));
        }
        Ok(QuantizedCluster { cluster_id: cluster_id.into(), bits, scale, codes })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        dequantize(&self.codes, self.scale as f64)
    }
}

/// Bit-width per cluster, in layout order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionAssignment {
    pub entries: Vec<(String, u8)>,
}

impl PrecisionAssignment {
    pub fn uniform(layout: &ClusterLayout, bits: u8) -> Self {
        PrecisionAssignment { entries: layout.clusters.iter().map(|c| (c.id.clone(), bits)).collect() }
    }

    pub fn from_bits(layout: &ClusterLayout, bits: &[u8]) -> Result<Self> {
        if bits.len() != layout.len() {
            return Err(Error::config("assignment length does not match layout"));
        }
        let a = PrecisionAssignment {
            entries: layout.clusters.iter().zip(bits).map(|(c, &b)| (c.id.clone(), b)).collect(),
        };
        a.validate(layout)?;
        Ok(a)
    }

    /// Every cluster present exactly once, in layout order, with a supported width.
    pub fn validate(&self, layout: &ClusterLayout) -> Result<()> {
        if self.entries.len() != layout.len() {
            return Err(Error::config(format!(
                "assignment covers {} clusters, layout has {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for ((id, bits), c) in self.entries.iter().zip(&layout.clusters) {
            if *id != c.id {
                return Err(Error::config(format!("assignment lists {id} where layout has {}", c.id)));
            }
            check_bits(*bits)?;
        }
        Ok(())
    }

    pub fn bits(&self) -> Vec<u8> {
        self.entries.iter().map(|(_, b)| *b).collect()
    }

    pub fn get(&self, id: &str) -> Option<u8> {
        self.entries.iter().find(|(c, _)| c == id).map(|(_, b)| *b)
    }

    /// Parameter-count weighted mean bit-width.
    pub fn avg_bits(&self, layout: &ClusterLayout) -> f64 {
        let total: usize = layout.total_count();
        let weighted: usize = self
            .entries
            .iter()
            .zip(&layout.clusters)
            .map(|((_, b), c)| *b as usize * c.count())
            .sum();
        weighted as f64 / total as f64
    }

    /// `cluster_id<TAB>bits` lines followed by summary comments.
    pub fn to_text(&self, layout: &ClusterLayout) -> String {
        let mut s = String::new();
        for (id, b) in &self.entries {
            let _ = writeln!(s, "{id}\t{b}");
        }
        let size = model_size_bytes(self, layout);
        let _ = writeln!(s, "# avg_bits={:.6}", self.avg_bits(layout));
        let _ = writeln!(s, "# compression_ratio={:.6}", size.compression_ratio());
        s
    }

    /// Parses assignment text and reorders it to `layout`.
    pub fn from_text(text: &str, layout: &ClusterLayout) -> Result<Self> {
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, bits) = line
                .split_once('\t')
                .ok_or_else(|| Error::config(format!("assignment line {}: expected cluster<TAB>bits", n + 1)))?;
            let bits: u8 = bits
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("assignment line {}: bad bit-width {bits:?}", n + 1)))?;
            if map.insert(id.to_string(), bits).is_some() {
                return Err(Error::config(format!("cluster {id} assigned twice")));
            }
        }
        if map.len() != layout.len() {
            return Err(Error::config(format!("assignment has {} clusters, layout {}", map.len(), layout.len())));
        }
        let entries = layout
            .clusters
            .iter()
            .map(|c| {
                map.get(&c.id)
                    .map(|&b| (c.id.clone(), b))
                    .ok_or_else(|| Error::config(format!("cluster {} missing from assignment", c.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let a = PrecisionAssignment { entries };
        a.validate(layout)?;
        Ok(a)
    }
}

/// Byte accounting of a packed model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    /// Packed code bytes only.
    pub payload_bytes: usize,
    /// Complete container size including headers, scales and checksum.
    pub total_bytes: usize,
    /// Size of the same parameters stored as 32-bit floats.
    pub float32_bytes: usize,
}

impl SizeReport {
    pub fn compression_ratio(&self) -> f64 {
        self.float32_bytes as f64 / self.total_bytes as f64
    }

    pub fn payload_ratio(&self) -> f64 {
        self.float32_bytes as f64 / self.payload_bytes as f64
    }
}

/// Exact size of the packed container for `assignment`.
pub fn model_size_bytes(assignment: &PrecisionAssignment, layout: &ClusterLayout) -> SizeReport {
    let mut payload = 0;
    let mut total = packio::PACKED_FIXED_BYTES;
    for ((id, bits), c) in assignment.entries.iter().zip(&layout.clusters) {
        let p = packed_len(*bits, c.count());
        payload += p;
        total += packio::cluster_record_bytes(id) + p;
    }
    SizeReport { payload_bytes: payload, total_bytes: total, float32_bytes: 4 * layout.total_count() }
}
