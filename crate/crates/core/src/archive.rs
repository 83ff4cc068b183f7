//! Bit-exact binary archives of ensembles and lifts.
//!
//! Layout, all little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 5 | magic `RSPD1` |
//! | 4 | format version, `u32` |
//! | 24 | header: `n, K, channels, N, M, flags`, each `u32` |
//! | 8·(N+1) | node times, `f64` |
//! | 8·len | payload, `f64`, in `(sample, node, channel, frequency)` order; complex payloads store `(re, im)` |
//! | 8 | FNV-1a 64 checksum of the payload bytes |

use std::hash::Hasher;

use fnv::FnvHasher;

use crate::ensemble::SampleEnsemble;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rough_path::{BrownianMode, LiftEnsemble, LiftKind, RoughPathLift};
use crate::spectral::{FieldShape, C64};

pub const MAGIC: &[u8; 5] = b"RSPD1";
pub const FORMAT_VERSION: u32 = 1;

/// Payload entries are `(re, im)` pairs.
pub const FLAG_COMPLEX: u32 = 1;
/// The ensemble is declared real-valued (Hermitian coefficients).
pub const FLAG_REAL_VALUED: u32 = 1 << 1;
/// The payload is a lift ensemble: per node `X(t_i)` then `𝕏(t_{i-1}, t_i)`.
pub const FLAG_LIFT: u32 = 1 << 2;
pub const FLAG_ADAPTED: u32 = 1 << 3;
/// Bits 8..16 hold the lift kind code.
const KIND_SHIFT: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub dim_n: u32,
    pub trunc_k: u32,
    pub channels: u32,
    pub num_steps: u32,
    pub num_samples: u32,
    pub flags: u32,
}

impl ArchiveHeader {
    fn frequencies(&self) -> usize {
        (2 * self.trunc_k as usize + 1).pow(self.dim_n)
    }

    /// Number of `f64` values in the payload.
    pub fn payload_len(&self) -> usize {
        let per = if self.flags & FLAG_COMPLEX != 0 { 2 } else { 1 };
        self.num_samples as usize * (self.num_steps as usize + 1) * self.channels as usize * self.frequencies() * per
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: ArchiveHeader,
    pub nodes: Vec<f64>,
    pub payload: Vec<f64>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).or_else(|_| format_err(format!("{what} {v} does not fit the archive header")))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

impl Archive {
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.payload.len() * 8);
        self.payload.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        fnv1a(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(41 + 8 * (self.nodes.len() + self.payload.len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [h.dim_n, h.trunc_k, h.channels, h.num_steps, h.num_samples, h.flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        self.nodes.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        let start = out.len();
        self.payload.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        let sum = fnv1a(&out[start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return format_err("bad magic");
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return format_err(format!("unsupported format version {version}"));
        }
        let header = ArchiveHeader {
            dim_n: r.u32()?,
            trunc_k: r.u32()?,
            channels: r.u32()?,
            num_steps: r.u32()?,
            num_samples: r.u32()?,
            flags: r.u32()?,
        };
        let nodes = (0..=header.num_steps).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let start = r.pos;
        let payload = (0..header.payload_len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let sum = fnv1a(&bytes[start..r.pos]);
        let stored = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        if stored != sum {
            return format_err(format!("checksum mismatch: stored {stored:#018x}, computed {sum:#018x}"));
        }
        if r.pos != bytes.len() {
            return format_err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Self { header, nodes, payload })
    }

    pub fn from_ensemble(q: &SampleEnsemble) -> Result<Self> {
        let shape = q.shape();
        let grid = q.grid();
        let mut flags = FLAG_COMPLEX;
        if q.is_real_valued() {
            flags |= FLAG_REAL_VALUED;
        }
        if q.is_adapted() {
            flags |= FLAG_ADAPTED;
        }
        let header = ArchiveHeader {
            dim_n: to_u32(shape.dim_n, "dimension")?,
            trunc_k: to_u32(shape.trunc_k, "truncation")?,
            channels: to_u32(shape.channels, "channel count")?,
            num_steps: to_u32(grid.num_steps(), "step count")?,
            num_samples: to_u32(q.num_samples(), "sample count")?,
            flags,
        };
        let payload = q.data().iter().flat_map(|c| [c.re, c.im]).collect();
        Ok(Self { header, nodes: grid.nodes().to_vec(), payload })
    }

    pub fn to_ensemble(&self) -> Result<SampleEnsemble> {
        let h = &self.header;
        if h.flags & FLAG_LIFT != 0 || h.flags & FLAG_COMPLEX == 0 {
            return format_err("archive does not hold a field ensemble");
        }
        let shape = FieldShape::new(h.dim_n as usize, h.trunc_k as usize, h.channels as usize)?;
        let grid = TimeGrid::window(self.nodes.clone())?;
        let data = self.payload.chunks_exact(2).map(|p| C64::new(p[0], p[1])).collect();
        let q = SampleEnsemble::from_data(shape, &grid, h.num_samples as usize, h.flags & FLAG_REAL_VALUED != 0, data)?;
        Ok(q.adapted(h.flags & FLAG_ADAPTED != 0))
    }

    pub fn from_lifts(lifts: &LiftEnsemble) -> Result<Self> {
        let grid = lifts.grid();
        let e = lifts.dim_e();
        let kind = kind_code(lifts.get(0).kind());
        let header = ArchiveHeader {
            dim_n: 0,
            trunc_k: 0,
            channels: to_u32(e + e * e, "channel count")?,
            num_steps: to_u32(grid.num_steps(), "step count")?,
            num_samples: to_u32(lifts.len(), "sample count")?,
            flags: FLAG_LIFT | (kind << KIND_SHIFT),
        };
        let mut payload = Vec::with_capacity(header.payload_len());
        for lift in lifts.members() {
            for i in 0..grid.num_nodes() {
                payload.extend_from_slice(lift.x(i));
                if i == 0 {
                    payload.extend(std::iter::repeat_n(0.0, e * e));
                } else {
                    payload.extend_from_slice(lift.xx_step(i - 1));
                }
            }
        }
        Ok(Self { header, nodes: grid.nodes().to_vec(), payload })
    }

    /// Rebuilds the lift ensemble; seeds are not archived, so sampled kinds
    /// come back as custom lifts with the same martingale property.
    pub fn to_lifts(&self) -> Result<LiftEnsemble> {
        let h = &self.header;
        if h.flags & FLAG_LIFT == 0 {
            return format_err("archive does not hold a lift ensemble");
        }
        let c = h.channels as usize;
        let e = (((4 * c + 1) as f64).sqrt() as usize - 1) / 2;
        if e == 0 || e + e * e != c {
            return format_err(format!("{c} channels do not describe a lift"));
        }
        let kind = kind_from_code((h.flags >> KIND_SHIFT) & 0xff)?;
        let grid = TimeGrid::window(self.nodes.clone())?;
        let nodes = grid.num_nodes();
        let members = self
            .payload
            .chunks_exact(nodes * c)
            .map(|block| {
                let mut x = Vec::with_capacity(nodes * e);
                let mut xx = Vec::with_capacity((nodes - 1) * e * e);
                for (i, row) in block.chunks_exact(c).enumerate() {
                    x.extend_from_slice(&row[..e]);
                    if i > 0 {
                        xx.extend_from_slice(&row[e..]);
                    }
                }
                RoughPathLift::new(grid.clone(), e, x, xx, kind)
            })
            .collect::<Result<Vec<_>>>()?;
        LiftEnsemble::from_members(members)
    }
}

fn kind_code(kind: LiftKind) -> u32 {
    match kind {
        LiftKind::Smooth => 0,
        LiftKind::Brownian { mode: BrownianMode::Ito, .. } => 1,
        LiftKind::Brownian { mode: BrownianMode::Strat, .. } => 2,
        LiftKind::Fbm { .. } => 3,
        LiftKind::Custom => 4,
    }
}

fn kind_from_code(code: u32) -> Result<LiftKind> {
    Ok(match code {
        0 => LiftKind::Smooth,
        1 => LiftKind::Brownian { mode: BrownianMode::Ito, master_seed: 0, fine_factor: 0 },
        2..=4 => LiftKind::Custom,
        _ => return format_err(format!("unknown lift kind code {code}")),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!("truncated archive at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
