//! Weight-evolution history: full parameter snapshots at selected steps.
//!
//! On-disk layout (`.whst`, little-endian):
//!
//! ```text
//! "WHST" | version u16
//! metadata: spec_hash u64 | param_count u64 | step_count u64 | seed u64 |
//!           stride u64 | optimizer_len u32 | optimizer utf-8 |
//!           required_count u64 | required steps u64... | crc32(metadata) u32
//! records:  (step u64 | crc32(step ++ payload) u32 | payload f32 x param_count)*
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WHST";
pub const VERSION: u16 = 1;

/// `floor(num * t / den)` without floating point.
pub fn frac_step(t: u64, num: u64, den: u64) -> u64 {
    t * num / den
}

/// `floor(k * t)`, tolerant of representation error in `k`.
pub fn scaled_step(t: u64, k: f64) -> u64 {
    (k * t as f64 + 1e-9).floor() as u64
}

/// History steps feeding a forecast made at `t`, most recent first:
/// `[t, floor(0.7t), floor(0.4t), 0]`.
pub fn input_steps(t: u64) -> [u64; 4] {
    [t, frac_step(t, 7, 10), frac_step(t, 4, 10), 0]
}

/// Candidate forecast steps used when building introspection training data:
/// every multiple of `every` in `[t_min, t_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildRange {
    pub t_min: u64,
    pub t_max: u64,
    pub every: u64,
    pub k: f64,
}

impl BuildRange {
    pub fn candidates(&self) -> impl Iterator<Item = u64> + '_ {
        let every = self.every.max(1);
        let first = self.t_min.div_ceil(every) * every;
        (first..=self.t_max).step_by(every as usize)
    }
}

/// Steps that must be snapshotted exactly during a run.
pub fn required_steps(
    jump_steps: &[u64],
    build: Option<&BuildRange>,
    stride: u64,
    run_length: u64,
) -> Result<BTreeSet<u64>> {
    let mut steps = BTreeSet::from([0]);
    for &t in jump_steps {
        if t > run_length {
            return Err(Error::Range(format!("jump step {t} beyond run length {run_length}")));
        }
        steps.extend(input_steps(t));
    }
    if let Some(b) = build {
        if b.t_min < 1 || b.t_min > b.t_max || b.k <= 1.0 {
            return Err(Error::Range(format!("invalid build range {b:?}")));
        }
        if scaled_step(b.t_max, b.k) > run_length {
            return Err(Error::Range(format!(
                "k * t_max = {} beyond run length {run_length}",
                scaled_step(b.t_max, b.k)
            )));
        }
        for t in b.candidates() {
            steps.extend(input_steps(t));
            steps.insert(scaled_step(t, b.k));
        }
    }
    if stride > 0 {
        steps.extend((0..=run_length).step_by(stride as usize));
    }
    Ok(steps)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub spec_hash: u64,
    pub optimizer: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupMode {
    Exact,
    /// Closest recorded step; ties resolve to the earlier step.
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSeries {
    pub flat_index: usize,
    pub steps: Vec<u64>,
    pub values: Vec<f32>,
}

impl WeightSeries {
    /// Series minus its step-0 value.
    pub fn deviations(&self) -> Vec<f32> {
        let w0 = self.values.first().copied().unwrap_or(0.0);
        self.values.iter().map(|v| v - w0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStore {
    pub meta: RunMeta,
    pub stride: u64,
    required: BTreeSet<u64>,
    param_count: usize,
    snapshots: BTreeMap<u64, Vec<f32>>,
    max_abs: f32,
}

impl SnapshotStore {
    /// Creates a store holding the initialization as the step-0 snapshot.
    pub fn new(meta: RunMeta, initial: &[f32], stride: u64, required: BTreeSet<u64>) -> Self {
        let mut store = SnapshotStore {
            meta,
            stride,
            required,
            param_count: initial.len(),
            snapshots: BTreeMap::new(),
            max_abs: 0.0,
        };
        store.insert(0, initial.to_vec());
        store
    }

    fn insert(&mut self, step: u64, values: Vec<f32>) {
        let m = values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if m.is_finite() {
            self.max_abs = self.max_abs.max(m);
        }
        self.snapshots.insert(step, values);
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn required_steps(&self) -> &BTreeSet<u64> {
        &self.required
    }

    pub fn is_required(&self, step: u64) -> bool {
        self.required.contains(&step)
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.snapshots.keys().copied()
    }

    pub fn contains(&self, step: u64) -> bool {
        self.snapshots.contains_key(&step)
    }

    pub fn last_step(&self) -> u64 {
        *self.snapshots.keys().next_back().expect("step 0 always present")
    }

    /// Largest finite `|w|` over every recorded snapshot.
    pub fn max_abs(&self) -> f32 {
        self.max_abs
    }

    /// Payload bytes this store holds (excluding metadata).
    pub fn payload_bytes(&self) -> u64 {
        estimate_bytes(self.snapshots.len() as u64, self.param_count as u64)
    }

    pub fn record(&mut self, step: u64, params: &[f32]) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::Shape(format!(
                "snapshot has {} scalars, store expects {}",
                params.len(),
                self.param_count
            )));
        }
        if self.snapshots.contains_key(&step) {
            return Err(Error::DuplicateStep(step));
        }
        self.insert(step, params.to_vec());
        Ok(())
    }

    pub fn lookup(&self, step: u64, mode: LookupMode) -> Result<(u64, &[f32])> {
        match mode {
            LookupMode::Exact => self
                .snapshots
                .get(&step)
                .map(|v| (step, v.as_slice()))
                .ok_or(Error::MissingSnapshot(step)),
            LookupMode::Nearest => {
                let below = self.snapshots.range(..=step).next_back();
                let above = self.snapshots.range(step..).next();
                let pick = match (below, above) {
                    (Some(b), Some(a)) => {
                        if step - b.0 <= a.0 - step {
                            b
                        } else {
                            a
                        }
                    }
                    (Some(b), None) => b,
                    (None, Some(a)) => a,
                    (None, None) => return Err(Error::MissingSnapshot(step)),
                };
                Ok((*pick.0, pick.1.as_slice()))
            }
        }
    }

    pub fn exact(&self, step: u64) -> Result<&[f32]> {
        self.lookup(step, LookupMode::Exact).map(|(_, v)| v)
    }

    pub fn weight_series(&self, flat_index: usize) -> Result<WeightSeries> {
        if flat_index >= self.param_count {
            return Err(Error::Index { index: flat_index, len: self.param_count });
        }
        let (steps, values) = self.snapshots.iter().map(|(&s, v)| (s, v[flat_index])).unzip();
        Ok(WeightSeries { flat_index, steps, values })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload_bytes() as usize + 12 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta_start = out.len();
        out.extend_from_slice(&self.meta.spec_hash.to_le_bytes());
        out.extend_from_slice(&(self.param_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.snapshots.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.stride.to_le_bytes());
        out.extend_from_slice(&(self.meta.optimizer.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.optimizer.as_bytes());
        out.extend_from_slice(&(self.required.len() as u64).to_le_bytes());
        for s in &self.required {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[meta_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        for (step, values) in &self.snapshots {
            out.extend_from_slice(&step.to_le_bytes());
            let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            let mut h = crc32fast::Hasher::new();
            h.update(&step.to_le_bytes());
            h.update(&payload);
            out.extend_from_slice(&h.finalize().to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a WHST file (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported WHST version {version}")));
        }
        let meta_start = r.pos;
        let spec_hash = r.u64()?;
        let param_count = usize::try_from(r.u64()?).map_err(|_| Error::Format("param count overflow".into()))?;
        let step_count = r.u64()?;
        let seed = r.u64()?;
        let stride = r.u64()?;
        let opt_len = r.u32()? as usize;
        let optimizer = String::from_utf8(r.take(opt_len)?.to_vec())
            .map_err(|_| Error::Format("optimizer name is not utf-8".into()))?;
        let req_count = r.u64()?;
        if req_count > (bytes.len() as u64) / 8 {
            return Err(Error::Format("required-step count exceeds file size".into()));
        }
        let mut required = BTreeSet::new();
        for _ in 0..req_count {
            required.insert(r.u64()?);
        }
        let meta_crc = crc32fast::hash(&bytes[meta_start..r.pos]);
        if r.u32()? != meta_crc {
            return Err(Error::Format("metadata checksum mismatch".into()));
        }
        let mut snapshots = BTreeMap::new();
        for _ in 0..step_count {
            let step_bytes = r.take(8)?;
            let step = u64::from_le_bytes(step_bytes.try_into().expect("8 bytes"));
            let crc = r.u32()?;
            let payload = r.take(param_count * 4)?;
            let mut h = crc32fast::Hasher::new();
            h.update(step_bytes);
            h.update(payload);
            if h.finalize() != crc {
                return Err(Error::Format(format!("checksum mismatch in snapshot for step {step}")));
            }
            let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if snapshots.insert(step, values).is_some() {
                return Err(Error::Format(format!("duplicate snapshot for step {step}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last snapshot".into()));
        }
        let Some(initial) = snapshots.remove(&0) else {
            return Err(Error::Format("missing step-0 snapshot".into()));
        };
        let mut store = SnapshotStore::new(RunMeta { spec_hash, optimizer, seed }, &initial, stride, required);
        for (step, values) in snapshots {
            store.insert(step, values);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Payload size of `steps` snapshots of `param_count` f32 scalars.
pub fn estimate_bytes(steps: u64, param_count: u64) -> u64 {
    steps * param_count * 4
}

pub const MEMORY_LIMIT: u64 = 1 << 30;

/// Rejects recording plans whose snapshots would not fit in 1 GiB.
pub fn check_memory(steps: u64, param_count: u64) -> Result<u64> {
    let bytes = estimate_bytes(steps, param_count);
    if bytes >= MEMORY_LIMIT {
        return Err(Error::config(
            "history",
            format!("{steps} snapshots x {param_count} params = {bytes} bytes exceeds 1 GiB"),
        ));
    }
    Ok(bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
