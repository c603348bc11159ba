//! Named parameter storage with gradient accumulators and Adam moments, plus
//! the `DVXS` binary container used by checkpoints.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::array::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVXS";
pub const FORMAT_VERSION: u32 = 1;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, PartialEq)]
struct Entry {
    name: String,
    value: Array,
    grad: Array,
    m: Array,
    v: Array,
}

/// Named parameters. Every entry carries its value, gradient accumulator and
/// the two Adam moment buffers, all of identical shape.
#[derive(Debug)]
pub struct ParamSet {
    uid: u64,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    /// Adam step counter.
    pub(crate) step: u64,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    grad: e.grad.clone(),
                    m: e.m.clone(),
                    v: e.v.clone(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.step == other.step
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            entries: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    /// Identity used by the tape to route gradients back to this set.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, value: Array) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        let shape = value.shape().to_vec();
        self.entries.push(Entry {
            name: name.to_string(),
            grad: Array::zeros(&shape),
            m: Array::zeros(&shape),
            v: Array::zeros(&shape),
            value,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    /// He-normal weight of shape `shape` with the given fan-in.
    pub fn add_he<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let std = (2.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
        self.add(name, Array::new(shape, data).expect("valid shape"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.add(name, Array::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.grad.norm_sq()).sum::<f64>().sqrt()
    }

    /// True when every gradient accumulator is exactly zero.
    pub fn grads_are_zero(&self) -> bool {
        self.entries.iter().all(|e| e.grad.data().iter().all(|&g| g == 0.0))
    }

    pub(crate) fn moments_mut(&mut self, id: ParamId) -> (&mut Array, &Array, &mut Array, &mut Array) {
        let e = &mut self.entries[id.0];
        (&mut e.value, &e.grad, &mut e.m, &mut e.v)
    }

    pub(crate) fn moments(&self, id: ParamId) -> (&Array, &Array) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    pub(crate) fn set_moments(&mut self, id: ParamId, m: Array, v: Array) -> Result<()> {
        let e = &mut self.entries[id.0];
        if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
            return Err(Error::Format(format!("moment shape mismatch for `{}`", e.name)));
        }
        e.m = m;
        e.v = v;
        Ok(())
    }

    /// Copies values (not optimizer state) from `other`, matching by name and shape.
    pub fn load_values_from(&mut self, other: &[(String, Array)]) -> Result<()> {
        for (name, arr) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            if self.value(id).shape() != arr.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_values_from",
                    left: self.value(id).shape().to_vec(),
                    right: arr.shape().to_vec(),
                });
            }
            *self.value_mut(id) = arr.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_values(&self) -> Vec<(String, Array)> {
        self.entries.iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }

    /// Writes the parameter values as a `DVXS` container.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_container(w, &self.named_values())
    }
}

/// Writes `entries` as a `DVXS` container: magic, version, count, then per
/// entry the name, rank, dims and little-endian `f32` payload.
pub fn write_container<W: Write>(w: &mut W, entries: &[(String, Array)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, arr) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(arr.len() * 4);
        for v in arr.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("truncated container while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a `DVXS` container written by [`write_container`].
pub fn read_container<R: Read>(r: &mut R) -> Result<Vec<(String, Array)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated container: missing magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = read_u32(r, "entry count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(r, "name length")? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Format("truncated container while reading name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = read_u32(r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("entry `{name}` has invalid rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r, "dimension")? as usize);
        }
        let n: usize = dims.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload)
            .map_err(|_| Error::Format(format!("truncated payload for `{name}`")))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Array::new(&dims, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("enc.w", Array::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap());
        ps.add("enc.b", Array::full(&[3], 0.01));
        ps
    }

    #[test]
    fn container_roundtrip_is_bit_exact() {
        let ps = sample_set();
        let mut buf = Vec::new();
        ps.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DVXS");
        let back = read_container(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ps.named_values());
        let mut buf2 = Vec::new();
        write_container(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let mut buf = Vec::new();
        sample_set().write_to(&mut buf).unwrap();
        for cut in [2, 9, 20, buf.len() - 1] {
            assert!(read_container(&mut &buf[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut ver = buf;
        ver[4] = 9;
        assert!(read_container(&mut ver.as_slice()).is_err());
    }

    #[test]
    fn clone_gets_fresh_identity() {
        let ps = sample_set();
        let c = ps.clone();
        assert_ne!(ps.uid(), c.uid());
        assert_eq!(ps, c);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut ps = sample_set();
        ps.add("enc.b", Array::zeros(&[1]));
    }
}
