//! Preallocated shared-memory arenas of fixed-layout tensors.
//!
//! An arena is created once by the coordinator and imported by any worker of
//! the same run through its [`ShareHandle`]. Producer writes are visible to
//! every importer without copying. The arena itself performs no
//! synchronization; ordering is imposed by the channel slot state machine.
//!
//! Region layout: a 64-byte header (`"PEAR1\0"`, total bytes as u64 LE, slot
//! count as u32 LE) followed by the data area. Slot offsets are relative to
//! the data area and 64-byte aligned.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shm::{self, Region};

pub const ALIGNMENT: usize = 64;
pub const HEADER_BYTES: usize = 64;
const MAGIC: &[u8; 6] = b"PEAR1\0";
const MAX_LABEL_BYTES: usize = 64;
const MAX_RANK: usize = 4;

static COPIES: AtomicU64 = AtomicU64::new(0);

/// Number of `copy_out` calls made by this process.
pub fn copy_count() -> u64 {
    COPIES.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    /// 16-bit float stored and moved as opaque bits.
    F16Raw,
    U8,
    I32,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16Raw => 2,
            DType::U8 => 1,
            DType::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub label: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
}

impl TensorSpec {
    pub fn new(label: impl Into<String>, dtype: DType, dims: &[usize]) -> Result<Self> {
        let spec = TensorSpec {
            label: label.into(),
            dtype,
            dims: dims.to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        validate_label(&self.label)?;
        if self.dims.is_empty() || self.dims.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "{}: rank must be 1..={MAX_RANK}, got {}",
                self.label,
                self.dims.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Shape(format!("{}: zero-sized dim", self.label)));
        }
        Ok(())
    }

    pub fn elements(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn byte_size(&self) -> usize {
        self.elements() * self.dtype.size()
    }

    /// Same dtype and dims, ignoring the label.
    pub fn same_layout(&self, other: &TensorSpec) -> bool {
        self.dtype == other.dtype && self.dims == other.dims
    }
}

/// Labels travel through the textual control protocol and file names, so
/// separator characters are rejected.
pub fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() || label.len() > MAX_LABEL_BYTES {
        return Err(Error::Shape(format!(
            "label must be 1..={MAX_LABEL_BYTES} bytes: {label:?}"
        )));
    }
    if label
        .chars()
        .any(|c| c.is_whitespace() || c.is_control() || "|,/@:=".contains(c))
    {
        return Err(Error::Shape(format!("label contains a separator: {label:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArenaLayout {
    pub slots: Vec<(u32, TensorSpec)>,
}

impl ArenaLayout {
    pub fn new(slots: Vec<(u32, TensorSpec)>) -> Result<Self> {
        let layout = ArenaLayout { slots };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::Config("arena layout has no slots".into()));
        }
        let mut ids: Vec<u32> = self.slots.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate slot id in arena layout".into()));
        }
        for (_, spec) in &self.slots {
            spec.validate()?;
        }
        Ok(())
    }

    /// Data-area offsets, one per slot, in layout order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut next = 0;
        self.slots
            .iter()
            .map(|(_, spec)| {
                let offset = shm::round_up(next, ALIGNMENT);
                next = offset + spec.byte_size();
                offset
            })
            .collect()
    }

    pub fn data_bytes(&self) -> usize {
        match (self.offsets().last(), self.slots.last()) {
            (Some(off), Some((_, spec))) => off + spec.byte_size(),
            _ => 0,
        }
    }

    pub fn total_bytes(&self) -> usize {
        shm::round_up(HEADER_BYTES + self.data_bytes(), shm::page_size())
    }
}

/// Everything another process needs to map an arena.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShareHandle {
    pub namespace: String,
    pub region_name: String,
    pub total_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRef {
    pub arena: ShareHandle,
    pub slot_id: u32,
    pub spec: TensorSpec,
    pub offset: u64,
}

/// Accessor over a mapped arena, created or imported.
pub struct Arena {
    handle: ShareHandle,
    slot_count: u32,
    slots: Vec<SlotRef>,
    region: Region,
}

impl std::fmt::Debug for Arena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Arena")
            .field("handle", &self.handle)
            .field("slot_count", &self.slot_count)
            .finish()
    }
}

pub fn create_arena(
    layout: &ArenaLayout,
    namespace: &str,
    region_name: &str,
) -> Result<(Arena, ShareHandle)> {
    layout.validate()?;
    let total = layout.total_bytes();
    let region = Region::create(namespace, region_name, total)?;
    region.write_bytes(0, MAGIC);
    region.write_bytes(8, &(total as u64).to_le_bytes());
    region.write_bytes(16, &(layout.slots.len() as u32).to_le_bytes());
    let handle = ShareHandle {
        namespace: namespace.to_string(),
        region_name: region_name.to_string(),
        total_bytes: total as u64,
    };
    let arena = Arena {
        slots: slot_refs(&handle, layout),
        slot_count: layout.slots.len() as u32,
        handle: handle.clone(),
        region,
    };
    Ok((arena, handle))
}

pub fn import_arena(handle: &ShareHandle) -> Result<Arena> {
    let region = Region::open(&handle.namespace, &handle.region_name)?;
    if region.len() as u64 != handle.total_bytes {
        return Err(Error::CorruptHandle(format!(
            "{}: handle says {} bytes, region has {}",
            handle.region_name,
            handle.total_bytes,
            region.len()
        )));
    }
    let header = region.bytes(0, HEADER_BYTES);
    if &header[..6] != MAGIC {
        return Err(Error::CorruptHandle(format!("{}: bad magic", handle.region_name)));
    }
    let stored_total = u64::from_le_bytes(header[8..16].try_into().unwrap());
    if stored_total != handle.total_bytes {
        return Err(Error::CorruptHandle(format!(
            "{}: header total {} != handle total {}",
            handle.region_name, stored_total, handle.total_bytes
        )));
    }
    let slot_count = u32::from_le_bytes(header[16..20].try_into().unwrap());
    Ok(Arena {
        handle: handle.clone(),
        slot_count,
        slots: Vec::new(),
        region,
    })
}

/// Import and attach a known layout so that `slots()` is populated.
pub fn import_arena_with_layout(handle: &ShareHandle, layout: &ArenaLayout) -> Result<Arena> {
    let mut arena = import_arena(handle)?;
    if layout.total_bytes() as u64 != handle.total_bytes
        || layout.slots.len() as u32 != arena.slot_count
    {
        return Err(Error::CorruptHandle(format!(
            "{}: layout does not match region",
            handle.region_name
        )));
    }
    arena.slots = slot_refs(handle, layout);
    Ok(arena)
}

fn slot_refs(handle: &ShareHandle, layout: &ArenaLayout) -> Vec<SlotRef> {
    layout
        .slots
        .iter()
        .zip(layout.offsets())
        .map(|((id, spec), offset)| SlotRef {
            arena: handle.clone(),
            slot_id: *id,
            spec: spec.clone(),
            offset: offset as u64,
        })
        .collect()
}

/// Read-only alias of a slot's shared bytes.
#[derive(Clone, Copy)]
pub struct TensorView<'a> {
    ptr: *const u8,
    len: usize,
    spec: &'a TensorSpec,
}

impl<'a> TensorView<'a> {
    pub fn spec(&self) -> &'a TensorSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// The aliased bytes. Contents reflect the shared region at the time of
    /// reading; the caller must hold channel access to the slot.
    pub fn as_bytes(&self) -> &'a [u8] {
        // SAFETY: ptr/len were bounds-checked against a live mapping that
        // outlives 'a.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }

    /// Fresh read of one byte from shared memory.
    pub fn byte(&self, index: usize) -> u8 {
        assert!(index < self.len);
        // SAFETY: in bounds.
        unsafe { std::ptr::read_volatile(self.ptr.add(index)) }
    }
}

impl Arena {
    pub fn handle(&self) -> &ShareHandle {
        &self.handle
    }

    /// Slots known to this accessor (empty for a bare import).
    pub fn slots(&self) -> &[SlotRef] {
        &self.slots
    }

    pub fn slot(&self, slot_id: u32) -> Option<&SlotRef> {
        self.slots.iter().find(|s| s.slot_id == slot_id)
    }

    fn check(&self, slot: &SlotRef) -> Result<usize> {
        let known = if self.slots.is_empty() {
            slot.slot_id < self.slot_count
        } else {
            self.slots.iter().any(|s| s == slot)
        };
        let end = HEADER_BYTES + slot.offset as usize + slot.spec.byte_size();
        if slot.arena != self.handle || !known || end > self.region.len() {
            return Err(Error::NotFound(format!(
                "slot {} not in arena {}",
                slot.slot_id, self.handle.region_name
            )));
        }
        Ok(HEADER_BYTES + slot.offset as usize)
    }

    pub fn write_tensor(&self, slot: &SlotRef, data: &[u8]) -> Result<()> {
        if data.len() != slot.spec.byte_size() {
            return Err(Error::Shape(format!(
                "{}: expected {} bytes, got {}",
                slot.spec.label,
                slot.spec.byte_size(),
                data.len()
            )));
        }
        let start = self.check(slot)?;
        self.region.write_bytes(start, data);
        Ok(())
    }

    pub fn read_view<'a>(&'a self, slot: &'a SlotRef) -> Result<TensorView<'a>> {
        let start = self.check(slot)?;
        Ok(TensorView {
            // SAFETY: `check` bounds-tested the range.
            ptr: unsafe { self.region.as_ptr().add(start) },
            len: slot.spec.byte_size(),
            spec: &slot.spec,
        })
    }

    /// Mutable access to a slot's bytes.
    ///
    /// # Safety
    /// The caller must have exclusive access to the slot for the lifetime of
    /// the returned slice: either it owns the arena privately or the channel
    /// state machine grants it the WRITING state.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn bytes_mut(&self, slot: &SlotRef) -> Result<&mut [u8]> {
        let start = self.check(slot)?;
        Ok(std::slice::from_raw_parts_mut(
            self.region.as_ptr().add(start),
            slot.spec.byte_size(),
        ))
    }
}

/// Snapshot `src` into `dst`. The only operation that counts as a copy.
pub fn copy_out(src_arena: &Arena, src: &SlotRef, dst_arena: &Arena, dst: &SlotRef) -> Result<()> {
    if src.spec != dst.spec {
        return Err(Error::Shape(format!(
            "copy_out spec mismatch: {:?} vs {:?}",
            src.spec, dst.spec
        )));
    }
    let from = src_arena.check(src)?;
    let to = dst_arena.check(dst)?;
    let len = src.spec.byte_size();
    // SAFETY: both ranges were bounds-checked; distinct slots never overlap
    // because layouts are disjoint and `src != dst` or the copy is a no-op.
    unsafe {
        std::ptr::copy(
            src_arena.region.as_ptr().add(from),
            dst_arena.region.as_ptr().add(to),
            len,
        );
    }
    COPIES.fetch_add(1, Ordering::Relaxed);
    Ok(())
}
