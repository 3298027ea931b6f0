//! Named shared-memory regions grouped by run namespace.
//!
//! Every region lives at `<base>/<namespace>/<region_name>`, where `<base>`
//! is `/dev/shm/fanout` (or `$FANOUT_SHM_DIR`). A namespace directory is the
//! unit of cleanup: `remove_namespace` deletes every region of a run.

use std::fs::{self, File, OpenOptions};
use std::io::ErrorKind;
use std::os::unix::fs::MetadataExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};

use memmap2::MmapRaw;

use crate::error::{Error, Result};

pub const SHM_DIR_ENV: &str = "FANOUT_SHM_DIR";

pub fn shm_base_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(SHM_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let dev_shm = PathBuf::from("/dev/shm");
    if dev_shm.is_dir() {
        dev_shm.join("fanout")
    } else {
        std::env::temp_dir().join("fanout-shm")
    }
}

pub fn namespace_dir(namespace: &str) -> PathBuf {
    shm_base_dir().join(namespace)
}

/// A fresh per-run namespace: unix seconds plus a random suffix.
pub fn new_namespace() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("run-{}-{:08x}", secs, rand::random::<u32>())
}

pub fn page_size() -> usize {
    // SAFETY: sysconf has no memory-safety preconditions.
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if size <= 0 {
        4096
    } else {
        size as usize
    }
}

pub fn round_up(value: usize, align: usize) -> usize {
    value.div_ceil(align) * align
}

pub fn validate_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid {kind} name {name:?}")))
    }
}

/// Counts shared regions created by this process, and how many of those
/// happened after `mark_init_complete`.
pub mod audit {
    use super::*;

    static REGIONS: AtomicU64 = AtomicU64::new(0);
    static BYTES: AtomicU64 = AtomicU64::new(0);
    static INIT_DONE: AtomicBool = AtomicBool::new(false);
    static POST_INIT: AtomicU64 = AtomicU64::new(0);

    pub(crate) fn on_create(bytes: usize) {
        REGIONS.fetch_add(1, Ordering::Relaxed);
        BYTES.fetch_add(bytes as u64, Ordering::Relaxed);
        if INIT_DONE.load(Ordering::Relaxed) {
            POST_INIT.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn mark_init_complete() {
        INIT_DONE.store(true, Ordering::Relaxed);
    }

    pub fn regions_created() -> u64 {
        REGIONS.load(Ordering::Relaxed)
    }

    pub fn bytes_created() -> u64 {
        BYTES.load(Ordering::Relaxed)
    }

    pub fn post_init_allocations() -> u64 {
        POST_INIT.load(Ordering::Relaxed)
    }
}

/// Region count and resident bytes (allocated blocks) of a namespace.
pub fn namespace_footprint(namespace: &str) -> Result<(usize, u64)> {
    let dir = namespace_dir(namespace);
    let entries = match fs::read_dir(&dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == ErrorKind::NotFound => return Ok((0, 0)),
        Err(e) => return Err(e.into()),
    };
    let mut count = 0;
    let mut bytes = 0;
    for entry in entries {
        let meta = entry?.metadata()?;
        if meta.is_file() {
            count += 1;
            bytes += meta.blocks() * 512;
        }
    }
    Ok((count, bytes))
}

/// Removes every region of a namespace. Returns false when nothing existed.
pub fn remove_namespace(namespace: &str) -> Result<bool> {
    validate_name("namespace", namespace)?;
    match fs::remove_dir_all(namespace_dir(namespace)) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::Resource(e.to_string())),
    }
}

/// A mapped shared-memory file. Accessors may be cloned across threads by
/// re-opening; the mapping itself is read/write shared.
pub(crate) struct Region {
    map: MmapRaw,
    _file: File,
}

// SAFETY: the mapping is plain shared memory; all synchronization is
// imposed by the users of the region (channel state words).
unsafe impl Send for Region {}
unsafe impl Sync for Region {}

/// Backs the whole file with pages now, so a full /dev/shm fails at
/// creation and the resident footprint never grows afterwards.
#[cfg(target_os = "linux")]
fn commit(file: &File, len: usize) -> Result<()> {
    use std::os::fd::AsRawFd;
    // SAFETY: valid fd owned by `file`.
    let rc = unsafe { libc::posix_fallocate(file.as_raw_fd(), 0, len as libc::off_t) };
    if rc != 0 {
        return Err(Error::Resource(format!(
            "cannot commit {len} bytes: {}",
            std::io::Error::from_raw_os_error(rc)
        )));
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
fn commit(_file: &File, _len: usize) -> Result<()> {
    Ok(())
}

impl Region {
    pub fn create(namespace: &str, name: &str, len: usize) -> Result<Region> {
        validate_name("namespace", namespace)?;
        validate_name("region", name)?;
        if len == 0 {
            return Err(Error::Resource("zero-length region".into()));
        }
        let dir = namespace_dir(namespace);
        fs::create_dir_all(&dir).map_err(|e| Error::Resource(e.to_string()))?;
        let path = dir.join(name);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                ErrorKind::AlreadyExists => Error::AlreadyExists(format!("{namespace}/{name}")),
                _ => Error::Resource(format!("{}: {e}", path.display())),
            })?;
        // set_len on a fresh file yields zero-filled contents.
        file.set_len(len as u64)
            .map_err(|e| Error::Resource(e.to_string()))?;
        commit(&file, len)?;
        let map = MmapRaw::map_raw(&file).map_err(|e| Error::Resource(e.to_string()))?;
        audit::on_create(len);
        Ok(Region { map, _file: file })
    }

    pub fn open(namespace: &str, name: &str) -> Result<Region> {
        validate_name("namespace", namespace)?;
        validate_name("region", name)?;
        let path = namespace_dir(namespace).join(name);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                ErrorKind::NotFound => Error::NotFound(format!("{namespace}/{name}")),
                _ => Error::Resource(format!("{}: {e}", path.display())),
            })?;
        let map = MmapRaw::map_raw(&file).map_err(|e| Error::Resource(e.to_string()))?;
        Ok(Region { map, _file: file })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn as_ptr(&self) -> *mut u8 {
        self.map.as_mut_ptr()
    }

    pub fn u32_at(&self, offset: usize) -> &AtomicU32 {
        assert!(offset % 4 == 0 && offset + 4 <= self.len());
        // SAFETY: in bounds, aligned (mapping is page aligned), and the
        // mapping outlives the returned reference.
        unsafe { &*(self.as_ptr().add(offset) as *const AtomicU32) }
    }

    pub fn u64_at(&self, offset: usize) -> &AtomicU64 {
        assert!(offset % 8 == 0 && offset + 8 <= self.len());
        // SAFETY: as for `u32_at`.
        unsafe { &*(self.as_ptr().add(offset) as *const AtomicU64) }
    }

    pub fn bytes(&self, offset: usize, len: usize) -> &[u8] {
        assert!(offset + len <= self.len());
        // SAFETY: in bounds of a live mapping.
        unsafe { std::slice::from_raw_parts(self.as_ptr().add(offset), len) }
    }

    /// Plain write into the mapping, used only during header initialization.
    pub fn write_bytes(&self, offset: usize, data: &[u8]) {
        assert!(offset + data.len() <= self.len());
        // SAFETY: in bounds; callers own the range being written.
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), self.as_ptr().add(offset), data.len()) }
    }
}
