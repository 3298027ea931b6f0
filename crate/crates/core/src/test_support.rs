//! Helpers shared by unit tests.

use std::sync::{Mutex, MutexGuard};

use crate::shm;

/// A unique namespace removed on drop.
pub struct TestNamespace(String);

impl TestNamespace {
    pub fn new() -> Self {
        TestNamespace(format!("test-{}", shm::new_namespace()))
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl Drop for TestNamespace {
    fn drop(&mut self) {
        let _ = shm::remove_namespace(&self.0);
    }
}

static COPY_LOCK: Mutex<()> = Mutex::new(());

/// Serializes unit tests that assert on the process-wide copy counter.
pub fn copy_lock() -> MutexGuard<'static, ()> {
    COPY_LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
