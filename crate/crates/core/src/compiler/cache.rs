use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use super::program::CompiledProgram;
use super::CompileOptions;
use crate::error::Result;
use crate::ir::{CacheKey, CanonicalForm};

/// Compiled programs keyed by graph structure. Concurrent lookups share a
/// read lock; if two threads miss on the same key, the first insertion wins
/// and only it is counted as a compilation.
#[derive(Default)]
pub struct CompileCache {
    options: CompileOptions,
    programs: RwLock<HashMap<CacheKey, Arc<CompiledProgram>>>,
    compiles: AtomicU64,
    hits: AtomicU64,
}

impl CompileCache {
    pub fn new(options: CompileOptions) -> Self {
        CompileCache { options, ..Default::default() }
    }

    pub fn options(&self) -> &CompileOptions {
        &self.options
    }

    /// Returns the program for `canon` and whether it was already cached.
    pub fn get_or_compile(&self, canon: &CanonicalForm) -> Result<(Arc<CompiledProgram>, bool)> {
        if let Some(p) = self.programs.read().get(&canon.key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((p.clone(), true));
        }
        let compiled = Arc::new(CompiledProgram::compile(canon, &self.options)?);
        let mut programs = self.programs.write();
        if let Some(p) = programs.get(&canon.key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((p.clone(), true));
        }
        programs.insert(canon.key, compiled.clone());
        self.compiles.fetch_add(1, Ordering::Relaxed);
        Ok((compiled, false))
    }

    pub fn lookup(&self, key: &CacheKey) -> Option<Arc<CompiledProgram>> {
        self.programs.read().get(key).cloned()
    }

    pub fn compile_count(&self) -> u64 {
        self.compiles.load(Ordering::Relaxed)
    }

    pub fn hit_count(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.programs.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
