//! Entity registry and the double-buffered snapshot store.
//!
//! Entities register create/restore/swap callbacks. A checkpoint encodes every
//! entity, in registration order, into the writable half of a [`SnapshotSet`];
//! only [`SnapshotSet::commit_swap`] promotes it to the read-only half.

pub mod codec;

use thiserror::Error;

pub use codec::{decode_snapshot, encode_snapshot, SnapshotBuffer, SnapshotEntry};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("bad snapshot magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),
    #[error("snapshot truncated")]
    Truncated,
    #[error("snapshot header CRC mismatch")]
    HeaderCrc,
    #[error("payload CRC mismatch for entity `{entity}`")]
    EntryCrc { entity: String },
    #[error("snapshot trailer CRC mismatch")]
    TrailerCrc,
    #[error("entity name is not valid UTF-8")]
    InvalidName,
    #[error("unexpected bytes after the last entry")]
    TrailingBytes,
    #[error("entity `{0}` is already registered")]
    DuplicateEntity(String),
    #[error("snapshot has no entry for entity `{0}`")]
    MissingEntity(String),
    #[error("entity `{entity}` callback failed: {reason}")]
    Callback { entity: String, reason: String },
    #[error("no valid snapshot to read")]
    NoSnapshot,
}

/// Passed to restore callbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RestoreContext {
    pub origin_rank: u32,
    pub step: u64,
}

type CreateFn<S> = Box<dyn Fn(&S) -> Result<Vec<u8>, String>>;
type RestoreFn<S> = Box<dyn Fn(&mut S, &[u8], &RestoreContext) -> Result<(), String>>;
type SwapFn = Box<dyn FnMut()>;

/// Callbacks that make one piece of state restorable.
pub struct EntityHooks<S> {
    name: String,
    create: CreateFn<S>,
    restore: RestoreFn<S>,
    swap: Option<SwapFn>,
}

impl<S> EntityHooks<S> {
    pub fn new(
        name: impl Into<String>,
        create: impl Fn(&S) -> Result<Vec<u8>, String> + 'static,
        restore: impl Fn(&mut S, &[u8], &RestoreContext) -> Result<(), String> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            create: Box::new(create),
            restore: Box::new(restore),
            swap: None,
        }
    }

    /// Extra hook run on every commit, for entities that keep private buffers.
    pub fn with_swap(mut self, swap: impl FnMut() + 'static) -> Self {
        self.swap = Some(Box::new(swap));
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityHandle(pub usize);

pub struct Registry<S> {
    entities: Vec<EntityHooks<S>>,
}

impl<S> Default for Registry<S> {
    fn default() -> Self {
        Self { entities: Vec::new() }
    }
}

impl<S> Registry<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, hooks: EntityHooks<S>) -> Result<EntityHandle, SnapshotError> {
        if self.entities.iter().any(|e| e.name == hooks.name) {
            return Err(SnapshotError::DuplicateEntity(hooks.name));
        }
        self.entities.push(hooks);
        Ok(EntityHandle(self.entities.len() - 1))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entities.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Capture every entity, in registration order.
    pub fn capture(&self, state: &S, step: u64, origin_rank: u32) -> Result<SnapshotBuffer, SnapshotError> {
        let mut entries = Vec::with_capacity(self.entities.len());
        for e in &self.entities {
            let payload = (e.create)(state).map_err(|reason| SnapshotError::Callback {
                entity: e.name.clone(),
                reason,
            })?;
            entries.push(SnapshotEntry::new(e.name.clone(), origin_rank, payload));
        }
        Ok(SnapshotBuffer {
            step,
            origin_rank,
            entries,
        })
    }

    /// Hand every entity its entry from `snapshot`.
    pub fn restore(&self, state: &mut S, snapshot: &SnapshotBuffer) -> Result<(), SnapshotError> {
        for e in &self.entities {
            let entry = snapshot
                .entry(&e.name)
                .ok_or_else(|| SnapshotError::MissingEntity(e.name.clone()))?;
            let ctx = RestoreContext {
                origin_rank: entry.origin_rank,
                step: snapshot.step,
            };
            (e.restore)(state, &entry.payload, &ctx).map_err(|reason| SnapshotError::Callback {
                entity: e.name.clone(),
                reason,
            })?;
        }
        Ok(())
    }

    fn run_swaps(&mut self) {
        for e in &mut self.entities {
            if let Some(swap) = e.swap.as_mut() {
                swap();
            }
        }
    }
}

/// A copy of another rank's encoded snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldCopy {
    pub origin_rank: u32,
    pub bytes: Vec<u8>,
}

/// One half of the double buffer: the local encoded snapshot, the partner
/// copies received for the same step, and replicated context `M`.
#[derive(Debug, Clone)]
pub struct SnapshotHalf<M> {
    pub step: Option<u64>,
    pub valid: bool,
    pub own: Option<Vec<u8>>,
    pub partners: Vec<HeldCopy>,
    pub context: Option<M>,
}

impl<M> Default for SnapshotHalf<M> {
    fn default() -> Self {
        Self {
            step: None,
            valid: false,
            own: None,
            partners: Vec::new(),
            context: None,
        }
    }
}

impl<M> SnapshotHalf<M> {
    pub fn resident_bytes(&self) -> usize {
        self.own.as_ref().map_or(0, Vec::len) + self.partners.iter().map(|p| p.bytes.len()).sum::<usize>()
    }

    /// Every encoded snapshot in this half, own copy first.
    pub fn held(&self) -> impl Iterator<Item = &[u8]> {
        self.own
            .iter()
            .map(Vec::as_slice)
            .chain(self.partners.iter().map(|p| p.bytes.as_slice()))
    }
}

/// Per-process snapshot store. With double buffering the read-only half is
/// never touched between commits; without it there is a single half that
/// checkpoints overwrite in place.
#[derive(Debug, Clone)]
pub struct SnapshotSet<M = ()> {
    halves: Vec<SnapshotHalf<M>>,
    read_only: usize,
}

impl<M> SnapshotSet<M> {
    pub fn new(double_buffered: bool) -> Self {
        let n = if double_buffered { 2 } else { 1 };
        Self {
            halves: (0..n).map(|_| SnapshotHalf::default()).collect(),
            read_only: 0,
        }
    }

    pub fn is_double_buffered(&self) -> bool {
        self.halves.len() == 2
    }

    fn writable_index(&self) -> usize {
        (self.read_only + 1) % self.halves.len()
    }

    pub fn read_only(&self) -> &SnapshotHalf<M> {
        &self.halves[self.read_only]
    }

    pub fn writable(&self) -> &SnapshotHalf<M> {
        &self.halves[self.writable_index()]
    }

    pub fn writable_mut(&mut self) -> &mut SnapshotHalf<M> {
        let i = self.writable_index();
        &mut self.halves[i]
    }

    /// Which physical half is currently read-only.
    pub fn read_only_slot(&self) -> usize {
        self.read_only
    }

    /// Fill the writable half with a fresh local snapshot. Partner copies from
    /// an earlier round are dropped. On callback failure the writable half is
    /// left invalid; the read-only half is untouched either way.
    pub fn create_local_snapshot<S>(
        &mut self,
        registry: &Registry<S>,
        state: &S,
        step: u64,
        origin_rank: u32,
    ) -> Result<usize, SnapshotError> {
        let half = self.writable_mut();
        half.valid = false;
        half.step = Some(step);
        half.partners.clear();
        half.own = None;
        let buf = registry.capture(state, step, origin_rank)?;
        let bytes = encode_snapshot(&buf);
        let len = bytes.len();
        half.own = Some(bytes);
        Ok(len)
    }

    /// Promote the writable half. Pure local bookkeeping: it cannot fail.
    pub fn commit_swap<S>(&mut self, registry: &mut Registry<S>) {
        registry.run_swaps();
        let w = self.writable_index();
        self.halves[w].valid = true;
        self.read_only = w;
    }

    /// Bytes held in every half.
    pub fn resident_bytes(&self) -> usize {
        self.halves.iter().map(SnapshotHalf::resident_bytes).sum()
    }
}
