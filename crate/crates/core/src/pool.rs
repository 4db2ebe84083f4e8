//! Fixed-size block pools for the base and residual caches.
//!
//! Each block holds up to `capacity` token rows. A row stores the key and the
//! value side by side, so base rows are `2·n` wide and residual rows `2·r`
//! wide. Blocks are append-only, reference counted, and go back to the free
//! list when the count reaches zero. Handles carry a generation so a handle
//! that outlives its block is detected instead of silently aliasing a reuse.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, MatrixView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Base,
    Residual,
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Base => "base",
            PoolKind::Residual => "residual",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockHandle {
    pub kind: PoolKind,
    pub index: u32,
    pub generation: u32,
}

impl fmt::Display for BlockHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}.{}", self.kind, self.index, self.generation)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("{kind} pool needs eviction: {needed} block(s) requested, {available} available")]
    NeedsEviction { kind: PoolKind, needed: usize, available: usize },
    #[error("stale handle {0} (block was freed or reallocated)")]
    StaleHandle(BlockHandle),
    #[error("handle {handle} used with the {pool} pool")]
    WrongPool { handle: BlockHandle, pool: PoolKind },
    #[error("release of {0} below zero references")]
    RefcountUnderflow(BlockHandle),
    #[error("block {handle} holds {filled}/{capacity} rows, cannot append {rows}")]
    Overfill { handle: BlockHandle, filled: usize, capacity: usize, rows: usize },
    #[error("row width {got} does not match pool width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("row range {start}..{end} outside {filled} filled rows of {handle}")]
    RangeOutOfBounds { handle: BlockHandle, start: usize, end: usize, filled: usize },
    #[error("cannot release {requested} reserved blocks, only {reserved} reserved")]
    ReservationUnderflow { requested: usize, reserved: usize },
}

pub type Result<T, E = PoolError> = std::result::Result<T, E>;

#[derive(Debug, Default)]
struct Slot {
    generation: u32,
    refcount: u32,
    filled: usize,
    live: bool,
    data: Vec<f32>,
}

/// A pool of equally sized blocks for one cache kind.
#[derive(Debug)]
pub struct BlockPool {
    kind: PoolKind,
    capacity: usize,
    width: usize,
    slots: Vec<Slot>,
    free: Vec<u32>,
    reserved: usize,
}

impl BlockPool {
    pub fn new(kind: PoolKind, num_blocks: usize, capacity: usize, width: usize) -> Self {
        assert!(capacity > 0, "block capacity must be positive");
        let slots = (0..num_blocks).map(|_| Slot::default()).collect();
        let free = (0..num_blocks as u32).rev().collect();
        Self { kind, capacity, width, slots, free, reserved: 0 }
    }

    pub fn kind(&self) -> PoolKind {
        self.kind
    }

    /// Tokens per block.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Values per row (key and value side by side).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn block_bytes(&self) -> u64 {
        (self.capacity * self.width * 4) as u64
    }

    pub fn total_blocks(&self) -> usize {
        self.slots.len()
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_blocks(&self) -> usize {
        self.slots.len() - self.free.len()
    }

    pub fn reserved_blocks(&self) -> usize {
        self.reserved
    }

    /// Free blocks not promised to a reservation.
    pub fn available(&self) -> usize {
        self.free.len().saturating_sub(self.reserved)
    }

    pub fn bytes_used(&self) -> u64 {
        self.allocated_blocks() as u64 * self.block_bytes()
    }

    fn needs_eviction(&self, needed: usize) -> PoolError {
        PoolError::NeedsEviction { kind: self.kind, needed, available: self.available() }
    }

    /// Allocates a block with refcount 1 and nothing written. Never evicts.
    pub fn alloc(&mut self) -> Result<BlockHandle> {
        if self.available() == 0 {
            return Err(self.needs_eviction(1));
        }
        Ok(self.take_free())
    }

    /// Allocates out of a previous [`reserve`](Self::reserve).
    pub fn alloc_reserved(&mut self) -> Result<BlockHandle> {
        if self.reserved == 0 {
            return self.alloc();
        }
        debug_assert!(!self.free.is_empty());
        self.reserved -= 1;
        Ok(self.take_free())
    }

    fn take_free(&mut self) -> BlockHandle {
        let index = self.free.pop().expect("free list checked by caller");
        let (capacity, width) = (self.capacity, self.width);
        let slot = &mut self.slots[index as usize];
        slot.generation = slot.generation.wrapping_add(1);
        slot.refcount = 1;
        slot.filled = 0;
        slot.live = true;
        if slot.data.len() != capacity * width {
            slot.data = vec![0.0; capacity * width];
        }
        BlockHandle { kind: self.kind, index, generation: slot.generation }
    }

    /// Sets aside `n` free blocks for later [`alloc_reserved`](Self::alloc_reserved).
    pub fn reserve(&mut self, n: usize) -> Result<()> {
        if self.available() < n {
            return Err(self.needs_eviction(n));
        }
        self.reserved += n;
        Ok(())
    }

    pub fn unreserve(&mut self, n: usize) -> Result<()> {
        if n > self.reserved {
            return Err(PoolError::ReservationUnderflow { requested: n, reserved: self.reserved });
        }
        self.reserved -= n;
        Ok(())
    }

    fn slot(&self, h: BlockHandle) -> Result<&Slot> {
        if h.kind != self.kind {
            return Err(PoolError::WrongPool { handle: h, pool: self.kind });
        }
        match self.slots.get(h.index as usize) {
            Some(s) if s.generation == h.generation && (s.live || s.refcount == 0) => Ok(s),
            _ => Err(PoolError::StaleHandle(h)),
        }
    }

    fn slot_mut(&mut self, h: BlockHandle) -> Result<&mut Slot> {
        self.slot(h)?;
        Ok(&mut self.slots[h.index as usize])
    }

    pub fn is_valid(&self, h: BlockHandle) -> bool {
        self.slot(h).map(|s| s.live).unwrap_or(false)
    }

    pub fn refcount(&self, h: BlockHandle) -> Result<u32> {
        Ok(self.slot(h)?.refcount)
    }

    pub fn filled(&self, h: BlockHandle) -> Result<usize> {
        Ok(self.slot(h)?.filled)
    }

    pub fn retain(&mut self, h: BlockHandle) -> Result<u32> {
        let slot = self.slot_mut(h)?;
        if !slot.live {
            return Err(PoolError::StaleHandle(h));
        }
        slot.refcount += 1;
        Ok(slot.refcount)
    }

    /// Drops one reference; at zero the block returns to the free list.
    pub fn release(&mut self, h: BlockHandle) -> Result<u32> {
        let slot = self.slot_mut(h)?;
        if slot.refcount == 0 || !slot.live {
            return Err(PoolError::RefcountUnderflow(h));
        }
        slot.refcount -= 1;
        let rc = slot.refcount;
        if rc == 0 {
            slot.live = false;
            slot.filled = 0;
            self.free.push(h.index);
        }
        Ok(rc)
    }

    /// Appends rows to the unfilled tail of a block.
    pub fn write_rows(&mut self, h: BlockHandle, rows: &Matrix) -> Result<()> {
        let (capacity, width) = (self.capacity, self.width);
        if rows.cols() != width && rows.rows() > 0 {
            return Err(PoolError::WidthMismatch { expected: width, got: rows.cols() });
        }
        let slot = self.slot_mut(h)?;
        if !slot.live {
            return Err(PoolError::StaleHandle(h));
        }
        if slot.filled + rows.rows() > capacity {
            return Err(PoolError::Overfill { handle: h, filled: slot.filled, capacity, rows: rows.rows() });
        }
        let start = slot.filled * width;
        slot.data[start..start + rows.data().len()].copy_from_slice(rows.data());
        slot.filled += rows.rows();
        Ok(())
    }

    /// Copies `range` of the filled rows out of a block.
    pub fn read_rows(&self, h: BlockHandle, range: Range<usize>) -> Result<Matrix> {
        Ok(self.rows_view(h, range)?.to_matrix())
    }

    /// Borrows `range` of the filled rows without copying.
    pub fn rows_view(&self, h: BlockHandle, range: Range<usize>) -> Result<MatrixView<'_>> {
        let slot = self.slot(h)?;
        if !slot.live || range.start > range.end || range.end > slot.filled {
            return Err(PoolError::RangeOutOfBounds { handle: h, start: range.start, end: range.end, filled: slot.filled });
        }
        let view = MatrixView::new(&slot.data, self.capacity, self.width, self.width, 0).expect("slot data sized to capacity x width");
        Ok(view.narrow_rows(range.start, range.len()))
    }
}

/// The two physically separate pools.
#[derive(Debug)]
pub struct KvPools {
    pub base: BlockPool,
    pub residual: BlockPool,
}

impl KvPools {
    pub fn new(base: BlockPool, residual: BlockPool) -> Self {
        Self { base, residual }
    }

    pub fn get(&self, kind: PoolKind) -> &BlockPool {
        match kind {
            PoolKind::Base => &self.base,
            PoolKind::Residual => &self.residual,
        }
    }

    pub fn get_mut(&mut self, kind: PoolKind) -> &mut BlockPool {
        match kind {
            PoolKind::Base => &mut self.base,
            PoolKind::Residual => &mut self.residual,
        }
    }

    pub fn retain(&mut self, h: BlockHandle) -> Result<u32> {
        self.get_mut(h.kind).retain(h)
    }

    pub fn release(&mut self, h: BlockHandle) -> Result<u32> {
        self.get_mut(h.kind).release(h)
    }

    pub fn refcount(&self, h: BlockHandle) -> Result<u32> {
        self.get(h.kind).refcount(h)
    }

    pub fn stats(&self, per_agent_bytes: BTreeMap<u64, u64>) -> PoolStats {
        PoolStats {
            total_blocks: self.base.total_blocks() + self.residual.total_blocks(),
            free_blocks: self.base.free_blocks() + self.residual.free_blocks(),
            base_total_blocks: self.base.total_blocks(),
            base_free_blocks: self.base.free_blocks(),
            residual_total_blocks: self.residual.total_blocks(),
            residual_free_blocks: self.residual.free_blocks(),
            base_bytes_used: self.base.bytes_used(),
            residual_bytes_used: self.residual.bytes_used(),
            per_agent_bytes,
        }
    }
}

/// Occupancy snapshot of both pools.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub total_blocks: usize,
    pub free_blocks: usize,
    pub base_total_blocks: usize,
    pub base_free_blocks: usize,
    pub residual_total_blocks: usize,
    pub residual_free_blocks: usize,
    pub base_bytes_used: u64,
    pub residual_bytes_used: u64,
    pub per_agent_bytes: BTreeMap<u64, u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn rows(n: usize, width: usize, fill: f32) -> Matrix {
        Matrix::from_vec(n, width, vec![fill; n * width]).unwrap()
    }

    #[test]
    fn alloc_free_round_trip() {
        let mut p = BlockPool::new(PoolKind::Base, 4, 16, 8);
        let h = p.alloc().unwrap();
        assert_eq!(p.free_blocks(), 3);
        assert_eq!(p.refcount(h).unwrap(), 1);
        assert_eq!(p.filled(h).unwrap(), 0);
        assert_eq!(p.release(h).unwrap(), 0);
        assert_eq!(p.free_blocks(), 4);
    }

    #[test]
    fn exhaustion_needs_eviction() {
        let mut p = BlockPool::new(PoolKind::Residual, 2, 4, 2);
        p.alloc().unwrap();
        p.alloc().unwrap();
        assert_eq!(p.alloc().unwrap_err(), PoolError::NeedsEviction { kind: PoolKind::Residual, needed: 1, available: 0 });
    }

    #[test]
    fn retain_release_and_underflow() {
        let mut p = BlockPool::new(PoolKind::Base, 2, 4, 2);
        let h = p.alloc().unwrap();
        assert_eq!(p.retain(h).unwrap(), 2);
        assert_eq!(p.release(h).unwrap(), 1);
        assert_eq!(p.release(h).unwrap(), 0);
        assert_eq!(p.release(h).unwrap_err(), PoolError::RefcountUnderflow(h));
    }

    #[test]
    fn stale_generation_detected() {
        let mut p = BlockPool::new(PoolKind::Base, 1, 4, 2);
        let old = p.alloc().unwrap();
        p.release(old).unwrap();
        let new = p.alloc().unwrap();
        assert_eq!(new.index, old.index);
        assert_eq!(p.retain(old).unwrap_err(), PoolError::StaleHandle(old));
        assert!(p.is_valid(new));
        assert!(!p.is_valid(old));
    }

    #[test]
    fn write_then_read_and_overfill() {
        let mut p = BlockPool::new(PoolKind::Base, 1, 4, 3);
        let h = p.alloc().unwrap();
        let data = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        p.write_rows(h, &data).unwrap();
        assert_eq!(p.read_rows(h, 0..2).unwrap(), data);
        p.write_rows(h, &rows(2, 3, 9.0)).unwrap();
        let err = p.write_rows(h, &rows(1, 3, 0.0)).unwrap_err();
        assert!(matches!(err, PoolError::Overfill { filled: 4, capacity: 4, .. }));
        assert!(matches!(p.write_rows(h, &rows(0, 2, 0.0)), Ok(())));
        assert!(matches!(p.read_rows(h, 3..5), Err(PoolError::RangeOutOfBounds { .. })));
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut p = BlockPool::new(PoolKind::Residual, 1, 4, 3);
        let h = p.alloc().unwrap();
        assert_eq!(p.write_rows(h, &rows(1, 2, 0.0)).unwrap_err(), PoolError::WidthMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn wrong_pool_rejected() {
        let mut pools = KvPools::new(BlockPool::new(PoolKind::Base, 1, 2, 4), BlockPool::new(PoolKind::Residual, 1, 2, 2));
        let h = pools.base.alloc().unwrap();
        assert!(matches!(pools.residual.retain(h), Err(PoolError::WrongPool { .. })));
        assert_eq!(pools.retain(h).unwrap(), 2);
    }

    #[test]
    fn reservations_hold_blocks() {
        let mut p = BlockPool::new(PoolKind::Base, 3, 2, 2);
        p.reserve(2).unwrap();
        assert_eq!(p.available(), 1);
        p.alloc().unwrap();
        assert!(p.alloc().is_err());
        p.alloc_reserved().unwrap();
        assert_eq!(p.reserved_blocks(), 1);
        p.unreserve(1).unwrap();
        assert_eq!(p.available(), 1);
        assert!(p.unreserve(1).is_err());
    }

    #[test]
    fn residual_bytes_scale_with_rank_over_width() {
        let (n, r, cap) = (1024, 16, 16);
        let base = BlockPool::new(PoolKind::Base, 1, cap, 2 * n);
        let res = BlockPool::new(PoolKind::Residual, 1, cap, 2 * r);
        assert_eq!(res.block_bytes() * n as u64, base.block_bytes() * r as u64);
    }

    /// Random alloc/retain/release/write sequences checked against a shadow
    /// refcount map and a shadow row store.
    #[test]
    fn shadow_oracle_sequences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (cap, width) = (4, 2);
            let mut p = BlockPool::new(PoolKind::Base, 8, cap, width);
            let mut shadow: HashMap<BlockHandle, (u32, Vec<f32>)> = HashMap::new();
            let mut sentinel = 0.0f32;
            for _ in 0..200 {
                let live: Vec<BlockHandle> = {
                    let mut v: Vec<_> = shadow.keys().copied().collect();
                    v.sort();
                    v
                };
                match rng.random_range(0..4) {
                    0 => match p.alloc() {
                        Ok(h) => {
                            assert!(!shadow.contains_key(&h));
                            shadow.insert(h, (1, Vec::new()));
                        }
                        Err(PoolError::NeedsEviction { .. }) => assert_eq!(shadow.len(), 8),
                        Err(e) => panic!("{e}"),
                    },
                    1 if !live.is_empty() => {
                        let h = live[rng.random_range(0..live.len())];
                        let rc = p.retain(h).unwrap();
                        let e = shadow.get_mut(&h).unwrap();
                        e.0 += 1;
                        assert_eq!(rc, e.0);
                    }
                    2 if !live.is_empty() => {
                        let h = live[rng.random_range(0..live.len())];
                        let rc = p.release(h).unwrap();
                        let e = shadow.get_mut(&h).unwrap();
                        e.0 -= 1;
                        assert_eq!(rc, e.0);
                        if rc == 0 {
                            shadow.remove(&h);
                        }
                    }
                    3 if !live.is_empty() => {
                        let h = live[rng.random_range(0..live.len())];
                        let e = shadow.get_mut(&h).unwrap();
                        if e.1.len() / width < cap {
                            sentinel += 1.0;
                            p.write_rows(h, &rows(1, width, sentinel)).unwrap();
                            e.1.extend([sentinel; 2]);
                        }
                    }
                    _ => {}
                }
                assert_eq!(p.free_blocks() + p.allocated_blocks(), p.total_blocks());
                assert_eq!(p.allocated_blocks(), shadow.len());
                for (h, (rc, data)) in &shadow {
                    assert_eq!(p.refcount(*h).unwrap(), *rc);
                    let filled = data.len() / width;
                    assert_eq!(p.read_rows(*h, 0..filled).unwrap().data(), &data[..]);
                }
            }
        }
    }
}
