//! Per-layer key/value cache addressed by slot.

use crate::error::{usage_err, Result};

#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub(crate) k: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

/// Keys and values for every processed token, one slot per token.
///
/// Slots are filled in call order. The slot→position map records the
/// sequence position each slot was encoded at; after a tree verification
/// several slots may share a position until [`KVCache::prune`] keeps one
/// path.
#[derive(Clone, Debug)]
pub struct KVCache {
    width: usize,
    capacity: usize,
    len: usize,
    positions: Vec<usize>,
    pub(crate) layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn new(num_layers: usize, width: usize, capacity: usize) -> Self {
        let layer = LayerCache { k: vec![0.0; capacity * width], v: vec![0.0; capacity * width] };
        Self { width, capacity, len: 0, positions: Vec::with_capacity(capacity), layers: vec![layer; num_layers] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Sequence position of every occupied slot.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn key(&self, layer: usize, slot: usize) -> &[f32] {
        &self.layers[layer].k[slot * self.width..(slot + 1) * self.width]
    }

    pub fn value(&self, layer: usize, slot: usize) -> &[f32] {
        &self.layers[layer].v[slot * self.width..(slot + 1) * self.width]
    }

    /// Marks `positions.len()` slots after the current end as occupied. Layer
    /// rows must already have been written.
    pub(crate) fn commit(&mut self, positions: &[usize]) {
        debug_assert!(self.len + positions.len() <= self.capacity);
        self.positions.extend_from_slice(positions);
        self.len += positions.len();
    }

    pub(crate) fn width(&self) -> usize {
        self.width
    }

    /// Drops every slot at index `len` and beyond.
    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            self.len = len;
            self.positions.truncate(len);
        }
    }

    /// Keeps only `keep_slots`, compacted to the front in the given order.
    ///
    /// Slots must be occupied and strictly increasing in both slot index and
    /// position.
    pub fn prune(&mut self, keep_slots: &[usize]) -> Result<()> {
        for (i, &s) in keep_slots.iter().enumerate() {
            if s >= self.len {
                return Err(usage_err!("slot {s} is not occupied (cache holds {})", self.len));
            }
            if i > 0 {
                let prev = keep_slots[i - 1];
                if s <= prev || self.positions[s] <= self.positions[prev] {
                    return Err(usage_err!("kept slots must increase in slot and position order"));
                }
            }
        }
        let w = self.width;
        for layer in &mut self.layers {
            for (dst, &src) in keep_slots.iter().enumerate() {
                if dst != src {
                    layer.k.copy_within(src * w..(src + 1) * w, dst * w);
                    layer.v.copy_within(src * w..(src + 1) * w, dst * w);
                }
            }
        }
        let positions: Vec<usize> = keep_slots.iter().map(|&s| self.positions[s]).collect();
        self.positions = positions;
        self.len = keep_slots.len();
        Ok(())
    }
}
