//! Binary sum-tree over non-negative leaf masses.
//!
//! Leaves live in a ring: inserts go to the write cursor and overwrite the
//! oldest slot once the tree is full. Internal nodes are always recomputed as
//! `left + right` on the way up, so parent/children consistency is exact rather
//! than accumulated through deltas.

use rand::Rng;

use crate::error::{Error, Result};

/// How `count` draws are spread over the total mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawScheme {
    /// Independent draws, each uniform over `[0, total)`.
    #[default]
    Iid,
    /// One draw per equal-width segment of `[0, total)`.
    Stratified,
}

#[derive(Debug, Clone)]
pub struct SumTree {
    capacity: usize,
    /// First leaf position in `nodes`; a power of two.
    leaf_base: usize,
    /// 1-based heap layout, `nodes[0]` unused.
    nodes: Vec<f64>,
    size: usize,
    write_cursor: usize,
}

impl SumTree {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Domain("sum-tree capacity must be positive".into()));
        }
        let leaf_base = capacity.next_power_of_two();
        Ok(Self {
            capacity,
            leaf_base,
            nodes: vec![0.0; 2 * leaf_base],
            size: 0,
            write_cursor: 0,
        })
    }

    /// Rebuild a tree from stored leaves (slot order) and a write cursor.
    pub fn restore(capacity: usize, leaves: &[f64], write_cursor: usize) -> Result<Self> {
        let mut tree = Self::new(capacity)?;
        if leaves.len() > capacity || write_cursor >= capacity {
            return Err(Error::Domain(format!(
                "{} leaves / cursor {write_cursor} do not fit capacity {capacity}",
                leaves.len()
            )));
        }
        for &value in leaves {
            tree.insert(value)?;
        }
        tree.write_cursor = write_cursor;
        Ok(tree)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Slot the next insert will write to.
    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    /// Total mass over all occupied leaves.
    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf value at `slot`.
    pub fn get(&self, slot: usize) -> Result<f64> {
        self.check_occupied(slot)?;
        Ok(self.nodes[self.leaf_base + slot])
    }

    /// Occupied leaf values in slot order.
    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.leaf_base..self.leaf_base + self.size]
    }

    /// `leaf / total` for an occupied slot.
    pub fn probability(&self, slot: usize) -> Result<f64> {
        let value = self.get(slot)?;
        let total = self.total();
        if total <= 0.0 {
            return Err(Error::State("sum-tree has zero total mass".into()));
        }
        Ok(value / total)
    }

    /// Store `value` at the write cursor, evicting the oldest leaf when full.
    pub fn insert(&mut self, value: f64) -> Result<usize> {
        check_value(value)?;
        let slot = self.write_cursor;
        self.set_leaf(slot, value);
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        self.size = (self.size + 1).min(self.capacity);
        Ok(slot)
    }

    pub fn update(&mut self, slot: usize, value: f64) -> Result<()> {
        self.check_occupied(slot)?;
        check_value(value)?;
        self.set_leaf(slot, value);
        Ok(())
    }

    /// Draw `count` slots i.i.d. with probability `leaf / total`.
    pub fn sample_indices<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.check_sampleable(count)?;
        let total = self.total();
        Ok((0..count)
            .map(|_| self.find_prefix(rng.random::<f64>() * total))
            .collect())
    }

    /// Draw one slot from each of `count` equal-mass segments.
    pub fn sample_stratified<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        self.check_sampleable(count)?;
        let segment = self.total() / count as f64;
        Ok((0..count)
            .map(|k| self.find_prefix((k as f64 + rng.random::<f64>()) * segment))
            .collect())
    }

    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        scheme: DrawScheme,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        match scheme {
            DrawScheme::Iid => self.sample_indices(count, rng),
            DrawScheme::Stratified => self.sample_stratified(count, rng),
        }
    }

    /// Leaf whose cumulative-mass interval contains `mass`.
    ///
    /// Never lands on a zero-mass leaf: a subtree with zero mass is never
    /// entered, even when rounding pushes `mass` past the total.
    fn find_prefix(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaf_base {
            let left = 2 * node;
            let left_sum = self.nodes[left];
            if (mass < left_sum && left_sum > 0.0) || self.nodes[left + 1] <= 0.0 {
                node = left;
            } else {
                mass -= left_sum;
                node = left + 1;
            }
        }
        node - self.leaf_base
    }

    fn set_leaf(&mut self, slot: usize, value: f64) {
        let mut node = self.leaf_base + slot;
        self.nodes[node] = value;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    fn check_occupied(&self, slot: usize) -> Result<()> {
        if slot >= self.size {
            return Err(Error::Index {
                index: slot,
                size: self.size,
            });
        }
        Ok(())
    }

    fn check_sampleable(&self, count: usize) -> Result<()> {
        if count == 0 {
            return Err(Error::Domain("sample count must be at least 1".into()));
        }
        if self.is_empty() {
            return Err(Error::State("cannot sample from an empty sum-tree".into()));
        }
        if self.total() <= 0.0 {
            return Err(Error::State("sum-tree has zero total mass".into()));
        }
        Ok(())
    }

    #[cfg(test)]
    fn internal_node(&self, node: usize) -> f64 {
        self.nodes[node]
    }
}

fn check_value(value: f64) -> Result<()> {
    if !(value >= 0.0) || !value.is_finite() {
        return Err(Error::Domain(format!(
            "sum-tree values must be finite and non-negative, got {value}"
        )));
    }
    Ok(())
}
