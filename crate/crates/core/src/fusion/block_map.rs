use crate::frame::Rgb;

pub const BLOCK_SIDE: usize = 8;
pub const BLOCK_VOXELS: usize = BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE;

/// Integer block coordinate; block `b` holds voxels `8b .. 8b+7` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct BlockCoord(pub [i32; 3]);

impl BlockCoord {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        Self([x, y, z])
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Self([self.0[0] + dx, self.0[1] + dy, self.0[2] + dz])
    }

    /// Global index of the block's first voxel.
    pub fn origin_voxel(self) -> [i64; 3] {
        self.0.map(|c| c as i64 * BLOCK_SIDE as i64)
    }

    fn spatial_hash(self) -> u64 {
        let [x, y, z] = self.0;
        let h = (x as i64).wrapping_mul(73856093) ^ (y as i64).wrapping_mul(19349669) ^ (z as i64).wrapping_mul(83492791);
        h as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsdfVoxel {
    /// Truncated signed distance normalized by the truncation band, in `[-1, 1]`.
    pub sdf: f32,
    pub weight: f32,
    pub color: Rgb,
    /// Largest accumulated motion (meters) observed at this voxel.
    pub motion: f32,
}

impl Default for TsdfVoxel {
    fn default() -> Self {
        Self {
            sdf: 1.0,
            weight: 0.0,
            color: [0; 3],
            motion: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub coord: BlockCoord,
    pub voxels: Box<[TsdfVoxel; BLOCK_VOXELS]>,
    pub dirty: bool,
    /// Index of the frame that last changed a voxel.
    pub last_update: u64,
}

impl VoxelBlock {
    pub fn new(coord: BlockCoord) -> Self {
        Self {
            coord,
            voxels: Box::new([TsdfVoxel::default(); BLOCK_VOXELS]),
            dirty: false,
            last_update: 0,
        }
    }

    #[inline]
    pub fn index(x: usize, y: usize, z: usize) -> usize {
        x + BLOCK_SIDE * (y + BLOCK_SIDE * z)
    }

    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &TsdfVoxel {
        &self.voxels[Self::index(x, y, z)]
    }

    #[inline]
    pub fn voxel_mut(&mut self, x: usize, y: usize, z: usize) -> &mut TsdfVoxel {
        &mut self.voxels[Self::index(x, y, z)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Empty,
    Tombstone,
    Full(usize),
}

/// Open-addressed spatial hash of voxel blocks with linear probing.
#[derive(Debug, Clone)]
pub struct VoxelBlockMap {
    slots: Vec<Slot>,
    blocks: Vec<VoxelBlock>,
    tombstones: usize,
    /// Edge length of a voxel, meters.
    pub voxel_size: f64,
    /// Truncation distance μ, meters.
    pub truncation: f64,
}

impl VoxelBlockMap {
    pub fn new(voxel_size: f64, truncation: f64) -> Self {
        Self::with_capacity(voxel_size, truncation, 64)
    }

    pub fn with_capacity(voxel_size: f64, truncation: f64, capacity: usize) -> Self {
        Self {
            slots: vec![Slot::Empty; (capacity * 2).next_power_of_two().max(16)],
            blocks: Vec::with_capacity(capacity),
            tombstones: 0,
            voxel_size,
            truncation,
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Slot holding `coord`, or the slot where it would be inserted.
    fn probe(&self, coord: BlockCoord) -> (usize, bool) {
        let mask = self.slots.len() - 1;
        let mut i = coord.spatial_hash() as usize & mask;
        let mut first_free = None;
        loop {
            match self.slots[i] {
                Slot::Empty => return (first_free.unwrap_or(i), false),
                Slot::Tombstone => {
                    first_free.get_or_insert(i);
                }
                Slot::Full(b) if self.blocks[b].coord == coord => return (i, true),
                Slot::Full(_) => {}
            }
            i = (i + 1) & mask;
        }
    }

    fn grow_if_needed(&mut self) {
        if (self.blocks.len() + self.tombstones + 1) * 2 <= self.slots.len() {
            return;
        }
        let cap = if self.blocks.len() * 4 >= self.slots.len() {
            self.slots.len() * 2
        } else {
            self.slots.len()
        };
        self.slots = vec![Slot::Empty; cap];
        self.tombstones = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            let (i, _) = self.probe(block.coord);
            self.slots[i] = Slot::Full(b);
        }
    }

    pub fn contains(&self, coord: BlockCoord) -> bool {
        self.probe(coord).1
    }

    pub fn get(&self, coord: BlockCoord) -> Option<&VoxelBlock> {
        match self.probe(coord) {
            (i, true) => match self.slots[i] {
                Slot::Full(b) => Some(&self.blocks[b]),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn get_mut(&mut self, coord: BlockCoord) -> Option<&mut VoxelBlock> {
        match self.probe(coord) {
            (i, true) => match self.slots[i] {
                Slot::Full(b) => Some(&mut self.blocks[b]),
                _ => None,
            },
            _ => None,
        }
    }

    /// Inserts or replaces a block; returns the replaced one.
    pub fn insert(&mut self, block: VoxelBlock) -> Option<VoxelBlock> {
        if let Some(existing) = self.get_mut(block.coord) {
            return Some(std::mem::replace(existing, block));
        }
        self.grow_if_needed();
        let (i, _) = self.probe(block.coord);
        if self.slots[i] == Slot::Tombstone {
            self.tombstones -= 1;
        }
        self.slots[i] = Slot::Full(self.blocks.len());
        self.blocks.push(block);
        None
    }

    /// Returns the block at `coord`, creating an empty one if needed, and whether it was created.
    pub fn get_or_allocate(&mut self, coord: BlockCoord) -> (&mut VoxelBlock, bool) {
        let created = !self.contains(coord);
        if created {
            self.insert(VoxelBlock::new(coord));
        }
        (self.get_mut(coord).expect("block just ensured"), created)
    }

    pub fn remove(&mut self, coord: BlockCoord) -> Option<VoxelBlock> {
        let (i, found) = self.probe(coord);
        if !found {
            return None;
        }
        let Slot::Full(b) = self.slots[i] else { return None };
        self.slots[i] = Slot::Tombstone;
        self.tombstones += 1;
        let last = self.blocks.len() - 1;
        if b != last {
            let moved = self.blocks[last].coord;
            let (j, _) = self.probe(moved);
            self.slots[j] = Slot::Full(b);
        }
        Some(self.blocks.swap_remove(b))
    }

    /// Removes the listed blocks; returns how many existed.
    pub fn remove_blocks(&mut self, coords: &[BlockCoord]) -> usize {
        coords.iter().filter(|c| self.remove(**c).is_some()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VoxelBlock> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut VoxelBlock> {
        self.blocks.iter_mut()
    }

    pub fn coords_sorted(&self) -> Vec<BlockCoord> {
        let mut c: Vec<BlockCoord> = self.blocks.iter().map(|b| b.coord).collect();
        c.sort();
        c
    }

    /// Voxel at a global lattice index.
    pub fn voxel(&self, g: [i64; 3]) -> Option<&TsdfVoxel> {
        let s = BLOCK_SIDE as i64;
        let coord = BlockCoord(g.map(|v| v.div_euclid(s) as i32));
        let [x, y, z] = g.map(|v| v.rem_euclid(s) as usize);
        self.get(coord).map(|b| b.voxel(x, y, z))
    }

    /// World position of a voxel's lattice point.
    pub fn voxel_position(&self, g: [i64; 3]) -> [f64; 3] {
        g.map(|v| v as f64 * self.voxel_size)
    }

    /// Blocks marked dirty by a frame with index `>= since`; their flags are cleared.
    pub fn dirty_sweep(&mut self, since: u64) -> Vec<BlockCoord> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            if b.dirty && b.last_update >= since {
                b.dirty = false;
                out.push(b.coord);
            }
        }
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn remove_nonexistent_and_insert_remove() {
        let mut m = VoxelBlockMap::new(0.01, 0.04);
        assert_eq!(m.remove_blocks(&[BlockCoord::new(1, 2, 3)]), 0);
        m.insert(VoxelBlock::new(BlockCoord::new(1, 2, 3)));
        assert!(m.contains(BlockCoord::new(1, 2, 3)));
        assert_eq!(m.remove_blocks(&[BlockCoord::new(1, 2, 3), BlockCoord::new(1, 2, 3)]), 1);
        assert!(m.get(BlockCoord::new(1, 2, 3)).is_none());
    }

    #[test]
    fn voxel_lookup_handles_negative_indices() {
        let mut m = VoxelBlockMap::new(0.01, 0.04);
        let (b, created) = m.get_or_allocate(BlockCoord::new(-1, 0, 0));
        assert!(created);
        b.voxel_mut(7, 0, 3).sdf = -0.25;
        assert_eq!(m.voxel([-1, 0, 3]).unwrap().sdf, -0.25);
        assert!(m.voxel([0, 0, 3]).is_none());
        let (_, created) = m.get_or_allocate(BlockCoord::new(-1, 0, 0));
        assert!(!created);
    }

    #[test]
    fn sweep_clears_on_read() {
        let mut m = VoxelBlockMap::new(0.01, 0.04);
        assert!(m.dirty_sweep(0).is_empty());
        for (i, c) in [BlockCoord::new(0, 0, 0), BlockCoord::new(3, 1, 1)].into_iter().enumerate() {
            let (b, _) = m.get_or_allocate(c);
            b.dirty = true;
            b.last_update = 5 + i as u64;
        }
        assert_eq!(m.dirty_sweep(6), vec![BlockCoord::new(3, 1, 1)]);
        assert_eq!(m.dirty_sweep(0), vec![BlockCoord::new(0, 0, 0)]);
        assert!(m.dirty_sweep(0).is_empty());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert([i32; 3], f32),
        Remove([i32; 3]),
        Lookup([i32; 3]),
    }

    fn op() -> impl Strategy<Value = Op> {
        let c = prop::array::uniform3(-4i32..4);
        prop_oneof![
            (c.clone(), -1.0f32..1.0).prop_map(|(c, v)| Op::Insert(c, v)),
            c.clone().prop_map(Op::Remove),
            c.prop_map(Op::Lookup),
        ]
    }

    proptest! {
        #[test]
        fn matches_reference_map(ops in prop::collection::vec(op(), 1..400)) {
            let mut m = VoxelBlockMap::with_capacity(0.01, 0.04, 1);
            let mut model: BTreeMap<[i32; 3], f32> = BTreeMap::new();
            for op in ops {
                match op {
                    Op::Insert(c, v) => {
                        let mut b = VoxelBlock::new(BlockCoord(c));
                        b.voxels[0].sdf = v;
                        let old = m.insert(b).map(|b| b.voxels[0].sdf);
                        prop_assert_eq!(old, model.insert(c, v));
                    }
                    Op::Remove(c) => {
                        let got = m.remove(BlockCoord(c)).map(|b| b.voxels[0].sdf);
                        prop_assert_eq!(got, model.remove(&c));
                    }
                    Op::Lookup(c) => {
                        prop_assert_eq!(m.get(BlockCoord(c)).map(|b| b.voxels[0].sdf), model.get(&c).copied());
                    }
                }
                prop_assert_eq!(m.len(), model.len());
            }
            let coords: Vec<[i32; 3]> = m.coords_sorted().into_iter().map(|c| c.0).collect();
            prop_assert_eq!(coords, model.keys().copied().collect::<Vec<_>>());
        }
    }
}
