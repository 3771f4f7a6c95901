//! Block decomposition of a periodic 3D cell domain.
//!
//! The global domain is cut into equally sized blocks. Block ids are linear
//! indices in x-fastest lexicographic order, and blocks are handed out to ranks
//! as contiguous runs of ids.

use std::fmt;

use thiserror::Error;

/// Rank within the communicator that is current at the time of use.
pub type Rank = usize;

/// Default number of floating-point values carried per cell.
pub const DEFAULT_FIELDS_PER_CELL: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("block size {block} does not divide domain size {global} along axis {axis}")]
    DimensionMismatch { axis: usize, global: usize, block: usize },
    #[error("all cell dimensions and the field count must be positive")]
    ZeroSize,
    #[error("at least one process is required")]
    NoProcesses,
    #[error("block id {id} out of range for {count} blocks")]
    InvalidBlock { id: u64, count: u64 },
}

/// Shape of the global problem and how many processes share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DomainSpec {
    pub global_cells: [usize; 3],
    pub block_cells: [usize; 3],
    pub fields_per_cell: usize,
    pub num_processes: usize,
}

impl DomainSpec {
    pub fn new(global_cells: [usize; 3], block_cells: [usize; 3], num_processes: usize) -> Self {
        Self {
            global_cells,
            block_cells,
            fields_per_cell: DEFAULT_FIELDS_PER_CELL,
            num_processes,
        }
    }

    pub fn with_fields(mut self, fields_per_cell: usize) -> Self {
        self.fields_per_cell = fields_per_cell;
        self
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.global_cells.contains(&0) || self.block_cells.contains(&0) || self.fields_per_cell == 0 {
            return Err(GridError::ZeroSize);
        }
        if self.num_processes == 0 {
            return Err(GridError::NoProcesses);
        }
        for axis in 0..3 {
            let (global, block) = (self.global_cells[axis], self.block_cells[axis]);
            if global % block != 0 {
                return Err(GridError::DimensionMismatch { axis, global, block });
            }
        }
        Ok(())
    }

    /// Number of blocks along each axis.
    pub fn blocks_per_axis(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.global_cells[a] / self.block_cells[a])
    }

    pub fn num_blocks(&self) -> u64 {
        self.blocks_per_axis().iter().map(|&d| d as u64).product()
    }

    pub fn cells_per_block(&self) -> usize {
        self.block_cells.iter().product()
    }

    pub fn check_id(&self, id: BlockId) -> Result<(), GridError> {
        let count = self.num_blocks();
        if id.0 >= count {
            return Err(GridError::InvalidBlock { id: id.0, count });
        }
        Ok(())
    }

    pub fn block_coords(&self, id: BlockId) -> Result<[usize; 3], GridError> {
        self.check_id(id)?;
        let [bx, by, _] = self.blocks_per_axis();
        let i = id.0 as usize;
        Ok([i % bx, (i / bx) % by, i / (bx * by)])
    }

    /// Inverse of [`DomainSpec::block_coords`]; coordinates wrap periodically.
    pub fn block_at(&self, coords: [i64; 3]) -> BlockId {
        let dims = self.blocks_per_axis();
        let wrapped = [0, 1, 2].map(|a| coords[a].rem_euclid(dims[a] as i64) as u64);
        BlockId(wrapped[0] + dims[0] as u64 * (wrapped[1] + dims[1] as u64 * wrapped[2]))
    }

    /// Global cell coordinates of the first interior cell of a block.
    pub fn block_origin(&self, id: BlockId) -> Result<[usize; 3], GridError> {
        let c = self.block_coords(id)?;
        Ok([0, 1, 2].map(|a| c[a] * self.block_cells[a]))
    }
}

/// Linear block index, x fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}", self.0)
    }
}

/// One of the six faces of a block, in the fixed order -x, +x, -y, +y, -z, +z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Face {
    XMinus,
    XPlus,
    YMinus,
    YPlus,
    ZMinus,
    ZPlus,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMinus,
        Face::XPlus,
        Face::YMinus,
        Face::YPlus,
        Face::ZMinus,
        Face::ZPlus,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn axis(self) -> usize {
        self.index() / 2
    }

    pub fn is_plus(self) -> bool {
        self.index() % 2 == 1
    }

    pub fn opposite(self) -> Face {
        Face::ALL[self.index() ^ 1]
    }

    fn offset(self) -> [i64; 3] {
        let mut d = [0i64; 3];
        d[self.axis()] = if self.is_plus() { 1 } else { -1 };
        d
    }

    pub fn label(self) -> &'static str {
        ["-x", "+x", "-y", "+y", "-z", "+z"][self.index()]
    }
}

/// The six periodic face neighbors of a block in `Face::ALL` order.
pub fn neighbors_of(id: BlockId, spec: &DomainSpec) -> Result<[(Face, BlockId); 6], GridError> {
    let c = spec.block_coords(id)?;
    Ok(Face::ALL.map(|face| {
        let d = face.offset();
        let coords = [0, 1, 2].map(|a| c[a] as i64 + d[a]);
        (face, spec.block_at(coords))
    }))
}

/// Block ownership: every block has exactly one owner, and each rank's list is
/// sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMap {
    owners: Vec<Rank>,
    lists: Vec<Vec<BlockId>>,
}

impl BlockMap {
    /// Build from an owner per block. Panics if an owner is `>= num_ranks`.
    pub fn from_owners(owners: Vec<Rank>, num_ranks: usize) -> Self {
        let mut lists = vec![Vec::new(); num_ranks];
        for (i, &r) in owners.iter().enumerate() {
            assert!(r < num_ranks, "owner {r} out of range for {num_ranks} ranks");
            lists[r].push(BlockId(i as u64));
        }
        Self { owners, lists }
    }

    pub fn owner(&self, id: BlockId) -> Rank {
        self.owners[id.0 as usize]
    }

    pub fn blocks_of(&self, rank: Rank) -> &[BlockId] {
        self.lists.get(rank).map_or(&[], Vec::as_slice)
    }

    pub fn num_ranks(&self) -> usize {
        self.lists.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.owners.len()
    }

    pub fn owners(&self) -> &[Rank] {
        &self.owners
    }

    pub fn loads(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    /// Reassign one block. The destination list stays sorted.
    pub fn move_block(&mut self, id: BlockId, to: Rank) {
        let from = self.owners[id.0 as usize];
        self.lists[from].retain(|&b| b != id);
        let list = &mut self.lists[to];
        let pos = list.partition_point(|&b| b < id);
        list.insert(pos, id);
        self.owners[id.0 as usize] = to;
    }
}

/// Split the lexicographic block sequence into `num_processes` contiguous runs
/// whose lengths differ by at most one; rank r owns the r-th run.
pub fn partition_domain(spec: &DomainSpec) -> Result<BlockMap, GridError> {
    spec.validate()?;
    Ok(contiguous_map(spec.num_blocks() as usize, spec.num_processes))
}

pub(crate) fn contiguous_map(num_blocks: usize, num_ranks: usize) -> BlockMap {
    let base = num_blocks / num_ranks;
    let extra = num_blocks % num_ranks;
    let mut owners = Vec::with_capacity(num_blocks);
    for rank in 0..num_ranks {
        let len = base + usize::from(rank < extra);
        owners.extend(std::iter::repeat_n(rank, len));
    }
    BlockMap::from_owners(owners, num_ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &[u64]) -> Vec<BlockId> {
        v.iter().copied().map(BlockId).collect()
    }

    #[test]
    fn one_block_per_rank() {
        let map = partition_domain(&DomainSpec::new([4, 4, 1], [2, 2, 1], 4)).unwrap();
        for r in 0..4 {
            assert_eq!(map.blocks_of(r), ids(&[r as u64]).as_slice());
        }
    }

    #[test]
    fn two_blocks_per_rank() {
        let map = partition_domain(&DomainSpec::new([8, 4, 1], [2, 2, 1], 4)).unwrap();
        assert_eq!(map.blocks_of(0), ids(&[0, 1]).as_slice());
        assert_eq!(map.blocks_of(1), ids(&[2, 3]).as_slice());
        assert_eq!(map.blocks_of(2), ids(&[4, 5]).as_slice());
        assert_eq!(map.blocks_of(3), ids(&[6, 7]).as_slice());
    }

    #[test]
    fn uneven_split_front_loads() {
        let map = partition_domain(&DomainSpec::new([6, 2, 2], [2, 2, 2], 2)).unwrap();
        assert_eq!(map.blocks_of(0), ids(&[0, 1]).as_slice());
        assert_eq!(map.blocks_of(1), ids(&[2]).as_slice());
    }

    #[test]
    fn mismatched_block_size_is_rejected() {
        let err = partition_domain(&DomainSpec::new([5, 4, 4], [2, 2, 2], 1)).unwrap_err();
        assert_eq!(err, GridError::DimensionMismatch { axis: 0, global: 5, block: 2 });
        assert_eq!(
            partition_domain(&DomainSpec::new([4, 4, 4], [2, 2, 2], 0)).unwrap_err(),
            GridError::NoProcesses
        );
    }

    #[test]
    fn more_ranks_than_blocks_leaves_some_empty() {
        let map = partition_domain(&DomainSpec::new([2, 2, 2], [2, 2, 2], 3)).unwrap();
        assert_eq!(map.loads(), vec![1, 0, 0]);
    }

    #[test]
    fn single_block_wraps_onto_itself() {
        let spec = DomainSpec::new([3, 3, 3], [3, 3, 3], 1);
        let n = neighbors_of(BlockId(0), &spec).unwrap();
        assert!(n.iter().all(|&(_, b)| b == BlockId(0)));
    }

    #[test]
    fn period_two_wraps_both_ways() {
        let spec = DomainSpec::new([4, 2, 2], [2, 2, 2], 1);
        let n = neighbors_of(BlockId(0), &spec).unwrap();
        assert_eq!(n[0], (Face::XMinus, BlockId(1)));
        assert_eq!(n[1], (Face::XPlus, BlockId(1)));
    }

    #[test]
    fn two_by_two_neighbors() {
        let spec = DomainSpec::new([4, 4, 1], [2, 2, 1], 1);
        let got: Vec<u64> = neighbors_of(BlockId(0), &spec).unwrap().iter().map(|(_, b)| b.0).collect();
        assert_eq!(got, vec![1, 1, 2, 2, 0, 0]);
    }

    #[test]
    fn invalid_id() {
        let spec = DomainSpec::new([4, 4, 1], [2, 2, 1], 1);
        assert_eq!(
            neighbors_of(BlockId(4), &spec).unwrap_err(),
            GridError::InvalidBlock { id: 4, count: 4 }
        );
    }

    #[test]
    fn move_block_keeps_lists_sorted() {
        let mut map = contiguous_map(6, 3);
        map.move_block(BlockId(0), 2);
        assert_eq!(map.blocks_of(2), ids(&[0, 4, 5]).as_slice());
        assert_eq!(map.owner(BlockId(0)), 2);
        assert_eq!(map.loads(), vec![1, 2, 3]);
    }

    fn arb_spec() -> impl Strategy<Value = DomainSpec> {
        (
            prop::array::uniform3(1usize..5),
            prop::array::uniform3(1usize..4),
            1usize..20,
        )
            .prop_map(|(blocks, cells, n)| {
                let global = [0, 1, 2].map(|a| blocks[a] * cells[a]);
                DomainSpec::new(global, cells, n)
            })
    }

    proptest! {
        #[test]
        fn partition_covers_every_block_once(spec in arb_spec()) {
            let map = partition_domain(&spec).unwrap();
            let mut all: Vec<BlockId> = (0..spec.num_processes)
                .flat_map(|r| map.blocks_of(r).to_vec())
                .collect();
            all.sort();
            let expected: Vec<BlockId> = (0..spec.num_blocks()).map(BlockId).collect();
            prop_assert_eq!(all, expected);
            let loads = map.loads();
            prop_assert!(loads.iter().max().unwrap() - loads.iter().min().unwrap() <= 1);
            prop_assert_eq!(&map, &partition_domain(&spec).unwrap());
        }

        #[test]
        fn neighbor_relation_is_symmetric(spec in arb_spec(), pick in any::<u64>()) {
            let id = BlockId(pick % spec.num_blocks());
            for (face, nb) in neighbors_of(id, &spec).unwrap() {
                let back = neighbors_of(nb, &spec).unwrap()[face.opposite().index()].1;
                prop_assert_eq!(back, id);
            }
        }

        #[test]
        fn coords_round_trip(spec in arb_spec(), pick in any::<u64>()) {
            let id = BlockId(pick % spec.num_blocks());
            let c = spec.block_coords(id).unwrap();
            prop_assert_eq!(spec.block_at(c.map(|v| v as i64)), id);
        }
    }
}
