//! Deterministic 7-point diffusion stencil over `F` independent fields.
//!
//! This is the checkpointed payload. Every update uses a fixed loop order and a
//! fixed neighbor summation order, so a block's trajectory is bit-identical no
//! matter which rank owns it or how often it was serialized in between.

use thiserror::Error;

use crate::grid::{neighbors_of, BlockId, BlockMap, DomainSpec, Face, GridError, Rank};
use crate::runtime::{CommError, RankHandle, Tag};
use crate::snapshot::codec::{crc64, Reader};
use crate::snapshot::SnapshotError;

/// Largest stable time step for the 3D 7-point stencil with unit spacing.
pub const MAX_STABLE_DT: f64 = 1.0 / 6.0;
pub const DEFAULT_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("time step {0} violates the stability bound 0 < dt <= 1/6")]
    UnstableTimeStep(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// One block's interior fields plus a one-cell halo on each face.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockData {
    pub id: BlockId,
    /// Rank that owned the block when it was last serialized.
    pub origin_rank: Rank,
    dims: [usize; 3],
    fields: Vec<Vec<f64>>,
    halos: [Vec<f64>; 6],
    /// Opaque per-block extension bytes, carried through snapshots unchanged.
    pub metadata: Vec<u8>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_hash(g: [usize; 3], field: usize) -> u64 {
    let mut h = splitmix64(field as u64);
    for c in g {
        h = splitmix64(h ^ c as u64);
    }
    h
}

fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn plane_dims(dims: [usize; 3], axis: usize) -> (usize, usize) {
    match axis {
        0 => (dims[2], dims[1]),
        1 => (dims[2], dims[0]),
        _ => (dims[1], dims[0]),
    }
}

fn plane_len(dims: [usize; 3], axis: usize) -> usize {
    let (a, b) = plane_dims(dims, axis);
    a * b
}

impl BlockData {
    pub fn new(id: BlockId, origin_rank: Rank, dims: [usize; 3], fields: Vec<Vec<f64>>) -> Self {
        let cells: usize = dims.iter().product();
        assert!(fields.iter().all(|f| f.len() == cells), "field length must match dims");
        let nf = fields.len();
        let halos = Face::ALL.map(|face| vec![0.0; nf * plane_len(dims, face.axis())]);
        Self {
            id,
            origin_rank,
            dims,
            fields,
            halos,
            metadata: Vec::new(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, f: usize) -> &[f64] {
        &self.fields[f]
    }

    pub fn field_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.fields[f]
    }

    pub fn cells(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Interior layer adjacent to `face`, laid out field-major then by the two
    /// remaining axes (slowest first).
    pub fn boundary_plane(&self, face: Face) -> Vec<f64> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::with_capacity(self.fields.len() * plane_len(self.dims, face.axis()));
        let edge = |n: usize| if face.is_plus() { n - 1 } else { 0 };
        for field in &self.fields {
            match face.axis() {
                0 => {
                    let x = edge(nx);
                    for z in 0..nz {
                        for y in 0..ny {
                            out.push(field[self.idx(x, y, z)]);
                        }
                    }
                }
                1 => {
                    let y = edge(ny);
                    for z in 0..nz {
                        for x in 0..nx {
                            out.push(field[self.idx(x, y, z)]);
                        }
                    }
                }
                _ => {
                    let z = edge(nz);
                    for y in 0..ny {
                        for x in 0..nx {
                            out.push(field[self.idx(x, y, z)]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Overwrite the halo on `face`. Panics on a length mismatch.
    pub fn set_halo(&mut self, face: Face, plane: &[f64]) {
        let halo = &mut self.halos[face.index()];
        assert_eq!(halo.len(), plane.len(), "halo size mismatch on {}", face.label());
        halo.copy_from_slice(plane);
    }

    pub fn halo(&self, face: Face) -> &[f64] {
        &self.halos[face.index()]
    }

    /// One explicit update `u' = u + dt * (sum of 6 face neighbors - 6u)`.
    /// Halos must hold the neighbors' boundary planes for the current step.
    pub fn step(&mut self, dt: f64) -> Result<(), WorkloadError> {
        if !(dt > 0.0 && dt <= MAX_STABLE_DT) {
            return Err(WorkloadError::UnstableTimeStep(dt));
        }
        let [nx, ny, nz] = self.dims;
        let px = plane_len(self.dims, 0);
        let py = plane_len(self.dims, 1);
        let pz = plane_len(self.dims, 2);
        for f in 0..self.fields.len() {
            let u = &self.fields[f];
            let h = &self.halos;
            let mut next = vec![0.0; u.len()];
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let c = u[self.idx(x, y, z)];
                        let xm = if x > 0 { u[self.idx(x - 1, y, z)] } else { h[0][f * px + z * ny + y] };
                        let xp = if x + 1 < nx { u[self.idx(x + 1, y, z)] } else { h[1][f * px + z * ny + y] };
                        let ym = if y > 0 { u[self.idx(x, y - 1, z)] } else { h[2][f * py + z * nx + x] };
                        let yp = if y + 1 < ny { u[self.idx(x, y + 1, z)] } else { h[3][f * py + z * nx + x] };
                        let zm = if z > 0 { u[self.idx(x, y, z - 1)] } else { h[4][f * pz + y * nx + x] };
                        let zp = if z + 1 < nz { u[self.idx(x, y, z + 1)] } else { h[5][f * pz + y * nx + x] };
                        let sum = xm + xp + ym + yp + zm + zp;
                        next[self.idx(x, y, z)] = c + dt * (sum - 6.0 * c);
                    }
                }
            }
            self.fields[f] = next;
        }
        Ok(())
    }

    /// Canonical payload bytes of this block (see [`encode_blocks`]).
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.id.0.to_le_bytes());
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        for field in &self.fields {
            for v in field {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.metadata);
    }

    pub fn encoded_len(&self) -> usize {
        8 + 12 + 4 + 8 * self.fields.len() * self.cells() + 4 + self.metadata.len()
    }

    fn decode_from(r: &mut Reader<'_>, origin_rank: Rank) -> Result<Self, SnapshotError> {
        let id = BlockId(r.u64()?);
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let nf = r.u32()? as usize;
        let cells = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(SnapshotError::Truncated)?;
        let mut fields = Vec::with_capacity(nf.min(64));
        for _ in 0..nf {
            let raw = r.take(cells.checked_mul(8).ok_or(SnapshotError::Truncated)?)?;
            fields.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        let meta_len = r.u32()? as usize;
        let metadata = r.take(meta_len)?.to_vec();
        let mut block = BlockData::new(id, origin_rank, dims, fields);
        block.metadata = metadata;
        Ok(block)
    }

    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut bytes);
        crc64(&bytes)
    }
}

/// Fill a block from a hash of global cell coordinates and field index, so the
/// values depend only on `(id, spec, seed)`.
pub fn init_block(id: BlockId, spec: &DomainSpec, seed: u64, owner: Rank) -> Result<BlockData, GridError> {
    let origin = spec.block_origin(id)?;
    let dims = spec.block_cells;
    let [nx, ny, nz] = dims;
    let fields = (0..spec.fields_per_cell)
        .map(|f| {
            let mut v = Vec::with_capacity(nx * ny * nz);
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let g = [origin[0] + x, origin[1] + y, origin[2] + z];
                        v.push(unit_interval(splitmix64(seed ^ cell_hash(g, f))));
                    }
                }
            }
            v
        })
        .collect();
    Ok(BlockData::new(id, owner, dims, fields))
}

/// Block payload: `count u32`, then each block's canonical encoding.
pub fn encode_blocks<'a>(blocks: impl IntoIterator<Item = &'a BlockData>) -> Vec<u8> {
    let blocks: Vec<&BlockData> = blocks.into_iter().collect();
    let mut out = Vec::with_capacity(4 + blocks.iter().map(|b| b.encoded_len()).sum::<usize>());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        b.encode_into(&mut out);
    }
    out
}

pub fn decode_blocks(bytes: &[u8], origin_rank: Rank) -> Result<Vec<BlockData>, SnapshotError> {
    let mut r = Reader::new(bytes);
    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        blocks.push(BlockData::decode_from(&mut r, origin_rank)?);
    }
    if !r.is_empty() {
        return Err(SnapshotError::TrailingBytes);
    }
    Ok(blocks)
}

/// Order-independent digest: per-block CRC-64 combined in BlockId order, then
/// the step counter.
pub fn state_checksum<'a>(blocks: impl IntoIterator<Item = &'a BlockData>, step: u64) -> u64 {
    let mut per_block: Vec<(BlockId, u64)> = blocks.into_iter().map(|b| (b.id, b.checksum())).collect();
    per_block.sort_unstable();
    let mut bytes = Vec::with_capacity(per_block.len() * 16 + 8);
    for (id, crc) in per_block {
        bytes.extend_from_slice(&id.0.to_le_bytes());
        bytes.extend_from_slice(&crc.to_le_bytes());
    }
    bytes.extend_from_slice(&step.to_le_bytes());
    crc64(&bytes)
}

/// Fill every local block's halos. Same-rank neighbors are copied directly;
/// each remote (block, face) pair costs one message.
pub async fn exchange_ghosts(
    blocks: &mut [BlockData],
    map: &BlockMap,
    spec: &DomainSpec,
    rt: &RankHandle,
) -> Result<(), CommError> {
    let me = rt.rank();
    let position = |id: BlockId| blocks.iter().position(|b| b.id == id);
    let mut local_copies = Vec::new();
    for b in blocks.iter() {
        for (face, nb) in neighbors_of(b.id, spec).expect("owned block ids are valid") {
            if map.owner(nb) == me {
                continue;
            }
            let plane = b.boundary_plane(face);
            rt.send(map.owner(nb), Tag::ghost(nb, face.opposite()), f64s_to_bytes(&plane))
                .await?;
        }
    }
    for (i, b) in blocks.iter().enumerate() {
        for (face, nb) in neighbors_of(b.id, spec).expect("owned block ids are valid") {
            if map.owner(nb) == me {
                let src = position(nb).expect("local neighbor must be held by this rank");
                local_copies.push((i, face, blocks[src].boundary_plane(face.opposite())));
            }
        }
    }
    rt.memcopy_cost(local_copies.iter().map(|(_, _, p)| p.len() * 8).sum());
    for (i, face, plane) in local_copies {
        blocks[i].set_halo(face, &plane);
    }
    for block in blocks.iter_mut() {
        let id = block.id;
        for (face, nb) in neighbors_of(id, spec).expect("owned block ids are valid") {
            let owner = map.owner(nb);
            if owner == me {
                continue;
            }
            let bytes = rt.recv(owner, Tag::ghost(id, face)).await?;
            block.set_halo(face, &bytes_to_f64s(&bytes));
        }
    }
    Ok(())
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Fill halos of blocks that are all held locally, without a runtime.
pub fn fill_local_halos(blocks: &mut [BlockData], spec: &DomainSpec) {
    let mut planes = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        for (face, nb) in neighbors_of(b.id, spec).expect("valid block id") {
            let src = blocks.iter().find(|c| c.id == nb).expect("all blocks must be local");
            planes.push((i, face, src.boundary_plane(face.opposite())));
        }
    }
    for (i, face, plane) in planes {
        blocks[i].set_halo(face, &plane);
    }
}
