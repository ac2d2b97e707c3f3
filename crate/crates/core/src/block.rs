//! Block, page and metadata-key arithmetic.
//!
//! A block is a logical byte array of `data_size` bytes, fragmented into
//! fixed `page_size` pages. Internally the block is padded to
//! `adjusted_size`, the next power of two, so the metadata tree over it is
//! a full binary tree. Every tree node is addressed by a 16-byte content
//! key derived from `(block_id, offset, size, version)`.
//!
//! Everything in this module is pure arithmetic; no I/O happens here.

use std::fmt;

use sha2::{Digest, Sha256};

/// Smallest page size accepted for a block.
pub const MIN_PAGE_SIZE: u64 = 4096;

/// Largest supported block size. Keeps `next_power_of_two` away from
/// u64 overflow with plenty of headroom.
pub const MAX_DATA_SIZE: u64 = 1 << 62;

/// Globally unique identifier of a block, assigned at allocation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u128);

impl BlockId {
    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        BlockId(u128::from_be_bytes(b))
    }

    pub fn parse_hex(s: &str) -> Option<Self> {
        let raw = hex::decode(s).ok()?;
        let arr: [u8; 16] = raw.try_into().ok()?;
        Some(BlockId::from_bytes(arr))
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.to_bytes()))
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockId({self})")
    }
}

/// Identifier of one stored page payload. Chosen at random by the writer.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageId(pub u128);

impl PageId {
    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }

    pub fn from_bytes(b: [u8; 16]) -> Self {
        PageId(u128::from_be_bytes(b))
    }
}

impl fmt::Debug for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PageId({})", hex::encode(self.to_bytes()))
    }
}

/// Block version counter. Version 0 means "allocated, never written";
/// published versions are assigned from 1 upward, with holes where a
/// write aborted.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Default)]
pub struct Version(pub u64);

impl Version {
    pub const ZERO: Version = Version(0);
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 16-byte content key of a metadata tree node.
///
/// The all-zero value is reserved as [`NULL_KEY`]: it marks a subtree that
/// has never been written and therefore reads as zeros. Hashing never
/// produces it (see [`node_key`]).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeKey(pub [u8; 16]);

/// Reserved key for never-written subtrees.
pub const NULL_KEY: NodeKey = NodeKey([0u8; 16]);

impl NodeKey {
    pub fn is_null(self) -> bool {
        self == NULL_KEY
    }
}

impl fmt::Debug for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeKey({})", hex::encode(self.0))
    }
}

impl fmt::Display for NodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

/// A `(offset, size)` byte range within a block.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ByteRange {
    pub offset: u64,
    pub size: u64,
}

impl ByteRange {
    pub fn new(offset: u64, size: u64) -> Self {
        ByteRange { offset, size }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.size
    }

    /// True when `[offset, end)` and the other range share at least one byte.
    pub fn overlaps(&self, other: &ByteRange) -> bool {
        self.offset < other.end() && other.offset < self.end()
    }

    /// True when this range fully contains `other`.
    pub fn contains(&self, other: &ByteRange) -> bool {
        self.offset <= other.offset && other.end() <= self.end()
    }
}

/// Geometry of one allocated block.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BlockDescriptor {
    pub block_id: BlockId,
    /// Page size in bytes; a power of two, at least [`MIN_PAGE_SIZE`].
    pub page_size: u64,
    /// Logical, user-visible size in bytes.
    pub data_size: u64,
    /// `data_size` rounded up to the next power of two.
    pub adjusted_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GeometryError {
    #[error("page size {0} is not a power of two >= {MIN_PAGE_SIZE}")]
    BadPageSize(u64),
    #[error("data size {data_size} out of range for page size {page_size}")]
    BadDataSize { page_size: u64, data_size: u64 },
}

impl BlockDescriptor {
    /// Validates geometry and derives the adjusted size.
    pub fn new(block_id: BlockId, page_size: u64, data_size: u64) -> Result<Self, GeometryError> {
        if !page_size.is_power_of_two() || page_size < MIN_PAGE_SIZE {
            return Err(GeometryError::BadPageSize(page_size));
        }
        if data_size < page_size || data_size > MAX_DATA_SIZE {
            return Err(GeometryError::BadDataSize { page_size, data_size });
        }
        Ok(BlockDescriptor {
            block_id,
            page_size,
            data_size,
            adjusted_size: adjusted_size(data_size),
        })
    }

    /// Rebuilds a descriptor received over the wire without re-deriving
    /// fields. Callers must pass values produced by [`BlockDescriptor::new`].
    pub fn from_parts(block_id: BlockId, page_size: u64, data_size: u64, adjusted_size: u64) -> Self {
        BlockDescriptor { block_id, page_size, data_size, adjusted_size }
    }

    /// Number of leaf pages in the metadata tree (over the adjusted size).
    pub fn leaf_count(&self) -> u64 {
        self.adjusted_size / self.page_size
    }

    /// Number of edges from root to leaf: `log2(leaf_count)`.
    pub fn tree_depth(&self) -> u32 {
        self.leaf_count().trailing_zeros()
    }

    /// True when the range lies within the logical block and is non-empty.
    pub fn range_in_bounds(&self, range: &ByteRange) -> bool {
        range.size >= 1 && range.offset.checked_add(range.size).is_some_and(|end| end <= self.data_size)
    }

    /// True when the range is aligned to whole pages.
    pub fn range_page_aligned(&self, range: &ByteRange) -> bool {
        range.offset % self.page_size == 0 && range.size % self.page_size == 0
    }
}

/// Smallest power of two greater than or equal to `data_size`.
///
/// Powers of two map to themselves, so a 1 TB allocation stays 1 TB.
pub fn adjusted_size(data_size: u64) -> u64 {
    debug_assert!(data_size >= 1 && data_size <= MAX_DATA_SIZE);
    data_size.next_power_of_two()
}

/// First and last page index touched by `range` (inclusive on both ends).
pub fn range_to_pages(range: ByteRange, page_size: u64) -> (u64, u64) {
    debug_assert!(range.size >= 1);
    let first = range.offset / page_size;
    let last = (range.offset + range.size - 1) / page_size;
    (first, last)
}

/// Content key of the tree node covering `(offset, size)` at `version`.
///
/// The key is the first 16 bytes of SHA-256 over the canonical 40-byte
/// preimage `block_id (16) || offset (8 BE) || size (8 BE) || version (8 BE)`.
/// This layout is a frozen wire/storage contract. Should the prefix come
/// out all-zero, the last byte is flipped to 0x01 so the result can never
/// collide with [`NULL_KEY`].
pub fn node_key(block_id: BlockId, offset: u64, size: u64, version: Version) -> NodeKey {
    let mut hasher = Sha256::new();
    hasher.update(block_id.to_bytes());
    hasher.update(offset.to_be_bytes());
    hasher.update(size.to_be_bytes());
    hasher.update(version.0.to_be_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 16];
    key.copy_from_slice(&digest[..16]);
    if key == [0u8; 16] {
        key[15] = 0x01;
    }
    NodeKey(key)
}
