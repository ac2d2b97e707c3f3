//! Per-version metadata trees.
//!
//! Every block version is described by a full binary tree over the
//! block's adjusted size. A node covering `(offset, size)` has a left
//! child covering `(offset, size/2)` and a right child covering
//! `(offset + size/2, size/2)`; leaves cover single pages and record
//! where the page payload lives. Nodes are immutable and addressed by
//! [`node_key`], which embeds the version, so trees of different
//! versions share untouched subtrees by referencing old keys.
//!
//! Writing a range at version `v` splits the touched nodes in two:
//!
//! * nodes totally included in the range can be built immediately from
//!   this write alone (the second protocol stage), and
//! * boundary nodes overlap the range only partially and must reference
//!   siblings from the latest previously completed version, so they are
//!   materialized after completion permission is granted (the third
//!   stage).
//!
//! This module contains only the pure planning algorithms; actual
//! storage traffic is driven by callers through callbacks.

use crate::block::{
    node_key, BlockDescriptor, ByteRange, NodeKey, PageId, Version,
};
use crate::transport::Endpoint;

/// Where one written page version lives.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PagePlacement {
    pub page_index: u64,
    pub page_id: PageId,
    pub provider_id: u64,
    pub endpoint: Endpoint,
}

/// Payload of a tree node.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum NodeBody {
    /// Points at the two children by content key. A [`NULL_KEY`] child
    /// marks a subtree that has never been written and reads as zeros.
    Interior { left: NodeKey, right: NodeKey },
    /// Covers a single page and records its placement.
    Leaf { page_id: PageId, provider_id: u64, endpoint: Endpoint },
}

/// One metadata tree node, covering `(offset, size)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TreeNode {
    pub offset: u64,
    pub size: u64,
    pub body: NodeBody,
}

impl TreeNode {
    pub fn range(&self) -> ByteRange {
        ByteRange::new(self.offset, self.size)
    }
}

/// Which key a boundary node's child takes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ChildSource {
    /// The child range intersects the written range, so its node is
    /// produced by this same write and its key is known: it is the
    /// child range hashed at the write's version.
    ThisWrite,
    /// The child range is untouched; its key must be copied from the
    /// tree of the latest previously completed version.
    CopyFromPredecessor,
}

/// A boundary node: an ancestor of the written range that is not
/// totally included in it. At least one child comes from this write;
/// a child on the far side of the range boundary is copied from the
/// predecessor tree.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BoundarySpec {
    pub offset: u64,
    pub size: u64,
    pub left: ChildSource,
    pub right: ChildSource,
}

impl BoundarySpec {
    pub fn left_range(&self) -> ByteRange {
        ByteRange::new(self.offset, self.size / 2)
    }

    pub fn right_range(&self) -> ByteRange {
        ByteRange::new(self.offset + self.size / 2, self.size / 2)
    }
}

/// Everything a writer needs to push the metadata of one write.
///
/// `stage2` holds the totally included nodes keyed at the write's
/// version, leaf-to-root. `boundary` holds the remaining ancestors up
/// to the root, leaf-to-root, to be materialized by
/// [`resolve_boundary`] once completion permission is granted.
#[derive(Clone, Debug)]
pub struct WritePlan {
    pub block_id: crate::block::BlockId,
    pub version: Version,
    pub range: ByteRange,
    pub stage2: Vec<(NodeKey, TreeNode)>,
    pub boundary: Vec<BoundarySpec>,
}

/// Location of one page within a planned read.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum PageLocation {
    Stored(PagePlacement),
    /// The page lies under a never-written subtree and reads as zeros.
    ZeroFill,
}

/// One page of a planned read, in ascending `page_index` order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PageSlot {
    pub page_index: u64,
    pub location: PageLocation,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("write range must be page-aligned")]
    UnalignedWrite,
    #[error("range out of block bounds")]
    RangeOutOfBounds,
    #[error("placements do not cover exactly the written pages")]
    PlacementMismatch,
    #[error("write version must be >= 1")]
    InvalidVersion,
    #[error("metadata node {key} missing from store")]
    MetadataMissing { key: NodeKey },
    #[error("metadata node {key} does not cover the expected range ({offset},{size})")]
    NodeMismatch { key: NodeKey, offset: u64, size: u64 },
    #[error("predecessor tree unreadable at ({offset},{size}): {reason}")]
    PrevTreeUnavailable { offset: u64, size: u64, reason: String },
    #[error("node fetch failed: {0}")]
    Fetch(String),
    #[error("malformed node encoding: {0}")]
    Decode(String),
}

/// Enumerates every `(offset, size)` range of the full tree, root first,
/// then level by level left to right.
///
/// Materializes the whole shape, so this is meant for small blocks and
/// test oracles; a 1 TB block with 64 kB pages has 2^25 - 1 nodes.
pub fn tree_shape(descriptor: &BlockDescriptor) -> Vec<ByteRange> {
    let mut ranges = Vec::with_capacity((2 * descriptor.leaf_count() - 1) as usize);
    let mut size = descriptor.adjusted_size;
    while size >= descriptor.page_size {
        let mut offset = 0;
        while offset < descriptor.adjusted_size {
            ranges.push(ByteRange::new(offset, size));
            offset += size;
        }
        size /= 2;
    }
    ranges
}

fn validate_write_range(descriptor: &BlockDescriptor, range: &ByteRange) -> Result<(), TreeError> {
    if !descriptor.range_in_bounds(range) {
        return Err(TreeError::RangeOutOfBounds);
    }
    if !descriptor.range_page_aligned(range) {
        return Err(TreeError::UnalignedWrite);
    }
    Ok(())
}

/// Computes the stage-2 node set and the boundary specs for writing
/// `range` at `version`.
///
/// `placements` must bind every page of the range exactly once.
pub fn plan_write(
    descriptor: &BlockDescriptor,
    range: ByteRange,
    placements: &[PagePlacement],
    version: Version,
) -> Result<WritePlan, TreeError> {
    validate_write_range(descriptor, &range)?;
    if version.0 < 1 {
        return Err(TreeError::InvalidVersion);
    }
    let page_size = descriptor.page_size;
    let (first_page, last_page) = crate::block::range_to_pages(range, page_size);
    let page_count = last_page - first_page + 1;
    if placements.len() as u64 != page_count {
        return Err(TreeError::PlacementMismatch);
    }

    // Leaves first, in page order.
    let mut by_index: Vec<Option<&PagePlacement>> = vec![None; page_count as usize];
    for placement in placements {
        if placement.page_index < first_page || placement.page_index > last_page {
            return Err(TreeError::PlacementMismatch);
        }
        let slot = &mut by_index[(placement.page_index - first_page) as usize];
        if slot.is_some() {
            return Err(TreeError::PlacementMismatch);
        }
        *slot = Some(placement);
    }

    let block_id = descriptor.block_id;
    let mut stage2 = Vec::new();
    for slot in by_index {
        let placement = slot.expect("every page bound exactly once");
        let offset = placement.page_index * page_size;
        let key = node_key(block_id, offset, page_size, version);
        stage2.push((
            key,
            TreeNode {
                offset,
                size: page_size,
                body: NodeBody::Leaf {
                    page_id: placement.page_id,
                    provider_id: placement.provider_id,
                    endpoint: placement.endpoint.clone(),
                },
            },
        ));
    }

    // Ancestors, level by level from just above the leaves to the root.
    // A level-`s` node intersecting the range is either totally included
    // (buildable now: both children are this write's nodes) or a
    // boundary node deferred to stage 3.
    let mut boundary = Vec::new();
    let mut size = page_size * 2;
    while size <= descriptor.adjusted_size {
        let first = range.offset / size;
        let last = (range.end() - 1) / size;
        for index in first..=last {
            let offset = index * size;
            let node_range = ByteRange::new(offset, size);
            let half = size / 2;
            if range.contains(&node_range) {
                let left = node_key(block_id, offset, half, version);
                let right = node_key(block_id, offset + half, half, version);
                stage2.push((
                    node_key(block_id, offset, size, version),
                    TreeNode { offset, size, body: NodeBody::Interior { left, right } },
                ));
            } else {
                let child_source = |child: ByteRange| {
                    if child.overlaps(&range) {
                        ChildSource::ThisWrite
                    } else {
                        ChildSource::CopyFromPredecessor
                    }
                };
                boundary.push(BoundarySpec {
                    offset,
                    size,
                    left: child_source(ByteRange::new(offset, half)),
                    right: child_source(ByteRange::new(offset + half, half)),
                });
            }
        }
        size *= 2;
    }

    Ok(WritePlan { block_id, version, range, stage2, boundary })
}

/// Materializes the boundary nodes of `plan` into concrete interior
/// nodes, leaf-to-root.
///
/// `prev_key` must return, for an untouched sibling range, the key
/// stored for that range in the tree of the latest previously completed
/// version ([`NULL_KEY`] when that tree never wrote it). It is only
/// called for ranges disjoint from the written range, and only after
/// completion permission was granted.
pub fn resolve_boundary(
    plan: &WritePlan,
    mut prev_key: impl FnMut(ByteRange) -> Result<NodeKey, TreeError>,
) -> Result<Vec<(NodeKey, TreeNode)>, TreeError> {
    let mut nodes = Vec::with_capacity(plan.boundary.len());
    for spec in &plan.boundary {
        let mut child = |source: ChildSource, range: ByteRange| -> Result<NodeKey, TreeError> {
            match source {
                ChildSource::ThisWrite => {
                    Ok(node_key(plan.block_id, range.offset, range.size, plan.version))
                }
                ChildSource::CopyFromPredecessor => prev_key(range),
            }
        };
        let left = child(spec.left, spec.left_range())?;
        let right = child(spec.right, spec.right_range())?;
        nodes.push((
            node_key(plan.block_id, spec.offset, spec.size, plan.version),
            TreeNode {
                offset: spec.offset,
                size: spec.size,
                body: NodeBody::Interior { left, right },
            },
        ));
    }
    Ok(nodes)
}

/// Plans a read of `range` at `version` by descending the tree from the
/// root, pruning subtrees disjoint from the range.
///
/// `fetch` receives the keys of one tree level at a time (so callers
/// can issue the gets in parallel) and returns the nodes in the same
/// order, `None` where a key is absent. Version 0 never calls `fetch`:
/// the whole range reads as zeros. A [`NULL_KEY`] child yields
/// [`PageLocation::ZeroFill`] for its intersection with the range; a
/// non-null key that resolves to `None` fails the read.
pub fn plan_read(
    descriptor: &BlockDescriptor,
    range: ByteRange,
    version: Version,
    mut fetch: impl FnMut(&[NodeKey]) -> Result<Vec<Option<TreeNode>>, TreeError>,
) -> Result<Vec<PageSlot>, TreeError> {
    if !descriptor.range_in_bounds(&range) {
        return Err(TreeError::RangeOutOfBounds);
    }
    let page_size = descriptor.page_size;
    let (first_page, last_page) = crate::block::range_to_pages(range, page_size);
    let mut slots: Vec<Option<PageLocation>> = vec![None; (last_page - first_page + 1) as usize];

    let zero_fill = |slots: &mut Vec<Option<PageLocation>>, subtree: ByteRange| {
        let lo = subtree.offset.max(range.offset);
        let hi = subtree.end().min(range.end());
        let (a, b) = crate::block::range_to_pages(ByteRange::new(lo, hi - lo), page_size);
        for page in a..=b {
            slots[(page - first_page) as usize] = Some(PageLocation::ZeroFill);
        }
    };

    if version.0 == 0 {
        zero_fill(&mut slots, ByteRange::new(0, descriptor.adjusted_size));
    } else {
        let root = node_key(descriptor.block_id, 0, descriptor.adjusted_size, version);
        let mut frontier = vec![(root, ByteRange::new(0, descriptor.adjusted_size))];
        while !frontier.is_empty() {
            let keys: Vec<NodeKey> = frontier.iter().map(|(key, _)| *key).collect();
            let fetched = fetch(&keys)?;
            if fetched.len() != keys.len() {
                return Err(TreeError::Fetch(format!(
                    "fetch returned {} nodes for {} keys",
                    fetched.len(),
                    keys.len()
                )));
            }
            let mut next = Vec::new();
            for ((key, expected), node) in frontier.iter().zip(fetched) {
                let node = node.ok_or(TreeError::MetadataMissing { key: *key })?;
                if node.range() != *expected {
                    return Err(TreeError::NodeMismatch {
                        key: *key,
                        offset: expected.offset,
                        size: expected.size,
                    });
                }
                match node.body {
                    NodeBody::Leaf { page_id, provider_id, ref endpoint } => {
                        let page_index = node.offset / page_size;
                        slots[(page_index - first_page) as usize] =
                            Some(PageLocation::Stored(PagePlacement {
                                page_index,
                                page_id,
                                provider_id,
                                endpoint: endpoint.clone(),
                            }));
                    }
                    NodeBody::Interior { left, right } => {
                        let half = node.size / 2;
                        let children = [
                            (left, ByteRange::new(node.offset, half)),
                            (right, ByteRange::new(node.offset + half, half)),
                        ];
                        for (child_key, child_range) in children {
                            if !child_range.overlaps(&range) {
                                continue;
                            }
                            if child_key.is_null() {
                                zero_fill(&mut slots, child_range);
                            } else {
                                next.push((child_key, child_range));
                            }
                        }
                    }
                }
            }
            frontier = next;
        }
    }

    slots
        .into_iter()
        .enumerate()
        .map(|(i, location)| {
            let page_index = first_page + i as u64;
            location
                .map(|location| PageSlot { page_index, location })
                .ok_or_else(|| TreeError::Fetch(format!("descent left page {page_index} unresolved")))
        })
        .collect()
}

// --- node wire encoding ----------------------------------------------------
//
// tag (1) || offset (8 BE) || size (8 BE) || body
//   tag 0, interior: left_key (16) || right_key (16)
//   tag 1, leaf:     page_id (16) || provider_id (8 BE)
//                    || host_len (2 BE) || host (UTF-8) || port (2 BE)
//
// This layout is frozen; golden-byte tests pin it.

const TAG_INTERIOR: u8 = 0;
const TAG_LEAF: u8 = 1;

pub fn encode_node(node: &TreeNode) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    match &node.body {
        NodeBody::Interior { left, right } => {
            out.push(TAG_INTERIOR);
            out.extend_from_slice(&node.offset.to_be_bytes());
            out.extend_from_slice(&node.size.to_be_bytes());
            out.extend_from_slice(&left.0);
            out.extend_from_slice(&right.0);
        }
        NodeBody::Leaf { page_id, provider_id, endpoint } => {
            out.push(TAG_LEAF);
            out.extend_from_slice(&node.offset.to_be_bytes());
            out.extend_from_slice(&node.size.to_be_bytes());
            out.extend_from_slice(&page_id.to_bytes());
            out.extend_from_slice(&provider_id.to_be_bytes());
            let host = endpoint.host.as_bytes();
            out.extend_from_slice(&(host.len() as u16).to_be_bytes());
            out.extend_from_slice(host);
            out.extend_from_slice(&endpoint.port.to_be_bytes());
        }
    }
    out
}

pub fn decode_node(bytes: &[u8]) -> Result<TreeNode, TreeError> {
    let err = |what: &str| TreeError::Decode(what.to_string());
    if bytes.len() < 17 {
        return Err(err("node shorter than header"));
    }
    let tag = bytes[0];
    let offset = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
    let size = u64::from_be_bytes(bytes[9..17].try_into().unwrap());
    let rest = &bytes[17..];
    match tag {
        TAG_INTERIOR => {
            if rest.len() != 32 {
                return Err(err("interior body must be exactly two keys"));
            }
            let left = NodeKey(rest[..16].try_into().unwrap());
            let right = NodeKey(rest[16..].try_into().unwrap());
            Ok(TreeNode { offset, size, body: NodeBody::Interior { left, right } })
        }
        TAG_LEAF => {
            if rest.len() < 26 {
                return Err(err("leaf body truncated"));
            }
            let page_id = PageId::from_bytes(rest[..16].try_into().unwrap());
            let provider_id = u64::from_be_bytes(rest[16..24].try_into().unwrap());
            let host_len = u16::from_be_bytes(rest[24..26].try_into().unwrap()) as usize;
            if rest.len() != 26 + host_len + 2 {
                return Err(err("leaf endpoint length mismatch"));
            }
            let host = std::str::from_utf8(&rest[26..26 + host_len])
                .map_err(|_| err("leaf host is not UTF-8"))?
                .to_string();
            let port = u16::from_be_bytes(rest[26 + host_len..].try_into().unwrap());
            Ok(TreeNode {
                offset,
                size,
                body: NodeBody::Leaf { page_id, provider_id, endpoint: Endpoint::new(host, port) },
            })
        }
        _ => Err(err("unknown node tag")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::{BlockId, NULL_KEY};

    fn descriptor(pages: u64, page_size: u64) -> BlockDescriptor {
        BlockDescriptor::new(BlockId(0xb10c), page_size, pages * page_size).unwrap()
    }

    fn endpoint() -> Endpoint {
        Endpoint::new("127.0.0.1".to_string(), 4000)
    }

    fn placements(first: u64, last: u64) -> Vec<PagePlacement> {
        (first..=last)
            .map(|page_index| PagePlacement {
                page_index,
                page_id: PageId(page_index as u128 + 1000),
                provider_id: 1,
                endpoint: endpoint(),
            })
            .collect()
    }

    // Brute-force oracle: classify every node of the full shape by
    // intersection with the written range.
    fn oracle_sets(
        descriptor: &BlockDescriptor,
        range: ByteRange,
    ) -> (Vec<ByteRange>, Vec<ByteRange>) {
        let mut contained = Vec::new();
        let mut partial = Vec::new();
        for node in tree_shape(descriptor) {
            if !node.overlaps(&range) {
                continue;
            }
            if range.contains(&node) {
                contained.push(node);
            } else {
                partial.push(node);
            }
        }
        (contained, partial)
    }

    const P: u64 = 4096;

    #[test]
    fn shape_of_four_page_block_matches_labels() {
        let d = descriptor(4, P);
        let shape = tree_shape(&d);
        let expected: Vec<ByteRange> = [(0, 4), (0, 2), (2, 2), (0, 1), (1, 1), (2, 1), (3, 1)]
            .iter()
            .map(|&(o, s)| ByteRange::new(o * P, s * P))
            .collect();
        assert_eq!(shape, expected);
    }

    #[test]
    fn shape_degenerate_and_eight_page() {
        let one = descriptor(1, P);
        assert_eq!(tree_shape(&one), vec![ByteRange::new(0, P)]);
        let eight = descriptor(8, P);
        assert_eq!(tree_shape(&eight).len(), 15);
    }

    #[test]
    fn plan_write_right_half_of_four_pages() {
        let d = descriptor(4, P);
        let range = ByteRange::new(2 * P, 2 * P);
        let plan = plan_write(&d, range, &placements(2, 3), Version(7)).unwrap();

        let stage2_ranges: Vec<ByteRange> = plan.stage2.iter().map(|(_, n)| n.range()).collect();
        assert_eq!(
            stage2_ranges,
            vec![
                ByteRange::new(2 * P, P),
                ByteRange::new(3 * P, P),
                ByteRange::new(2 * P, 2 * P),
            ]
        );
        assert_eq!(plan.boundary.len(), 1);
        let root = plan.boundary[0];
        assert_eq!((root.offset, root.size), (0, 4 * P));
        assert_eq!(root.left, ChildSource::CopyFromPredecessor);
        assert_eq!(root.right, ChildSource::ThisWrite);
    }

    #[test]
    fn plan_write_whole_block_has_no_boundary() {
        let d = descriptor(4, P);
        let plan =
            plan_write(&d, ByteRange::new(0, 4 * P), &placements(0, 3), Version(1)).unwrap();
        assert_eq!(plan.stage2.len(), 7);
        assert!(plan.boundary.is_empty());
        let resolved = resolve_boundary(&plan, |_| panic!("no predecessor reads")).unwrap();
        assert!(resolved.is_empty());
    }

    #[test]
    fn plan_write_middle_pages_splits_three_boundary_nodes() {
        let d = descriptor(4, P);
        let plan =
            plan_write(&d, ByteRange::new(P, 2 * P), &placements(1, 2), Version(3)).unwrap();
        let stage2_ranges: Vec<ByteRange> = plan.stage2.iter().map(|(_, n)| n.range()).collect();
        assert_eq!(stage2_ranges, vec![ByteRange::new(P, P), ByteRange::new(2 * P, P)]);
        let boundary_ranges: Vec<(u64, u64)> =
            plan.boundary.iter().map(|b| (b.offset / P, b.size / P)).collect();
        assert_eq!(boundary_ranges, vec![(0, 2), (2, 2), (0, 4)]);
        // The root of this write straddles the range: both halves are new.
        let root = plan.boundary[2];
        assert_eq!(root.left, ChildSource::ThisWrite);
        assert_eq!(root.right, ChildSource::ThisWrite);
    }

    #[test]
    fn stage_partition_matches_brute_force_oracle() {
        // Exhaustive aligned ranges over every power-of-two block up to
        // 64 pages.
        for pages in [1u64, 2, 4, 8, 16, 32, 64] {
            let d = descriptor(pages, P);
            for first in 0..pages {
                for last in first..pages {
                    let range = ByteRange::new(first * P, (last - first + 1) * P);
                    let plan = plan_write(
                        &d,
                        range,
                        &placements(first, last),
                        Version(1),
                    )
                    .unwrap();
                    let (contained, partial) = oracle_sets(&d, range);
                    let mut stage2: Vec<ByteRange> =
                        plan.stage2.iter().map(|(_, n)| n.range()).collect();
                    let mut boundary: Vec<ByteRange> = plan
                        .boundary
                        .iter()
                        .map(|b| ByteRange::new(b.offset, b.size))
                        .collect();
                    let sort = |v: &mut Vec<ByteRange>| {
                        v.sort_by_key(|r| (r.size, r.offset));
                    };
                    let mut want_contained = contained.clone();
                    let mut want_partial = partial.clone();
                    sort(&mut stage2);
                    sort(&mut boundary);
                    sort(&mut want_contained);
                    sort(&mut want_partial);
                    assert_eq!(stage2, want_contained, "pages={pages} range={range:?}");
                    assert_eq!(boundary, want_partial, "pages={pages} range={range:?}");
                    // Disjoint by construction: contained vs not contained.
                    for b in &boundary {
                        assert!(!stage2.contains(b));
                    }
                }
            }
        }
    }

    #[test]
    fn plan_write_validates_inputs() {
        let d = descriptor(4, P);
        assert_eq!(
            plan_write(&d, ByteRange::new(100, P), &placements(0, 0), Version(1)).unwrap_err(),
            TreeError::UnalignedWrite
        );
        assert_eq!(
            plan_write(&d, ByteRange::new(0, 5 * P), &placements(0, 4), Version(1)).unwrap_err(),
            TreeError::RangeOutOfBounds
        );
        assert_eq!(
            plan_write(&d, ByteRange::new(0, P), &placements(0, 1), Version(1)).unwrap_err(),
            TreeError::PlacementMismatch
        );
        assert_eq!(
            plan_write(&d, ByteRange::new(0, P), &placements(0, 0), Version(0)).unwrap_err(),
            TreeError::InvalidVersion
        );
    }

    #[test]
    fn resolve_boundary_references_predecessor_siblings() {
        // Two sequential writes: version 4 wrote the whole block, version
        // 5 rewrites pages 2..3. The new root keeps the version-4 key for
        // its untouched left half.
        let d = descriptor(4, P);
        let plan =
            plan_write(&d, ByteRange::new(2 * P, 2 * P), &placements(2, 3), Version(5)).unwrap();
        let resolved = resolve_boundary(&plan, |sibling| {
            assert_eq!(sibling, ByteRange::new(0, 2 * P));
            Ok(node_key(d.block_id, sibling.offset, sibling.size, Version(4)))
        })
        .unwrap();
        assert_eq!(resolved.len(), 1);
        let (key, root) = &resolved[0];
        assert_eq!(*key, node_key(d.block_id, 0, 4 * P, Version(5)));
        assert_eq!(
            root.body,
            NodeBody::Interior {
                left: node_key(d.block_id, 0, 2 * P, Version(4)),
                right: node_key(d.block_id, 2 * P, 2 * P, Version(5)),
            }
        );
    }

    #[test]
    fn resolve_boundary_first_write_gets_null_siblings() {
        let d = descriptor(4, P);
        let plan =
            plan_write(&d, ByteRange::new(2 * P, 2 * P), &placements(2, 3), Version(1)).unwrap();
        let resolved = resolve_boundary(&plan, |_| Ok(NULL_KEY)).unwrap();
        let (_, root) = &resolved[0];
        assert_eq!(
            root.body,
            NodeBody::Interior {
                left: NULL_KEY,
                right: node_key(d.block_id, 2 * P, 2 * P, Version(1)),
            }
        );
    }

    // Reference store: apply a sequence of whole plans and serve reads.
    struct ModelStore(std::collections::HashMap<NodeKey, TreeNode>);

    impl ModelStore {
        fn new() -> Self {
            ModelStore(std::collections::HashMap::new())
        }

        fn apply(&mut self, d: &BlockDescriptor, range: ByteRange, version: Version, prev: Version) {
            let (first, last) = crate::block::range_to_pages(range, d.page_size);
            let plan = plan_write(d, range, &placements(first, last), version).unwrap();
            for (key, node) in &plan.stage2 {
                self.0.insert(*key, node.clone());
            }
            let resolved = resolve_boundary(&plan, |sibling| {
                Ok(self.lookup_key(d, sibling, prev))
            })
            .unwrap();
            for (key, node) in resolved {
                self.0.insert(key, node);
            }
        }

        // Walk the predecessor tree top-down to the sibling range.
        fn lookup_key(&self, d: &BlockDescriptor, target: ByteRange, version: Version) -> NodeKey {
            if version.0 == 0 {
                return NULL_KEY;
            }
            let mut key = node_key(d.block_id, 0, d.adjusted_size, version);
            let mut range = ByteRange::new(0, d.adjusted_size);
            loop {
                if range == target {
                    return key;
                }
                let Some(node) = self.0.get(&key) else { return NULL_KEY };
                let NodeBody::Interior { left, right } = node.body else { return NULL_KEY };
                let half = range.size / 2;
                if target.offset < range.offset + half {
                    key = left;
                    range = ByteRange::new(range.offset, half);
                } else {
                    key = right;
                    range = ByteRange::new(range.offset + half, half);
                }
                if key.is_null() {
                    return NULL_KEY;
                }
            }
        }

        fn fetch(&self, keys: &[NodeKey]) -> Result<Vec<Option<TreeNode>>, TreeError> {
            Ok(keys.iter().map(|k| self.0.get(k).cloned()).collect())
        }
    }

    #[test]
    fn read_after_partial_write_zero_fills_the_rest() {
        let d = descriptor(4, P);
        let mut store = ModelStore::new();
        store.apply(&d, ByteRange::new(2 * P, 2 * P), Version(1), Version(0));

        let slots =
            plan_read(&d, ByteRange::new(0, 4 * P), Version(1), |keys| store.fetch(keys)).unwrap();
        assert_eq!(slots.len(), 4);
        assert_eq!(slots[0].location, PageLocation::ZeroFill);
        assert_eq!(slots[1].location, PageLocation::ZeroFill);
        assert!(matches!(slots[2].location, PageLocation::Stored(_)));
        assert!(matches!(slots[3].location, PageLocation::Stored(_)));
    }

    #[test]
    fn read_at_version_zero_never_fetches() {
        let d = descriptor(4, P);
        let slots = plan_read(&d, ByteRange::new(0, 4 * P), Version(0), |_| {
            panic!("version 0 must not fetch")
        })
        .unwrap();
        assert!(slots.iter().all(|s| s.location == PageLocation::ZeroFill));
    }

    #[test]
    fn read_of_missing_node_fails() {
        let d = descriptor(4, P);
        let err = plan_read(&d, ByteRange::new(0, P), Version(3), |keys| {
            Ok(vec![None; keys.len()])
        })
        .unwrap_err();
        assert!(matches!(err, TreeError::MetadataMissing { .. }));
    }

    #[test]
    fn single_page_descent_touches_depth_plus_one_nodes() {
        let d = descriptor(16, P); // depth 4
        let mut store = ModelStore::new();
        store.apply(&d, ByteRange::new(0, 16 * P), Version(1), Version(0));
        let mut fetched = 0usize;
        let slots = plan_read(&d, ByteRange::new(5 * P, P), Version(1), |keys| {
            fetched += keys.len();
            store.fetch(keys)
        })
        .unwrap();
        assert_eq!(slots.len(), 1);
        assert_eq!(fetched as u32, d.tree_depth() + 1);
    }

    #[test]
    fn contiguous_descent_fetch_count_is_bounded() {
        let d = descriptor(64, P); // depth 6
        let mut store = ModelStore::new();
        store.apply(&d, ByteRange::new(0, 64 * P), Version(1), Version(0));
        for (first, count) in [(3u64, 7u64), (0, 64), (17, 2), (31, 9)] {
            let mut fetched = 0u64;
            plan_read(&d, ByteRange::new(first * P, count * P), Version(1), |keys| {
                fetched += keys.len() as u64;
                store.fetch(keys)
            })
            .unwrap();
            assert!(
                fetched <= 2 * d.tree_depth() as u64 + 2 * count,
                "fetched {fetched} for k={count}"
            );
        }
    }

    #[test]
    fn snapshot_reads_match_flat_buffer_across_versions() {
        // Sequential writes; after each publish, every version must read
        // back exactly like a zero-initialized flat buffer replay.
        let d = descriptor(8, P);
        let mut store = ModelStore::new();
        let writes = [
            ByteRange::new(0, 2 * P),
            ByteRange::new(4 * P, 4 * P),
            ByteRange::new(2 * P, 4 * P),
            ByteRange::new(0, 8 * P),
            ByteRange::new(7 * P, P),
        ];
        for (i, range) in writes.iter().enumerate() {
            store.apply(&d, *range, Version(i as u64 + 1), Version(i as u64));
        }
        for v in 0..=writes.len() {
            let slots =
                plan_read(&d, ByteRange::new(0, 8 * P), Version(v as u64), |keys| store.fetch(keys))
                    .unwrap();
            // Flat oracle: page p was last written by the newest write <= v
            // covering it.
            for (p, slot) in slots.iter().enumerate() {
                let page = ByteRange::new(p as u64 * P, P);
                let last_writer = writes[..v]
                    .iter()
                    .enumerate()
                    .rev()
                    .find(|(_, w)| w.contains(&page))
                    .map(|(i, _)| i as u64 + 1);
                match (last_writer, &slot.location) {
                    (None, PageLocation::ZeroFill) => {}
                    (Some(_), PageLocation::Stored(_)) => {}
                    other => panic!("page {p} at v{v}: unexpected {other:?}"),
                }
            }
        }
    }

    #[test]
    fn node_encoding_golden_bytes() {
        let interior = TreeNode {
            offset: 0,
            size: 1 << 40,
            body: NodeBody::Interior {
                left: NodeKey([0x11; 16]),
                right: NodeKey([0x22; 16]),
            },
        };
        let bytes = encode_node(&interior);
        let mut expected = vec![0u8];
        expected.extend_from_slice(&0u64.to_be_bytes());
        expected.extend_from_slice(&(1u64 << 40).to_be_bytes());
        expected.extend_from_slice(&[0x11; 16]);
        expected.extend_from_slice(&[0x22; 16]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 49);
        assert_eq!(decode_node(&bytes).unwrap(), interior);

        let leaf = TreeNode {
            offset: 65536,
            size: 65536,
            body: NodeBody::Leaf {
                page_id: PageId(0xdead_beef),
                provider_id: 7,
                endpoint: Endpoint::new("10.0.0.3".to_string(), 9031),
            },
        };
        let bytes = encode_node(&leaf);
        let mut expected = vec![1u8];
        expected.extend_from_slice(&65536u64.to_be_bytes());
        expected.extend_from_slice(&65536u64.to_be_bytes());
        expected.extend_from_slice(&0xdead_beefu128.to_be_bytes());
        expected.extend_from_slice(&7u64.to_be_bytes());
        expected.extend_from_slice(&8u16.to_be_bytes());
        expected.extend_from_slice(b"10.0.0.3");
        expected.extend_from_slice(&9031u16.to_be_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_node(&bytes).unwrap(), leaf);
    }

    #[test]
    fn decode_rejects_malformed_nodes() {
        assert!(decode_node(&[]).is_err());
        assert!(decode_node(&[9; 20]).is_err());
        let leaf = TreeNode {
            offset: 0,
            size: 4096,
            body: NodeBody::Leaf {
                page_id: PageId(1),
                provider_id: 1,
                endpoint: Endpoint::new("h".to_string(), 1),
            },
        };
        let mut bytes = encode_node(&leaf);
        bytes.pop();
        assert!(decode_node(&bytes).is_err());
    }
}
