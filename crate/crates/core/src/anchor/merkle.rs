//! Binary Merkle trees over entry hashes.
//!
//! Leaves are tagged `0x00`, interior nodes `0x01`. A level with an odd number
//! of nodes duplicates its last node before pairing, so a proof for that node
//! carries itself as the sibling.

use crate::canonical::{domain_digest, Digest, LEAF_TAG, NODE_TAG};

use super::AnchorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// One sibling on the path from a leaf to the root. `side` is the sibling's
/// position relative to the running node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub hash: Digest,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MerkleProof {
    pub leaf_hash: Digest,
    pub leaf_index: u64,
    pub path: Vec<PathStep>,
    pub root: Digest,
}

pub fn leaf_node(leaf: &Digest) -> Digest {
    domain_digest(LEAF_TAG, &[leaf.as_bytes()])
}

pub fn interior_node(left: &Digest, right: &Digest) -> Digest {
    domain_digest(NODE_TAG, &[left.as_bytes(), right.as_bytes()])
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|pair| match pair {
            [l, r] => interior_node(l, r),
            [last] => interior_node(last, last),
            _ => unreachable!(),
        })
        .collect()
}

/// All levels of a tree, leaf nodes first, so that many proofs can be taken
/// from one construction.
#[derive(Debug, Clone)]
pub struct MerkleTree {
    leaves: Vec<Digest>,
    levels: Vec<Vec<Digest>>,
}

impl MerkleTree {
    pub fn build(leaves: &[Digest]) -> Result<Self, AnchorError> {
        if leaves.is_empty() {
            return Err(AnchorError::EmptyBatch);
        }
        let mut levels = vec![leaves.iter().map(leaf_node).collect::<Vec<_>>()];
        while levels.last().is_some_and(|l| l.len() > 1) {
            let next = next_level(levels.last().expect("non-empty"));
            levels.push(next);
        }
        Ok(MerkleTree {
            leaves: leaves.to_vec(),
            levels,
        })
    }

    pub fn root(&self) -> Digest {
        self.levels.last().expect("non-empty")[0]
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn prove(&self, index: usize) -> Result<MerkleProof, AnchorError> {
        if index >= self.leaves.len() {
            return Err(AnchorError::IndexOutOfRange {
                index,
                len: self.leaves.len(),
            });
        }
        let mut pos = index;
        let mut path = Vec::with_capacity(self.levels.len() - 1);
        for level in &self.levels[..self.levels.len() - 1] {
            path.push(if pos % 2 == 0 {
                PathStep {
                    hash: *level.get(pos + 1).unwrap_or(&level[pos]),
                    side: Side::Right,
                }
            } else {
                PathStep {
                    hash: level[pos - 1],
                    side: Side::Left,
                }
            });
            pos /= 2;
        }
        Ok(MerkleProof {
            leaf_hash: self.leaves[index],
            leaf_index: index as u64,
            path,
            root: self.root(),
        })
    }
}

pub fn merkle_root(leaves: &[Digest]) -> Result<Digest, AnchorError> {
    MerkleTree::build(leaves).map(|t| t.root())
}

pub fn merkle_prove(leaves: &[Digest], index: usize) -> Result<MerkleProof, AnchorError> {
    if index >= leaves.len() {
        return Err(AnchorError::IndexOutOfRange {
            index,
            len: leaves.len(),
        });
    }
    MerkleTree::build(leaves)?.prove(index)
}

/// Folds the path from the tagged leaf and compares with `root`. The sides must
/// also agree with the bits of `leaf_index`, so an index that does not match
/// the path is rejected.
pub fn merkle_verify(proof: &MerkleProof) -> bool {
    if proof.path.len() < 64 && proof.leaf_index >> proof.path.len() != 0 {
        return false;
    }
    let mut node = leaf_node(&proof.leaf_hash);
    for (level, step) in proof.path.iter().enumerate() {
        let expected = if (proof.leaf_index >> level) & 1 == 0 {
            Side::Right
        } else {
            Side::Left
        };
        if step.side != expected {
            return false;
        }
        node = match step.side {
            Side::Left => interior_node(&step.hash, &node),
            Side::Right => interior_node(&node, &step.hash),
        };
    }
    node == proof.root
}
