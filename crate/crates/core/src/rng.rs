//! Named, hierarchically derived random streams.
//!
//! Every logical actor (partitioner, each client's trainer, each server's
//! selector, model init) draws from its own stream. A stream is identified by
//! `(root seed, path)` where the path is a `/`-separated actor name, e.g.
//! `train/3/client/17`. The ChaCha seed is the SHA-256 digest of the root seed
//! and the path, so streams are independent of creation order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: String,
    rng: ChaCha12Rng,
}

impl RngStream {
    /// The root stream for an experiment seed.
    pub fn root(seed: u64) -> Self {
        Self::at(seed, String::new())
    }

    fn at(seed: u64, path: String) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(path.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        Self {
            seed,
            path,
            rng: ChaCha12Rng::from_seed(digest),
        }
    }

    /// Derive a child stream. Depends only on this stream's identity, never on
    /// how many values have already been drawn from it.
    pub fn child(&self, name: impl AsRef<str>) -> Self {
        let path = if self.path.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}/{}", self.path, name.as_ref())
        };
        Self::at(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draw(mut s: RngStream) -> Vec<u64> {
        (0..8).map(|_| s.random()).collect()
    }

    #[test]
    fn same_path_same_values() {
        let a = RngStream::root(42).child("train").child("client/3");
        let b = RngStream::root(42).child("train/client/3");
        assert_eq!(a.path(), "train/client/3");
        assert_eq!(draw(a), draw(b));
    }

    #[test]
    fn siblings_and_seeds_differ() {
        let root = RngStream::root(42);
        assert_ne!(draw(root.child("a")), draw(root.child("b")));
        assert_ne!(draw(root.child("a")), draw(RngStream::root(43).child("a")));
    }

    #[test]
    fn child_ignores_parent_consumption() {
        let mut parent = RngStream::root(1).child("x");
        let before = draw(parent.child("y"));
        let _: u64 = parent.random();
        assert_eq!(before, draw(parent.child("y")));
    }
}
