//! Seed derivation.
//!
//! Every random draw in a run descends from one root seed. A component gets
//! its own ChaCha8 stream (the stream id is the component's number below) and
//! the `counter`-th seed of that component is the `counter`-th 64-bit word of
//! that stream. Adding a component never shifts the seeds of another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Component {
    Corpus = 1,
    Init = 2,
    Train = 3,
    AttrRand = 4,
    Checks = 5,
}

pub fn derive(root: u64, component: Component, counter: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(component as u64);
    // One u64 is two 32-bit words.
    rng.set_word_pos(u128::from(counter) * 2);
    rng.next_u64()
}

pub fn rng(root: u64, component: Component, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, component, counter))
}
