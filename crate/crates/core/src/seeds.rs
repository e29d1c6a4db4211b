//! Sub-seed derivation from one master seed.
//!
//! `derive_seed(master, path)` hashes the `/`-separated path with FNV-1a,
//! XORs it into the master seed and finishes with one SplitMix64 step. Every
//! component asks for its own path (`"fed"`, `"attack/dragd/2"`, ...), so
//! adding a component never shifts another component's stream.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &str) -> u64 {
    let h = path.bytes().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME));
    splitmix64(master ^ h)
}
