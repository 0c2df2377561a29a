use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator handed out by [`Seeds::stream`].
pub type StreamRng = ChaCha8Rng;

/// Root seed from which independent, labelled substreams are derived.
///
/// A substream is a pure function of `(seed, label, ids)`, so work can be
/// split across roots, epochs or threads without sharing generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    seed: u64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Seeds { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str, ids: &[u64]) -> StreamRng {
        let mut h = splitmix(self.seed ^ fnv1a(label));
        for &id in ids {
            h = splitmix(h ^ id.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        }
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            h = splitmix(h.wrapping_add(i as u64));
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}
