//! Small shared helpers: seed derivation, digests, apportionment.

/// splitmix64 finalizer; decorrelates structured seed inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent sub-seed from a base seed and a sequence of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0xa076_1d64_78bd_642f));
    }
    state
}

/// FNV-1a over a byte stream; used for content digests in run records.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    pub fn update_u64(&mut self, v: u64) {
        self.update(&v.to_le_bytes());
    }

    pub fn update_f64(&mut self, v: f64) {
        self.update(&v.to_bits().to_le_bytes());
    }

    pub fn finish_hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

/// Apportions `total` integer units over weights by the largest-remainder
/// method: floor the real shares, then hand the remaining units to the
/// largest fractional parts, ties to the lowest index.
///
/// `shares` must be non-negative and sum to (approximately) `total`; the
/// result sums to `total` exactly.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shares.iter().map(|&s| s.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    debug_assert!(assigned <= total, "real shares exceed the total");
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // fractional part descending, index ascending
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}
