//! QARMA-64 tweakable block cipher.
//!
//! Three-round-function Even-Mansour construction with a central reflector,
//! operating on a 64-bit state viewed as sixteen 4-bit cells (cell 0 is the
//! most significant nibble). The 128-bit key splits into the whitening key
//! `w0` and the core key `k0`.

use crate::key::PacKey;

/// Diffusion/substitution variant. The cipher publication defines three
/// 4-bit S-boxes; the round structure is otherwise identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SboxVariant {
    Sigma0,
    Sigma1,
    Sigma2,
}

/// Round count and S-box selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CipherParams {
    pub rounds: u32,
    pub variant: SboxVariant,
}

impl CipherParams {
    pub const MAX_ROUNDS: u32 = 8;

    pub const fn new(rounds: u32, variant: SboxVariant) -> Self {
        CipherParams { rounds, variant }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if self.rounds < 1 || self.rounds > Self::MAX_ROUNDS {
            return Err(ParamError::BadRounds(self.rounds));
        }
        Ok(())
    }
}

impl Default for CipherParams {
    /// The seven-round sigma2 instantiation from the cipher publication.
    fn default() -> Self {
        CipherParams::new(7, SboxVariant::Sigma2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamError {
    BadRounds(u32),
}

impl core::fmt::Display for ParamError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ParamError::BadRounds(r) => {
                write!(f, "round count {} outside 1..={}", r, CipherParams::MAX_ROUNDS)
            }
        }
    }
}

const SBOX: [[u8; 16]; 3] = [
    [0, 14, 2, 10, 9, 15, 8, 11, 6, 4, 3, 7, 13, 12, 1, 5],
    [10, 13, 14, 6, 15, 7, 3, 5, 9, 8, 0, 12, 11, 1, 2, 4],
    [11, 6, 8, 15, 12, 0, 9, 14, 3, 7, 4, 5, 13, 2, 1, 10],
];

/// Cell shuffle tau: output cell i takes input cell TAU[i].
const TAU: [usize; 16] = [0, 11, 6, 13, 10, 1, 12, 7, 5, 14, 3, 8, 15, 4, 9, 2];

/// Tweak cell permutation h.
const H: [usize; 16] = [6, 5, 14, 15, 0, 1, 2, 3, 7, 12, 13, 4, 8, 9, 10, 11];

/// Cells whose tweak nibble runs through the LFSR between rounds.
const LFSR_CELLS: [usize; 7] = [0, 1, 3, 4, 8, 11, 13];

const ROUND_CONSTANTS: [u64; 8] = [
    0x0000000000000000,
    0x13198A2E03707344,
    0xA4093822299F31D0,
    0x082EFA98EC4E6C89,
    0x452821E638D01377,
    0xBE5466CF34E90C6C,
    0x3F84D5B5B5470917,
    0x9216D5D98979FB1B,
];

const ALPHA: u64 = 0xC0AC29B7C97C50DD;

fn sbox_tables(variant: SboxVariant) -> ([u8; 16], [u8; 16]) {
    let fwd = SBOX[match variant {
        SboxVariant::Sigma0 => 0,
        SboxVariant::Sigma1 => 1,
        SboxVariant::Sigma2 => 2,
    }];
    let mut inv = [0u8; 16];
    for (i, &v) in fwd.iter().enumerate() {
        inv[v as usize] = i as u8;
    }
    (fwd, inv)
}

fn inv_perm(p: [usize; 16]) -> [usize; 16] {
    let mut out = [0usize; 16];
    for (i, &v) in p.iter().enumerate() {
        out[v] = i;
    }
    out
}

#[inline]
fn cell(x: u64, i: usize) -> u8 {
    ((x >> (4 * (15 - i))) & 0xf) as u8
}

fn to_cells(x: u64) -> [u8; 16] {
    let mut c = [0u8; 16];
    for (i, slot) in c.iter_mut().enumerate() {
        *slot = cell(x, i);
    }
    c
}

fn from_cells(c: &[u8; 16]) -> u64 {
    let mut x = 0u64;
    for (i, &v) in c.iter().enumerate() {
        x |= (v as u64) << (4 * (15 - i));
    }
    x
}

fn map_cells(x: u64, f: impl Fn(u8) -> u8) -> u64 {
    let mut c = to_cells(x);
    for v in c.iter_mut() {
        *v = f(*v);
    }
    from_cells(&c)
}

fn permute_cells(x: u64, p: &[usize; 16]) -> u64 {
    let c = to_cells(x);
    let mut out = [0u8; 16];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = c[p[i]];
    }
    from_cells(&out)
}

#[inline]
fn rotl4(x: u8, n: u32) -> u8 {
    if n == 0 {
        x
    } else {
        ((x << n) | (x >> (4 - n))) & 0xf
    }
}

/// MixColumns with the involutory circulant matrix circ(0, r1, r2, r1).
fn mix_columns(x: u64) -> u64 {
    let c = to_cells(x);
    let mut out = [0u8; 16];
    for col in 0..4 {
        let a = [c[col], c[col + 4], c[col + 8], c[col + 12]];
        for row in 0..4 {
            out[col + 4 * row] = rotl4(a[(row + 1) % 4], 1)
                ^ rotl4(a[(row + 2) % 4], 2)
                ^ rotl4(a[(row + 3) % 4], 1);
        }
    }
    from_cells(&out)
}

/// Whitening key orbit: rotate right by one, folding the dropped bit back in.
fn omega(w: u64) -> u64 {
    w.rotate_right(1) ^ (w >> 63)
}

fn lfsr(x: u8) -> u8 {
    let b0 = x & 1;
    let b1 = (x >> 1) & 1;
    let b2 = (x >> 2) & 1;
    let b3 = (x >> 3) & 1;
    ((b0 ^ b1) << 3) | (b3 << 2) | (b2 << 1) | b1
}

fn lfsr_inv(x: u8) -> u8 {
    let y0 = x & 1;
    let y1 = (x >> 1) & 1;
    let y2 = (x >> 2) & 1;
    let y3 = (x >> 3) & 1;
    (y2 << 3) | (y1 << 2) | (y0 << 1) | (y3 ^ y0)
}

fn tweak_forward(t: u64) -> u64 {
    let mut c = {
        let src = to_cells(t);
        let mut out = [0u8; 16];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = src[H[i]];
        }
        out
    };
    for &i in LFSR_CELLS.iter() {
        c[i] = lfsr(c[i]);
    }
    from_cells(&c)
}

fn tweak_backward(t: u64) -> u64 {
    let mut c = to_cells(t);
    for &i in LFSR_CELLS.iter() {
        c[i] = lfsr_inv(c[i]);
    }
    let mut out = [0u8; 16];
    let h_inv = inv_perm(H);
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = c[h_inv[i]];
    }
    from_cells(&out)
}

struct Layers {
    sbox: [u8; 16],
    sbox_inv: [u8; 16],
    tau_inv: [usize; 16],
}

impl Layers {
    fn new(variant: SboxVariant) -> Self {
        let (sbox, sbox_inv) = sbox_tables(variant);
        Layers { sbox, sbox_inv, tau_inv: inv_perm(TAU) }
    }

    fn forward(&self, mut is: u64, tk: u64, idx: u32) -> u64 {
        is ^= tk;
        if idx != 0 {
            is = permute_cells(is, &TAU);
            is = mix_columns(is);
        }
        map_cells(is, |v| self.sbox[v as usize])
    }

    fn backward(&self, is: u64, tk: u64, idx: u32) -> u64 {
        let mut is = map_cells(is, |v| self.sbox_inv[v as usize]);
        if idx != 0 {
            is = mix_columns(is);
            is = permute_cells(is, &self.tau_inv);
        }
        is ^ tk
    }

    fn reflect(&self, is: u64, tk: u64) -> u64 {
        let mut is = permute_cells(is, &TAU);
        is = mix_columns(is);
        is ^= tk;
        permute_cells(is, &self.tau_inv)
    }

    fn reflect_inv(&self, is: u64, tk: u64) -> u64 {
        let mut is = permute_cells(is, &TAU);
        is ^= tk;
        is = mix_columns(is);
        permute_cells(is, &self.tau_inv)
    }
}

/// Encrypt one 64-bit block under the given key, tweak and parameters.
pub fn qarma64_encrypt(
    key: PacKey,
    tweak: u64,
    plaintext: u64,
    params: CipherParams,
) -> Result<u64, ParamError> {
    params.validate()?;
    let layers = Layers::new(params.variant);
    let w0 = key.hi;
    let k0 = key.lo;
    let w1 = omega(w0);
    let k1 = k0;
    let r = params.rounds;

    let mut is = plaintext ^ w0;
    let mut tw = tweak;
    for i in 0..r {
        is = layers.forward(is, k0 ^ tw ^ ROUND_CONSTANTS[i as usize], i);
        tw = tweak_forward(tw);
    }
    is = layers.forward(is, w1 ^ tw, r);
    is = layers.reflect(is, k1);
    is = layers.backward(is, w0 ^ tw, r);
    for i in (0..r).rev() {
        tw = tweak_backward(tw);
        is = layers.backward(is, k0 ^ tw ^ ROUND_CONSTANTS[i as usize] ^ ALPHA, i);
    }
    Ok(is ^ w1)
}

/// Decrypt one 64-bit block; exact structural inverse of [`qarma64_encrypt`].
pub fn qarma64_decrypt(
    key: PacKey,
    tweak: u64,
    ciphertext: u64,
    params: CipherParams,
) -> Result<u64, ParamError> {
    params.validate()?;
    let layers = Layers::new(params.variant);
    let w0 = key.hi;
    let k0 = key.lo;
    let w1 = omega(w0);
    let k1 = k0;
    let r = params.rounds;

    let mut is = ciphertext ^ w1;
    let mut tw = tweak;
    for i in 0..r {
        is = layers.forward(is, k0 ^ tw ^ ROUND_CONSTANTS[i as usize] ^ ALPHA, i);
        tw = tweak_forward(tw);
    }
    is = layers.forward(is, w0 ^ tw, r);
    is = layers.reflect_inv(is, k1);
    is = layers.backward(is, w1 ^ tw, r);
    for i in (0..r).rev() {
        tw = tweak_backward(tw);
        is = layers.backward(is, k0 ^ tw ^ ROUND_CONSTANTS[i as usize], i);
    }
    Ok(is ^ w0)
}
