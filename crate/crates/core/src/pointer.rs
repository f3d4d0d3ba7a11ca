//! VMSA pointer representation: address classification, PAC field geometry,
//! insertion/stripping and failure poisoning.
//!
//! A 64-bit pointer splits into addressing bits (`va_bits` of them), the
//! translation-table selector at bit 55, an optional ignored tag byte at
//! bits 63:56, and sign-extension bits covering the rest. The PAC occupies
//! exactly the extension bits (plus the tag byte when it is not ignored);
//! bit 55 is never part of the PAC.

use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PointerLayout {
    pub va_bits: u32,
    /// Top-byte-ignore for user-half addresses (bit 55 = 0).
    pub tbi_user: bool,
    /// Top-byte-ignore for kernel-half addresses (bit 55 = 1).
    pub tbi_kernel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AddressClass {
    User,
    Kernel,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutError {
    BadVaBits(u32),
    InvalidSpace,
    NonCanonical(u64),
    PacTooWide { pac: u64, width: u32 },
}

impl core::fmt::Display for LayoutError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LayoutError::BadVaBits(n) => write!(f, "va_bits {} outside 32..=52", n),
            LayoutError::InvalidSpace => write!(f, "pac_width is undefined for the Invalid class"),
            LayoutError::NonCanonical(p) => write!(f, "pointer {:#018x} is not canonical", p),
            LayoutError::PacTooWide { pac, width } => {
                write!(f, "pac value {:#x} does not fit in {} bits", pac, width)
            }
        }
    }
}

impl PointerLayout {
    /// 48-bit VA, no tag bytes: the typical kernel configuration.
    pub const DEFAULT: PointerLayout = PointerLayout {
        va_bits: 48,
        tbi_user: false,
        tbi_kernel: false,
    };

    pub fn new(va_bits: u32, tbi_user: bool, tbi_kernel: bool) -> Result<Self, LayoutError> {
        if !(32..=52).contains(&va_bits) {
            return Err(LayoutError::BadVaBits(va_bits));
        }
        Ok(PointerLayout { va_bits, tbi_user, tbi_kernel })
    }

    fn tbi(&self, class: AddressClass) -> bool {
        match class {
            AddressClass::User => self.tbi_user,
            AddressClass::Kernel => self.tbi_kernel,
            AddressClass::Invalid => false,
        }
    }

    /// Bit positions of the PAC field for the given address half,
    /// most significant first.
    pub fn pac_field_bits(&self, class: AddressClass) -> Vec<u32> {
        let mut bits = Vec::new();
        if !self.tbi(class) {
            for b in (56..=63).rev() {
                bits.push(b);
            }
        }
        for b in (self.va_bits..=54).rev() {
            bits.push(b);
        }
        bits
    }

    /// Number of PAC bits available for the given address half.
    pub fn pac_width(&self, class: AddressClass) -> Result<u32, LayoutError> {
        if class == AddressClass::Invalid {
            return Err(LayoutError::InvalidSpace);
        }
        let mut width = 64 - self.va_bits - 1;
        if self.tbi(class) {
            width -= 8;
        }
        Ok(width)
    }

    /// Mask covering the PAC field bits of the given half.
    fn pac_mask(&self, class: AddressClass) -> u64 {
        self.pac_field_bits(class).iter().fold(0u64, |m, &b| m | (1u64 << b))
    }

    /// Classify a 64-bit value: Kernel iff bit 55 is set and every
    /// extension bit is one, User iff bit 55 is clear and every extension
    /// bit is zero, Invalid otherwise. Ignored tag bytes do not take part.
    pub fn classify(&self, addr: u64) -> AddressClass {
        let select = addr & (1u64 << 55) != 0;
        let class = if select { AddressClass::Kernel } else { AddressClass::User };
        let mask = self.pac_mask(class);
        let ext = addr & mask;
        let canonical = if select { mask } else { 0 };
        if ext == canonical {
            class
        } else {
            AddressClass::Invalid
        }
    }

    pub fn is_canonical(&self, addr: u64) -> bool {
        self.classify(addr) != AddressClass::Invalid
    }

    /// Place a PAC value into the pointer's PAC field, most significant PAC
    /// bit into the highest field position. Addressing bits and bit 55 are
    /// untouched.
    pub fn insert_pac(&self, ptr: u64, pac: u64) -> Result<u64, LayoutError> {
        let class = self.classify(ptr);
        if class == AddressClass::Invalid {
            return Err(LayoutError::NonCanonical(ptr));
        }
        let field = self.pac_field_bits(class);
        let width = field.len() as u32;
        if width < 64 && pac >> width != 0 {
            return Err(LayoutError::PacTooWide { pac, width });
        }
        let mut out = ptr & !self.pac_mask(class);
        for (i, &pos) in field.iter().enumerate() {
            let bit = (pac >> (width - 1 - i as u32)) & 1;
            out |= bit << pos;
        }
        Ok(out)
    }

    /// Read the PAC field of a pointer, most significant field position
    /// first. The half is chosen by bit 55.
    pub fn extract_pac(&self, ptr: u64) -> u64 {
        let class = if ptr & (1u64 << 55) != 0 { AddressClass::Kernel } else { AddressClass::User };
        let field = self.pac_field_bits(class);
        let mut pac = 0u64;
        for &pos in field.iter() {
            pac = (pac << 1) | ((ptr >> pos) & 1);
        }
        pac
    }

    /// Replace the PAC field with the sign extension of bit 55. Idempotent.
    pub fn strip_pac(&self, ptr: u64) -> u64 {
        let select = ptr & (1u64 << 55) != 0;
        let class = if select { AddressClass::Kernel } else { AddressClass::User };
        let mask = self.pac_mask(class);
        if select {
            ptr | mask
        } else {
            ptr & !mask
        }
    }

    /// Produce the architecturally invalid pointer that a failed
    /// authentication leaves behind: the stripped pointer with bit 62
    /// inverted and a two-bit key-class tag in bits 61:60. When the
    /// relevant tag byte is ignored for translation, bit 54 is inverted as
    /// well so that the result never classifies as User or Kernel.
    pub fn poison(&self, ptr: u64, key_class: crate::key::KeyClass) -> u64 {
        let stripped = self.strip_pac(ptr);
        let select = stripped & (1u64 << 55) != 0;
        let class = if select { AddressClass::Kernel } else { AddressClass::User };
        let tag = key_class.poison_tag().unwrap_or(0);
        let mut out = stripped ^ (1u64 << 62);
        out = (out & !(0b11u64 << 60)) | (tag << 60);
        if self.tbi(class) && self.va_bits <= 54 {
            out ^= 1u64 << 54;
        }
        out
    }
}

impl Default for PointerLayout {
    fn default() -> Self {
        PointerLayout::DEFAULT
    }
}
