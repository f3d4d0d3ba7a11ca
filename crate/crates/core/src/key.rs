//! PAuth keys, key classes and the SCTLR-style enable flags.

use rand_core::RngCore;

/// One 128-bit pointer-authentication key, held as the pair of 64-bit
/// system-register values that configure it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PacKey {
    pub hi: u64,
    pub lo: u64,
}

impl PacKey {
    pub const fn new(hi: u64, lo: u64) -> Self {
        PacKey { hi, lo }
    }

    pub fn random(rng: &mut impl RngCore) -> Self {
        PacKey { hi: rng.next_u64(), lo: rng.next_u64() }
    }
}

/// The five key classes: two instruction keys, two data keys, one generic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyClass {
    Ia,
    Ib,
    Da,
    Db,
    Ga,
}

impl KeyClass {
    pub const ALL: [KeyClass; 5] = [KeyClass::Ia, KeyClass::Ib, KeyClass::Da, KeyClass::Db, KeyClass::Ga];

    /// Two-bit diagnostic tag used when poisoning a failed pointer.
    /// GA never authenticates pointers and has no tag.
    pub fn poison_tag(self) -> Option<u64> {
        match self {
            KeyClass::Ia => Some(0),
            KeyClass::Ib => Some(1),
            KeyClass::Da => Some(2),
            KeyClass::Db => Some(3),
            KeyClass::Ga => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeyClass::Ia => "ia",
            KeyClass::Ib => "ib",
            KeyClass::Da => "da",
            KeyClass::Db => "db",
            KeyClass::Ga => "ga",
        }
    }
}

/// The five keys configured on one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KeyBank {
    pub ia: PacKey,
    pub ib: PacKey,
    pub da: PacKey,
    pub db: PacKey,
    pub ga: PacKey,
}

impl KeyBank {
    pub fn get(&self, class: KeyClass) -> PacKey {
        match class {
            KeyClass::Ia => self.ia,
            KeyClass::Ib => self.ib,
            KeyClass::Da => self.da,
            KeyClass::Db => self.db,
            KeyClass::Ga => self.ga,
        }
    }

    pub fn set(&mut self, class: KeyClass, key: PacKey) {
        match class {
            KeyClass::Ia => self.ia = key,
            KeyClass::Ib => self.ib = key,
            KeyClass::Da => self.da = key,
            KeyClass::Db => self.db = key,
            KeyClass::Ga => self.ga = key,
        }
    }

    pub fn random(rng: &mut impl RngCore) -> Self {
        KeyBank {
            ia: PacKey::random(rng),
            ib: PacKey::random(rng),
            da: PacKey::random(rng),
            db: PacKey::random(rng),
            ga: PacKey::random(rng),
        }
    }
}

/// Per-class enable flags, modeled on the SCTLR_EL1 EnIA/EnIB/EnDA/EnDB bits.
/// A disabled class turns its sign/authenticate instructions into no-ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacControl {
    pub enable_ia: bool,
    pub enable_ib: bool,
    pub enable_da: bool,
    pub enable_db: bool,
}

impl PacControl {
    pub const ALL_ENABLED: PacControl = PacControl {
        enable_ia: true,
        enable_ib: true,
        enable_da: true,
        enable_db: true,
    };

    pub const ALL_DISABLED: PacControl = PacControl {
        enable_ia: false,
        enable_ib: false,
        enable_da: false,
        enable_db: false,
    };

    pub fn is_enabled(&self, class: KeyClass) -> bool {
        match class {
            KeyClass::Ia => self.enable_ia,
            KeyClass::Ib => self.enable_ib,
            KeyClass::Da => self.enable_da,
            KeyClass::Db => self.enable_db,
            // The generic key has no enable bit; PACGA always operates.
            KeyClass::Ga => true,
        }
    }

    /// Pack into the 4-bit immediate used by the control MSR form
    /// (bit 0 = IA, 1 = IB, 2 = DA, 3 = DB).
    pub fn to_bits(&self) -> u8 {
        (self.enable_ia as u8)
            | (self.enable_ib as u8) << 1
            | (self.enable_da as u8) << 2
            | (self.enable_db as u8) << 3
    }

    pub fn from_bits(bits: u8) -> Self {
        PacControl {
            enable_ia: bits & 1 != 0,
            enable_ib: bits & 2 != 0,
            enable_da: bits & 4 != 0,
            enable_db: bits & 8 != 0,
        }
    }
}

impl Default for PacControl {
    fn default() -> Self {
        PacControl::ALL_ENABLED
    }
}
