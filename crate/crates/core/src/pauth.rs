//! Architectural sign/authenticate/strip semantics and modifier
//! construction schemes.

use crate::key::{KeyBank, KeyClass, PacControl};
use crate::pac::{compute_pac, PointerMac};
use crate::pointer::{LayoutError, PointerLayout};

/// How the 64-bit modifier is built for return-address and pointer signing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModifierScheme {
    /// No signing at all (plain frame records).
    None,
    /// Compiler-default backward-edge CFI: the SP alone.
    SpOnly,
    /// Hardened scheme: low 32 bits of SP concatenated with the low 32 bits
    /// of the function address.
    Proposed,
    /// PARTS-style: low 16 bits of SP concatenated with a 48-bit link-time
    /// function id.
    PartsLike,
    /// The Proposed modifier issued through the backwards-compatible 1716
    /// instruction forms, with a single shared key for instruction and data
    /// pointers.
    Compat1716,
}

impl ModifierScheme {
    pub const ALL: [ModifierScheme; 5] = [
        ModifierScheme::None,
        ModifierScheme::SpOnly,
        ModifierScheme::Proposed,
        ModifierScheme::PartsLike,
        ModifierScheme::Compat1716,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModifierScheme::None => "none",
            ModifierScheme::SpOnly => "sp-only",
            ModifierScheme::Proposed => "proposed",
            ModifierScheme::PartsLike => "parts-like",
            ModifierScheme::Compat1716 => "compat-1716",
        }
    }

    /// Key class used for return addresses under this scheme.
    pub fn return_key(self) -> KeyClass {
        KeyClass::Ib
    }

    /// Key class used for protected data/function-pointer fields.
    /// Compat1716 has no 1716 forms for the data keys, so it shares IB.
    pub fn field_key(self) -> KeyClass {
        match self {
            ModifierScheme::Compat1716 => KeyClass::Ib,
            _ => KeyClass::Db,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PauthError {
    SchemeIsNone,
    /// PAC* executed on a pointer whose PAC field is not plain extension:
    /// almost always a sign-twice bug in the caller.
    AlreadySigned(u64),
    Layout(LayoutError),
}

impl From<LayoutError> for PauthError {
    fn from(e: LayoutError) -> Self {
        PauthError::Layout(e)
    }
}

impl core::fmt::Display for PauthError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PauthError::SchemeIsNone => write!(f, "modifier scheme 'none' has no modifier"),
            PauthError::AlreadySigned(p) => {
                write!(f, "sign of non-canonical pointer {:#018x} (already signed?)", p)
            }
            PauthError::Layout(e) => write!(f, "{}", e),
        }
    }
}

/// Return-address modifier for one call frame.
pub fn ra_modifier(
    scheme: ModifierScheme,
    sp: u64,
    func_addr: u64,
    func_id: u64,
) -> Result<u64, PauthError> {
    match scheme {
        ModifierScheme::None => Err(PauthError::SchemeIsNone),
        ModifierScheme::SpOnly => Ok(sp),
        ModifierScheme::Proposed | ModifierScheme::Compat1716 => {
            Ok((sp & 0xffff_ffff) << 32 | (func_addr & 0xffff_ffff))
        }
        ModifierScheme::PartsLike => Ok((sp & 0xffff) << 48 | (func_id & 0xffff_ffff_ffff)),
    }
}

/// Pointer-integrity modifier: low 48 bits of the containing object's
/// address over a 16-bit type/member constant.
pub fn ptr_modifier(object_addr: u64, type_const: u16) -> u64 {
    (object_addr & 0xffff_ffff_ffff) << 16 | type_const as u64
}

/// PAC* semantics: sign a canonical pointer, or pass it through untouched
/// when the key class is disabled.
pub fn exec_pac(
    mac: &impl PointerMac,
    bank: &KeyBank,
    ctl: &PacControl,
    key_class: KeyClass,
    ptr: u64,
    modifier: u64,
    layout: &PointerLayout,
) -> Result<u64, PauthError> {
    if !ctl.is_enabled(key_class) {
        return Ok(ptr);
    }
    if !layout.is_canonical(ptr) {
        return Err(PauthError::AlreadySigned(ptr));
    }
    let pac = compute_pac(mac, bank.get(key_class), ptr, modifier, layout)?;
    Ok(layout.insert_pac(ptr, pac)?)
}

/// AUT* semantics: a matching PAC yields the canonical pointer, a mismatch
/// yields the poisoned pointer. Failure is never an error value.
pub fn exec_aut(
    mac: &impl PointerMac,
    bank: &KeyBank,
    ctl: &PacControl,
    key_class: KeyClass,
    signed_ptr: u64,
    modifier: u64,
    layout: &PointerLayout,
) -> AutResult {
    if !ctl.is_enabled(key_class) {
        return AutResult { pointer: signed_ptr, failed: false };
    }
    let stripped = layout.strip_pac(signed_ptr);
    let key = bank.get(key_class);
    let expected = match compute_pac(mac, key, stripped, modifier, layout) {
        Ok(pac) => pac,
        // Stripping always yields a canonical pointer; unreachable in
        // practice, treated as a failure for robustness.
        Err(_) => {
            return AutResult { pointer: layout.poison(signed_ptr, key_class), failed: true }
        }
    };
    if layout.extract_pac(signed_ptr) == expected {
        AutResult { pointer: stripped, failed: false }
    } else {
        AutResult { pointer: layout.poison(signed_ptr, key_class), failed: true }
    }
}

/// Outcome of an authenticate operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutResult {
    pub pointer: u64,
    pub failed: bool,
}

/// XPAC semantics.
pub fn exec_xpac(signed_ptr: u64, layout: &PointerLayout) -> u64 {
    layout.strip_pac(signed_ptr)
}

/// PACIB1716: pointer staged in x17, modifier in x16. On a pre-8.3 machine
/// the instruction is an architectural no-op.
pub fn exec_pacib1716(
    mac: &impl PointerMac,
    bank: &KeyBank,
    ctl: &PacControl,
    x17: u64,
    x16: u64,
    layout: &PointerLayout,
    pre_83: bool,
) -> Result<u64, PauthError> {
    if pre_83 {
        return Ok(x17);
    }
    exec_pac(mac, bank, ctl, KeyClass::Ib, x17, x16, layout)
}

/// AUTIB1716: pointer staged in x17, modifier in x16.
pub fn exec_autib1716(
    mac: &impl PointerMac,
    bank: &KeyBank,
    ctl: &PacControl,
    x17: u64,
    x16: u64,
    layout: &PointerLayout,
    pre_83: bool,
) -> AutResult {
    if pre_83 {
        return AutResult { pointer: x17, failed: false };
    }
    exec_aut(mac, bank, ctl, KeyClass::Ib, x17, x16, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::key::PacKey;
    use crate::pac::QarmaMac;

    fn bank() -> KeyBank {
        KeyBank {
            ia: PacKey::new(1, 2),
            ib: PacKey::new(0x84be85ce9804e94b, 0xec2802d4e0a488e9),
            da: PacKey::new(3, 4),
            db: PacKey::new(5, 6),
            ga: PacKey::new(7, 8),
        }
    }

    #[test]
    fn ra_modifier_compositions() {
        let sp = 0xffff00000800f0d0u64;
        let func = 0xffff000008123456u64;
        assert_eq!(
            ra_modifier(ModifierScheme::Proposed, sp, func, 0).unwrap(),
            0x0800f0d008123456
        );
        assert_eq!(ra_modifier(ModifierScheme::SpOnly, sp, func, 0).unwrap(), sp);
        assert_eq!(
            ra_modifier(ModifierScheme::PartsLike, 0xffff00000008f0d0, func, 0x2a).unwrap(),
            0xf0d000000000002a
        );
        assert_eq!(
            ra_modifier(ModifierScheme::Compat1716, sp, func, 0).unwrap(),
            ra_modifier(ModifierScheme::Proposed, sp, func, 0).unwrap()
        );
        assert!(ra_modifier(ModifierScheme::None, sp, func, 0).is_err());
    }

    #[test]
    fn ptr_modifier_composition() {
        assert_eq!(ptr_modifier(0xffff800010a2b000, 0xfb45), 0x800010a2b000fb45);
        assert_eq!(ptr_modifier(0, 0), 0);
        assert_eq!(ptr_modifier(0xffffffffffffffff, 0x0001), 0xffffffffffff0001);
    }

    #[test]
    fn sign_authenticate_round_trip() {
        let mac = QarmaMac::default();
        let layout = PointerLayout::DEFAULT;
        let bank = bank();
        let ctl = PacControl::ALL_ENABLED;
        let p = 0xffff000008123456u64;
        let m = 0x0800f0d008123456u64;
        let signed = exec_pac(&mac, &bank, &ctl, KeyClass::Ib, p, m, &layout).unwrap();
        let out = exec_aut(&mac, &bank, &ctl, KeyClass::Ib, signed, m, &layout);
        assert!(!out.failed);
        assert_eq!(out.pointer, p);
    }

    #[test]
    fn modifier_mismatch_poisons() {
        let mac = QarmaMac::default();
        let layout = PointerLayout::DEFAULT;
        let bank = bank();
        let ctl = PacControl::ALL_ENABLED;
        let p = 0xffff000008123456u64;
        let signed = exec_pac(&mac, &bank, &ctl, KeyClass::Ib, p, 1, &layout).unwrap();
        let out = exec_aut(&mac, &bank, &ctl, KeyClass::Ib, signed, 2, &layout);
        assert!(out.failed);
        assert_eq!(layout.classify(out.pointer), crate::pointer::AddressClass::Invalid);
    }

    #[test]
    fn disabled_key_is_identity() {
        let mac = QarmaMac::default();
        let layout = PointerLayout::DEFAULT;
        let bank = bank();
        let ctl = PacControl::ALL_DISABLED;
        let p = 0xffff000008123456u64;
        assert_eq!(exec_pac(&mac, &bank, &ctl, KeyClass::Ib, p, 1, &layout).unwrap(), p);
        let out = exec_aut(&mac, &bank, &ctl, KeyClass::Ib, p, 2, &layout);
        assert!(!out.failed);
        assert_eq!(out.pointer, p);
    }

    #[test]
    fn sign_twice_is_diagnosed() {
        let mac = QarmaMac::default();
        let layout = PointerLayout::DEFAULT;
        let bank = bank();
        let ctl = PacControl::ALL_ENABLED;
        let p = 0xffff000008123456u64;
        let signed = exec_pac(&mac, &bank, &ctl, KeyClass::Ib, p, 1, &layout).unwrap();
        if signed != p {
            assert!(matches!(
                exec_pac(&mac, &bank, &ctl, KeyClass::Ib, signed, 1, &layout),
                Err(PauthError::AlreadySigned(_))
            ));
        }
    }

    #[test]
    fn compat_1716_pre83_is_noop() {
        let mac = QarmaMac::default();
        let layout = PointerLayout::DEFAULT;
        let bank = bank();
        let ctl = PacControl::ALL_ENABLED;
        let p = 0xffff000008123456u64;
        assert_eq!(exec_pacib1716(&mac, &bank, &ctl, p, 7, &layout, true).unwrap(), p);
        let out = exec_autib1716(&mac, &bank, &ctl, p, 7, &layout, true);
        assert_eq!(out.pointer, p);
        // On an 8.3 machine the 1716 forms equal the plain IB forms.
        let signed = exec_pacib1716(&mac, &bank, &ctl, p, 7, &layout, false).unwrap();
        assert_eq!(signed, exec_pac(&mac, &bank, &ctl, KeyClass::Ib, p, 7, &layout).unwrap());
        let out = exec_autib1716(&mac, &bank, &ctl, signed, 8, &layout, false);
        assert!(out.failed);
    }
}
