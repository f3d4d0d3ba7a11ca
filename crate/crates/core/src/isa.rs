//! Instruction forms understood by the mini-machine.
//!
//! This is not an encoding of real AArch64; it is the minimal structured
//! instruction set the instrumentation pass emits and the machine executes,
//! decodable one-to-one from the text program format.

use crate::key::KeyClass;

pub const LR: u8 = 30;
pub const FP: u8 = 29;
pub const IP0: u8 = 16;
pub const IP1: u8 = 17;
pub const NUM_GPRS: usize = 31;

/// Size of one instruction slot in the address space.
pub const INSTR_BYTES: u64 = 4;

/// General-purpose register or the (banked) stack pointer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    X(u8),
    Sp,
}

/// Which half of a 128-bit key register pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyHalf {
    Hi,
    Lo,
}

/// Addressing mode for STP/LDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// [base, #off]
    Offset,
    /// [base, #off]! — base updated before the access.
    PreIndex,
    /// [base], #off — base updated after the access.
    PostIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Nop,
    /// rd = imm << (16*shift)
    Movz { rd: u8, imm: u16, shift: u8 },
    /// rd[16*shift+15 : 16*shift] = imm
    Movk { rd: u8, imm: u16, shift: u8 },
    Mov { rd: u8, rn: Operand },
    /// Absolute address literal (the assembler resolves labels).
    Adr { rd: u8, addr: u64 },
    /// rd[lsb+width-1 : lsb] = rn[width-1 : 0]
    Bfi { rd: u8, rn: u8, lsb: u8, width: u8 },
    AddImm { rd: Operand, rn: Operand, imm: i64 },
    Ldr { rt: u8, base: Operand, offset: i64 },
    Str { rt: u8, base: Operand, offset: i64 },
    Stp { rt1: u8, rt2: u8, base: Operand, offset: i64, mode: PairMode },
    Ldp { rt1: u8, rt2: u8, base: Operand, offset: i64, mode: PairMode },
    Pac { key: KeyClass, rd: u8, modifier: Operand },
    Aut { key: KeyClass, rd: u8, modifier: Operand },
    Pacib1716,
    Autib1716,
    Xpaci { rd: u8 },
    Xpacd { rd: u8 },
    Bl { target: u64 },
    B { target: u64 },
    Blr { rn: u8 },
    /// Authenticated branch-and-link with key IB.
    Blrab { rn: u8, modifier: Operand },
    Ret,
    Svc { imm: u16 },
    Eret,
    MsrKey { class: KeyClass, half: KeyHalf, rn: u8 },
    MrsKey { rd: u8, class: KeyClass, half: KeyHalf },
    /// Write the four PAuth enable flags (immediate form, statically
    /// auditable).
    MsrPacCtl { bits: u8 },
    Brk { imm: u16 },
    Hlt,
}

impl Instruction {
    /// True for the PAuth instruction class (costed at the PA-analogue
    /// rate by the machine).
    pub fn is_pauth(&self) -> bool {
        matches!(
            self,
            Instruction::Pac { .. }
                | Instruction::Aut { .. }
                | Instruction::Pacib1716
                | Instruction::Autib1716
                | Instruction::Xpaci { .. }
                | Instruction::Xpacd { .. }
                | Instruction::Blrab { .. }
        )
    }
}
