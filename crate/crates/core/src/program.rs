//! Loadable program images: code and data sections, symbols, and the
//! boot-time signing table.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::isa::Instruction;
use crate::key::KeyClass;
use crate::mem::PagePerms;

#[derive(Debug, Clone)]
pub struct CodeSection {
    pub name: String,
    pub base: u64,
    pub perms: PagePerms,
    pub instrs: Vec<Instruction>,
}

impl CodeSection {
    pub fn end(&self) -> u64 {
        self.base + (self.instrs.len() as u64) * crate::isa::INSTR_BYTES
    }
}

#[derive(Debug, Clone)]
pub struct DataSection {
    pub name: String,
    pub base: u64,
    pub perms: PagePerms,
    /// Initial contents, one 64-bit little-endian word per slot.
    pub words: Vec<u64>,
}

/// One entry of the boot-time signing table. `location - member_offset`
/// recovers the containing object's base address, which the pointer
/// integrity modifier needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SigningTableEntry {
    pub location: u64,
    pub key_class: KeyClass,
    pub const16: u16,
    pub member_offset: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Image {
    pub code: Vec<CodeSection>,
    pub data: Vec<DataSection>,
    pub signing_table: Vec<SigningTableEntry>,
    pub entry: u64,
    /// Base of the execute-only page holding the key setter, when present.
    pub key_setter: Option<u64>,
    pub symbols: BTreeMap<String, u64>,
}

impl Image {
    pub fn symbol(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).copied()
    }

    /// All instructions with their addresses, in section order.
    pub fn instructions(&self) -> impl Iterator<Item = (u64, &Instruction)> {
        self.code.iter().flat_map(|s| {
            s.instrs
                .iter()
                .enumerate()
                .map(move |(i, ins)| (s.base + (i as u64) * crate::isa::INSTR_BYTES, ins))
        })
    }
}
