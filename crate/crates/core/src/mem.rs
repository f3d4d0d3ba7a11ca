//! Permissioned paged memory. 4 KiB pages, little-endian.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;

pub const PAGE_SIZE: u64 = 4096;

pub fn page_base(addr: u64) -> u64 {
    addr & !(PAGE_SIZE - 1)
}

/// Meaningful permission combinations. Execute-only memory has neither read
/// nor write permission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PagePerms {
    ReadOnly,
    ReadWrite,
    ReadExecute,
    ExecuteOnly,
}

impl PagePerms {
    pub fn can_read(self) -> bool {
        !matches!(self, PagePerms::ExecuteOnly)
    }

    pub fn can_write(self) -> bool {
        matches!(self, PagePerms::ReadWrite)
    }

    pub fn can_fetch(self) -> bool {
        matches!(self, PagePerms::ReadExecute | PagePerms::ExecuteOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            PagePerms::ReadOnly => "ro",
            PagePerms::ReadWrite => "rw",
            PagePerms::ReadExecute => "rx",
            PagePerms::ExecuteOnly => "xo",
        }
    }
}

pub struct Page {
    pub perms: PagePerms,
    pub bytes: Box<[u8; PAGE_SIZE as usize]>,
}

impl Page {
    pub fn new(perms: PagePerms) -> Self {
        Page { perms, bytes: Box::new([0u8; PAGE_SIZE as usize]) }
    }
}

impl Clone for Page {
    fn clone(&self) -> Self {
        Page { perms: self.perms, bytes: self.bytes.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Fetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemError {
    pub addr: u64,
    pub kind: AccessKind,
    /// None: unmapped; Some: permission denied on a mapped page.
    pub perms: Option<PagePerms>,
}

impl core::fmt::Display for MemError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let verb = match self.kind {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Fetch => "fetch",
        };
        match self.perms {
            None => write!(f, "{} of unmapped address {:#018x}", verb, self.addr),
            Some(p) => write!(f, "{} denied at {:#018x} ({} page)", verb, self.addr, p.name()),
        }
    }
}

/// Sparse page map keyed by page base address.
#[derive(Clone, Default)]
pub struct Memory {
    pages: BTreeMap<u64, Page>,
}

impl Memory {
    pub fn new() -> Self {
        Memory { pages: BTreeMap::new() }
    }

    pub fn map(&mut self, base: u64, perms: PagePerms) {
        assert_eq!(base % PAGE_SIZE, 0, "page base must be 4 KiB aligned");
        self.pages.insert(base, Page::new(perms));
    }

    /// Map every page covering [base, base+len).
    pub fn map_range(&mut self, base: u64, len: u64, perms: PagePerms) {
        let first = page_base(base);
        let last = page_base(base + len.max(1) - 1);
        let mut p = first;
        loop {
            self.pages.entry(p).or_insert_with(|| Page::new(perms)).perms = perms;
            if p == last {
                break;
            }
            p += PAGE_SIZE;
        }
    }

    pub fn perms_at(&self, addr: u64) -> Option<PagePerms> {
        self.pages.get(&page_base(addr)).map(|p| p.perms)
    }

    pub fn is_mapped(&self, addr: u64) -> bool {
        self.pages.contains_key(&page_base(addr))
    }

    pub fn set_perms(&mut self, base: u64, perms: PagePerms) {
        if let Some(p) = self.pages.get_mut(&page_base(base)) {
            p.perms = perms;
        }
    }

    pub fn check(&self, addr: u64, kind: AccessKind) -> Result<(), MemError> {
        match self.pages.get(&page_base(addr)) {
            None => Err(MemError { addr, kind, perms: None }),
            Some(page) => {
                let ok = match kind {
                    AccessKind::Read => page.perms.can_read(),
                    AccessKind::Write => page.perms.can_write(),
                    AccessKind::Fetch => page.perms.can_fetch(),
                };
                if ok {
                    Ok(())
                } else {
                    Err(MemError { addr, kind, perms: Some(page.perms) })
                }
            }
        }
    }

    pub fn read_u8(&self, addr: u64) -> Result<u8, MemError> {
        self.check(addr, AccessKind::Read)?;
        let page = &self.pages[&page_base(addr)];
        Ok(page.bytes[(addr % PAGE_SIZE) as usize])
    }

    pub fn write_u8(&mut self, addr: u64, value: u8) -> Result<(), MemError> {
        self.check(addr, AccessKind::Write)?;
        let page = self.pages.get_mut(&page_base(addr)).unwrap();
        page.bytes[(addr % PAGE_SIZE) as usize] = value;
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, MemError> {
        let mut out = 0u64;
        for i in 0..8 {
            out |= (self.read_u8(addr + i)? as u64) << (8 * i);
        }
        Ok(out)
    }

    pub fn write_u64(&mut self, addr: u64, value: u64) -> Result<(), MemError> {
        for i in 0..8 {
            self.write_u8(addr + i, (value >> (8 * i)) as u8)?;
        }
        Ok(())
    }

    /// Raw write ignoring permissions: image loading and boot-time patching.
    pub fn poke_u64(&mut self, addr: u64, value: u64) -> Result<(), MemError> {
        for i in 0..8 {
            let a = addr + i;
            let page = self
                .pages
                .get_mut(&page_base(a))
                .ok_or(MemError { addr: a, kind: AccessKind::Write, perms: None })?;
            page.bytes[(a % PAGE_SIZE) as usize] = (value >> (8 * i)) as u8;
        }
        Ok(())
    }

    /// Raw read ignoring permissions: used by the trusted boot-signing path.
    pub fn peek_u64(&self, addr: u64) -> Result<u64, MemError> {
        let mut out = 0u64;
        for i in 0..8 {
            let a = addr + i;
            let page = self
                .pages
                .get(&page_base(a))
                .ok_or(MemError { addr: a, kind: AccessKind::Read, perms: None })?;
            out |= (page.bytes[(a % PAGE_SIZE) as usize] as u64) << (8 * i);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn execute_only_blocks_data_access() {
        let mut m = Memory::new();
        m.map(0x1000, PagePerms::ExecuteOnly);
        assert!(m.read_u8(0x1000).is_err());
        assert!(m.write_u8(0x1000, 1).is_err());
        assert!(m.check(0x1000, AccessKind::Fetch).is_ok());
    }

    #[test]
    fn read_only_blocks_writes() {
        let mut m = Memory::new();
        m.map(0x2000, PagePerms::ReadOnly);
        assert!(m.write_u8(0x2000, 1).is_err());
        assert_eq!(m.read_u8(0x2000).unwrap(), 0);
    }

    #[test]
    fn u64_round_trip_little_endian() {
        let mut m = Memory::new();
        m.map(0x3000, PagePerms::ReadWrite);
        m.write_u64(0x3010, 0x0102030405060708).unwrap();
        assert_eq!(m.read_u64(0x3010).unwrap(), 0x0102030405060708);
        assert_eq!(m.read_u8(0x3010).unwrap(), 0x08);
    }

    #[test]
    fn cross_page_access() {
        let mut m = Memory::new();
        m.map(0x3000, PagePerms::ReadWrite);
        m.map(0x4000, PagePerms::ReadWrite);
        m.write_u64(0x3ffc, 0xa1b2c3d4e5f60718).unwrap();
        assert_eq!(m.read_u64(0x3ffc).unwrap(), 0xa1b2c3d4e5f60718);
    }
}
