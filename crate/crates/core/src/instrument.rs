//! Compiler-pass analogue: lowers the toy IR to machine programs under a
//! modifier scheme, generates protected-field accessors, builds and applies
//! the boot-time signing table, and statically verifies images.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::ir::{FieldDef, IrError, IrFunction, IrModule, IrOp};
use crate::isa::{Instruction, Operand, PairMode, FP, INSTR_BYTES, IP0, IP1, LR};
use crate::key::KeyClass;
use crate::machine::Machine;
use crate::mem::{PagePerms, PAGE_SIZE};
use crate::pauth::{self, ModifierScheme};
use crate::program::{CodeSection, DataSection, Image, SigningTableEntry};

/// Default load address of the instrumented text.
pub const TEXT_BASE: u64 = 0xffff_0000_0800_0000;

/// Scratch registers the accessor sequences burn (x8/x9 by convention, plus
/// the two intra-procedure-call registers for 1716 staging).
const ACC_VAL: u8 = 8;
const ACC_MOD: u8 = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LowerError {
    Ir(IrError),
    /// Accessor operand collides with a reserved scratch register.
    ReservedRegister { func: String, reg: u8 },
    UnknownSymbol(String),
    DuplicateLocation(u64),
}

impl From<IrError> for LowerError {
    fn from(e: IrError) -> Self {
        LowerError::Ir(e)
    }
}

impl core::fmt::Display for LowerError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LowerError::Ir(e) => write!(f, "{}", e),
            LowerError::ReservedRegister { func, reg } => {
                write!(f, "function '{}' uses reserved scratch register x{}", func, reg)
            }
            LowerError::UnknownSymbol(s) => write!(f, "unresolved symbol '{}'", s),
            LowerError::DuplicateLocation(a) => {
                write!(f, "duplicate signing-table location {:#018x}", a)
            }
        }
    }
}

/// Resolved addresses and link-time function ids.
#[derive(Debug, Clone, Default)]
pub struct LinkMap {
    pub functions: BTreeMap<String, u64>,
    pub objects: BTreeMap<String, u64>,
    pub func_ids: BTreeMap<String, u64>,
}

pub struct FuncContext<'a> {
    /// Final address of the function being lowered.
    pub addr: u64,
    /// Link-time id used by the PARTS-style modifier.
    pub func_id: u64,
    pub module: &'a IrModule,
    pub link: &'a LinkMap,
}

/// Extra instructions each call pays relative to the plain frame record.
pub const fn extra_call_instructions(scheme: ModifierScheme) -> usize {
    match scheme {
        ModifierScheme::None => 0,
        ModifierScheme::SpOnly => 2,
        ModifierScheme::Proposed => 8,
        ModifierScheme::PartsLike => 12,
        ModifierScheme::Compat1716 => 12,
    }
}

/// Sign-side half of the return-address protection, emitted before the
/// frame record push. The authenticate side mirrors it bit for bit.
fn ra_sign_sequence(scheme: ModifierScheme, func_addr: u64, func_id: u64) -> Vec<Instruction> {
    match scheme {
        ModifierScheme::None => vec![],
        ModifierScheme::SpOnly => {
            vec![Instruction::Pac { key: KeyClass::Ib, rd: LR, modifier: Operand::Sp }]
        }
        ModifierScheme::Proposed => vec![
            Instruction::Adr { rd: IP0, addr: func_addr },
            Instruction::Mov { rd: IP1, rn: Operand::Sp },
            Instruction::Bfi { rd: IP0, rn: IP1, lsb: 32, width: 32 },
            Instruction::Pac { key: KeyClass::Ib, rd: LR, modifier: Operand::X(IP0) },
        ],
        ModifierScheme::PartsLike => vec![
            Instruction::Movz { rd: IP0, imm: func_id as u16, shift: 0 },
            Instruction::Movk { rd: IP0, imm: (func_id >> 16) as u16, shift: 1 },
            Instruction::Movk { rd: IP0, imm: (func_id >> 32) as u16, shift: 2 },
            Instruction::Mov { rd: IP1, rn: Operand::Sp },
            Instruction::Bfi { rd: IP0, rn: IP1, lsb: 48, width: 16 },
            Instruction::Pac { key: KeyClass::Ib, rd: LR, modifier: Operand::X(IP0) },
        ],
        ModifierScheme::Compat1716 => vec![
            Instruction::Adr { rd: IP0, addr: func_addr },
            Instruction::Mov { rd: IP1, rn: Operand::Sp },
            Instruction::Bfi { rd: IP0, rn: IP1, lsb: 32, width: 32 },
            Instruction::Mov { rd: IP1, rn: Operand::X(LR) },
            Instruction::Pacib1716,
            Instruction::Mov { rd: LR, rn: Operand::X(IP1) },
        ],
    }
}

fn ra_auth_sequence(scheme: ModifierScheme, func_addr: u64, func_id: u64) -> Vec<Instruction> {
    match scheme {
        ModifierScheme::None => vec![],
        ModifierScheme::SpOnly => {
            vec![Instruction::Aut { key: KeyClass::Ib, rd: LR, modifier: Operand::Sp }]
        }
        ModifierScheme::Proposed => vec![
            Instruction::Adr { rd: IP0, addr: func_addr },
            Instruction::Mov { rd: IP1, rn: Operand::Sp },
            Instruction::Bfi { rd: IP0, rn: IP1, lsb: 32, width: 32 },
            Instruction::Aut { key: KeyClass::Ib, rd: LR, modifier: Operand::X(IP0) },
        ],
        ModifierScheme::PartsLike => vec![
            Instruction::Movz { rd: IP0, imm: func_id as u16, shift: 0 },
            Instruction::Movk { rd: IP0, imm: (func_id >> 16) as u16, shift: 1 },
            Instruction::Movk { rd: IP0, imm: (func_id >> 32) as u16, shift: 2 },
            Instruction::Mov { rd: IP1, rn: Operand::Sp },
            Instruction::Bfi { rd: IP0, rn: IP1, lsb: 48, width: 16 },
            Instruction::Aut { key: KeyClass::Ib, rd: LR, modifier: Operand::X(IP0) },
        ],
        ModifierScheme::Compat1716 => vec![
            Instruction::Adr { rd: IP0, addr: func_addr },
            Instruction::Mov { rd: IP1, rn: Operand::Sp },
            Instruction::Bfi { rd: IP0, rn: IP1, lsb: 32, width: 32 },
            Instruction::Mov { rd: IP1, rn: Operand::X(LR) },
            Instruction::Autib1716,
            Instruction::Mov { rd: LR, rn: Operand::X(IP1) },
        ],
    }
}

fn prologue(scheme: ModifierScheme, func_addr: u64, func_id: u64) -> Vec<Instruction> {
    let mut out = ra_sign_sequence(scheme, func_addr, func_id);
    out.push(Instruction::Stp {
        rt1: FP,
        rt2: LR,
        base: Operand::Sp,
        offset: -16,
        mode: PairMode::PreIndex,
    });
    out.push(Instruction::Mov { rd: FP, rn: Operand::Sp });
    out
}

fn epilogue(scheme: ModifierScheme, func_addr: u64, func_id: u64, alloc: u64) -> Vec<Instruction> {
    let mut out = Vec::new();
    if alloc != 0 {
        out.push(Instruction::AddImm { rd: Operand::Sp, rn: Operand::Sp, imm: alloc as i64 });
    }
    out.push(Instruction::Ldp {
        rt1: FP,
        rt2: LR,
        base: Operand::Sp,
        offset: 16,
        mode: PairMode::PostIndex,
    });
    out.extend(ra_auth_sequence(scheme, func_addr, func_id));
    out.push(Instruction::Ret);
    out
}

/// Whether field accessors sign/authenticate under this scheme.
fn fields_protected(scheme: ModifierScheme) -> bool {
    matches!(
        scheme,
        ModifierScheme::Proposed | ModifierScheme::PartsLike | ModifierScheme::Compat1716
    )
}

/// Setter sequence: value register signed against the containing object and
/// the member constant, then stored at the member offset.
pub fn setter_sequence(
    scheme: ModifierScheme,
    field: &FieldDef,
    object_reg: u8,
    value_reg: u8,
) -> Vec<Instruction> {
    if !field.protection.is_protected() || !fields_protected(scheme) {
        return vec![Instruction::Str {
            rt: value_reg,
            base: Operand::X(object_reg),
            offset: field.offset as i64,
        }];
    }
    if scheme == ModifierScheme::Compat1716 {
        return vec![
            Instruction::Mov { rd: IP1, rn: Operand::X(value_reg) },
            Instruction::Movz { rd: IP0, imm: field.const16, shift: 0 },
            Instruction::Bfi { rd: IP0, rn: object_reg, lsb: 16, width: 48 },
            Instruction::Pacib1716,
            Instruction::Str { rt: IP1, base: Operand::X(object_reg), offset: field.offset as i64 },
        ];
    }
    vec![
        Instruction::Mov { rd: ACC_VAL, rn: Operand::X(value_reg) },
        Instruction::Movz { rd: ACC_MOD, imm: field.const16, shift: 0 },
        Instruction::Bfi { rd: ACC_MOD, rn: object_reg, lsb: 16, width: 48 },
        Instruction::Pac { key: KeyClass::Db, rd: ACC_VAL, modifier: Operand::X(ACC_MOD) },
        Instruction::Str { rt: ACC_VAL, base: Operand::X(object_reg), offset: field.offset as i64 },
    ]
}

/// Getter sequence: loads and authenticates the member into x8.
pub fn getter_sequence(scheme: ModifierScheme, field: &FieldDef, object_reg: u8) -> Vec<Instruction> {
    if !field.protection.is_protected() || !fields_protected(scheme) {
        return vec![Instruction::Ldr {
            rt: ACC_VAL,
            base: Operand::X(object_reg),
            offset: field.offset as i64,
        }];
    }
    if scheme == ModifierScheme::Compat1716 {
        return vec![
            Instruction::Ldr { rt: IP1, base: Operand::X(object_reg), offset: field.offset as i64 },
            Instruction::Movz { rd: IP0, imm: field.const16, shift: 0 },
            Instruction::Bfi { rd: IP0, rn: object_reg, lsb: 16, width: 48 },
            Instruction::Autib1716,
            Instruction::Mov { rd: ACC_VAL, rn: Operand::X(IP1) },
        ];
    }
    vec![
        Instruction::Ldr { rt: ACC_VAL, base: Operand::X(object_reg), offset: field.offset as i64 },
        Instruction::Movz { rd: ACC_MOD, imm: field.const16, shift: 0 },
        Instruction::Bfi { rd: ACC_MOD, rn: object_reg, lsb: 16, width: 48 },
        Instruction::Aut { key: KeyClass::Db, rd: ACC_VAL, modifier: Operand::X(ACC_MOD) },
    ]
}

/// Standalone accessor pair for one protected field: object pointer in x0,
/// setter value in x1, getter result in x8.
pub struct Accessors {
    pub getter: Vec<Instruction>,
    pub setter: Vec<Instruction>,
}

pub fn gen_accessors(scheme: ModifierScheme, field: &FieldDef) -> Accessors {
    Accessors {
        getter: getter_sequence(scheme, field, 0),
        setter: setter_sequence(scheme, field, 0, 1),
    }
}

/// Lower one IR function to machine code at its final address.
pub fn instrument_function(
    func: &IrFunction,
    scheme: ModifierScheme,
    ctx: &FuncContext,
) -> Result<Vec<Instruction>, LowerError> {
    let mut out = prologue(scheme, ctx.addr, ctx.func_id);
    let mut alloc = 0u64;
    let mut explicit_return = false;
    for op in &func.body {
        match op {
            IrOp::Compute(n) => {
                for _ in 0..*n {
                    out.push(Instruction::Nop);
                }
            }
            IrOp::AllocStack(bytes) => {
                alloc += bytes;
                out.push(Instruction::AddImm {
                    rd: Operand::Sp,
                    rn: Operand::Sp,
                    imm: -(*bytes as i64),
                });
            }
            IrOp::AddrOf { object, dest_reg } => {
                check_operand_regs(func, &[*dest_reg])?;
                let base = *ctx
                    .link
                    .objects
                    .get(object)
                    .ok_or_else(|| LowerError::UnknownSymbol(object.clone()))?;
                out.push(Instruction::Adr { rd: *dest_reg, addr: base });
            }
            IrOp::Call(name) => {
                let target = *ctx
                    .link
                    .functions
                    .get(name)
                    .ok_or_else(|| LowerError::UnknownSymbol(name.clone()))?;
                out.push(Instruction::Bl { target });
            }
            IrOp::Return => {
                out.extend(epilogue(scheme, ctx.addr, ctx.func_id, alloc));
                explicit_return = true;
            }
            IrOp::StoreField { object_reg, field, value_reg } => {
                check_operand_regs(func, &[*object_reg, *value_reg])?;
                let fd = ctx.module.fields.get(field).ok_or(IrError::UnknownField(*field))?;
                out.extend(setter_sequence(scheme, fd, *object_reg, *value_reg));
            }
            IrOp::LoadField { object_reg, field, dest_reg } => {
                check_operand_regs(func, &[*object_reg])?;
                let fd = ctx.module.fields.get(field).ok_or(IrError::UnknownField(*field))?;
                out.extend(getter_sequence(scheme, fd, *object_reg));
                if *dest_reg != ACC_VAL {
                    out.push(Instruction::Mov { rd: *dest_reg, rn: Operand::X(ACC_VAL) });
                }
            }
            IrOp::IndirectCallViaField { object_reg, field } => {
                check_operand_regs(func, &[*object_reg])?;
                let fd = ctx.module.fields.get(field).ok_or(IrError::UnknownField(*field))?;
                out.extend(getter_sequence(scheme, fd, *object_reg));
                out.push(Instruction::Blr { rn: ACC_VAL });
            }
        }
    }
    if !explicit_return {
        out.extend(epilogue(scheme, ctx.addr, ctx.func_id, alloc));
    }
    Ok(out)
}

fn check_operand_regs(func: &IrFunction, regs: &[u8]) -> Result<(), LowerError> {
    for &r in regs {
        if matches!(r, ACC_VAL | ACC_MOD | IP0 | IP1 | LR | FP) {
            return Err(LowerError::ReservedRegister { func: func.name.clone(), reg: r });
        }
    }
    Ok(())
}

pub struct Lowered {
    pub image: Image,
    pub link: LinkMap,
}

/// Lower a whole module: assign function and object addresses, emit
/// instrumented code, initialize static data, and attach the signing table.
pub fn lower_module(
    module: &IrModule,
    scheme: ModifierScheme,
    text_base: u64,
) -> Result<Lowered, LowerError> {
    module.validate()?;

    // Pass 1: measure with zeroed addresses (lengths are address-free).
    let mut link = LinkMap::default();
    for (i, f) in module.functions.iter().enumerate() {
        link.functions.insert(f.name.clone(), 0);
        link.func_ids.insert(f.name.clone(), i as u64 + 1);
    }
    for o in &module.objects {
        link.objects.insert(o.name.clone(), 0);
    }
    let mut lengths = Vec::new();
    for f in &module.functions {
        let ctx = FuncContext { addr: 0, func_id: link.func_ids[&f.name], module, link: &link };
        lengths.push(instrument_function(f, scheme, &ctx)?.len() as u64);
    }

    // Assign addresses: functions packed from text_base, then one reserved
    // execute-only page for the key setter, then data objects.
    let mut addr = text_base;
    for (f, len) in module.functions.iter().zip(&lengths) {
        *link.functions.get_mut(&f.name).unwrap() = addr;
        addr += len * INSTR_BYTES;
    }
    let setter_page = (addr + PAGE_SIZE - 1) / PAGE_SIZE * PAGE_SIZE;
    let mut data_addr = setter_page + PAGE_SIZE;
    for o in &module.objects {
        link.objects.insert(o.name.clone(), data_addr);
        data_addr += (o.words * 8 + 63) / 64 * 64;
    }

    // Pass 2: emit at final addresses.
    let mut code = Vec::new();
    for f in &module.functions {
        let ctx = FuncContext {
            addr: link.functions[&f.name],
            func_id: link.func_ids[&f.name],
            module,
            link: &link,
        };
        code.push(CodeSection {
            name: f.name.clone(),
            base: link.functions[&f.name],
            perms: PagePerms::ReadExecute,
            instrs: instrument_function(f, scheme, &ctx)?,
        });
    }

    // Data sections with raw static-initializer values; boot_sign replaces
    // them in place with signed forms.
    let mut data = Vec::new();
    for o in &module.objects {
        let mut words = vec![0u64; o.words as usize];
        for init in module.inits.iter().filter(|i| i.object == o.name) {
            let fd = &module.fields[&init.field];
            let target = *link
                .functions
                .get(&init.target)
                .ok_or_else(|| LowerError::UnknownSymbol(init.target.clone()))?;
            words[(fd.offset / 8) as usize] = target;
        }
        data.push(DataSection {
            name: o.name.clone(),
            base: link.objects[&o.name],
            perms: PagePerms::ReadWrite,
            words,
        });
    }

    let signing_table = build_signing_table(module, &link, scheme)?;
    let entry = link
        .functions
        .get("main")
        .copied()
        .unwrap_or_else(|| module.functions.first().map(|f| link.functions[&f.name]).unwrap_or(text_base));

    let mut symbols = BTreeMap::new();
    for (n, &a) in &link.functions {
        symbols.insert(n.clone(), a);
    }
    for (n, &a) in &link.objects {
        symbols.insert(n.clone(), a);
    }

    let image = Image {
        code,
        data,
        signing_table,
        entry,
        key_setter: Some(setter_page),
        symbols,
    };
    Ok(Lowered { image, link })
}

/// Map the boot-time key setter into the image's reserved execute-only page.
pub fn attach_key_setter(
    image: &mut Image,
    keys: &crate::key::KeyBank,
    classes: &[KeyClass],
) -> u64 {
    let page = image.key_setter.expect("image reserves a key-setter page");
    let (base, instrs) = crate::machine::generate_key_setter(keys, classes, page);
    image.code.push(CodeSection {
        name: "key_setter".to_string(),
        base,
        perms: PagePerms::ExecuteOnly,
        instrs,
    });
    base
}

/// One signing-table entry per static initializer of a protected field.
/// Under schemes that leave fields unprotected the table is empty and the
/// raw initializers stand.
pub fn build_signing_table(
    module: &IrModule,
    link: &LinkMap,
    scheme: ModifierScheme,
) -> Result<Vec<SigningTableEntry>, LowerError> {
    if !fields_protected(scheme) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for init in &module.inits {
        let fd = module.fields.get(&init.field).ok_or(IrError::UnknownField(init.field))?;
        let base = *link
            .objects
            .get(&init.object)
            .ok_or_else(|| LowerError::UnknownSymbol(init.object.clone()))?;
        let location = base + fd.offset;
        if seen.insert(location, ()).is_some() {
            return Err(LowerError::DuplicateLocation(location));
        }
        out.push(SigningTableEntry {
            location,
            key_class: scheme.field_key(),
            const16: fd.const16,
            member_offset: fd.offset,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BootError {
    Unmapped(u64),
    /// The stored word is non-canonical: it was already signed (or is
    /// garbage); signing it again would destroy it.
    NotCanonical { location: u64, value: u64 },
    SignFailed(String),
}

impl core::fmt::Display for BootError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BootError::Unmapped(a) => write!(f, "signing-table location {:#018x} unmapped", a),
            BootError::NotCanonical { location, value } => write!(
                f,
                "word {:#018x} at {:#018x} is not canonical (double signing?)",
                value, location
            ),
            BootError::SignFailed(e) => write!(f, "boot signing failed: {}", e),
        }
    }
}

/// Sign every table entry in place, using the machine's installed keys.
/// Runs at boot before any authenticated use.
pub fn boot_sign(machine: &mut Machine, table: &[SigningTableEntry]) -> Result<(), BootError> {
    // Without the extension the authenticate side degrades to a no-op, so
    // the raw initializers must stand unsigned.
    if machine.cfg.pre_83 {
        return Ok(());
    }
    for entry in table {
        let raw = machine
            .memory()
            .peek_u64(entry.location)
            .map_err(|_| BootError::Unmapped(entry.location))?;
        if !machine.layout().is_canonical(raw) {
            return Err(BootError::NotCanonical { location: entry.location, value: raw });
        }
        let object_base = entry.location - entry.member_offset;
        let modifier = pauth::ptr_modifier(object_base, entry.const16);
        let signed = pauth::exec_pac(
            machine.mac(),
            machine.key_bank(),
            machine.pac_control(),
            entry.key_class,
            raw,
            modifier,
            &machine.layout(),
        )
        .map_err(|e| BootError::SignFailed(format!("{}", e)))?;
        machine
            .memory_mut()
            .poke_u64(entry.location, signed)
            .map_err(|_| BootError::Unmapped(entry.location))?;
        machine.record_boot_sign(entry.location);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyViolation {
    pub addr: u64,
    pub reason: String,
}

/// Static image checks: key-register reads and PAC-control clears are only
/// legitimate inside the designated key-setter page.
pub fn verify_image(image: &Image) -> Result<(), Vec<VerifyViolation>> {
    let setter = image.key_setter;
    let in_setter = |addr: u64| {
        setter.map_or(false, |base| addr >= base && addr < base + PAGE_SIZE)
    };
    let mut violations = Vec::new();
    for (addr, ins) in image.instructions() {
        match ins {
            Instruction::MrsKey { .. } if !in_setter(addr) => {
                violations.push(VerifyViolation {
                    addr,
                    reason: "key-register read outside the key-setter page".to_string(),
                });
            }
            Instruction::MsrPacCtl { bits } if *bits & 0xf != 0xf && !in_setter(addr) => {
                violations.push(VerifyViolation {
                    addr,
                    reason: format!(
                        "PAC-control write clearing enable flags ({:#06b})",
                        bits
                    ),
                });
            }
            _ => {}
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{IrObject, Protection, StaticInit};
    use crate::key::{KeyBank, PacKey};
    use crate::machine::MachineConfig;

    fn field() -> FieldDef {
        FieldDef {
            type_name: "file".to_string(),
            member_name: "f_ops".to_string(),
            const16: 0xfb45,
            offset: 40,
            protection: Protection::OpsPointer,
        }
    }

    fn module() -> IrModule {
        let mut fields = BTreeMap::new();
        fields.insert(1, field());
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![
                        IrOp::Compute(2),
                        IrOp::Call("helper".to_string()),
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "helper".to_string(),
                    body: vec![IrOp::Compute(1), IrOp::Return],
                },
                IrFunction { name: "read".to_string(), body: vec![IrOp::Return] },
            ],
            fields,
            objects: vec![IrObject { name: "file0".to_string(), words: 8 }],
            inits: vec![StaticInit {
                object: "file0".to_string(),
                field: 1,
                target: "read".to_string(),
            }],
        }
    }

    #[test]
    fn proposed_prologue_matches_published_shape() {
        let addr = 0xffff000008001000u64;
        let seq = ra_sign_sequence(ModifierScheme::Proposed, addr, 1);
        assert_eq!(
            seq,
            vec![
                Instruction::Adr { rd: IP0, addr },
                Instruction::Mov { rd: IP1, rn: Operand::Sp },
                Instruction::Bfi { rd: IP0, rn: IP1, lsb: 32, width: 32 },
                Instruction::Pac { key: KeyClass::Ib, rd: LR, modifier: Operand::X(IP0) },
            ]
        );
    }

    #[test]
    fn getter_matches_published_shape() {
        let seq = getter_sequence(ModifierScheme::Proposed, &field(), 0);
        assert_eq!(
            seq,
            vec![
                Instruction::Ldr { rt: 8, base: Operand::X(0), offset: 40 },
                Instruction::Movz { rd: 9, imm: 0xfb45, shift: 0 },
                Instruction::Bfi { rd: 9, rn: 0, lsb: 16, width: 48 },
                Instruction::Aut { key: KeyClass::Db, rd: 8, modifier: Operand::X(9) },
            ]
        );
    }

    #[test]
    fn extra_instruction_counts() {
        let m = module();
        let f = m.function("helper").unwrap();
        let link = LinkMap {
            functions: [("helper".to_string(), 0u64), ("main".to_string(), 0), ("read".to_string(), 0)]
                .into_iter()
                .collect(),
            objects: BTreeMap::new(),
            func_ids: [("helper".to_string(), 1u64), ("main".to_string(), 2), ("read".to_string(), 3)]
                .into_iter()
                .collect(),
        };
        let baseline = {
            let ctx = FuncContext { addr: 0, func_id: 1, module: &m, link: &link };
            instrument_function(f, ModifierScheme::None, &ctx).unwrap().len()
        };
        for (scheme, extra) in [
            (ModifierScheme::None, 0),
            (ModifierScheme::SpOnly, 2),
            (ModifierScheme::Proposed, 8),
            (ModifierScheme::PartsLike, 12),
            (ModifierScheme::Compat1716, 12),
        ] {
            let ctx = FuncContext { addr: 0, func_id: 1, module: &m, link: &link };
            let len = instrument_function(f, scheme, &ctx).unwrap().len();
            assert_eq!(len - baseline, extra, "{}", scheme.name());
            assert_eq!(extra, extra_call_instructions(scheme));
        }
    }

    #[test]
    fn signing_table_one_entry_per_init() {
        let m = module();
        let lowered = lower_module(&m, ModifierScheme::Proposed, TEXT_BASE).unwrap();
        assert_eq!(lowered.image.signing_table.len(), 1);
        let e = lowered.image.signing_table[0];
        assert_eq!(e.const16, 0xfb45);
        assert_eq!(e.member_offset, 40);
        assert_eq!(e.key_class, KeyClass::Db);
        assert_eq!(e.location - e.member_offset, lowered.link.objects["file0"]);

        let mut empty = m.clone();
        empty.inits.clear();
        let lowered = lower_module(&empty, ModifierScheme::Proposed, TEXT_BASE).unwrap();
        assert!(lowered.image.signing_table.is_empty());
    }

    fn boot_machine(image: &mut Image) -> Machine {
        let keys = KeyBank {
            ia: PacKey::new(1, 2),
            ib: PacKey::new(3, 4),
            da: PacKey::new(5, 6),
            db: PacKey::new(7, 8),
            ga: PacKey::new(9, 10),
        };
        let cfg = MachineConfig::default();
        attach_key_setter(image, &keys, &cfg.kernel_key_classes);
        let mut m = Machine::new(cfg, keys);
        m.load_image(image);
        m.install_kernel_keys().unwrap();
        m
    }

    #[test]
    fn boot_sign_signs_in_place_and_rejects_double_signing() {
        let m = module();
        let mut lowered = lower_module(&m, ModifierScheme::Proposed, TEXT_BASE).unwrap();
        let mut mach = boot_machine(&mut lowered.image);
        let loc = lowered.image.signing_table[0].location;
        let raw = mach.memory().peek_u64(loc).unwrap();
        assert_eq!(raw, lowered.link.functions["read"]);
        boot_sign(&mut mach, &lowered.image.signing_table).unwrap();
        let signed = mach.memory().peek_u64(loc).unwrap();
        assert_ne!(signed, raw);
        assert_eq!(mach.layout().strip_pac(signed), raw);
        // Double signing is detected, not silently destructive.
        assert!(matches!(
            boot_sign(&mut mach, &lowered.image.signing_table),
            Err(BootError::NotCanonical { .. })
        ));
    }

    #[test]
    fn verifier_accepts_own_output_and_rejects_key_reads() {
        let m = module();
        let mut lowered = lower_module(&m, ModifierScheme::Proposed, TEXT_BASE).unwrap();
        let keys = KeyBank::default();
        attach_key_setter(&mut lowered.image, &keys, &[KeyClass::Ib, KeyClass::Db]);
        verify_image(&lowered.image).unwrap();

        // Inject a key-register read into ordinary text.
        let mut bad = lowered.image.clone();
        bad.code[0].instrs.push(Instruction::MrsKey {
            rd: 0,
            class: KeyClass::Ib,
            half: crate::isa::KeyHalf::Hi,
        });
        let report = verify_image(&bad).unwrap_err();
        assert_eq!(report.len(), 1);
        assert!(report[0].reason.contains("key-register read"));

        // Clearing a PAC enable flag is rejected; enabling all is fine.
        let mut bad = lowered.image.clone();
        bad.code[0].instrs.push(Instruction::MsrPacCtl { bits: 0b0111 });
        assert!(verify_image(&bad).is_err());
        let mut ok = lowered.image.clone();
        ok.code[0].instrs.push(Instruction::MsrPacCtl { bits: 0b1111 });
        verify_image(&ok).unwrap();
    }

    #[test]
    fn reserved_register_operands_rejected() {
        let mut m = module();
        m.functions[0].body = vec![
            IrOp::LoadField { object_reg: 8, field: 1, dest_reg: 0 },
            IrOp::Return,
        ];
        assert!(matches!(
            lower_module(&m, ModifierScheme::Proposed, TEXT_BASE),
            Err(LowerError::ReservedRegister { .. })
        ));
    }
}
