//! Deterministic mini-machine: registers, two exception levels, permissioned
//! paged memory, exception entry/exit with key switching, brute-force halt
//! and cycle accounting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::isa::{Instruction, KeyHalf, Operand, PairMode, INSTR_BYTES, NUM_GPRS};
use crate::key::{KeyBank, KeyClass, PacControl};
use crate::mem::{AccessKind, MemError, Memory, PagePerms, PAGE_SIZE};
use crate::pac::QarmaMac;
use crate::pauth;
use crate::pointer::{AddressClass, PointerLayout};
use crate::program::Image;
use crate::qarma::CipherParams;

/// 16-bit type constant for the saved kernel SP slot in a task record.
pub const TASK_SP_CONST: u16 = 0x5350;
/// Byte offset of the saved SP inside a task record.
pub const TASK_SP_OFFSET: u64 = 0;

pub const KERNEL_STACK_SIZE: u64 = 16 * 1024;
pub const KERNEL_STACK_ALIGN: u64 = 4 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExceptionLevel {
    El0,
    El1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    Clean,
    BruteForceSuspected,
    Breakpoint(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Fetch from an unmapped, non-executable or undecodable location.
    InstrFetch { addr: u64 },
    /// Control transfer to an Invalid-class address (poison detonation).
    InvalidTarget { addr: u64 },
    /// Data access through an Invalid-class address.
    InvalidDataAddr { addr: u64 },
    /// Permission or mapping violation on a data access.
    Data(MemError),
    /// Instruction not available at this level or in this configuration.
    Undefined { pc: u64 },
    /// Sign of a non-canonical (already signed?) pointer.
    PacPrecondition { pc: u64, value: u64 },
    State(String),
}

impl Fault {
    /// Key class recovered from a poisoned pointer's diagnostic tag.
    pub fn poison_key_class(addr: u64) -> KeyClass {
        match (addr >> 60) & 0b11 {
            0 => KeyClass::Ia,
            1 => KeyClass::Ib,
            2 => KeyClass::Da,
            _ => KeyClass::Db,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Running,
    Halted(HaltReason),
    Faulted(Fault),
    /// Control reached an address the attacker planted.
    Hijacked { target: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Exec { mnemonic: &'static str },
    AuthOk { key: KeyClass },
    AuthFail { key: KeyClass },
    KeyInstall { keys: usize, cycles: u64 },
    UserKeyRestore { keys: usize, cycles: u64 },
    EnterKernel { thread: u64 },
    ExitKernel { thread: u64 },
    ContextSwitch { from: u64, to: u64 },
    AttackerWrite { addr: u64, value: u64, ok: bool },
    AttackerRead { addr: u64, value: Option<u64> },
    BootSign { location: u64 },
    Fault { desc: String },
    Halt { reason: HaltReason },
    Hijack { target: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub pc: u64,
    pub kind: EventKind,
    pub cycles: u64,
}

#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub layout: PointerLayout,
    pub cipher: CipherParams,
    pub fault_threshold: u32,
    /// Pre-8.3 core: dedicated PAuth instructions are undefined, the 1716
    /// forms are no-ops, key register writes have no effect.
    pub pre_83: bool,
    /// Key classes the kernel installs and pays for on each transition.
    pub kernel_key_classes: Vec<KeyClass>,
    pub pauth_cost: u64,
    pub key_install_cost: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            layout: PointerLayout::DEFAULT,
            cipher: CipherParams::default(),
            fault_threshold: 8,
            pre_83: false,
            kernel_key_classes: alloc::vec![KeyClass::Ib, KeyClass::Ia, KeyClass::Db],
            pauth_cost: 4,
            key_install_cost: 9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThreadRec {
    pub user_keys: KeyBank,
    pub kernel_stack_base: u64,
    /// Address of the in-memory task record holding the saved kernel SP.
    pub task_struct: u64,
}

pub struct Machine {
    pub cfg: MachineConfig,
    mac: QarmaMac,

    gpr: [u64; NUM_GPRS],
    sp_el0: u64,
    sp_el1: u64,
    pc: u64,
    elr_el1: u64,
    current_el: ExceptionLevel,

    key_bank: KeyBank,
    pac_control: PacControl,
    /// Boot-time kernel keys; conceptually live only inside the XOM setter.
    kernel_keys: KeyBank,
    preemption_enabled: bool,

    memory: Memory,
    code: BTreeMap<u64, Instruction>,
    /// Base of the execute-only key-setter page, when mapped.
    key_setter: Option<u64>,
    /// Address the syscall vector transfers to.
    vector: Option<u64>,

    fault_counter: u32,
    cycle_counter: u64,
    step_counter: u64,
    status: Status,

    threads: BTreeMap<u64, ThreadRec>,
    current_thread: u64,

    tainted_regs: u32,
    tainted_bytes: BTreeSet<u64>,

    pub trace: Vec<TraceEvent>,
}

impl Machine {
    pub fn new(cfg: MachineConfig, kernel_keys: KeyBank) -> Self {
        let mac = QarmaMac::new(cfg.cipher);
        Machine {
            cfg,
            mac,
            gpr: [0; NUM_GPRS],
            sp_el0: 0,
            sp_el1: 0,
            pc: 0,
            elr_el1: 0,
            current_el: ExceptionLevel::El1,
            key_bank: KeyBank::default(),
            pac_control: PacControl::ALL_ENABLED,
            kernel_keys,
            preemption_enabled: false,
            memory: Memory::new(),
            code: BTreeMap::new(),
            key_setter: None,
            vector: None,
            fault_counter: 0,
            cycle_counter: 0,
            step_counter: 0,
            status: Status::Running,
            threads: BTreeMap::new(),
            current_thread: 0,
            tainted_regs: 0,
            tainted_bytes: BTreeSet::new(),
            trace: Vec::new(),
        }
    }

    // ---- state accessors -------------------------------------------------

    pub fn status(&self) -> &Status {
        &self.status
    }

    pub fn gpr(&self, r: u8) -> u64 {
        self.gpr[r as usize]
    }

    pub fn set_gpr(&mut self, r: u8, v: u64) {
        self.gpr[r as usize] = v;
    }

    pub fn sp(&self) -> u64 {
        match self.current_el {
            ExceptionLevel::El0 => self.sp_el0,
            ExceptionLevel::El1 => self.sp_el1,
        }
    }

    pub fn set_sp(&mut self, v: u64) {
        match self.current_el {
            ExceptionLevel::El0 => self.sp_el0 = v,
            ExceptionLevel::El1 => self.sp_el1 = v,
        }
    }

    pub fn sp_el1(&self) -> u64 {
        self.sp_el1
    }

    pub fn set_sp_el1(&mut self, v: u64) {
        self.sp_el1 = v;
    }

    pub fn set_sp_el0(&mut self, v: u64) {
        self.sp_el0 = v;
    }

    pub fn pc(&self) -> u64 {
        self.pc
    }

    pub fn set_pc(&mut self, pc: u64) {
        self.pc = pc;
    }

    pub fn current_el(&self) -> ExceptionLevel {
        self.current_el
    }

    pub fn set_current_el(&mut self, el: ExceptionLevel) {
        self.current_el = el;
    }

    pub fn cycles(&self) -> u64 {
        self.cycle_counter
    }

    pub fn steps(&self) -> u64 {
        self.step_counter
    }

    pub fn key_bank(&self) -> &KeyBank {
        &self.key_bank
    }

    pub fn pac_control(&self) -> &PacControl {
        &self.pac_control
    }

    pub fn set_pac_control(&mut self, ctl: PacControl) {
        self.pac_control = ctl;
    }

    pub fn fault_counter(&self) -> u32 {
        self.fault_counter
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn layout(&self) -> PointerLayout {
        self.cfg.layout
    }

    pub fn mac(&self) -> &QarmaMac {
        &self.mac
    }

    pub fn set_vector(&mut self, addr: u64) {
        self.vector = Some(addr);
    }

    pub fn key_setter_page(&self) -> Option<u64> {
        self.key_setter
    }

    // ---- loading ---------------------------------------------------------

    pub fn load_image(&mut self, image: &Image) {
        for sec in &image.code {
            self.map_code(sec.base, &sec.instrs, sec.perms);
        }
        for sec in &image.data {
            let len = (sec.words.len() as u64 * 8).max(1);
            self.memory.map_range(sec.base, len, sec.perms);
            for (i, &w) in sec.words.iter().enumerate() {
                self.memory.poke_u64(sec.base + 8 * i as u64, w).expect("mapped");
            }
        }
        if let Some(base) = image.key_setter {
            self.key_setter = Some(base);
        }
        if let Some(v) = image.symbol("vector") {
            self.vector = Some(v);
        }
        self.pc = image.entry;
    }

    pub fn map_code(&mut self, base: u64, instrs: &[Instruction], perms: PagePerms) {
        let len = (instrs.len() as u64 * INSTR_BYTES).max(1);
        self.memory.map_range(base, len, perms);
        for (i, &ins) in instrs.iter().enumerate() {
            self.code.insert(base + INSTR_BYTES * i as u64, ins);
        }
    }

    pub fn map_data(&mut self, base: u64, len: u64, perms: PagePerms) {
        self.memory.map_range(base, len, perms);
    }

    /// Record a boot-time in-place signing in the trace.
    pub fn record_boot_sign(&mut self, location: u64) {
        self.push_event(EventKind::BootSign { location });
    }

    /// Return a stopped machine to the running state so another entry point
    /// can be executed on the same booted state.
    pub fn clear_status(&mut self) {
        self.status = Status::Running;
    }

    // ---- threads ---------------------------------------------------------

    pub fn register_thread(&mut self, id: u64, rec: ThreadRec) {
        assert_eq!(rec.kernel_stack_base % KERNEL_STACK_ALIGN, 0, "kernel stack alignment");
        self.threads.insert(id, rec);
    }

    pub fn thread(&self, id: u64) -> Option<&ThreadRec> {
        self.threads.get(&id)
    }

    pub fn current_thread(&self) -> u64 {
        self.current_thread
    }

    pub fn set_current_thread(&mut self, id: u64) {
        self.current_thread = id;
    }

    pub fn kernel_stack_top(&self, id: u64) -> u64 {
        let rec = &self.threads[&id];
        rec.kernel_stack_base + KERNEL_STACK_SIZE
    }

    /// Sign and store a thread's initial kernel SP into its task record, as
    /// the scheduler would for a task that has never run.
    pub fn seed_task_sp(&mut self, id: u64) -> Result<(), Fault> {
        let (task, sp) = {
            let rec = self.threads.get(&id).ok_or_else(|| {
                Fault::State(format!("unknown thread {}", id))
            })?;
            (rec.task_struct, rec.kernel_stack_base + KERNEL_STACK_SIZE)
        };
        let modifier = pauth::ptr_modifier(task, TASK_SP_CONST);
        let signed = pauth::exec_pac(
            &self.mac,
            &self.key_bank,
            &self.pac_control,
            KeyClass::Db,
            sp,
            modifier,
            &self.cfg.layout,
        )
        .map_err(|e| Fault::State(format!("seed_task_sp: {}", e)))?;
        self.memory
            .write_u64(task + TASK_SP_OFFSET, signed)
            .map_err(Fault::Data)
    }

    // ---- boot ------------------------------------------------------------

    /// Boot-time key installation: run the XOM setter if one is mapped,
    /// otherwise install directly. Preemption is masked throughout.
    pub fn install_kernel_keys(&mut self) -> Result<(), Fault> {
        let was_enabled = self.preemption_enabled;
        self.preemption_enabled = false;
        if let Some(base) = self.key_setter {
            self.run_key_setter(base)?;
        } else {
            for &class in self.cfg.kernel_key_classes.clone().iter() {
                let k = self.kernel_keys.get(class);
                self.key_bank.set(class, k);
            }
        }
        let keys = self.cfg.kernel_key_classes.len();
        let cost = self.cfg.key_install_cost * keys as u64;
        self.cycle_counter += cost;
        self.push_event(EventKind::KeyInstall { keys, cycles: cost });
        self.preemption_enabled = was_enabled;
        Ok(())
    }

    /// Execute the setter body inline. Register effects are architectural;
    /// the cycle cost is charged as the per-key constant by the caller, not
    /// per instruction.
    fn run_key_setter(&mut self, base: u64) -> Result<(), Fault> {
        let mut addr = base;
        for _ in 0..4096 {
            self.memory
                .check(addr, AccessKind::Fetch)
                .map_err(|_| Fault::InstrFetch { addr })?;
            let ins = *self.code.get(&addr).ok_or(Fault::InstrFetch { addr })?;
            match ins {
                Instruction::Ret => return Ok(()),
                Instruction::Movz { rd, imm, shift } => {
                    self.gpr[rd as usize] = (imm as u64) << (16 * shift);
                    self.clear_taint(rd);
                }
                Instruction::Movk { rd, imm, shift } => {
                    let mask = 0xffffu64 << (16 * shift);
                    self.gpr[rd as usize] =
                        (self.gpr[rd as usize] & !mask) | ((imm as u64) << (16 * shift));
                }
                Instruction::MsrKey { class, half, rn } => {
                    self.msr_key(class, half, self.gpr[rn as usize]);
                }
                Instruction::Nop => {}
                _ => {
                    return Err(Fault::State(format!(
                        "unexpected instruction in key setter at {:#x}",
                        addr
                    )))
                }
            }
            addr += INSTR_BYTES;
        }
        Err(Fault::State(String::from("key setter did not return")))
    }

    fn msr_key(&mut self, class: KeyClass, half: KeyHalf, value: u64) {
        if self.cfg.pre_83 {
            // Substituted with a side-effect-free register write.
            return;
        }
        let mut k = self.key_bank.get(class);
        match half {
            KeyHalf::Hi => k.hi = value,
            KeyHalf::Lo => k.lo = value,
        }
        self.key_bank.set(class, k);
    }

    // ---- exception level transitions -------------------------------------

    pub fn enter_kernel(&mut self, return_pc: u64) -> Result<(), Fault> {
        if self.current_el != ExceptionLevel::El0 {
            return Err(Fault::State(String::from("enter_kernel: not at EL0")));
        }
        let vector = self
            .vector
            .ok_or_else(|| Fault::State(String::from("no syscall vector registered")))?;
        self.elr_el1 = return_pc;
        self.current_el = ExceptionLevel::El1;
        self.preemption_enabled = false;
        self.push_event(EventKind::EnterKernel { thread: self.current_thread });
        self.install_kernel_keys()?;
        self.pc = vector;
        Ok(())
    }

    pub fn exit_kernel(&mut self) -> Result<(), Fault> {
        if self.current_el != ExceptionLevel::El1 {
            return Err(Fault::State(String::from("exit_kernel: not at EL1")));
        }
        let rec = self
            .threads
            .get(&self.current_thread)
            .ok_or_else(|| Fault::State(format!("unknown thread {}", self.current_thread)))?
            .clone();
        for &class in self.cfg.kernel_key_classes.clone().iter() {
            self.key_bank.set(class, rec.user_keys.get(class));
        }
        let keys = self.cfg.kernel_key_classes.len();
        let cost = self.cfg.key_install_cost * keys as u64;
        self.cycle_counter += cost;
        self.push_event(EventKind::UserKeyRestore { keys, cycles: cost });
        self.current_el = ExceptionLevel::El0;
        self.preemption_enabled = true;
        self.pc = self.elr_el1;
        self.push_event(EventKind::ExitKernel { thread: self.current_thread });
        Ok(())
    }

    /// Scheduler switch between kernel tasks. The outgoing SP is signed
    /// with the data key and the task-record modifier before being saved;
    /// the incoming SP is authenticated before installation, so a stored
    /// value corrupted while the task was scheduled out detonates on first
    /// use.
    pub fn context_switch(&mut self, from: u64, to: u64) -> Result<(), Fault> {
        if self.current_el != ExceptionLevel::El1 {
            return Err(Fault::State(String::from("context_switch: not at EL1")));
        }
        let from_rec = self
            .threads
            .get(&from)
            .ok_or_else(|| Fault::State(format!("unknown thread {}", from)))?
            .clone();
        let to_rec = self
            .threads
            .get(&to)
            .ok_or_else(|| Fault::State(format!("unknown thread {}", to)))?
            .clone();

        let out_mod = pauth::ptr_modifier(from_rec.task_struct, TASK_SP_CONST);
        let signed = pauth::exec_pac(
            &self.mac,
            &self.key_bank,
            &self.pac_control,
            KeyClass::Db,
            self.sp_el1,
            out_mod,
            &self.cfg.layout,
        )
        .map_err(|e| Fault::State(format!("context_switch sign: {}", e)))?;
        self.memory
            .write_u64(from_rec.task_struct + TASK_SP_OFFSET, signed)
            .map_err(Fault::Data)?;

        let stored = self
            .memory
            .read_u64(to_rec.task_struct + TASK_SP_OFFSET)
            .map_err(Fault::Data)?;
        let in_mod = pauth::ptr_modifier(to_rec.task_struct, TASK_SP_CONST);
        let res = pauth::exec_aut(
            &self.mac,
            &self.key_bank,
            &self.pac_control,
            KeyClass::Db,
            stored,
            in_mod,
            &self.cfg.layout,
        );
        self.note_auth(KeyClass::Db, res.failed);
        self.sp_el1 = res.pointer;
        self.current_thread = to;
        self.push_event(EventKind::ContextSwitch { from, to });
        Ok(())
    }

    // ---- brute-force mitigation ------------------------------------------

    fn note_auth(&mut self, key: KeyClass, failed: bool) {
        if self.current_el != ExceptionLevel::El1 {
            self.push_event(if failed {
                EventKind::AuthFail { key }
            } else {
                EventKind::AuthOk { key }
            });
            return;
        }
        if failed {
            self.fault_counter += 1;
            self.push_event(EventKind::AuthFail { key });
            if self.fault_counter >= self.cfg.fault_threshold {
                self.halt(HaltReason::BruteForceSuspected);
            }
        } else {
            self.fault_counter = 0;
            self.push_event(EventKind::AuthOk { key });
        }
    }

    // ---- attacker interface ----------------------------------------------

    pub fn attacker_write(&mut self, addr: u64, value: u64) -> Result<(), MemError> {
        for i in 0..8 {
            if let Err(e) = self.memory.check(addr + i, AccessKind::Write) {
                self.push_event(EventKind::AttackerWrite { addr, value, ok: false });
                return Err(e);
            }
        }
        self.memory.write_u64(addr, value).expect("checked");
        for i in 0..8 {
            self.tainted_bytes.insert(addr + i);
        }
        self.push_event(EventKind::AttackerWrite { addr, value, ok: true });
        Ok(())
    }

    pub fn attacker_read(&mut self, addr: u64) -> Result<u64, MemError> {
        for i in 0..8 {
            if let Err(e) = self.memory.check(addr + i, AccessKind::Read) {
                self.push_event(EventKind::AttackerRead { addr, value: None });
                return Err(e);
            }
        }
        let v = self.memory.read_u64(addr).expect("checked");
        self.push_event(EventKind::AttackerRead { addr, value: Some(v) });
        Ok(v)
    }

    // ---- taint tracking --------------------------------------------------

    fn reg_tainted(&self, r: u8) -> bool {
        self.tainted_regs & (1 << r) != 0
    }

    fn set_taint(&mut self, r: u8, tainted: bool) {
        if tainted {
            self.tainted_regs |= 1 << r;
        } else {
            self.tainted_regs &= !(1 << r);
        }
    }

    fn clear_taint(&mut self, r: u8) {
        self.set_taint(r, false);
    }

    fn mem_tainted(&self, addr: u64) -> bool {
        (0..8).any(|i| self.tainted_bytes.contains(&(addr + i)))
    }

    fn set_mem_taint(&mut self, addr: u64, tainted: bool) {
        for i in 0..8 {
            if tainted {
                self.tainted_bytes.insert(addr + i);
            } else {
                self.tainted_bytes.remove(&(addr + i));
            }
        }
    }

    // ---- execution -------------------------------------------------------

    fn push_event(&mut self, kind: EventKind) {
        self.trace.push(TraceEvent {
            step: self.step_counter,
            pc: self.pc,
            kind,
            cycles: self.cycle_counter,
        });
    }

    fn halt(&mut self, reason: HaltReason) {
        self.push_event(EventKind::Halt { reason });
        self.status = Status::Halted(reason);
    }

    fn fault(&mut self, f: Fault) {
        self.push_event(EventKind::Fault { desc: format!("{:?}", f) });
        self.status = Status::Faulted(f);
    }

    fn hijack(&mut self, target: u64) {
        self.push_event(EventKind::Hijack { target });
        self.status = Status::Hijacked { target };
    }

    fn operand(&self, op: Operand) -> u64 {
        match op {
            Operand::X(r) => self.gpr[r as usize],
            Operand::Sp => self.sp(),
        }
    }

    fn operand_taint(&self, op: Operand) -> bool {
        match op {
            Operand::X(r) => self.reg_tainted(r),
            Operand::Sp => false,
        }
    }

    fn write_operand(&mut self, op: Operand, v: u64) {
        match op {
            Operand::X(r) => self.gpr[r as usize] = v,
            Operand::Sp => self.set_sp(v),
        }
    }

    fn data_addr(&self, base: Operand, offset: i64) -> Result<u64, Fault> {
        let addr = self.operand(base).wrapping_add(offset as u64);
        if self.cfg.layout.classify(addr) == AddressClass::Invalid {
            return Err(Fault::InvalidDataAddr { addr });
        }
        Ok(addr)
    }

    fn load(&mut self, rt: u8, base: Operand, offset: i64) -> Result<(), Fault> {
        let addr = self.data_addr(base, offset)?;
        let v = self.memory.read_u64(addr).map_err(Fault::Data)?;
        self.gpr[rt as usize] = v;
        let t = self.mem_tainted(addr);
        self.set_taint(rt, t);
        Ok(())
    }

    fn store(&mut self, rt: u8, base: Operand, offset: i64) -> Result<(), Fault> {
        let addr = self.data_addr(base, offset)?;
        self.memory.write_u64(addr, self.gpr[rt as usize]).map_err(Fault::Data)?;
        let t = self.reg_tainted(rt);
        self.set_mem_taint(addr, t);
        Ok(())
    }

    /// Control transfer through a register value. Detonates poisons and
    /// reports hijacks of attacker-planted targets.
    fn branch_to(&mut self, target: u64, tainted: bool) -> Result<(), Fault> {
        if self.cfg.layout.classify(target) == AddressClass::Invalid {
            return Err(Fault::InvalidTarget { addr: target });
        }
        if tainted {
            self.hijack(target);
            return Ok(());
        }
        self.pc = target;
        Ok(())
    }

    fn mnemonic(ins: &Instruction) -> &'static str {
        match ins {
            Instruction::Nop => "nop",
            Instruction::Movz { .. } => "movz",
            Instruction::Movk { .. } => "movk",
            Instruction::Mov { .. } => "mov",
            Instruction::Adr { .. } => "adr",
            Instruction::Bfi { .. } => "bfi",
            Instruction::AddImm { .. } => "add",
            Instruction::Ldr { .. } => "ldr",
            Instruction::Str { .. } => "str",
            Instruction::Stp { .. } => "stp",
            Instruction::Ldp { .. } => "ldp",
            Instruction::Pac { .. } => "pac",
            Instruction::Aut { .. } => "aut",
            Instruction::Pacib1716 => "pacib1716",
            Instruction::Autib1716 => "autib1716",
            Instruction::Xpaci { .. } => "xpaci",
            Instruction::Xpacd { .. } => "xpacd",
            Instruction::Bl { .. } => "bl",
            Instruction::B { .. } => "b",
            Instruction::Blr { .. } => "blr",
            Instruction::Blrab { .. } => "blrab",
            Instruction::Ret => "ret",
            Instruction::Svc { .. } => "svc",
            Instruction::Eret => "eret",
            Instruction::MsrKey { .. } => "msr",
            Instruction::MrsKey { .. } => "mrs",
            Instruction::MsrPacCtl { .. } => "msr",
            Instruction::Brk { .. } => "brk",
            Instruction::Hlt => "hlt",
        }
    }

    fn instruction_cost(&self, ins: &Instruction) -> u64 {
        if ins.is_pauth() {
            if self.cfg.pre_83 {
                // Only the 1716 no-op forms reach execution on pre-8.3.
                1
            } else {
                self.cfg.pauth_cost
            }
        } else {
            1
        }
    }

    /// Execute one instruction. Returns the machine status after the step.
    pub fn step(&mut self) -> Status {
        if self.status != Status::Running {
            return self.status.clone();
        }
        if self.cfg.layout.classify(self.pc) == AddressClass::Invalid {
            self.fault(Fault::InvalidTarget { addr: self.pc });
            return self.status.clone();
        }
        if self.memory.check(self.pc, AccessKind::Fetch).is_err() {
            self.fault(Fault::InstrFetch { addr: self.pc });
            return self.status.clone();
        }
        let ins = match self.code.get(&self.pc) {
            Some(&i) => i,
            None => {
                self.fault(Fault::InstrFetch { addr: self.pc });
                return self.status.clone();
            }
        };
        self.step_counter += 1;
        self.cycle_counter += self.instruction_cost(&ins);
        self.push_event(EventKind::Exec { mnemonic: Self::mnemonic(&ins) });
        let next = self.pc + INSTR_BYTES;
        if let Err(f) = self.execute(ins, next) {
            self.fault(f);
        }
        self.status.clone()
    }

    fn execute(&mut self, ins: Instruction, next: u64) -> Result<(), Fault> {
        let pre_83 = self.cfg.pre_83;
        match ins {
            Instruction::Nop => self.pc = next,
            Instruction::Movz { rd, imm, shift } => {
                self.gpr[rd as usize] = (imm as u64) << (16 * shift);
                self.clear_taint(rd);
                self.pc = next;
            }
            Instruction::Movk { rd, imm, shift } => {
                let mask = 0xffffu64 << (16 * shift);
                self.gpr[rd as usize] =
                    (self.gpr[rd as usize] & !mask) | ((imm as u64) << (16 * shift));
                self.pc = next;
            }
            Instruction::Mov { rd, rn } => {
                self.gpr[rd as usize] = self.operand(rn);
                let t = self.operand_taint(rn);
                self.set_taint(rd, t);
                self.pc = next;
            }
            Instruction::Adr { rd, addr } => {
                self.gpr[rd as usize] = addr;
                self.clear_taint(rd);
                self.pc = next;
            }
            Instruction::Bfi { rd, rn, lsb, width } => {
                let mask = if width >= 64 { u64::MAX } else { (1u64 << width) - 1 };
                let field = (self.gpr[rn as usize] & mask) << lsb;
                let hole = mask << lsb;
                self.gpr[rd as usize] = (self.gpr[rd as usize] & !hole) | field;
                if self.reg_tainted(rn) {
                    self.set_taint(rd, true);
                }
                self.pc = next;
            }
            Instruction::AddImm { rd, rn, imm } => {
                let v = self.operand(rn).wrapping_add(imm as u64);
                let t = self.operand_taint(rn);
                self.write_operand(rd, v);
                if let Operand::X(r) = rd {
                    self.set_taint(r, t);
                }
                self.pc = next;
            }
            Instruction::Ldr { rt, base, offset } => {
                self.load(rt, base, offset)?;
                self.pc = next;
            }
            Instruction::Str { rt, base, offset } => {
                self.store(rt, base, offset)?;
                self.pc = next;
            }
            Instruction::Stp { rt1, rt2, base, offset, mode } => {
                let addr = match mode {
                    PairMode::Offset | PairMode::PreIndex => self.data_addr(base, offset)?,
                    PairMode::PostIndex => self.data_addr(base, 0)?,
                };
                self.memory.write_u64(addr, self.gpr[rt1 as usize]).map_err(Fault::Data)?;
                self.memory.write_u64(addr + 8, self.gpr[rt2 as usize]).map_err(Fault::Data)?;
                let t1 = self.reg_tainted(rt1);
                let t2 = self.reg_tainted(rt2);
                self.set_mem_taint(addr, t1);
                self.set_mem_taint(addr + 8, t2);
                match mode {
                    PairMode::PreIndex => {
                        let v = self.operand(base).wrapping_add(offset as u64);
                        self.write_operand(base, v);
                    }
                    PairMode::PostIndex => {
                        let v = self.operand(base).wrapping_add(offset as u64);
                        self.write_operand(base, v);
                    }
                    PairMode::Offset => {}
                }
                self.pc = next;
            }
            Instruction::Ldp { rt1, rt2, base, offset, mode } => {
                let addr = match mode {
                    PairMode::Offset | PairMode::PreIndex => self.data_addr(base, offset)?,
                    PairMode::PostIndex => self.data_addr(base, 0)?,
                };
                let v1 = self.memory.read_u64(addr).map_err(Fault::Data)?;
                let v2 = self.memory.read_u64(addr + 8).map_err(Fault::Data)?;
                self.gpr[rt1 as usize] = v1;
                self.gpr[rt2 as usize] = v2;
                let t1 = self.mem_tainted(addr);
                let t2 = self.mem_tainted(addr + 8);
                self.set_taint(rt1, t1);
                self.set_taint(rt2, t2);
                match mode {
                    PairMode::PreIndex | PairMode::PostIndex => {
                        let v = self.operand(base).wrapping_add(offset as u64);
                        self.write_operand(base, v);
                    }
                    PairMode::Offset => {}
                }
                self.pc = next;
            }
            Instruction::Pac { key, rd, modifier } => {
                if pre_83 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                let ptr = self.gpr[rd as usize];
                let m = self.operand(modifier);
                match pauth::exec_pac(
                    &self.mac,
                    &self.key_bank,
                    &self.pac_control,
                    key,
                    ptr,
                    m,
                    &self.cfg.layout,
                ) {
                    Ok(signed) => self.gpr[rd as usize] = signed,
                    Err(_) => {
                        return Err(Fault::PacPrecondition { pc: self.pc, value: ptr });
                    }
                }
                self.pc = next;
            }
            Instruction::Aut { key, rd, modifier } => {
                if pre_83 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                let ptr = self.gpr[rd as usize];
                let m = self.operand(modifier);
                let res = pauth::exec_aut(
                    &self.mac,
                    &self.key_bank,
                    &self.pac_control,
                    key,
                    ptr,
                    m,
                    &self.cfg.layout,
                );
                if self.pac_control.is_enabled(key) {
                    self.note_auth(key, res.failed);
                }
                self.gpr[rd as usize] = res.pointer;
                if self.status != Status::Running {
                    return Ok(());
                }
                self.pc = next;
            }
            Instruction::Pacib1716 => {
                if !pre_83 {
                    let ptr = self.gpr[17];
                    let m = self.gpr[16];
                    match pauth::exec_pac(
                        &self.mac,
                        &self.key_bank,
                        &self.pac_control,
                        KeyClass::Ib,
                        ptr,
                        m,
                        &self.cfg.layout,
                    ) {
                        Ok(signed) => self.gpr[17] = signed,
                        Err(_) => {
                            return Err(Fault::PacPrecondition { pc: self.pc, value: ptr });
                        }
                    }
                }
                self.pc = next;
            }
            Instruction::Autib1716 => {
                if !pre_83 {
                    let ptr = self.gpr[17];
                    let m = self.gpr[16];
                    let res = pauth::exec_aut(
                        &self.mac,
                        &self.key_bank,
                        &self.pac_control,
                        KeyClass::Ib,
                        ptr,
                        m,
                        &self.cfg.layout,
                    );
                    if self.pac_control.is_enabled(KeyClass::Ib) {
                        self.note_auth(KeyClass::Ib, res.failed);
                    }
                    self.gpr[17] = res.pointer;
                    if self.status != Status::Running {
                        return Ok(());
                    }
                }
                self.pc = next;
            }
            Instruction::Xpaci { rd } | Instruction::Xpacd { rd } => {
                if pre_83 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                self.gpr[rd as usize] = pauth::exec_xpac(self.gpr[rd as usize], &self.cfg.layout);
                self.pc = next;
            }
            Instruction::Bl { target } => {
                self.gpr[30] = next;
                self.clear_taint(30);
                self.pc = target;
            }
            Instruction::B { target } => {
                self.pc = target;
            }
            Instruction::Blr { rn } => {
                let target = self.gpr[rn as usize];
                let tainted = self.reg_tainted(rn);
                self.gpr[30] = next;
                self.clear_taint(30);
                self.branch_to(target, tainted)?;
            }
            Instruction::Blrab { rn, modifier } => {
                if pre_83 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                let ptr = self.gpr[rn as usize];
                let m = self.operand(modifier);
                let res = pauth::exec_aut(
                    &self.mac,
                    &self.key_bank,
                    &self.pac_control,
                    KeyClass::Ib,
                    ptr,
                    m,
                    &self.cfg.layout,
                );
                if self.pac_control.is_enabled(KeyClass::Ib) {
                    self.note_auth(KeyClass::Ib, res.failed);
                }
                if self.status != Status::Running {
                    return Ok(());
                }
                let tainted = self.reg_tainted(rn);
                self.gpr[30] = next;
                self.clear_taint(30);
                self.branch_to(res.pointer, tainted)?;
            }
            Instruction::Ret => {
                let target = self.gpr[30];
                let tainted = self.reg_tainted(30);
                self.branch_to(target, tainted)?;
            }
            Instruction::Svc { .. } => {
                if self.current_el != ExceptionLevel::El0 {
                    return Err(Fault::State(String::from("SVC at EL1 not supported")));
                }
                self.enter_kernel(next)?;
            }
            Instruction::Eret => {
                if self.current_el != ExceptionLevel::El1 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                self.exit_kernel()?;
            }
            Instruction::MsrKey { class, half, rn } => {
                if self.current_el != ExceptionLevel::El1 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                self.msr_key(class, half, self.gpr[rn as usize]);
                self.pc = next;
            }
            Instruction::MrsKey { rd, class, half } => {
                if self.current_el != ExceptionLevel::El1 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                let k = self.key_bank.get(class);
                self.gpr[rd as usize] = if self.cfg.pre_83 {
                    0
                } else {
                    match half {
                        KeyHalf::Hi => k.hi,
                        KeyHalf::Lo => k.lo,
                    }
                };
                self.clear_taint(rd);
                self.pc = next;
            }
            Instruction::MsrPacCtl { bits } => {
                if self.current_el != ExceptionLevel::El1 {
                    return Err(Fault::Undefined { pc: self.pc });
                }
                self.pac_control = PacControl::from_bits(bits);
                self.pc = next;
            }
            Instruction::Brk { imm } => {
                self.halt(HaltReason::Breakpoint(imm));
            }
            Instruction::Hlt => {
                self.halt(HaltReason::Clean);
            }
        }
        Ok(())
    }

    /// Run until the machine stops or `max_steps` instructions retire.
    pub fn run(&mut self, max_steps: u64) -> Status {
        for _ in 0..max_steps {
            if self.step() != Status::Running {
                break;
            }
        }
        self.status.clone()
    }

    /// True if any general-purpose register currently holds a 64-bit half
    /// of any installed kernel key. Key-confidentiality probe for tests.
    pub fn scratch_holds_kernel_key(&self) -> bool {
        let mut words = Vec::new();
        for &class in self.cfg.kernel_key_classes.iter() {
            let k = self.kernel_keys.get(class);
            words.push(k.hi);
            words.push(k.lo);
        }
        self.gpr.iter().any(|r| *r != 0 && words.contains(r))
    }
}

/// Generate the execute-only key-setter code: per installed key, four
/// move-immediates per 64-bit half into scratch registers, two key-register
/// writes, then zeroing of every scratch register.
pub fn generate_key_setter(
    keys: &KeyBank,
    classes: &[KeyClass],
    page_base: u64,
) -> (u64, Vec<Instruction>) {
    assert_eq!(page_base % PAGE_SIZE, 0, "setter page must be aligned");
    let mut out = Vec::new();
    let scratch = 0u8;
    for &class in classes {
        let k = keys.get(class);
        for (half, value) in [(KeyHalf::Hi, k.hi), (KeyHalf::Lo, k.lo)] {
            out.push(Instruction::Movz { rd: scratch, imm: value as u16, shift: 0 });
            for sh in 1..4u8 {
                out.push(Instruction::Movk {
                    rd: scratch,
                    imm: (value >> (16 * sh)) as u16,
                    shift: sh,
                });
            }
            out.push(Instruction::MsrKey { class, half, rn: scratch });
        }
    }
    out.push(Instruction::Movz { rd: scratch, imm: 0, shift: 0 });
    out.push(Instruction::Ret);
    (page_base, out)
}
