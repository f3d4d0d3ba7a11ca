//! Attack scenarios, the replay-security matrix, modifier-collision and
//! forgery analyzers, and the overhead reporter.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand_core::{RngCore, SeedableRng};

use crate::instrument::{
    self, attach_key_setter, lower_module, LowerError, VerifyViolation, TEXT_BASE,
};
use crate::ir::{FieldDef, IrFunction, IrModule, IrObject, IrOp, Protection, StaticInit};
use crate::isa::INSTR_BYTES;
use crate::key::{KeyBank, KeyClass};
use crate::machine::{
    Fault, HaltReason, Machine, MachineConfig, Status, ThreadRec, TraceEvent, KERNEL_STACK_SIZE,
};
use crate::mem::PagePerms;
use crate::pac::truncate;
use crate::pauth::{self, ModifierScheme};
use crate::program::Image;

/// Address of the single-instruction halt stub the harness links as the
/// top-level return target.
pub const HALT_STUB: u64 = 0xffff_0000_0810_0000;
/// Top of the primary harness stack.
pub const STACK_TOP: u64 = 0xffff_0000_0ff8_0000;
/// Base of the mapped stack region (large enough for cross-thread layouts).
pub const STACK_REGION_BASE: u64 = 0xffff_0000_0fe0_0000;
/// Task records used by context-switch scenarios.
pub const TASK_PAGE: u64 = 0xffff_0000_0f00_0000;

pub const DEFAULT_MAX_STEPS: u64 = 200_000;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub enum HarnessError {
    Parameter(String),
    Lower(LowerError),
    Boot(String),
    RunFailed { scheme: ModifierScheme, desc: String },
}

impl From<LowerError> for HarnessError {
    fn from(e: LowerError) -> Self {
        HarnessError::Lower(e)
    }
}

impl core::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            HarnessError::Parameter(s) => write!(f, "parameter error: {}", s),
            HarnessError::Lower(e) => write!(f, "lowering error: {}", e),
            HarnessError::Boot(s) => write!(f, "boot error: {}", s),
            HarnessError::RunFailed { scheme, desc } => {
                write!(f, "run failed under {}: {}", scheme.name(), desc)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Machine preparation
// ---------------------------------------------------------------------------

/// Attach a key setter (keys drawn from the seed), load the image, install
/// keys through the setter, and apply the boot-time signing table.
pub fn prepare_machine(
    image: &mut Image,
    cfg: MachineConfig,
    seed: u64,
) -> Result<Machine, HarnessError> {
    let mut rng = seeded_rng(seed);
    let keys = KeyBank::random(&mut rng);
    if image.key_setter.is_some() && !image.code.iter().any(|s| s.name == "key_setter") {
        attach_key_setter(image, &keys, &cfg.kernel_key_classes);
    }
    let mut m = Machine::new(cfg, keys);
    m.load_image(image);
    m.map_data(
        STACK_REGION_BASE,
        STACK_TOP - STACK_REGION_BASE,
        PagePerms::ReadWrite,
    );
    m.map_code(HALT_STUB, &[crate::isa::Instruction::Hlt], PagePerms::ReadExecute);
    m.map_data(TASK_PAGE, crate::mem::PAGE_SIZE, PagePerms::ReadWrite);
    m.register_thread(
        1,
        ThreadRec {
            user_keys: KeyBank::random(&mut rng),
            kernel_stack_base: STACK_TOP - KERNEL_STACK_SIZE,
            task_struct: TASK_PAGE,
        },
    );
    m.set_current_thread(1);
    m.install_kernel_keys()
        .map_err(|e| HarnessError::Boot(format!("{:?}", e)))?;
    instrument::boot_sign(&mut m, &image.signing_table.clone())
        .map_err(|e| HarnessError::Boot(format!("{}", e)))?;
    m.set_sp_el1(STACK_TOP);
    Ok(m)
}

/// Point the machine at an entry address with the halt stub as the return
/// target, ready to run.
pub fn arm_entry(m: &mut Machine, entry: u64, sp: u64) {
    m.clear_status();
    m.set_pc(entry);
    m.set_sp_el1(sp);
    m.set_gpr(crate::isa::LR, HALT_STUB);
}

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    /// Fire before the instruction with this retirement index executes.
    Step(u64),
    /// Fire the n-th time (1-based) the program counter reaches an address.
    PcHit { addr: u64, occurrence: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerOp {
    Write { addr: u64, value: u64 },
    Read { addr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackerAction {
    pub trigger: Trigger,
    pub op: AttackerOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    CleanExit,
    AuthFault,
    BruteForceHalted,
    Hijacked,
    Rejected,
    Error,
}

impl OutcomeKind {
    pub const ALL: [OutcomeKind; 6] = [
        OutcomeKind::CleanExit,
        OutcomeKind::AuthFault,
        OutcomeKind::BruteForceHalted,
        OutcomeKind::Hijacked,
        OutcomeKind::Rejected,
        OutcomeKind::Error,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OutcomeKind::CleanExit => "clean-exit",
            OutcomeKind::AuthFault => "auth-fault",
            OutcomeKind::BruteForceHalted => "brute-force-halted",
            OutcomeKind::Hijacked => "hijacked",
            OutcomeKind::Rejected => "rejected",
            OutcomeKind::Error => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    CleanExit,
    /// A poisoned pointer detonated; the key class is recovered from the
    /// poison tag.
    AuthFault { pc: u64, key_class: KeyClass },
    BruteForceHalted,
    Hijacked { target: u64 },
    Rejected { report: Vec<VerifyViolation> },
    Error { desc: String },
}

impl Outcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            Outcome::CleanExit => OutcomeKind::CleanExit,
            Outcome::AuthFault { .. } => OutcomeKind::AuthFault,
            Outcome::BruteForceHalted => OutcomeKind::BruteForceHalted,
            Outcome::Hijacked { .. } => OutcomeKind::Hijacked,
            Outcome::Rejected { .. } => OutcomeKind::Rejected,
            Outcome::Error { .. } => OutcomeKind::Error,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Outcome::CleanExit => "clean exit".to_string(),
            Outcome::AuthFault { pc, key_class } => format!(
                "authentication fault at pc {:#018x} (key {})",
                pc,
                key_class.name()
            ),
            Outcome::BruteForceHalted => "halted: brute force suspected".to_string(),
            Outcome::Hijacked { target } => {
                format!("control hijacked to {:#018x}", target)
            }
            Outcome::Rejected { report } => {
                format!("image rejected ({} violations)", report.len())
            }
            Outcome::Error { desc } => format!("error: {}", desc),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackScenario {
    pub name: String,
    pub image: Image,
    pub cfg: MachineConfig,
    pub seed: u64,
    /// Entry symbol; falls back to the image entry when absent.
    pub entry: Option<String>,
    pub actions: Vec<AttackerAction>,
    pub expected: Option<OutcomeKind>,
    pub max_steps: u64,
}

pub struct ScenarioResult {
    pub outcome: Outcome,
    pub trace: Vec<TraceEvent>,
}

fn status_to_outcome(m: &Machine, status: &Status, steps_exhausted: bool) -> Outcome {
    match status {
        Status::Running => {
            if steps_exhausted {
                Outcome::Error { desc: "step limit exhausted".to_string() }
            } else {
                Outcome::Error { desc: "machine stopped while running".to_string() }
            }
        }
        Status::Halted(HaltReason::Clean) | Status::Halted(HaltReason::Breakpoint(_)) => {
            Outcome::CleanExit
        }
        Status::Halted(HaltReason::BruteForceSuspected) => Outcome::BruteForceHalted,
        Status::Hijacked { target } => Outcome::Hijacked { target: *target },
        Status::Faulted(Fault::InvalidTarget { addr })
        | Status::Faulted(Fault::InvalidDataAddr { addr }) => Outcome::AuthFault {
            pc: m.pc(),
            key_class: Fault::poison_key_class(*addr),
        },
        Status::Faulted(f) => Outcome::Error { desc: format!("{:?}", f) },
    }
}

/// Execute a scenario: verify the image, boot, fire attacker actions at
/// their trigger points, and classify the terminal machine state.
pub fn run_scenario(scenario: &AttackScenario) -> Result<ScenarioResult, HarnessError> {
    let mut image = scenario.image.clone();
    // The verifier must see the final image including the setter page.
    if image.key_setter.is_some() && !image.code.iter().any(|s| s.name == "key_setter") {
        let mut rng = seeded_rng(scenario.seed);
        let keys = KeyBank::random(&mut rng);
        attach_key_setter(&mut image, &keys, &scenario.cfg.kernel_key_classes);
    }
    if let Err(report) = instrument::verify_image(&image) {
        return Ok(ScenarioResult { outcome: Outcome::Rejected { report }, trace: Vec::new() });
    }
    let mut m = prepare_machine(&mut image, scenario.cfg.clone(), scenario.seed)?;
    let entry = match &scenario.entry {
        Some(sym) => image
            .symbol(sym)
            .ok_or_else(|| HarnessError::Parameter(format!("unknown entry '{}'", sym)))?,
        None => image.entry,
    };
    arm_entry(&mut m, entry, STACK_TOP);

    let mut pc_hits: BTreeMap<u64, u32> = BTreeMap::new();
    let mut fired = vec![false; scenario.actions.len()];
    let mut steps_exhausted = true;
    for _ in 0..scenario.max_steps {
        let pc = m.pc();
        let hits = {
            let e = pc_hits.entry(pc).or_insert(0);
            *e += 1;
            *e
        };
        for (i, action) in scenario.actions.iter().enumerate() {
            if fired[i] {
                continue;
            }
            let due = match action.trigger {
                Trigger::Step(s) => m.steps() == s,
                Trigger::PcHit { addr, occurrence } => pc == addr && hits == occurrence,
            };
            if due {
                fired[i] = true;
                match action.op {
                    // Rejected accesses are recorded in the trace and
                    // otherwise ignored: the attacker simply failed.
                    AttackerOp::Write { addr, value } => {
                        let _ = m.attacker_write(addr, value);
                    }
                    AttackerOp::Read { addr } => {
                        let _ = m.attacker_read(addr);
                    }
                }
            }
        }
        if m.step() != Status::Running {
            steps_exhausted = false;
            break;
        }
    }
    let status = m.status().clone();
    let outcome = status_to_outcome(&m, &status, steps_exhausted);
    Ok(ScenarioResult { outcome, trace: m.trace })
}

// ---------------------------------------------------------------------------
// Canonical modules and scenario builders
// ---------------------------------------------------------------------------

/// Length in instructions of the scheme's prologue (sign side + frame push).
pub fn prologue_len(scheme: ModifierScheme) -> u64 {
    2 + (instrument::extra_call_instructions(scheme) as u64) / 2
}

/// Saved-LR slot of a function entered with the given stack pointer.
pub fn saved_lr_slot(entry_sp: u64) -> u64 {
    entry_sp - 16 + 8
}

pub mod modules {
    use super::*;

    /// caller/callee pair: `main` calls `helper` once.
    pub fn call_once() -> IrModule {
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![IrOp::Compute(1), IrOp::Call("helper".to_string()), IrOp::Return],
                },
                IrFunction {
                    name: "helper".to_string(),
                    body: vec![IrOp::Compute(3), IrOp::Return],
                },
            ],
            ..IrModule::default()
        }
    }

    /// `main` calls the same function twice (same SP at both entries).
    pub fn call_twice() -> IrModule {
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![
                        IrOp::Call("helper".to_string()),
                        IrOp::Call("helper".to_string()),
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "helper".to_string(),
                    body: vec![IrOp::Compute(2), IrOp::Return],
                },
            ],
            ..IrModule::default()
        }
    }

    /// `main` calls two distinct functions from the same frame.
    pub fn call_two_functions() -> IrModule {
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![
                        IrOp::Call("first".to_string()),
                        IrOp::Call("second".to_string()),
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "first".to_string(),
                    body: vec![IrOp::Compute(2), IrOp::Return],
                },
                IrFunction {
                    name: "second".to_string(),
                    body: vec![IrOp::Compute(2), IrOp::Return],
                },
            ],
            ..IrModule::default()
        }
    }

    /// Two entry points calling the same victim function: models the same
    /// call depth reached on two different threads.
    pub fn two_threads_one_victim() -> IrModule {
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main_a".to_string(),
                    body: vec![IrOp::Call("victim".to_string()), IrOp::Return],
                },
                IrFunction {
                    name: "main_b".to_string(),
                    body: vec![IrOp::Call("victim".to_string()), IrOp::Return],
                },
                IrFunction {
                    name: "victim".to_string(),
                    body: vec![IrOp::Compute(2), IrOp::Return],
                },
            ],
            ..IrModule::default()
        }
    }

    /// One protected field dispatched indirectly, with a static initializer
    /// and a gadget function the attacker wants to reach.
    pub fn dispatch(protection: Protection) -> IrModule {
        let mut fields = BTreeMap::new();
        fields.insert(
            1,
            FieldDef {
                type_name: "file".to_string(),
                member_name: "f_ops".to_string(),
                const16: 0xfb45,
                offset: 40,
                protection,
            },
        );
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![
                        IrOp::AddrOf { object: "file0".to_string(), dest_reg: 0 },
                        IrOp::IndirectCallViaField { object_reg: 0, field: 1 },
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "read_impl".to_string(),
                    body: vec![IrOp::Compute(2), IrOp::Return],
                },
                IrFunction {
                    name: "gadget".to_string(),
                    body: vec![IrOp::Compute(1), IrOp::Return],
                },
            ],
            fields,
            objects: vec![IrObject { name: "file0".to_string(), words: 8 }],
            inits: vec![StaticInit {
                object: "file0".to_string(),
                field: 1,
                target: "read_impl".to_string(),
            }],
        }
    }

    /// Three statically initialized protected callbacks dispatched in turn.
    pub fn boot_callbacks() -> IrModule {
        let mut fields = BTreeMap::new();
        for (id, name, const16, offset) in [
            (1u32, "open", 0x1a10u16, 0u64),
            (2, "read", 0x1a11, 8),
            (3, "write", 0x1a12, 16),
        ] {
            fields.insert(
                id,
                FieldDef {
                    type_name: "ops".to_string(),
                    member_name: name.to_string(),
                    const16,
                    offset,
                    protection: Protection::OpsPointer,
                },
            );
        }
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![
                        IrOp::AddrOf { object: "ops0".to_string(), dest_reg: 0 },
                        IrOp::IndirectCallViaField { object_reg: 0, field: 1 },
                        IrOp::AddrOf { object: "ops0".to_string(), dest_reg: 0 },
                        IrOp::IndirectCallViaField { object_reg: 0, field: 2 },
                        IrOp::AddrOf { object: "ops0".to_string(), dest_reg: 0 },
                        IrOp::IndirectCallViaField { object_reg: 0, field: 3 },
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "do_open".to_string(),
                    body: vec![IrOp::Compute(1), IrOp::Return],
                },
                IrFunction {
                    name: "do_read".to_string(),
                    body: vec![IrOp::Compute(1), IrOp::Return],
                },
                IrFunction {
                    name: "do_write".to_string(),
                    body: vec![IrOp::Compute(1), IrOp::Return],
                },
            ],
            fields,
            objects: vec![IrObject { name: "ops0".to_string(), words: 4 }],
            inits: vec![
                StaticInit { object: "ops0".to_string(), field: 1, target: "do_open".to_string() },
                StaticInit { object: "ops0".to_string(), field: 2, target: "do_read".to_string() },
                StaticInit { object: "ops0".to_string(), field: 3, target: "do_write".to_string() },
            ],
        }
    }

    /// Benchmark workload: nested calls, stack allocation, field traffic.
    pub fn bench() -> IrModule {
        let mut fields = BTreeMap::new();
        fields.insert(
            1,
            FieldDef {
                type_name: "dev".to_string(),
                member_name: "handler".to_string(),
                const16: 0x2b01,
                offset: 0,
                protection: Protection::OpsPointer,
            },
        );
        IrModule {
            functions: vec![
                IrFunction {
                    name: "main".to_string(),
                    body: vec![
                        IrOp::Compute(4),
                        IrOp::Call("work".to_string()),
                        IrOp::Call("work".to_string()),
                        IrOp::Call("work".to_string()),
                        IrOp::AddrOf { object: "dev0".to_string(), dest_reg: 0 },
                        IrOp::IndirectCallViaField { object_reg: 0, field: 1 },
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "work".to_string(),
                    body: vec![
                        IrOp::AllocStack(32),
                        IrOp::Compute(6),
                        IrOp::Call("leaf".to_string()),
                        IrOp::Return,
                    ],
                },
                IrFunction {
                    name: "leaf".to_string(),
                    body: vec![IrOp::Compute(3), IrOp::Return],
                },
                IrFunction {
                    name: "handler_impl".to_string(),
                    body: vec![IrOp::Compute(2), IrOp::Return],
                },
            ],
            fields,
            objects: vec![IrObject { name: "dev0".to_string(), words: 2 }],
            inits: vec![StaticInit {
                object: "dev0".to_string(),
                field: 1,
                target: "handler_impl".to_string(),
            }],
        }
    }
}

pub mod scenarios {
    use super::*;

    fn base_scenario(
        name: &str,
        module: &IrModule,
        scheme: ModifierScheme,
        seed: u64,
    ) -> Result<(AttackScenario, instrument::LinkMap), HarnessError> {
        let lowered = lower_module(module, scheme, TEXT_BASE)?;
        Ok((
            AttackScenario {
                name: name.to_string(),
                image: lowered.image,
                cfg: MachineConfig::default(),
                seed,
                entry: None,
                actions: Vec::new(),
                expected: None,
                max_steps: DEFAULT_MAX_STEPS,
            },
            lowered.link,
        ))
    }

    /// Overwrite the callee's saved return address with a raw code address.
    pub fn return_address_overwrite(
        scheme: ModifierScheme,
        seed: u64,
    ) -> Result<AttackScenario, HarnessError> {
        let module = modules::call_once();
        let (mut s, link) = base_scenario("return-address-overwrite", &module, scheme, seed)?;
        let helper = link.functions["helper"];
        let helper_body = helper + prologue_len(scheme) * INSTR_BYTES;
        // main runs at STACK_TOP; helper enters at STACK_TOP-16.
        let slot = saved_lr_slot(STACK_TOP - 16);
        let gadget = link.functions["main"];
        s.actions.push(AttackerAction {
            trigger: Trigger::PcHit { addr: helper_body, occurrence: 1 },
            op: AttackerOp::Write { addr: slot, value: gadget },
        });
        s.expected = Some(match scheme {
            ModifierScheme::None => OutcomeKind::Hijacked,
            _ => OutcomeKind::AuthFault,
        });
        Ok(s)
    }

    /// Overwrite a protected pointer field with a raw gadget address before
    /// its dispatch.
    fn field_overwrite(
        name: &str,
        protection: Protection,
        scheme: ModifierScheme,
        seed: u64,
    ) -> Result<AttackScenario, HarnessError> {
        let module = modules::dispatch(protection);
        let (mut s, link) = base_scenario(name, &module, scheme, seed)?;
        let slot = link.objects["file0"] + 40;
        let gadget = link.functions["gadget"];
        s.actions.push(AttackerAction {
            trigger: Trigger::Step(0),
            op: AttackerOp::Write { addr: slot, value: gadget },
        });
        s.expected = Some(match scheme {
            ModifierScheme::None | ModifierScheme::SpOnly => OutcomeKind::Hijacked,
            _ => OutcomeKind::AuthFault,
        });
        Ok(s)
    }

    /// Lone writable function pointer replaced with a raw gadget address.
    pub fn fn_ptr_overwrite(
        scheme: ModifierScheme,
        seed: u64,
    ) -> Result<AttackScenario, HarnessError> {
        field_overwrite("fn-ptr-overwrite", Protection::WritableFnPtr, scheme, seed)
    }

    /// Operations-table pointer swapped for a forged table.
    pub fn ops_table_swap(
        scheme: ModifierScheme,
        seed: u64,
    ) -> Result<AttackScenario, HarnessError> {
        field_overwrite("ops-table-swap", Protection::OpsPointer, scheme, seed)
    }

    /// Key-exfiltration attempt: read the execute-only key-setter page.
    pub fn read_key_setter(
        scheme: ModifierScheme,
        seed: u64,
    ) -> Result<AttackScenario, HarnessError> {
        let module = modules::call_once();
        let (mut s, _) = base_scenario("read-key-setter", &module, scheme, seed)?;
        let setter = s.image.key_setter.expect("setter page reserved");
        s.actions.push(AttackerAction {
            trigger: Trigger::Step(0),
            op: AttackerOp::Read { addr: setter },
        });
        s.expected = Some(OutcomeKind::CleanExit);
        Ok(s)
    }
}

// ---------------------------------------------------------------------------
// Replay matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayClass {
    SameFunctionSameSp,
    CrossFunctionSameSp,
    /// Thread stacks exactly 65536 bytes apart.
    CrossThread65536,
    /// Thread stacks 4096 bytes apart.
    CrossThread4096,
}

impl ReplayClass {
    pub const ALL: [ReplayClass; 4] = [
        ReplayClass::SameFunctionSameSp,
        ReplayClass::CrossFunctionSameSp,
        ReplayClass::CrossThread65536,
        ReplayClass::CrossThread4096,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReplayClass::SameFunctionSameSp => "same-function-same-sp",
            ReplayClass::CrossFunctionSameSp => "cross-function-same-sp",
            ReplayClass::CrossThread65536 => "cross-thread-65536",
            ReplayClass::CrossThread4096 => "cross-thread-4096",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayOutcome {
    /// Authentication accepted the replayed value and control followed it.
    Succeeds,
    Blocked,
}

impl ReplayOutcome {
    pub fn name(self) -> &'static str {
        match self {
            ReplayOutcome::Succeeds => "succeeds",
            ReplayOutcome::Blocked => "blocked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayCell {
    pub scheme: ModifierScheme,
    pub class: ReplayClass,
    pub outcome: ReplayOutcome,
}

/// Run one harvest-and-inject replay experiment.
///
/// The signed saved return address is harvested with an attacker read the
/// first time the victim frame is live, then written over the victim's
/// saved slot in the second, differently keyed context (other call site,
/// other function, or other thread stack). Success means control actually
/// followed the replayed pointer; anything else blocks.
pub fn replay_run(
    scheme: ModifierScheme,
    class: ReplayClass,
    seed: u64,
) -> Result<ReplayOutcome, HarnessError> {
    match class {
        ReplayClass::SameFunctionSameSp | ReplayClass::CrossFunctionSameSp => {
            let module = if class == ReplayClass::SameFunctionSameSp {
                modules::call_twice()
            } else {
                modules::call_two_functions()
            };
            let lowered = lower_module(&module, scheme, TEXT_BASE)?;
            let mut image = lowered.image;
            let mut m = prepare_machine(&mut image, MachineConfig::default(), seed)?;
            let (harvest_pc, inject_pc) = if class == ReplayClass::SameFunctionSameSp {
                let body = lowered.link.functions["helper"] + prologue_len(scheme) * INSTR_BYTES;
                (body, body)
            } else {
                (
                    lowered.link.functions["first"] + prologue_len(scheme) * INSTR_BYTES,
                    lowered.link.functions["second"] + prologue_len(scheme) * INSTR_BYTES,
                )
            };
            arm_entry(&mut m, image.entry, STACK_TOP);
            let mut harvested: Option<u64> = None;
            let mut injected = false;
            for _ in 0..DEFAULT_MAX_STEPS {
                let pc = m.pc();
                if pc == harvest_pc && harvested.is_none() {
                    let slot = saved_lr_slot(m.sp() + 16);
                    harvested = Some(m.attacker_read(slot).map_err(|e| {
                        HarnessError::RunFailed { scheme, desc: format!("{}", e) }
                    })?);
                } else if pc == inject_pc && harvested.is_some() && !injected {
                    let slot = saved_lr_slot(m.sp() + 16);
                    m.attacker_write(slot, harvested.unwrap()).map_err(|e| {
                        HarnessError::RunFailed { scheme, desc: format!("{}", e) }
                    })?;
                    injected = true;
                }
                if m.step() != Status::Running {
                    break;
                }
            }
            classify_replay(&m)
        }
        ReplayClass::CrossThread65536 | ReplayClass::CrossThread4096 => {
            let delta = if class == ReplayClass::CrossThread65536 { 65536 } else { 4096 };
            let module = modules::two_threads_one_victim();
            let lowered = lower_module(&module, scheme, TEXT_BASE)?;
            let mut image = lowered.image;
            let mut m = prepare_machine(&mut image, MachineConfig::default(), seed)?;
            let victim_body =
                lowered.link.functions["victim"] + prologue_len(scheme) * INSTR_BYTES;
            let sp_a = STACK_TOP;
            let sp_b = STACK_TOP - delta;

            // Thread A: run and harvest the signed saved LR of the victim.
            arm_entry(&mut m, lowered.link.functions["main_a"], sp_a);
            let mut harvested: Option<u64> = None;
            for _ in 0..DEFAULT_MAX_STEPS {
                if m.pc() == victim_body && harvested.is_none() {
                    let slot = saved_lr_slot(m.sp() + 16);
                    harvested = Some(m.attacker_read(slot).map_err(|e| {
                        HarnessError::RunFailed { scheme, desc: format!("{}", e) }
                    })?);
                }
                if m.step() != Status::Running {
                    break;
                }
            }
            if *m.status() != Status::Halted(HaltReason::Clean) {
                return Err(HarnessError::RunFailed {
                    scheme,
                    desc: format!("harvest run ended {:?}", m.status()),
                });
            }
            let harvested = harvested.ok_or(HarnessError::RunFailed {
                scheme,
                desc: "victim frame never reached".to_string(),
            })?;

            // Thread B: replay into the same relative slot of its stack.
            arm_entry(&mut m, lowered.link.functions["main_b"], sp_b);
            let mut injected = false;
            for _ in 0..DEFAULT_MAX_STEPS {
                if m.pc() == victim_body && !injected {
                    let slot = saved_lr_slot(m.sp() + 16);
                    m.attacker_write(slot, harvested).map_err(|e| {
                        HarnessError::RunFailed { scheme, desc: format!("{}", e) }
                    })?;
                    injected = true;
                }
                if m.step() != Status::Running {
                    break;
                }
            }
            classify_replay(&m)
        }
    }
}

fn classify_replay(m: &Machine) -> Result<ReplayOutcome, HarnessError> {
    match m.status() {
        Status::Hijacked { .. } => Ok(ReplayOutcome::Succeeds),
        Status::Faulted(Fault::InvalidTarget { .. })
        | Status::Faulted(Fault::InvalidDataAddr { .. })
        | Status::Halted(HaltReason::BruteForceSuspected) => Ok(ReplayOutcome::Blocked),
        s => Err(HarnessError::RunFailed {
            scheme: ModifierScheme::None,
            desc: format!("replay run ended {:?}", s),
        }),
    }
}

/// Full scheme × replay-class table.
pub fn replay_matrix(
    schemes: &[ModifierScheme],
    seed: u64,
) -> Result<Vec<ReplayCell>, HarnessError> {
    let mut out = Vec::new();
    for &scheme in schemes {
        for class in ReplayClass::ALL {
            out.push(ReplayCell {
                scheme,
                class,
                outcome: replay_run(scheme, class, seed)?,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Collision analyzer
// ---------------------------------------------------------------------------

/// One return-address signing site, positioned relative to the stack top.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Callsite {
    pub func_addr: u64,
    pub func_id: u64,
    /// Bytes below the stack top at which the frame is entered.
    pub frame_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollisionPair {
    pub thread_a: usize,
    pub thread_b: usize,
    pub callsite: usize,
    pub modifier: u64,
}

#[derive(Debug, Clone)]
pub struct CollisionReport {
    pub scheme: ModifierScheme,
    pub pairs_total: u64,
    pub collisions: u64,
    pub rate: f64,
    pub detail: Vec<CollisionPair>,
}

/// Fraction of cross-thread frame pairs whose signing modifiers coincide.
/// Stack bases must be 4 KiB aligned; stacks are 16 KiB.
pub fn collision_rate(
    scheme: ModifierScheme,
    stack_bases: &[u64],
    callsites: &[Callsite],
) -> Result<CollisionReport, HarnessError> {
    if stack_bases.len() < 2 {
        return Err(HarnessError::Parameter("need at least 2 threads".to_string()));
    }
    if callsites.is_empty() {
        return Err(HarnessError::Parameter("empty callsite set".to_string()));
    }
    for &b in stack_bases {
        if b % 4096 != 0 {
            return Err(HarnessError::Parameter(format!(
                "stack base {:#x} not 4 KiB aligned",
                b
            )));
        }
    }
    let modifier = |base: u64, cs: &Callsite| -> u64 {
        let sp = base + KERNEL_STACK_SIZE - cs.frame_offset;
        match scheme {
            // No signing: every pair trivially indistinguishable.
            ModifierScheme::None => 0,
            _ => pauth::ra_modifier(scheme, sp, cs.func_addr, cs.func_id)
                .expect("non-None scheme has a modifier"),
        }
    };
    let mut collisions = 0u64;
    let mut pairs_total = 0u64;
    let mut detail = Vec::new();
    for a in 0..stack_bases.len() {
        for b in a + 1..stack_bases.len() {
            for (ci, cs) in callsites.iter().enumerate() {
                pairs_total += 1;
                let ma = modifier(stack_bases[a], cs);
                let mb = modifier(stack_bases[b], cs);
                if ma == mb {
                    collisions += 1;
                    detail.push(CollisionPair {
                        thread_a: a,
                        thread_b: b,
                        callsite: ci,
                        modifier: ma,
                    });
                }
            }
        }
    }
    Ok(CollisionReport {
        scheme,
        pairs_total,
        collisions,
        rate: collisions as f64 / pairs_total as f64,
        detail,
    })
}

/// Random 4 KiB-aligned stack bases in the kernel stack region.
pub fn random_stack_bases(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = seeded_rng(seed);
    let region = 0xffff_0000_4000_0000u64;
    (0..n)
        .map(|_| region + (rng.next_u64() % (1 << 20)) * 4096)
        .collect()
}

// ---------------------------------------------------------------------------
// Forgery Monte-Carlo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct ForgeryReport {
    pub pac_bits: u32,
    pub trials: u64,
    pub accepted: u64,
    pub rate: f64,
    /// Theoretical acceptance probability 2^-pac_bits.
    pub expected: f64,
    /// Standard error of the estimate (normal approximation).
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

fn sqrt(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut guess = x;
    for _ in 0..64 {
        guess = 0.5 * (guess + x / guess);
    }
    guess
}

/// A pointer layout whose kernel-half PAC width equals `bits`, when one
/// exists within the VMSA rules.
pub fn layout_for_pac_bits(bits: u32) -> Option<crate::pointer::PointerLayout> {
    if (11..=31).contains(&bits) {
        crate::pointer::PointerLayout::new(63 - bits, false, false).ok()
    } else if (3..=22).contains(&bits) {
        crate::pointer::PointerLayout::new(55 - bits, false, true).ok()
    } else {
        None
    }
}

/// Acceptance rate of uniformly random PAC guesses.
pub fn forgery_rate(pac_bits: u32, trials: u64, seed: u64) -> Result<ForgeryReport, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Parameter("trials must be at least 1".to_string()));
    }
    if !(1..=31).contains(&pac_bits) {
        return Err(HarnessError::Parameter(format!(
            "pac_bits {} outside 1..=31",
            pac_bits
        )));
    }
    let mut rng = seeded_rng(seed);
    let key = crate::key::PacKey::random(&mut rng);
    let mac = crate::pac::QarmaMac::default();
    let ctl = crate::key::PacControl::ALL_ENABLED;
    let mut bank = KeyBank::default();
    bank.set(KeyClass::Ib, key);
    let layout = layout_for_pac_bits(pac_bits);
    let guess_mask = (1u64 << pac_bits) - 1;
    let mut accepted = 0u64;
    for _ in 0..trials {
        let modifier = rng.next_u64();
        let guess = rng.next_u64() & guess_mask;
        match layout {
            Some(l) => {
                let va = 63 - l.pac_width(crate::pointer::AddressClass::Kernel).unwrap()
                    - if l.tbi_kernel { 8 } else { 0 };
                let ptr = (u64::MAX << va) | (rng.next_u64() & ((1u64 << va) - 1));
                let candidate = l.insert_pac(ptr, guess).expect("canonical pointer");
                let res = pauth::exec_aut(&mac, &bank, &ctl, KeyClass::Ib, candidate, modifier, &l);
                if !res.failed {
                    accepted += 1;
                }
            }
            None => {
                // Width not representable as a VMSA layout: compare against
                // the truncated MAC directly, which is exactly the
                // acceptance test exec_aut performs.
                let value = rng.next_u64();
                use crate::pac::PointerMac;
                let expected = truncate(mac.mac(key, modifier, value), pac_bits);
                if guess == expected {
                    accepted += 1;
                }
            }
        }
    }
    let rate = accepted as f64 / trials as f64;
    let expected = 1.0 / (1u64 << pac_bits) as f64;
    let std_err = sqrt(rate * (1.0 - rate) / trials as f64);
    Ok(ForgeryReport {
        pac_bits,
        trials,
        accepted,
        rate,
        expected,
        std_err,
        ci_low: rate - 1.96 * std_err,
        ci_high: rate + 1.96 * std_err,
    })
}

// ---------------------------------------------------------------------------
// Overhead report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SchemeCost {
    pub scheme: ModifierScheme,
    pub cycles: u64,
    pub instructions: u64,
    pub calls: u64,
    /// Cycle delta per call relative to the None scheme.
    pub per_call_delta: f64,
}

#[derive(Debug, Clone)]
pub struct OverheadReport {
    pub rows: Vec<SchemeCost>,
    /// Key-switch cycles for one syscall: entry + exit.
    pub syscall_key_cycles: u64,
}

/// Run the benchmark module under each scheme and account cycles.
pub fn overhead_report(
    module: &IrModule,
    schemes: &[ModifierScheme],
    cfg: &MachineConfig,
    seed: u64,
) -> Result<OverheadReport, HarnessError> {
    let mut raw: Vec<(ModifierScheme, u64, u64, u64)> = Vec::new();
    for &scheme in schemes.iter().chain(core::iter::once(&ModifierScheme::None)) {
        if raw.iter().any(|r| r.0 == scheme) {
            continue;
        }
        let lowered = lower_module(module, scheme, TEXT_BASE)?;
        let mut image = lowered.image;
        let mut m = prepare_machine(&mut image, cfg.clone(), seed)?;
        let cycles0 = m.cycles();
        let steps0 = m.steps();
        arm_entry(&mut m, image.entry, STACK_TOP);
        let status = m.run(DEFAULT_MAX_STEPS);
        if status != Status::Halted(HaltReason::Clean) {
            return Err(HarnessError::RunFailed { scheme, desc: format!("{:?}", status) });
        }
        let calls = 1 + m
            .trace
            .iter()
            .filter(|e| {
                matches!(
                    &e.kind,
                    crate::machine::EventKind::Exec { mnemonic } if matches!(*mnemonic, "bl" | "blr" | "blrab")
                )
            })
            .count() as u64;
        raw.push((scheme, m.cycles() - cycles0, m.steps() - steps0, calls));
    }
    let none_cycles = raw
        .iter()
        .find(|r| r.0 == ModifierScheme::None)
        .map(|r| r.1)
        .expect("baseline present");
    let rows = schemes
        .iter()
        .map(|&s| {
            let &(_, cycles, instructions, calls) =
                raw.iter().find(|r| r.0 == s).expect("measured");
            SchemeCost {
                scheme: s,
                cycles,
                instructions,
                calls,
                per_call_delta: (cycles as f64 - none_cycles as f64) / calls as f64,
            }
        })
        .collect();
    Ok(OverheadReport {
        rows,
        syscall_key_cycles: 2 * cfg.kernel_key_classes.len() as u64 * cfg.key_install_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn return_overwrite_detected_under_proposed_hijacks_under_none() {
        let s = scenarios::return_address_overwrite(ModifierScheme::Proposed, 7).unwrap();
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.outcome.kind(), OutcomeKind::AuthFault, "{}", r.outcome.describe());
        if let Outcome::AuthFault { key_class, .. } = r.outcome {
            assert_eq!(key_class, KeyClass::Ib);
        }

        let s = scenarios::return_address_overwrite(ModifierScheme::None, 7).unwrap();
        let r = run_scenario(&s).unwrap();
        assert_eq!(r.outcome.kind(), OutcomeKind::Hijacked, "{}", r.outcome.describe());
    }

    #[test]
    fn clean_runs_have_no_auth_failures() {
        for scheme in ModifierScheme::ALL {
            let module = modules::bench();
            let lowered = lower_module(&module, scheme, TEXT_BASE).unwrap();
            let mut image = lowered.image;
            let mut m = prepare_machine(&mut image, MachineConfig::default(), 3).unwrap();
            arm_entry(&mut m, image.entry, STACK_TOP);
            let status = m.run(DEFAULT_MAX_STEPS);
            assert_eq!(status, Status::Halted(HaltReason::Clean), "{}", scheme.name());
            let failures = m
                .trace
                .iter()
                .filter(|e| matches!(e.kind, crate::machine::EventKind::AuthFail { .. }))
                .count();
            assert_eq!(failures, 0, "{}", scheme.name());
        }
    }

    #[test]
    fn replay_cells_match_published_weaknesses() {
        let seed = 11;
        for (scheme, class, expect) in [
            (ModifierScheme::SpOnly, ReplayClass::CrossFunctionSameSp, ReplayOutcome::Succeeds),
            (ModifierScheme::Proposed, ReplayClass::CrossFunctionSameSp, ReplayOutcome::Blocked),
            (ModifierScheme::PartsLike, ReplayClass::CrossThread65536, ReplayOutcome::Succeeds),
            (ModifierScheme::Proposed, ReplayClass::CrossThread65536, ReplayOutcome::Blocked),
            (ModifierScheme::Proposed, ReplayClass::SameFunctionSameSp, ReplayOutcome::Succeeds),
            (ModifierScheme::None, ReplayClass::SameFunctionSameSp, ReplayOutcome::Succeeds),
            (ModifierScheme::PartsLike, ReplayClass::CrossThread4096, ReplayOutcome::Blocked),
        ] {
            let got = replay_run(scheme, class, seed).unwrap();
            assert_eq!(got, expect, "{} / {}", scheme.name(), class.name());
        }
    }

    #[test]
    fn collision_rates_at_forced_geometries() {
        let cs = [Callsite { func_addr: TEXT_BASE, func_id: 1, frame_offset: 64 }];
        // Bases 65536 apart: PARTS-style modifiers repeat, Proposed's don't.
        let bases = [0xffff_0000_4000_0000u64, 0xffff_0000_4001_0000];
        let parts = collision_rate(ModifierScheme::PartsLike, &bases, &cs).unwrap();
        assert_eq!(parts.rate, 1.0);
        let proposed = collision_rate(ModifierScheme::Proposed, &bases, &cs).unwrap();
        assert_eq!(proposed.rate, 0.0);
        // Bases a multiple of 2^32 apart: the low-32-bit SP component of the
        // hardened modifier repeats (residual risk), while the full-SP
        // modifier still distinguishes the threads.
        let bases = [0xffff_0000_4000_0000u64, 0xffff_0001_4000_0000];
        let proposed = collision_rate(ModifierScheme::Proposed, &bases, &cs).unwrap();
        assert_eq!(proposed.rate, 1.0);
        let sponly = collision_rate(ModifierScheme::SpOnly, &bases, &cs).unwrap();
        assert_eq!(sponly.rate, 0.0);
        assert!(collision_rate(ModifierScheme::SpOnly, &bases, &[]).is_err());
        assert!(collision_rate(ModifierScheme::SpOnly, &bases[..1], &cs).is_err());
    }

    #[test]
    fn forgery_rate_tracks_theory() {
        let r = forgery_rate(8, 20_000, 42).unwrap();
        let sigma = sqrt(r.expected * (1.0 - r.expected) / r.trials as f64);
        assert!((r.rate - r.expected).abs() < 3.0 * sigma, "rate {}", r.rate);
        assert!(forgery_rate(0, 10, 1).is_err());
        assert!(forgery_rate(8, 0, 1).is_err());
        // Single-bit guesses are accepted about half the time.
        let r = forgery_rate(1, 10_000, 9).unwrap();
        assert!((r.rate - 0.5).abs() < 0.02, "rate {}", r.rate);
    }

    #[test]
    fn forgery_rate_deterministic_per_seed() {
        let a = forgery_rate(12, 5_000, 123).unwrap();
        let b = forgery_rate(12, 5_000, 123).unwrap();
        assert_eq!(a.accepted, b.accepted);
        let c = forgery_rate(12, 5_000, 124).unwrap();
        assert!(a.accepted != c.accepted || a.rate == c.rate);
    }

    #[test]
    fn overhead_ordering_and_key_switch_cost() {
        let cfg = MachineConfig::default();
        let report = overhead_report(
            &modules::bench(),
            &[
                ModifierScheme::None,
                ModifierScheme::SpOnly,
                ModifierScheme::Proposed,
                ModifierScheme::PartsLike,
            ],
            &cfg,
            5,
        )
        .unwrap();
        let d: Vec<f64> = report.rows.iter().map(|r| r.per_call_delta).collect();
        assert!(d[0] < d[1] && d[1] < d[2] && d[2] < d[3], "{:?}", d);
        assert_eq!(report.rows[0].per_call_delta, 0.0);
        assert_eq!(report.syscall_key_cycles, 54);
    }

    #[test]
    fn compat_scheme_runs_on_pre83_machine() {
        let module = modules::bench();
        let lowered = lower_module(&module, ModifierScheme::Compat1716, TEXT_BASE).unwrap();

        let run = |pre_83: bool| {
            let mut image = lowered.image.clone();
            let mut cfg = MachineConfig::default();
            cfg.pre_83 = pre_83;
            let mut m = prepare_machine(&mut image, cfg, 21).unwrap();
            arm_entry(&mut m, image.entry, STACK_TOP);
            let status = m.run(DEFAULT_MAX_STEPS);
            (status, m.cycles())
        };
        let (s83, _) = run(false);
        let (s82, _) = run(true);
        assert_eq!(s83, Status::Halted(HaltReason::Clean));
        assert_eq!(s82, Status::Halted(HaltReason::Clean));
    }

    #[test]
    fn boot_callbacks_dispatch_cleanly_and_detect_corruption() {
        let module = modules::boot_callbacks();
        let lowered = lower_module(&module, ModifierScheme::Proposed, TEXT_BASE).unwrap();
        assert!(lowered.image.signing_table.len() >= 3);
        let mut image = lowered.image.clone();
        let mut m = prepare_machine(&mut image, MachineConfig::default(), 13).unwrap();
        arm_entry(&mut m, image.entry, STACK_TOP);
        assert_eq!(m.run(DEFAULT_MAX_STEPS), Status::Halted(HaltReason::Clean));

        // Corrupt one signed slot before dispatch.
        let mut image = lowered.image.clone();
        let slot = lowered.link.objects["ops0"] + 8;
        let mut m = prepare_machine(&mut image, MachineConfig::default(), 13).unwrap();
        m.attacker_write(slot, lowered.link.functions["do_write"]).unwrap();
        arm_entry(&mut m, image.entry, STACK_TOP);
        let status = m.run(DEFAULT_MAX_STEPS);
        assert!(
            matches!(status, Status::Faulted(Fault::InvalidTarget { .. })),
            "{:?}",
            status
        );
    }
}
