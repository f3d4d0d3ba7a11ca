//! Text format for attack scenarios: sectioned key=value files. Grammar in
//! docs/formats.md.
//!
//! Addresses are written as expressions over link-time symbols so scenario
//! files stay valid as the instrumentation scheme (and hence the layout of
//! the lowered image) changes.

use pacsim_core::harness::{
    prologue_len, saved_lr_slot, AttackerAction, AttackerOp, OutcomeKind, Trigger, STACK_TOP,
};
use pacsim_core::instrument::LinkMap;
use pacsim_core::ir::{IrModule, Protection};
use pacsim_core::pauth::ModifierScheme;
use pacsim_core::program::Image;

use crate::fmt_ir::ParseError;

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, msg: msg.into() })
}

fn parse_u64(tok: &str, line: usize) -> Result<u64, ParseError> {
    if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        tok.parse()
    }
    .map_err(|_| ParseError { line, msg: format!("bad number '{}'", tok) })
}

/// Symbolic address, resolved once the module is lowered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddrExpr {
    Literal(u64),
    /// Entry address of a function, plus a byte offset.
    Func { name: String, off: u64 },
    /// First post-prologue instruction of a function (scheme-dependent).
    Body { name: String, off: u64 },
    /// Base of a static object, plus a byte offset.
    Obj { name: String, off: u64 },
    /// `bytes` below the initial stack top.
    StackTop { below: u64 },
    /// Saved-LR slot of a frame entered `depth` bytes below the stack top.
    LrSlot { depth: u64 },
    /// Base of the key-setter page.
    Setter,
}

fn split_off(body: &str, line: usize) -> Result<(&str, u64), ParseError> {
    match body.split_once('+') {
        Some((name, off)) => Ok((name, parse_u64(off, line)?)),
        None => Ok((body, 0)),
    }
}

pub fn parse_addr(tok: &str, line: usize) -> Result<AddrExpr, ParseError> {
    if let Some(body) = tok.strip_prefix("func:") {
        let (name, off) = split_off(body, line)?;
        return Ok(AddrExpr::Func { name: name.to_string(), off });
    }
    if let Some(body) = tok.strip_prefix("body:") {
        let (name, off) = split_off(body, line)?;
        return Ok(AddrExpr::Body { name: name.to_string(), off });
    }
    if let Some(body) = tok.strip_prefix("obj:") {
        let (name, off) = split_off(body, line)?;
        return Ok(AddrExpr::Obj { name: name.to_string(), off });
    }
    if tok == "stacktop" {
        return Ok(AddrExpr::StackTop { below: 0 });
    }
    if let Some(body) = tok.strip_prefix("stacktop-") {
        return Ok(AddrExpr::StackTop { below: parse_u64(body, line)? });
    }
    if let Some(body) = tok.strip_prefix("lrslot:") {
        return Ok(AddrExpr::LrSlot { depth: parse_u64(body, line)? });
    }
    if tok == "setter" {
        return Ok(AddrExpr::Setter);
    }
    Ok(AddrExpr::Literal(parse_u64(tok, line)?))
}

impl AddrExpr {
    pub fn resolve(
        &self,
        image: &Image,
        link: &LinkMap,
        scheme: ModifierScheme,
    ) -> Result<u64, String> {
        let func = |name: &str| {
            link.functions
                .get(name)
                .copied()
                .ok_or_else(|| format!("unknown function '{}'", name))
        };
        match self {
            AddrExpr::Literal(v) => Ok(*v),
            AddrExpr::Func { name, off } => Ok(func(name)? + off),
            AddrExpr::Body { name, off } => {
                Ok(func(name)? + prologue_len(scheme) * pacsim_core::isa::INSTR_BYTES + off)
            }
            AddrExpr::Obj { name, off } => link
                .objects
                .get(name)
                .map(|base| base + off)
                .ok_or_else(|| format!("unknown object '{}'", name)),
            AddrExpr::StackTop { below } => Ok(STACK_TOP - below),
            AddrExpr::LrSlot { depth } => Ok(saved_lr_slot(STACK_TOP - depth)),
            AddrExpr::Setter => image.key_setter.ok_or_else(|| "no key-setter page".to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TriggerSpec {
    Step(u64),
    PcHit { addr: AddrExpr, occurrence: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpSpec {
    Write { addr: AddrExpr, value: AddrExpr },
    Read { addr: AddrExpr },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackSpec {
    pub trigger: TriggerSpec,
    pub op: OpSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModuleRef {
    /// Path to an IR file, relative to the scenario file.
    Path(String),
    /// One of the canonical built-in modules.
    Builtin(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioSpec {
    pub name: String,
    pub module: ModuleRef,
    pub entry: Option<String>,
    pub expected: Option<OutcomeKind>,
    pub max_steps: Option<u64>,
    pub attacks: Vec<AttackSpec>,
}

pub fn parse_outcome_kind(tok: &str) -> Option<OutcomeKind> {
    OutcomeKind::ALL.into_iter().find(|k| k.name() == tok)
}

pub fn builtin_module(name: &str) -> Option<IrModule> {
    use pacsim_core::harness::modules;
    match name {
        "call-once" => Some(modules::call_once()),
        "call-twice" => Some(modules::call_twice()),
        "call-two-functions" => Some(modules::call_two_functions()),
        "two-threads-one-victim" => Some(modules::two_threads_one_victim()),
        "dispatch-ops" => Some(modules::dispatch(Protection::OpsPointer)),
        "dispatch-fnptr" => Some(modules::dispatch(Protection::WritableFnPtr)),
        "dispatch-sensitive" => Some(modules::dispatch(Protection::SensitiveData)),
        "boot-callbacks" => Some(modules::boot_callbacks()),
        "bench" => Some(modules::bench()),
        _ => None,
    }
}

pub const BUILTIN_MODULES: &[&str] = &[
    "call-once",
    "call-twice",
    "call-two-functions",
    "two-threads-one-victim",
    "dispatch-ops",
    "dispatch-fnptr",
    "dispatch-sensitive",
    "boot-callbacks",
    "bench",
];

pub fn parse_scenario(src: &str) -> Result<ScenarioSpec, ParseError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Scenario,
        Attack,
    }
    let mut section = Section::None;
    let mut name = None;
    let mut module = None;
    let mut entry = None;
    let mut expected = None;
    let mut max_steps = None;
    let mut attacks: Vec<AttackSpec> = Vec::new();
    let mut pending: Option<(usize, Option<TriggerSpec>, Option<OpSpec>)> = None;

    let finish_attack =
        |pending: &mut Option<(usize, Option<TriggerSpec>, Option<OpSpec>)>| -> Result<Option<AttackSpec>, ParseError> {
            match pending.take() {
                None => Ok(None),
                Some((_, Some(trigger), Some(op))) => Ok(Some(AttackSpec { trigger, op })),
                Some((at, trigger, _)) => err(
                    at,
                    if trigger.is_none() { "[attack] missing 'trigger'" } else { "[attack] missing 'op'" },
                ),
            }
        };

    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        if stripped == "[scenario]" {
            if let Some(a) = finish_attack(&mut pending)? {
                attacks.push(a);
            }
            section = Section::Scenario;
            continue;
        }
        if stripped == "[attack]" {
            if let Some(a) = finish_attack(&mut pending)? {
                attacks.push(a);
            }
            section = Section::Attack;
            pending = Some((line, None, None));
            continue;
        }
        let (key, value) = stripped
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| ParseError { line, msg: "expected key = value".into() })?;
        match section {
            Section::None => return err(line, "key outside any section"),
            Section::Scenario => match key {
                "name" => name = Some(value.to_string()),
                "module" => {
                    module = Some(match value.strip_prefix("builtin:") {
                        Some(b) => {
                            if builtin_module(b).is_none() {
                                return err(line, format!("unknown builtin module '{}'", b));
                            }
                            ModuleRef::Builtin(b.to_string())
                        }
                        None => ModuleRef::Path(value.to_string()),
                    })
                }
                "entry" => entry = Some(value.to_string()),
                "expected" => {
                    expected = Some(parse_outcome_kind(value).ok_or_else(|| ParseError {
                        line,
                        msg: format!("unknown outcome '{}'", value),
                    })?)
                }
                "max-steps" => max_steps = Some(parse_u64(value, line)?),
                other => return err(line, format!("unknown scenario key '{}'", other)),
            },
            Section::Attack => {
                let slot = pending.as_mut().unwrap();
                let toks: Vec<&str> = value.split_whitespace().collect();
                match key {
                    "trigger" => {
                        slot.1 = Some(match toks.as_slice() {
                            ["step", n] => TriggerSpec::Step(parse_u64(n, line)?),
                            ["pchit", addr, occ] => TriggerSpec::PcHit {
                                addr: parse_addr(addr, line)?,
                                occurrence: parse_u64(occ, line)? as u32,
                            },
                            ["pchit", addr] => TriggerSpec::PcHit {
                                addr: parse_addr(addr, line)?,
                                occurrence: 1,
                            },
                            _ => return err(line, "trigger = step <n> | pchit <addr> [occurrence]"),
                        })
                    }
                    "op" => {
                        slot.2 = Some(match toks.as_slice() {
                            ["write", addr, value] => OpSpec::Write {
                                addr: parse_addr(addr, line)?,
                                value: parse_addr(value, line)?,
                            },
                            ["read", addr] => OpSpec::Read { addr: parse_addr(addr, line)? },
                            _ => return err(line, "op = write <addr> <value> | read <addr>"),
                        })
                    }
                    other => return err(line, format!("unknown attack key '{}'", other)),
                }
            }
        }
    }
    if let Some(a) = finish_attack(&mut pending)? {
        attacks.push(a);
    }
    let last = src.lines().count();
    Ok(ScenarioSpec {
        name: name.ok_or_else(|| ParseError { line: last, msg: "missing 'name'".into() })?,
        module: module.ok_or_else(|| ParseError { line: last, msg: "missing 'module'".into() })?,
        entry,
        expected,
        max_steps,
        attacks,
    })
}

/// Bind a parsed attack list to a lowered image.
pub fn resolve_attacks(
    spec: &ScenarioSpec,
    image: &Image,
    link: &LinkMap,
    scheme: ModifierScheme,
) -> Result<Vec<AttackerAction>, String> {
    spec.attacks
        .iter()
        .map(|a| {
            let trigger = match &a.trigger {
                TriggerSpec::Step(n) => Trigger::Step(*n),
                TriggerSpec::PcHit { addr, occurrence } => Trigger::PcHit {
                    addr: addr.resolve(image, link, scheme)?,
                    occurrence: *occurrence,
                },
            };
            let op = match &a.op {
                OpSpec::Write { addr, value } => AttackerOp::Write {
                    addr: addr.resolve(image, link, scheme)?,
                    value: value.resolve(image, link, scheme)?,
                },
                OpSpec::Read { addr } => {
                    AttackerOp::Read { addr: addr.resolve(image, link, scheme)? }
                }
            };
            Ok(AttackerAction { trigger, op })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# overwrite the callee's saved return address
[scenario]
name = lr-overwrite
module = builtin:call-once
expected = auth-fault
max-steps = 1000

[attack]
trigger = pchit body:helper 1
op = write lrslot:16 func:main
";

    #[test]
    fn sample_parses() {
        let s = parse_scenario(SAMPLE).unwrap();
        assert_eq!(s.name, "lr-overwrite");
        assert_eq!(s.module, ModuleRef::Builtin("call-once".to_string()));
        assert_eq!(s.expected, Some(OutcomeKind::AuthFault));
        assert_eq!(s.max_steps, Some(1000));
        assert_eq!(s.attacks.len(), 1);
        assert_eq!(
            s.attacks[0].trigger,
            TriggerSpec::PcHit {
                addr: AddrExpr::Body { name: "helper".to_string(), off: 0 },
                occurrence: 1
            }
        );
    }

    #[test]
    fn attack_without_op_rejected() {
        let bad = "[scenario]\nname = x\nmodule = builtin:bench\n[attack]\ntrigger = step 0\n";
        let e = parse_scenario(bad).unwrap_err();
        assert!(e.msg.contains("missing 'op'"), "{}", e);
    }

    #[test]
    fn resolution_matches_canonical_scenario() {
        use pacsim_core::harness::scenarios;
        use pacsim_core::instrument::{lower_module, TEXT_BASE};
        let scheme = ModifierScheme::Proposed;
        let spec = parse_scenario(SAMPLE).unwrap();
        let module = builtin_module("call-once").unwrap();
        let lowered = lower_module(&module, scheme, TEXT_BASE).unwrap();
        let actions =
            resolve_attacks(&spec, &lowered.image, &lowered.link, scheme).unwrap();
        let canonical = scenarios::return_address_overwrite(scheme, 0).unwrap();
        assert_eq!(actions, canonical.actions);
    }

    #[test]
    fn all_builtin_names_resolve() {
        for name in BUILTIN_MODULES {
            assert!(builtin_module(name).is_some(), "{}", name);
        }
    }
}
