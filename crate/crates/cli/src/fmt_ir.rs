//! Text format for IR modules. Grammar in docs/formats.md.
//!
//! Line-oriented: `#` starts a comment; commas are whitespace. Declarations
//! (`field`, `object`, `init`) may appear anywhere at top level; function
//! bodies run from `func <name>` to `end`.

use pacsim_core::ir::{FieldDef, IrFunction, IrModule, IrObject, IrOp, Protection, StaticInit};

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, msg: msg.into() })
}

fn parse_u64(tok: &str, line: usize) -> Result<u64, ParseError> {
    let r = if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        tok.parse()
    };
    r.map_err(|_| ParseError { line, msg: format!("bad number '{}'", tok) })
}

fn parse_reg(tok: &str, line: usize) -> Result<u8, ParseError> {
    match tok.strip_prefix('x').and_then(|n| n.parse::<u8>().ok()) {
        Some(r) if (r as usize) < pacsim_core::isa::NUM_GPRS => Ok(r),
        _ => err(line, format!("bad register '{}'", tok)),
    }
}

fn parse_protection(tok: &str, line: usize) -> Result<Protection, ParseError> {
    match tok {
        "none" => Ok(Protection::None),
        "ops-pointer" => Ok(Protection::OpsPointer),
        "fn-ptr" => Ok(Protection::WritableFnPtr),
        "sensitive" => Ok(Protection::SensitiveData),
        other => err(line, format!("unknown protection '{}'", other)),
    }
}

/// `key=value` with a specific key, or error.
fn kv<'a>(tok: &'a str, key: &str, line: usize) -> Result<&'a str, ParseError> {
    match tok.split_once('=') {
        Some((k, v)) if k == key => Ok(v),
        _ => err(line, format!("expected {}=<value>, got '{}'", key, tok)),
    }
}

pub fn parse_module(src: &str) -> Result<IrModule, ParseError> {
    let mut module = IrModule::default();
    let mut current: Option<IrFunction> = None;
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").replace(',', " ");
        let toks: Vec<&str> = stripped.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if let Some(func) = current.as_mut() {
            match toks[0] {
                "end" => {
                    module.functions.push(current.take().unwrap());
                }
                "compute" if toks.len() == 2 => {
                    func.body.push(IrOp::Compute(parse_u64(toks[1], line)? as u32));
                }
                "alloc" if toks.len() == 2 => {
                    func.body.push(IrOp::AllocStack(parse_u64(toks[1], line)?));
                }
                "call" if toks.len() == 2 => {
                    func.body.push(IrOp::Call(toks[1].to_string()));
                }
                "return" if toks.len() == 1 => func.body.push(IrOp::Return),
                "addrof" if toks.len() == 3 => func.body.push(IrOp::AddrOf {
                    object: toks[1].to_string(),
                    dest_reg: parse_reg(toks[2], line)?,
                }),
                "loadf" if toks.len() == 4 => func.body.push(IrOp::LoadField {
                    object_reg: parse_reg(toks[1], line)?,
                    field: parse_u64(toks[2], line)? as u32,
                    dest_reg: parse_reg(toks[3], line)?,
                }),
                "storef" if toks.len() == 4 => func.body.push(IrOp::StoreField {
                    object_reg: parse_reg(toks[1], line)?,
                    field: parse_u64(toks[2], line)? as u32,
                    value_reg: parse_reg(toks[3], line)?,
                }),
                "icallf" if toks.len() == 3 => func.body.push(IrOp::IndirectCallViaField {
                    object_reg: parse_reg(toks[1], line)?,
                    field: parse_u64(toks[2], line)? as u32,
                }),
                other => return err(line, format!("bad op '{}'", other)),
            }
            continue;
        }
        match toks[0] {
            // field <id> <type>.<member> const16=<n> offset=<n> prot=<name>
            "field" if toks.len() == 6 => {
                let id = parse_u64(toks[1], line)? as u32;
                let (type_name, member_name) = toks[2]
                    .split_once('.')
                    .ok_or_else(|| ParseError { line, msg: "expected <type>.<member>".into() })?;
                let const16 = parse_u64(kv(toks[3], "const16", line)?, line)?;
                if const16 > u16::MAX as u64 {
                    return err(line, "const16 exceeds 16 bits");
                }
                let def = FieldDef {
                    type_name: type_name.to_string(),
                    member_name: member_name.to_string(),
                    const16: const16 as u16,
                    offset: parse_u64(kv(toks[4], "offset", line)?, line)?,
                    protection: parse_protection(kv(toks[5], "prot", line)?, line)?,
                };
                if module.fields.insert(id, def).is_some() {
                    return err(line, format!("duplicate field id {}", id));
                }
            }
            // object <name> words=<n>
            "object" if toks.len() == 3 => module.objects.push(IrObject {
                name: toks[1].to_string(),
                words: parse_u64(kv(toks[2], "words", line)?, line)?,
            }),
            // init <object>.<field-id> = <function>
            "init" if toks.len() == 4 && toks[2] == "=" => {
                let (object, field) = toks[1]
                    .split_once('.')
                    .ok_or_else(|| ParseError { line, msg: "expected <object>.<field-id>".into() })?;
                module.inits.push(StaticInit {
                    object: object.to_string(),
                    field: parse_u64(field, line)? as u32,
                    target: toks[3].to_string(),
                });
            }
            "func" if toks.len() == 2 => {
                current = Some(IrFunction { name: toks[1].to_string(), body: Vec::new() });
            }
            other => return err(line, format!("bad declaration '{}'", other)),
        }
    }
    if let Some(f) = current {
        return err(src.lines().count(), format!("function '{}' missing 'end'", f.name));
    }
    Ok(module)
}

pub fn emit_module(module: &IrModule) -> String {
    let mut out = String::new();
    for (id, fd) in &module.fields {
        out += &format!(
            "field {} {}.{} const16=0x{:04x} offset={} prot={}\n",
            id, fd.type_name, fd.member_name, fd.const16, fd.offset, fd.protection.name()
        );
    }
    for o in &module.objects {
        out += &format!("object {} words={}\n", o.name, o.words);
    }
    for init in &module.inits {
        out += &format!("init {}.{} = {}\n", init.object, init.field, init.target);
    }
    for f in &module.functions {
        out += &format!("func {}\n", f.name);
        for op in &f.body {
            out.push_str("  ");
            out += &match op {
                IrOp::Compute(n) => format!("compute {}\n", n),
                IrOp::AllocStack(n) => format!("alloc {}\n", n),
                IrOp::Call(n) => format!("call {}\n", n),
                IrOp::Return => "return\n".to_string(),
                IrOp::AddrOf { object, dest_reg } => format!("addrof {} x{}\n", object, dest_reg),
                IrOp::LoadField { object_reg, field, dest_reg } => {
                    format!("loadf x{} {} x{}\n", object_reg, field, dest_reg)
                }
                IrOp::StoreField { object_reg, field, value_reg } => {
                    format!("storef x{} {} x{}\n", object_reg, field, value_reg)
                }
                IrOp::IndirectCallViaField { object_reg, field } => {
                    format!("icallf x{} {}\n", object_reg, field)
                }
            };
        }
        out += "end\n";
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use pacsim_core::harness::modules;

    #[test]
    fn canonical_modules_round_trip() {
        for m in [
            modules::call_once(),
            modules::call_two_functions(),
            modules::dispatch(Protection::OpsPointer),
            modules::boot_callbacks(),
            modules::bench(),
        ] {
            let text = emit_module(&m);
            let back = parse_module(&text).unwrap();
            assert_eq!(back, m, "round trip failed for:\n{}", text);
        }
    }

    #[test]
    fn comments_and_commas_are_cosmetic() {
        let text = "func main\n  compute 3  # busy work\n  return\nend\n";
        let spaced = "func main\n  compute, 3\n  return\nend";
        assert_eq!(parse_module(text).unwrap(), parse_module(spaced).unwrap());
    }

    #[test]
    fn missing_end_is_an_error() {
        let e = parse_module("func main\n  return\n").unwrap_err();
        assert!(e.msg.contains("missing 'end'"), "{}", e);
    }

    #[test]
    fn bad_register_reported_with_line() {
        let e = parse_module("func main\n  addrof o x31\nend\n").unwrap_err();
        assert_eq!(e.line, 2);
    }
}
