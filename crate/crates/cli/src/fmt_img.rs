//! Text format for program images. Grammar in docs/formats.md.
//!
//! Every instruction form of the machine has exactly one spelling, so
//! emit ∘ parse and parse ∘ emit are identities.

use pacsim_core::isa::{Instruction, KeyHalf, Operand, PairMode};
use pacsim_core::key::KeyClass;
use pacsim_core::mem::PagePerms;
use pacsim_core::program::{CodeSection, DataSection, Image, SigningTableEntry};

use crate::fmt_ir::ParseError;

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, msg: msg.into() })
}

fn parse_u64(tok: &str, line: usize) -> Result<u64, ParseError> {
    let (neg, body) = match tok.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, tok),
    };
    let v = if let Some(hex) = body.strip_prefix("0x") {
        u64::from_str_radix(hex, 16)
    } else {
        body.parse()
    }
    .map_err(|_| ParseError { line, msg: format!("bad number '{}'", tok) })?;
    if neg {
        Ok((v as i64).wrapping_neg() as u64)
    } else {
        Ok(v)
    }
}

fn parse_i64(tok: &str, line: usize) -> Result<i64, ParseError> {
    parse_u64(tok, line).map(|v| v as i64)
}

fn parse_reg(tok: &str, line: usize) -> Result<u8, ParseError> {
    match tok.strip_prefix('x').and_then(|n| n.parse::<u8>().ok()) {
        Some(r) if (r as usize) < pacsim_core::isa::NUM_GPRS => Ok(r),
        _ => err(line, format!("bad register '{}'", tok)),
    }
}

fn parse_operand(tok: &str, line: usize) -> Result<Operand, ParseError> {
    if tok == "sp" {
        Ok(Operand::Sp)
    } else {
        parse_reg(tok, line).map(Operand::X)
    }
}

fn operand(op: Operand) -> String {
    match op {
        Operand::Sp => "sp".to_string(),
        Operand::X(r) => format!("x{}", r),
    }
}

fn key_name(class: KeyClass) -> &'static str {
    match class {
        KeyClass::Ia => "ia",
        KeyClass::Ib => "ib",
        KeyClass::Da => "da",
        KeyClass::Db => "db",
        KeyClass::Ga => "ga",
    }
}

fn parse_key(tok: &str, line: usize) -> Result<KeyClass, ParseError> {
    match tok {
        "ia" => Ok(KeyClass::Ia),
        "ib" => Ok(KeyClass::Ib),
        "da" => Ok(KeyClass::Da),
        "db" => Ok(KeyClass::Db),
        "ga" => Ok(KeyClass::Ga),
        other => err(line, format!("unknown key class '{}'", other)),
    }
}

/// System-register name for one half of a key register pair.
fn key_reg(class: KeyClass, half: KeyHalf) -> String {
    let c = match class {
        KeyClass::Ia => "APIAKEY",
        KeyClass::Ib => "APIBKEY",
        KeyClass::Da => "APDAKEY",
        KeyClass::Db => "APDBKEY",
        KeyClass::Ga => "APGAKEY",
    };
    let h = match half {
        KeyHalf::Hi => "HI",
        KeyHalf::Lo => "LO",
    };
    format!("{}{}_EL1", c, h)
}

fn parse_key_reg(tok: &str, line: usize) -> Result<(KeyClass, KeyHalf), ParseError> {
    let body = tok
        .strip_prefix("AP")
        .and_then(|s| s.strip_suffix("_EL1"))
        .ok_or_else(|| ParseError { line, msg: format!("bad key register '{}'", tok) })?;
    let (class_name, half_name) = body.split_at(body.len().saturating_sub(2));
    let class = match class_name {
        "IAKEY" => KeyClass::Ia,
        "IBKEY" => KeyClass::Ib,
        "DAKEY" => KeyClass::Da,
        "DBKEY" => KeyClass::Db,
        "GAKEY" => KeyClass::Ga,
        _ => return err(line, format!("bad key register '{}'", tok)),
    };
    let half = match half_name {
        "HI" => KeyHalf::Hi,
        "LO" => KeyHalf::Lo,
        _ => return err(line, format!("bad key register '{}'", tok)),
    };
    Ok((class, half))
}

/// Parse a pair memory operand from the final tokens:
/// `[base off]` | `[base off]!` | `[base] off`.
fn parse_pair_addr(
    toks: &[&str],
    line: usize,
) -> Result<(Operand, i64, PairMode), ParseError> {
    if toks.len() != 2 {
        return err(line, "expected memory operand");
    }
    if let Some(base) = toks[0].strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
        // Post-index: [base] off
        return Ok((parse_operand(base, line)?, parse_i64(toks[1], line)?, PairMode::PostIndex));
    }
    let base = toks[0]
        .strip_prefix('[')
        .ok_or_else(|| ParseError { line, msg: "expected '[base'".into() })?;
    if let Some(off) = toks[1].strip_suffix("]!") {
        Ok((parse_operand(base, line)?, parse_i64(off, line)?, PairMode::PreIndex))
    } else if let Some(off) = toks[1].strip_suffix(']') {
        Ok((parse_operand(base, line)?, parse_i64(off, line)?, PairMode::Offset))
    } else {
        err(line, "unterminated memory operand")
    }
}

fn pair_addr(base: Operand, offset: i64, mode: PairMode) -> String {
    match mode {
        PairMode::Offset => format!("[{}, {}]", operand(base), offset),
        PairMode::PreIndex => format!("[{}, {}]!", operand(base), offset),
        PairMode::PostIndex => format!("[{}], {}", operand(base), offset),
    }
}

pub fn emit_instruction(ins: &Instruction) -> String {
    use Instruction::*;
    match ins {
        Nop => "nop".to_string(),
        Movz { rd, imm, shift } => format!("movz x{}, {:#06x}, lsl {}", rd, imm, 16 * shift),
        Movk { rd, imm, shift } => format!("movk x{}, {:#06x}, lsl {}", rd, imm, 16 * shift),
        Mov { rd, rn } => format!("mov x{}, {}", rd, operand(*rn)),
        Adr { rd, addr } => format!("adr x{}, {:#018x}", rd, addr),
        Bfi { rd, rn, lsb, width } => format!("bfi x{}, x{}, {}, {}", rd, rn, lsb, width),
        AddImm { rd, rn, imm } => format!("add {}, {}, {}", operand(*rd), operand(*rn), imm),
        Ldr { rt, base, offset } => format!("ldr x{}, [{}, {}]", rt, operand(*base), offset),
        Str { rt, base, offset } => format!("str x{}, [{}, {}]", rt, operand(*base), offset),
        Stp { rt1, rt2, base, offset, mode } => {
            format!("stp x{}, x{}, {}", rt1, rt2, pair_addr(*base, *offset, *mode))
        }
        Ldp { rt1, rt2, base, offset, mode } => {
            format!("ldp x{}, x{}, {}", rt1, rt2, pair_addr(*base, *offset, *mode))
        }
        Pac { key, rd, modifier } => format!("pac{} x{}, {}", key_name(*key), rd, operand(*modifier)),
        Aut { key, rd, modifier } => format!("aut{} x{}, {}", key_name(*key), rd, operand(*modifier)),
        Pacib1716 => "pacib1716".to_string(),
        Autib1716 => "autib1716".to_string(),
        Xpaci { rd } => format!("xpaci x{}", rd),
        Xpacd { rd } => format!("xpacd x{}", rd),
        Bl { target } => format!("bl {:#018x}", target),
        B { target } => format!("b {:#018x}", target),
        Blr { rn } => format!("blr x{}", rn),
        Blrab { rn, modifier } => format!("blrab x{}, {}", rn, operand(*modifier)),
        Ret => "ret".to_string(),
        Svc { imm } => format!("svc {}", imm),
        Eret => "eret".to_string(),
        MsrKey { class, half, rn } => format!("msr {}, x{}", key_reg(*class, *half), rn),
        MrsKey { rd, class, half } => format!("mrs x{}, {}", rd, key_reg(*class, *half)),
        MsrPacCtl { bits } => format!("msr PACCTL_EL1, {:#x}", bits),
        Brk { imm } => format!("brk {}", imm),
        Hlt => "hlt".to_string(),
    }
}

fn shift_field(tok: &str, lsl: &str, line: usize) -> Result<u8, ParseError> {
    if lsl != "lsl" {
        return err(line, format!("expected 'lsl', got '{}'", lsl));
    }
    let bits = parse_u64(tok, line)?;
    if bits % 16 != 0 || bits > 48 {
        return err(line, format!("bad shift {}", bits));
    }
    Ok((bits / 16) as u8)
}

pub fn parse_instruction(src: &str, line: usize) -> Result<Instruction, ParseError> {
    let cleaned = src.replace(',', " ");
    let t: Vec<&str> = cleaned.split_whitespace().collect();
    if t.is_empty() {
        return err(line, "empty instruction");
    }
    use Instruction::*;
    let ins = match (t[0], t.len()) {
        ("nop", 1) => Nop,
        ("movz", 5) => Movz {
            rd: parse_reg(t[1], line)?,
            imm: parse_u64(t[2], line)? as u16,
            shift: shift_field(t[4], t[3], line)?,
        },
        ("movk", 5) => Movk {
            rd: parse_reg(t[1], line)?,
            imm: parse_u64(t[2], line)? as u16,
            shift: shift_field(t[4], t[3], line)?,
        },
        ("mov", 3) => Mov { rd: parse_reg(t[1], line)?, rn: parse_operand(t[2], line)? },
        ("adr", 3) => Adr { rd: parse_reg(t[1], line)?, addr: parse_u64(t[2], line)? },
        ("bfi", 5) => Bfi {
            rd: parse_reg(t[1], line)?,
            rn: parse_reg(t[2], line)?,
            lsb: parse_u64(t[3], line)? as u8,
            width: parse_u64(t[4], line)? as u8,
        },
        ("add", 4) => AddImm {
            rd: parse_operand(t[1], line)?,
            rn: parse_operand(t[2], line)?,
            imm: parse_i64(t[3], line)?,
        },
        ("ldr", 4) | ("str", 4) => {
            let (base, offset, mode) = parse_pair_addr(&t[2..], line)?;
            if mode != PairMode::Offset {
                return err(line, "ldr/str take a plain [base, off] operand");
            }
            let rt = parse_reg(t[1], line)?;
            if t[0] == "ldr" {
                Ldr { rt, base, offset }
            } else {
                Str { rt, base, offset }
            }
        }
        ("stp", 5) | ("ldp", 5) => {
            let (base, offset, mode) = parse_pair_addr(&t[3..], line)?;
            let (rt1, rt2) = (parse_reg(t[1], line)?, parse_reg(t[2], line)?);
            if t[0] == "stp" {
                Stp { rt1, rt2, base, offset, mode }
            } else {
                Ldp { rt1, rt2, base, offset, mode }
            }
        }
        ("pacib1716", 1) => Pacib1716,
        ("autib1716", 1) => Autib1716,
        ("xpaci", 2) => Xpaci { rd: parse_reg(t[1], line)? },
        ("xpacd", 2) => Xpacd { rd: parse_reg(t[1], line)? },
        ("bl", 2) => Bl { target: parse_u64(t[1], line)? },
        ("b", 2) => B { target: parse_u64(t[1], line)? },
        ("blr", 2) => Blr { rn: parse_reg(t[1], line)? },
        ("blrab", 3) => Blrab { rn: parse_reg(t[1], line)?, modifier: parse_operand(t[2], line)? },
        ("ret", 1) => Ret,
        ("svc", 2) => Svc { imm: parse_u64(t[1], line)? as u16 },
        ("eret", 1) => Eret,
        ("msr", 3) if t[1] == "PACCTL_EL1" => MsrPacCtl { bits: parse_u64(t[2], line)? as u8 },
        ("msr", 3) => {
            let (class, half) = parse_key_reg(t[1], line)?;
            MsrKey { class, half, rn: parse_reg(t[2], line)? }
        }
        ("mrs", 3) => {
            let (class, half) = parse_key_reg(t[2], line)?;
            MrsKey { rd: parse_reg(t[1], line)?, class, half }
        }
        ("brk", 2) => Brk { imm: parse_u64(t[1], line)? as u16 },
        ("hlt", 1) => Hlt,
        (mn, _) if mn.starts_with("pac") && t.len() == 3 => Pac {
            key: parse_key(&mn[3..], line)?,
            rd: parse_reg(t[1], line)?,
            modifier: parse_operand(t[2], line)?,
        },
        (mn, _) if mn.starts_with("aut") && t.len() == 3 => Aut {
            key: parse_key(&mn[3..], line)?,
            rd: parse_reg(t[1], line)?,
            modifier: parse_operand(t[2], line)?,
        },
        (mn, _) => return err(line, format!("bad instruction '{}'", mn)),
    };
    Ok(ins)
}

fn perms_name(p: PagePerms) -> &'static str {
    match p {
        PagePerms::ReadOnly => "ro",
        PagePerms::ReadWrite => "rw",
        PagePerms::ReadExecute => "rx",
        PagePerms::ExecuteOnly => "xo",
    }
}

fn parse_perms(tok: &str, line: usize) -> Result<PagePerms, ParseError> {
    match tok {
        "ro" => Ok(PagePerms::ReadOnly),
        "rw" => Ok(PagePerms::ReadWrite),
        "rx" => Ok(PagePerms::ReadExecute),
        "xo" => Ok(PagePerms::ExecuteOnly),
        other => err(line, format!("bad permissions '{}'", other)),
    }
}

pub fn emit_image(image: &Image) -> String {
    let mut out = String::from("image\n");
    out += &format!("entry {:#018x}\n", image.entry);
    if let Some(ks) = image.key_setter {
        out += &format!("keysetter {:#018x}\n", ks);
    }
    for s in &image.code {
        out += &format!("section code {} {:#018x} {}\n", s.name, s.base, perms_name(s.perms));
        for ins in &s.instrs {
            out += &format!("  {}\n", emit_instruction(ins));
        }
        out += "end\n";
    }
    for s in &image.data {
        out += &format!("section data {} {:#018x} {}\n", s.name, s.base, perms_name(s.perms));
        for w in &s.words {
            out += &format!("  word {:#018x}\n", w);
        }
        out += "end\n";
    }
    for e in &image.signing_table {
        out += &format!(
            "sign {:#018x} {} {:#06x} {}\n",
            e.location, key_name(e.key_class), e.const16, e.member_offset
        );
    }
    for (name, addr) in &image.symbols {
        out += &format!("symbol {} {:#018x}\n", name, addr);
    }
    out
}

enum Section {
    Code(CodeSection),
    Data(DataSection),
}

pub fn parse_image(src: &str) -> Result<Image, ParseError> {
    let mut lines = src.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.split('#').next().unwrap_or("").trim() == "image" => {}
        _ => return err(1, "expected 'image' header"),
    }
    let mut image = Image::default();
    let mut current: Option<Section> = None;
    for (i, raw) in lines {
        let line = i + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        if let Some(section) = current.as_mut() {
            if stripped == "end" {
                match current.take().unwrap() {
                    Section::Code(s) => image.code.push(s),
                    Section::Data(s) => image.data.push(s),
                }
                continue;
            }
            match section {
                Section::Code(s) => s.instrs.push(parse_instruction(stripped, line)?),
                Section::Data(s) => {
                    let t: Vec<&str> = stripped.split_whitespace().collect();
                    if t.len() != 2 || t[0] != "word" {
                        return err(line, "expected 'word <value>'");
                    }
                    s.words.push(parse_u64(t[1], line)?);
                }
            }
            continue;
        }
        let t: Vec<&str> = stripped.split_whitespace().collect();
        match (t[0], t.len()) {
            ("entry", 2) => image.entry = parse_u64(t[1], line)?,
            ("keysetter", 2) => image.key_setter = Some(parse_u64(t[1], line)?),
            ("section", 5) if t[1] == "code" => {
                current = Some(Section::Code(CodeSection {
                    name: t[2].to_string(),
                    base: parse_u64(t[3], line)?,
                    perms: parse_perms(t[4], line)?,
                    instrs: Vec::new(),
                }));
            }
            ("section", 5) if t[1] == "data" => {
                current = Some(Section::Data(DataSection {
                    name: t[2].to_string(),
                    base: parse_u64(t[3], line)?,
                    perms: parse_perms(t[4], line)?,
                    words: Vec::new(),
                }));
            }
            ("sign", 5) => image.signing_table.push(SigningTableEntry {
                location: parse_u64(t[1], line)?,
                key_class: parse_key(t[2], line)?,
                const16: parse_u64(t[3], line)? as u16,
                member_offset: parse_u64(t[4], line)?,
            }),
            ("symbol", 3) => {
                image.symbols.insert(t[1].to_string(), parse_u64(t[2], line)?);
            }
            (other, _) => return err(line, format!("bad directive '{}'", other)),
        }
    }
    if current.is_some() {
        return err(src.lines().count(), "section missing 'end'");
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pacsim_core::harness::modules;
    use pacsim_core::instrument::{attach_key_setter, lower_module, TEXT_BASE};
    use pacsim_core::key::KeyBank;
    use pacsim_core::pauth::ModifierScheme;

    fn sample_image(scheme: ModifierScheme) -> Image {
        let mut image = lower_module(&modules::boot_callbacks(), scheme, TEXT_BASE)
            .unwrap()
            .image;
        let mut rng = pacsim_core::harness::seeded_rng(3);
        let keys = KeyBank::random(&mut rng);
        attach_key_setter(&mut image, &keys, &[KeyClass::Ib, KeyClass::Db]);
        image
    }

    fn images_equal(a: &Image, b: &Image) -> bool {
        emit_image(a) == emit_image(b)
    }

    #[test]
    fn lowered_images_round_trip() {
        for scheme in ModifierScheme::ALL {
            let img = sample_image(scheme);
            let text = emit_image(&img);
            let back = parse_image(&text).unwrap();
            assert!(images_equal(&img, &back), "round trip failed under {}", scheme.name());
        }
    }

    #[test]
    fn every_instruction_form_round_trips() {
        use Instruction::*;
        let forms = vec![
            Nop,
            Movz { rd: 1, imm: 0x4242, shift: 0 },
            Movk { rd: 2, imm: 0xbeef, shift: 3 },
            Mov { rd: 17, rn: Operand::Sp },
            Adr { rd: 16, addr: 0xffff_0000_0800_0040 },
            Bfi { rd: 16, rn: 17, lsb: 32, width: 32 },
            AddImm { rd: Operand::Sp, rn: Operand::Sp, imm: -32 },
            Ldr { rt: 8, base: Operand::X(0), offset: 40 },
            Str { rt: 8, base: Operand::Sp, offset: -8 },
            Stp { rt1: 29, rt2: 30, base: Operand::Sp, offset: -16, mode: PairMode::PreIndex },
            Ldp { rt1: 29, rt2: 30, base: Operand::Sp, offset: 16, mode: PairMode::PostIndex },
            Stp { rt1: 0, rt2: 1, base: Operand::X(2), offset: 8, mode: PairMode::Offset },
            Pac { key: KeyClass::Ib, rd: 30, modifier: Operand::X(16) },
            Aut { key: KeyClass::Db, rd: 8, modifier: Operand::X(9) },
            Pac { key: KeyClass::Ga, rd: 3, modifier: Operand::Sp },
            Pacib1716,
            Autib1716,
            Xpaci { rd: 8 },
            Xpacd { rd: 9 },
            Bl { target: 0xffff_0000_0800_0100 },
            B { target: 0xffff_0000_0800_0200 },
            Blr { rn: 8 },
            Blrab { rn: 8, modifier: Operand::X(9) },
            Ret,
            Svc { imm: 3 },
            Eret,
            MsrKey { class: KeyClass::Ib, half: KeyHalf::Hi, rn: 0 },
            MrsKey { rd: 1, class: KeyClass::Da, half: KeyHalf::Lo },
            MsrPacCtl { bits: 0xf },
            Brk { imm: 7 },
            Hlt,
        ];
        for ins in forms {
            let text = emit_instruction(&ins);
            let back = parse_instruction(&text, 1).unwrap();
            assert_eq!(back, ins, "spelling '{}'", text);
        }
    }

    #[test]
    fn unknown_mnemonic_rejected_with_line() {
        let text = "image\nsection code t 0x1000 rx\n  frobnicate x1\nend\n";
        let e = parse_image(text).unwrap_err();
        assert_eq!(e.line, 3);
    }
}
