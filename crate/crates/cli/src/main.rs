//! Command-line front end: scenario runs, image verification, security
//! analyses, cost benchmarks and ad-hoc pointer signing.
//!
//! Exit codes: 0 success / expected outcome; 1 negative finding (verifier
//! violation, outcome mismatch, failed authentication); 2 usage or parse
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pacsim::fmt_img::{emit_image, parse_image};
use pacsim::fmt_ir::parse_module;
use pacsim::fmt_scn::{
    builtin_module, parse_outcome_kind, parse_scenario, resolve_attacks, ModuleRef,
};
use pacsim::out::{hex64, Format, Sink};
use pacsim_core::harness::{
    self, forgery_rate, overhead_report, random_stack_bases, replay_matrix, run_scenario,
    AttackScenario, Callsite, OutcomeKind, DEFAULT_MAX_STEPS,
};
use pacsim_core::instrument::{attach_key_setter, lower_module, verify_image, LinkMap, TEXT_BASE};
use pacsim_core::ir::IrModule;
use pacsim_core::key::{KeyBank, KeyClass, PacControl};
use pacsim_core::machine::MachineConfig;
use pacsim_core::pac::QarmaMac;
use pacsim_core::pauth::{self, ModifierScheme};
use pacsim_core::pointer::PointerLayout;
use pacsim_core::program::Image;

/// A failure with the exit status it maps to.
struct Failure {
    status: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { status: 2, msg: msg.into() }
}

fn finding(msg: impl Into<String>) -> Failure {
    Failure { status: 1, msg: msg.into() }
}

type CmdResult = Result<u8, Failure>;

fn parse_scheme(s: &str) -> Result<ModifierScheme, String> {
    ModifierScheme::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| {
            format!(
                "unknown scheme '{}' (expected one of: {})",
                s,
                ModifierScheme::ALL.map(|m| m.name()).join(", ")
            )
        })
}

fn parse_key_class(s: &str) -> Result<KeyClass, String> {
    match s {
        "ia" => Ok(KeyClass::Ia),
        "ib" => Ok(KeyClass::Ib),
        "da" => Ok(KeyClass::Da),
        "db" => Ok(KeyClass::Db),
        "ga" => Ok(KeyClass::Ga),
        other => Err(format!("unknown key class '{}' (expected ia|ib|da|db|ga)", other)),
    }
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(body, 16).map_err(|_| format!("bad hex value '{}'", s))
}

#[derive(Parser)]
#[command(
    name = "pacsim",
    version,
    about = "Pointer-authentication simulator: run attack scenarios, verify \
             images, analyze modifier schemes and benchmark instrumentation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Return-address modifier scheme.
    #[arg(long, global = true, default_value = "proposed", value_parser = parse_scheme)]
    scheme: ModifierScheme,
    /// Seed for all randomness (keys, analyzer trials).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Virtual address width in bits.
    #[arg(long, global = true, default_value_t = 48)]
    va_bits: u32,
    /// Reserve the top byte of user pointers for tags.
    #[arg(long, global = true)]
    tbi_user: bool,
    /// Reserve the top byte of kernel pointers for tags.
    #[arg(long, global = true)]
    tbi_kernel: bool,
    /// Consecutive kernel authentication failures before the machine halts.
    #[arg(long, global = true, default_value_t = 8)]
    threshold: u32,
    /// Model a core without the pointer-authentication extension.
    #[arg(long, global = true)]
    pre83: bool,
    /// Output format.
    #[arg(long, global = true, default_value = "text")]
    format: Format,
}

impl Common {
    fn layout(&self) -> Result<PointerLayout, Failure> {
        PointerLayout::new(self.va_bits, self.tbi_user, self.tbi_kernel)
            .map_err(|e| usage(format!("bad pointer layout: {:?}", e)))
    }

    fn machine_config(&self) -> Result<MachineConfig, Failure> {
        Ok(MachineConfig {
            layout: self.layout()?,
            fault_threshold: self.threshold,
            pre_83: self.pre83,
            ..MachineConfig::default()
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an attack scenario file and classify the outcome.
    Run {
        /// Scenario file (sectioned key=value; see docs/formats.md).
        file: PathBuf,
        /// Override the scenario's expected outcome.
        #[arg(long)]
        expect: Option<String>,
        /// Also emit the execution trace.
        #[arg(long)]
        trace: bool,
    },
    /// Statically verify an image (or a lowered IR module) for key hygiene.
    Verify {
        /// `.img` program image or `.ir` module (lowered with --scheme).
        file: PathBuf,
        /// Write the (lowered) image text here.
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Security analyses of the modifier schemes.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Cycle-cost comparison of the instrumentation schemes.
    Bench {
        /// IR module to measure; defaults to the built-in benchmark.
        file: Option<PathBuf>,
        /// Comma-separated scheme list, or 'all'.
        #[arg(long, default_value = "all")]
        schemes: String,
    },
    /// Sign, authenticate or strip a single pointer.
    Pac {
        #[command(subcommand)]
        op: PacCmd,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Monte-Carlo acceptance rate of random PAC guesses.
    Forgery {
        /// PAC widths to test.
        #[arg(long, value_delimiter = ',', default_value = "4,8,12")]
        bits: Vec<u32>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
    },
    /// Cross-thread modifier collision rates.
    Collision {
        #[arg(long, default_value_t = 8)]
        threads: usize,
        #[arg(long, default_value_t = 4)]
        callsites: usize,
        /// Force consecutive stack bases exactly this many bytes apart
        /// (default: random placement).
        #[arg(long)]
        spacing: Option<u64>,
    },
    /// Replay attack matrix: scheme x reuse class.
    Replay {
        /// Comma-separated scheme list, or 'all'.
        #[arg(long, default_value = "all")]
        schemes: String,
    },
}

#[derive(Subcommand)]
enum PacCmd {
    Sign {
        #[arg(long, value_parser = parse_key_class)]
        key: KeyClass,
        #[arg(long, value_parser = parse_hex)]
        ptr: u64,
        #[arg(long = "modifier", value_parser = parse_hex)]
        modifier: u64,
    },
    Auth {
        #[arg(long, value_parser = parse_key_class)]
        key: KeyClass,
        #[arg(long, value_parser = parse_hex)]
        ptr: u64,
        #[arg(long = "modifier", value_parser = parse_hex)]
        modifier: u64,
    },
    Strip {
        #[arg(long, value_parser = parse_hex)]
        ptr: u64,
    },
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

fn scheme_list(spec: &str) -> Result<Vec<ModifierScheme>, Failure> {
    if spec == "all" {
        return Ok(ModifierScheme::ALL.to_vec());
    }
    spec.split(',')
        .map(|s| parse_scheme(s.trim()).map_err(usage))
        .collect()
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {}", path.display(), e)))
}

fn load_module(path: &Path) -> Result<IrModule, Failure> {
    let src = read_file(path)?;
    let module = parse_module(&src)
        .map_err(|e| usage(format!("{}: {}", path.display(), e)))?;
    module
        .validate()
        .map_err(|e| usage(format!("{}: {}", path.display(), e)))?;
    Ok(module)
}

fn lower(module: &IrModule, scheme: ModifierScheme) -> Result<(Image, LinkMap), Failure> {
    let lowered = lower_module(module, scheme, TEXT_BASE)
        .map_err(|e| usage(format!("lowering failed: {}", e)))?;
    Ok((lowered.image, lowered.link))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(
    common: &Common,
    file: &Path,
    expect: Option<&str>,
    trace: bool,
    sink: &mut Sink,
) -> CmdResult {
    let spec = parse_scenario(&read_file(file)?)
        .map_err(|e| usage(format!("{}: {}", file.display(), e)))?;
    let module = match &spec.module {
        ModuleRef::Builtin(name) => builtin_module(name).expect("validated during parse"),
        ModuleRef::Path(rel) => {
            let base = file.parent().unwrap_or(Path::new("."));
            load_module(&base.join(rel))?
        }
    };
    let (image, link) = lower(&module, common.scheme)?;
    let actions = resolve_attacks(&spec, &image, &link, common.scheme)
        .map_err(|e| usage(format!("{}: {}", file.display(), e)))?;
    let expected = match expect {
        Some(tok) => Some(
            parse_outcome_kind(tok).ok_or_else(|| usage(format!("unknown outcome '{}'", tok)))?,
        ),
        None => spec.expected,
    };
    let scenario = AttackScenario {
        name: spec.name.clone(),
        image,
        cfg: common.machine_config()?,
        seed: common.seed,
        entry: spec.entry.clone(),
        actions,
        expected,
        max_steps: spec.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
    };
    let result = run_scenario(&scenario).map_err(|e| usage(format!("run failed: {}", e)))?;
    if trace {
        for e in &result.trace {
            sink.row(
                format!(
                    "trace step {:>5} pc {} cycles {:>3} {:?}",
                    e.step,
                    hex64(e.pc),
                    e.cycles,
                    e.kind
                ),
                json!({
                    "type": "trace",
                    "step": e.step,
                    "pc": hex64(e.pc),
                    "cycles": e.cycles,
                    "kind": format!("{:?}", e.kind),
                }),
            );
        }
    }
    let matched = expected.map(|k| k == result.outcome.kind());
    let verdict = match matched {
        Some(true) => format!(" (expected {}: match)", expected.unwrap().name()),
        Some(false) => format!(" (expected {}: MISMATCH)", expected.unwrap().name()),
        None => String::new(),
    };
    sink.row(
        format!(
            "scenario {} [{}]: {} — {}{}",
            spec.name,
            common.scheme.name(),
            result.outcome.kind().name(),
            result.outcome.describe(),
            verdict
        ),
        json!({
            "type": "run",
            "scenario": spec.name,
            "scheme": common.scheme.name(),
            "seed": common.seed,
            "outcome": result.outcome.kind().name(),
            "detail": result.outcome.describe(),
            "expected": expected.map(|k| k.name()),
            "match": matched,
        }),
    );
    Ok(match matched {
        Some(true) => 0,
        Some(false) => 1,
        None => match result.outcome.kind() {
            OutcomeKind::Hijacked | OutcomeKind::Rejected | OutcomeKind::Error => 1,
            _ => 0,
        },
    })
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify(
    common: &Common,
    file: &Path,
    emit: Option<&Path>,
    sink: &mut Sink,
) -> CmdResult {
    let mut image = if file.extension().is_some_and(|e| e == "img") {
        parse_image(&read_file(file)?)
            .map_err(|e| usage(format!("{}: {}", file.display(), e)))?
    } else {
        let module = load_module(file)?;
        lower(&module, common.scheme)?.0
    };
    // Mirror what a boot does: the setter page contents are part of the
    // image the verifier must accept.
    if image.key_setter.is_some() && !image.code.iter().any(|s| s.name == "key_setter") {
        let mut rng = harness::seeded_rng(common.seed);
        let keys = KeyBank::random(&mut rng);
        attach_key_setter(&mut image, &keys, &common.machine_config()?.kernel_key_classes);
    }
    if let Some(path) = emit {
        std::fs::write(path, emit_image(&image))
            .map_err(|e| usage(format!("cannot write {}: {}", path.display(), e)))?;
    }
    match verify_image(&image) {
        Ok(()) => {
            sink.row(
                format!("verify {}: ok", file.display()),
                json!({"type": "verify", "file": file.display().to_string(), "ok": true, "violations": 0}),
            );
            Ok(0)
        }
        Err(mut report) => {
            report.sort_by_key(|v| v.addr);
            for v in &report {
                sink.row(
                    format!("violation at {}: {}", hex64(v.addr), v.reason),
                    json!({"type": "violation", "addr": hex64(v.addr), "reason": v.reason}),
                );
            }
            sink.row(
                format!("verify {}: rejected ({} violations)", file.display(), report.len()),
                json!({"type": "verify", "file": file.display().to_string(), "ok": false, "violations": report.len()}),
            );
            Ok(1)
        }
    }
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

fn cmd_forgery(common: &Common, bits: &[u32], trials: u64, sink: &mut Sink) -> CmdResult {
    let mut bits = bits.to_vec();
    bits.sort_unstable();
    bits.dedup();
    let mut status = 0;
    for b in bits {
        let r = forgery_rate(b, trials, common.seed)
            .map_err(|e| usage(format!("forgery analysis: {}", e)))?;
        // Agreement with theory, under the binomial sigma of the theoretical
        // rate.
        let sigma = (r.expected * (1.0 - r.expected) / trials as f64).sqrt();
        let within = (r.rate - r.expected).abs() <= 3.0 * sigma;
        if !within {
            status = 1;
        }
        sink.row(
            format!(
                "forgery pac_bits {:>2}: accepted {:>6}/{} rate {:.6} expected {:.6} ci95 [{:.6}, {:.6}]{}",
                r.pac_bits,
                r.accepted,
                r.trials,
                r.rate,
                r.expected,
                r.ci_low,
                r.ci_high,
                if within { "" } else { "  OUTSIDE 3-SIGMA" }
            ),
            json!({
                "type": "forgery",
                "pac_bits": r.pac_bits,
                "trials": r.trials,
                "accepted": r.accepted,
                "rate": r.rate,
                "expected": r.expected,
                "std_err": r.std_err,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "within_3_sigma": within,
                "seed": common.seed,
            }),
        );
    }
    Ok(status)
}

fn cmd_collision(
    common: &Common,
    threads: usize,
    callsites: usize,
    spacing: Option<u64>,
    sink: &mut Sink,
) -> CmdResult {
    let bases = match spacing {
        Some(s) => {
            if s % 4096 != 0 {
                return Err(usage(format!("spacing {} not a multiple of 4096", s)));
            }
            let base = 0xffff_0000_4000_0000u64;
            (0..threads as u64).map(|i| base + i * s).collect::<Vec<_>>()
        }
        None => random_stack_bases(threads, common.seed),
    };
    let sites: Vec<Callsite> = (0..callsites as u64)
        .map(|i| Callsite {
            func_addr: TEXT_BASE + i * 0x40,
            func_id: i + 1,
            frame_offset: 16 * (i + 1),
        })
        .collect();
    for scheme in ModifierScheme::ALL {
        let r = harness::collision_rate(scheme, &bases, &sites)
            .map_err(|e| usage(format!("collision analysis: {}", e)))?;
        sink.row(
            format!(
                "collision {:<12} pairs {:>6} collisions {:>6} rate {:.6}",
                scheme.name(),
                r.pairs_total,
                r.collisions,
                r.rate
            ),
            json!({
                "type": "collision",
                "scheme": scheme.name(),
                "threads": threads,
                "callsites": callsites,
                "spacing": spacing,
                "pairs": r.pairs_total,
                "collisions": r.collisions,
                "rate": r.rate,
                "seed": common.seed,
            }),
        );
    }
    Ok(0)
}

fn cmd_replay(common: &Common, schemes: &str, sink: &mut Sink) -> CmdResult {
    let schemes = scheme_list(schemes)?;
    let cells = replay_matrix(&schemes, common.seed)
        .map_err(|e| usage(format!("replay analysis: {}", e)))?;
    sink.note(format!(
        "replay matrix (seed {}): scheme x reuse class -> does a harvested signature replay?",
        common.seed
    ));
    for cell in cells {
        sink.row(
            format!(
                "replay {:<12} {:<24} {}",
                cell.scheme.name(),
                cell.class.name(),
                cell.outcome.name()
            ),
            json!({
                "type": "replay",
                "scheme": cell.scheme.name(),
                "class": cell.class.name(),
                "outcome": cell.outcome.name(),
                "seed": common.seed,
            }),
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(
    common: &Common,
    file: Option<&Path>,
    schemes: &str,
    sink: &mut Sink,
) -> CmdResult {
    let module = match file {
        Some(p) => load_module(p)?,
        None => harness::modules::bench(),
    };
    let schemes = scheme_list(schemes)?;
    let cfg = common.machine_config()?;
    let report = overhead_report(&module, &schemes, &cfg, common.seed).map_err(|e| match e {
        harness::HarnessError::RunFailed { .. } => finding(format!("bench: {}", e)),
        other => usage(format!("bench: {}", other)),
    })?;
    sink.note("scheme         cycles  instructions  calls  per-call delta");
    for r in &report.rows {
        sink.row(
            format!(
                "{:<12} {:>8} {:>13} {:>6} {:>15.2}",
                r.scheme.name(),
                r.cycles,
                r.instructions,
                r.calls,
                r.per_call_delta
            ),
            json!({
                "type": "bench",
                "scheme": r.scheme.name(),
                "cycles": r.cycles,
                "instructions": r.instructions,
                "calls": r.calls,
                "per_call_delta": r.per_call_delta,
                "seed": common.seed,
            }),
        );
    }
    sink.row(
        format!("syscall key-switch cycles: {}", report.syscall_key_cycles),
        json!({"type": "syscall-keys", "cycles": report.syscall_key_cycles}),
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// pac
// ---------------------------------------------------------------------------

fn cmd_pac(common: &Common, op: &PacCmd, sink: &mut Sink) -> CmdResult {
    let layout = common.layout()?;
    let mac = QarmaMac::default();
    let mut rng = harness::seeded_rng(common.seed);
    let bank = KeyBank::random(&mut rng);
    let ctl = PacControl::ALL_ENABLED;
    match op {
        PacCmd::Sign { key, ptr, modifier } => {
            let signed = pauth::exec_pac(&mac, &bank, &ctl, *key, *ptr, *modifier, &layout)
                .map_err(|e| usage(format!("sign failed: {:?}", e)))?;
            sink.row(
                format!(
                    "sign {} ptr {} modifier {} -> {}",
                    key_name(*key),
                    hex64(*ptr),
                    hex64(*modifier),
                    hex64(signed)
                ),
                json!({
                    "type": "pac",
                    "op": "sign",
                    "key": key_name(*key),
                    "ptr": hex64(*ptr),
                    "modifier": hex64(*modifier),
                    "result": hex64(signed),
                    "seed": common.seed,
                }),
            );
            Ok(0)
        }
        PacCmd::Auth { key, ptr, modifier } => {
            let r = pauth::exec_aut(&mac, &bank, &ctl, *key, *ptr, *modifier, &layout);
            sink.row(
                format!(
                    "auth {} ptr {} modifier {} -> {} ({})",
                    key_name(*key),
                    hex64(*ptr),
                    hex64(*modifier),
                    hex64(r.pointer),
                    if r.failed { "FAILED" } else { "ok" }
                ),
                json!({
                    "type": "pac",
                    "op": "auth",
                    "key": key_name(*key),
                    "ptr": hex64(*ptr),
                    "modifier": hex64(*modifier),
                    "result": hex64(r.pointer),
                    "ok": !r.failed,
                    "seed": common.seed,
                }),
            );
            Ok(if r.failed { 1 } else { 0 })
        }
        PacCmd::Strip { ptr } => {
            let stripped = pauth::exec_xpac(*ptr, &layout);
            sink.row(
                format!("strip ptr {} -> {}", hex64(*ptr), hex64(stripped)),
                json!({
                    "type": "pac",
                    "op": "strip",
                    "ptr": hex64(*ptr),
                    "result": hex64(stripped),
                }),
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut sink = Sink::new(cli.common.format);
    let result = match &cli.cmd {
        Cmd::Run { file, expect, trace } => {
            cmd_run(&cli.common, file, expect.as_deref(), *trace, &mut sink)
        }
        Cmd::Verify { file, emit } => {
            cmd_verify(&cli.common, file, emit.as_deref(), &mut sink)
        }
        Cmd::Analyze { what } => match what {
            AnalyzeCmd::Forgery { bits, trials } => {
                cmd_forgery(&cli.common, bits, *trials, &mut sink)
            }
            AnalyzeCmd::Collision { threads, callsites, spacing } => {
                cmd_collision(&cli.common, *threads, *callsites, *spacing, &mut sink)
            }
            AnalyzeCmd::Replay { schemes } => cmd_replay(&cli.common, schemes, &mut sink),
        },
        Cmd::Bench { file, schemes } => {
            cmd_bench(&cli.common, file.as_deref(), schemes, &mut sink)
        }
        Cmd::Pac { op } => cmd_pac(&cli.common, op, &mut sink),
    };
    let status = match result {
        Ok(status) => status,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.status
        }
    };
    let mut stdout = std::io::stdout().lock();
    if sink.flush(&mut stdout).is_err() {
        return ExitCode::from(2);
    }
    ExitCode::from(status)
}
