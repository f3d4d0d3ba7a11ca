//! Toy kernel IR: abstract function bodies, a protected-field registry and
//! static initializers. The instrumentation pass lowers this to machine
//! instructions under a modifier scheme.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

/// How a structure field is treated by the instrumentation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protection {
    /// Plain load/store.
    None,
    /// Pointer to an operations table (write-protected table, writable
    /// pointer to it).
    OpsPointer,
    /// Lone function pointer living in writable memory.
    WritableFnPtr,
    /// Non-control data pointer worth integrity protection.
    SensitiveData,
}

impl Protection {
    pub fn is_protected(self) -> bool {
        !matches!(self, Protection::None)
    }

    pub fn name(self) -> &'static str {
        match self {
            Protection::None => "none",
            Protection::OpsPointer => "ops-pointer",
            Protection::WritableFnPtr => "fn-ptr",
            Protection::SensitiveData => "sensitive",
        }
    }
}

/// Registry entry for one structure member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDef {
    pub type_name: String,
    pub member_name: String,
    /// 16-bit constant uniquely identifying (type, member).
    pub const16: u16,
    /// Byte offset inside the containing object; 8-byte aligned.
    pub offset: u64,
    pub protection: Protection,
}

/// One abstract operation in a function body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IrOp {
    /// Direct call to a named function.
    Call(String),
    /// Load the field through its accessor and branch to the result.
    IndirectCallViaField { object_reg: u8, field: u32 },
    Return,
    /// Store the value register into the field through its accessor.
    StoreField { object_reg: u8, field: u32, value_reg: u8 },
    /// Load the field through its accessor into the destination register.
    LoadField { object_reg: u8, field: u32, dest_reg: u8 },
    /// Materialize a static object's address into a register.
    AddrOf { object: String, dest_reg: u8 },
    /// `n` instructions of scheme-independent filler work.
    Compute(u32),
    /// Grow the stack frame by the given byte count.
    AllocStack(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrFunction {
    pub name: String,
    pub body: Vec<IrOp>,
}

/// A statically allocated data object, sized in 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrObject {
    pub name: String,
    pub words: u64,
}

/// Static initializer: at boot, `object.field` holds a pointer to `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticInit {
    pub object: String,
    pub field: u32,
    pub target: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IrModule {
    pub functions: Vec<IrFunction>,
    pub fields: BTreeMap<u32, FieldDef>,
    pub objects: Vec<IrObject>,
    pub inits: Vec<StaticInit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IrError {
    DuplicateFunction(String),
    DuplicateObject(String),
    DuplicateConst16 { const16: u16, fields: (u32, u32) },
    UnalignedOffset { field: u32, offset: u64 },
    UnknownField(u32),
    UnknownFunction(String),
    UnknownObject(String),
    UnprotectedInitField(u32),
    BadRegister(u8),
}

impl core::fmt::Display for IrError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            IrError::DuplicateFunction(n) => write!(f, "duplicate function '{}'", n),
            IrError::DuplicateObject(n) => write!(f, "duplicate object '{}'", n),
            IrError::DuplicateConst16 { const16, fields } => write!(
                f,
                "const16 {:#06x} shared by fields {} and {}",
                const16, fields.0, fields.1
            ),
            IrError::UnalignedOffset { field, offset } => {
                write!(f, "field {} offset {} not 8-byte aligned", field, offset)
            }
            IrError::UnknownField(id) => write!(f, "unknown field id {}", id),
            IrError::UnknownFunction(n) => write!(f, "unknown function '{}'", n),
            IrError::UnknownObject(n) => write!(f, "unknown object '{}'", n),
            IrError::UnprotectedInitField(id) => {
                write!(f, "static initializer targets unprotected field {}", id)
            }
            IrError::BadRegister(r) => write!(f, "register x{} out of range", r),
        }
    }
}

impl IrModule {
    pub fn function(&self, name: &str) -> Option<&IrFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// Structural validation: name and const16 uniqueness, offset
    /// alignment, referential integrity of bodies and initializers.
    pub fn validate(&self) -> Result<(), IrError> {
        let mut names = BTreeMap::new();
        for f in &self.functions {
            if names.insert(f.name.clone(), ()).is_some() {
                return Err(IrError::DuplicateFunction(f.name.clone()));
            }
        }
        let mut objs = BTreeMap::new();
        for o in &self.objects {
            if objs.insert(o.name.clone(), ()).is_some() {
                return Err(IrError::DuplicateObject(o.name.clone()));
            }
        }
        let mut consts: BTreeMap<u16, u32> = BTreeMap::new();
        for (&id, fd) in &self.fields {
            if fd.offset % 8 != 0 {
                return Err(IrError::UnalignedOffset { field: id, offset: fd.offset });
            }
            if let Some(&other) = consts.get(&fd.const16) {
                return Err(IrError::DuplicateConst16 {
                    const16: fd.const16,
                    fields: (other, id),
                });
            }
            consts.insert(fd.const16, id);
        }
        for f in &self.functions {
            for op in &f.body {
                match op {
                    IrOp::Call(n) => {
                        if !names.contains_key(n) {
                            return Err(IrError::UnknownFunction(n.clone()));
                        }
                    }
                    IrOp::IndirectCallViaField { object_reg, field } => {
                        self.check_reg(*object_reg)?;
                        self.check_field(*field)?;
                    }
                    IrOp::StoreField { object_reg, field, value_reg } => {
                        self.check_reg(*object_reg)?;
                        self.check_reg(*value_reg)?;
                        self.check_field(*field)?;
                    }
                    IrOp::LoadField { object_reg, field, dest_reg } => {
                        self.check_reg(*object_reg)?;
                        self.check_reg(*dest_reg)?;
                        self.check_field(*field)?;
                    }
                    IrOp::AddrOf { object, dest_reg } => {
                        self.check_reg(*dest_reg)?;
                        if !objs.contains_key(object) {
                            return Err(IrError::UnknownObject(object.clone()));
                        }
                    }
                    IrOp::Return | IrOp::Compute(_) | IrOp::AllocStack(_) => {}
                }
            }
        }
        for init in &self.inits {
            if !objs.contains_key(&init.object) {
                return Err(IrError::UnknownObject(init.object.clone()));
            }
            if !names.contains_key(&init.target) {
                return Err(IrError::UnknownFunction(init.target.clone()));
            }
            let fd = self.check_field(init.field)?;
            if !fd.protection.is_protected() {
                return Err(IrError::UnprotectedInitField(init.field));
            }
        }
        Ok(())
    }

    fn check_field(&self, id: u32) -> Result<&FieldDef, IrError> {
        self.fields.get(&id).ok_or(IrError::UnknownField(id))
    }

    fn check_reg(&self, r: u8) -> Result<(), IrError> {
        if (r as usize) < crate::isa::NUM_GPRS {
            Ok(())
        } else {
            Err(IrError::BadRegister(r))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn module() -> IrModule {
        let mut fields = BTreeMap::new();
        fields.insert(
            1,
            FieldDef {
                type_name: "file".to_string(),
                member_name: "f_ops".to_string(),
                const16: 0xfb45,
                offset: 40,
                protection: Protection::OpsPointer,
            },
        );
        IrModule {
            functions: vec![
                IrFunction { name: "main".to_string(), body: vec![IrOp::Return] },
                IrFunction { name: "read".to_string(), body: vec![IrOp::Return] },
            ],
            fields,
            objects: vec![IrObject { name: "file0".to_string(), words: 8 }],
            inits: vec![StaticInit { object: "file0".to_string(), field: 1, target: "read".to_string() }],
        }
    }

    #[test]
    fn valid_module_passes() {
        module().validate().unwrap();
    }

    #[test]
    fn duplicate_const16_rejected() {
        let mut m = module();
        m.fields.insert(
            2,
            FieldDef {
                type_name: "file".to_string(),
                member_name: "f_other".to_string(),
                const16: 0xfb45,
                offset: 48,
                protection: Protection::None,
            },
        );
        assert!(matches!(m.validate(), Err(IrError::DuplicateConst16 { .. })));
    }

    #[test]
    fn unaligned_offset_rejected() {
        let mut m = module();
        m.fields.get_mut(&1).unwrap().offset = 12;
        assert!(matches!(m.validate(), Err(IrError::UnalignedOffset { .. })));
    }

    #[test]
    fn unknown_call_target_rejected() {
        let mut m = module();
        m.functions[0].body = vec![IrOp::Call("missing".to_string()), IrOp::Return];
        assert!(matches!(m.validate(), Err(IrError::UnknownFunction(_))));
    }

    #[test]
    fn init_of_unprotected_field_rejected() {
        let mut m = module();
        m.fields.get_mut(&1).unwrap().protection = Protection::None;
        assert!(matches!(m.validate(), Err(IrError::UnprotectedInitField(1))));
    }
}
