use super::{FunctionDef, ProgramUnit, RegId, TypeId};

/// Program counter word followed by the parent frame pointer.
pub const FRAME_HEADER_SIZE: u32 = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub reg: RegId,
    pub offset: u32,
    pub ty: TypeId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub slots: Vec<Slot>,
    pub size: u32,
}

impl FrameLayout {
    pub fn slot(&self, reg: RegId) -> &Slot {
        &self.slots[reg.0 as usize]
    }
}

/// Header first, then one 8-byte aligned slot per register in declaration
/// order.
pub fn frame_layout(program: &ProgramUnit, f: &FunctionDef) -> FrameLayout {
    let mut offset = FRAME_HEADER_SIZE;
    let mut slots = Vec::with_capacity(f.regs.len());
    for (i, reg) in f.regs.iter().enumerate() {
        offset = offset.next_multiple_of(8);
        slots.push(Slot { reg: RegId(i as u32), offset, ty: reg.ty });
        offset += program.type_size(reg.ty);
    }
    FrameLayout { slots, size: offset.next_multiple_of(8) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mir::parse_program;

    fn layout_of(src: &str, func: &str) -> FrameLayout {
        let p = parse_program(src).unwrap();
        let f = p.func(p.func_by_name(func).unwrap());
        frame_layout(&p, f)
    }

    #[test]
    fn header_only() {
        let l = layout_of("fn @main() -> i32 { entry: ret i32 0 }", "main");
        assert_eq!(l.size, 16);
        assert!(l.slots.is_empty());
    }

    #[test]
    fn int_and_pointer() {
        let src = "fn @f(%a: i32, %p: ptr i8) -> i32 { entry: ret i32 0 }
                   fn @main() -> i32 { entry: ret i32 0 }";
        let l = layout_of(src, "f");
        let offsets: Vec<u32> = l.slots.iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![16, 24]);
        assert_eq!(l.size, 32);
    }

    #[test]
    fn three_bytes_are_padded() {
        // 16 + 3 slots, each aligned up to 8: 16, 24, 32; end 33 -> 40.
        let src = "fn @main() -> i32 {
                     reg %a: i8
                     reg %b: i8
                     reg %c: i8
                   entry: ret i32 0 }";
        let l = layout_of(src, "main");
        let offsets: Vec<u32> = l.slots.iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![16, 24, 32]);
        assert_eq!(l.size, 40);
    }
}
