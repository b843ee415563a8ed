use std::fmt::{self, Write};

use super::*;

fn operand(p: &ProgramUnit, o: &Operand) -> String {
    match o {
        Operand::Reg(_) => unreachable!("registers are printed with their function"),
        Operand::Imm(v) => v.to_string(),
        Operand::Null => "null".into(),
        Operand::Global(g) => format!("@{}", p.globals[g.0 as usize].name),
    }
}

fn quoted(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

pub(super) fn write_program(p: &ProgramUnit, out: &mut fmt::Formatter<'_>) -> fmt::Result {
    for t in &p.types {
        if let TypeDesc::Struct { name, size, fields } = t {
            let fields: Vec<String> =
                fields.iter().map(|f| format!("{}: {} @{}", f.name, p.type_name(f.ty), f.offset)).collect();
            writeln!(out, "type %{name} = struct {{ {} }} size {size}", fields.join(", "))?;
        }
    }
    for g in &p.globals {
        let init = match g.init {
            GlobalInit::Zero => "zero".to_string(),
            GlobalInit::Int(v) => v.to_string(),
            GlobalInit::Null => "null".to_string(),
        };
        write!(out, "global @{} : {} = {init}", g.name, p.type_name(g.ty))?;
        if let Some(v) = &g.var {
            write!(out, " !var({})", quoted(v))?;
        }
        writeln!(out)?;
    }
    for f in &p.functions {
        write_function(p, f, out)?;
    }
    Ok(())
}

fn write_function(p: &ProgramUnit, f: &FunctionDef, out: &mut fmt::Formatter<'_>) -> fmt::Result {
    let reg = |r: &RegId| format!("%{}", f.reg(*r).name);
    let opnd = |o: &Operand| match o {
        Operand::Reg(r) => reg(r),
        other => operand(p, other),
    };
    let var_annot = |r: &Register| r.var.as_ref().map(|v| format!(" !var({})", quoted(v))).unwrap_or_default();

    let params: Vec<String> = f
        .params()
        .map(|r| {
            let rr = f.reg(r);
            format!("%{}: {}{}", rr.name, p.type_name(rr.ty), var_annot(rr))
        })
        .collect();
    let ret = f.ret.map_or("void".to_string(), |t| p.type_name(t));
    write!(out, "fn @{}({}) -> {ret}", f.name, params.join(", "))?;
    if let Some(src) = f.src {
        write!(out, " !src({})", quoted(p.file_name(src)))?;
    }
    writeln!(out, " {{")?;
    for r in &f.regs[f.param_count as usize..] {
        writeln!(out, "  reg %{}: {}{}", r.name, p.type_name(r.ty), var_annot(r))?;
    }
    for b in &f.blocks {
        writeln!(out, "{}:", b.label)?;
        for ins in &b.instrs {
            let mut line = String::from("  ");
            let label = |id: &BlockId| f.blocks[id.0 as usize].label.clone();
            match &ins.op {
                Op::Const { ty, dst, value } => {
                    write!(line, "const {} {}, {}", p.type_name(*ty), reg(dst), opnd(value))?
                }
                Op::Bin { kind, ty, dst, a, b } => write!(
                    line,
                    "{} {} {}, {}, {}",
                    kind.mnemonic(),
                    p.type_name(*ty),
                    reg(dst),
                    opnd(a),
                    opnd(b)
                )?,
                Op::ICmp { rel, ty, dst, a, b } => write!(
                    line,
                    "icmp {} {} {}, {}, {}",
                    rel.mnemonic(),
                    p.type_name(*ty),
                    reg(dst),
                    opnd(a),
                    opnd(b)
                )?,
                Op::Alloca { dst, size } => write!(line, "alloca {}, {size}", reg(dst))?,
                Op::Malloc { dst, size } => write!(line, "malloc {}, {}", reg(dst), opnd(size))?,
                Op::Free { ptr } => write!(line, "free {}", opnd(ptr))?,
                Op::Load { ty, dst, ptr, offset } => {
                    write!(line, "load {} {}, {}, {offset}", p.type_name(*ty), reg(dst), opnd(ptr))?
                }
                Op::Store { ty, src, ptr, offset } => {
                    write!(line, "store {} {}, {}, {offset}", p.type_name(*ty), opnd(src), opnd(ptr))?
                }
                Op::PtrAdd { dst, ptr, index, stride, base } => {
                    write!(line, "ptradd {}, {}, {}, {stride}, {base}", reg(dst), opnd(ptr), opnd(index))?
                }
                Op::Br { target } => write!(line, "br {}", label(target))?,
                Op::CondBr { cond, then_to, else_to } => {
                    write!(line, "condbr {}, {}, {}", opnd(cond), label(then_to), label(else_to))?
                }
                Op::Call { dst, callee, args } => {
                    let args: Vec<String> = args.iter().map(opnd).collect();
                    let dst = dst.map(|d| format!("{}, ", reg(&d))).unwrap_or_default();
                    write!(line, "call {dst}@{}({})", p.func(*callee).name, args.join(", "))?
                }
                Op::Ret { value: Some((ty, v)) } => write!(line, "ret {} {}", p.type_name(*ty), opnd(v))?,
                Op::Ret { value: None } => line.push_str("ret"),
                Op::Choose { dst, total } => write!(line, "choose {}, {total}", reg(dst))?,
                Op::Interrupt => line.push_str("interrupt"),
                Op::Spawn { callee, arg } => {
                    let arg = arg.as_ref().map(opnd).unwrap_or_default();
                    write!(line, "spawn @{}({arg})", p.func(*callee).name)?
                }
                Op::Fault { message } => write!(line, "fault {}", quoted(message))?,
            }
            if let Some(loc) = ins.loc {
                if Some(loc.file) != f.src {
                    write!(line, " !src({})", quoted(p.file_name(loc.file)))?;
                }
                write!(line, " !line({})", loc.line)?;
            }
            writeln!(out, "{line}")?;
        }
    }
    writeln!(out, "}}")
}

#[cfg(test)]
mod tests {
    use crate::mir::parse_program;

    const SAMPLE: &str = r#"
        ; a bit of everything
        type %node = struct { v: i32 @0, next: ptr %node @8 } size 16
        type %pair = struct { a: [2 x i32] @0, n: ptr %node @8 } size 16
        global @count : i32 = -3 !var("count")
        global @head : ptr %node = null
        global @buf : [4 x i8] = zero

        fn @add(%a: i32 !var("a"), %b: i32) -> i32 !src("lib.c") {
        entry:
          add i32 %r, %a, %b !line(2)
          ret i32 %r !src("other.c") !line(9)
        }

        fn @worker(%p: ptr i32) -> void !src("w.c") {
          reg %tmp: i64 !var("tmp")
        top:
          load i32 %x, %p, 0 !line(1)
          icmp slt i32 %c, %x, 10
          condbr %c, more, done
        more:
          interrupt
          store i32 5, %p, 0
          br top
        done:
          ret
        }

        fn @main() -> i32 !src("main.c") {
        entry:
          alloca %p, 16 !var("pt") !line(3)
          malloc %m, 24
          ptradd %q, %m, 2, 8, 0
          ptradd %g, @count, 0, 0, 0
          const ptr %node %n, null
          call %s, @add(1, 2)
          spawn @worker(%p)
          choose %k, 3
          sdiv i32 %s, %s, %k
          free %m
          fault "boom \"quoted\""
        }
    "#;

    #[test]
    fn print_and_reparse_is_identical() {
        let p = parse_program(SAMPLE).unwrap();
        let text = p.to_string();
        let q = parse_program(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
        assert_eq!(p, q);
        assert_eq!(text, q.to_string());
    }
}
