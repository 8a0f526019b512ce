//! Shared kernel sources for integration tests.
#![allow(dead_code)]

use adjointc_core::ir::{self, IrModule};

/// Fig. 1 shape: `mag` is an O(N) Euclidean norm, `norm` divides each
/// element by `mag(in)` with the call inside the loop.
pub const NORM: &str = r#"
define f64 @mag(ptr %in readonly, i64 %n) {
entry:
  br head
head:
  %i = phi i64 [ 0, entry ], [ %i1, body ]
  %acc = phi f64 [ 0.0, entry ], [ %acc1, body ]
  %c = icmp slt i64 %i, %n
  condbr %c, body, done
body:
  %off = imul i64 %i, 8
  %p = ptradd %in, %off
  %v = load f64, %p !tbaa.double
  %sq = fmul f64 %v, %v
  %acc1 = fadd f64 %acc, %sq
  %i1 = iadd i64 %i, 1
  br head
done:
  %r = sqrt f64 %acc
  ret f64 %r
}

define void @norm(ptr %out noalias, ptr %in noalias readonly, i64 %n) {
entry:
  br head
head:
  %i = phi i64 [ 0, entry ], [ %i1, body ]
  %c = icmp slt i64 %i, %n
  condbr %c, body, done
body:
  %m = call f64 @mag(ptr %in, i64 %n)
  %off = imul i64 %i, 8
  %p = ptradd %in, %off
  %v = load f64, %p !tbaa.double
  %q = fdiv f64 %v, %m
  %po = ptradd %out, %off
  store f64 %q, %po !tbaa.double
  %i1 = iadd i64 %i, 1
  br head
done:
  ret void
}
"#;

pub const RELU3: &str = r#"
define f64 @relu3(f64 %x) {
entry:
  %cmp = fcmp ogt f64 %x, 0.0
  condbr %cmp, if.true, if.end
if.true:
  %call = pow f64 %x, 3.0
  br if.end
if.end:
  %res = phi f64 [ %call, if.true ], [ 0.0, entry ]
  ret f64 %res
}
"#;

/// Fig. 3: ten reads multiplied by the input array.
pub const SUM_READ: &str = r#"
define f64 @sum(ptr %x readonly) {
entry:
  br head
head:
  %i = phi i64 [ 0, entry ], [ %i1, body ]
  %acc = phi f64 [ 0.0, entry ], [ %acc1, body ]
  %c = icmp slt i64 %i, 10
  condbr %c, body, done
body:
  %r = read f64
  %off = imul i64 %i, 8
  %p = ptradd %x, %off
  %v = load f64, %p !tbaa.double
  %t = fmul f64 %r, %v
  %acc1 = fadd f64 %acc, %t
  %i1 = iadd i64 %i, 1
  br head
done:
  ret f64 %acc
}
"#;

/// Fig. 6 kernel: sum of x^i/i for i = 1..n.
pub const TAYLOR: &str = r#"
define f64 @taylor(f64 %x, i64 %n) {
entry:
  br head
head:
  %i = phi i64 [ 1, entry ], [ %i1, body ]
  %acc = phi f64 [ 0.0, entry ], [ %acc1, body ]
  %c = icmp sle i64 %i, %n
  condbr %c, body, done
body:
  %e = sitofp f64 %i
  %xi = pow f64 %x, %e
  %term = fdiv f64 %xi, %e
  %acc1 = fadd f64 %acc, %term
  %i1 = iadd i64 %i, 1
  br head
done:
  ret f64 %acc
}
"#;

pub fn module(src: &str) -> IrModule {
    let m = ir::parse(src).expect("kernel parses");
    let diags = ir::validate(&m);
    assert!(diags.is_empty(), "kernel fails validation: {diags:?}");
    m
}

/// Fig. 2: memcpy of an unknown 8-byte object; the double variant is
/// typed by a double-tagged caller.
pub const MEMCPY_DOUBLE: &str = r#"
define void @copy8(ptr %dst, ptr %src) {
entry:
  memcpy %dst, %src, 8
  ret void
}
define f64 @harness(ptr %a noalias, ptr %b noalias) {
entry:
  memcpy %a, %b, 8 !tbaa.double
  call void @copy8(ptr %a, ptr %b)
  %v = load f64, %a !tbaa.double
  ret f64 %v
}
"#;

/// Float variant: the same copy moves two 4-byte floats.
pub const MEMCPY_FLOAT: &str = r#"
define void @copy8(ptr %dst, ptr %src) {
entry:
  memcpy %dst, %src, 8
  ret void
}
define f32 @harness(ptr %a noalias, ptr %b noalias) {
entry:
  memcpy %a, %b, 8 !tbaa.float
  call void @copy8(ptr %a, ptr %b)
  %v = load f32, %a !tbaa.float
  ret f32 %v
}
"#;

/// Explicit Euler on du/dt = f(u) with the right-hand side passed as a
/// function value; @euler_decay takes the address of @decay.
pub const EULER: &str = r#"
define f64 @decay(f64 %u) {
entry:
  %r = fneg f64 %u
  ret f64 %r
}

define f64 @euler(ptr %rhs, f64 %u0, i64 %n, f64 %h) {
entry:
  br head
head:
  %k = phi i64 [ 0, entry ], [ %k1, body ]
  %u = phi f64 [ %u0, entry ], [ %u1, body ]
  %c = icmp slt i64 %k, %n
  condbr %c, body, done
body:
  %f = callind f64 %rhs(f64 %u)
  %du = fmul f64 %h, %f
  %u1 = fadd f64 %u, %du
  %k1 = iadd i64 %k, 1
  br head
done:
  ret f64 %u
}

define f64 @euler_decay(f64 %u0, i64 %n, f64 %h) {
entry:
  %r = call f64 @euler(ptr @decay, f64 %u0, i64 %n, f64 %h)
  ret f64 %r
}
"#;

/// Recursive out-of-place radix-2 FFT plus a spectral-energy harness.
/// The half size is recovered by a doubling search (there is no integer
/// division in the IR).
pub const FFT: &str = r#"
define void @fft(ptr %inre, ptr %inim, ptr %outre, ptr %outim, i64 %n, i64 %stride) {
entry:
  %base = icmp eq i64 %n, 1
  condbr %base, leaf, rec
leaf:
  %vr = load f64, %inre !tbaa.double
  %vi = load f64, %inim !tbaa.double
  store f64 %vr, %outre !tbaa.double
  store f64 %vi, %outim !tbaa.double
  br done
rec:
  br hloop
hloop:
  %h = phi i64 [ 1, rec ], [ %h1, hloop ]
  %dbl = imul i64 %h, 2
  %h1 = imul i64 %h, 2
  %small = icmp slt i64 %dbl, %n
  condbr %small, hloop, hdone
hdone:
  %bytes = imul i64 %h, 8
  %evre = alloc %bytes
  %evim = alloc %bytes
  %odre = alloc %bytes
  %odim = alloc %bytes
  %stride2 = imul i64 %stride, 2
  %sbytes = imul i64 %stride, 8
  %in2re = ptradd %inre, %sbytes
  %in2im = ptradd %inim, %sbytes
  call void @fft(ptr %inre, ptr %inim, ptr %evre, ptr %evim, i64 %h, i64 %stride2)
  call void @fft(ptr %in2re, ptr %in2im, ptr %odre, ptr %odim, i64 %h, i64 %stride2)
  br chead
chead:
  %k = phi i64 [ 0, hdone ], [ %k1, cbody ]
  %cc = icmp slt i64 %k, %h
  condbr %cc, cbody, cdone
cbody:
  %koff = imul i64 %k, 8
  %per = ptradd %evre, %koff
  %e_re = load f64, %per !tbaa.double
  %pei = ptradd %evim, %koff
  %e_im = load f64, %pei !tbaa.double
  %por = ptradd %odre, %koff
  %o_re = load f64, %por !tbaa.double
  %poi = ptradd %odim, %koff
  %o_im = load f64, %poi !tbaa.double
  %kf = sitofp f64 %k
  %nf = sitofp f64 %n
  %tau = fmul f64 -6.283185307179586, %kf
  %ang = fdiv f64 %tau, %nf
  %cw = cos f64 %ang
  %sw = sin f64 %ang
  %t1 = fmul f64 %cw, %o_re
  %t2 = fmul f64 %sw, %o_im
  %tre = fsub f64 %t1, %t2
  %t3 = fmul f64 %sw, %o_re
  %t4 = fmul f64 %cw, %o_im
  %tim = fadd f64 %t3, %t4
  %sumre = fadd f64 %e_re, %tre
  %sumim = fadd f64 %e_im, %tim
  %difre = fsub f64 %e_re, %tre
  %difim = fsub f64 %e_im, %tim
  %pout1 = ptradd %outre, %koff
  store f64 %sumre, %pout1 !tbaa.double
  %pouti1 = ptradd %outim, %koff
  store f64 %sumim, %pouti1 !tbaa.double
  %hoff = imul i64 %h, 8
  %upper = iadd i64 %koff, %hoff
  %pout2 = ptradd %outre, %upper
  store f64 %difre, %pout2 !tbaa.double
  %pouti2 = ptradd %outim, %upper
  store f64 %difim, %pouti2 !tbaa.double
  %k1 = iadd i64 %k, 1
  br chead
cdone:
  free %evre
  free %evim
  free %odre
  free %odim
  br done
done:
  ret void
}

define f64 @fft_energy(ptr %re noalias, ptr %im noalias, i64 %n) {
entry:
  %bytes = imul i64 %n, 8
  %outre = alloc %bytes
  %outim = alloc %bytes
  call void @fft(ptr %re, ptr %im, ptr %outre, ptr %outim, i64 %n, i64 1)
  br head
head:
  %k = phi i64 [ 0, entry ], [ %k1, body ]
  %acc = phi f64 [ 0.0, entry ], [ %acc1, body ]
  %c = icmp slt i64 %k, %n
  condbr %c, body, done
body:
  %off = imul i64 %k, 8
  %pr = ptradd %outre, %off
  %xr = load f64, %pr !tbaa.double
  %pi = ptradd %outim, %off
  %xi = load f64, %pi !tbaa.double
  %sr = fmul f64 %xr, %xr
  %si = fmul f64 %xi, %xi
  %s = fadd f64 %sr, %si
  %acc1 = fadd f64 %acc, %s
  %k1 = iadd i64 %k, 1
  br head
done:
  free %outre
  free %outim
  ret f64 %acc
}
"#;
