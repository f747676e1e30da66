//! Named parameter traversal shared by the optimizer, gradient checker and
//! tensor-file serialization.
//!
//! Every parameter container exposes its tensors in a fixed order through
//! [`ParamSet::visit`]. Gradient containers reuse the parameter types, so two
//! containers of the same type always flatten to aligned vectors.

use ndarray::{Array, Dimension};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Updated by the optimizer.
    Trainable,
    /// Part of the model but held fixed (frozen backbone weights).
    Frozen,
    /// Non-learned state such as batch-norm running statistics.
    Buffer,
}

/// Callback receiving `(name, shape, values, role)` for each tensor.
pub type Visitor<'a> = dyn FnMut(&str, &[usize], &[f64], Role) + 'a;
pub type VisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f64], Role) + 'a;

pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_array<D: Dimension>(
    f: &mut Visitor<'_>,
    prefix: &str,
    name: &str,
    a: &Array<f64, D>,
    role: Role,
) {
    let data = a.as_slice().expect("parameters are stored in standard layout");
    f(&join(prefix, name), a.shape(), data, role);
}

pub(crate) fn visit_array_mut<D: Dimension>(
    f: &mut VisitorMut<'_>,
    prefix: &str,
    name: &str,
    a: &mut Array<f64, D>,
    role: Role,
) {
    let shape = a.shape().to_vec();
    let data = a
        .as_slice_mut()
        .expect("parameters are stored in standard layout");
    f(&join(prefix, name), &shape, data, role);
}

pub(crate) fn visit_scalar(
    f: &mut Visitor<'_>,
    prefix: &str,
    name: &str,
    v: &f64,
    role: Role,
) {
    f(&join(prefix, name), &[1], std::slice::from_ref(v), role);
}

pub(crate) fn visit_scalar_mut(
    f: &mut VisitorMut<'_>,
    prefix: &str,
    name: &str,
    v: &mut f64,
    role: Role,
) {
    f(&join(prefix, name), &[1], std::slice::from_mut(v), role);
}

/// Total number of scalar values, including buffers.
pub fn value_count(p: &dyn ParamSet) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, d, _| n += d.len());
    n
}

pub fn to_flat(p: &dyn ParamSet) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, d, _| out.extend_from_slice(d));
    out
}

pub fn load_flat(p: &mut dyn ParamSet, flat: &[f64]) {
    let mut off = 0;
    p.visit_mut("", &mut |_, _, d, _| {
        d.copy_from_slice(&flat[off..off + d.len()]);
        off += d.len();
    });
    assert_eq!(off, flat.len(), "flat vector length does not match parameter set");
}

/// Per-value roles in flattening order.
pub fn roles(p: &dyn ParamSet) -> Vec<Role> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, d, r| out.extend(std::iter::repeat_n(r, d.len())));
    out
}

/// (name, offset, len, role) for every tensor in flattening order.
pub fn layout(p: &dyn ParamSet) -> Vec<(String, usize, usize, Role)> {
    let mut out = Vec::new();
    let mut off = 0;
    p.visit("", &mut |name, _, d, r| {
        out.push((name.to_string(), off, d.len(), r));
        off += d.len();
    });
    out
}

pub fn fill(p: &mut dyn ParamSet, value: f64) {
    p.visit_mut("", &mut |_, _, d, _| d.iter_mut().for_each(|x| *x = value));
}

pub fn zeros_like<T: ParamSet + Clone>(p: &T) -> T {
    let mut z = p.clone();
    fill(&mut z, 0.0);
    z
}
