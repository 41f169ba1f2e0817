//! Parallel, loop, and network composition of maps over named wires, plus
//! the Choi-level link product used as an independent oracle for loops.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::fock::{enumerate_basis, wire_partition, FockBasis, WireSpec};
use crate::linalg::{zeros, CMat};
use crate::qmap::{MapKind, QuantumMap, CONSTRUCT_TOL};
use crate::{Error, Result};

/// Pairs each listed output wire with an input wire of identical shape
/// (kind, dimension, positions) for loop composition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WireMatch {
    pub pairs: Vec<(String, String)>,
}

impl WireMatch {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        WireMatch { pairs }
    }

    pub fn by_name<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        WireMatch {
            pairs: names.into_iter().map(|n| (n.to_string(), n.to_string())).collect(),
        }
    }
}

/// Tensor product of two maps on disjoint wire sets. The combined bases keep
/// the shared message cap, so sectors whose total count overflows it are
/// dropped; when that loses weight from trace-preserving factors the result
/// is downgraded to subnormalised. Re-embed the factors at a larger cap when
/// the overflow sectors matter.
pub fn parallel(m1: &QuantumMap, m2: &QuantumMap) -> Result<QuantumMap> {
    if m1.in_basis.n_max() != m2.in_basis.n_max()
        || m1.out_basis.n_max() != m2.out_basis.n_max()
    {
        return Err(Error::input("parallel factors must share the message caps"));
    }
    let merged_in = enumerate_basis(
        [m1.in_basis.wires(), m2.in_basis.wires()].concat(),
        m1.in_basis.n_max(),
    )?;
    let merged_out = enumerate_basis(
        [m1.out_basis.wires(), m2.out_basis.wires()].concat(),
        m1.out_basis.n_max(),
    )?;
    let names_in: Vec<&str> = m1.in_basis.wires().iter().map(|w| w.name.as_str()).collect();
    let names_out: Vec<&str> = m1.out_basis.wires().iter().map(|w| w.name.as_str()).collect();
    let pi = wire_partition(&merged_in, &names_in)?;
    let po = wire_partition(&merged_out, &names_out)?;
    debug_assert_eq!(pi.inside.dim(), m1.din());
    debug_assert_eq!(pi.outside.dim(), m2.din());
    let mut kraus = Vec::with_capacity(m1.kraus.len() * m2.kraus.len());
    for k1 in &m1.kraus {
        for k2 in &m2.kraus {
            let mut m = zeros(merged_out.dim(), merged_in.dim());
            for fo in 0..merged_out.dim() {
                let (o1, o2) = po.pairs[fo];
                for fi in 0..merged_in.dim() {
                    let (i1, i2) = pi.pairs[fi];
                    m[(fo, fi)] = k1[(o1, i1)] * k2[(o2, i2)];
                }
            }
            kraus.push(m);
        }
    }
    // The untruncated tensor stack inherits the trace condition of its
    // factors exactly, and restricting to the shared cap only removes rows,
    // so Σ K†K falls short of the exact Gram matrix by a positive
    // semidefinite term. A positive matrix with vanishing diagonal vanishes,
    // hence the column norms alone decide whether any weight was lost.
    let kind = if m1.kind == MapKind::Normalised
        && m2.kind == MapKind::Normalised
        && column_norm_defect(&kraus) <= CONSTRUCT_TOL
    {
        MapKind::Normalised
    } else {
        MapKind::Subnormalised
    };
    Ok(QuantumMap::from_kraus_trusted(merged_in, merged_out, kraus, kind))
}

/// Largest deviation of Σ_k ‖K_k e_v‖² from one over the input basis states.
fn column_norm_defect(kraus: &[CMat]) -> f64 {
    let din = kraus.first().map_or(0, |k| k.ncols());
    let mut worst = 0.0f64;
    for v in 0..din {
        let mut s = 0.0;
        for k in kraus {
            s += k.column(v).iter().map(|x| x.norm_sqr()).sum::<f64>();
        }
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

/// Validates the Kraus set at the requested kind, accepting a pure trace
/// loss (cap truncation) as a downgrade to subnormalised but still rejecting
/// trace gain.
fn build_with_truncation_fallback(
    in_basis: FockBasis,
    out_basis: FockBasis,
    kraus: Vec<CMat>,
    kind: MapKind,
) -> Result<QuantumMap> {
    if kind == MapKind::Normalised {
        match QuantumMap::from_kraus(in_basis.clone(), out_basis.clone(), kraus.clone(), kind) {
            Ok(m) => return Ok(m),
            Err(Error::Input(msg)) if msg.contains("not trace-preserving") => {}
            Err(e) => return Err(e),
        }
    }
    QuantumMap::from_kraus(in_basis, out_basis, kraus, MapKind::Subnormalised)
}

/// Tensor product of any number of maps, folded left to right.
pub fn parallel_all(maps: &[&QuantumMap]) -> Result<QuantumMap> {
    let (first, rest) = maps.split_first().ok_or_else(|| Error::input("nothing to compose"))?;
    let mut acc = (*first).clone();
    for m in rest {
        acc = parallel(&acc, m)?;
    }
    Ok(acc)
}

/// Feeds each matched output wire back into its paired input wire. The
/// matched wires must have identical shapes; physical validity (the feedback
/// must be grounded in a causal slicing of the map) is certified post hoc by
/// the trace condition of the result, so an ill-founded loop is rejected
/// rather than silently diverging.
pub fn loop_compose(map: &QuantumMap, wires: &WireMatch) -> Result<QuantumMap> {
    let out_names: Vec<&str> = wires.pairs.iter().map(|(o, _)| o.as_str()).collect();
    let in_names: Vec<&str> = wires.pairs.iter().map(|(_, i)| i.as_str()).collect();
    for (o, i) in &wires.pairs {
        let wo = &map.out_basis.wires()[map.out_basis.wire_index(o)?];
        let wi = &map.in_basis.wires()[map.in_basis.wire_index(i)?];
        if wo.kind != wi.kind || wo.dim != wi.dim || wo.positions != wi.positions {
            return Err(Error::input(format!(
                "matched wires {o:?} and {i:?} differ in shape"
            )));
        }
    }
    if map.in_basis.n_max() != map.out_basis.n_max() {
        return Err(Error::input("loop composition needs equal message caps"));
    }
    let so = wire_partition(&map.out_basis, &out_names)?;
    let si = wire_partition(&map.in_basis, &in_names)?;
    // The matched halves have identical wire shapes in identical order, so
    // their enumerations coincide index by index.
    debug_assert_eq!(so.inside.dim(), si.inside.dim());
    let d_loop = si.inside.dim();
    let d_rest_in = si.outside.dim();
    let mut full_in = vec![usize::MAX; d_loop * d_rest_in];
    for (fi, &(s, r)) in si.pairs.iter().enumerate() {
        full_in[s * d_rest_in + r] = fi;
    }
    let mut kraus = Vec::with_capacity(map.kraus.len());
    for k in &map.kraus {
        let mut m = zeros(so.outside.dim(), d_rest_in);
        for fo in 0..map.dout() {
            let (s, ro) = so.pairs[fo];
            for ci in 0..d_rest_in {
                let fi = full_in[s * d_rest_in + ci];
                if fi != usize::MAX {
                    m[(ro, ci)] += k[(fo, fi)];
                }
            }
        }
        kraus.push(m);
    }
    build_with_truncation_fallback(si.outside, so.outside, kraus, map.kind)
        .map_err(|e| match e {
            Error::Input(msg) if msg.contains("increases trace") => Error::precondition(format!(
                "loop composition is not admissible on the matched wires ({msg}); no compatible slicing grounds the feedback"
            )),
            other => other,
        })
        .map(|m| m.reduced_if_cheap())
}

/// Tensors all maps and loops every wire name that appears both as an output
/// and as an input. Requires globally unambiguous names: each name at most
/// once among the inputs and at most once among the outputs. The result is
/// independent of the listing order; its wires are sorted by name.
pub fn full_loop(maps: &[&QuantumMap]) -> Result<QuantumMap> {
    let mut in_names = HashSet::new();
    let mut out_names = HashSet::new();
    for m in maps {
        for w in m.in_basis.wires() {
            if !in_names.insert(w.name.clone()) {
                return Err(Error::input(format!(
                    "wire {:?} appears as an input twice; the network is ambiguous",
                    w.name
                )));
            }
        }
        for w in m.out_basis.wires() {
            if !out_names.insert(w.name.clone()) {
                return Err(Error::input(format!(
                    "wire {:?} appears as an output twice; the network is ambiguous",
                    w.name
                )));
            }
        }
    }
    let tensor = parallel_all(maps)?;
    let mut matched: Vec<&str> = out_names
        .intersection(&in_names)
        .map(|s| s.as_str())
        .filter(|n| {
            let wi = tensor.out_basis.wire_index(n).expect("matched wire");
            !tensor.out_basis.wires()[wi].is_trivial()
        })
        .collect();
    matched.sort_unstable();
    let looped = if matched.is_empty() {
        tensor
    } else {
        loop_compose(&tensor, &WireMatch::by_name(matched))?
    };
    sort_wires(&looped)
}

/// Re-enumerates both bases with wires sorted by name and permutes the Kraus
/// matrices accordingly, giving a listing-order-independent canonical form.
fn sort_wires(map: &QuantumMap) -> Result<QuantumMap> {
    let sorted = |b: &FockBasis| -> Vec<String> {
        let mut ns: Vec<String> = b.wires().iter().map(|w| w.name.clone()).collect();
        ns.sort();
        ns
    };
    with_wire_order(map, &sorted(&map.in_basis), &sorted(&map.out_basis))
}

/// Rebuilds the map over bases listing the same wires in the given orders.
pub fn with_wire_order(
    map: &QuantumMap,
    in_names: &[impl AsRef<str>],
    out_names: &[impl AsRef<str>],
) -> Result<QuantumMap> {
    let reorder = |b: &FockBasis, names: &[&str]| -> Result<Vec<WireSpec>> {
        if names.len() != b.wires().len() {
            return Err(Error::input("wire order must list every wire exactly once"));
        }
        names
            .iter()
            .map(|n| Ok(b.wires()[b.wire_index(n)?].clone()))
            .collect()
    };
    let in_names: Vec<&str> = in_names.iter().map(|n| n.as_ref()).collect();
    let out_names: Vec<&str> = out_names.iter().map(|n| n.as_ref()).collect();
    let in2 = enumerate_basis(reorder(&map.in_basis, &in_names)?, map.in_basis.n_max())?;
    let out2 = enumerate_basis(reorder(&map.out_basis, &out_names)?, map.out_basis.n_max())?;
    let ident = |n: &str, l: usize, p: usize| (n.to_string(), l, p);
    let mi = map.in_basis.relabel_into(&in2, ident)?;
    let mo = map.out_basis.relabel_into(&out2, ident)?;
    let mut kraus = Vec::with_capacity(map.kraus.len());
    for k in &map.kraus {
        let mut m = zeros(out2.dim(), in2.dim());
        for r in 0..k.nrows() {
            for c in 0..k.ncols() {
                m[(mo[r], mi[c])] = k[(r, c)];
            }
        }
        kraus.push(m);
    }
    QuantumMap::from_kraus(in2, out2, kraus, map.kind)
}

/// A matrix over an ordered list of named tensor factors; rows and columns
/// share the layout, with the first factor as the most significant digit.
#[derive(Clone, Debug)]
pub struct LabeledChoi {
    pub systems: Vec<(String, usize)>,
    pub matrix: CMat,
}

impl LabeledChoi {
    pub fn new(systems: Vec<(String, usize)>, matrix: CMat) -> Result<Self> {
        let total: usize = systems.iter().map(|(_, d)| d).product();
        if matrix.nrows() != total || matrix.ncols() != total {
            return Err(Error::input(format!(
                "matrix is {}x{} but the factors multiply to {total}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let mut seen = HashSet::new();
        for (n, d) in &systems {
            if *d == 0 {
                return Err(Error::input(format!("factor {n:?} has dimension 0")));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::input(format!("factor {n:?} listed twice")));
            }
        }
        Ok(LabeledChoi { systems, matrix })
    }

    pub fn dim(&self) -> usize {
        self.systems.iter().map(|(_, d)| d).product()
    }

    fn digits_of(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.systems.len()];
        for (k, (_, d)) in self.systems.iter().enumerate().rev() {
            out[k] = idx % d;
            idx /= d;
        }
        out
    }

    /// Reorders the tensor factors.
    pub fn permuted(&self, order: &[&str]) -> Result<LabeledChoi> {
        if order.len() != self.systems.len() {
            return Err(Error::input("permutation must list every factor"));
        }
        let mut perm = Vec::with_capacity(order.len());
        for n in order {
            let k = self
                .systems
                .iter()
                .position(|(s, _)| s == n)
                .ok_or_else(|| Error::input(format!("no factor named {n:?}")))?;
            perm.push(k);
        }
        let systems: Vec<(String, usize)> = perm.iter().map(|&k| self.systems[k].clone()).collect();
        let strides = strides_of(&systems);
        let d = self.dim();
        let mut index_map = vec![0usize; d];
        for idx in 0..d {
            let digits = self.digits_of(idx);
            index_map[idx] = perm.iter().zip(&strides).map(|(&k, &s)| digits[k] * s).sum();
        }
        let mut m = zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                m[(index_map[r], index_map[c])] = self.matrix[(r, c)];
            }
        }
        LabeledChoi::new(systems, m)
    }
}

fn strides_of(systems: &[(String, usize)]) -> Vec<usize> {
    let mut strides = vec![1usize; systems.len()];
    for k in (0..systems.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * systems[k + 1].1;
    }
    strides
}

/// The Choi matrix of a map between register-only bases, with one named
/// factor per register (outputs first, then inputs). Requires globally
/// unique register names across the two bases.
pub fn labeled_choi(map: &QuantumMap) -> Result<LabeledChoi> {
    for b in [&map.out_basis, &map.in_basis] {
        if b.fock_dim() != 1 {
            return Err(Error::input(
                "labelled Choi factors exist only for register-only bases",
            ));
        }
    }
    let mut systems = Vec::new();
    for b in [&map.out_basis, &map.in_basis] {
        for &rw in b.reg_wires() {
            let w = &b.wires()[rw];
            systems.push((w.name.clone(), w.dim));
        }
    }
    LabeledChoi::new(systems, map.choi()?)
}

/// Contracts pairs of factors within one labelled matrix: both members of a
/// pair are set to the same digit on the row side and summed, likewise on
/// the column side. Contracting the Choi factors of a matched output/input
/// wire pair reproduces the Choi matrix of the loop composition.
pub fn self_link(a: &LabeledChoi, pairs: &[(String, String)]) -> Result<LabeledChoi> {
    let mut contracted = HashSet::new();
    let mut pair_dims = Vec::with_capacity(pairs.len());
    for (p, q) in pairs {
        let dp = find_dim(a, p)?;
        let dq = find_dim(a, q)?;
        if dp != dq {
            return Err(Error::input(format!("paired factors {p:?} and {q:?} differ in dimension")));
        }
        for n in [p, q] {
            if !contracted.insert(n.as_str()) {
                return Err(Error::input(format!("factor {n:?} contracted twice")));
            }
        }
        pair_dims.push(dp);
    }
    let rest: Vec<(String, usize)> = a
        .systems
        .iter()
        .filter(|(n, _)| !contracted.contains(n.as_str()))
        .cloned()
        .collect();
    let d_s: usize = pair_dims.iter().product();
    let d_r: usize = rest.iter().map(|(_, d)| d).product();
    // tab[s·d_r + r] = flat index of a with the pair digits set to s and the
    // remaining digits set to r.
    let mut tab = vec![0usize; d_s * d_r];
    let pair_strides = strides_of(
        &pairs.iter().zip(&pair_dims).map(|((p, _), &d)| (p.clone(), d)).collect::<Vec<_>>(),
    );
    let rest_strides = strides_of(&rest);
    for idx in 0..a.dim() {
        let digits = a.digits_of(idx);
        let mut s = 0usize;
        let mut r = 0usize;
        let mut consistent = true;
        for ((p, q), stride) in pairs.iter().zip(&pair_strides) {
            let dp = digits[a.systems.iter().position(|(n, _)| n == p).unwrap()];
            let dq = digits[a.systems.iter().position(|(n, _)| n == q).unwrap()];
            if dp != dq {
                consistent = false;
                break;
            }
            s += dp * stride;
        }
        if !consistent {
            continue;
        }
        let mut ri = 0;
        for (k, (n, _)) in a.systems.iter().enumerate() {
            if !contracted.contains(n.as_str()) {
                r += digits[k] * rest_strides[ri];
                ri += 1;
            }
        }
        tab[s * d_r + r] = idx;
    }
    let mut m = zeros(d_r, d_r);
    for s in 0..d_s {
        for sp in 0..d_s {
            for r in 0..d_r {
                for c in 0..d_r {
                    m[(r, c)] += a.matrix[(tab[s * d_r + r], tab[sp * d_r + c])];
                }
            }
        }
    }
    LabeledChoi::new(rest, m)
}

fn find_dim(a: &LabeledChoi, name: &str) -> Result<usize> {
    a.systems
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, d)| *d)
        .ok_or_else(|| Error::input(format!("no factor named {name:?}")))
}

/// The link product: factors sharing a name are contracted (row digits
/// identified and summed, column digits likewise), composing the two
/// matrices along the shared subsystems. Remaining factors keep their order,
/// `a`'s first.
pub fn link_product(a: &LabeledChoi, b: &LabeledChoi) -> Result<LabeledChoi> {
    let mut shared: Vec<(String, usize)> = Vec::new();
    for (n, d) in &a.systems {
        if let Ok(db) = find_dim(b, n) {
            if db != *d {
                return Err(Error::input(format!("shared factor {n:?} differs in dimension")));
            }
            shared.push((n.clone(), *d));
        }
    }
    shared.sort_by(|x, y| x.0.cmp(&y.0));
    let shared_names: HashSet<&str> = shared.iter().map(|(n, _)| n.as_str()).collect();
    let rest_a: Vec<(String, usize)> =
        a.systems.iter().filter(|(n, _)| !shared_names.contains(n.as_str())).cloned().collect();
    let rest_b: Vec<(String, usize)> =
        b.systems.iter().filter(|(n, _)| !shared_names.contains(n.as_str())).cloned().collect();
    for (n, _) in &rest_a {
        if rest_b.iter().any(|(m, _)| m == n) {
            return Err(Error::input(format!("factor {n:?} would appear twice in the result")));
        }
    }
    let d_s: usize = shared.iter().map(|(_, d)| d).product();
    let d_ra: usize = rest_a.iter().map(|(_, d)| d).product();
    let d_rb: usize = rest_b.iter().map(|(_, d)| d).product();
    let tab_a = embed_table(a, &shared, &rest_a, d_s, d_ra)?;
    let tab_b = embed_table(b, &shared, &rest_b, d_s, d_rb)?;
    let mut systems = rest_a;
    systems.extend(rest_b);
    let d_res = d_ra * d_rb;
    let mut m = zeros(d_res, d_res);
    for s in 0..d_s {
        for sp in 0..d_s {
            for ra in 0..d_ra {
                for ca in 0..d_ra {
                    let x = a.matrix[(tab_a[s * d_ra + ra], tab_a[sp * d_ra + ca])];
                    if x.norm_sqr() < 1e-300 {
                        continue;
                    }
                    for rb in 0..d_rb {
                        for cb in 0..d_rb {
                            m[(ra * d_rb + rb, ca * d_rb + cb)] +=
                                x * b.matrix[(tab_b[s * d_rb + rb], tab_b[sp * d_rb + cb])];
                        }
                    }
                }
            }
        }
    }
    LabeledChoi::new(systems, m)
}

fn embed_table(
    x: &LabeledChoi,
    shared: &[(String, usize)],
    rest: &[(String, usize)],
    d_s: usize,
    d_r: usize,
) -> Result<Vec<usize>> {
    let shared_strides = strides_of(shared);
    let rest_strides = strides_of(rest);
    let mut tab = vec![0usize; d_s * d_r];
    for idx in 0..x.dim() {
        let digits = x.digits_of(idx);
        let mut s = 0usize;
        let mut r = 0usize;
        let mut ri = 0usize;
        for (k, (n, _)) in x.systems.iter().enumerate() {
            if let Some(j) = shared.iter().position(|(m, _)| m == n) {
                s += digits[k] * shared_strides[j];
            } else {
                r += digits[k] * rest_strides[ri];
                ri += 1;
            }
        }
        tab[s * d_r + r] = idx;
    }
    Ok(tab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{WireRole, WireSpec};
    use crate::linalg::{basis_vec, c, cr, frob_dist, kron, random_kraus, random_state, zeros};
    use crate::qmap::{choi_distance, maps_equal, second_quantisation, QuantumMap};
    use crate::linalg::random_unitary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fock_basis(specs: &[(&str, usize, Vec<usize>)], n_max: usize) -> FockBasis {
        enumerate_basis(
            specs
                .iter()
                .map(|(n, d, p)| WireSpec::fock(*n, *d, p.clone(), WireRole::AgentIn))
                .collect(),
            n_max,
        )
        .unwrap()
    }

    fn reg_basis(specs: &[(&str, usize, usize)]) -> FockBasis {
        enumerate_basis(
            specs
                .iter()
                .map(|(n, d, p)| WireSpec::register(*n, *d, *p, WireRole::AgentIn))
                .collect(),
            0,
        )
        .unwrap()
    }

    fn random_map(in_b: &FockBasis, out_b: &FockBasis, k: usize, rng: &mut ChaCha8Rng) -> QuantumMap {
        QuantumMap::from_kraus(
            in_b.clone(),
            out_b.clone(),
            random_kraus(out_b.dim(), in_b.dim(), k, rng),
            MapKind::Normalised,
        )
        .unwrap()
    }

    /// A message-count-preserving relay sending wire `a` to wire `b` through
    /// a random level unitary.
    fn relay(
        a: (&str, usize, usize),
        b: (&str, usize),
        n_max: usize,
        rng: &mut ChaCha8Rng,
    ) -> QuantumMap {
        let in_b = fock_basis(&[(a.0, a.1, vec![a.2])], n_max);
        let out_b = fock_basis(&[(b.0, a.1, vec![b.1])], n_max);
        let u = random_unitary(a.1, rng);
        let v = second_quantisation(&in_b, &out_b, &u).unwrap();
        QuantumMap::from_isometry(in_b, out_b, v).unwrap()
    }

    #[test]
    fn parallel_identity_and_kraus_counts() {
        let b1 = fock_basis(&[("a", 2, vec![0])], 2);
        let b2 = fock_basis(&[("b", 2, vec![1])], 2);
        let par = parallel(&QuantumMap::identity(&b1), &QuantumMap::identity(&b2)).unwrap();
        let merged = fock_basis(&[("a", 2, vec![0]), ("b", 2, vec![1])], 2);
        assert!(maps_equal(&par, &QuantumMap::identity(&merged), 1e-12).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m1 = random_map(&b1, &b1, 3, &mut rng);
        let m2 = random_map(&b2, &b2, 4, &mut rng);
        assert_eq!(parallel(&m1, &m2).unwrap().kraus.len(), 12);
    }

    #[test]
    fn parallel_matches_embedded_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let n_max = 1 + (trial % 2);
            let b1i = fock_basis(&[("a", 2, vec![0])], n_max);
            let b1o = fock_basis(&[("c", 2, vec![1])], n_max);
            let b2i = fock_basis(&[("b", 1 + trial % 3, vec![0])], n_max);
            let b2o = fock_basis(&[("d", 2, vec![2])], n_max);
            let m1 = random_map(&b1i, &b1o, 2, &mut rng);
            let m2 = random_map(&b2i, &b2o, 2, &mut rng);
            let par = parallel(&m1, &m2).unwrap();

            let embed = |split: &crate::fock::RegionSplit, d2: usize| {
                let mut e = zeros(split.pairs.len(), split.inside.dim() * d2);
                for (full, &(i1, i2)) in split.pairs.iter().enumerate() {
                    e[(full, i1 * d2 + i2)] = c(1.0, 0.0);
                }
                e
            };
            let pi = wire_partition(&par.in_basis, &["a"]).unwrap();
            let po = wire_partition(&par.out_basis, &["c"]).unwrap();
            let e_in = embed(&pi, m2.din());
            let e_out = embed(&po, m2.dout());
            let mut kraus: Vec<CMat> = Vec::new();
            for k1 in &m1.kraus {
                for k2 in &m2.kraus {
                    kraus.push(&e_out * kron(k1, k2) * e_in.adjoint());
                }
            }
            let oracle = QuantumMap::from_kraus(
                par.in_basis.clone(),
                par.out_basis.clone(),
                kraus,
                MapKind::Subnormalised,
            )
            .unwrap();
            assert!(choi_distance(&par, &oracle).unwrap() < 1e-9);
        }
    }

    #[test]
    fn sequential_chain_matches_direct_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..4 {
            let m1 = relay(("a", 2, 0), ("b", 1), 4, &mut rng);
            let m2 = relay(("b", 2, 1), ("c", 2), 4, &mut rng);
            let direct = m1.then(&m2).unwrap();
            let looped = full_loop(&[&m1, &m2]).unwrap();
            assert_eq!(looped.in_basis.wires()[0].name, "a");
            assert_eq!(looped.out_basis.wires()[0].name, "c");
            // Sectors fitting the cap alongside the looped leg are exact.
            let low: Vec<usize> = (0..m1.din())
                .filter(|&i| m1.in_basis.decode(i).0.len() <= 2)
                .collect();
            for _ in 0..5 {
                let mut rho = zeros(m1.din(), m1.din());
                let psi = random_state(low.len(), &mut rng);
                for (r, &ir) in low.iter().enumerate() {
                    for (s, &is) in low.iter().enumerate() {
                        rho[(ir, is)] = psi[r] * psi[s].conj();
                    }
                }
                assert!(frob_dist(&looped.apply(&rho), &direct.apply(&rho)) < 1e-9);
            }
            // Relays cut off above one message agree as whole maps.
            let cut = |m: &QuantumMap| {
                let proj = crate::fock::one_message_projector(
                    &m.out_basis,
                    &m.out_basis.wires()[0].name.clone(),
                    m.out_basis
                        .wires()[0]
                        .positions
                        .iter()
                        .fold(0, |acc, &p| acc | (1 << p)),
                )
                .unwrap();
                let mut vac = zeros(m.dout(), m.dout());
                vac[(0, 0)] = c(1.0, 0.0);
                let p = QuantumMap::from_kraus(
                    m.out_basis.clone(),
                    m.out_basis.clone(),
                    vec![proj.matrix + vac],
                    MapKind::Subnormalised,
                )
                .unwrap();
                m.then(&p).unwrap()
            };
            let c1 = cut(&m1);
            let c2 = cut(&m2);
            let want = c1.then(&c2).unwrap();
            let got = full_loop(&[&c1, &c2]).unwrap();
            assert!(maps_equal(&got, &want, 1e-9).unwrap());
        }
    }

    #[test]
    fn loop_feeds_prepared_state_and_rejects_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let in_b = reg_basis(&[("x", 2, 0), ("l", 3, 1)]);
        let out_b = reg_basis(&[("y", 4, 2), ("l", 3, 1)]);
        let l_ops = random_kraus(4, 6, 2, &mut rng);
        let phi = random_state(3, &mut rng);
        // Kraus of (x, l_in) -> y tensored with a fixed prepared state on the
        // fed-back register.
        let kraus: Vec<CMat> = l_ops
            .iter()
            .map(|l| {
                let mut k = zeros(12, 6);
                for yi in 0..4 {
                    for lo in 0..3 {
                        for col in 0..6 {
                            k[(yi * 3 + lo, col)] = l[(yi, col)] * phi[lo];
                        }
                    }
                }
                k
            })
            .collect();
        let map =
            QuantumMap::from_kraus(in_b.clone(), out_b, kraus, MapKind::Normalised).unwrap();
        let looped = loop_compose(&map, &WireMatch::by_name(["l"])).unwrap();
        let expected: Vec<CMat> = l_ops
            .iter()
            .map(|l| {
                let mut k = zeros(4, 2);
                for yi in 0..4 {
                    for xi in 0..2 {
                        for li in 0..3 {
                            k[(yi, xi)] += l[(yi, xi * 3 + li)] * phi[li];
                        }
                    }
                }
                k
            })
            .collect();
        let want = QuantumMap::from_kraus(
            reg_basis(&[("x", 2, 0)]),
            reg_basis(&[("y", 4, 2)]),
            expected,
            MapKind::Normalised,
        )
        .unwrap();
        assert!(maps_equal(&looped, &want, 1e-9).unwrap());

        let idb = reg_basis(&[("l", 3, 0)]);
        let ident = QuantumMap::identity(&idb);
        let err = loop_compose(&ident, &WireMatch::by_name(["l"])).unwrap_err();
        assert!(err.to_string().contains("no compatible slicing"), "{err}");
    }

    #[test]
    fn link_product_agrees_with_loop_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for trial in 0..10 {
            let dx = 2 + trial % 2;
            let dl = 2 + trial % 3;
            let dy = 2 + (trial + 1) % 2;
            let in_b = reg_basis(&[("x", dx, 0), ("li", dl, 1)]);
            let out_b = reg_basis(&[("y", dy, 2), ("lo", dl, 1)]);
            let l_ops = random_kraus(dy, dx * dl, 8, &mut rng);
            let phis: Vec<Vec<crate::linalg::C64>> = {
                let raw = [random_state(dl, &mut rng), random_state(dl, &mut rng)];
                raw.iter()
                    .map(|v| v.iter().map(|x| x * cr(0.5f64.sqrt())).collect())
                    .collect()
            };
            let mut kraus = Vec::new();
            for l in &l_ops {
                for phi in &phis {
                    let mut k = zeros(dy * dl, dx * dl);
                    for yi in 0..dy {
                        for lo in 0..dl {
                            for col in 0..dx * dl {
                                k[(yi * dl + lo, col)] = l[(yi, col)] * phi[lo];
                            }
                        }
                    }
                    kraus.push(k);
                }
            }
            let map =
                QuantumMap::from_kraus(in_b, out_b, kraus, MapKind::Normalised).unwrap();
            let looped = loop_compose(&map, &WireMatch::new(vec![("lo".into(), "li".into())]))
                .unwrap();
            let via_link = self_link(
                &labeled_choi(&map).unwrap(),
                &[("lo".to_string(), "li".to_string())],
            )
            .unwrap();
            let direct = labeled_choi(&looped).unwrap();
            assert_eq!(via_link.systems, direct.systems);
            assert!(frob_dist(&via_link.matrix, &direct.matrix) < 1e-9);
        }

        // Linking a state with a channel applies the channel.
        let bx = reg_basis(&[("x", 3, 0)]);
        let by = reg_basis(&[("y", 2, 1)]);
        let ch = random_map(&bx, &by, 3, &mut rng);
        let psi = random_state(3, &mut rng);
        let mut rho = zeros(3, 3);
        for r in 0..3 {
            for s in 0..3 {
                rho[(r, s)] = psi[r] * psi[s].conj();
            }
        }
        let state = LabeledChoi::new(vec![("x".into(), 3)], rho.clone()).unwrap();
        let linked = link_product(&state, &labeled_choi(&ch).unwrap()).unwrap();
        assert_eq!(linked.systems, vec![("y".to_string(), 2)]);
        assert!(frob_dist(&linked.matrix, &ch.apply(&rho)) < 1e-9);

        // Linking with an identity channel relabels the wire.
        let bm = reg_basis(&[("m", 2, 1)]);
        let chm = random_map(&bx, &bm, 2, &mut rng);
        let id_my = QuantumMap::from_isometry(
            reg_basis(&[("m", 2, 1)]),
            reg_basis(&[("z", 2, 2)]),
            crate::linalg::eye(2),
        )
        .unwrap();
        let linked =
            link_product(&labeled_choi(&chm).unwrap(), &labeled_choi(&id_my).unwrap()).unwrap();
        let renamed = labeled_choi(&chm)
            .unwrap()
            .permuted(&["x", "m"])
            .unwrap();
        let got = linked.permuted(&["x", "z"]).unwrap();
        assert!(frob_dist(&got.matrix, &renamed.matrix) < 1e-9);
        let _ = basis_vec(1, 0);
    }

    #[test]
    fn full_loop_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let mk = |rng: &mut ChaCha8Rng, a: (&str, usize, usize), b: (&str, usize, usize)| {
            let in_b = reg_basis(&[(a.0, a.1, a.2)]);
            let out_b = reg_basis(&[(b.0, b.1, b.2)]);
            random_map(&in_b, &out_b, 2, rng)
        };
        let m1 = mk(&mut rng, ("s", 2, 0), ("w2", 3, 1));
        let m2 = mk(&mut rng, ("w2", 3, 1), ("w3", 2, 2));
        let m3 = mk(&mut rng, ("w3", 2, 2), ("w4", 3, 3));
        let m4 = mk(&mut rng, ("w4", 3, 3), ("f", 2, 4));
        let base = full_loop(&[&m1, &m2, &m3, &m4]).unwrap();
        for perm in [
            vec![&m2, &m1, &m4, &m3],
            vec![&m4, &m3, &m2, &m1],
            vec![&m3, &m1, &m4, &m2],
            vec![&m2, &m4, &m1, &m3],
        ] {
            let other = full_loop(&perm).unwrap();
            assert!(maps_equal(&base, &other, 1e-9).unwrap());
        }

        // A closed chain of relays evaluates identically under cyclic
        // relistings.
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let g_db = relay(("d", 2, 0), ("b", 1), 4, &mut rng);
            let g_ae = relay(("a", 2, 3), ("e", 4), 4, &mut rng);
            let pa = parallel(&g_db, &g_ae).unwrap();
            let g_db2 = relay(("d", 2, 0), ("b", 1), 4, &mut rng);
            let g_ae2 = relay(("a", 2, 3), ("e", 4), 4, &mut rng);
            let pb = parallel(&g_db2, &g_ae2).unwrap();
            let p: f64 = rng.gen_range(0.2..0.8);
            let c1 = QuantumMap::from_kraus(
                pa.in_basis.clone(),
                pa.out_basis.clone(),
                vec![&pa.kraus[0] * cr(p.sqrt()), &pb.kraus[0] * cr((1.0 - p).sqrt())],
                MapKind::Normalised,
            )
            .unwrap();
            let c2 = relay(("b", 2, 1), ("c", 2), 4, &mut rng);
            let c3 = relay(("c", 2, 2), ("a", 3), 4, &mut rng);
            let r1 = full_loop(&[&c1, &c2, &c3]).unwrap();
            let r2 = full_loop(&[&c2, &c3, &c1]).unwrap();
            let r3 = full_loop(&[&c3, &c1, &c2]).unwrap();
            assert!(maps_equal(&r1, &r2, 1e-9).unwrap());
            assert!(maps_equal(&r1, &r3, 1e-9).unwrap());
            // One in-flight message fits the cap on every leg, so the loop
            // preserves trace on that sector.
            let low: Vec<usize> = (0..r1.din())
                .filter(|&i| r1.in_basis.decode(i).0.len() <= 1)
                .collect();
            for &i in &low {
                let mut rho = zeros(r1.din(), r1.din());
                rho[(i, i)] = c(1.0, 0.0);
                let out = r1.apply(&rho);
                let tr: f64 = (0..out.nrows()).map(|k| out[(k, k)].re).sum();
                assert!((tr - 1.0).abs() < 1e-9, "trace {tr}");
            }
        }
    }
}
