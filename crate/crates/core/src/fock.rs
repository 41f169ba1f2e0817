//! Truncated symmetric Fock spaces over message wires anchored at poset
//! positions, plus the wire isomorphisms and projectors built on them.
//!
//! A basis label is a multiset of (wire, level, position) slots of size at
//! most `n_max`; symmetrisation is implicit in the sorted label. Register
//! wires (result slots, counters, ancillas, control) are ordinary tensor
//! factors outside the multiset and multiply the basis size by their
//! dimension.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::linalg::{c, mr_decode, mr_encode, zeros, CMat};
use crate::spacetime::Mask;
use crate::{Error, Result, BASIS_CAP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireRole {
    AgentIn,
    AgentOut,
    Past,
    Future,
    Result,
    Ancilla,
}

/// Fock wires carry a variable number of messages across their positions;
/// register wires hold exactly one value and sit outside the symmetrisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireKind {
    Fock,
    Register,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireSpec {
    pub name: String,
    pub dim: usize,
    /// Spacetime element indices this wire touches, sorted ascending.
    pub positions: Vec<usize>,
    pub role: WireRole,
    pub kind: WireKind,
}

impl WireSpec {
    pub fn fock(name: impl Into<String>, dim: usize, mut positions: Vec<usize>, role: WireRole) -> Self {
        positions.sort_unstable();
        positions.dedup();
        WireSpec { name: name.into(), dim, positions, role, kind: WireKind::Fock }
    }

    pub fn register(name: impl Into<String>, dim: usize, position: usize, role: WireRole) -> Self {
        WireSpec { name: name.into(), dim, positions: vec![position], role, kind: WireKind::Register }
    }

    pub fn is_trivial(&self) -> bool {
        self.dim == 0
    }
}

/// A single-message slot: `level`-th message state on `wire` at poset
/// position `pos`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Slot {
    pub wire: usize,
    pub level: usize,
    pub pos: usize,
}

/// Enumerated basis: every multiset of at most `n_max` slots, vacuum first,
/// sorted by size then lexicographically, tensored with all register wires.
#[derive(Clone, Debug)]
pub struct FockBasis {
    wires: Vec<WireSpec>,
    n_max: usize,
    slots: Vec<Slot>,
    slot_index: HashMap<(usize, usize, usize), usize>,
    labels: Vec<Vec<usize>>,
    label_index: HashMap<Vec<usize>, usize>,
    reg_wires: Vec<usize>,
    reg_dims: Vec<usize>,
}

fn multisets(n_slots: usize, n_max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for size in 1..=n_max {
        let mut label = Vec::with_capacity(size);
        push_multisets(n_slots, size, 0, &mut label, &mut out);
    }
    out
}

fn push_multisets(
    n_slots: usize,
    remaining: usize,
    start: usize,
    label: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if remaining == 0 {
        out.push(label.clone());
        return;
    }
    for s in start..n_slots {
        label.push(s);
        push_multisets(n_slots, remaining - 1, s, label, out);
        label.pop();
    }
}

/// Number of multisets of size 0..=n_max over `slots` single-message slots,
/// by the stars-and-bars formula. Used as an independent check on the
/// enumeration.
pub fn multiset_count(slots: usize, n_max: usize) -> usize {
    let binom = |n: u128, k: u128| -> u128 {
        let mut acc = 1u128;
        for i in 0..k {
            acc = acc * (n - i) / (i + 1);
        }
        acc
    };
    (0..=n_max as u128)
        .map(|n| if n == 0 { 1 } else { binom(slots as u128 + n - 1, n) })
        .sum::<u128>() as usize
}

pub fn enumerate_basis(wires: Vec<WireSpec>, n_max: usize) -> Result<FockBasis> {
    let mut seen = std::collections::HashSet::new();
    for w in &wires {
        if !seen.insert(w.name.clone()) {
            return Err(Error::input(format!("duplicate wire name {:?}", w.name)));
        }
        match w.kind {
            WireKind::Fock => {
                if w.dim > 0 && w.positions.is_empty() {
                    return Err(Error::input(format!("wire {:?} has no positions", w.name)));
                }
            }
            WireKind::Register => {
                if w.dim == 0 {
                    return Err(Error::input(format!("register {:?} has dimension 0", w.name)));
                }
                if w.positions.len() != 1 {
                    return Err(Error::input(format!(
                        "register {:?} must sit at exactly one position",
                        w.name
                    )));
                }
            }
        }
    }
    let mut slots = Vec::new();
    for (wi, w) in wires.iter().enumerate() {
        if w.kind != WireKind::Fock {
            continue;
        }
        for &p in &w.positions {
            for level in 0..w.dim {
                slots.push(Slot { wire: wi, level, pos: p });
            }
        }
    }
    let reg_wires: Vec<usize> = wires
        .iter()
        .enumerate()
        .filter(|(_, w)| w.kind == WireKind::Register)
        .map(|(i, _)| i)
        .collect();
    let reg_dims: Vec<usize> = reg_wires.iter().map(|&i| wires[i].dim).collect();
    let fock_dim = multiset_count(slots.len(), n_max);
    let reg_prod: usize = reg_dims.iter().product();
    let total = fock_dim.checked_mul(reg_prod).unwrap_or(usize::MAX);
    if total > BASIS_CAP {
        return Err(Error::resource(format!(
            "basis of {total} states exceeds the cap of {BASIS_CAP}"
        )));
    }
    let labels = multisets(slots.len(), n_max);
    debug_assert_eq!(labels.len(), fock_dim);
    let label_index = labels.iter().cloned().enumerate().map(|(i, l)| (l, i)).collect();
    let slot_index =
        slots.iter().enumerate().map(|(i, s)| ((s.wire, s.level, s.pos), i)).collect();
    Ok(FockBasis { wires, n_max, slots, slot_index, labels, label_index, reg_wires, reg_dims })
}

impl FockBasis {
    pub fn dim(&self) -> usize {
        self.labels.len() * self.reg_prod()
    }

    pub fn fock_dim(&self) -> usize {
        self.labels.len()
    }

    pub fn reg_prod(&self) -> usize {
        self.reg_dims.iter().product()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn wires(&self) -> &[WireSpec] {
        &self.wires
    }

    pub fn reg_dims(&self) -> &[usize] {
        &self.reg_dims
    }

    /// Indices (into `wires`) of the register wires, in tensor order.
    pub fn reg_wires(&self) -> &[usize] {
        &self.reg_wires
    }

    pub fn wire_index(&self, name: &str) -> Result<usize> {
        self.wires
            .iter()
            .position(|w| w.name == name)
            .ok_or_else(|| Error::input(format!("unknown wire {name:?}")))
    }

    pub fn slot(&self, s: usize) -> Slot {
        self.slots[s]
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_of(&self, wire: usize, level: usize, pos: usize) -> Result<usize> {
        self.slot_index
            .get(&(wire, level, pos))
            .copied()
            .ok_or_else(|| Error::input(format!("no slot for wire {wire} level {level} pos {pos}")))
    }

    pub fn fock_label(&self, fock_idx: usize) -> &[usize] {
        &self.labels[fock_idx]
    }

    pub fn fock_index(&self, label: &[usize]) -> Result<usize> {
        let mut key = label.to_vec();
        key.sort_unstable();
        self.label_index
            .get(&key)
            .copied()
            .ok_or_else(|| Error::input(format!("label {key:?} not in basis (size > n_max?)")))
    }

    /// Global index of (multiset, register values).
    pub fn index_of(&self, label: &[usize], regs: &[usize]) -> Result<usize> {
        if regs.len() != self.reg_dims.len() {
            return Err(Error::input(format!(
                "expected {} register values, got {}",
                self.reg_dims.len(),
                regs.len()
            )));
        }
        for (v, d) in regs.iter().zip(&self.reg_dims) {
            if v >= d {
                return Err(Error::input(format!("register value {v} out of range (dim {d})")));
            }
        }
        Ok(self.fock_index(label)? * self.reg_prod() + mr_encode(regs, &self.reg_dims))
    }

    /// Inverse of `index_of`.
    pub fn decode(&self, idx: usize) -> (&[usize], Vec<usize>) {
        let rp = self.reg_prod();
        (&self.labels[idx / rp], mr_decode(idx % rp, &self.reg_dims))
    }

    /// Number of messages the label places on `wire`.
    pub fn occupancy(&self, label: &[usize], wire: usize) -> usize {
        label.iter().filter(|&&s| self.slots[s].wire == wire).count()
    }

    /// Positions (with multiplicity) the label occupies on `wire`.
    pub fn occupied_positions(&self, label: &[usize], wire: usize) -> Vec<usize> {
        label
            .iter()
            .filter(|&&s| self.slots[s].wire == wire)
            .map(|&s| self.slots[s].pos)
            .collect()
    }

    /// One line per basis state: `index: [(wire,level,pos),...]`, with
    /// register values appended when present.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for idx in 0..self.dim() {
            let (label, regs) = self.decode(idx);
            let triples: Vec<String> = label
                .iter()
                .map(|&s| {
                    let sl = self.slots[s];
                    format!("({},{},{})", self.wires[sl.wire].name, sl.level, sl.pos)
                })
                .collect();
            write!(out, "{idx}: [{}]", triples.join(",")).unwrap();
            if !self.reg_wires.is_empty() {
                let regs: Vec<String> = self
                    .reg_wires
                    .iter()
                    .zip(&regs)
                    .map(|(&w, v)| format!("{}={v}", self.wires[w].name))
                    .collect();
                write!(out, " | {}", regs.join(",")).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Same Fock wires and truncation with extra register wires appended.
    pub fn with_registers(&self, extra: Vec<WireSpec>) -> Result<FockBasis> {
        let mut wires = self.wires.clone();
        for r in extra {
            if r.kind != WireKind::Register {
                return Err(Error::input(format!("{:?} is not a register wire", r.name)));
            }
            wires.push(r);
        }
        enumerate_basis(wires, self.n_max)
    }

    /// Maps every state of `self` into `target` by rewriting each slot with
    /// `f: (wire name, level, pos) -> (wire name, level, pos)` and each
    /// register by name. Returns `map[old_index] = new_index`; errors if any
    /// rewritten state is absent from the target.
    pub fn relabel_into(
        &self,
        target: &FockBasis,
        mut f: impl FnMut(&str, usize, usize) -> (String, usize, usize),
    ) -> Result<Vec<usize>> {
        let mut slot_map = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let (name, level, pos) = f(&self.wires[s.wire].name, s.level, s.pos);
            let wi = target.wire_index(&name)?;
            slot_map.push(target.slot_of(wi, level, pos)?);
        }
        let mut reg_map = Vec::with_capacity(self.reg_wires.len());
        for &rw in &self.reg_wires {
            let name = &self.wires[rw].name;
            let ti = target.wire_index(name)?;
            let tpos = target
                .reg_wires
                .iter()
                .position(|&t| t == ti)
                .ok_or_else(|| Error::input(format!("{name:?} is not a register in the target")))?;
            if target.wires[ti].dim != self.wires[rw].dim {
                return Err(Error::input(format!("register {name:?} changes dimension")));
            }
            reg_map.push(tpos);
        }
        let mut map = Vec::with_capacity(self.dim());
        for idx in 0..self.dim() {
            let (label, regs) = self.decode(idx);
            let new_label: Vec<usize> = label.iter().map(|&s| slot_map[s]).collect();
            let mut new_regs = vec![0usize; target.reg_dims.len()];
            for (src, &dst) in reg_map.iter().enumerate() {
                new_regs[dst] = regs[src];
            }
            map.push(target.index_of(&new_label, &new_regs)?);
        }
        Ok(map)
    }
}

/// Factorisation of a basis by a position region: every state splits uniquely
/// into its content on positions inside the region and its content outside.
/// Because the truncation couples the two parts (sizes sum to at most n_max),
/// the pair space is a subset of the tensor product, recorded in `pairs`.
#[derive(Clone, Debug)]
pub struct RegionSplit {
    /// Basis over positions inside the region (registers included when their
    /// position lies inside).
    pub inside: FockBasis,
    /// Basis over the complementary positions.
    pub outside: FockBasis,
    /// `pairs[full_index] = (inside_index, outside_index)`.
    pub pairs: Vec<(usize, usize)>,
}

/// Splits `basis` along `region`. Wires keep their names in both halves; a
/// wire with no positions on one side becomes a trivial wire there.
pub fn region_split(basis: &FockBasis, region: Mask) -> Result<RegionSplit> {
    let part = |keep_inside: bool| -> Result<FockBasis> {
        let mut wires = Vec::new();
        for w in basis.wires() {
            let sel: Vec<usize> = w
                .positions
                .iter()
                .copied()
                .filter(|&p| (region & (1 << p) != 0) == keep_inside)
                .collect();
            match w.kind {
                WireKind::Fock => {
                    let mut nw = w.clone();
                    nw.positions = sel;
                    if nw.positions.is_empty() {
                        nw.dim = 0;
                    }
                    wires.push(nw);
                }
                WireKind::Register => {
                    if !sel.is_empty() {
                        wires.push(w.clone());
                    }
                }
            }
        }
        enumerate_basis(wires, basis.n_max())
    };
    let inside = part(true)?;
    let outside = part(false)?;
    let mut pairs = Vec::with_capacity(basis.dim());
    for idx in 0..basis.dim() {
        let (label, regs) = basis.decode(idx);
        let mut in_label = Vec::new();
        let mut out_label = Vec::new();
        for &s in label {
            let sl = basis.slot(s);
            let name = &basis.wires()[sl.wire].name;
            if region & (1 << sl.pos) != 0 {
                let wi = inside.wire_index(name)?;
                in_label.push(inside.slot_of(wi, sl.level, sl.pos)?);
            } else {
                let wi = outside.wire_index(name)?;
                out_label.push(outside.slot_of(wi, sl.level, sl.pos)?);
            }
        }
        let mut in_regs = Vec::new();
        let mut out_regs = Vec::new();
        for (&rw, &v) in basis.reg_wires().iter().zip(&regs) {
            let w = &basis.wires()[rw];
            if region & (1 << w.positions[0]) != 0 {
                in_regs.push(v);
            } else {
                out_regs.push(v);
            }
        }
        pairs.push((inside.index_of(&in_label, &in_regs)?, outside.index_of(&out_label, &out_regs)?));
    }
    Ok(RegionSplit { inside, outside, pairs })
}

/// Splits `basis` by wire name: the listed wires, in the given order, form
/// the inside half and the remaining wires the outside half. Both halves keep
/// the full message cap, so the original basis embeds into their product.
pub fn wire_partition(basis: &FockBasis, names: &[&str]) -> Result<RegionSplit> {
    let mut seen = std::collections::HashSet::new();
    let mut sel = Vec::new();
    for n in names {
        if !seen.insert(*n) {
            return Err(Error::input(format!("wire {n:?} listed twice in a partition")));
        }
        sel.push(basis.wires()[basis.wire_index(n)?].clone());
    }
    let rest: Vec<WireSpec> = basis
        .wires()
        .iter()
        .filter(|w| !seen.contains(w.name.as_str()))
        .cloned()
        .collect();
    let inside = enumerate_basis(sel, basis.n_max())?;
    let outside = enumerate_basis(rest, basis.n_max())?;
    let mut pairs = Vec::with_capacity(basis.dim());
    for idx in 0..basis.dim() {
        let (label, regs) = basis.decode(idx);
        let mut in_label = Vec::new();
        let mut out_label = Vec::new();
        for &s in label {
            let sl = basis.slot(s);
            let name = basis.wires()[sl.wire].name.as_str();
            if seen.contains(name) {
                in_label.push(inside.slot_of(inside.wire_index(name)?, sl.level, sl.pos)?);
            } else {
                out_label.push(outside.slot_of(outside.wire_index(name)?, sl.level, sl.pos)?);
            }
        }
        let mut reg_vals = std::collections::HashMap::new();
        for (&rw, &v) in basis.reg_wires().iter().zip(&regs) {
            reg_vals.insert(basis.wires()[rw].name.as_str(), v);
        }
        let in_regs: Vec<usize> = inside
            .reg_wires()
            .iter()
            .map(|&rw| reg_vals[inside.wires()[rw].name.as_str()])
            .collect();
        let out_regs: Vec<usize> = outside
            .reg_wires()
            .iter()
            .map(|&rw| reg_vals[outside.wires()[rw].name.as_str()])
            .collect();
        pairs.push((inside.index_of(&in_label, &in_regs)?, outside.index_of(&out_label, &out_regs)?));
    }
    Ok(RegionSplit { inside, outside, pairs })
}

/// Projector onto states carrying exactly one message on `wire`, located in
/// `region`, with vacuum on that wire everywhere else; identity on all other
/// wires. For a trivial wire this is the identity.
#[derive(Clone, Debug)]
pub struct OneMessageProjector {
    pub wire: String,
    pub region: Mask,
    pub matrix: CMat,
}

pub fn one_message_projector(basis: &FockBasis, wire: &str, region: Mask) -> Result<OneMessageProjector> {
    let n = basis.dim();
    let mut m = zeros(n, n);
    let wi = basis.wire_index(wire)?;
    if basis.wires()[wi].is_trivial() {
        for i in 0..n {
            m[(i, i)] = c(1.0, 0.0);
        }
        return Ok(OneMessageProjector { wire: wire.into(), region, matrix: m });
    }
    if basis.wires()[wi].kind != WireKind::Fock {
        return Err(Error::input(format!("{wire:?} is a register, not a message wire")));
    }
    for i in 0..n {
        let (label, _) = basis.decode(i);
        let occupied = basis.occupied_positions(label, wi);
        if occupied.len() == 1 && region & (1 << occupied[0]) != 0 {
            m[(i, i)] = c(1.0, 0.0);
        }
    }
    Ok(OneMessageProjector { wire: wire.into(), region, matrix: m })
}

/// Merges wires `a` and `b` (same position set) into `merged` whose message
/// space is the direct sum: a-levels first, then b-levels. Returns the new
/// basis and the permutation `map[old] = new`.
pub fn wire_merge(
    basis: &FockBasis,
    a: &str,
    b: &str,
    merged: &str,
) -> Result<(FockBasis, Vec<usize>)> {
    let ai = basis.wire_index(a)?;
    let bi = basis.wire_index(b)?;
    let (wa, wb) = (&basis.wires()[ai], &basis.wires()[bi]);
    if wa.positions != wb.positions {
        return Err(Error::input(format!("wires {a:?} and {b:?} cover different positions")));
    }
    if wa.kind != WireKind::Fock || wb.kind != WireKind::Fock {
        return Err(Error::input("only message wires can be merged"));
    }
    let da = wa.dim;
    let mut wires = Vec::new();
    for (i, w) in basis.wires().iter().enumerate() {
        if i == ai {
            wires.push(WireSpec::fock(merged, da + wb.dim, wa.positions.clone(), wa.role));
        } else if i != bi {
            wires.push(w.clone());
        }
    }
    let target = enumerate_basis(wires, basis.n_max())?;
    let a_name = a.to_string();
    let b_name = b.to_string();
    let map = basis.relabel_into(&target, |name, level, pos| {
        if name == a_name {
            (merged.to_string(), level, pos)
        } else if name == b_name {
            (merged.to_string(), da + level, pos)
        } else {
            (name.to_string(), level, pos)
        }
    })?;
    Ok((target, map))
}

/// Splits `merged` (built by `wire_merge`) back into `a` of dimension `da`
/// and `b`, returning the new basis and the permutation `map[old] = new`.
pub fn wire_split(
    basis: &FockBasis,
    merged: &str,
    a: &str,
    da: usize,
    b: &str,
) -> Result<(FockBasis, Vec<usize>)> {
    let ci = basis.wire_index(merged)?;
    let wc = &basis.wires()[ci];
    if wc.kind != WireKind::Fock || wc.dim < da {
        return Err(Error::input(format!("wire {merged:?} cannot split off dimension {da}")));
    }
    let mut wires = Vec::new();
    for (i, w) in basis.wires().iter().enumerate() {
        if i == ci {
            wires.push(WireSpec::fock(a, da, wc.positions.clone(), wc.role));
            wires.push(WireSpec::fock(b, wc.dim - da, wc.positions.clone(), wc.role));
        } else {
            wires.push(w.clone());
        }
    }
    let target = enumerate_basis(wires, basis.n_max())?;
    let merged_name = merged.to_string();
    let map = basis.relabel_into(&target, |name, level, pos| {
        if name == merged_name {
            if level < da {
                (a.to_string(), level, pos)
            } else {
                (b.to_string(), level - da, pos)
            }
        } else {
            (name.to_string(), level, pos)
        }
    })?;
    Ok((target, map))
}

/// Extends the position sets of the listed wires (appending vacuum on the new
/// positions). Returns the enlarged basis and the injective `map[old] = new`.
pub fn embed_region(
    basis: &FockBasis,
    extended: &[(&str, Vec<usize>)],
) -> Result<(FockBasis, Vec<usize>)> {
    let mut wires = basis.wires().to_vec();
    for (name, new_pos) in extended {
        let wi = basis.wire_index(name)?;
        let old = &basis.wires()[wi];
        if old.kind != WireKind::Fock {
            return Err(Error::input(format!("{name:?} is not a message wire")));
        }
        if old.positions.iter().any(|p| !new_pos.contains(p)) {
            return Err(Error::input(format!(
                "extended positions of {name:?} must contain the current ones"
            )));
        }
        wires[wi] = WireSpec::fock(old.name.clone(), old.dim, new_pos.clone(), old.role);
    }
    let target = enumerate_basis(wires, basis.n_max())?;
    let map = basis.relabel_into(&target, |name, level, pos| (name.to_string(), level, pos))?;
    Ok((target, map))
}

/// Appends two counter registers at `counter_pos` recording how many messages
/// `wire` carries inside and outside `region`, and returns the isometry
/// matrix together with its output basis.
pub fn message_count_matrix(
    basis: &FockBasis,
    wire: &str,
    region: Mask,
    counter_pos: usize,
) -> Result<(FockBasis, CMat)> {
    let wi = basis.wire_index(wire)?;
    let d = basis.n_max() + 1;
    let out_basis = basis.with_registers(vec![
        WireSpec::register(format!("cnt_in:{wire}"), d, counter_pos, WireRole::Ancilla),
        WireSpec::register(format!("cnt_out:{wire}"), d, counter_pos, WireRole::Ancilla),
    ])?;
    let mut m = zeros(out_basis.dim(), basis.dim());
    for i in 0..basis.dim() {
        let (label, regs) = basis.decode(i);
        let mut n_in = 0;
        let mut n_out = 0;
        for &p in &basis.occupied_positions(label, wi) {
            if region & (1 << p) != 0 {
                n_in += 1;
            } else {
                n_out += 1;
            }
        }
        let mut out_regs = regs.clone();
        out_regs.push(n_in);
        out_regs.push(n_out);
        let j = out_basis.index_of(label, &out_regs)?;
        m[(j, i)] = c(1.0, 0.0);
    }
    Ok((out_basis, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{approx_eq, frob_dist, is_isometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wire(name: &str, dim: usize, positions: Vec<usize>) -> WireSpec {
        WireSpec::fock(name, dim, positions, WireRole::AgentIn)
    }

    #[test]
    fn basis_size_examples() {
        let b = enumerate_basis(vec![wire("a", 2, vec![0])], 1).unwrap();
        assert_eq!(b.dim(), 3);
        let b = enumerate_basis(vec![wire("a", 1, vec![0, 1])], 2).unwrap();
        assert_eq!(b.dim(), 6);
        let b = enumerate_basis(vec![wire("a", 2, vec![0]), wire("b", 2, vec![1])], 1).unwrap();
        assert_eq!(b.dim(), 5);
    }

    #[test]
    fn basis_size_matches_counting_formula() {
        for d in 1..=3usize {
            for p in 1..=4usize {
                for n_max in 0..=3usize {
                    let b = enumerate_basis(vec![wire("a", d, (0..p).collect())], n_max).unwrap();
                    assert_eq!(b.dim(), multiset_count(d * p, n_max));
                }
            }
        }
        let b = enumerate_basis(
            vec![wire("a", 2, vec![0, 1]), WireSpec::register("r", 3, 2, WireRole::Result)],
            2,
        )
        .unwrap();
        assert_eq!(b.dim(), multiset_count(4, 2) * 3);
    }

    #[test]
    fn vacuum_first_and_index_round_trip() {
        let b = enumerate_basis(
            vec![
                wire("a", 2, vec![0, 1]),
                wire("b", 1, vec![1]),
                WireSpec::register("r", 2, 2, WireRole::Result),
            ],
            2,
        )
        .unwrap();
        assert_eq!(b.decode(0).0, &[] as &[usize]);
        for idx in 0..b.dim() {
            let (label, regs) = b.decode(idx);
            assert!(label.len() <= 2);
            assert_eq!(b.index_of(&label.to_vec(), &regs).unwrap(), idx);
        }
        let sizes: Vec<usize> = (0..b.fock_dim()).map(|i| b.fock_label(i).len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn projector_selects_single_messages_in_region() {
        let b = enumerate_basis(vec![wire("a", 2, vec![0, 1]), wire("b", 2, vec![1])], 2).unwrap();
        let region = 0b01;
        let proj = one_message_projector(&b, "a", region).unwrap();
        let m = &proj.matrix;
        assert!(approx_eq(&(m * m), m, 1e-12));
        assert!(approx_eq(&m.adjoint(), m, 1e-12));
        assert_eq!(m[(0, 0)].re, 0.0);
        let wa = b.wire_index("a").unwrap();
        let wb = b.wire_index("b").unwrap();
        let s_a0 = b.slot_of(wa, 0, 0).unwrap();
        let s_a1 = b.slot_of(wa, 0, 1).unwrap();
        let s_b = b.slot_of(wb, 1, 1).unwrap();
        let keep = b.index_of(&[s_a0], &[]).unwrap();
        assert_eq!(m[(keep, keep)].re, 1.0);
        let outside = b.index_of(&[s_a1], &[]).unwrap();
        assert_eq!(m[(outside, outside)].re, 0.0);
        let double = b.index_of(&[s_a0, s_a1], &[]).unwrap();
        assert_eq!(m[(double, double)].re, 0.0);
        let with_b = b.index_of(&[s_a0, s_b], &[]).unwrap();
        assert_eq!(m[(with_b, with_b)].re, 1.0);
    }

    #[test]
    fn projector_intersection_identity_and_rank() {
        let b = enumerate_basis(vec![wire("a", 2, vec![0, 1, 2])], 2).unwrap();
        let p01 = one_message_projector(&b, "a", 0b011).unwrap().matrix;
        let p12 = one_message_projector(&b, "a", 0b110).unwrap().matrix;
        let p1 = one_message_projector(&b, "a", 0b010).unwrap().matrix;
        assert!(approx_eq(&(&p01 * &p12), &p1, 1e-12));
        let rank: f64 = p1.diagonal().iter().map(|z| z.re).sum();
        assert_eq!(rank as usize, 2);
        let rank01: f64 = p01.diagonal().iter().map(|z| z.re).sum();
        assert_eq!(rank01 as usize, 4);
    }

    #[test]
    fn merge_then_split_is_identity() {
        let b = enumerate_basis(
            vec![wire("a", 2, vec![0, 1]), wire("b", 1, vec![0, 1]), wire("c", 2, vec![2])],
            2,
        )
        .unwrap();
        let (merged, to_merged) = wire_merge(&b, "a", "b", "ab").unwrap();
        assert_eq!(merged.dim(), b.dim());
        assert_eq!(to_merged[0], 0);
        let (split, to_split) = wire_split(&merged, "ab", "a", 2, "b").unwrap();
        assert_eq!(split.dim(), b.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let i = rng.gen_range(0..b.dim());
            let j = to_split[to_merged[i]];
            let (li, ri) = b.decode(i);
            let (lj, rj) = split.decode(j);
            assert_eq!(ri, rj);
            let tri = |bb: &FockBasis, l: &[usize]| -> Vec<(String, usize, usize)> {
                l.iter()
                    .map(|&s| {
                        let sl = bb.slot(s);
                        (bb.wires()[sl.wire].name.clone(), sl.level, sl.pos)
                    })
                    .collect()
            };
            assert_eq!(tri(&b, li), tri(&split, lj));
        }
        let wa = b.wire_index("a").unwrap();
        let s = b.slot_of(wa, 1, 0).unwrap();
        let i = b.index_of(&[s], &[]).unwrap();
        let m = merged.decode(to_merged[i]).0;
        let msl = merged.slot(m[0]);
        assert_eq!(merged.wires()[msl.wire].name, "ab");
        assert_eq!(msl.level, 1);
        let wb = b.wire_index("b").unwrap();
        let s = b.slot_of(wb, 0, 1).unwrap();
        let i = b.index_of(&[s], &[]).unwrap();
        let m = merged.decode(to_merged[i]).0;
        assert_eq!(merged.slot(m[0]).level, 2);
    }

    #[test]
    fn embedding_preserves_content_and_is_injective() {
        let b = enumerate_basis(vec![wire("a", 2, vec![1])], 2).unwrap();
        let (big, map) = embed_region(&b, &[("a", vec![0, 1, 2])]).unwrap();
        assert_eq!(map[0], 0);
        let mut seen = std::collections::HashSet::new();
        for (&m, i) in map.iter().zip(0..) {
            assert!(seen.insert(m));
            let (label, _) = b.decode(i);
            let (big_label, _) = big.decode(m);
            assert_eq!(label.len(), big_label.len());
            for (&s, &t) in label.iter().zip(big_label) {
                assert_eq!(b.slot(s).level, big.slot(t).level);
                assert_eq!(b.slot(s).pos, big.slot(t).pos);
            }
        }
    }

    #[test]
    fn region_split_is_injective_and_preserves_content() {
        let b = enumerate_basis(
            vec![
                wire("a", 2, vec![0, 1]),
                wire("b", 1, vec![1, 2]),
                WireSpec::register("r", 2, 3, WireRole::Result),
            ],
            2,
        )
        .unwrap();
        let split = region_split(&b, 0b0011).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (idx, &(i, o)) in split.pairs.iter().enumerate() {
            assert!(seen.insert((i, o)));
            let (label, regs) = b.decode(idx);
            let (il, ir) = split.inside.decode(i);
            let (ol, or) = split.outside.decode(o);
            assert_eq!(label.len(), il.len() + ol.len());
            assert!(il.iter().all(|&s| split.inside.slot(s).pos <= 1));
            assert!(ol.iter().all(|&s| split.outside.slot(s).pos == 2));
            assert!(ir.is_empty());
            assert_eq!(or, regs);
        }
        assert_eq!(split.outside.reg_dims(), &[2]);
    }

    #[test]
    fn message_counts_land_in_registers() {
        let b = enumerate_basis(vec![wire("a", 1, vec![0, 1])], 2).unwrap();
        let (out, v) = message_count_matrix(&b, "a", 0b01, 3).unwrap();
        assert!(is_isometry(&v, 1e-12));
        let wa = b.wire_index("a").unwrap();
        let s0 = b.slot_of(wa, 0, 0).unwrap();
        let s1 = b.slot_of(wa, 0, 1).unwrap();
        let check = |fock: &[usize], expect: (usize, usize)| {
            let i = b.index_of(fock, &[]).unwrap();
            let col = v.column(i);
            let j = (0..out.dim()).find(|&j| col[j].re > 0.5).unwrap();
            let (_, regs) = out.decode(j);
            assert_eq!((regs[0], regs[1]), expect);
        };
        check(&[], (0, 0));
        check(&[s0], (1, 0));
        check(&[s1], (0, 1));
        check(&[s0, s1], (1, 1));
        check(&[s0, s0], (2, 0));
        let gram = v.adjoint() * &v;
        assert!(frob_dist(&gram, &crate::linalg::eye(b.dim())) < 1e-12);
    }
}
