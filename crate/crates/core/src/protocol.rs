//! Multipartite protocols: an environment channel plus per-agent operation
//! sets, composed over a finite poset of positions into result-register
//! states, outcome distributions, and behavioural-equivalence checks.
//!
//! Composition threads one isometry per participant slice along a linear
//! extension of the poset, so the message cap never has to cover more than
//! one participant's wires at a time. A dense cross-check path composes the
//! same network with `full_loop` on bases embedded at a network-wide cap.

use serde::{Deserialize, Serialize};

use crate::fock::{enumerate_basis, FockBasis, WireKind, WireRole, WireSpec};
use crate::linalg::{c, frob_dist, kron, zeros, C64, CMat};
use crate::qmap::{
    bases_same_shape, check_causality, sequence_representation_along, MapKind, QuantumMap,
    SequenceRep,
};
use crate::spacetime::{CausalityFunction, Mask, Spacetime};
use crate::{Error, Result, DEFAULT_TOL};

/// One allowed operation of an agent: a channel from the agent's input wire
/// to its output wire tensored with the result register.
#[derive(Clone, Debug)]
pub struct AgentOperation {
    pub setting: String,
    pub map: QuantumMap,
    pub outcome_dim: usize,
}

/// An agent's interface: message dimensions and poset positions of its input
/// and output wires, the truncation its operations are expressed at, and the
/// finite list of allowed operations.
#[derive(Clone, Debug)]
pub struct AgentSpec {
    pub name: String,
    pub in_dim: usize,
    pub in_positions: Vec<usize>,
    pub out_dim: usize,
    pub out_positions: Vec<usize>,
    pub n_max: usize,
    pub ops: Vec<AgentOperation>,
}

impl AgentSpec {
    pub fn in_wire(&self) -> Option<WireSpec> {
        (self.in_dim > 0).then(|| {
            WireSpec::fock(
                format!("{}.I", self.name),
                self.in_dim,
                self.in_positions.clone(),
                WireRole::AgentIn,
            )
        })
    }

    pub fn out_wire(&self) -> Option<WireSpec> {
        (self.out_dim > 0).then(|| {
            WireSpec::fock(
                format!("{}.O", self.name),
                self.out_dim,
                self.out_positions.clone(),
                WireRole::AgentOut,
            )
        })
    }

    pub fn result_wire_name(&self) -> String {
        format!("{}.R", self.name)
    }

    /// Input basis every operation of this agent must be defined on.
    pub fn op_in_basis(&self) -> Result<FockBasis> {
        enumerate_basis(self.in_wire().into_iter().collect(), self.n_max)
    }

    /// Output basis of an operation with the given outcome dimension.
    pub fn op_out_basis(&self, outcome_dim: usize, t_res: usize) -> Result<FockBasis> {
        let mut wires: Vec<WireSpec> = self.out_wire().into_iter().collect();
        wires.push(WireSpec::register(
            self.result_wire_name(),
            outcome_dim,
            t_res,
            WireRole::Result,
        ));
        enumerate_basis(wires, self.n_max)
    }

    pub fn op(&self, setting: &str) -> Result<&AgentOperation> {
        self.ops.iter().find(|o| o.setting == setting).ok_or_else(|| {
            Error::input(format!("agent {:?} has no operation with setting {setting:?}", self.name))
        })
    }
}

/// The environment channel, either as an explicit channel with a causality
/// function or directly as a chain of slice isometries.
#[derive(Clone, Debug)]
pub enum ProcessRep {
    Monolithic { map: QuantumMap, chi: CausalityFunction },
    Sequence(SequenceRep),
}

impl ProcessRep {
    pub fn in_basis(&self) -> &FockBasis {
        match self {
            ProcessRep::Monolithic { map, .. } => &map.in_basis,
            ProcessRep::Sequence(rep) => &rep.src_in,
        }
    }

    pub fn out_basis(&self) -> &FockBasis {
        match self {
            ProcessRep::Monolithic { map, .. } => &map.out_basis,
            ProcessRep::Sequence(rep) => &rep.src_out,
        }
    }
}

/// A complete protocol: the poset (with designated global-past, global-future
/// and result positions), the environment, and the agents. The global past
/// agent has no input wire and the global future agent no output wire.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub spacetime: Spacetime,
    pub process: ProcessRep,
    pub past: AgentSpec,
    pub agents: Vec<AgentSpec>,
    pub future: AgentSpec,
}

impl Protocol {
    /// Past, interior agents, then future.
    pub fn participants(&self) -> Vec<&AgentSpec> {
        let mut v = Vec::with_capacity(self.agents.len() + 2);
        v.push(&self.past);
        v.extend(self.agents.iter());
        v.push(&self.future);
        v
    }

    pub fn t_res(&self) -> Result<usize> {
        self.spacetime.result.ok_or_else(|| Error::input("no designated result position"))
    }

    /// Environment input wires in canonical order: the agents' output wires,
    /// past first.
    pub fn process_in_wires(&self) -> Vec<WireSpec> {
        self.participants().iter().filter_map(|a| a.out_wire()).collect()
    }

    /// Environment output wires in canonical order: the agents' input wires,
    /// future last.
    pub fn process_out_wires(&self) -> Vec<WireSpec> {
        self.participants().iter().filter_map(|a| a.in_wire()).collect()
    }
}

/// Checks the protocol's structure: designated positions, wire conventions,
/// operation bases, and (for an explicit channel) causality of the
/// environment for the supplied causality function.
pub fn validate_protocol(p: &Protocol, tol: f64) -> Result<()> {
    let st = &p.spacetime;
    let t_p = st.past.ok_or_else(|| Error::input("no designated global past position"))?;
    let t_f = st.future.ok_or_else(|| Error::input("no designated global future position"))?;
    let t_res = p.t_res()?;
    if t_p == t_f || t_f == t_res || t_p == t_res {
        return Err(Error::input("past, future, and result positions must be distinct"));
    }
    for t in 0..st.len() {
        if t != t_p && !st.lt(t_p, t) {
            return Err(Error::input("the global past must precede every position"));
        }
        if t != t_f && t != t_res && !st.lt(t, t_f) {
            return Err(Error::input("the global future must succeed every interior position"));
        }
    }
    if !st.lt(t_f, t_res) {
        return Err(Error::input("the result position must succeed the global future"));
    }

    let parts = p.participants();
    {
        let mut seen = std::collections::HashSet::new();
        for a in &parts {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::input(format!("duplicate agent name {:?}", a.name)));
            }
        }
    }
    if p.past.in_dim != 0 {
        return Err(Error::input("the global past agent cannot have an input wire"));
    }
    if p.future.out_dim != 0 {
        return Err(Error::input("the global future agent cannot have an output wire"));
    }
    if p.past.out_dim > 0 && p.past.out_positions != [t_p] {
        return Err(Error::input("the global past system must sit at the designated past position"));
    }
    if p.future.in_dim > 0 && p.future.in_positions != [t_f] {
        return Err(Error::input(
            "the global future system must sit at the designated future position",
        ));
    }
    for a in &p.agents {
        for &pos in a.in_positions.iter().chain(&a.out_positions) {
            if !(st.lt(t_p, pos) && st.lt(pos, t_f)) {
                return Err(Error::input(format!(
                    "agent {:?} uses position {:?} outside the interior of the protocol",
                    a.name,
                    st.id(pos)
                )));
            }
        }
    }
    for a in &parts {
        if a.ops.is_empty() {
            return Err(Error::input(format!("agent {:?} has no operations", a.name)));
        }
        let mut seen = std::collections::HashSet::new();
        for op in &a.ops {
            if !seen.insert(op.setting.as_str()) {
                return Err(Error::input(format!(
                    "agent {:?} lists setting {:?} twice",
                    a.name, op.setting
                )));
            }
            if op.outcome_dim == 0 {
                return Err(Error::input("outcome dimension must be at least 1"));
            }
            let want_in = a.op_in_basis()?;
            let want_out = a.op_out_basis(op.outcome_dim, t_res)?;
            if !bases_same_shape(&op.map.in_basis, &want_in)
                || !bases_same_shape(&op.map.out_basis, &want_out)
            {
                return Err(Error::input(format!(
                    "operation {:?} of agent {:?} is not a map from the agent's input wire to its output wire and result register",
                    op.setting, a.name
                )));
            }
        }
    }

    let want_in = enumerate_basis(p.process_in_wires(), p.process.in_basis().n_max())?;
    let want_out = enumerate_basis(p.process_out_wires(), p.process.out_basis().n_max())?;
    if !bases_same_shape(p.process.in_basis(), &want_in)
        || !bases_same_shape(p.process.out_basis(), &want_out)
    {
        return Err(Error::input(
            "environment wires must be exactly the agents' output wires (in) and input wires (out), in agent order",
        ));
    }
    match &p.process {
        ProcessRep::Monolithic { map, chi } => {
            let report = check_causality(map, st, chi, tol)?;
            if !report.pass {
                return Err(Error::precondition(format!(
                    "environment violates its causality function (distance {:.3e})",
                    report.max_distance
                )));
            }
        }
        ProcessRep::Sequence(rep) => {
            rep.validate(st, tol)?;
            let ranks = position_ranks(st);
            slice_fire_ranks(&rep.slices, &ranks)?;
        }
    }
    Ok(())
}

fn position_ranks(st: &Spacetime) -> Vec<usize> {
    let order = st.linear_extension_order();
    let mut rank = vec![0usize; st.len()];
    for (r, &pos) in order.iter().enumerate() {
        rank[pos] = r;
    }
    rank
}

/// Firing rank of each slice (the rank of its earliest position); slices
/// must occupy disjoint ascending rank intervals.
fn slice_fire_ranks(slices: &[Mask], ranks: &[usize]) -> Result<Vec<usize>> {
    let mut fire = Vec::with_capacity(slices.len());
    let mut prev_max: Option<usize> = None;
    for &s in slices {
        let rs: Vec<usize> =
            (0..ranks.len()).filter(|&t| s & (1 << t) != 0).map(|t| ranks[t]).collect();
        let (lo, hi) = match (rs.iter().min(), rs.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => return Err(Error::input("a slice covers no positions")),
        };
        if let Some(pm) = prev_max {
            if lo <= pm {
                return Err(Error::input(
                    "slices must follow the protocol's position order without overlap",
                ));
            }
        }
        prev_max = Some(hi);
        fire.push(lo);
    }
    Ok(fire)
}

/// A classical side register updated whenever messages are emitted on one
/// wire. `Counter` accumulates the total message count modulo nothing (the
/// dimension must be generous enough to never wrap). `FirstEvent` records
/// 1 + the rank of the first position at which a message appeared, 0 if none
/// appeared yet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gadget {
    pub wire: String,
    pub kind: GadgetKind,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GadgetKind {
    Counter,
    FirstEvent,
}

impl Gadget {
    pub fn counter(wire: impl Into<String>, dim: usize) -> Self {
        Gadget { wire: wire.into(), kind: GadgetKind::Counter, dim }
    }

    pub fn first_event(wire: impl Into<String>, dim: usize) -> Self {
        Gadget { wire: wire.into(), kind: GadgetKind::FirstEvent, dim }
    }
}

/// The joint state of the result registers and any gadget registers after
/// all other systems are traced out. Axis order: one axis per result
/// register with dimension greater than one (past, agents, future), then one
/// axis per gadget in the order supplied.
#[derive(Clone, Debug)]
pub struct Composed {
    pub rho: CMat,
    pub result_dims: Vec<usize>,
    pub gadget_dims: Vec<usize>,
}

impl Composed {
    /// Dimensions of the axes `rho` is actually indexed by.
    pub fn axis_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> =
            self.result_dims.iter().copied().filter(|&d| d > 1).collect();
        dims.extend(self.gadget_dims.iter().copied());
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tag {
    /// Internal memory of participant `part` between its slices.
    Anc(usize),
    /// Message content of one wire at one position, in flight or kept as a
    /// result register.
    Leg { wire: String, pos: usize },
    /// Classical gadget register.
    Gadget(usize),
}

#[derive(Clone, Debug)]
struct Factor {
    tag: Tag,
    dim: usize,
    /// Single-wire single-position basis for `Leg` factors.
    basis: Option<FockBasis>,
}

/// One participant of the run: a chain of isometries with bookkeeping for
/// when each fires and what it absorbs and emits.
struct RunChain {
    part: usize,
    rep: SequenceRep,
    /// `fire[j]` is the global rank at which isometry `j` fires, for
    /// `j < rep.slices.len()`; the final isometry runs in the flush phase.
    fire: Vec<usize>,
}

fn restricted_wire(basis: &FockBasis, wire: &str, pos: usize) -> Result<FockBasis> {
    let wi = basis.wire_index(wire)?;
    let w = &basis.wires()[wi];
    let spec = match w.kind {
        WireKind::Register => w.clone(),
        WireKind::Fock => WireSpec::fock(w.name.clone(), w.dim, vec![pos], w.role),
    };
    enumerate_basis(vec![spec], basis.n_max())
}

/// (wire name, position) pairs carried by a basis, registers included, in
/// the basis's own wire order.
fn basis_legs(basis: &FockBasis) -> Vec<(String, usize)> {
    let mut legs = Vec::new();
    for w in basis.wires() {
        if w.is_trivial() {
            continue;
        }
        for &pos in &w.positions {
            legs.push((w.name.clone(), pos));
        }
    }
    legs
}

impl RunChain {
    /// `None` for a participant with no wires at all (its operation is the
    /// scalar identity and nothing needs scheduling).
    fn build_for_agent(
        a: &AgentSpec,
        setting: &str,
        part: usize,
        ranks: &[usize],
        tol: f64,
    ) -> Result<Option<RunChain>> {
        let op = a.op(setting)?;
        let mut events: Vec<usize> = Vec::new();
        for w in op.map.in_basis.wires().iter().chain(op.map.out_basis.wires()) {
            if w.is_trivial() {
                continue;
            }
            events.extend(w.positions.iter().copied());
        }
        events.sort_by_key(|&t| ranks[t]);
        events.dedup();
        if events.is_empty() {
            return Ok(None);
        }
        let mut downsets = Vec::with_capacity(events.len());
        let mut acc: Mask = 0;
        for &t in &events {
            acc |= 1 << t;
            downsets.push(acc);
        }
        let rep = sequence_representation_along(&op.map, &downsets, tol).map_err(|e| {
            Error::precondition(format!(
                "operation {:?} of agent {:?} admits no slicing along the protocol order: {e}",
                setting, a.name
            ))
        })?;
        let fire = slice_fire_ranks(&rep.slices, ranks)?;
        Ok(Some(RunChain { part, rep, fire }))
    }

    fn build_for_process(p: &Protocol, ranks: &[usize], tol: f64) -> Result<RunChain> {
        let rep = match &p.process {
            ProcessRep::Sequence(rep) => rep.clone(),
            ProcessRep::Monolithic { map, .. } => {
                let mut events: Vec<usize> = Vec::new();
                for w in map.in_basis.wires().iter().chain(map.out_basis.wires()) {
                    if w.is_trivial() {
                        continue;
                    }
                    events.extend(w.positions.iter().copied());
                }
                events.sort_by_key(|&t| ranks[t]);
                events.dedup();
                if events.is_empty() {
                    return Err(Error::input("the environment touches no positions"));
                }
                let mut downsets = Vec::with_capacity(events.len());
                let mut acc: Mask = 0;
                for &t in &events {
                    acc |= 1 << t;
                    downsets.push(acc);
                }
                sequence_representation_along(map, &downsets, tol).map_err(|e| {
                    Error::precondition(format!(
                        "the environment admits no slicing along the protocol order \
                         (same-position cycles cannot be composed): {e}"
                    ))
                })?
            }
        };
        let fire = slice_fire_ranks(&rep.slices, ranks)?;
        Ok(RunChain { part: 0, rep, fire })
    }
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

struct Engine {
    psi: Vec<C64>,
    factors: Vec<Factor>,
    ranks: Vec<usize>,
    gadgets: Vec<Gadget>,
    /// Squared norm lost to message contents exceeding an absorber's cap.
    dropped: f64,
}

impl Engine {
    fn new(gadgets: &[Gadget], ranks: Vec<usize>) -> Engine {
        let factors: Vec<Factor> = gadgets
            .iter()
            .enumerate()
            .map(|(i, g)| Factor { tag: Tag::Gadget(i), dim: g.dim, basis: None })
            .collect();
        let dim: usize = factors.iter().map(|f| f.dim).product();
        let mut psi = vec![c(0.0, 0.0); dim.max(1)];
        psi[0] = c(1.0, 0.0);
        Engine { psi, factors, ranks, gadgets: gadgets.to_vec(), dropped: 0.0 }
    }

    fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.dim).collect()
    }

    /// Reorders the factors so that `order` (indices into the current factor
    /// list) come last, preserving the relative order of the rest.
    fn move_to_back(&mut self, order: &[usize]) {
        let n = self.factors.len();
        let mut kept: Vec<usize> = (0..n).filter(|i| !order.contains(i)).collect();
        kept.extend_from_slice(order);
        if kept.iter().enumerate().all(|(a, &b)| a == b) {
            return;
        }
        let old_dims = self.dims();
        let old_strides = row_major_strides(&old_dims);
        let new_dims: Vec<usize> = kept.iter().map(|&i| old_dims[i]).collect();
        let mut out = vec![c(0.0, 0.0); self.psi.len()];
        let mut digits = vec![0usize; new_dims.len()];
        for (idx_new, slot) in out.iter_mut().enumerate() {
            let mut rem = idx_new;
            for (k, &d) in new_dims.iter().enumerate().rev() {
                digits[k] = rem % d;
                rem /= d;
            }
            let idx_old: usize =
                digits.iter().zip(&kept).map(|(&dg, &i)| dg * old_strides[i]).sum();
            *slot = self.psi[idx_old];
        }
        self.psi = out;
        self.factors = kept.iter().map(|&i| self.factors[i].clone()).collect();
    }

    /// Translates a joint index over the given leg factors into an index of
    /// `target`, or `None` when the content exceeds the target's cap.
    fn comb_table(&self, legs: &[usize], target: &FockBasis) -> Result<Vec<Option<usize>>> {
        let leg_dims: Vec<usize> = legs.iter().map(|&i| self.factors[i].dim).collect();
        let total: usize = leg_dims.iter().product();
        let mut table = Vec::with_capacity(total.max(1));
        let mut digits = vec![0usize; legs.len()];
        for idx in 0..total.max(1) {
            let mut rem = idx;
            for (k, &d) in leg_dims.iter().enumerate().rev() {
                digits[k] = rem % d;
                rem /= d;
            }
            table.push(self.translate_legs(legs, &digits, target)?);
        }
        Ok(table)
    }

    fn translate_legs(
        &self,
        legs: &[usize],
        digits: &[usize],
        target: &FockBasis,
    ) -> Result<Option<usize>> {
        let mut label: Vec<usize> = Vec::new();
        let mut regs = vec![0usize; target.reg_wires().len()];
        for (&fi, &digit) in legs.iter().zip(digits) {
            let f = &self.factors[fi];
            let lb = f.basis.as_ref().expect("leg factor carries a basis");
            let (slots, leg_regs) = lb.decode(digit);
            for &s in slots {
                let sl = lb.slot(s);
                let name = &lb.wires()[sl.wire].name;
                let wi = match target.wire_index(name) {
                    Ok(wi) => wi,
                    Err(_) => return Ok(None),
                };
                match target.slot_of(wi, sl.level, sl.pos) {
                    Ok(ts) => label.push(ts),
                    Err(_) => return Ok(None),
                }
            }
            for (k, &v) in lb.reg_wires().iter().zip(&leg_regs) {
                let name = &lb.wires()[*k].name;
                let wi = match target.wire_index(name) {
                    Ok(wi) => wi,
                    Err(_) => return Ok(None),
                };
                let pos = target
                    .reg_wires()
                    .iter()
                    .position(|&rw| rw == wi)
                    .ok_or_else(|| Error::input(format!("wire {name:?} is not a register")))?;
                regs[pos] = v;
            }
        }
        match target.index_of(&label, &regs) {
            Ok(i) => Ok(Some(i)),
            Err(_) => Ok(None),
        }
    }

    /// Per-emission-index flat offsets into the new leg factors, plus the
    /// new factors themselves, for one isometry's output basis.
    fn split_table(&self, out_b: &FockBasis) -> Result<(Vec<Factor>, Vec<usize>)> {
        let mut new_factors = Vec::new();
        for (wire, pos) in basis_legs(out_b) {
            let lb = restricted_wire(out_b, &wire, pos)?;
            if lb.dim() <= 1 {
                continue;
            }
            new_factors.push(Factor { tag: Tag::Leg { wire, pos }, dim: lb.dim(), basis: Some(lb) });
        }
        let leg_dims: Vec<usize> = new_factors.iter().map(|f| f.dim).collect();
        let strides = row_major_strides(&leg_dims);
        let mut table = Vec::with_capacity(out_b.dim());
        for idx in 0..out_b.dim() {
            let (slots, regs) = out_b.decode(idx);
            let mut flat = 0usize;
            for (k, f) in new_factors.iter().enumerate() {
                let lb = f.basis.as_ref().unwrap();
                let (wire, pos) = match &f.tag {
                    Tag::Leg { wire, pos } => (wire, *pos),
                    _ => unreachable!(),
                };
                let mut leg_label = Vec::new();
                for &s in slots {
                    let sl = out_b.slot(s);
                    if &out_b.wires()[sl.wire].name == wire && sl.pos == pos {
                        leg_label.push(lb.slot_of(0, sl.level, pos)?);
                    }
                }
                let mut leg_regs = Vec::new();
                if !lb.reg_wires().is_empty() {
                    let wi = out_b.wire_index(wire)?;
                    let rp = out_b
                        .reg_wires()
                        .iter()
                        .position(|&rw| rw == wi)
                        .ok_or_else(|| Error::input(format!("wire {wire:?} is not a register")))?;
                    leg_regs.push(regs[rp]);
                }
                flat += lb.index_of(&leg_label, &leg_regs)? * strides[k];
            }
            table.push(flat);
        }
        Ok((new_factors, table))
    }

    fn apply_isometry(&mut self, chain: &RunChain, j: usize) -> Result<()> {
        let rep = &chain.rep;
        let in_b = &rep.in_bases[j];
        let out_b = &rep.out_bases[j];
        let alpha_new = rep.anc_dims[j + 1];

        let anc_idx = self.factors.iter().position(|f| f.tag == Tag::Anc(chain.part));
        let alpha_old = anc_idx.map_or(1, |i| self.factors[i].dim);
        if alpha_old != rep.anc_dims[j] {
            return Err(Error::numerical("internal ancilla bookkeeping out of step"));
        }

        let mut absorb: Vec<usize> = Vec::new();
        for (wire, pos) in basis_legs(in_b) {
            if let Some(fi) = self
                .factors
                .iter()
                .position(|f| f.tag == Tag::Leg { wire: wire.clone(), pos })
            {
                absorb.push(fi);
            }
        }

        let mut back: Vec<usize> = Vec::new();
        back.extend(anc_idx);
        back.extend(absorb.iter().copied());
        self.move_to_back(&back);

        let n_gathered = back.len();
        let kept = self.factors[..self.factors.len() - n_gathered].to_vec();
        let d_rest: usize = kept.iter().map(|f| f.dim).product();
        let absorb_now: Vec<usize> =
            (self.factors.len() - absorb.len()..self.factors.len()).collect();
        let d_legs: usize = absorb_now.iter().map(|&i| self.factors[i].dim).product::<usize>().max(1);

        let comb = self.comb_table(&absorb_now, in_b)?;
        let (out_factors, split) = self.split_table(out_b)?;
        let d_out_total: usize = out_factors.iter().map(|f| f.dim).product::<usize>().max(1);

        let v = &rep.isometries[j];
        let d_in = in_b.dim();
        if v.ncols() != alpha_old * d_in || v.nrows() != out_b.dim() * alpha_new {
            return Err(Error::numerical("isometry dimensions out of step with its slice"));
        }
        let mut col_nz: Vec<Vec<(usize, C64)>> = vec![Vec::new(); v.ncols()];
        for col in 0..v.ncols() {
            for row in 0..v.nrows() {
                let x = v[(row, col)];
                if x.norm_sqr() > 1e-30 {
                    col_nz[col].push((row, x));
                }
            }
        }

        let d_new = d_rest * d_out_total * alpha_new;
        let mut out = vec![c(0.0, 0.0); d_new];
        for r in 0..d_rest {
            for a in 0..alpha_old {
                let base = (r * alpha_old + a) * d_legs;
                for lt in 0..d_legs {
                    let amp = self.psi[base + lt];
                    if amp.norm_sqr() < 1e-300 {
                        continue;
                    }
                    let in_idx = match comb[lt] {
                        Some(i) => i,
                        None => {
                            self.dropped += amp.norm_sqr();
                            continue;
                        }
                    };
                    for &(row, x) in &col_nz[a * d_in + in_idx] {
                        let out_idx = row / alpha_new;
                        let a2 = row % alpha_new;
                        out[(r * d_out_total + split[out_idx]) * alpha_new + a2] += x * amp;
                    }
                }
            }
        }

        let mut factors = kept;
        let emitted: Vec<usize> = (factors.len()..factors.len() + out_factors.len()).collect();
        factors.extend(out_factors);
        if alpha_new > 1 {
            factors.push(Factor { tag: Tag::Anc(chain.part), dim: alpha_new, basis: None });
        }
        self.psi = out;
        self.factors = factors;

        for fi in emitted {
            self.run_gadgets(fi)?;
        }
        Ok(())
    }

    /// Applies every gadget watching the wire of the freshly emitted leg
    /// factor at index `fi`.
    fn run_gadgets(&mut self, fi: usize) -> Result<()> {
        let (wire, pos) = match &self.factors[fi].tag {
            Tag::Leg { wire, pos } => (wire.clone(), *pos),
            _ => return Ok(()),
        };
        let watchers: Vec<usize> =
            (0..self.gadgets.len()).filter(|&g| self.gadgets[g].wire == wire).collect();
        if watchers.is_empty() {
            return Ok(());
        }
        let lb = self.factors[fi].basis.clone().expect("leg factor carries a basis");
        let counts: Vec<usize> = (0..lb.dim()).map(|i| lb.decode(i).0.len()).collect();
        for g in watchers {
            let gi = self
                .factors
                .iter()
                .position(|f| f.tag == Tag::Gadget(g))
                .expect("gadget factors persist for the whole run");
            let dims = self.dims();
            let strides = row_major_strides(&dims);
            let (sg, dg) = (strides[gi], dims[gi]);
            let (sl, dl) = (strides[fi], dims[fi]);
            let mut out = vec![c(0.0, 0.0); self.psi.len()];
            for (idx, &amp) in self.psi.iter().enumerate() {
                if amp.norm_sqr() < 1e-300 {
                    continue;
                }
                let gv = (idx / sg) % dg;
                let cnt = counts[(idx / sl) % dl];
                let gv2 = match self.gadgets[g].kind {
                    GadgetKind::Counter => {
                        let n = gv + cnt;
                        if n >= dg {
                            return Err(Error::resource(format!(
                                "counter on wire {wire:?} overflows its dimension {dg}"
                            )));
                        }
                        n
                    }
                    GadgetKind::FirstEvent => {
                        if gv == 0 && cnt > 0 {
                            let n = self.ranks[pos] + 1;
                            if n >= dg {
                                return Err(Error::resource(format!(
                                    "first-event register on wire {wire:?} overflows its dimension {dg}"
                                )));
                            }
                            n
                        } else {
                            gv
                        }
                    }
                };
                out[idx + (gv2 - gv) * sg] += amp;
            }
            self.psi = out;
        }
        Ok(())
    }
}

fn chosen_ops<'a>(p: &'a Protocol, settings: &[&str]) -> Result<Vec<&'a AgentOperation>> {
    let parts = p.participants();
    if settings.len() != parts.len() {
        return Err(Error::input(format!(
            "expected {} settings (past, agents, future), got {}",
            parts.len(),
            settings.len()
        )));
    }
    parts.iter().zip(settings).map(|(a, s)| a.op(s)).collect()
}

/// Composes the protocol under the given settings, additionally threading
/// the classical gadget registers through every emission on their wires.
pub fn compose_with_gadgets(
    p: &Protocol,
    settings: &[&str],
    gadgets: &[Gadget],
) -> Result<Composed> {
    let st = &p.spacetime;
    let t_res = p.t_res()?;
    let parts = p.participants();
    let ops = chosen_ops(p, settings)?;
    let ranks = position_ranks(st);

    let mut emittable: Vec<String> =
        p.process.out_basis().wires().iter().map(|w| w.name.clone()).collect();
    for op in &ops {
        emittable.extend(op.map.out_basis.wires().iter().map(|w| w.name.clone()));
    }
    for g in gadgets {
        if !emittable.iter().any(|w| w == &g.wire) {
            return Err(Error::input(format!("gadget watches unknown wire {:?}", g.wire)));
        }
        if g.dim < 2 {
            return Err(Error::input("gadget registers need dimension at least 2"));
        }
        if g.kind == GadgetKind::FirstEvent && g.dim < st.len() + 1 {
            return Err(Error::input(format!(
                "first-event register needs dimension {} to index every position",
                st.len() + 1
            )));
        }
    }

    let mut chains = Vec::with_capacity(parts.len() + 1);
    chains.push(RunChain::build_for_process(p, &ranks, DEFAULT_TOL)?);
    for (k, a) in parts.iter().enumerate() {
        if let Some(chain) = RunChain::build_for_agent(a, settings[k], k + 1, &ranks, DEFAULT_TOL)? {
            chains.push(chain);
        }
    }

    let mut eng = Engine::new(gadgets, ranks);
    for r in 0..st.len() {
        for chain in &chains {
            if let Some(j) = chain.fire.iter().position(|&fr| fr == r) {
                eng.apply_isometry(chain, j)?;
            }
        }
    }
    for chain in &chains {
        eng.apply_isometry(chain, chain.rep.slices.len())?;
    }

    if eng.dropped > DEFAULT_TOL {
        return Err(Error::precondition(format!(
            "the protocol exceeds its message-number bounds (weight {:.3e} beyond a cap)",
            eng.dropped
        )));
    }

    let mut result_order: Vec<usize> = Vec::new();
    for a in &parts {
        let name = a.result_wire_name();
        if let Some(fi) = eng
            .factors
            .iter()
            .position(|f| matches!(&f.tag, Tag::Leg { wire, pos } if wire == &name && *pos == t_res))
        {
            result_order.push(fi);
        }
    }
    for (fi, f) in eng.factors.iter().enumerate() {
        match &f.tag {
            Tag::Leg { wire, pos } => {
                if !result_order.contains(&fi) {
                    return Err(Error::input(format!(
                        "message on wire {wire:?} at position {:?} is never absorbed",
                        st.id(*pos)
                    )));
                }
            }
            Tag::Anc(_) | Tag::Gadget(_) => {}
        }
    }

    let mut order = result_order.clone();
    for g in 0..gadgets.len() {
        order.push(
            eng.factors
                .iter()
                .position(|f| f.tag == Tag::Gadget(g))
                .expect("gadget factors persist for the whole run"),
        );
    }
    let keep = order.len();
    eng.move_to_back(&order);

    let dims = eng.dims();
    let d_keep: usize = dims[dims.len() - keep..].iter().product::<usize>().max(1);
    let d_trace = eng.psi.len() / d_keep;

    let mut rho = zeros(d_keep, d_keep);
    for i in 0..d_keep {
        for jj in 0..d_keep {
            let mut acc = c(0.0, 0.0);
            for a in 0..d_trace {
                acc += eng.psi[a * d_keep + i] * eng.psi[a * d_keep + jj].conj();
            }
            rho[(i, jj)] = acc;
        }
    }

    Ok(Composed {
        rho,
        result_dims: ops.iter().map(|o| o.outcome_dim).collect(),
        gadget_dims: gadgets.iter().map(|g| g.dim).collect(),
    })
}

/// Composes the protocol under the given settings (one per participant:
/// past, agents in order, future) into the joint result-register state.
pub fn compose_protocol(p: &Protocol, settings: &[&str]) -> Result<Composed> {
    compose_with_gadgets(p, settings, &[])
}

/// Independent composition path: embeds every map at a shared network-wide
/// cap and contracts the whole network with the dense loop composition. The
/// cap must cover the total message count across all wires at once, so this
/// only reaches small protocols; it exists as a cross-check of
/// [`compose_protocol`].
pub fn compose_protocol_dense(
    p: &Protocol,
    settings: &[&str],
    network_cap: usize,
) -> Result<Composed> {
    let ops = chosen_ops(p, settings)?;
    let parts = p.participants();
    let mut maps = Vec::with_capacity(ops.len() + 1);
    let process = match &p.process {
        ProcessRep::Monolithic { map, .. } => map.clone(),
        ProcessRep::Sequence(rep) => rep.to_map()?,
    };
    maps.push(process.embedded_at_caps(network_cap, network_cap)?);
    for op in &ops {
        maps.push(op.map.embedded_at_caps(network_cap, network_cap)?);
    }
    let refs: Vec<&QuantumMap> = maps.iter().collect();
    let whole = crate::compose::full_loop(&refs)?;
    if whole.in_basis.dim() != 1 {
        return Err(Error::input(format!(
            "the network leaves inputs unmatched: {:?}",
            whole.in_basis.wires().iter().map(|w| &w.name).collect::<Vec<_>>()
        )));
    }
    let rho_sorted = whole.apply(&CMat::from_element(1, 1, c(1.0, 0.0)));

    let out_b = &whole.out_basis;
    for w in out_b.wires() {
        if w.kind != WireKind::Register {
            return Err(Error::input(format!("wire {:?} is never absorbed", w.name)));
        }
    }
    let mut axis_wires: Vec<String> = Vec::new();
    let mut axis_dims: Vec<usize> = Vec::new();
    for (k, a) in parts.iter().enumerate() {
        let op = a.op(settings[k])?;
        if op.outcome_dim > 1 {
            axis_wires.push(a.result_wire_name());
            axis_dims.push(op.outcome_dim);
        }
    }
    let d = axis_dims.iter().product::<usize>().max(1);
    if rho_sorted.nrows() != d {
        return Err(Error::numerical("result register dimensions out of step"));
    }
    let mut index_map = Vec::with_capacity(d);
    let mut digits = vec![0usize; axis_dims.len()];
    for i in 0..d {
        let mut rem = i;
        for (k, &ad) in axis_dims.iter().enumerate().rev() {
            digits[k] = rem % ad;
            rem /= ad;
        }
        let mut regs = vec![0usize; out_b.reg_wires().len()];
        for (k, w) in axis_wires.iter().enumerate() {
            let wi = out_b.wire_index(w)?;
            let rp = out_b
                .reg_wires()
                .iter()
                .position(|&rw| rw == wi)
                .ok_or_else(|| Error::input(format!("wire {w:?} is not a register")))?;
            regs[rp] = digits[k];
        }
        index_map.push(out_b.index_of(&[], &regs)?);
    }
    let mut rho = zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            rho[(i, j)] = rho_sorted[(index_map[i], index_map[j])];
        }
    }
    Ok(Composed {
        rho,
        result_dims: ops.iter().map(|o| o.outcome_dim).collect(),
        gadget_dims: vec![],
    })
}

/// A joint distribution over every participant's outcome, in mixed-radix
/// layout over `dims` (participant order, trivial outcomes included).
#[derive(Clone, Debug)]
pub struct Distribution {
    pub dims: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn prob(&self, outcome: &[usize]) -> f64 {
        assert_eq!(outcome.len(), self.dims.len(), "outcome arity mismatch");
        let mut idx = 0usize;
        for (o, d) in outcome.iter().zip(&self.dims) {
            assert!(o < d, "outcome out of range");
            idx = idx * d + o;
        }
        self.probs[idx]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Diagonal of the composed result-register state as a joint outcome
/// distribution.
pub fn outcome_distribution(p: &Protocol, settings: &[&str]) -> Result<Distribution> {
    let comp = compose_protocol(p, settings)?;
    let dims = comp.result_dims.clone();
    let total: usize = dims.iter().product::<usize>().max(1);
    let present: Vec<usize> = dims.iter().copied().filter(|&d| d > 1).collect();
    let mut probs = Vec::with_capacity(total);
    let mut digits = vec![0usize; dims.len()];
    for idx in 0..total {
        let mut rem = idx;
        for (k, &d) in dims.iter().enumerate().rev() {
            digits[k] = rem % d;
            rem /= d;
        }
        let mut i = 0usize;
        let mut pk = 0usize;
        for (k, &d) in dims.iter().enumerate() {
            if d > 1 {
                i = i * present[pk] + digits[k];
                pk += 1;
            }
        }
        probs.push(comp.rho[(i, i)].re);
    }
    Ok(Distribution { dims, probs })
}

/// Success probability of the guess-your-neighbour's-input game between two
/// agents, each with binary settings "0"/"1" and binary outcomes, averaged
/// uniformly over the four setting pairs. Every other participant must have
/// exactly one operation.
pub fn gyni_value(p: &Protocol, alice: usize, bob: usize) -> Result<f64> {
    let parts = p.participants();
    if alice >= p.agents.len() || bob >= p.agents.len() || alice == bob {
        return Err(Error::input("the game needs two distinct interior agents"));
    }
    let a_ax = 1 + alice;
    let b_ax = 1 + bob;
    for &ax in &[a_ax, b_ax] {
        let a = parts[ax];
        for s in ["0", "1"] {
            let op = a.op(s)?;
            if op.outcome_dim != 2 {
                return Err(Error::input(format!(
                    "agent {:?} needs binary outcomes to play the game",
                    a.name
                )));
            }
        }
    }
    let mut base: Vec<&str> = Vec::with_capacity(parts.len());
    for (k, a) in parts.iter().enumerate() {
        if k == a_ax || k == b_ax {
            base.push("0");
        } else {
            if a.ops.len() != 1 {
                return Err(Error::input(format!(
                    "participant {:?} must have a single fixed operation",
                    a.name
                )));
            }
            base.push(&a.ops[0].setting);
        }
    }
    let mut total = 0.0;
    for x in 0..2usize {
        for y in 0..2usize {
            let mut settings = base.clone();
            settings[a_ax] = if x == 0 { "0" } else { "1" };
            settings[b_ax] = if y == 0 { "0" } else { "1" };
            let dist = outcome_distribution(p, &settings)?;
            let n = dist.dims.len();
            let mut digits = vec![0usize; n];
            for (idx, &pr) in dist.probs.iter().enumerate() {
                let mut rem = idx;
                for (k, &d) in dist.dims.iter().enumerate().rev() {
                    digits[k] = rem % d;
                    rem /= d;
                }
                if digits[a_ax] == y && digits[b_ax] == x {
                    total += pr;
                }
            }
        }
    }
    Ok(total / 4.0)
}

/// How the settings and outcomes of one protocol map onto another's:
/// `settings[k]` pairs each setting of participant `k` in the first protocol
/// with a setting in the second, and `result_encodings[k]`, when present,
/// is the fixed matrix carrying the second protocol's outcome space onto the
/// first's for that participant.
#[derive(Clone, Debug)]
pub struct Correspondence {
    pub settings: Vec<Vec<(String, String)>>,
    pub result_encodings: Vec<Option<CMat>>,
}

impl Correspondence {
    /// Identity correspondence: same settings, same outcomes.
    pub fn identity(p: &Protocol) -> Correspondence {
        let settings = p
            .participants()
            .iter()
            .map(|a| a.ops.iter().map(|o| (o.setting.clone(), o.setting.clone())).collect())
            .collect();
        let n = p.participants().len();
        Correspondence { settings, result_encodings: vec![None; n] }
    }
}

#[derive(Clone, Debug)]
pub struct EquivReport {
    pub pass: bool,
    pub checked: usize,
    pub max_distance: f64,
    pub first_mismatch: Option<(Vec<String>, f64)>,
}

/// Checks that two protocols produce the same result-register state for
/// every tuple of corresponding settings, up to the declared outcome
/// re-encodings.
pub fn behavioural_equivalence(
    p1: &Protocol,
    p2: &Protocol,
    corr: &Correspondence,
    tol: f64,
) -> Result<EquivReport> {
    let parts1 = p1.participants();
    let parts2 = p2.participants();
    if parts1.len() != parts2.len() {
        return Err(Error::input("the protocols have different numbers of participants"));
    }
    if corr.settings.len() != parts1.len() || corr.result_encodings.len() != parts1.len() {
        return Err(Error::input("the correspondence must cover every participant"));
    }
    for (k, pairs) in corr.settings.iter().enumerate() {
        let (a1, a2) = (parts1[k], parts2[k]);
        if pairs.len() != a1.ops.len() || pairs.len() != a2.ops.len() {
            return Err(Error::input(format!(
                "participant {:?}: the setting correspondence must be a bijection",
                a1.name
            )));
        }
        let mut seen1 = std::collections::HashSet::new();
        let mut seen2 = std::collections::HashSet::new();
        for (s1, s2) in pairs {
            a1.op(s1)?;
            a2.op(s2)?;
            if !seen1.insert(s1.as_str()) || !seen2.insert(s2.as_str()) {
                return Err(Error::input(format!(
                    "participant {:?}: the setting correspondence must be a bijection",
                    a1.name
                )));
            }
        }
    }

    let counts: Vec<usize> = corr.settings.iter().map(|p| p.len()).collect();
    let tuples: usize = counts.iter().product();
    let mut report =
        EquivReport { pass: true, checked: 0, max_distance: 0.0, first_mismatch: None };
    let mut choice = vec![0usize; counts.len()];
    for t in 0..tuples {
        let mut rem = t;
        for (k, &cn) in counts.iter().enumerate().rev() {
            choice[k] = rem % cn;
            rem /= cn;
        }
        let settings1: Vec<&str> =
            choice.iter().enumerate().map(|(k, &i)| corr.settings[k][i].0.as_str()).collect();
        let settings2: Vec<&str> =
            choice.iter().enumerate().map(|(k, &i)| corr.settings[k][i].1.as_str()).collect();
        let c1 = compose_protocol(p1, &settings1)?;
        let c2 = compose_protocol(p2, &settings2)?;

        let mut enc: Option<CMat> = None;
        for k in 0..parts1.len() {
            let d1 = parts1[k].op(settings1[k])?.outcome_dim;
            let d2 = parts2[k].op(settings2[k])?.outcome_dim;
            if d1 == 1 && d2 == 1 {
                continue;
            }
            let block = match &corr.result_encodings[k] {
                Some(u) => {
                    if u.nrows() != d1 || u.ncols() != d2 {
                        return Err(Error::input(format!(
                            "encoding for participant {:?} must be {d1}x{d2}",
                            parts1[k].name
                        )));
                    }
                    u.clone()
                }
                None => {
                    if d1 != d2 {
                        return Err(Error::input(format!(
                            "participant {:?} has outcome dimensions {d1} and {d2}; an encoding is required",
                            parts1[k].name
                        )));
                    }
                    crate::linalg::eye(d1)
                }
            };
            enc = Some(match enc {
                Some(e) => kron(&e, &block),
                None => block,
            });
        }
        let rho2 = match &enc {
            Some(e) => e * &c2.rho * e.adjoint(),
            None => c2.rho.clone(),
        };
        let dist = frob_dist(&c1.rho, &rho2);
        report.checked += 1;
        if dist > report.max_distance {
            report.max_distance = dist;
        }
        if dist > tol && report.first_mismatch.is_none() {
            report.pass = false;
            report.first_mismatch =
                Some((settings1.iter().map(|s| s.to_string()).collect(), dist));
        }
    }
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct ProtocolJson {
    spacetime: serde_json::Value,
    process: ProcessJson,
    past: AgentJson,
    agents: Vec<AgentJson>,
    future: AgentJson,
}

#[derive(Serialize, Deserialize)]
struct AgentJson {
    name: String,
    in_dim: usize,
    in_positions: Vec<String>,
    out_dim: usize,
    out_positions: Vec<String>,
    n_max: usize,
    ops: Vec<OpJson>,
}

#[derive(Serialize, Deserialize)]
struct OpJson {
    setting: String,
    outcome_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<MapKind>,
    kraus: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct ProcessJson {
    n_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<MapKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kraus: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chi: Option<Vec<(Vec<String>, Vec<String>)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sequence: Option<SequenceJson>,
}

#[derive(Serialize, Deserialize)]
struct SequenceJson {
    slices: Vec<Vec<String>>,
    anc_dims: Vec<usize>,
    isometries: Vec<Vec<[f64; 2]>>,
}

fn mat_to_flat(m: &CMat) -> Vec<[f64; 2]> {
    let mut v = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for cc in 0..m.ncols() {
            let x = m[(r, cc)];
            v.push([x.re, x.im]);
        }
    }
    v
}

fn flat_to_mat(rows: usize, cols: usize, v: &[[f64; 2]]) -> Result<CMat> {
    if v.len() != rows * cols {
        return Err(Error::input(format!(
            "matrix payload holds {} entries, expected {rows}x{cols}",
            v.len()
        )));
    }
    let mut m = zeros(rows, cols);
    for r in 0..rows {
        for cc in 0..cols {
            let [re, im] = v[r * cols + cc];
            m[(r, cc)] = c(re, im);
        }
    }
    Ok(m)
}

fn positions_to_ids(st: &Spacetime, positions: &[usize]) -> Vec<String> {
    positions.iter().map(|&t| st.id(t).to_string()).collect()
}

fn ids_to_positions(st: &Spacetime, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|i| {
            st.index_of(i).ok_or_else(|| Error::input(format!("unknown poset element {i:?}")))
        })
        .collect()
}

fn agent_to_json(st: &Spacetime, a: &AgentSpec) -> AgentJson {
    AgentJson {
        name: a.name.clone(),
        in_dim: a.in_dim,
        in_positions: positions_to_ids(st, &a.in_positions),
        out_dim: a.out_dim,
        out_positions: positions_to_ids(st, &a.out_positions),
        n_max: a.n_max,
        ops: a
            .ops
            .iter()
            .map(|o| OpJson {
                setting: o.setting.clone(),
                outcome_dim: o.outcome_dim,
                kind: Some(o.map.kind),
                kraus: o.map.kraus.iter().map(mat_to_flat).collect(),
            })
            .collect(),
    }
}

fn agent_from_json(st: &Spacetime, j: &AgentJson, t_res: usize) -> Result<AgentSpec> {
    let mut a = AgentSpec {
        name: j.name.clone(),
        in_dim: j.in_dim,
        in_positions: ids_to_positions(st, &j.in_positions)?,
        out_dim: j.out_dim,
        out_positions: ids_to_positions(st, &j.out_positions)?,
        n_max: j.n_max,
        ops: Vec::new(),
    };
    for oj in &j.ops {
        let in_b = a.op_in_basis()?;
        let out_b = a.op_out_basis(oj.outcome_dim, t_res)?;
        let kraus = oj
            .kraus
            .iter()
            .map(|k| flat_to_mat(out_b.dim(), in_b.dim(), k))
            .collect::<Result<Vec<_>>>()?;
        let map =
            QuantumMap::from_kraus(in_b, out_b, kraus, oj.kind.unwrap_or(MapKind::Normalised))?;
        a.ops.push(AgentOperation {
            setting: oj.setting.clone(),
            map,
            outcome_dim: oj.outcome_dim,
        });
    }
    Ok(a)
}

fn mask_to_ids(st: &Spacetime, mask: Mask) -> Vec<String> {
    st.elements_of(mask).iter().map(|&t| st.id(t).to_string()).collect()
}

fn ids_to_mask(st: &Spacetime, ids: &[String]) -> Result<Mask> {
    Ok(st.mask_of(&ids_to_positions(st, ids)?))
}

/// Serialises the protocol, its poset, and every map as JSON.
pub fn protocol_to_json(p: &Protocol) -> Result<String> {
    let st = &p.spacetime;
    let process = match &p.process {
        ProcessRep::Monolithic { map, chi } => ProcessJson {
            n_max: map.in_basis.n_max(),
            kind: Some(map.kind),
            kraus: Some(map.kraus.iter().map(mat_to_flat).collect()),
            chi: Some(
                chi.entries().map(|(t, x)| (mask_to_ids(st, t), mask_to_ids(st, x))).collect(),
            ),
            sequence: None,
        },
        ProcessRep::Sequence(rep) => ProcessJson {
            n_max: rep.src_in.n_max(),
            kind: None,
            kraus: None,
            chi: None,
            sequence: Some(SequenceJson {
                slices: rep.slices.iter().map(|&s| mask_to_ids(st, s)).collect(),
                anc_dims: rep.anc_dims.clone(),
                isometries: rep.isometries.iter().map(mat_to_flat).collect(),
            }),
        },
    };
    let j = ProtocolJson {
        spacetime: serde_json::from_str(&st.to_json())
            .map_err(|e| Error::input(format!("spacetime serialisation failed: {e}")))?,
        process,
        past: agent_to_json(st, &p.past),
        agents: p.agents.iter().map(|a| agent_to_json(st, a)).collect(),
        future: agent_to_json(st, &p.future),
    };
    serde_json::to_string_pretty(&j).map_err(|e| Error::input(format!("serialisation failed: {e}")))
}

/// Parses a protocol serialised by [`protocol_to_json`]. The environment's
/// wire bases are rebuilt from the agent interfaces, so the payload only
/// carries matrices, positions, and dimensions.
pub fn protocol_from_json(text: &str) -> Result<Protocol> {
    let j: ProtocolJson = serde_json::from_str(text)
        .map_err(|e| Error::input(format!("protocol JSON malformed: {e}")))?;
    let st_text = serde_json::to_string(&j.spacetime)
        .map_err(|e| Error::input(format!("protocol JSON malformed: {e}")))?;
    let st = Spacetime::from_json(&st_text)?;
    let t_res = st.result.ok_or_else(|| Error::input("no designated result position"))?;

    let past = agent_from_json(&st, &j.past, t_res)?;
    let agents: Vec<AgentSpec> =
        j.agents.iter().map(|a| agent_from_json(&st, a, t_res)).collect::<Result<_>>()?;
    let future = agent_from_json(&st, &j.future, t_res)?;

    let mut shell = Protocol {
        spacetime: st,
        process: ProcessRep::Sequence(SequenceRep {
            slices: vec![],
            isometries: vec![],
            in_bases: vec![],
            out_bases: vec![],
            anc_dims: vec![],
            src_in: enumerate_basis(vec![], j.process.n_max)?,
            src_out: enumerate_basis(vec![], j.process.n_max)?,
        }),
        past,
        agents,
        future,
    };
    let src_in = enumerate_basis(shell.process_in_wires(), j.process.n_max)?;
    let src_out = enumerate_basis(shell.process_out_wires(), j.process.n_max)?;
    let st = &shell.spacetime;

    shell.process = match (&j.process.kraus, &j.process.sequence) {
        (Some(kraus), None) => {
            let mats = kraus
                .iter()
                .map(|k| flat_to_mat(src_out.dim(), src_in.dim(), k))
                .collect::<Result<Vec<_>>>()?;
            let chi_entries = j
                .process
                .chi
                .as_ref()
                .ok_or_else(|| Error::input("an explicit environment needs its causality table"))?
                .iter()
                .map(|(t, x)| Ok((ids_to_mask(st, t)?, ids_to_mask(st, x)?)))
                .collect::<Result<Vec<_>>>()?;
            let map = QuantumMap::from_kraus(
                src_in,
                src_out,
                mats,
                j.process.kind.unwrap_or(MapKind::Normalised),
            )?;
            ProcessRep::Monolithic { map, chi: CausalityFunction::from_table(chi_entries) }
        }
        (None, Some(seq)) => {
            let slices = seq
                .slices
                .iter()
                .map(|ids| ids_to_mask(st, ids))
                .collect::<Result<Vec<Mask>>>()?;
            let k = slices.len();
            if seq.anc_dims.len() != k + 2 {
                return Err(Error::input(format!(
                    "a {k}-slice chain needs {} ancilla dimensions, got {}",
                    k + 2,
                    seq.anc_dims.len()
                )));
            }
            let trivial = enumerate_basis(vec![], j.process.n_max)?;
            let mut in_bases = vec![trivial.clone()];
            let mut out_bases = Vec::with_capacity(k + 1);
            for &s in &slices {
                in_bases.push(crate::fock::region_split(&src_in, s)?.inside);
                out_bases.push(crate::fock::region_split(&src_out, s)?.inside);
            }
            out_bases.push(trivial);
            if seq.isometries.len() != k + 1 {
                return Err(Error::input(format!(
                    "a {k}-slice chain needs {} isometries, got {}",
                    k + 1,
                    seq.isometries.len()
                )));
            }
            let isometries = seq
                .isometries
                .iter()
                .enumerate()
                .map(|(m, v)| {
                    flat_to_mat(
                        out_bases[m].dim() * seq.anc_dims[m + 1],
                        seq.anc_dims[m] * in_bases[m].dim(),
                        v,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            ProcessRep::Sequence(SequenceRep {
                slices,
                isometries,
                in_bases,
                out_bases,
                anc_dims: seq.anc_dims.clone(),
                src_in,
                src_out,
            })
        }
        _ => {
            return Err(Error::input(
                "the environment must carry either explicit Kraus data or a slice chain",
            ))
        }
    };
    Ok(shell)
}
