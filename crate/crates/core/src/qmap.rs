//! Quantum channels between enumerated Fock bases: Choi tools, causality and
//! pseudo-causality validation, purification, sequence representations, and
//! the canonical one-message constructions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::fock::{enumerate_basis, region_split, FockBasis, WireRole, WireSpec};
use crate::linalg::{c, complete_isometry, cr, eye, frob_dist, is_isometry, svd, zeros, CMat};
use crate::spacetime::{CausalityFunction, Mask, Spacetime};
use crate::{Error, Result, DEFAULT_TOL, RANK_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    Normalised,
    Subnormalised,
}

/// A completely positive map given by Kraus matrices between two enumerated
/// bases. Normalised maps are trace-preserving; subnormalised ones are
/// trace-non-increasing.
#[derive(Clone, Debug)]
pub struct QuantumMap {
    pub in_basis: FockBasis,
    pub out_basis: FockBasis,
    pub kraus: Vec<CMat>,
    pub kind: MapKind,
    pub tag: Option<String>,
}

pub(crate) const CONSTRUCT_TOL: f64 = 1e-6;

impl QuantumMap {
    pub fn from_kraus(
        in_basis: FockBasis,
        out_basis: FockBasis,
        kraus: Vec<CMat>,
        kind: MapKind,
    ) -> Result<Self> {
        if kraus.is_empty() {
            return Err(Error::input("a map needs at least one Kraus matrix"));
        }
        for k in &kraus {
            if k.nrows() != out_basis.dim() || k.ncols() != in_basis.dim() {
                return Err(Error::input(format!(
                    "Kraus shape {}x{} does not match bases {}x{}",
                    k.nrows(),
                    k.ncols(),
                    out_basis.dim(),
                    in_basis.dim()
                )));
            }
        }
        let map = QuantumMap { in_basis, out_basis, kraus, kind, tag: None };
        let defect = map.normalisation_defect();
        match kind {
            MapKind::Normalised => {
                if defect > CONSTRUCT_TOL {
                    return Err(Error::input(format!(
                        "Kraus set is not trace-preserving (defect {defect:.3e})"
                    )));
                }
            }
            MapKind::Subnormalised => {
                let excess = map.trace_excess();
                if excess > CONSTRUCT_TOL {
                    return Err(Error::input(format!(
                        "Kraus set increases trace (excess {excess:.3e})"
                    )));
                }
            }
        }
        Ok(map)
    }

    /// Constructor for callers that have already established the kind by
    /// construction; skips the trace condition checks of `from_kraus`.
    pub(crate) fn from_kraus_trusted(
        in_basis: FockBasis,
        out_basis: FockBasis,
        kraus: Vec<CMat>,
        kind: MapKind,
    ) -> Self {
        debug_assert!(!kraus.is_empty());
        debug_assert!(kraus
            .iter()
            .all(|k| k.nrows() == out_basis.dim() && k.ncols() == in_basis.dim()));
        QuantumMap { in_basis, out_basis, kraus, kind, tag: None }
    }

    pub fn from_isometry(in_basis: FockBasis, out_basis: FockBasis, v: CMat) -> Result<Self> {
        if !is_isometry(&v, CONSTRUCT_TOL) {
            return Err(Error::input("matrix is not an isometry"));
        }
        QuantumMap::from_kraus(in_basis, out_basis, vec![v], MapKind::Normalised)
    }

    pub fn identity(basis: &FockBasis) -> Self {
        QuantumMap {
            in_basis: basis.clone(),
            out_basis: basis.clone(),
            kraus: vec![eye(basis.dim())],
            kind: MapKind::Normalised,
            tag: None,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn din(&self) -> usize {
        self.in_basis.dim()
    }

    pub fn dout(&self) -> usize {
        self.out_basis.dim()
    }

    /// ‖Σ K†K − 1‖_F.
    pub fn normalisation_defect(&self) -> f64 {
        let mut s = zeros(self.din(), self.din());
        for k in &self.kraus {
            s += k.adjoint() * k;
        }
        frob_dist(&s, &eye(self.din()))
    }

    /// Largest eigenvalue of Σ K†K − 1 (positive when the map can increase
    /// trace on some state).
    pub fn trace_excess(&self) -> f64 {
        let mut s = zeros(self.din(), self.din());
        for k in &self.kraus {
            s += k.adjoint() * k;
        }
        s -= eye(self.din());
        -crate::linalg::min_eig_hermitian(&(-s))
    }

    pub fn is_cptp(&self, tol: f64) -> bool {
        self.normalisation_defect() <= tol
    }

    pub fn apply(&self, rho: &CMat) -> CMat {
        let mut out = zeros(self.dout(), self.dout());
        for k in &self.kraus {
            out += k * rho * k.adjoint();
        }
        out
    }

    /// Sequential composition: `next` after `self`.
    pub fn then(&self, next: &QuantumMap) -> Result<QuantumMap> {
        if next.din() != self.dout() {
            return Err(Error::input(format!(
                "cannot compose: intermediate dimensions {} vs {}",
                self.dout(),
                next.din()
            )));
        }
        let mut kraus = Vec::with_capacity(self.kraus.len() * next.kraus.len());
        for l in &next.kraus {
            for k in &self.kraus {
                kraus.push(l * k);
            }
        }
        let kind = match (self.kind, next.kind) {
            (MapKind::Normalised, MapKind::Normalised) => MapKind::Normalised,
            _ => MapKind::Subnormalised,
        };
        let mut map = QuantumMap {
            in_basis: self.in_basis.clone(),
            out_basis: next.out_basis.clone(),
            kraus,
            kind,
            tag: None,
        };
        if map.kraus.len() > 64 {
            map = map.reduced_if_cheap();
        }
        Ok(map)
    }

    /// Runs `reduce_kraus` when the stacked decomposition is affordable,
    /// otherwise returns the map unchanged.
    pub(crate) fn reduced_if_cheap(self) -> QuantumMap {
        let k = self.kraus.len();
        let d = self.dout() * self.din();
        if k <= 1 || k > 4000 || d.saturating_mul(k) > 4_000_000 {
            return self;
        }
        self.reduce_kraus().unwrap_or(self)
    }

    /// Replaces the Kraus set by an equivalent one of minimal cardinality
    /// (the Choi rank): singular value decomposition of the stacked
    /// vectorised Kraus matrices, treating singular values below the rank
    /// threshold as zero.
    pub fn reduce_kraus(&self) -> Result<QuantumMap> {
        let k = self.kraus.len();
        if k <= 1 {
            return Ok(self.clone());
        }
        if k > 4000 {
            return Err(Error::resource(format!("Kraus reduction on {k} operators")));
        }
        let (dout, din) = (self.dout(), self.din());
        let mut stacked = zeros(dout * din, k);
        for (a, kr) in self.kraus.iter().enumerate() {
            for r in 0..dout {
                for col in 0..din {
                    stacked[(r * din + col, a)] = kr[(r, col)];
                }
            }
        }
        let dec = svd(&stacked);
        let scale = dec.s.first().copied().unwrap_or(0.0).max(1e-300);
        let mut kraus = Vec::new();
        for (e, &sig) in dec.s.iter().enumerate() {
            if sig <= RANK_TOL * scale {
                continue;
            }
            let mut m = zeros(dout, din);
            for r in 0..dout {
                for col in 0..din {
                    m[(r, col)] = dec.u[(r * din + col, e)] * cr(sig);
                }
            }
            kraus.push(m);
        }
        if kraus.is_empty() {
            kraus.push(zeros(dout, din));
        }
        Ok(QuantumMap {
            in_basis: self.in_basis.clone(),
            out_basis: self.out_basis.clone(),
            kraus,
            kind: self.kind,
            tag: self.tag.clone(),
        })
    }

    /// Choi matrix Σ_{ij} C(|i⟩⟨j|) ⊗ |i⟩⟨j| over out ⊗ in, materialised.
    pub fn choi(&self) -> Result<CMat> {
        let d = self.din() * self.dout();
        if d > 4096 {
            return Err(Error::resource(format!(
                "Choi matrix of side {d} is too large to materialise"
            )));
        }
        let din = self.din();
        let mut choi = zeros(d, d);
        for k in &self.kraus {
            for a in 0..self.dout() {
                for i in 0..din {
                    let x = k[(a, i)];
                    if x.norm_sqr() < 1e-300 {
                        continue;
                    }
                    for b in 0..self.dout() {
                        for j in 0..din {
                            let y = k[(b, j)];
                            if y.norm_sqr() < 1e-300 {
                                continue;
                            }
                            choi[(a * din + i, b * din + j)] += x * y.conj();
                        }
                    }
                }
            }
        }
        Ok(choi)
    }

    pub fn to_json(&self) -> String {
        let enc = |m: &CMat| -> Vec<[f64; 2]> {
            let mut v = Vec::with_capacity(m.nrows() * m.ncols());
            for r in 0..m.nrows() {
                for col in 0..m.ncols() {
                    v.push([m[(r, col)].re, m[(r, col)].im]);
                }
            }
            v
        };
        let raw = ChannelJson {
            in_wires: self.in_basis.wires().to_vec(),
            out_wires: self.out_basis.wires().to_vec(),
            n_max: self.in_basis.n_max(),
            kraus: self.kraus.iter().map(enc).collect(),
            kind: Some(self.kind),
            tag: self.tag.clone(),
        };
        serde_json::to_string_pretty(&raw).expect("channel serialises")
    }

    pub fn from_json(text: &str) -> Result<QuantumMap> {
        let raw: ChannelJson =
            serde_json::from_str(text).map_err(|e| Error::input(format!("channel json: {e}")))?;
        let in_basis = enumerate_basis(raw.in_wires, raw.n_max)?;
        let out_basis = enumerate_basis(raw.out_wires, raw.n_max)?;
        let (rows, cols) = (out_basis.dim(), in_basis.dim());
        let mut kraus = Vec::new();
        for flat in &raw.kraus {
            if flat.len() != rows * cols {
                return Err(Error::input(format!(
                    "Kraus entry count {} does not match {rows}x{cols}",
                    flat.len()
                )));
            }
            kraus.push(CMat::from_fn(rows, cols, |r, col| {
                let [re, im] = flat[r * cols + col];
                c(re, im)
            }));
        }
        QuantumMap::from_kraus(in_basis, out_basis, kraus, raw.kind.unwrap_or(MapKind::Normalised))
            .map(|m| match raw.tag {
                Some(t) => m.with_tag(t),
                None => m,
            })
    }
}

#[derive(Serialize, Deserialize)]
struct ChannelJson {
    in_wires: Vec<WireSpec>,
    out_wires: Vec<WireSpec>,
    n_max: usize,
    kraus: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    kind: Option<MapKind>,
    #[serde(default)]
    tag: Option<String>,
}

/// Structural equality of bases: same wires (name, dimension, positions,
/// kind) in the same order and the same truncation.
pub fn bases_same_shape(a: &FockBasis, b: &FockBasis) -> bool {
    a.n_max() == b.n_max()
        && a.wires().len() == b.wires().len()
        && a.wires().iter().zip(b.wires()).all(|(x, y)| {
            x.name == y.name && x.dim == y.dim && x.positions == y.positions && x.kind == y.kind
        })
}

/// Frobenius distance of the Choi matrices, computed block by block so the
/// full Choi matrix is never materialised.
pub fn choi_distance(a: &QuantumMap, b: &QuantumMap) -> Result<f64> {
    if a.din() != b.din() || a.dout() != b.dout() {
        return Err(Error::input("channel dimensions differ"));
    }
    let (din, dout) = (a.din(), a.dout());
    let work = din as f64 * din as f64 * dout as f64 * dout as f64
        * (a.kraus.len() + b.kraus.len()) as f64
        / 2.0;
    if work > 4e9 {
        return Err(Error::resource(format!(
            "Choi comparison needs about {work:.1e} operations"
        )));
    }
    let mut acc = 0.0;
    let mut block = zeros(dout, dout);
    for i in 0..din {
        for j in i..din {
            block.fill(c(0.0, 0.0));
            for k in &a.kraus {
                let (u, v) = (k.column(i), k.column(j));
                for r in 0..dout {
                    let ur = u[r];
                    if ur.norm_sqr() < 1e-300 {
                        continue;
                    }
                    for s in 0..dout {
                        block[(r, s)] += ur * v[s].conj();
                    }
                }
            }
            for k in &b.kraus {
                let (u, v) = (k.column(i), k.column(j));
                for r in 0..dout {
                    let ur = u[r];
                    if ur.norm_sqr() < 1e-300 {
                        continue;
                    }
                    for s in 0..dout {
                        block[(r, s)] -= ur * v[s].conj();
                    }
                }
            }
            let n2: f64 = block.iter().map(|z| z.norm_sqr()).sum();
            acc += if i == j { n2 } else { 2.0 * n2 };
        }
    }
    Ok(acc.max(0.0).sqrt())
}

pub fn maps_equal(a: &QuantumMap, b: &QuantumMap, tol: f64) -> Result<bool> {
    Ok(choi_distance(a, b)? <= tol)
}

pub fn vacuum_density(basis: &FockBasis) -> CMat {
    basis_density(basis, 0)
}

pub fn basis_density(basis: &FockBasis, idx: usize) -> CMat {
    let mut m = zeros(basis.dim(), basis.dim());
    m[(idx, idx)] = c(1.0, 0.0);
    m
}

/// Builds the channel that measures away the selected content (slots matching
/// `remove`, registers matching `reset`) and re-inserts vacuum / zero there,
/// keeping the ambient basis fixed.
fn replace_channel_by(
    basis: &FockBasis,
    remove: impl Fn(usize) -> bool,
    reset: impl Fn(usize) -> bool,
) -> QuantumMap {
    let stride = basis.reg_dims().iter().copied().max().unwrap_or(0) + 1;
    let mut groups: HashMap<Vec<usize>, Vec<(usize, usize)>> = HashMap::new();
    for idx in 0..basis.dim() {
        let (label, regs) = basis.decode(idx);
        let mut kept = Vec::new();
        let mut content = Vec::new();
        for &s in label {
            if remove(s) {
                content.push(s);
            } else {
                kept.push(s);
            }
        }
        let mut new_regs = regs.clone();
        for (r, v) in new_regs.iter_mut().enumerate() {
            if reset(r) {
                content.push(basis.n_slots() + r * stride + *v);
                *v = 0;
            }
        }
        let target = basis.index_of(&kept, &new_regs).expect("reduced state stays in basis");
        groups.entry(content).or_default().push((target, idx));
    }
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort();
    let mut kraus = Vec::with_capacity(keys.len());
    for key in keys {
        let mut m = zeros(basis.dim(), basis.dim());
        for &(to, from) in &groups[&key] {
            m[(to, from)] = c(1.0, 0.0);
        }
        kraus.push(m);
    }
    QuantumMap {
        in_basis: basis.clone(),
        out_basis: basis.clone(),
        kraus,
        kind: MapKind::Normalised,
        tag: None,
    }
}

/// Traces every message at a position in `region` (and resets every register
/// positioned there), re-inserting vacuum; the basis is unchanged.
pub fn trace_replace_channel(basis: &FockBasis, region: Mask) -> QuantumMap {
    let slots: Vec<bool> =
        (0..basis.n_slots()).map(|s| region & (1 << basis.slot(s).pos) != 0).collect();
    let regs: Vec<bool> = basis
        .reg_wires()
        .iter()
        .map(|&w| region & (1 << basis.wires()[w].positions[0]) != 0)
        .collect();
    replace_channel_by(basis, |s| slots[s], |r| regs[r])
}

/// Same as `trace_replace_channel` but restricted to a single wire.
pub fn trace_replace_wire_channel(basis: &FockBasis, wire: &str, region: Mask) -> Result<QuantumMap> {
    let wi = basis.wire_index(wire)?;
    let slots: Vec<bool> = (0..basis.n_slots())
        .map(|s| {
            let sl = basis.slot(s);
            sl.wire == wi && region & (1 << sl.pos) != 0
        })
        .collect();
    let regs: Vec<bool> = basis
        .reg_wires()
        .iter()
        .map(|&w| w == wi && region & (1 << basis.wires()[w].positions[0]) != 0)
        .collect();
    Ok(replace_channel_by(basis, |s| slots[s], |r| regs[r]))
}

/// Applies `trace_replace_wire_channel` to a density matrix.
pub fn trace_replace_state(basis: &FockBasis, rho: &CMat, wire: &str, region: Mask) -> Result<CMat> {
    Ok(trace_replace_wire_channel(basis, wire, region)?.apply(rho))
}

#[derive(Clone, Debug)]
pub struct CausalityReport {
    pub pass: bool,
    /// First bottom-closed subset whose marginal depends on inputs it must
    /// not see, with the offending Choi distance.
    pub failing_downset: Option<(Mask, f64)>,
    pub max_distance: f64,
    pub checked: usize,
}

fn check_causality_by(
    map: &QuantumMap,
    st: &Spacetime,
    mut in_keep: impl FnMut(Mask) -> Result<Mask>,
    tol: f64,
) -> Result<CausalityReport> {
    let full = st.full_mask();
    let out_positions: Mask = {
        let mut m = 0;
        for w in map.out_basis.wires() {
            for &p in &w.positions {
                m |= 1 << p;
            }
        }
        m
    };
    let in_positions: Mask = {
        let mut m = 0;
        for w in map.in_basis.wires() {
            for &p in &w.positions {
                m |= 1 << p;
            }
        }
        m
    };
    let mut report =
        CausalityReport { pass: true, failing_downset: None, max_distance: 0.0, checked: 0 };
    let mut seen: HashMap<(Mask, Mask), f64> = HashMap::new();
    for t_prime in st.bottom_closed_subsets() {
        if t_prime == 0 {
            // the marginal on an empty output region carries no constraint
            report.checked += 1;
            continue;
        }
        let keep_in = in_keep(t_prime)?;
        let key = (t_prime & out_positions, keep_in & in_positions);
        let dist = if let Some(&d) = seen.get(&key) {
            d
        } else {
            let d = if key.1 == in_positions {
                // no inputs are replaced, both sides are identical
                0.0
            } else {
                let outer = trace_replace_channel(&map.out_basis, full & !t_prime);
                let lhs = map.then(&outer)?.reduce_kraus()?;
                let inner = trace_replace_channel(&map.in_basis, full & !keep_in);
                let rhs = inner.then(&lhs)?.reduce_kraus()?;
                choi_distance(&lhs, &rhs)?
            };
            seen.insert(key, d);
            d
        };
        report.checked += 1;
        report.max_distance = report.max_distance.max(dist);
        if dist > tol && report.pass {
            report.pass = false;
            report.failing_downset = Some((t_prime, dist));
        }
    }
    Ok(report)
}

/// Checks the causality condition for `chi`: for every bottom-closed T′ the
/// marginal on outputs in T′ is unchanged when the inputs outside χ(T′) are
/// traced and replaced by vacuum.
pub fn check_causality(
    map: &QuantumMap,
    st: &Spacetime,
    chi: &CausalityFunction,
    tol: f64,
) -> Result<CausalityReport> {
    check_causality_by(map, st, |t| chi.chi(t), tol)
}

/// The weaker condition with χ the identity: the marginal on outputs in T′
/// may depend on inputs in all of T′ (same-position dependence allowed).
pub fn check_pseudo_causality(map: &QuantumMap, st: &Spacetime, tol: f64) -> Result<CausalityReport> {
    check_causality_by(map, st, |t| Ok(t), tol)
}

impl QuantumMap {
    /// Re-enumerates both bases at new message caps. Raising a cap embeds
    /// (inputs above the old cap are annihilated, so the result is
    /// subnormalised unless the caps are unchanged); lowering one truncates.
    pub fn embedded_at_caps(&self, in_cap: usize, out_cap: usize) -> Result<QuantumMap> {
        let in2 = enumerate_basis(self.in_basis.wires().to_vec(), in_cap)?;
        let out2 = enumerate_basis(self.out_basis.wires().to_vec(), out_cap)?;
        let ident = |n: &str, l: usize, p: usize| (n.to_string(), l, p);
        let mut kraus = Vec::with_capacity(self.kraus.len());
        if in_cap >= self.in_basis.n_max() && out_cap >= self.out_basis.n_max() {
            let mi = self.in_basis.relabel_into(&in2, ident)?;
            let mo = self.out_basis.relabel_into(&out2, ident)?;
            for k in &self.kraus {
                let mut m = zeros(out2.dim(), in2.dim());
                for r in 0..k.nrows() {
                    for col in 0..k.ncols() {
                        m[(mo[r], mi[col])] = k[(r, col)];
                    }
                }
                kraus.push(m);
            }
        } else if in_cap <= self.in_basis.n_max() && out_cap <= self.out_basis.n_max() {
            let mi = in2.relabel_into(&self.in_basis, ident)?;
            let mo = out2.relabel_into(&self.out_basis, ident)?;
            for k in &self.kraus {
                let mut m = zeros(out2.dim(), in2.dim());
                for r in 0..out2.dim() {
                    for col in 0..in2.dim() {
                        m[(r, col)] = k[(mo[r], mi[col])];
                    }
                }
                kraus.push(m);
            }
        } else {
            return Err(Error::input("caps must be raised or lowered together"));
        }
        let kind = if in_cap == self.in_basis.n_max() && out_cap == self.out_basis.n_max() {
            self.kind
        } else {
            MapKind::Subnormalised
        };
        QuantumMap::from_kraus(in2, out2, kraus, kind)
    }
}

/// Stinespring dilation: a single isometry into the output space extended by
/// an ancilla register (dimension = number of Kraus operators) at `anc_pos`.
pub fn purify(map: &QuantumMap, anc_name: &str, anc_pos: usize) -> Result<QuantumMap> {
    if map.kind != MapKind::Normalised {
        return Err(Error::precondition("only trace-preserving maps are purified"));
    }
    let k = map.kraus.len();
    let out =
        map.out_basis.with_registers(vec![WireSpec::register(anc_name, k, anc_pos, WireRole::Ancilla)])?;
    let mut v = zeros(out.dim(), map.din());
    for (e, kr) in map.kraus.iter().enumerate() {
        for r in 0..map.dout() {
            for col in 0..map.din() {
                let x = kr[(r, col)];
                if x.norm_sqr() > 1e-300 {
                    v[(r * k + e, col)] = x;
                }
            }
        }
    }
    QuantumMap::from_isometry(map.in_basis.clone(), out, v)
}

/// Sequence representation: slice isometries V_1..V_M along the nested
/// bottom-closed sets obtained by iterating χ from the full position set.
/// V_1 prepares out(S_1) ⊗ α_1 from nothing; V_m maps α_{m−1} ⊗ in(S_{m−1})
/// to out(S_m) ⊗ α_m; the final entry absorbs the leftover inputs.
#[derive(Clone, Debug)]
pub struct SequenceRep {
    pub slices: Vec<Mask>,
    /// V_1..V_{K+1}; row index = out_idx · α_m + ancilla, column index =
    /// ancilla · d_in + in_idx.
    pub isometries: Vec<CMat>,
    /// in(S_{m−1}) for V_m (the first entry is the trivial basis).
    pub in_bases: Vec<FockBasis>,
    /// out(S_m) for V_m (the last entry is the trivial basis).
    pub out_bases: Vec<FockBasis>,
    /// α_0 = 1, α_1, …, α_K, α_{K+1}.
    pub anc_dims: Vec<usize>,
    pub src_in: FockBasis,
    pub src_out: FockBasis,
}

struct ChainState {
    /// Dilation so far: in(D_{m−1}) → out(D_m) ⊗ α_m, row = out·α + a.
    w: CMat,
    alpha: usize,
    out_mask: Mask,
    in_mask: Mask,
    out_red: FockBasis,
}

fn restricted(basis: &FockBasis, mask: Mask) -> Result<FockBasis> {
    Ok(region_split(basis, mask)?.inside)
}

/// Lifts the chain dilation across one slice: W′ = (W ⊗ 1_{in(S)}) ∘ J with
/// rows grouped as (out(D_{m−1}), e1 = a·d_inS + s).
fn lift_chain(
    chain: &ChainState,
    in_full: &FockBasis,
    d_next: Mask,
) -> Result<(CMat, FockBasis, FockBasis)> {
    let in_red = restricted(in_full, d_next)?;
    let j_split = region_split(&in_red, chain.in_mask)?;
    if j_split.inside.dim() != chain.w.ncols() {
        return Err(Error::numerical("slice input factorisation mismatch"));
    }
    let slice_in = j_split.outside;
    let d_s = slice_in.dim();
    let n2 = chain.out_red.dim();
    let d_e1 = chain.alpha * d_s;
    let mut lifted = zeros(n2 * d_e1, in_red.dim());
    for (jcol, &(i1, s)) in j_split.pairs.iter().enumerate() {
        for o1 in 0..n2 {
            for a in 0..chain.alpha {
                let x = chain.w[(o1 * chain.alpha + a, i1)];
                if x.norm_sqr() > 1e-300 {
                    lifted[(o1 * d_e1 + a * d_s + s, jcol)] = x;
                }
            }
        }
    }
    Ok((lifted, in_red, slice_in))
}

/// Applies a slice isometry U: (α·d_inS) → (d_outS·α′) to the lifted dilation
/// and rejoins the slice outputs with the accumulated ones.
fn advance_chain(
    chain: ChainState,
    lifted: CMat,
    new_in_mask: Mask,
    u: &CMat,
    out_full: &FockBasis,
    d_next: Mask,
    tol: f64,
) -> Result<ChainState> {
    let n2 = chain.out_red.dim();
    let d_e1 = lifted.nrows() / n2;
    let cols = lifted.ncols();
    let out_red = restricted(out_full, d_next)?;
    let split2 = region_split(&out_red, chain.out_mask)?;
    let slice_out_dim = split2.outside.dim();
    if u.nrows() % slice_out_dim != 0 {
        return Err(Error::numerical("slice output dimension mismatch"));
    }
    let alpha2 = u.nrows() / slice_out_dim;
    let mut rejoin: HashMap<(usize, usize), usize> = HashMap::new();
    for (o_joint, &(o1, s_out)) in split2.pairs.iter().enumerate() {
        rejoin.insert((o1, s_out), o_joint);
    }
    let mut w = zeros(out_red.dim() * alpha2, cols);
    let mut dropped = 0.0_f64;
    for jcol in 0..cols {
        for o1 in 0..n2 {
            for e2 in 0..u.nrows() {
                let mut acc = c(0.0, 0.0);
                for e1 in 0..d_e1 {
                    let x = lifted[(o1 * d_e1 + e1, jcol)];
                    if x.norm_sqr() > 1e-300 {
                        acc += u[(e2, e1)] * x;
                    }
                }
                if acc.norm_sqr() < 1e-300 {
                    continue;
                }
                let (s_out, a2) = (e2 / alpha2, e2 % alpha2);
                match rejoin.get(&(o1, s_out)) {
                    Some(&o_joint) => w[(o_joint * alpha2 + a2, jcol)] = acc,
                    None => dropped += acc.norm_sqr(),
                }
            }
        }
    }
    if dropped.sqrt() > tol * 100.0 {
        return Err(Error::numerical(format!(
            "slice recombination lost weight {:.3e} beyond the truncation",
            dropped.sqrt()
        )));
    }
    Ok(ChainState { w, alpha: alpha2, out_mask: d_next, in_mask: new_in_mask, out_red })
}

impl SequenceRep {
    /// Nested downsets D_1 ⊂ … ⊂ D_K = full obtained by iterating χ.
    pub fn downsets(st: &Spacetime, chi: &CausalityFunction) -> Result<Vec<Mask>> {
        let mut ds = vec![st.full_mask()];
        while *ds.last().unwrap() != 0 {
            let next = chi.chi(*ds.last().unwrap())?;
            ds.push(next);
        }
        ds.reverse();
        ds.remove(0);
        Ok(ds)
    }

    /// Checks isometry of every slice map and that the slice order respects
    /// the poset.
    pub fn validate(&self, st: &Spacetime, tol: f64) -> Result<()> {
        for (m, v) in self.isometries.iter().enumerate() {
            if !is_isometry(v, tol.max(1e-8)) {
                return Err(Error::numerical(format!("slice map {} is not an isometry", m + 1)));
            }
        }
        for (m, &s) in self.slices.iter().enumerate() {
            for s2 in self.slices.iter().skip(m + 1) {
                for t in st.elements_of(s) {
                    for t2 in st.elements_of(*s2) {
                        if st.lt(t2, t) {
                            return Err(Error::numerical(format!(
                                "slice order violates the poset: {} after {}",
                                st.id(t2),
                                st.id(t)
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Multiplies the slice isometries back into a channel on the source
    /// bases.
    pub fn to_map(&self) -> Result<QuantumMap> {
        let k_slices = self.slices.len();
        let mut d_mask = self.slices[0];
        let mut chain = ChainState {
            w: self.isometries[0].clone(),
            alpha: self.anc_dims[1],
            out_mask: d_mask,
            in_mask: 0,
            out_red: restricted(&self.src_out, d_mask)?,
        };
        for m in 2..=k_slices {
            let d_prev = d_mask;
            d_mask |= self.slices[m - 1];
            let (lifted, _in_red, _slice_in) = lift_chain(&chain, &self.src_in, d_prev)?;
            chain = advance_chain(
                chain,
                lifted,
                d_prev,
                &self.isometries[m - 1],
                &self.src_out,
                d_mask,
                DEFAULT_TOL,
            )?;
        }
        chain_to_map(&chain, &self.src_in, &self.src_out)
    }
}

fn chain_to_map(chain: &ChainState, src_in: &FockBasis, src_out: &FockBasis) -> Result<QuantumMap> {
    let split_in = region_split(src_in, chain.in_mask)?;
    if split_in.inside.dim() != chain.w.ncols() {
        return Err(Error::numerical("final input factorisation mismatch"));
    }
    let env_dim = split_in.outside.dim();
    let mut restrictors: Vec<CMat> = (0..env_dim)
        .map(|_| zeros(split_in.inside.dim(), src_in.dim()))
        .collect();
    for (full, &(i, e)) in split_in.pairs.iter().enumerate() {
        restrictors[e][(i, full)] = c(1.0, 0.0);
    }
    let dout = src_out.dim();
    if chain.out_red.dim() != dout {
        return Err(Error::numerical("final output basis mismatch"));
    }
    let mut kraus = Vec::new();
    for a in 0..chain.alpha {
        let mut ka = zeros(dout, chain.w.ncols());
        for o in 0..dout {
            for i in 0..chain.w.ncols() {
                ka[(o, i)] = chain.w[(o * chain.alpha + a, i)];
            }
        }
        for r in &restrictors {
            let m = &ka * r;
            if m.iter().any(|z| z.norm_sqr() > 1e-300) {
                kraus.push(m);
            }
        }
    }
    if kraus.is_empty() {
        kraus.push(zeros(dout, src_in.dim()));
    }
    QuantumMap::from_kraus(src_in.clone(), src_out.clone(), kraus, MapKind::Normalised)?
        .reduce_kraus()
}

/// Extracts a sequence representation of a validated causal box by solving,
/// slice by slice, for the isometry that intertwines the accumulated dilation
/// with a fresh minimal dilation of the next marginal.
pub fn sequence_representation(
    map: &QuantumMap,
    st: &Spacetime,
    chi: &CausalityFunction,
    tol: f64,
) -> Result<SequenceRep> {
    let downsets = SequenceRep::downsets(st, chi)?;
    sequence_representation_along(map, &downsets, tol)
}

/// Same extraction along an explicit chain of nested bottom-closed sets
/// D_1 ⊂ … ⊂ D_K (the last entry must cover every wire position).
pub fn sequence_representation_along(
    map: &QuantumMap,
    downsets: &[Mask],
    tol: f64,
) -> Result<SequenceRep> {
    if downsets.is_empty() {
        return Err(Error::input("a sequence representation needs at least one slice"));
    }
    for w in downsets.windows(2) {
        if w[0] & !w[1] != 0 {
            return Err(Error::input("slicing sets must be nested"));
        }
    }
    let k_slices = downsets.len();
    let mut slices = Vec::with_capacity(k_slices);
    let mut prev = 0;
    for &d in downsets {
        slices.push(d & !prev);
        prev = d;
    }
    let mut in_bases = vec![restricted(&map.in_basis, 0)?];
    let mut out_bases = Vec::new();
    let mut isometries = Vec::new();
    let mut anc_dims = vec![1usize];

    // W_1: minimal dilation of the first marginal (a state preparation).
    let w2_first = minimal_marginal_dilation(map, 0, downsets[0])?;
    let first_out = restricted(&map.out_basis, downsets[0])?;
    out_bases.push(first_out.clone());
    anc_dims.push(w2_first.ncols_alpha);
    isometries.push(w2_first.w.clone());
    let mut chain = ChainState {
        w: w2_first.w,
        alpha: w2_first.ncols_alpha,
        out_mask: downsets[0],
        in_mask: 0,
        out_red: first_out,
    };

    for m in 2..=k_slices {
        let d_prev = downsets[m - 2];
        let d_next = downsets[m - 1];
        let (lifted, in_red, slice_in) = lift_chain(&chain, &map.in_basis, d_prev)?;
        let dil = minimal_marginal_dilation(map, d_prev, d_next)?;
        let out_red_next = restricted(&map.out_basis, d_next)?;
        let split2 = region_split(&out_red_next, chain.out_mask)?;
        let slice_out_dim = split2.outside.dim();
        let n1 = in_red.dim();
        let n2 = chain.out_red.dim();
        let d_e1 = chain.alpha * slice_in.dim();
        let alpha2 = dil.ncols_alpha;
        let d_e2 = slice_out_dim * alpha2;
        if n1 != dil.w.ncols() {
            return Err(Error::numerical("marginal input dimension mismatch"));
        }
        // A[e1, o1·n1 + j] from the lifted chain, B[e2, o1·n1 + j] from the
        // fresh dilation.
        let mut a_mat = zeros(d_e1, n2 * n1);
        for j in 0..n1 {
            for o1 in 0..n2 {
                for e1 in 0..d_e1 {
                    a_mat[(e1, o1 * n1 + j)] = lifted[(o1 * d_e1 + e1, j)];
                }
            }
        }
        let mut b_mat = zeros(d_e2, n2 * n1);
        for (o_joint, &(o1, s_out)) in split2.pairs.iter().enumerate() {
            for a2 in 0..alpha2 {
                for j in 0..n1 {
                    let x = dil.w[(o_joint * alpha2 + a2, j)];
                    if x.norm_sqr() > 1e-300 {
                        b_mat[(s_out * alpha2 + a2, o1 * n1 + j)] = x;
                    }
                }
            }
        }
        let u = solve_intertwiner(&a_mat, &b_mat, slice_out_dim, tol)?;
        let alpha_final = u.nrows() / slice_out_dim;
        in_bases.push(slice_in);
        out_bases.push(split2.outside.clone());
        anc_dims.push(alpha_final);
        isometries.push(u.clone());
        chain = advance_chain(chain, lifted, d_prev, &u, &map.out_basis, d_next, tol)?;
    }

    // Final absorb: identity on α_K ⊗ in(S_K).
    let d_prev_last = if k_slices >= 2 { downsets[k_slices - 2] } else { 0 };
    let final_in = region_split(&map.in_basis, d_prev_last)?.outside;
    let absorb_dim = chain.alpha * final_in.dim();
    in_bases.push(final_in);
    out_bases.push(restricted(&map.out_basis, 0)?);
    anc_dims.push(absorb_dim);
    isometries.push(eye(absorb_dim));

    let rep = SequenceRep {
        slices,
        isometries,
        in_bases,
        out_bases,
        anc_dims,
        src_in: map.in_basis.clone(),
        src_out: map.out_basis.clone(),
    };
    Ok(rep)
}

struct MarginalDilation {
    /// in(D_prev) → out(D_next) ⊗ α, row = out·α + a.
    w: CMat,
    ncols_alpha: usize,
}

/// Minimal Stinespring dilation of the marginal channel: inputs restricted to
/// D_prev (vacuum elsewhere), outputs traced down to D_next.
fn minimal_marginal_dilation(map: &QuantumMap, d_prev: Mask, d_next: Mask) -> Result<MarginalDilation> {
    let split_in = region_split(&map.in_basis, d_prev)?;
    let n_in = split_in.inside.dim();
    let mut embed: Vec<usize> = vec![usize::MAX; n_in];
    for (full, &(i, e)) in split_in.pairs.iter().enumerate() {
        if e == 0 {
            embed[i] = full;
        }
    }
    let split_out = region_split(&map.out_basis, d_next)?;
    let n_out = split_out.inside.dim();
    let env = split_out.outside.dim();
    let mut kraus = Vec::new();
    for k in &map.kraus {
        let mut per_env: Vec<CMat> = (0..env).map(|_| zeros(n_out, n_in)).collect();
        for full_o in 0..map.dout() {
            let (o, e) = split_out.pairs[full_o];
            for (i, &fi) in embed.iter().enumerate() {
                let x = k[(full_o, fi)];
                if x.norm_sqr() > 1e-300 {
                    per_env[e][(o, i)] = x;
                }
            }
        }
        for m in per_env {
            if m.iter().any(|z| z.norm_sqr() > 1e-300) {
                kraus.push(m);
            }
        }
    }
    if kraus.is_empty() {
        kraus.push(zeros(n_out, n_in));
    }
    let reduced = QuantumMap {
        in_basis: split_in.inside,
        out_basis: split_out.inside,
        kraus,
        kind: MapKind::Normalised,
        tag: None,
    }
    .reduce_kraus()?;
    let alpha = reduced.kraus.len();
    let mut w = zeros(n_out * alpha, n_in);
    for (a, k) in reduced.kraus.iter().enumerate() {
        for o in 0..n_out {
            for i in 0..n_in {
                let x = k[(o, i)];
                if x.norm_sqr() > 1e-300 {
                    w[(o * alpha + a, i)] = x;
                }
            }
        }
    }
    Ok(MarginalDilation { w, ncols_alpha: alpha })
}

/// Solves U·A = B for an isometry U, extending it on the unreached directions
/// of the domain (padding the ancilla when the codomain is too small).
fn solve_intertwiner(a: &CMat, b: &CMat, out_factor: usize, tol: f64) -> Result<CMat> {
    let d_e1 = a.nrows();
    let dec = svd(a);
    let scale = dec.s.first().copied().unwrap_or(0.0).max(1.0);
    let rank = dec.s.iter().filter(|&&s| s > RANK_TOL * scale).count();
    let mut u0 = zeros(b.nrows(), d_e1);
    if rank > 0 {
        // U0 = B · Q_r · Σ_r^{-1} · P_r†
        let q_r = dec.vt.rows(0, rank).adjoint();
        let mut bq = b * q_r;
        for (col, s) in dec.s.iter().take(rank).enumerate() {
            for r in 0..bq.nrows() {
                bq[(r, col)] /= cr(*s);
            }
        }
        let p_r = dec.u.columns(0, rank).into_owned();
        u0 = &bq * p_r.adjoint();
        let residual = frob_dist(&(&u0 * a), b);
        let bnorm: f64 = b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if residual > tol.max(1e-9) * 1e3 * bnorm.max(1.0) {
            return Err(Error::numerical(format!(
                "slice isometry solve residual {residual:.3e}; the map is not causal for the given slicing"
            )));
        }
        let gram = (&bq).adjoint() * &bq;
        if frob_dist(&gram, &eye(rank)) > 1e-6 {
            return Err(Error::numerical(
                "slice intertwiner is not isometric on the reached subspace",
            ));
        }
    }
    if rank == d_e1 {
        return Ok(u0);
    }
    // Complete on the unreached subspace, padding the ancilla if needed.
    let mut d_e2 = b.nrows();
    let deficit = d_e1 - rank;
    let mut images = zeros(d_e2, rank);
    if rank > 0 {
        let p_r = dec.u.columns(0, rank);
        images = &u0 * p_r;
    }
    if d_e2 < rank + deficit {
        let alpha_old = d_e2 / out_factor;
        let alpha_new = (rank + deficit).div_ceil(out_factor);
        let grown = grow_ancilla(&images, out_factor, alpha_old, alpha_new);
        d_e2 = out_factor * alpha_new;
        images = grown;
        let u0_grown = grow_ancilla(&u0, out_factor, alpha_old, alpha_new);
        u0 = u0_grown;
    }
    let completed = complete_isometry(&images, 1e-9);
    let p_full = complete_isometry(&dec.u.columns(0, rank).into_owned(), 1e-9);
    let mut u = u0;
    for extra in 0..deficit {
        let img = completed.column(rank + extra);
        let dom = p_full.column(rank + extra);
        for r in 0..d_e2 {
            for cidx in 0..d_e1 {
                u[(r, cidx)] += img[r] * dom[cidx].conj();
            }
        }
    }
    if !is_isometry(&u, 1e-6) {
        return Err(Error::numerical("completed slice map failed the isometry check"));
    }
    Ok(u)
}

/// Re-indexes rows (s_out · α_old + a) into (s_out · α_new + a), zero-filling
/// the new ancilla directions.
fn grow_ancilla(m: &CMat, out_factor: usize, alpha_old: usize, alpha_new: usize) -> CMat {
    let mut out = zeros(out_factor * alpha_new, m.ncols());
    for s in 0..out_factor {
        for a in 0..alpha_old {
            for col in 0..m.ncols() {
                out[(s * alpha_new + a, col)] = m[(s * alpha_old + a, col)];
            }
        }
    }
    out
}

/// Second quantisation Γ(v) of a one-message map between the slot spaces of
/// two bases: applies v to every message and symmetrises. Γ(v) is an isometry
/// whenever v is, and preserves message number sectors.
pub fn second_quantisation(in_basis: &FockBasis, out_basis: &FockBasis, v: &CMat) -> Result<CMat> {
    if v.nrows() != out_basis.n_slots() || v.ncols() != in_basis.n_slots() {
        return Err(Error::input(format!(
            "one-message matrix {}x{} does not match slot counts {}x{}",
            v.nrows(),
            v.ncols(),
            out_basis.n_slots(),
            in_basis.n_slots()
        )));
    }
    if in_basis.reg_dims() != out_basis.reg_dims() {
        return Err(Error::input("register structure must match"));
    }
    let factorial = |n: usize| -> f64 { (1..=n).map(|x| x as f64).product() };
    let mult_norm = |label: &[usize]| -> f64 {
        let mut acc = 1.0;
        let mut run = 1;
        for w in label.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                acc *= factorial(run);
                run = 1;
            }
        }
        acc * factorial(run)
    };
    let rp = in_basis.reg_prod();
    let mut m = zeros(out_basis.dim(), in_basis.dim());
    for f_in in 0..in_basis.fock_dim() {
        let label = in_basis.fock_label(f_in).to_vec();
        let mut terms: HashMap<Vec<usize>, crate::linalg::C64> = HashMap::new();
        terms.insert(Vec::new(), c(1.0, 0.0));
        for &s in &label {
            let mut next: HashMap<Vec<usize>, crate::linalg::C64> = HashMap::new();
            for (mono, coeff) in terms {
                for r in 0..out_basis.n_slots() {
                    let amp = v[(r, s)];
                    if amp.norm_sqr() < 1e-300 {
                        continue;
                    }
                    let mut mono2 = mono.clone();
                    let pos = mono2.partition_point(|&x| x <= r);
                    mono2.insert(pos, r);
                    *next.entry(mono2).or_insert_with(|| c(0.0, 0.0)) += coeff * amp;
                }
            }
            terms = next;
        }
        let in_norm = mult_norm(&label).sqrt();
        for (mono, coeff) in terms {
            let f_out = out_basis.fock_index(&mono)?;
            let amp = coeff * cr(mult_norm(&mono).sqrt() / in_norm);
            for reg in 0..rp {
                m[(f_out * rp + reg, f_in * rp + reg)] += amp;
            }
        }
    }
    Ok(m)
}

/// A random block-unitary delay box on a chain: every message is carried one
/// step forward (or kept in place when `strict` is false) with an independent
/// random unitary on its message levels.
pub fn random_delay_box(
    len: usize,
    dim: usize,
    n_max: usize,
    strict: bool,
    rng: &mut impl rand::Rng,
) -> Result<(Spacetime, QuantumMap)> {
    let st = Spacetime::chain(len + 1);
    let delay = if strict { 1 } else { 0 };
    let in_wire = WireSpec::fock("x", dim, (0..len).collect(), WireRole::AgentIn);
    let out_wire = WireSpec::fock("y", dim, (delay..len + delay).collect(), WireRole::AgentOut);
    let in_basis = enumerate_basis(vec![in_wire], n_max)?;
    let out_basis = enumerate_basis(vec![out_wire], n_max)?;
    let mut v = zeros(out_basis.n_slots(), in_basis.n_slots());
    for t in 0..len {
        let u = crate::linalg::random_unitary(dim, rng);
        let wi = in_basis.wire_index("x")?;
        let wo = out_basis.wire_index("y")?;
        for l_in in 0..dim {
            let s_in = in_basis.slot_of(wi, l_in, t)?;
            for l_out in 0..dim {
                let s_out = out_basis.slot_of(wo, l_out, t + delay)?;
                v[(s_out, s_in)] = u[(l_out, l_in)];
            }
        }
    }
    let gamma = second_quantisation(&in_basis, &out_basis, &v)?;
    let map = QuantumMap::from_isometry(in_basis, out_basis, gamma)?;
    Ok((st, map))
}

/// The canonical compression into the one-message space over a single wire
/// with totally ordered positions: identity on one-message states, vacuum to
/// a fixed message at the last position, and every multi-message state
/// classically reduced to its earliest message.
pub fn build_c_one(st: &Spacetime, wire: &WireSpec, n_max: usize) -> Result<QuantumMap> {
    let mut pos = wire.positions.clone();
    pos.sort_by(|&a, &b| {
        if st.lt(a, b) {
            std::cmp::Ordering::Less
        } else if st.lt(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    for w in pos.windows(2) {
        if !st.lt(w[0], w[1]) {
            return Err(Error::precondition(format!(
                "positions {} and {} are not ordered",
                st.id(w[0]),
                st.id(w[1])
            )));
        }
    }
    let last = *pos.last().ok_or_else(|| Error::input("wire has no positions"))?;
    let in_basis = enumerate_basis(vec![wire.clone()], n_max)?;
    let out_basis = enumerate_basis(vec![wire.clone()], 1)?;
    let rank = |s: usize| -> (usize, usize) {
        let sl = in_basis.slot(s);
        let pr = pos.iter().position(|&p| p == sl.pos).unwrap();
        (pr, sl.level)
    };
    let to_out = |s: usize| -> Result<usize> {
        let sl = in_basis.slot(s);
        let wo = out_basis.wire_index(&wire.name)?;
        let os = out_basis.slot_of(wo, sl.level, sl.pos)?;
        out_basis.index_of(&[os], &[])
    };
    // Coherent part: identity on one-message states. The vacuum branch gets
    // its own Kraus operator sending |Ω⟩ to the fixed message |0, last⟩.
    let mut k0 = zeros(out_basis.dim(), in_basis.dim());
    let wo = out_basis.wire_index(&wire.name)?;
    let vac_target = out_basis.index_of(&[out_basis.slot_of(wo, 0, last)?], &[])?;
    let mut k_vac = zeros(out_basis.dim(), in_basis.dim());
    k_vac[(vac_target, 0)] = c(1.0, 0.0);
    let mut groups: HashMap<Vec<usize>, Vec<(usize, usize)>> = HashMap::new();
    for f in 0..in_basis.fock_dim() {
        let label = in_basis.fock_label(f).to_vec();
        if label.is_empty() {
            continue;
        }
        if label.len() == 1 {
            let i = in_basis.index_of(&label, &[])?;
            k0[(to_out(label[0])?, i)] = c(1.0, 0.0);
            continue;
        }
        let earliest = *label.iter().min_by_key(|&&s| rank(s)).unwrap();
        let mut rest = label.clone();
        let drop_at = rest.iter().position(|&s| s == earliest).unwrap();
        rest.remove(drop_at);
        let i = in_basis.index_of(&label, &[])?;
        let target = to_out(earliest)?;
        groups.entry(rest).or_default().push((target, i));
    }
    let mut kraus = vec![k0, k_vac];
    let mut keys: Vec<_> = groups.keys().cloned().collect();
    keys.sort();
    for key in keys {
        let mut m = zeros(out_basis.dim(), in_basis.dim());
        for &(to, from) in &groups[&key] {
            m[(to, from)] = c(1.0, 0.0);
        }
        kraus.push(m);
    }
    QuantumMap::from_kraus(in_basis, out_basis, kraus, MapKind::Normalised)
}

/// Extends a map on the one-message-plus-vacuum spaces to the full Fock space
/// by pre-composing with the one-message compression. The input map must be
/// trace-preserving and must send a message at position t to messages at
/// positions ≥ t (strictly later when `strict`); otherwise the offending
/// input position is reported.
pub fn extend_to_fock(
    one_msg: &QuantumMap,
    st: &Spacetime,
    n_max: usize,
    strict: bool,
) -> Result<QuantumMap> {
    if one_msg.in_basis.n_max() != 1 || one_msg.out_basis.n_max() != 1 {
        return Err(Error::input("the map to extend must live on one-message bases"));
    }
    if one_msg.in_basis.wires().len() != 1 || one_msg.out_basis.wires().len() != 1 {
        return Err(Error::input("one wire on each side is expected"));
    }
    if !one_msg.is_cptp(CONSTRUCT_TOL) {
        return Err(Error::precondition("the map to extend must be trace-preserving"));
    }
    for i in 1..one_msg.din() {
        let (label, _) = one_msg.in_basis.decode(i);
        let t_in = one_msg.in_basis.slot(label[0]).pos;
        for k in &one_msg.kraus {
            for o in 0..one_msg.dout() {
                if k[(o, i)].norm_sqr() < 1e-24 {
                    continue;
                }
                let (out_label, _) = one_msg.out_basis.decode(o);
                if out_label.is_empty() {
                    return Err(Error::precondition(format!(
                        "input at {} can reach the vacuum",
                        st.id(t_in)
                    )));
                }
                let t_out = one_msg.out_basis.slot(out_label[0]).pos;
                let ok = if strict { st.lt(t_in, t_out) } else { t_in == t_out || st.lt(t_in, t_out) };
                if !ok {
                    return Err(Error::precondition(format!(
                        "input at {} reaches output at {}, which is not later",
                        st.id(t_in),
                        st.id(t_out)
                    )));
                }
            }
        }
    }
    let in_wire = one_msg.in_basis.wires()[0].clone();
    let c_one = build_c_one(st, &in_wire, n_max)?;
    // The compression lands in the one-message basis over the input wire;
    // rename/identify it with the extension's input basis.
    if !bases_same_shape(&c_one.out_basis, &one_msg.in_basis) {
        return Err(Error::input("extension input wire does not match the compression"));
    }
    let mid = one_msg.clone();
    let composed = c_one.then(&mid)?;
    // Embed the one-message output basis into the full Fock output basis.
    let out_wire = one_msg.out_basis.wires()[0].clone();
    let out_full = enumerate_basis(vec![out_wire], n_max)?;
    let embed_map = one_msg.out_basis.relabel_into(&out_full, |n, l, p| (n.to_string(), l, p))?;
    let mut e = zeros(out_full.dim(), one_msg.dout());
    for (from, &to) in embed_map.iter().enumerate() {
        e[(to, from)] = c(1.0, 0.0);
    }
    let embed = QuantumMap::from_isometry(one_msg.out_basis.clone(), out_full, e)?;
    composed.then(&embed)
}
