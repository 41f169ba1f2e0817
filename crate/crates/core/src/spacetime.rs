//! Finite strict partial orders of message positions, bottom-closed subset
//! enumeration, causality functions, and order-preserving relabellings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Subsets of positions as bitmasks; posets are capped well below 32 elements.
pub type Mask = u32;

const MAX_ELEMENTS: usize = 24;

/// A finite set of positions with a strict partial order, stored as the
/// reflexive-transitive `leq` matrix. Optional designated elements mark the
/// global-past stamp, the global-future stamp, and the result slot where
/// outcome registers and purification ancillas live.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Spacetime {
    ids: Vec<String>,
    leq: Vec<bool>,
    pub past: Option<usize>,
    pub future: Option<usize>,
    pub result: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct SpacetimeJson {
    elements: Vec<String>,
    #[serde(default)]
    order: Vec<(String, String)>,
    #[serde(default)]
    past: Option<String>,
    #[serde(default)]
    future: Option<String>,
    #[serde(default)]
    result: Option<String>,
}

impl Spacetime {
    /// Builds a poset from elements and covering (or any generating) pairs;
    /// the transitive closure is taken and antisymmetry is validated.
    pub fn new(ids: Vec<String>, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::input("spacetime needs at least one element"));
        }
        if n > MAX_ELEMENTS {
            return Err(Error::resource(format!(
                "spacetime with {n} elements exceeds the supported maximum of {MAX_ELEMENTS}"
            )));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for id in &ids {
                if !seen.insert(id.clone()) {
                    return Err(Error::input(format!("duplicate element id {id:?}")));
                }
            }
        }
        let mut leq = vec![false; n * n];
        for i in 0..n {
            leq[i * n + i] = true;
        }
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::input("order pair references unknown element"));
            }
            if a == b {
                return Err(Error::input(format!(
                    "element {:?} related to itself in the strict order",
                    ids[a]
                )));
            }
            leq[a * n + b] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if leq[i * n + k] {
                    for j in 0..n {
                        if leq[k * n + j] {
                            leq[i * n + j] = true;
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i != j && leq[i * n + j] && leq[j * n + i] {
                    return Err(Error::input(format!(
                        "order contains a cycle through {:?} and {:?}",
                        ids[i], ids[j]
                    )));
                }
            }
        }
        Ok(Spacetime { ids, leq, past: None, future: None, result: None })
    }

    /// Total order 0 ≺ 1 ≺ … ≺ n-1 with ids "1".."n".
    pub fn chain(n: usize) -> Self {
        let ids = (1..=n).map(|i| i.to_string()).collect();
        let pairs: Vec<_> = (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        Spacetime::new(ids, &pairs).expect("chain is a valid poset")
    }

    pub fn with_past(mut self, past: usize) -> Result<Self> {
        for t in 0..self.len() {
            if t != past && !self.lt(past, t) {
                return Err(Error::input(format!(
                    "designated past {:?} does not precede {:?}",
                    self.ids[past], self.ids[t]
                )));
            }
        }
        self.past = Some(past);
        Ok(self)
    }

    pub fn with_future(mut self, future: usize) -> Result<Self> {
        for t in 0..self.len() {
            if t == future || Some(t) == self.result {
                continue;
            }
            if !self.lt(t, future) {
                return Err(Error::input(format!(
                    "designated future {:?} does not succeed {:?}",
                    self.ids[future], self.ids[t]
                )));
            }
        }
        self.future = Some(future);
        Ok(self)
    }

    pub fn with_result(mut self, result: usize) -> Result<Self> {
        for t in 0..self.len() {
            if t != result && !self.lt(t, result) {
                return Err(Error::input(format!(
                    "result slot {:?} must lie above every position, not above {:?}",
                    self.ids[result], self.ids[t]
                )));
            }
        }
        self.result = Some(result);
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SpacetimeJson =
            serde_json::from_str(text).map_err(|e| Error::input(format!("spacetime json: {e}")))?;
        let idx: HashMap<&str, usize> =
            raw.elements.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let find = |name: &str| -> Result<usize> {
            idx.get(name)
                .copied()
                .ok_or_else(|| Error::input(format!("unknown element {name:?}")))
        };
        let mut pairs = Vec::new();
        for (a, b) in &raw.order {
            pairs.push((find(a)?, find(b)?));
        }
        let mut st = Spacetime::new(raw.elements.clone(), &pairs)?;
        if let Some(p) = raw.past {
            st = st.with_past(find(&p)?)?;
        }
        if let Some(r) = raw.result {
            st = st.with_result(find(&r)?)?;
        }
        if let Some(f) = raw.future {
            st = st.with_future(find(&f)?)?;
        }
        Ok(st)
    }

    pub fn to_json(&self) -> String {
        let raw = SpacetimeJson {
            elements: self.ids.clone(),
            order: self
                .covers()
                .into_iter()
                .map(|(a, b)| (self.ids[a].clone(), self.ids[b].clone()))
                .collect(),
            past: self.past.map(|i| self.ids[i].clone()),
            future: self.future.map(|i| self.ids[i].clone()),
            result: self.result.map(|i| self.ids[i].clone()),
        };
        serde_json::to_string_pretty(&raw).expect("spacetime serialises")
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// Reflexive order: a ≼ b.
    pub fn leq(&self, a: usize, b: usize) -> bool {
        self.leq[a * self.len() + b]
    }

    /// Strict order: a ≺ b.
    pub fn lt(&self, a: usize, b: usize) -> bool {
        a != b && self.leq(a, b)
    }

    /// Covering pairs (a ≺ b with nothing strictly between), enough to
    /// regenerate the order.
    pub fn covers(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for a in 0..n {
            'next: for b in 0..n {
                if !self.lt(a, b) {
                    continue;
                }
                for c in 0..n {
                    if self.lt(a, c) && self.lt(c, b) {
                        continue 'next;
                    }
                }
                out.push((a, b));
            }
        }
        out
    }

    pub fn full_mask(&self) -> Mask {
        if self.len() == 32 {
            u32::MAX
        } else {
            (1u32 << self.len()) - 1
        }
    }

    pub fn mask_of(&self, elems: &[usize]) -> Mask {
        elems.iter().fold(0, |m, &e| m | (1 << e))
    }

    pub fn elements_of(&self, mask: Mask) -> Vec<usize> {
        (0..self.len()).filter(|&i| mask & (1 << i) != 0).collect()
    }

    /// Strict past of a single element as a mask.
    pub fn strict_past_of(&self, t: usize) -> Mask {
        let mut m = 0;
        for s in 0..self.len() {
            if self.lt(s, t) {
                m |= 1 << s;
            }
        }
        m
    }

    /// Reflexive past ↓t.
    pub fn down_of(&self, t: usize) -> Mask {
        self.strict_past_of(t) | (1 << t)
    }

    pub fn is_down_closed(&self, mask: Mask) -> bool {
        for t in 0..self.len() {
            if mask & (1 << t) != 0 && self.strict_past_of(t) & !mask != 0 {
                return false;
            }
        }
        true
    }

    pub fn down_closure(&self, mask: Mask) -> Mask {
        let mut out = mask;
        for t in 0..self.len() {
            if mask & (1 << t) != 0 {
                out |= self.strict_past_of(t);
            }
        }
        out
    }

    /// Union of strict pasts of the elements of `mask`; for a bottom-closed
    /// set this is the set minus its maximal elements, and it is the
    /// pointwise-largest valid causality function.
    pub fn strict_past_mask(&self, mask: Mask) -> Mask {
        let mut out = 0;
        for t in 0..self.len() {
            if mask & (1 << t) != 0 {
                out |= self.strict_past_of(t);
            }
        }
        out
    }

    pub fn maximal_in(&self, mask: Mask) -> Vec<usize> {
        self.elements_of(mask)
            .into_iter()
            .filter(|&t| {
                self.elements_of(mask).into_iter().all(|s| s == t || !self.lt(t, s))
            })
            .collect()
    }

    /// Every bottom-closed subset, sorted by size then lexicographically by
    /// element index.
    pub fn bottom_closed_subsets(&self) -> Vec<Mask> {
        let n = self.len();
        let mut subsets: Vec<Mask> = (0..(1u64 << n))
            .map(|m| m as Mask)
            .filter(|&m| self.is_down_closed(m))
            .collect();
        subsets.sort_by_key(|&m| (m.count_ones(), sorted_elems_key(m)));
        subsets
    }

    /// Deterministic linear extension: repeatedly emits the earliest-declared
    /// minimal element. Returns element indices in chain order.
    pub fn linear_extension_order(&self) -> Vec<usize> {
        let n = self.len();
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(n);
        while !remaining.is_empty() {
            let pick = *remaining
                .iter()
                .find(|&&t| remaining.iter().all(|&s| s == t || !self.lt(s, t)))
                .expect("acyclic order always has a minimal element");
            out.push(pick);
            remaining.retain(|&s| s != pick);
        }
        out
    }

    /// The linear extension packaged as a relabelling onto `Spacetime::chain`.
    pub fn linear_extension(&self) -> (RelabellingMap, Spacetime) {
        let order = self.linear_extension_order();
        let mut map = BTreeMap::new();
        for (rank, &elem) in order.iter().enumerate() {
            map.insert(elem, rank);
        }
        let mut chain = Spacetime::chain(self.len());
        chain.past = self.past.map(|p| map[&p]);
        chain.future = self.future.map(|f| map[&f]);
        chain.result = self.result.map(|r| map[&r]);
        (RelabellingMap { global: Some(map), systems: Vec::new() }, chain)
    }
}

fn sorted_elems_key(mask: Mask) -> Vec<usize> {
    (0..32).filter(|&i| mask & (1 << i) != 0).collect()
}

/// Extensional causality function: a table mapping every bottom-closed subset
/// to a bottom-closed strict subset, closed under unions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalityFunction {
    table: HashMap<Mask, Mask>,
}

/// Outcome of a validation pass; `failures` lists human-readable reasons for
/// the first few violated constraints.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub pass: bool,
    pub failures: Vec<String>,
}

impl ValidationReport {
    fn ok() -> Self {
        ValidationReport { pass: true, failures: Vec::new() }
    }

    fn fail(&mut self, msg: String) {
        self.pass = false;
        if self.failures.len() < 8 {
            self.failures.push(msg);
        }
    }
}

impl CausalityFunction {
    /// Builds the table by evaluating `f` on every bottom-closed subset.
    pub fn from_fn(st: &Spacetime, mut f: impl FnMut(Mask) -> Mask) -> Self {
        let table = st.bottom_closed_subsets().into_iter().map(|m| (m, f(m))).collect();
        CausalityFunction { table }
    }

    /// χ(T′) = union of strict pasts of T′: the pointwise-largest causality
    /// function on the poset.
    pub fn strict_past(st: &Spacetime) -> Self {
        CausalityFunction::from_fn(st, |m| st.strict_past_mask(m))
    }

    pub fn from_table(entries: impl IntoIterator<Item = (Mask, Mask)>) -> Self {
        CausalityFunction { table: entries.into_iter().collect() }
    }

    pub fn chi(&self, mask: Mask) -> Result<Mask> {
        self.table
            .get(&mask)
            .copied()
            .ok_or_else(|| Error::input(format!("causality function undefined on mask {mask:#b}")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (Mask, Mask)> + '_ {
        self.table.iter().map(|(&k, &v)| (k, v))
    }

    /// Draws a random valid causality function: each element picks a
    /// bottom-closed portion of its strict past, and values extend by union.
    pub fn random(st: &Spacetime, rng: &mut impl rand::Rng) -> Self {
        let n = st.len();
        let mut base = vec![0 as Mask; n];
        for (t, slot) in base.iter_mut().enumerate() {
            let past = st.strict_past_of(t);
            let mut pick = 0;
            for s in 0..n {
                if past & (1 << s) != 0 && rng.gen_bool(0.5) {
                    pick |= 1 << s;
                }
            }
            *slot = st.down_closure(pick);
        }
        CausalityFunction::from_fn(st, |m| {
            let mut out = 0;
            for (t, b) in base.iter().enumerate() {
                if m & (1 << t) != 0 {
                    out |= b;
                }
            }
            out
        })
    }
}

/// Checks the three causality-function axioms on every bottom-closed subset:
/// values bottom-closed and strictly contained, and χ distributes over unions
/// (equivalently, χ(T′) is the union of the values on principal downsets).
pub fn validate_causality_function(st: &Spacetime, chi: &CausalityFunction) -> ValidationReport {
    let mut report = ValidationReport::ok();
    let downsets = st.bottom_closed_subsets();
    for &m in &downsets {
        let v = match chi.chi(m) {
            Ok(v) => v,
            Err(_) => {
                report.fail(format!("undefined on bottom-closed set {:?}", st.elements_of(m)));
                continue;
            }
        };
        if !st.is_down_closed(v) {
            report.fail(format!(
                "value {:?} on {:?} is not bottom-closed",
                st.elements_of(v),
                st.elements_of(m)
            ));
        }
        if v & !m != 0 || (m != 0 && v == m) {
            report.fail(format!(
                "value {:?} is not a strict subset of {:?}",
                st.elements_of(v),
                st.elements_of(m)
            ));
        }
        let mut union = 0;
        for t in st.elements_of(m) {
            match chi.chi(st.down_of(t)) {
                Ok(p) => union |= p,
                Err(_) => {
                    report.fail(format!("undefined on principal downset of {}", st.id(t)));
                }
            }
        }
        if report.pass && union != v {
            report.fail(format!(
                "not union-preserving at {:?}: value {:?} vs union of principal values {:?}",
                st.elements_of(m),
                st.elements_of(v),
                st.elements_of(union)
            ));
        }
    }
    for (m, _) in chi.entries() {
        if !st.is_down_closed(m) {
            report.fail(format!("table key {:?} is not bottom-closed", st.elements_of(m)));
        }
    }
    report
}

/// True iff no maximal element of any bottom-closed subset survives into the
/// image: a theorem for valid causality functions, exposed as a checkable
/// predicate rather than assumed.
pub fn maximal_elements_removed(st: &Spacetime, chi: &CausalityFunction) -> bool {
    for m in st.bottom_closed_subsets() {
        let Ok(v) = chi.chi(m) else { return false };
        for t in st.maximal_in(m) {
            if v & (1 << t) != 0 {
                return false;
            }
        }
    }
    true
}

/// Which protocol system a position-relabelling applies to. The global past
/// behaves like an agent output (it feeds messages into the protocol) and the
/// global future like an agent input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    AgentIn(usize),
    AgentOut(usize),
    Past,
    Future,
}

impl SystemKind {
    fn group(&self) -> (usize, bool) {
        match self {
            SystemKind::AgentIn(k) => (*k, true),
            SystemKind::AgentOut(k) => (*k, false),
            SystemKind::Past => (usize::MAX - 1, false),
            SystemKind::Future => (usize::MAX, true),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SystemRelabel {
    pub kind: SystemKind,
    pub map: BTreeMap<usize, usize>,
}

/// A family of per-system position maps. A `global` map applies to every
/// system without its own entry; per-system maps let inputs and outputs of
/// different agents move independently.
#[derive(Clone, Debug, Default)]
pub struct RelabellingMap {
    pub global: Option<BTreeMap<usize, usize>>,
    pub systems: Vec<SystemRelabel>,
}

impl RelabellingMap {
    pub fn uniform(map: BTreeMap<usize, usize>) -> Self {
        RelabellingMap { global: Some(map), systems: Vec::new() }
    }

    pub fn apply(&self, kind: SystemKind, t: usize) -> Result<usize> {
        for sys in &self.systems {
            if sys.kind == kind {
                return sys
                    .map
                    .get(&t)
                    .copied()
                    .ok_or_else(|| Error::input(format!("relabelling undefined at position {t}")));
            }
        }
        self.global
            .as_ref()
            .and_then(|m| m.get(&t).copied())
            .ok_or_else(|| Error::input(format!("relabelling undefined at position {t} for {kind:?}")))
    }
}

/// Validates the strict-order conditions a relabelling must satisfy so that
/// conjugating a protocol by it preserves causal structure: for t1 ≺ t2,
/// same-system images stay strictly ordered, inputs precede later same-agent
/// outputs, and outputs precede later inputs of every agent.
pub fn validate_relabelling(
    r: &RelabellingMap,
    st: &Spacetime,
    st2: &Spacetime,
    systems: &[(SystemKind, Vec<usize>)],
) -> ValidationReport {
    let mut report = ValidationReport::ok();
    for (kind, dom) in systems {
        let mut seen = HashMap::new();
        for &t in dom {
            match r.apply(*kind, t) {
                Ok(img) => {
                    if img >= st2.len() {
                        report.fail(format!("image {img} of {t} not in the target spacetime"));
                    }
                    if let Some(prev) = seen.insert(img, t) {
                        report.fail(format!(
                            "{kind:?} maps both {prev} and {t} to {img}"
                        ));
                    }
                }
                Err(e) => report.fail(e.to_string()),
            }
        }
    }
    for (kind1, dom1) in systems {
        for (kind2, dom2) in systems {
            let (g1, in1) = kind1.group();
            let (g2, in2) = kind2.group();
            let required = match (in1, in2) {
                (true, _) => g1 == g2,
                (false, false) => g1 == g2,
                (false, true) => true,
            };
            if !required {
                continue;
            }
            for &t1 in dom1 {
                for &t2 in dom2 {
                    if !st.lt(t1, t2) {
                        continue;
                    }
                    let (Ok(i1), Ok(i2)) = (r.apply(*kind1, t1), r.apply(*kind2, t2)) else {
                        continue;
                    };
                    if !st2.lt(i1, i2) {
                        report.fail(format!(
                            "{kind1:?}({}) = {} must strictly precede {kind2:?}({}) = {}",
                            st.id(t1),
                            i1,
                            st.id(t2),
                            i2
                        ));
                    }
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn diamond() -> Spacetime {
        Spacetime::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            &[(0, 1), (0, 2), (1, 3), (2, 3)],
        )
        .unwrap()
    }

    #[test]
    fn chain_downsets() {
        let st = Spacetime::chain(3);
        let ds = st.bottom_closed_subsets();
        assert_eq!(ds, vec![0b000, 0b001, 0b011, 0b111]);
    }

    #[test]
    fn antichain_downsets() {
        let st = Spacetime::new(vec!["a".into(), "b".into()], &[]).unwrap();
        let ds = st.bottom_closed_subsets();
        assert_eq!(ds, vec![0b00, 0b01, 0b10, 0b11]);
    }

    #[test]
    fn diamond_downsets() {
        let st = diamond();
        let ds = st.bottom_closed_subsets();
        let expect: Vec<Mask> = vec![
            0b0000,
            0b0001,
            0b0011,
            0b0101,
            0b0111,
            0b1111,
        ];
        assert_eq!(ds, expect);
    }

    #[test]
    fn downset_lattice_closed_under_union_and_intersection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let st = random_poset(&mut rng, 6);
            let ds = st.bottom_closed_subsets();
            for &a in &ds {
                for &b in &ds {
                    assert!(ds.contains(&(a | b)));
                    assert!(ds.contains(&(a & b)));
                }
            }
        }
    }

    #[test]
    fn transitive_closure_and_cycles() {
        let st = Spacetime::new(
            vec!["x".into(), "y".into(), "z".into()],
            &[(0, 1), (1, 2)],
        )
        .unwrap();
        assert!(st.lt(0, 2));
        let cyc = Spacetime::new(vec!["x".into(), "y".into()], &[(0, 1), (1, 0)]);
        assert!(cyc.is_err());
    }

    #[test]
    fn chain_chi_example_validates() {
        let st = Spacetime::chain(3);
        let chi = CausalityFunction::from_table([
            (0b000, 0b000),
            (0b001, 0b000),
            (0b011, 0b001),
            (0b111, 0b011),
        ]);
        assert!(validate_causality_function(&st, &chi).pass);
        assert!(maximal_elements_removed(&st, &chi));
    }

    #[test]
    fn empty_chi_validates_and_identity_fails() {
        let st = diamond();
        let empty = CausalityFunction::from_fn(&st, |_| 0);
        assert!(validate_causality_function(&st, &empty).pass);
        let ident = CausalityFunction::from_fn(&st, |m| m);
        let report = validate_causality_function(&st, &ident);
        assert!(!report.pass);
    }

    #[test]
    fn strict_past_chi_is_valid_and_removes_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..30 {
            let st = random_poset(&mut rng, 6);
            let chi = CausalityFunction::strict_past(&st);
            assert!(validate_causality_function(&st, &chi).pass);
            assert!(maximal_elements_removed(&st, &chi));
        }
    }

    #[test]
    fn random_chi_always_removes_maximal_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let st = random_poset(&mut rng, 6);
            let chi = CausalityFunction::random(&st, &mut rng);
            assert!(validate_causality_function(&st, &chi).pass);
            assert!(maximal_elements_removed(&st, &chi));
        }
    }

    #[test]
    fn linear_extension_is_order_preserving_and_stable() {
        let st = diamond();
        assert_eq!(st.linear_extension_order(), vec![0, 1, 2, 3]);
        let anti = Spacetime::new(vec!["a".into(), "b".into()], &[]).unwrap();
        assert_eq!(anti.linear_extension_order(), vec![0, 1]);
        let (r, chain) = st.linear_extension();
        let systems = vec![
            (SystemKind::AgentIn(0), vec![0, 1, 2, 3]),
            (SystemKind::AgentOut(0), vec![0, 1, 2, 3]),
        ];
        assert!(validate_relabelling(&r, &st, &chain, &systems).pass);
    }

    #[test]
    fn relabelling_rejects_collapsed_output_input_pair() {
        let st = Spacetime::chain(2);
        let st2 = Spacetime::chain(2);
        let mut systems = Vec::new();
        systems.push((SystemKind::AgentOut(0), vec![0]));
        systems.push((SystemKind::AgentIn(1), vec![1]));
        let r = RelabellingMap {
            global: None,
            systems: vec![
                SystemRelabel { kind: SystemKind::AgentOut(0), map: [(0, 1)].into() },
                SystemRelabel { kind: SystemKind::AgentIn(1), map: [(1, 1)].into() },
            ],
        };
        let report = validate_relabelling(&r, &st, &st2, &systems);
        assert!(!report.pass);
    }

    #[test]
    fn even_odd_relabelling_validates() {
        // One agent acting at every round of a 3-round chain: round-m inputs
        // land on even stamps 2(m-1)N+2k, outputs on odd stamps 2(m-2)N+2k+1.
        let m_rounds = 3usize;
        let src = Spacetime::chain(m_rounds);
        let tgt = Spacetime::chain(2 * m_rounds + 2);
        let n_agents = 1isize;
        let k = 1isize;
        let mut in_map = BTreeMap::new();
        let mut out_map = BTreeMap::new();
        for m in 1..=(m_rounds as isize) {
            in_map.insert(m as usize - 1, (2 * (m - 1) * n_agents + 2 * k) as usize);
            out_map.insert(m as usize - 1, (2 * (m - 2) * n_agents + 2 * k + 1) as usize);
        }
        let agent = k as usize;
        let r = RelabellingMap {
            global: None,
            systems: vec![
                SystemRelabel { kind: SystemKind::AgentIn(agent), map: in_map },
                SystemRelabel { kind: SystemKind::AgentOut(agent), map: out_map },
            ],
        };
        let systems = vec![
            (SystemKind::AgentIn(agent), (0..m_rounds).collect::<Vec<_>>()),
            (SystemKind::AgentOut(agent), (0..m_rounds).collect::<Vec<_>>()),
        ];
        assert!(validate_relabelling(&r, &src, &tgt, &systems).pass);
    }

    #[test]
    fn json_round_trip() {
        let st = diamond().with_result(3).unwrap();
        let text = st.to_json();
        let back = Spacetime::from_json(&text).unwrap();
        assert_eq!(st, back);
    }

    fn random_poset(rng: &mut impl rand::Rng, max_n: usize) -> Spacetime {
        let n = rng.gen_range(1..=max_n);
        let ids = (0..n).map(|i| format!("t{i}")).collect();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.4) {
                    pairs.push((i, j));
                }
            }
        }
        Spacetime::new(ids, &pairs).unwrap()
    }
}
