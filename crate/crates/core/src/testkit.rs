//! Shared protocol fixtures for the unit tests of this crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compose::{parallel, with_wire_order};
use crate::fock::{enumerate_basis, region_split, FockBasis, WireRole, WireSpec};
use crate::linalg::{c, eye, random_unitary, zeros, C64, CMat};
use crate::qmap::{second_quantisation, MapKind, QuantumMap, SequenceRep};
use crate::protocol::{AgentOperation, AgentSpec, ProcessRep, Protocol};
use crate::spacetime::{CausalityFunction, Mask, Spacetime};

pub(crate) fn chain_marked(n: usize) -> Spacetime {
    Spacetime::chain(n)
        .with_past(0)
        .unwrap()
        .with_result(n - 1)
        .unwrap()
        .with_future(n - 2)
        .unwrap()
}

pub(crate) fn relay(in_w: &str, in_pos: usize, out_w: &str, out_pos: usize, cap: usize) -> QuantumMap {
    let in_b = enumerate_basis(
        vec![WireSpec::fock(in_w, 2, vec![in_pos], WireRole::AgentOut)],
        cap,
    )
    .unwrap();
    let out_b = enumerate_basis(
        vec![WireSpec::fock(out_w, 2, vec![out_pos], WireRole::AgentIn)],
        cap,
    )
    .unwrap();
    let k = second_quantisation(&in_b, &out_b, &eye(2)).unwrap();
    QuantumMap::from_kraus(in_b, out_b, vec![k], MapKind::Normalised).unwrap()
}

pub(crate) fn trivial_agent(name: &str) -> AgentSpec {
    let in_b = enumerate_basis(vec![], 1).unwrap();
    let out_b = enumerate_basis(
        vec![WireSpec::register(format!("{name}.R"), 1, 6, WireRole::Result)],
        1,
    )
    .unwrap();
    let map = QuantumMap::from_kraus(
        in_b,
        out_b,
        vec![CMat::from_element(1, 1, c(1.0, 0.0))],
        MapKind::Normalised,
    )
    .unwrap();
    AgentSpec {
        name: name.to_string(),
        in_dim: 0,
        in_positions: vec![],
        out_dim: 0,
        out_positions: vec![],
        n_max: 1,
        ops: vec![AgentOperation { setting: "go".into(), map, outcome_dim: 1 }],
    }
}

pub(crate) fn prep_agent(name: &str, pos: usize, t_res: usize, psi: &[C64]) -> AgentSpec {
    let mut a = AgentSpec {
        name: name.to_string(),
        in_dim: 0,
        in_positions: vec![],
        out_dim: psi.len(),
        out_positions: vec![pos],
        n_max: 1,
        ops: vec![],
    };
    let in_b = a.op_in_basis().unwrap();
    let out_b = a.op_out_basis(1, t_res).unwrap();
    let mut k = zeros(out_b.dim(), 1);
    for (l, amp) in psi.iter().enumerate() {
        k[(1 + l, 0)] = *amp;
    }
    let map = QuantumMap::from_kraus(in_b, out_b, vec![k], MapKind::Normalised).unwrap();
    a.ops.push(AgentOperation { setting: "prep".into(), map, outcome_dim: 1 });
    a
}

/// Measurement of a single incoming qubit message in the orthonormal
/// basis given by the rows of `u`; vacuum maps to outcome 0.
pub(crate) fn measure_agent(name: &str, pos: usize, t_res: usize, bases: Vec<(&str, CMat)>) -> AgentSpec {
    let mut a = AgentSpec {
        name: name.to_string(),
        in_dim: 2,
        in_positions: vec![pos],
        out_dim: 0,
        out_positions: vec![],
        n_max: 1,
        ops: vec![],
    };
    for (setting, u) in bases {
        let in_b = a.op_in_basis().unwrap();
        let out_b = a.op_out_basis(2, t_res).unwrap();
        let mut kraus = Vec::new();
        for b in 0..2 {
            let mut k = zeros(out_b.dim(), in_b.dim());
            for l in 0..2 {
                k[(b, 1 + l)] = u[(b, l)].conj();
            }
            kraus.push(k);
        }
        let mut k_vac = zeros(out_b.dim(), in_b.dim());
        k_vac[(0, 0)] = c(1.0, 0.0);
        kraus.push(k_vac);
        let map = QuantumMap::from_kraus(in_b, out_b, kraus, MapKind::Normalised).unwrap();
        a.ops.push(AgentOperation { setting: setting.into(), map, outcome_dim: 2 });
    }
    a
}

/// Agent that applies a level unitary to the incoming message and relays
/// it onward, with a trivial outcome.
pub(crate) fn unitary_agent(name: &str, in_pos: usize, out_pos: usize, t_res: usize, u: &CMat) -> AgentSpec {
    let mut a = AgentSpec {
        name: name.to_string(),
        in_dim: 2,
        in_positions: vec![in_pos],
        out_dim: 2,
        out_positions: vec![out_pos],
        n_max: 1,
        ops: vec![],
    };
    let in_b = a.op_in_basis().unwrap();
    let out_b = a.op_out_basis(1, t_res).unwrap();
    let mut k = zeros(out_b.dim(), in_b.dim());
    k[(0, 0)] = c(1.0, 0.0);
    for m in 0..2 {
        for l in 0..2 {
            k[(1 + m, 1 + l)] = u[(m, l)];
        }
    }
    let map = QuantumMap::from_kraus(in_b, out_b, vec![k], MapKind::Normalised).unwrap();
    a.ops.push(AgentOperation { setting: "u".into(), map, outcome_dim: 1 });
    a
}

pub(crate) fn relay_protocol(psi: &[C64], u: &CMat) -> Protocol {
    let st = chain_marked(5);
    let past = prep_agent("P", 0, 4, psi);
    let alice = unitary_agent("A", 1, 2, 4, u);
    let future = measure_agent("F", 3, 4, vec![("z", eye(2))]);
    let par = parallel(&relay("P.O", 0, "A.I", 1, 2), &relay("A.O", 2, "F.I", 3, 2)).unwrap();
    let map = with_wire_order(&par, &["P.O", "A.O"], &["A.I", "F.I"]).unwrap();
    let chi = CausalityFunction::strict_past(&st);
    Protocol {
        spacetime: st,
        process: ProcessRep::Monolithic { map, chi },
        past,
        agents: vec![alice],
        future,
    }
}

/// Random isometry from (ancilla, content) to (content, ancilla) that
/// is block diagonal in the message count, so occupation numbers pass
/// through unchanged.
pub(crate) fn count_preserving_isometry(
    in_b: &FockBasis,
    out_b: &FockBasis,
    a_old: usize,
    a_new: usize,
    rng: &mut ChaCha8Rng,
) -> CMat {
    let d_in = in_b.dim();
    let mut v = zeros(out_b.dim() * a_new, a_old * d_in);
    for n in 0..=in_b.n_max() {
        let ins: Vec<usize> = (0..d_in).filter(|&i| in_b.decode(i).0.len() == n).collect();
        let outs: Vec<usize> =
            (0..out_b.dim()).filter(|&o| out_b.decode(o).0.len() == n).collect();
        if ins.is_empty() {
            continue;
        }
        let cols: Vec<usize> = (0..a_old)
            .flat_map(|a| ins.iter().map(move |&i| a * d_in + i))
            .collect();
        let rows: Vec<usize> = outs
            .iter()
            .flat_map(|&o| (0..a_new).map(move |a2| o * a_new + a2))
            .collect();
        assert!(rows.len() >= cols.len(), "count sector {n} cannot host an isometry");
        let u = random_unitary(rows.len(), rng);
        for (ci, &col) in cols.iter().enumerate() {
            for (ri, &row) in rows.iter().enumerate() {
                v[(row, col)] = u[(ri, ci)];
            }
        }
    }
    v
}

pub(crate) fn random_sequence_process(st: &Spacetime, rng: &mut ChaCha8Rng) -> SequenceRep {
    let src_in = enumerate_basis(
        vec![
            WireSpec::fock("P.O", 2, vec![0], WireRole::AgentOut),
            WireSpec::fock("A.O", 2, vec![2], WireRole::AgentOut),
        ],
        2,
    )
    .unwrap();
    let src_out = enumerate_basis(
        vec![
            WireSpec::fock("A.I", 2, vec![1], WireRole::AgentIn),
            WireSpec::fock("F.I", 2, vec![3], WireRole::AgentIn),
        ],
        2,
    )
    .unwrap();
    let slices: Vec<Mask> = vec![0b0001, 0b0010, 0b0100, 0b1000];
    let trivial = enumerate_basis(vec![], 2).unwrap();
    let mut in_bases = vec![trivial.clone()];
    let mut out_bases = Vec::new();
    for &s in &slices {
        in_bases.push(region_split(&src_in, s).unwrap().inside);
        out_bases.push(region_split(&src_out, s).unwrap().inside);
    }
    out_bases.push(trivial);
    let anc_dims = vec![1usize, 1, 2, 2, 2, 2];
    let mut isometries = Vec::new();
    for m in 0..5 {
        isometries.push(count_preserving_isometry(
            &in_bases[m],
            &out_bases[m],
            anc_dims[m],
            anc_dims[m + 1],
            rng,
        ));
    }
    let rep = SequenceRep {
        slices,
        isometries,
        in_bases,
        out_bases,
        anc_dims,
        src_in,
        src_out,
    };
    rep.validate(st, 1e-9).unwrap();
    rep
}

/// Cap-2 interfaces with count-preserving randomness everywhere: the
/// past emits at most one message and every unitary is block diagonal in
/// the message count, so each wire carries at most one message and the
/// dense cross-check stays within a network-wide cap of four.
pub(crate) fn random_dense_protocol(seed: u64) -> Protocol {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let st = chain_marked(5);
    let rep = random_sequence_process(&st, &mut rng);

    let mut past = AgentSpec {
        name: "P".into(),
        in_dim: 0,
        in_positions: vec![],
        out_dim: 2,
        out_positions: vec![0],
        n_max: 2,
        ops: vec![],
    };
    let out_b = past.op_out_basis(1, 4).unwrap();
    let u = random_unitary(3, &mut rng);
    let mut k = zeros(out_b.dim(), 1);
    for r in 0..3 {
        k[(r, 0)] = u[(r, 0)];
    }
    let map =
        QuantumMap::from_kraus(past.op_in_basis().unwrap(), out_b, vec![k], MapKind::Normalised)
            .unwrap();
    past.ops.push(AgentOperation { setting: "prep".into(), map, outcome_dim: 1 });

    let mut alice = AgentSpec {
        name: "A".into(),
        in_dim: 2,
        in_positions: vec![1],
        out_dim: 2,
        out_positions: vec![2],
        n_max: 2,
        ops: vec![],
    };
    let in_b = alice.op_in_basis().unwrap();
    let out_b = alice.op_out_basis(1, 4).unwrap();
    let k = count_preserving_isometry(&in_b, &out_b, 1, 1, &mut rng);
    let map = QuantumMap::from_kraus(in_b, out_b, vec![k], MapKind::Normalised).unwrap();
    alice.ops.push(AgentOperation { setting: "u".into(), map, outcome_dim: 1 });

    let mut future = AgentSpec {
        name: "F".into(),
        in_dim: 2,
        in_positions: vec![3],
        out_dim: 0,
        out_positions: vec![],
        n_max: 2,
        ops: vec![],
    };
    let in_b = future.op_in_basis().unwrap();
    let d = in_b.dim();
    let out_b = future.op_out_basis(d, 4).unwrap();
    let u = random_unitary(d, &mut rng);
    let mut kraus = Vec::new();
    for b in 0..d {
        let mut k = zeros(d, d);
        for i in 0..d {
            k[(b, i)] = u[(b, i)].conj();
        }
        kraus.push(k);
    }
    let map = QuantumMap::from_kraus(in_b, out_b, kraus, MapKind::Normalised).unwrap();
    future.ops.push(AgentOperation { setting: "m".into(), map, outcome_dim: d });

    Protocol {
        spacetime: st,
        process: ProcessRep::Sequence(rep),
        past,
        agents: vec![alice],
        future,
    }
}

/// Two agents in a closed exchange: each emits its setting before its
/// input arrives and records whatever arrives as its outcome.
pub(crate) fn exchange_agent(name: &str, out_pos: usize, in_pos: usize, t_res: usize) -> AgentSpec {
    let mut a = AgentSpec {
        name: name.to_string(),
        in_dim: 2,
        in_positions: vec![in_pos],
        out_dim: 2,
        out_positions: vec![out_pos],
        n_max: 1,
        ops: vec![],
    };
    for x in 0..2usize {
        let in_b = a.op_in_basis().unwrap();
        let out_b = a.op_out_basis(2, t_res).unwrap();
        let mut k_msg = zeros(out_b.dim(), in_b.dim());
        for y in 0..2 {
            k_msg[((1 + x) * 2 + y, 1 + y)] = c(1.0, 0.0);
        }
        let mut k_vac = zeros(out_b.dim(), in_b.dim());
        k_vac[((1 + x) * 2, 0)] = c(1.0, 0.0);
        let map = QuantumMap::from_kraus(in_b, out_b, vec![k_msg, k_vac], MapKind::Normalised)
            .unwrap();
        a.ops.push(AgentOperation { setting: x.to_string(), map, outcome_dim: 2 });
    }
    a
}

pub(crate) fn exchange_protocol() -> Protocol {
    let st = Spacetime::chain(7)
        .with_past(0)
        .unwrap()
        .with_result(6)
        .unwrap()
        .with_future(5)
        .unwrap();
    let alice = exchange_agent("A", 1, 4, 6);
    let bob = exchange_agent("B", 3, 2, 6);
    let par = parallel(&relay("A.O", 1, "B.I", 2, 2), &relay("B.O", 3, "A.I", 4, 2)).unwrap();
    let map = with_wire_order(&par, &["A.O", "B.O"], &["A.I", "B.I"]).unwrap();
    let chi = CausalityFunction::strict_past(&st);
    Protocol {
        spacetime: st,
        process: ProcessRep::Monolithic { map, chi },
        past: trivial_agent("P"),
        agents: vec![alice, bob],
        future: trivial_agent("F"),
    }
}
