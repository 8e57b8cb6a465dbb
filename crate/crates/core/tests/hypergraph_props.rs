use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use semtrust::{
    find_trust_path, CompositeTrustHypergraph, DeviceId, HypergraphError, SemanticLabel, TaskId,
    TaskTrustHypergraph, TrustAnnotation, TrustHypergraph, TrustStatus, TrustTrend,
};

fn id(s: &str) -> DeviceId {
    DeviceId::new(s).unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    Place(usize, f64, bool, bool),
    Reassign(usize, f64, bool, bool),
    Tag(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..9, 0.0f64..100.0, any::<bool>(), any::<bool>())
            .prop_map(|(m, t, s, d)| Op::Place(m, t, s, d)),
        (0usize..9, 0.0f64..100.0, any::<bool>(), any::<bool>())
            .prop_map(|(m, t, s, d)| Op::Reassign(m, t, s, d)),
        (0usize..9).prop_map(Op::Tag),
    ]
}

fn member(i: usize) -> DeviceId {
    // index 0 is the owner itself
    if i == 0 {
        id("b_i")
    } else {
        id(&format!("b_{i}"))
    }
}

fn annotation(m: usize, t: f64, trusted: bool, declining: bool) -> TrustAnnotation {
    TrustAnnotation::new(
        member(m),
        t,
        if trusted {
            TrustStatus::Trusted
        } else {
            TrustStatus::Untrusted
        },
        if declining {
            TrustTrend::Declining
        } else {
            TrustTrend::Stable
        },
    )
}

fn apply(g: &mut TrustHypergraph, op: &Op) -> Result<(), HypergraphError> {
    match *op {
        Op::Place(m, t, s, d) => g.place(annotation(m, t, s, d)),
        Op::Reassign(m, t, s, d) => g.reassign(annotation(m, t, s, d)),
        Op::Tag(m) => g.tag("low-trust", &member(m)),
    }
}

proptest! {
    #[test]
    fn partition_holds_after_every_op(ops in prop::collection::vec(op(), 0..200)) {
        let mut g = TrustHypergraph::init_local(id("b_i"));
        for op in &ops {
            let before = g.clone();
            if apply(&mut g, op).is_err() {
                prop_assert_eq!(&g, &before, "failed op must not mutate");
            }
            prop_assert_eq!(g.check_invariants(), Ok(()));
            for m in g.all_members() {
                let t = g.members(&SemanticLabel::Trusted).unwrap().contains(&m);
                let u = g.members(&SemanticLabel::Untrusted).unwrap().contains(&m);
                prop_assert!(t ^ u);
                let s = g.members(&SemanticLabel::TrustedStable).unwrap().contains(&m);
                let d = g.members(&SemanticLabel::TrustedDeclining).unwrap().contains(&m);
                prop_assert_eq!(t, s ^ d);
                prop_assert!(!(s && d));
            }
        }
    }

    #[test]
    fn eval_time_never_decreases_under_reassign(ops in prop::collection::vec(op(), 0..100)) {
        let mut g = TrustHypergraph::init_local(id("b_i"));
        for op in &ops {
            if let Op::Reassign(m, ..) = op {
                let before = g.annotation(&member(*m)).map(|a| a.eval_time);
                if apply(&mut g, op).is_ok() {
                    let after = g.annotation(&member(*m)).unwrap().eval_time;
                    prop_assert!(before.is_some_and(|b| after >= b));
                }
            } else {
                let _ = apply(&mut g, op);
            }
        }
    }

    #[test]
    fn canonical_form_round_trips(ops in prop::collection::vec(op(), 0..60)) {
        let mut g = TrustHypergraph::init_local(id("b_i"));
        for op in &ops {
            let _ = apply(&mut g, op);
        }
        let text = g.to_canonical();
        let back = TrustHypergraph::from_canonical(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_canonical(), text);
    }

    #[test]
    fn task_graph_members_are_trusted(ops in prop::collection::vec(op(), 0..60), pick in prop::collection::vec(1usize..9, 0..6)) {
        let mut g = TrustHypergraph::init_local(id("b_i"));
        for op in &ops {
            let _ = apply(&mut g, op);
        }
        let trusted: BTreeSet<DeviceId> = g.trusted().into_iter().collect();
        let wanted: Vec<DeviceId> = pick.iter().map(|&i| member(i)).collect();
        match TaskTrustHypergraph::build(id("b_i"), TaskId::new("t"), wanted.clone(), &g) {
            Ok(task) => {
                prop_assert!(task.edge.is_subset(&trusted));
                prop_assert_eq!(task.label(), SemanticLabel::TaskTrusted(TaskId::new("t")));
            }
            Err(HypergraphError::NotTrusted(d)) => prop_assert!(!trusted.contains(&d)),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn returned_paths_are_sound(edges in prop::collection::vec(prop::collection::btree_set(0usize..10, 0..4), 10)) {
        let nodes: Vec<DeviceId> = (0..10).map(|i| id(&format!("n{i}"))).collect();
        let graphs: BTreeMap<DeviceId, TaskTrustHypergraph> = edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let edge = e.iter().filter(|&&j| j != i).map(|&j| nodes[j].clone()).collect();
                (nodes[i].clone(), TaskTrustHypergraph { owner: nodes[i].clone(), task_id: TaskId::new("t"), edge })
            })
            .collect();
        for src in &nodes {
            for dst in &nodes {
                let path = find_trust_path(src, dst, &graphs).unwrap();
                if let Some(p) = &path {
                    prop_assert_eq!(p.first(), Some(src));
                    prop_assert_eq!(p.last(), Some(dst));
                    for w in p.windows(2) {
                        prop_assert!(graphs[&w[0]].edge.contains(&w[1]));
                    }
                    let distinct: BTreeSet<&DeviceId> = p.iter().collect();
                    prop_assert_eq!(distinct.len(), p.len());
                    if p.len() > 1 {
                        let parts: Vec<TaskTrustHypergraph> = p[..p.len() - 1].iter().map(|o| graphs[o].clone()).collect();
                        let chain = CompositeTrustHypergraph::chain(parts).unwrap();
                        prop_assert!(chain.reaches(dst));
                    }
                }
                prop_assert_eq!(find_trust_path(src, dst, &graphs).unwrap(), path);
            }
        }
    }
}

#[test]
fn composite_rejects_broken_chain() {
    let part = |owner: &str, members: &[&str]| TaskTrustHypergraph {
        owner: id(owner),
        task_id: TaskId::new("t"),
        edge: members.iter().map(|m| id(m)).collect(),
    };
    let ok = CompositeTrustHypergraph::chain(vec![
        part("b_i", &["b_m"]),
        part("b_m", &["b_p"]),
        part("b_p", &["b_k"]),
    ])
    .unwrap();
    assert_eq!(ok.hops(), vec![id("b_i"), id("b_m"), id("b_p")]);
    assert!(ok.reaches(&id("b_k")));
    assert!(matches!(
        CompositeTrustHypergraph::chain(vec![part("b_i", &["b_m"]), part("b_p", &["b_k"])]),
        Err(HypergraphError::BrokenChain { index: 1, .. })
    ));
    assert!(matches!(
        CompositeTrustHypergraph::chain(vec![
            part("b_i", &["b_m"]),
            part("b_m", &["b_i"]),
            part("b_i", &["b_k"])
        ]),
        Err(HypergraphError::DuplicateOwner(_))
    ));
    assert!(matches!(
        CompositeTrustHypergraph::chain(vec![]),
        Err(HypergraphError::EmptyChain)
    ));
}
