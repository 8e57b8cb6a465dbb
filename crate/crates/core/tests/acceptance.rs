//! Acceptance checks. Each test prints one `ACCEPTANCE <n> ... PASS|FAIL`
//! line before asserting.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semtrust::harness::{csv_string, run_scenario, write_outputs, MetricsRow, ScenarioConfig};
use semtrust::pipeline::{
    run_historical_cycle, Envelope, EvaluationResult, IdleVerdict, Payload, PipelineConfig, Topic,
    Transport, TrustAgents,
};
use semtrust::semantics::RuleEngine;
use semtrust::sim::{
    Policy, ProfileOverride, Range, ResourceProfile, SimConfig, SimTrace, TraceEvent,
};
use semtrust::{
    check_resource_match, estimate_trend, find_trust_path, DeviceId, EvalConfig, Factor, Feedback,
    PerformanceRecord, ResourceSnapshot, TaskId, TaskSpec, TaskTrustHypergraph, TrustAnnotation,
    TrustHypergraph, TrustStatus, TrustTrend,
};

fn report(n: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {n} {name}: {verdict} ({detail})");
}

fn id(s: &str) -> DeviceId {
    DeviceId::new(s).unwrap()
}

fn scenario(policy: Policy, idle_fraction: f64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("{policy}-{idle_fraction}"),
        policy,
        repetitions: 5,
        sim: SimConfig {
            seed: 2024,
            n_devices: 10,
            horizon: 3600.0,
            slot_length: 30.0,
            idle_fraction,
            ..SimConfig::default()
        },
        ..ScenarioConfig::default()
    }
}

fn rows(cfg: &ScenarioConfig) -> (Vec<MetricsRow>, f64) {
    let start = Instant::now();
    let res = run_scenario(cfg).unwrap();
    (res.rows, start.elapsed().as_secs_f64())
}

#[test]
fn idle_window_utilization() {
    let mut pass = true;
    let mut details = Vec::new();
    for idle in [0.25, 0.5, 0.75] {
        let (chain, t_chain) = rows(&scenario(Policy::SemanticChain, idle));
        let (naive, t_naive) = rows(&scenario(Policy::StatisticalIdle, idle));
        let min_chain = chain
            .iter()
            .map(|r| r.idle_utilization)
            .fold(f64::INFINITY, f64::min);
        let lower = chain
            .iter()
            .zip(&naive)
            .filter(|(c, n)| n.idle_utilization < c.idle_utilization)
            .count();
        pass &= min_chain >= 0.99 && lower >= 4 && t_chain < 10.0 && t_naive < 10.0;
        details.push(format!(
            "idle={idle}: min chain util {min_chain:.4}, baseline lower in {lower}/5, {t_chain:.2}s/{t_naive:.2}s"
        ));
    }
    report(1, "idle-window utilization", pass, details.join("; "));
    assert!(pass);
}

#[test]
fn historical_evaluation_reduction() {
    let (chain, _) = rows(&scenario(Policy::SemanticChain, 0.5));
    let (all, _) = rows(&scenario(Policy::EvaluateAllCluster, 0.5));
    let ratios: Vec<f64> = chain
        .iter()
        .zip(&all)
        .map(|(c, a)| c.avg_hist_evals_per_device / a.avg_hist_evals_per_device)
        .collect();
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    let pass = worst <= 0.6;
    report(
        2,
        "historical evaluation reduction",
        pass,
        format!("worst paired ratio {worst:.3}"),
    );
    assert!(pass);
}

/// Trust status of every (owner, subject) pair over time, rebuilt from the
/// trace.
fn trust_timeline(trace: &SimTrace) -> BTreeMap<(DeviceId, DeviceId), Vec<(f64, TrustStatus)>> {
    let mut timeline: BTreeMap<(DeviceId, DeviceId), Vec<(f64, TrustStatus)>> = BTreeMap::new();
    for e in &trace.events {
        match &e.event {
            TraceEvent::Snapshot {
                device,
                label,
                graph,
            } if label == "initial" => {
                for a in graph.annotations() {
                    timeline
                        .entry((device.clone(), a.subject.clone()))
                        .or_default()
                        .push((f64::NEG_INFINITY, a.status));
                }
            }
            TraceEvent::HistoricalCompleted {
                device,
                evaluations,
            } => {
                for ev in evaluations {
                    if let EvaluationResult::Reassigned { annotation } = &ev.result {
                        timeline
                            .entry((device.clone(), ev.subject.clone()))
                            .or_default()
                            .push((e.time, annotation.status));
                    }
                }
            }
            _ => {}
        }
    }
    timeline
}

fn status_at(timeline: &[(f64, TrustStatus)], t: f64) -> Option<TrustStatus> {
    timeline
        .iter()
        .rev()
        .find(|(at, _)| *at <= t)
        .map(|(_, s)| *s)
}

#[test]
fn resource_evaluation_reduction() {
    let chain = run_scenario(&scenario(Policy::SemanticChain, 0.5)).unwrap();
    let all = run_scenario(&scenario(Policy::EvaluateAllCluster, 0.5)).unwrap();
    let fewer = chain
        .rows
        .iter()
        .zip(&all.rows)
        .all(|(c, a)| c.avg_resource_evals_per_task < a.avg_resource_evals_per_task);

    let mut queries = 0usize;
    let mut violations = 0usize;
    for run in &chain.runs {
        let timeline = trust_timeline(&run.trace);
        for d in &run.devices {
            for entry in d.agents.bus().outbox() {
                if entry.envelope.topic() != Topic::ResQuery {
                    continue;
                }
                let semtrust::pipeline::Recipients::To(list) = &entry.recipients else {
                    violations += 1;
                    continue;
                };
                for r in list {
                    queries += 1;
                    let status = timeline
                        .get(&(d.id.clone(), r.clone()))
                        .and_then(|t| status_at(t, entry.envelope.time));
                    if status != Some(TrustStatus::Trusted) {
                        violations += 1;
                    }
                }
            }
        }
    }
    let pass = fewer && violations == 0 && queries > 0;
    report(
        3,
        "resource evaluation reduction",
        pass,
        format!("fewer on every seed: {fewer}; {queries} resource queries audited, {violations} to non-trusted"),
    );
    assert!(pass);
}

fn infeasible_pool(policy: Policy) -> ScenarioConfig {
    let mut cfg = scenario(policy, 0.5);
    cfg.sim.resource_overrides.push(ProfileOverride {
        devices: vec![0, 1, 2, 3],
        profile: ResourceProfile {
            cpu_freq: Range(3e9, 3e9),
            ..ResourceProfile::default()
        },
    });
    cfg
}

#[test]
fn matching_rate() {
    let mut chain_rates = Vec::new();
    for cfg in [
        scenario(Policy::SemanticChain, 0.5),
        infeasible_pool(Policy::SemanticChain),
    ] {
        chain_rates.extend(rows(&cfg).0.iter().map(|r| r.matching_rate));
    }
    let chain_exact = chain_rates.iter().all(|r| *r == Some(1.0));

    let random = run_scenario(&infeasible_pool(Policy::RandomTrustedPick)).unwrap();
    let eval = EvalConfig::default();
    let (mut offered, mut infeasible) = (0usize, 0usize);
    for run in &random.runs {
        for e in &run.trace.events {
            if let TraceEvent::ResourceCycle {
                task,
                selected_snapshots,
                ..
            } = &e.event
            {
                offered += selected_snapshots.len();
                infeasible += selected_snapshots
                    .iter()
                    .filter(|s| !check_resource_match(task, s, &eval).matched)
                    .count();
            }
        }
    }
    let infeasible_share = infeasible as f64 / offered.max(1) as f64;
    let random_below = random
        .rows
        .iter()
        .all(|r| r.matching_rate.is_some_and(|m| m < 1.0));
    let pass = chain_exact && random_below && infeasible_share >= 0.3;
    report(
        4,
        "matching rate",
        pass,
        format!(
            "chain exact on {} runs: {chain_exact}; random pick mean {:.3}, infeasible share {infeasible_share:.3}",
            chain_rates.len(),
            random.mean.matching_rate.unwrap_or(f64::NAN)
        ),
    );
    assert!(pass);
}

fn record(
    subject: &DeviceId,
    time: f64,
    accuracy: f64,
    speed: f64,
    rt: f64,
    feedback: Feedback,
) -> PerformanceRecord {
    PerformanceRecord {
        observer: id("owner"),
        subject: subject.clone(),
        time,
        response_time: rt,
        exec_speed: speed,
        accuracy,
        feedback,
    }
}

fn normal_equation_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { t[i] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * yv;
    let beta = xtx.lu().solve(&xty).expect("non-singular design");
    beta[1]
}

#[test]
fn trend_oracle() {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let subject = id("b_j");
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=50);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3600.0)).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        if times.len() < 2 {
            times = vec![0.0, 1.0];
        }
        let factor = Factor::ALL[rng.random_range(0..4)];
        let mut records = Vec::new();
        let mut ys = Vec::new();
        for &t in &times {
            let acc = rng.random_range(0.0..1.0);
            let speed = rng.random_range(0.0..cfg.exec_speed_cap);
            let rt = rng.random_range(0.0..cfg.response_time_cap);
            let fb = if rng.random_bool(0.5) {
                Feedback::Satisfied
            } else {
                Feedback::Unsatisfied
            };
            ys.push(match factor {
                Factor::Accuracy => acc,
                Factor::ExecSpeed => speed / cfg.exec_speed_cap,
                Factor::ResponseTime => 1.0 - rt / cfg.response_time_cap,
                Factor::Feedback => f64::from(u8::from(fb == Feedback::Satisfied)),
            });
            records.push(record(&subject, t, acc, speed, rt, fb));
        }
        let got = estimate_trend(&records, factor, &cfg).unwrap().slope;
        let want = normal_equation_slope(&times, &ys);
        worst = worst.max((got - want).abs());
    }
    let pass = worst <= 1e-9;
    report(
        5,
        "trend oracle",
        pass,
        format!("500 series, max |slope diff| {worst:.3e}"),
    );
    assert!(pass);
}

#[test]
fn feasibility_oracle() {
    let cfg = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut time_err: f64 = 0.0;
    let mut bool_mismatch = 0;
    let mut matched = 0;
    for i in 0..1000 {
        let task = TaskSpec::new(
            TaskId::new(format!("t{i}")),
            rng.random_range(1.0..200.0),
            rng.random_range(100.0..4000.0),
            rng.random_range(5.0..120.0),
        )
        .unwrap();
        let snap = ResourceSnapshot {
            subject: id("b_k"),
            idle: rng.random_bool(0.85),
            available_time: rng.random_range(0.0..200.0),
            cpu_freq: rng.random_range(1e9..80e9),
            cpu_fraction: rng.random_range(0.05..1.0),
            storage: rng.random_range(0.0..400.0),
            bandwidth: rng.random_range(10.0..500.0),
            stability: rng.random_range(0.8..1.0),
        };
        let t_comm = task.size * 8.0 / snap.bandwidth;
        let t_comp =
            task.size * 8.0 * 1e6 * task.processing_density / (snap.cpu_freq * snap.cpu_fraction);
        let total = t_comm + t_comp;
        let expect = snap.idle
            && snap.storage >= task.size
            && snap.stability >= cfg.min_stability
            && total <= task.deadline
            && total <= snap.available_time;
        let v = check_resource_match(&task, &snap, &cfg);
        time_err = time_err
            .max((v.t_comm - t_comm).abs())
            .max((v.t_comp - t_comp).abs());
        bool_mismatch += usize::from(v.matched != expect);
        matched += usize::from(v.matched);
    }

    let task = TaskSpec::new(TaskId::new("worked"), 100.0, 2339.0, 60.0).unwrap();
    let snap = ResourceSnapshot {
        subject: id("b_k"),
        idle: true,
        available_time: 120.0,
        cpu_freq: 40e9,
        cpu_fraction: 0.9,
        storage: 500.0,
        bandwidth: 200.0,
        stability: 0.95,
    };
    let v = check_resource_match(&task, &snap, &cfg);
    let worked = (v.t_comm - 4.0).abs() <= 1e-9
        && (v.t_comp - 51.977_777_777_777_78).abs() <= 1e-9
        && v.matched;

    let pass = time_err <= 1e-9 && bool_mismatch == 0 && worked && matched > 0 && matched < 1000;
    report(
        6,
        "feasibility oracle",
        pass,
        format!(
            "1000 pairs, {matched} matched, max time err {time_err:.3e}, {bool_mismatch} verdict mismatches; worked example t_comm {:.6} t_comp {:.6}",
            v.t_comm, v.t_comp
        ),
    );
    assert!(pass);
}

fn bfs_oracle(
    src: &DeviceId,
    dst: &DeviceId,
    adj: &BTreeMap<DeviceId, BTreeSet<DeviceId>>,
) -> Option<Vec<DeviceId>> {
    // Expanding neighbours in sorted order yields shortest paths in
    // lexicographic order, so the first path to reach dst is the answer.
    let mut seen = BTreeSet::from([src.clone()]);
    let mut queue = VecDeque::from([vec![src.clone()]]);
    while let Some(path) = queue.pop_front() {
        let last = path.last().unwrap();
        if last == dst {
            return Some(path);
        }
        for next in adj.get(last).into_iter().flatten() {
            if seen.insert(next.clone()) {
                let mut p = path.clone();
                p.push(next.clone());
                queue.push_back(p);
            }
        }
    }
    None
}

#[test]
fn hypergraph_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let owner = id("b_i");
    let pool: Vec<DeviceId> = (0..25).map(|i| id(&format!("b_{i:02}"))).collect();
    let mut graph = TrustHypergraph::init_local(owner.clone());
    let mut model: BTreeMap<DeviceId, TrustAnnotation> = BTreeMap::new();
    let mut violations = 0;
    let mut clock = 0.0;
    for _ in 0..10_000 {
        clock += rng.random_range(0.0..5.0);
        let subject = if rng.random_bool(0.02) {
            owner.clone()
        } else {
            pool[rng.random_range(0..pool.len())].clone()
        };
        let status = if rng.random_bool(0.6) {
            TrustStatus::Trusted
        } else {
            TrustStatus::Untrusted
        };
        let trend = if rng.random_bool(0.5) {
            TrustTrend::Stable
        } else {
            TrustTrend::Declining
        };
        // occasionally go back in time to exercise the staleness check
        let at = if rng.random_bool(0.05) {
            clock - 50.0
        } else {
            clock
        };
        let a = TrustAnnotation::new(subject.clone(), at, status, trend);
        let result = if rng.random_bool(0.5) {
            graph.place(a.clone())
        } else {
            graph.reassign(a.clone())
        };
        if result.is_ok() {
            model.insert(subject, a);
        }
        if graph.check_invariants().is_err() {
            violations += 1;
        }
    }
    let model_agrees = graph.all_members() == model.keys().cloned().collect::<Vec<_>>()
        && model
            .values()
            .all(|a| graph.annotation(&a.subject) == Some(a));

    let mut path_mismatch = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let nodes: Vec<DeviceId> = (0..n).map(|i| id(&format!("n{i:02}"))).collect();
        let p = rng.random_range(0.05..0.5);
        let mut graphs = BTreeMap::new();
        let mut adj: BTreeMap<DeviceId, BTreeSet<DeviceId>> = BTreeMap::new();
        for a in &nodes {
            let edge: BTreeSet<DeviceId> = nodes
                .iter()
                .filter(|b| *b != a && rng.random_bool(p))
                .cloned()
                .collect();
            adj.insert(a.clone(), edge.clone());
            graphs.insert(
                a.clone(),
                TaskTrustHypergraph {
                    owner: a.clone(),
                    task_id: TaskId::new("t"),
                    edge,
                },
            );
        }
        for src in &nodes {
            for dst in &nodes {
                if find_trust_path(src, dst, &graphs).unwrap() != bfs_oracle(src, dst, &adj) {
                    path_mismatch += 1;
                }
            }
        }
    }
    let pass = violations == 0 && model_agrees && path_mismatch == 0;
    report(
        7,
        "hypergraph property suite",
        pass,
        format!("10000 ops, {violations} invariant violations, model agrees: {model_agrees}; 100 topologies, {path_mismatch} path mismatches"),
    );
    assert!(pass);
}

#[test]
fn end_to_end_determinism() {
    let cfg = ScenarioConfig {
        repetitions: 2,
        ..scenario(Policy::SemanticChain, 0.5)
    };
    let a = run_scenario(&cfg).unwrap();
    let b = run_scenario(&cfg).unwrap();
    let traces_equal = a
        .runs
        .iter()
        .zip(&b.runs)
        .all(|(x, y)| x.trace.to_jsonl() == y.trace.to_jsonl());
    let csv_equal = csv_string(&a.rows) == csv_string(&b.rows);

    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_outputs(&a, da.path()).unwrap();
    write_outputs(&b, db.path()).unwrap();
    let files = [
        "metrics.csv",
        "rep-00/trace.jsonl",
        "rep-01/trace.jsonl",
        "rep-00/devices/d03/records.jsonl",
    ];
    let files_equal = files.iter().all(|f| {
        std::fs::read(da.path().join(f)).unwrap() == std::fs::read(db.path().join(f)).unwrap()
    });

    let pass = traces_equal && csv_equal && files_equal;
    report(
        8,
        "end-to-end determinism",
        pass,
        format!("traces {traces_equal}, csv {csv_equal}, written files {files_equal}"),
    );
    assert!(pass);
}

/// Peers answer history queries from scripted stores.
struct ScriptedPeers {
    stores: BTreeMap<DeviceId, Vec<PerformanceRecord>>,
}

impl Transport for ScriptedPeers {
    fn broadcast(&mut self, _from: &DeviceId, query: &Envelope) -> Vec<Envelope> {
        let Payload::HisQuery { device, since } = &query.payload else {
            return Vec::new();
        };
        self.stores
            .iter()
            .filter_map(|(peer, store)| {
                let records: Vec<PerformanceRecord> = store
                    .iter()
                    .filter(|r| &r.subject == device && r.time > *since)
                    .cloned()
                    .collect();
                (!records.is_empty()).then(|| {
                    Envelope::new(
                        peer.as_str(),
                        query.time,
                        Payload::HisReply {
                            device: device.clone(),
                            records,
                        },
                    )
                })
            })
            .collect()
    }

    fn request(&mut self, _from: &DeviceId, _to: &[DeviceId], _query: &Envelope) -> Vec<Envelope> {
        Vec::new()
    }
}

#[test]
fn scripted_workflow_replay() {
    let (b_i, b_j, b_k, b_m) = (id("b_i"), id("b_j"), id("b_k"), id("b_m"));
    let ann = |d: &DeviceId, t: f64, s, tr| TrustAnnotation::new(d.clone(), t, s, tr);
    let mut graph = TrustHypergraph::init_local(b_i.clone());
    graph
        .place(ann(
            &b_j,
            100.0,
            TrustStatus::Trusted,
            TrustTrend::Declining,
        ))
        .unwrap();
    graph
        .place(ann(&b_k, 100.0, TrustStatus::Trusted, TrustTrend::Stable))
        .unwrap();
    graph
        .place(ann(&b_m, 100.0, TrustStatus::Untrusted, TrustTrend::Stable))
        .unwrap();
    let mut agents = TrustAgents::new(graph, PipelineConfig::default(), EvalConfig::default());
    let idle = IdleVerdict {
        idle: true,
        mean_recent_util: 0.05,
        pattern_util: 0.08,
    };

    // b_k and b_m were evaluated often; b_j has not been evaluated since 100
    for (t, subject) in [(400.0, &b_k), (430.0, &b_m), (460.0, &b_k), (490.0, &b_m)] {
        agents
            .begin_historical_cycle_for(&idle, vec![subject.clone()], t)
            .unwrap();
        agents
            .complete_historical_cycle(&[], t, &RuleEngine)
            .unwrap();
    }

    // b_k and b_m have recently seen b_j perform well and steadily
    let steady = |observer: &DeviceId, t: f64| PerformanceRecord {
        observer: observer.clone(),
        subject: b_j.clone(),
        time: t,
        response_time: 0.5,
        exec_speed: 3.2,
        accuracy: 0.95,
        feedback: Feedback::Satisfied,
    };
    let mut peers = ScriptedPeers {
        stores: BTreeMap::from([
            (b_k.clone(), vec![steady(&b_k, 200.0), steady(&b_k, 350.0)]),
            (b_m.clone(), vec![steady(&b_m, 280.0), steady(&b_m, 480.0)]),
        ]),
    };
    let now = 510.0;
    let outcome =
        run_historical_cycle(&mut agents, &idle, &[], now, &mut peers, &RuleEngine).unwrap();

    let mut expected = TrustHypergraph::init_local(b_i.clone());
    expected
        .place(ann(&b_j, now, TrustStatus::Trusted, TrustTrend::Stable))
        .unwrap();
    expected
        .place(ann(&b_k, 100.0, TrustStatus::Trusted, TrustTrend::Stable))
        .unwrap();
    expected
        .place(ann(&b_m, 100.0, TrustStatus::Untrusted, TrustTrend::Stable))
        .unwrap();

    let selected_bj = outcome.subjects() == vec![b_j.clone()];
    let snapshot_equal = agents.graph().to_canonical() == expected.to_canonical();
    let pass = selected_bj && snapshot_equal;
    report(
        9,
        "scripted workflow replay",
        pass,
        format!(
            "selected {:?}, final snapshot matches: {snapshot_equal}",
            outcome.subjects()
        ),
    );
    assert!(pass);
}
