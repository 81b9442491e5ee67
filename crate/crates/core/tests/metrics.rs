mod common;

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use testchain::metrics::{
    aggregate, classify_case, evaluate_question, mutate_canonical, question_accuracy, question_cwb,
    question_line_coverage, EvalOptions, FaultyProgramSet, FaultyProvider, MetricSet,
};
use testchain::{CaseSet, OutcomeKind, Problem, SandboxSession, Strategy, TestCase};

const SECOND: Duration = Duration::from_secs(1);

fn cases(id: &str, assertions: &[&str]) -> CaseSet {
    CaseSet { question_id: id.into(), cases: assertions.iter().map(|a| TestCase::new(id, *a, Strategy::TestChain)).collect() }
}

fn problem(id: &str) -> Problem {
    common::fixture_dataset().get(id).unwrap().clone()
}

/// Runs `program` and each assertion in plain Python, outside the harness;
/// returns which assertions pass.
fn python_passes(program: &str, assertions: &[&str]) -> Vec<bool> {
    let script = format!(
        "import json, sys\nsrc = {}\nres = []\nfor a in {}:\n    ns = {{}}\n    try:\n        exec(src, ns)\n        exec(a, ns)\n        res.append(True)\n    except BaseException:\n        res.append(False)\nprint(json.dumps(res))\n",
        serde_json::to_string(program).unwrap(),
        serde_json::to_string(assertions).unwrap()
    );
    let out = Command::new(common::interpreter()).arg("-c").arg(script).output().unwrap();
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn four_of_five_passing_is_eighty_percent() {
    let p = problem("fx/add");
    let set = cases(
        "fx/add",
        &["assert add(1, 2) == 3", "assert add(2, 2) == 4", "assert add(0, 0) == 0", "assert add(-1, 1) == 0", "assert add(2, 2) == 5"],
    );
    let mut s = common::session();
    let outcomes: Vec<_> = set.cases.iter().map(|c| classify_case(&p, &c.assertion, &mut s, SECOND).unwrap()).collect();
    let acc = question_accuracy(&outcomes);
    assert_eq!((acc.numerator, acc.denominator), (4, 5));
    assert_eq!(acc.value, 0.8);
    assert_eq!(outcomes[4].kind, OutcomeKind::AssertionError);
}

#[test]
fn one_branch_coverage_is_two_of_three() {
    // Program lines: 1 def, 2-6 docstring, 7 `if`, 8 `return x`, 9 `return -x`.
    let p = problem("fx/my_abs");
    let mut s = common::session();
    let positive = cases("fx/my_abs", &["assert my_abs(5) == 5", "assert my_abs(0) == 0"]);
    let cov = question_line_coverage(&p, &positive, &mut s, SECOND).unwrap();
    assert_eq!((cov.numerator, cov.denominator), (2, 3));

    let both = cases("fx/my_abs", &["assert my_abs(5) == 5", "assert my_abs(-5) == 5"]);
    assert_eq!(question_line_coverage(&p, &both, &mut s, SECOND).unwrap().value, 1.0);
    assert_eq!(question_line_coverage(&p, &CaseSet::empty("fx/my_abs"), &mut s, SECOND).unwrap().value, 0.0);
}

#[test]
fn executed_lines_agree_with_the_stdlib_tracer() {
    let p = problem("fx/count_evens");
    let program = p.canonical_program();
    let script = format!(
        "import trace\nsrc = {}\nns = {{'__file__': 'fx.py'}}\nexec(compile(src, 'fx.py', 'exec'), ns)\nt = trace.Trace(count=1, trace=0)\nt.runfunc(ns['count_evens'], [])\nprint(sorted(l for (f, l) in t.results().counts if f == 'fx.py'))\n",
        serde_json::to_string(&program).unwrap()
    );
    let out = Command::new(common::interpreter()).arg("-c").arg(script).output().unwrap();
    let expected: BTreeSet<u32> = serde_json::from_slice(&out.stdout).unwrap();
    let lines = common::session().coverage(&program, &["assert count_evens([]) == 0".to_string()], SECOND).unwrap();
    assert_eq!(lines.executed, expected);
    assert_eq!(lines.executable.len(), 5);
}

/// 15 programs that disagree with add on the tested inputs, 5 that agree.
fn hand_built_faulty(p: &Problem) -> FaultyProgramSet {
    let mut bodies: Vec<String> = (1..=15).map(|k| format!("    return a + b + {k}\n")).collect();
    bodies.extend(
        [
            "    return b + a\n",
            "    return sum((a, b))\n",
            "    return a - (-b)\n",
            "    return (a + b) * 1\n",
            "    return a + b if a < 100 else 0\n",
        ]
        .map(String::from),
    );
    FaultyProgramSet {
        question_id: p.task_id.clone(),
        programs: bodies.iter().map(|b| p.program_with_body(b)).collect(),
        provider: FaultyProvider::ExternalFile,
        shortfall: None,
    }
}

#[test]
fn fifteen_of_twenty_killed_is_seventy_five_percent() {
    let p = problem("fx/add");
    let faulty = hand_built_faulty(&p);
    let assertions = ["assert add(1, 2) == 3", "assert add(-3, 3) == 0"];
    let oracle_killed = faulty.programs.iter().filter(|prog| python_passes(prog, &assertions).contains(&false)).count();
    assert_eq!(oracle_killed, 15);

    let cwb = question_cwb(&cases("fx/add", &assertions), &faulty, &mut common::session(), SECOND).unwrap();
    assert_eq!((cwb.numerator, cwb.denominator), (15, 20));
    assert_eq!(cwb.value, 0.75);
}

#[test]
fn mutant_outside_the_tested_range_survives() {
    let p = problem("fx/add");
    let off_range = FaultyProgramSet { programs: vec![p.program_with_body("    return a + b if a < 100 else 0\n")], ..hand_built_faulty(&p) };
    let assertions = ["assert add(1, 2) == 3", "assert add(-3, 3) == 0", "assert add(99, 1) == 100"];
    assert_eq!(python_passes(&off_range.programs[0], &assertions), vec![true, true, true]);
    let cwb = question_cwb(&cases("fx/add", &assertions), &off_range, &mut common::session(), SECOND).unwrap();
    assert_eq!(cwb.numerator, 0);
}

#[test]
fn non_compiling_faulty_program_counts_as_failing() {
    let p = problem("fx/add");
    let broken = FaultyProgramSet { programs: vec![p.program_with_body("    return a +\n")], ..hand_built_faulty(&p) };
    let cwb = question_cwb(&cases("fx/add", &["assert add(1, 2) == 3"]), &broken, &mut common::session(), SECOND).unwrap();
    assert_eq!(cwb.value, 1.0);
    let empty = question_cwb(&CaseSet::empty("fx/add"), &broken, &mut common::session(), SECOND).unwrap();
    assert_eq!(empty.value, 0.0);
}

#[test]
fn taxonomy_of_wrong_value_bad_input_and_endless_loop() {
    let p = Problem {
        task_id: "tx/collatz".into(),
        prompt: "def collatz_steps(n):\n".into(),
        entry_point: "collatz_steps".into(),
        canonical_solution: "    steps = 0\n    while n != 1:\n        n = n // 2 if n % 2 == 0 else 3 * n + 1\n        steps += 1\n    return steps\n".into(),
        canonical_tests: None,
        difficulty: None,
    };
    let set = cases(
        "tx/collatz",
        &["assert collatz_steps(1) == 0", "assert collatz_steps(6) == 9", "assert collatz_steps('x') == 0", "assert collatz_steps(0) == 0"],
    );
    let mut s = common::session();
    let started = Instant::now();
    let outcome = classify_case(&p, "assert collatz_steps(0) == 0", &mut s, SECOND).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(outcome.kind, OutcomeKind::Timeout);
    assert!(elapsed < Duration::from_millis(1500), "{elapsed:?}");

    let options = EvalOptions { metrics: MetricSet { accuracy: true, coverage: false, cwb: false }, time_limit: SECOND };
    let report = evaluate_question(&p, &set, None, &mut s, &options).unwrap();
    let kinds: Vec<_> = report.outcomes.iter().map(|o| o.kind).collect();
    assert_eq!(kinds, [OutcomeKind::Pass, OutcomeKind::AssertionError, OutcomeKind::RuntimeError, OutcomeKind::Timeout]);
    let dataset = aggregate("tx", "testchain", options.metrics, vec![report]);
    assert_eq!((dataset.errors.assertion_error, dataset.errors.runtime_error, dataset.errors.timeout), (1, 1, 1));
}

#[test]
fn canonical_solutions_pass_their_own_tests() {
    let mut s = common::session();
    for p in &common::fixture_dataset().problems {
        let program = format!("{}\n{}", p.canonical_program(), p.canonical_tests.as_deref().unwrap());
        let out = s.run_isolated_test(&program, &format!("check({})", p.entry_point), SECOND).unwrap();
        assert_eq!(out.kind, OutcomeKind::Pass, "{}: {}", p.task_id, out.diagnostic);
    }
}

#[test]
fn default_mutants_of_the_fixture() {
    let p = problem("fx/add");
    let set = mutate_canonical(&p, 20, 0);
    assert_eq!(set, mutate_canonical(&p, 20, 0));
    assert!(set.programs.iter().any(|prog| prog.ends_with("    return a - b\n")));
    assert!(set.shortfall.is_some());
    let evens = mutate_canonical(&problem("fx/count_evens"), 20, 0);
    assert!(evens.programs.len() < 20);
    let killed = question_cwb(
        &cases("fx/count_evens", &["assert count_evens([1, 2, 3, 4]) == 2", "assert count_evens([]) == 0"]),
        &evens,
        &mut common::session(),
        SECOND,
    )
    .unwrap();
    let oracle = evens
        .programs
        .iter()
        .filter(|prog| python_passes(prog, &["assert count_evens([1, 2, 3, 4]) == 2", "assert count_evens([]) == 0"]).contains(&false))
        .count();
    assert_eq!(killed.numerator as usize, oracle);
}

const POOL: [&str; 6] = [
    "assert my_abs(5) == 5",
    "assert my_abs(-5) == 5",
    "assert my_abs(0) == 0",
    "assert my_abs(-1) == 2",
    "assert my_abs('a') == 1",
    "assert my_abs(3) == 3",
];

#[test]
fn metrics_are_monotone_in_the_case_set() {
    let p = problem("fx/my_abs");
    let faulty = mutate_canonical(&p, 20, 3);
    let cell = RefCell::new(common::session());
    let mut runner = TestRunner::new(Config { cases: 12, ..Config::default() });
    runner
        .run(&(proptest::sample::subsequence(POOL.to_vec(), 0..=5), 0usize..POOL.len()), |(base, extra)| {
            let mut s = cell.borrow_mut();
            let smaller = cases("fx/my_abs", &base);
            let mut larger_list = base.clone();
            if !larger_list.contains(&POOL[extra]) {
                larger_list.push(POOL[extra]);
            }
            let larger = cases("fx/my_abs", &larger_list);
            let cov_small = question_line_coverage(&p, &smaller, &mut s, SECOND).unwrap().value;
            let cov_large = question_line_coverage(&p, &larger, &mut s, SECOND).unwrap().value;
            prop_assert!(cov_small <= cov_large);
            let cwb_small = question_cwb(&smaller, &faulty, &mut s, SECOND).unwrap().value;
            let cwb_large = question_cwb(&larger, &faulty, &mut s, SECOND).unwrap().value;
            prop_assert!(cwb_small <= cwb_large);

            let acc = |set: &CaseSet, s: &mut SandboxSession| {
                let outcomes: Vec<_> = set.cases.iter().map(|c| classify_case(&p, &c.assertion, s, SECOND).unwrap()).collect();
                (question_accuracy(&outcomes).value, outcomes.last().map(|o| o.is_pass()))
            };
            let (small, _) = acc(&smaller, &mut s);
            let (large, added_pass) = acc(&larger, &mut s);
            if larger.len() > smaller.len() && !smaller.is_empty() {
                match added_pass {
                    Some(true) => prop_assert!(large >= small),
                    _ => prop_assert!(large <= small),
                }
            }
            Ok(())
        })
        .unwrap();
}
