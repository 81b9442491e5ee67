//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines are printed even when everything passes.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use testchain::agents::{Agents, GenerationSettings, Shot};
use testchain::chain::{run_chain, ChainOptions};
use testchain::llm::{HttpProvider, HttpSettings, LoggedProvider, ScriptBook, API_KEY_ENV};
use testchain::metrics::{
    aggregate, evaluate_question, question_accuracy, question_cwb, question_line_coverage, classify_case, EvalOptions,
    FaultyProgramSet, FaultyProvider, MetricSet,
};
use testchain::prompts::{PromptSet, FINAL_PROMPT, GO_ON_PROMPT};
use testchain::run::{self, EvaluateOptions, ProviderKind, ProviderSource, RunConfig};
use testchain::testcase::sanitize;
use testchain::{CaseSet, ChatMessage, OutcomeKind, Problem, Role, ScriptedProvider, Strategy, TestCase, Terminal};

const SECOND: Duration = Duration::from_secs(1);
/// Wall-clock ceiling for a 1 s test limit.
const TIMEOUT_CEILING: Duration = Duration::from_millis(1500);
const REPLAY_BUDGET: Duration = Duration::from_secs(30);
const SANDBOX_BUDGET: Duration = Duration::from_secs(20);

fn problem(id: &str) -> Problem {
    common::fixture_dataset().get(id).unwrap().clone()
}

fn cases(id: &str, assertions: &[&str]) -> CaseSet {
    CaseSet { question_id: id.into(), cases: assertions.iter().map(|a| TestCase::new(id, *a, Strategy::TestChain)).collect() }
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn replay_determinism() {
    let started = Instant::now();
    let dataset = common::fixture_dataset();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut c = RunConfig { interpreter: common::interpreter(), ..RunConfig::default() };
        c.provider.kind = ProviderKind::Scripted;
        c.provider.scripts = Some(common::fixture("scripts_testchain.json"));
        let source = ProviderSource::from_config(&c.provider).unwrap();
        let summary = run::generate(&c, dir.path(), &dataset, &source, false).unwrap();
        assert!(summary.failed.is_empty());
        let options = EvaluateOptions { metrics: MetricSet::ALL, ..EvaluateOptions::from_config(&c).unwrap() };
        run::evaluate(dir.path(), &dataset, &options).unwrap();
        snapshots.push(snapshot(dir.path()));
    }
    for prefix in ["cases/", "trajectories/", "eval/report.json", "eval/report.txt"] {
        assert!(snapshots[0].keys().any(|k| k.starts_with(prefix)), "no {prefix} written");
    }
    assert!(snapshots[0] == snapshots[1], "run directories differ");
    assert!(started.elapsed() < REPLAY_BUDGET, "{:?}", started.elapsed());
}

fn metric_oracle() {
    let mut s = common::session();
    let add = problem("fx/add");
    let five = cases(
        "fx/add",
        &["assert add(1, 2) == 3", "assert add(2, 2) == 4", "assert add(0, 0) == 0", "assert add(-1, 1) == 0", "assert add(2, 2) == 5"],
    );
    let outcomes: Vec<_> = five.cases.iter().map(|c| classify_case(&add, &c.assertion, &mut s, SECOND).unwrap()).collect();
    let acc = question_accuracy(&outcomes);
    assert_eq!((acc.numerator, acc.denominator, acc.value), (4, 5, 0.8));

    let my_abs = problem("fx/my_abs");
    let cov = question_line_coverage(&my_abs, &cases("fx/my_abs", &["assert my_abs(5) == 5"]), &mut s, SECOND).unwrap();
    assert_eq!((cov.numerator, cov.denominator), (2, 3));

    let mut bodies: Vec<String> = (1..=15).map(|k| format!("    return a + b + {k}\n")).collect();
    bodies.extend(["    return b + a\n", "    return sum((a, b))\n", "    return a - (-b)\n", "    return (a + b) * 1\n", "    return a + b if a < 100 else 0\n"].map(String::from));
    let faulty = FaultyProgramSet {
        question_id: add.task_id.clone(),
        programs: bodies.iter().map(|b| add.program_with_body(b)).collect(),
        provider: FaultyProvider::ExternalFile,
        shortfall: None,
    };
    let cwb = question_cwb(&cases("fx/add", &["assert add(1, 2) == 3", "assert add(-3, 3) == 0"]), &faulty, &mut s, SECOND).unwrap();
    assert_eq!((cwb.numerator, cwb.denominator, cwb.value), (15, 20, 0.75));
}

fn error_taxonomy() {
    let p = Problem {
        task_id: "tx/collatz".into(),
        prompt: "def collatz_steps(n):\n".into(),
        entry_point: "collatz_steps".into(),
        canonical_solution: "    steps = 0\n    while n != 1:\n        n = n // 2 if n % 2 == 0 else 3 * n + 1\n        steps += 1\n    return steps\n".into(),
        canonical_tests: None,
        difficulty: None,
    };
    let mut s = common::session();
    let started = Instant::now();
    let outcome = classify_case(&p, "assert collatz_steps(0) == 0", &mut s, SECOND).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(outcome.kind, OutcomeKind::Timeout);
    assert!(elapsed < TIMEOUT_CEILING, "timeout took {elapsed:?}");

    let set = cases("tx/collatz", &["assert collatz_steps(6) == 9", "assert collatz_steps('x') == 0", "assert collatz_steps(0) == 0"]);
    let options = EvalOptions { metrics: MetricSet { accuracy: true, coverage: false, cwb: false }, time_limit: SECOND };
    let report = evaluate_question(&p, &set, None, &mut s, &options).unwrap();
    let dataset = aggregate("tx", "testchain", options.metrics, vec![report]);
    assert_eq!((dataset.errors.assertion_error, dataset.errors.runtime_error, dataset.errors.timeout), (1, 1, 1));
}

fn chain_protocol() {
    let seed = [ChatMessage::system("You compute expected outputs."), ChatMessage::user("Test input: has_close_elements([1.0, 2.0, 3.9, 4.0], 0.3)")];
    let options = ChainOptions::default();
    let mut s = common::session();

    let steps = [
        "Thought: I need the pairwise gaps.\nAction:\n```python\nnums = [1.0, 2.0, 3.9, 4.0]\ngaps = [abs(a - b) for i, a in enumerate(nums) for b in nums[i + 1:]]\nprint(min(gaps))\n```",
        "Thought: Compare against the threshold.\nAction:\n```python\nprint(min(gaps) < 0.3)\n```",
        "Thought: I now know the final answer.\nTest Case: assert has_close_elements([1.0, 2.0, 3.9, 4.0], 0.3) == True",
    ];
    let inner = ScriptedProvider::new(steps);
    let llm = LoggedProvider::new(&inner);
    let t = run_chain(&llm, &mut s, &seed, &options);
    assert_eq!(t.terminal, Terminal::TestCaseEmitted);
    assert_eq!(t.test_case(), Some("assert has_close_elements([1.0, 2.0, 3.9, 4.0], 0.3) == True"));
    assert!(llm.call_count() <= options.max_rounds + 1);

    let mut thoughts: Vec<String> = (0..5).map(|i| format!("Thought: thinking ({i}).")).collect();
    thoughts.push("assert f(0) == 0".into());
    let inner = ScriptedProvider::new(thoughts);
    let llm = LoggedProvider::new(&inner);
    let t = run_chain(&llm, &mut s, &seed, &options);
    assert_eq!(t.terminal, Terminal::ForcedFinal);
    assert_eq!(FINAL_PROMPT, "Thought: I now know the final answer.\nTest Case:");
    let records = llm.records();
    let last = records.last().unwrap().messages.last().unwrap();
    assert_eq!((last.role, last.content.as_str()), (Role::User, FINAL_PROMPT));
    assert_eq!(llm.call_count(), options.max_rounds + 1);

    let inner = ScriptedProvider::new(["Thought: let me think.", "Test Case: assert f(1) == 1"]);
    let llm = LoggedProvider::new(&inner);
    run_chain(&llm, &mut s, &seed, &options);
    assert_eq!(GO_ON_PROMPT, "Observation: go on.");
    assert_eq!(llm.records()[1].messages.last().unwrap().content, GO_ON_PROMPT);
    assert!(llm.call_count() <= options.max_rounds + 1);
}

fn sanitize_rules() {
    let mut s = common::session();
    let raw: Vec<String> = [
        "assert add(1, 2) == 3",
        "assert add(1,2)==3",
        "assert add(2, 2 == 4",
        "assert add(2, 2) == 4",
        "assert add(3, 3) == 6",
        "assert add(4, 4) == 8",
        "assert add(5, 5) == 10",
        "assert add(6, 6) == 12",
        "assert add(7, 7) == 14",
    ]
    .map(String::from)
    .to_vec();
    let set = sanitize("fx/add", &raw, Strategy::TestAgent1Shot, &mut s, 5).unwrap();
    assert_eq!(
        set.assertions(),
        ["assert add(1, 2) == 3", "assert add(2, 2) == 4", "assert add(3, 3) == 6", "assert add(4, 4) == 8", "assert add(5, 5) == 10"]
    );
}

fn sandbox_invariants() {
    let started = Instant::now();
    let mut s = common::session();
    s.exec("x = 41", SECOND).unwrap();
    assert_eq!(s.exec("print(x + 1)", SECOND).unwrap().stdout, "42\n");

    let isolated = s.run_isolated_test("def f():\n    return 1\n", "assert x == 41", SECOND).unwrap();
    assert_eq!(isolated.kind, OutcomeKind::RuntimeError);
    assert_eq!(s.exec("print('f' in globals())", SECOND).unwrap().stdout, "False\n");

    let r = s.exec("while True:\n    pass", Duration::from_millis(300)).unwrap();
    assert!(r.timed_out);
    s.ensure_live().unwrap();
    assert_eq!(s.exec("print(1)", SECOND).unwrap().stdout, "1\n");
    assert!(started.elapsed() < SANDBOX_BUDGET, "{:?}", started.elapsed());
}

fn firewall() {
    let dataset = common::fixture_dataset();
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let mut s = common::session();
    for (strategy, script) in [
        (Strategy::TestChain, "scripts_testchain.json"),
        (Strategy::TestAgent1Shot, "scripts_test_agent.json"),
        (Strategy::TestAgent0Shot, "scripts_test_agent.json"),
    ] {
        let book = ScriptBook::from_json(&fs::read_to_string(common::fixture(script)).unwrap()).unwrap();
        for p in &dataset.problems {
            let inner = book.provider_for(&p.task_id);
            let llm = LoggedProvider::new(&inner);
            Agents::new(&llm, &prompts, &settings).generate(p, strategy, &mut s).unwrap();
            let body = p.canonical_solution.trim();
            let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| l.len() >= 12).collect();
            for m in llm.records().iter().flat_map(|r| r.messages.clone()).filter(|m| m.role != Role::Assistant) {
                assert!(!m.content.contains(body) && !lines.iter().any(|l| m.content.contains(l)), "{strategy} leaked {}", p.task_id);
            }
        }
    }
}

/// Endpoint and model come from `TESTCHAIN_ENDPOINT` and `TESTCHAIN_MODEL`.
fn live_smoke() {
    let settings = HttpSettings {
        endpoint: std::env::var("TESTCHAIN_ENDPOINT").unwrap_or_else(|_| "https://api.openai.com/v1/chat/completions".into()),
        model: std::env::var("TESTCHAIN_MODEL").unwrap_or_else(|_| "gpt-4-0613".into()),
        request_timeout_secs: 120,
        retry: Default::default(),
    };
    let provider = HttpProvider::from_env(settings);
    let prompts = PromptSet::default();
    let gen = GenerationSettings::default();
    let agents = Agents::new(&provider, &prompts, &gen);
    let p = problem("fx/count_evens");
    let mut s = common::session();
    let one_shot = agents.test_agent_generate(&p, Shot::One, &mut s).unwrap();
    assert!(!one_shot.case_set.is_empty(), "test_agent_1shot kept nothing");
    let chain = agents.testchain_generate(&p, &mut s).unwrap();
    assert!(!chain.case_set.is_empty(), "testchain kept nothing: {:?}", chain.failure);
}

fn check(name: &str, f: impl FnOnce()) -> bool {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => {
            println!("PASS {name}");
            true
        }
        Err(e) => {
            let reason = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            println!("FAIL {name}: {}", reason.unwrap_or_default().replace('\n', " "));
            false
        }
    }
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= check("replay determinism (byte-identical, < 30s)", replay_determinism);
    ok &= check("metric oracle (4/5 = 0.80, coverage 2/3, CwB 15/20 = 0.75, tolerance 0)", metric_oracle);
    ok &= check("error taxonomy ({AE 1, RE 1, TO 1}, timeout < 1.5s)", error_taxonomy);
    ok &= check("chain protocol (emit, forced final, go on, calls <= rounds + 1)", chain_protocol);
    ok &= check("sanitize rules (first five distinct valid, in order)", sanitize_rules);
    ok &= check("sandbox invariants (shared, isolated, restart, < 20s)", sandbox_invariants);
    ok &= check("firewall (no reference solution in outbound messages)", firewall);
    if std::env::var(API_KEY_ENV).map_or(true, |k| k.is_empty()) {
        println!("SKIP live smoke: {API_KEY_ENV} not set");
    } else {
        ok &= check("live smoke (>= 1 retained case for test_agent_1shot and testchain)", live_smoke);
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
