mod common;

use testchain::agents::{Agents, GenerationSettings, Shot};
use testchain::llm::{LoggedProvider, RequestRecord, ScriptBook};
use testchain::prompts::PromptSet;
use testchain::{Problem, Role, ScriptedProvider, Strategy, Terminal};

fn problem(id: &str) -> Problem {
    common::fixture_dataset().get(id).unwrap().clone()
}

fn book(name: &str) -> ScriptBook {
    ScriptBook::from_json(&std::fs::read_to_string(common::fixture(name)).unwrap()).unwrap()
}

/// Harness-authored text (system and user turns) must never carry the
/// reference solution or any of its non-trivial lines.
fn leaks_solution(problem: &Problem, records: &[RequestRecord]) -> bool {
    let body = problem.canonical_solution.trim();
    let lines: Vec<&str> = body.lines().map(str::trim).filter(|l| l.len() >= 12).collect();
    records.iter().flat_map(|r| &r.messages).filter(|m| m.role != Role::Assistant).any(|m| {
        m.content.contains(body) || lines.iter().any(|l| m.content.contains(l))
    })
}

#[test]
fn one_shot_example_is_prefixed_to_the_user_message() {
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let inner = ScriptedProvider::new(Vec::<String>::new());
    let agents = Agents::new(&inner, &prompts, &settings);
    let p = problem("fx/add");
    let one = agents.test_agent_messages(&p, Shot::One).unwrap();
    let zero = agents.test_agent_messages(&p, Shot::Zero).unwrap();
    assert_eq!(one.len(), 2);
    assert!(one[1].content.starts_with(prompts.test_agent_example.trim_end()));
    assert!(one[1].content.ends_with(&zero[1].content));
    assert!(zero[1].content.contains(&p.prompt));
    assert!(!zero[1].content.contains("add_lists"));
}

#[test]
fn test_agent_keeps_first_five_valid_distinct_assertions() {
    let reply = "```python\nassert add(1, 2) == 3\nassert add(1,2)==3\nassert add(2, 2) == 4\nassert add(2, 2 == 4\nassert add(3, 3) == 6\nassert add(4, 4) == 8\nassert add(5, 5) == 10\nassert add(6, 6) == 12\nassert add(7, 7) == 14\n```";
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let inner = ScriptedProvider::new([reply]);
    let agents = Agents::new(&inner, &prompts, &settings);
    let mut session = common::session();
    let result = agents.test_agent_generate(&problem("fx/add"), Shot::One, &mut session).unwrap();
    assert_eq!(result.strategy, Strategy::TestAgent1Shot);
    assert_eq!(
        result.case_set.assertions(),
        vec![
            "assert add(1, 2) == 3",
            "assert add(2, 2) == 4",
            "assert add(3, 3) == 6",
            "assert add(4, 4) == 8",
            "assert add(5, 5) == 10"
        ]
    );
    assert!(result.failure.is_none());
}

#[test]
fn test_agent_provider_failure_is_an_error() {
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let inner = ScriptedProvider::new(Vec::<String>::new());
    let agents = Agents::new(&inner, &prompts, &settings);
    assert!(agents.test_agent_generate(&problem("fx/add"), Shot::Zero, &mut common::session()).is_err());
}

#[test]
fn testchain_runs_one_chain_per_distinct_input() {
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let p = problem("fx/count_evens");
    let inner = book("scripts_testchain.json").provider_for(&p.task_id);
    let llm = LoggedProvider::new(&inner);
    let agents = Agents::new(&llm, &prompts, &settings);
    let result = agents.testchain_generate(&p, &mut common::session()).unwrap();

    assert_eq!(result.designer_inputs.as_deref().unwrap(), ["([1, 2, 3, 4],)", "([],)"]);
    assert_eq!(result.trajectories.len(), 2);
    assert_eq!(
        result.case_set.assertions(),
        vec!["assert count_evens([1, 2, 3, 4]) == 2", "assert count_evens([]) == 0"]
    );
    let records = llm.records();
    assert_eq!(records.len(), 4);
    let designer_system = &records[0].messages[0].content;
    assert!(designer_system.contains("at most 8 inputs"));
    assert!(records[1].messages[1].content.ends_with(
        "Test input: count_evens([1, 2, 3, 4])\nFind the expected output of `count_evens` for this input and write the test case."
    ));
    assert!(records[1].messages[1].content.starts_with("Here is an example of a complete conversation."));
}

#[test]
fn forced_final_chain_still_contributes_its_case() {
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let p = problem("fx/my_abs");
    let inner = book("scripts_testchain.json").provider_for(&p.task_id);
    let agents = Agents::new(&inner, &prompts, &settings);
    let result = agents.testchain_generate(&p, &mut common::session()).unwrap();
    let terminals: Vec<_> = result.trajectories.iter().map(|t| t.trajectory.terminal).collect();
    assert_eq!(terminals, vec![Terminal::TestCaseEmitted, Terminal::ForcedFinal]);
    assert_eq!(result.case_set.assertions(), vec!["assert my_abs(5) == 5", "assert my_abs(0) == 0"]);
}

#[test]
fn empty_designer_reply_is_a_recorded_failure() {
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let inner = ScriptedProvider::new(["I cannot think of any inputs."]);
    let agents = Agents::new(&inner, &prompts, &settings);
    let result = agents.testchain_generate(&problem("fx/add"), &mut common::session()).unwrap();
    assert!(result.case_set.is_empty());
    assert!(result.trajectories.is_empty());
    assert!(result.failure.unwrap().contains("no test inputs"));
}

#[test]
fn ablation_answers_each_input_in_one_completion() {
    let replies = [
        "```python\n(2, 3)\n(0, 0)\n```",
        "Thought: 2 + 3 is 5.\nTest Case: assert add(2, 3) == 5",
        "assert add(0, 0) == 0",
    ];
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let inner = ScriptedProvider::new(replies);
    let llm = LoggedProvider::new(&inner);
    let agents = Agents::new(&llm, &prompts, &settings);
    let result = agents.testchain_no_py_generate(&problem("fx/add"), &mut common::session()).unwrap();
    assert_eq!(result.strategy, Strategy::TestChainNoPy);
    assert_eq!(result.case_set.assertions(), vec!["assert add(2, 3) == 5", "assert add(0, 0) == 0"]);
    assert!(result.trajectories.is_empty());
    let records = llm.records();
    assert_eq!(records.len(), 3);
    assert_eq!(records[1].messages[0].content, prompts.calculator_no_py_system);
    assert!(records.iter().all(|r| r.messages.len() == 2));
}

#[test]
fn sampling_defaults_reach_every_request() {
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let p = problem("fx/add");
    let inner = book("scripts_testchain.json").provider_for(&p.task_id);
    let llm = LoggedProvider::new(&inner);
    Agents::new(&llm, &prompts, &settings).testchain_generate(&p, &mut common::session()).unwrap();
    for r in llm.records() {
        assert_eq!((r.sampling.temperature, r.sampling.top_p, r.sampling.max_tokens), (0.2, 0.95, 1024));
    }
}

#[test]
fn no_strategy_sends_the_reference_solution() {
    let dataset = common::fixture_dataset();
    let prompts = PromptSet::default();
    let settings = GenerationSettings::default();
    let mut session = common::session();
    for (strategy, script) in [
        (Strategy::TestChain, "scripts_testchain.json"),
        (Strategy::TestAgent1Shot, "scripts_test_agent.json"),
        (Strategy::TestAgent0Shot, "scripts_test_agent.json"),
    ] {
        let book = book(script);
        for p in &dataset.problems {
            let inner = book.provider_for(&p.task_id);
            let llm = LoggedProvider::new(&inner);
            Agents::new(&llm, &prompts, &settings).generate(p, strategy, &mut session).unwrap();
            assert!(llm.call_count() > 0);
            assert!(!leaks_solution(p, &llm.records()), "{strategy} leaked {}", p.task_id);
        }
    }
}

#[test]
fn firewall_scan_detects_a_planted_leak() {
    let p = problem("fx/count_evens");
    let record = RequestRecord {
        messages: vec![testchain::ChatMessage::user(format!("{}{}", p.prompt, p.canonical_solution))],
        sampling: Default::default(),
    };
    assert!(leaks_solution(&p, &[record]));
}
