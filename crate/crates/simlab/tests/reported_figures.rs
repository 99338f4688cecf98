//! The reproduction preset expects exactly the published figures.

use acrfence_simlab::preset;
use serde_json::Value;

fn paper() -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../paper.md");
    std::fs::read_to_string(path).expect("reference text at the workspace root")
}

fn expected(scenario: &str, key: &str) -> Value {
    let suite = preset("paper-repro").unwrap().unwrap();
    let sc = suite.scenarios.iter().find(|s| s.name == scenario).unwrap();
    serde_json::to_value(&sc.expect).unwrap()[key].clone()
}

#[test]
fn action_replay_figures() {
    let text = paper();
    assert!(text.contains("all 10 checkpoint-restore trials produced duplicate commits (100\\%)"));
    assert!(text.contains("a no-checkpoint baseline produced none (0/10)"));
    let trials = preset("paper-repro").unwrap().unwrap().scenarios[0].trials;
    assert_eq!(trials, 10);
    assert_eq!(expected("A/no-fence", "duplicate_trials"), 10);
    assert_eq!(expected("A/baseline", "duplicate_trials"), 0);
}

#[test]
fn authority_resurrection_figures() {
    let text = paper();
    assert!(text.contains("all token-reuse attempts succeeded (2/2)"));
    assert!(text.contains("with stateful validation (server-side revocation list), all were correctly rejected"));
    assert_eq!(expected("B/stateless/no-fence", "token_reuse"), 2);
    assert_eq!(expected("B/stateful", "token_reuse"), 0);
}
