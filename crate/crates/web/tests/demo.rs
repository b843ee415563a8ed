use mirsim_web::Demo;
use serde_json::json;

const COUNTER: &str = r#"
global @x : i32 = 0 !var("x")
fn @main() -> i32 {
entry:
  store i32 1, @x, 0
  interrupt
  store i32 2, @x, 0
  interrupt
  choose %c, 2
  condbr %c, bad, ok
ok:
  ret i32 0
bad:
  fault "picked one"
}"#;

#[test]
fn step_rewind_and_graph() {
    let mut d = Demo::load(COUNTER).unwrap();
    let r = d.run().unwrap();
    assert_eq!(r["pending"], json!(2));
    assert_eq!(d.states().as_array().unwrap().len(), 3);
    d.rewind("#1").unwrap();
    let x = d.session().resolve("$globals.x").unwrap();
    assert_eq!(x.attribute("value"), Some("1"));
    let g = d.graph("$state", 3).unwrap();
    assert!(g["edges"].as_array().unwrap().iter().any(|e| e["label"] == json!("globals")));
    assert!(d.graph("$nothing", 3).is_err());
    d.run().unwrap();
    assert_eq!(d.choose(1).unwrap()["status"], json!("running"));
    let r = d.run().unwrap();
    assert_eq!(r["status"], json!("faulted(explicit: picked one)"));
}

#[test]
fn explore_and_load_errors() {
    let d = Demo::load(COUNTER).unwrap();
    let e = d.explore(100);
    assert_eq!(e["trace"], json!([1]));
    assert_eq!(e["fault"], json!("faulted(explicit: picked one)"));
    let err = Demo::load("fn @main() -> i32 {").err().unwrap();
    assert!(err.starts_with("line 1:"), "{err}");
}
