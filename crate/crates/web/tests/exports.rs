use loadsim_web::{cost_grid, pack_comparison, sweep_report};
use serde_json::Value;

#[test]
fn sweep_returns_sorted_results_and_crossovers() {
    let text = "workload = qtm:n=41,steps=2\nm = 2,4\npolicies = multiagent,af\nreplicates = 1\n";
    let report: Value = serde_json::from_str(&sweep_report(text).unwrap()).unwrap();
    let keys: Vec<(String, u64)> = report["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["policy"].as_str().unwrap().to_string(),
                r["m"].as_u64().unwrap(),
            )
        })
        .collect();
    assert_eq!(
        keys,
        vec![
            ("af".into(), 2),
            ("af".into(), 4),
            ("multiagent".into(), 2),
            ("multiagent".into(), 4)
        ]
    );
    assert_eq!(report["crossovers"][0]["baseline"], "af");
    // same text, same bytes
    assert_eq!(sweep_report(text).unwrap(), sweep_report(text).unwrap());
}

#[test]
fn sweep_rejects_bad_and_oversized_scenarios() {
    let err = sweep_report("workload = qtm\npolicy = nope\n").unwrap_err();
    assert!(err.starts_with("line 2:"), "{err}");
    let err = sweep_report("workload = qtm:n=5000,steps=1000\n").unwrap_err();
    assert!(err.contains("simulated iterates"), "{err}");
}

#[test]
fn cost_grid_stays_inside_the_amplitude() {
    let grid: Value = serde_json::from_str(&cost_grid(50, 20, 0.4, 0.1, 7).unwrap()).unwrap();
    let costs = grid["costs"].as_array().unwrap();
    assert_eq!(costs.len(), 20);
    for row in costs {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), 50);
        for c in row {
            let c = c.as_f64().unwrap();
            assert!((0.6..=1.4).contains(&c), "{c}");
        }
    }
    assert!(grid["min"].as_f64().unwrap() <= grid["max"].as_f64().unwrap());
    assert!(cost_grid(0, 5, 0.4, 0.1, 1).is_err());
    assert!(cost_grid(10, 5, 1.5, 0.1, 1).is_err());
}

#[test]
fn packing_matches_a_hand_solved_instance() {
    // {5,4,3,3,2,2,1} on two unit bins: LPT gives 10, and 10 is optimal
    let out: Value =
        serde_json::from_str(&pack_comparison("5,4,3,3,2,2,1", "1 1").unwrap()).unwrap();
    assert_eq!(out["lpt"]["makespan"], 10.0);
    assert_eq!(out["optimal"]["makespan"], 10.0);
    assert_eq!(out["ratio"], 1.0);
    let loads: f64 = out["optimal"]["loads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert_eq!(loads, 20.0);

    // the classic LPT worst case for two bins: 3,3,2,2,2 -> LPT 7, optimum 6
    let out: Value = serde_json::from_str(&pack_comparison("3,3,2,2,2", "1,1").unwrap()).unwrap();
    assert_eq!(out["lpt"]["makespan"], 7.0);
    assert_eq!(out["optimal"]["makespan"], 6.0);

    assert!(pack_comparison("1,x", "1").is_err());
    assert!(pack_comparison("1", "1,1,1,1,1").is_err());
}
