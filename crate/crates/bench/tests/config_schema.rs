use riskgrad_bench::config::{ExperimentConfig, SCHEMA};
use serde_json::Value;

#[test]
fn default_dump_matches_snapshot() {
    let snapshot: Value = serde_json::from_str(include_str!("data/default_config.json")).unwrap();
    let dump: Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
    assert_eq!(dump, snapshot);
}

#[test]
fn snapshot_holds_the_uav_parameters() {
    let v: Value = serde_json::from_str(include_str!("data/default_config.json")).unwrap();
    let a = &v["system"]["A"];
    assert_eq!(a[0], serde_json::json!([1.0, 0.5, 0.0, 0.0]));
    assert_eq!(v["system"]["B"][0], serde_json::json!([0.125, 0.0]));
    assert_eq!(v["system"]["Q"][2][2], 2.0);
    assert_eq!(v["chance"]["q"], serde_json::json!([1.0, 0.1, 2.0, 0.2]));
    assert_eq!(v["chance"]["eps"], 5.0);
    assert_eq!(v["chance"]["lambda_grid"], serde_json::json!([1.0, 5.0, 10.0, 15.0, 20.0, 50.0, 100.0]));
    assert_eq!(v["policy"]["SigmaSigma"], serde_json::json!([[1.0, 0.0], [0.0, 1.0]]));
}

/// Schema node describing `value`, following `oneOf` branches by the
/// `name` discriminator.
fn branch<'a>(schema: &'a Value, value: &Value) -> &'a Value {
    match schema.get("oneOf") {
        Some(options) => options
            .as_array()
            .unwrap()
            .iter()
            .find(|o| match (o["properties"]["name"].get("const"), value.get("name")) {
                (Some(c), Some(n)) => c == n,
                (None, _) => o["type"] == "null" && value.is_null() || o["type"] == "array" && value.is_array(),
                _ => false,
            })
            .unwrap_or_else(|| panic!("no schema branch for {value}")),
        None => schema,
    }
}

fn covers(schema: &Value, value: &Value, path: &str) {
    let schema = branch(schema, value);
    if let Value::Object(map) = value {
        assert_eq!(schema["additionalProperties"], false, "{path} must reject unknown keys");
        for (k, v) in map {
            let sub = schema["properties"].get(k).unwrap_or_else(|| panic!("schema lacks {path}.{k}"));
            covers(sub, v, &format!("{path}.{k}"));
        }
    }
}

#[test]
fn schema_describes_every_configurable_field() {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    for method in ["npg", "gnpg", "ddpg", "exact_npg", "lqr", "clqr", "mpc"] {
        let cfg = ExperimentConfig::from_json(&format!(r#"{{"method": {{"name": "{method}"}}}}"#)).unwrap();
        let value: Value = serde_json::from_str(&cfg.to_json()).unwrap();
        covers(&schema, &value, "");
    }
}
