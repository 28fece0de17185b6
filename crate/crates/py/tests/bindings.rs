use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<T>(f: impl FnOnce(&Bound<'_, PyModule>) -> T) -> T {
    Python::attach(|py| {
        let m = PyModule::new(py, "pyeotlab").unwrap();
        pyeotlab::pyeotlab(&m).unwrap();
        f(&m)
    })
}

fn line(n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    ((0..n).map(|i| vec![i as f64 / n as f64]).collect(), vec![1.0 / n as f64; n])
}

#[test]
fn exact_ot_of_a_shift_costs_its_square() {
    with_module(|m| {
        let (x, w) = line(10);
        let y: Vec<Vec<f64>> = x.iter().map(|p| vec![p[0] + 0.2]).collect();
        let res = m.getattr("exact_ot").unwrap().call1((x, w.clone(), y, w)).unwrap();
        let cost: f64 = res.get_item("cost").unwrap().extract().unwrap();
        assert!((cost - 0.04).abs() < 1e-12);
    });
}

#[test]
fn sinkhorn_returns_a_converged_plan() {
    with_module(|m| {
        let (x, w) = line(16);
        let kw = PyDict::new(m.py());
        kw.set_item("tol", 1e-10).unwrap();
        let res = m
            .getattr("sinkhorn")
            .unwrap()
            .call((x.clone(), w.clone(), x, w, 0.3), Some(&kw))
            .unwrap();
        assert!(res.get_item("converged").unwrap().extract::<bool>().unwrap());
        let plan: Vec<f64> = res.get_item("plan").unwrap().extract().unwrap();
        assert_eq!(plan.len(), 256);
        assert!((plan.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    });
}

#[test]
fn bad_inputs_raise_value_error() {
    with_module(|m| {
        let (x, w) = line(4);
        let err = m
            .getattr("sinkhorn")
            .unwrap()
            .call1((x.clone(), w, x, vec![0.5; 4], 0.3))
            .unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(m.py()));
        let err = m.getattr("compose").unwrap().call1(("{}", "{}")).unwrap_err();
        assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(m.py()));
    });
}

#[test]
fn compose_uses_the_pushforward_law() {
    with_module(|m| {
        let s1 = r#"{"A": [1.0, 0.0, 0.0, 1.0], "b": [0.0, 0.0], "gamma": 2.0, "kappa": 1.0}"#;
        let s2 = r#"{"A": [1.0, 0.0, 0.0, 1.0], "b": [1.0, 0.0], "gamma": 1.0, "kappa": 1.0}"#;
        let out: String = m.getattr("compose").unwrap().call1((s2, s1)).unwrap().extract().unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["b"], serde_json::json!([0.5, 0.0]));
    });
}
