use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let module = PyModule::new(py, "pydmih").unwrap();
        pydmih::register(&module).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("pydmih", module).unwrap();
        let code = std::ffi::CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn codes_and_distances() {
    run(r#"
c = pydmih.pack([1, -1, -1, 1])
assert pydmih.unpack(c) == [1, -1, -1, 1]
assert c.to_bits() == [True, False, False, True]
assert pydmih.hamming(c, c.flipped([0, 2])) == 2
assert pydmih.BinaryCode.from_signs([0.0, -0.5]) == pydmih.pack([1, -1])
assert pydmih.radius_schedule(5, 4) == [1, 1, 0, 0]
try:
    pydmih.pack([1, 0])
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#);
}

#[test]
fn index_agrees_with_scan() {
    run(r#"
bank = pydmih.CodeBank.random(2000, 64, 3)
index = pydmih.MihIndex(bank, m=4, strategy="contiguous")
assert len(index) == 2000 and index.tables == 4
for seed in range(5):
    q = pydmih.BinaryCode.random(64, seed)
    found, stats = index.knn_search(q, 10)
    assert found == pydmih.linear_scan_knn(bank, q, 10)
    ids, stats = index.radius_search(q, 20)
    assert ids == pydmih.linear_scan_radius(bank, q, 20)
    assert stats.survivors == len(ids)
"#);
}

#[test]
fn losses_match_known_values() {
    run(r#"
keys = [[[1, 1, 1], [1, 1, 1]], [[-1, 1, 1], [-1, -1, -1]]]
assert abs(pydmih.sami_loss(keys) - 1.0) < 1e-12
codes = [[1.0, 1.0], [1.0, 1.0], [-1.0, -1.0], [-1.0, -1.0]]
assert pydmih.triplet_loss(codes, [0, 0, 1, 1], alpha=1.0) == 0.0
"#);
}

#[test]
fn train_encode_evaluate() {
    run(r#"
train = pydmih.Dataset.generate(samples=240, identities=12, feature_dim=8, seed=1)
test = pydmih.Dataset.generate(samples=240, identities=12, feature_dim=8, seed=1, split="test")
model = pydmih.HashModel(3, 8, 8, train.identities, seed=1)
trace = model.train(train, epochs=2, p=6, k=4)
assert [t["epoch"] for t in trace] == [0, 1]
bank = model.encode(test)
assert (len(bank), bank.bits) == (240, 24)
metrics = pydmih.evaluate(bank, test.labels, test.cameras, ranks=[1, 5])
assert 0.0 < metrics["map"] <= 1.0
assert [k for k, _ in metrics["cmc"]] == [1, 5]
"#);
}
