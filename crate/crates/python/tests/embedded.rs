use pyo3::ffi::c_str;
use pyo3::prelude::*;

#[test]
fn module_works_from_an_embedded_interpreter() {
    use pydynaprompt::pydynaprompt;
    pyo3::append_to_inittab!(pydynaprompt);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import json, math
import pydynaprompt as dp

assert dp.presets() == ["collapse-v1", "separable"]
c = dp.ClassEmbeddings(8, 4, seed=11)
p = dp.Prompt.zeros(2, 8)
probs = dp.predict([0.0] * 7 + [1.0], p, c)
assert abs(sum(probs) - 1.0) < 1e-12
assert dp.entropy_loss([[0.0] * 7 + [1.0]], [p], c) <= math.log(4)

s = dp.Strategy("oracle", c, prompt_len=2)
out = s.step([1.0] + [0.0] * 7, 1)
assert out["buffer_len"] == 0 and not out["appended"]
assert s.buffer() == []

r = dp.run(overrides=["stream.num_samples=20"])
summary = json.loads(r.summary_json())
assert summary["config_echo"]["stream"]["num_samples"] == 20
assert r.steps_csv().splitlines()[0].startswith("step,block,strategy")

try:
    dp.preset("nope")
    raise AssertionError("unknown preset accepted")
except ValueError:
    pass
"#
            ),
            None,
            None,
        )
        .unwrap();
    });
}
