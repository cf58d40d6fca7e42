"""Quick check that the extension imports and its core operations agree with hand values."""

import math

import fedmix

a = [[1.0, 1.0], [0.0, 0.0]]
b = [[1.0, 0.0], [1.0, 0.0]]
assert math.isclose(fedmix.dice_coefficient(a, a), 1.0)
assert math.isclose(fedmix.dice_coefficient(a, b), 0.5, rel_tol=1e-6)
assert fedmix.soft_dice_loss(a, a) < 1e-6
assert len(fedmix.soft_dice_loss_gradient(a, b)) == 2

counts = [4248, 3061, 888]
w = fedmix.fedavg_weights(counts)
assert all(math.isclose(x, n / sum(counts), rel_tol=1e-12) for x, n in zip(w, counts))
w = fedmix.adaptive_weights([1, 1], [1.0, 2.0], 1.0, 1.0)
assert all(math.isclose(x, y, abs_tol=1e-5) for x, y in zip(w, [0.41667, 0.58333]))
assert fedmix.apply_update([0.0, 1.0], [[1.0, 1.0], [3.0, -1.0]], [0.5, 0.5]) == [2.0, 1.0]

spec = fedmix.ModelSpec(height=8, width=8)
assert spec.param_count == 673
params = fedmix.init_params(spec, 0)
assert len(params) == spec.param_count
ds = fedmix.generate_client(0, "U", 10, seed=1, height=8, width=8)
assert (ds.train_len, ds.test_len, ds.level) == (8, 2, "U")
pred = fedmix.forward(spec, params, ds.image(0))
assert len(pred) == 8 and all(0.0 < v < 1.0 for row in pred for v in row)

config = fedmix.ExperimentConfig.from_toml(
    """
rounds = 2
local_steps = 1
[model]
height = 8
width = 8
[[client]]
level = "U"
samples = 10
[[client]]
level = "L"
samples = 10
"""
)
assert config.levels == ["U", "L"]
rows = fedmix.run_experiment(config)
assert [r[0] for r in rows] == [1, 1, 2, 2]
assert abs(sum(r[4] for r in rows if r[0] == 1) - 1.0) < 1e-9
try:
    fedmix.ExperimentConfig.from_toml("roundz = 3")
except ValueError as e:
    assert "rounds" in str(e)
else:
    raise AssertionError("unknown key accepted")
print("smoke test passed")
