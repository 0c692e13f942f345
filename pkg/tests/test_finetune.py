import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomtune.accounting import scheme_layer_count
from atomtune.atom_conv import DecomposedConv2d
from atomtune.data import Dataset, gen_synthetic
from atomtune.finetune import (Adam, AtomsOnly, AtomsPlusLinear, DecomposeOptions, FullFinetune,
                               LinearProbe, LoRAAdapter, LoRABaseline, LoRAConv2d, LoRALinear,
                               Model, OvercompletePlusLinear, SchemeError, TrainConfig,
                               TrainingError, TuningScheme, build_demo_cnn, cosine_schedule,
                               cross_entropy, decompose_model, evaluate, freeze_partition,
                               lora_forward, prepare_model, reinit_head, train)
from atomtune.layers import Conv2d, FrozenParameterError, GlobalAvgPool, Linear
from atomtune.tensor import ConvGeometry, ShapeError
from oracles import numeric_grad, rel_errors

SMALL = dict(widths=(4, 8, 8, 8), hidden=8)
OPTS = DecomposeOptions(m=9, m_c=4, k_in=4, k_out=4)
ALL_SCHEMES = [LinearProbe, AtomsOnly, AtomsPlusLinear, OvercompletePlusLinear, LoRABaseline(2),
               FullFinetune]


def small_dense(seed=0):
    return build_demo_cnn(seed, **SMALL)


def small_decomposed(seed=0):
    model, _, _ = decompose_model(small_dense(seed), OPTS, seed=seed)
    return model


def model_for(scheme, seed=0):
    if scheme.variant.value in ("lora", "full"):
        return prepare_model(small_dense(seed), scheme, seed=seed)
    return prepare_model(small_decomposed(seed), scheme, seed=seed)


@pytest.fixture(scope="module")
def tiny_data():
    return gen_synthetic("shapes-source", 0, 48)


# --- schemes ----------------------------------------------------------------------------

@pytest.mark.parametrize("text", ["linear-probe", "atoms-only", "atoms-plus-linear",
                                  "overcomplete-plus-linear", "lora:4", "full"])
def test_scheme_parse_round_trip(text):
    assert str(TuningScheme.parse(text)) == text


def test_scheme_parse_errors():
    with pytest.raises(ValueError):
        TuningScheme.parse("atoms-only:3")
    with pytest.raises(ValueError):
        TuningScheme.parse("everything")
    assert TuningScheme.parse("lora").r == 8


def test_linear_probe_tunes_head_only():
    model = small_decomposed()
    part = freeze_partition(model, LinearProbe)
    assert part.backbone == 0
    assert part.total == model.head.num_params()
    assert all(name == model.head_name for name, _ in part.tunable)


def test_atoms_only_single_layer_count():
    rng = np.random.default_rng(0)
    conv = DecomposedConv2d(rng.standard_normal((9, 3, 3)), rng.standard_normal((5, 6, 9)), None,
                            ConvGeometry(1, 1))
    model = Model([("conv", conv), ("pool", GlobalAvgPool()),
                   ("head", Linear(rng.standard_normal((6, 10)), np.zeros(10)))])
    part = freeze_partition(model, AtomsOnly)
    assert part.per_layer["conv"] == 81
    assert conv.tunable == {"atoms"}


@pytest.mark.parametrize("scheme", [AtomsOnly, AtomsPlusLinear, OvercompletePlusLinear])
def test_partition_matches_accounting(scheme):
    model = prepare_model(decompose_model(build_demo_cnn(0), DecomposeOptions())[0], scheme)
    part = freeze_partition(model, scheme)
    expected = sum(scheme_layer_count(layer, scheme) for name, layer in model
                   if name != model.head_name)
    assert part.backbone == expected


def test_partition_counts_demo_cnn():
    model = decompose_model(build_demo_cnn(0), DecomposeOptions())[0]
    assert freeze_partition(model, AtomsOnly).backbone == 4 * 81
    # 4 pointwise layers and fc, each m_c * 4 * 4
    assert freeze_partition(model, AtomsPlusLinear).backbone == 4 * 81 + 5 * 9 * 16


def test_partition_flags_and_bias_options():
    model = small_decomposed()
    part = freeze_partition(model, AtomsPlusLinear, tune_bias=True, tune_norm=True)
    assert model["pw1"].tunable == {"B", "bias"}
    assert model["norm1"].tunable == {"scale", "shift"}
    assert model["conv1"].tunable == {"atoms"}
    for key in part.frozen:
        name, p = key
        assert not model[name].params[p].flags.writeable


def test_scheme_requirements():
    with pytest.raises(SchemeError):
        freeze_partition(small_dense(), AtomsOnly)
    with pytest.raises(SchemeError):
        freeze_partition(small_decomposed(), OvercompletePlusLinear)
    with pytest.raises(SchemeError):
        freeze_partition(small_decomposed(), FullFinetune)
    with pytest.raises(SchemeError):
        freeze_partition(small_dense(), LoRABaseline(2))


def test_decompose_model_notes_non_divisible():
    model = build_demo_cnn(0, widths=(6, 8, 8, 8), hidden=8)
    out, reports, notes = decompose_model(model, OPTS)
    assert out["pw1"].kind == "conv2d"
    assert any("pw1" in n for n in notes)
    assert out["conv1"].kind == "atom_conv2d" and "conv1" in reports
    assert out["head"].kind == "linear"


def test_decompose_model_leaves_input_untouched():
    model = small_dense()
    before = {k: v.tobytes() for k, v in model.params().items()}
    decompose_model(model, OPTS)
    assert {k: v.tobytes() for k, v in model.params().items()} == before


# --- backward plumbing ---------------------------------------------------------------------------

def test_backward_produces_only_tunable_grads(tiny_data):
    model = small_decomposed()
    freeze_partition(model, AtomsOnly)
    logits, caches = model.forward(tiny_data.images[:4])
    _, g = cross_entropy(logits, tiny_data.labels[:4])
    grads = model.backward(g, caches)
    assert set(grads) == set(model.tunable())
    with pytest.raises(FrozenParameterError):
        model.grad(grads, ("pw1", "B"))


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    _, g = cross_entropy(logits, labels)
    num = numeric_grad(lambda: cross_entropy(logits, labels)[0], logits)
    assert np.max(rel_errors(g, num)) <= 1e-3


def test_model_gradients_match_finite_differences(tiny_data):
    model = small_decomposed()
    model = prepare_model(model, OvercompletePlusLinear)
    freeze_partition(model, OvercompletePlusLinear)
    for _, layer in model:
        for p in layer.params:
            layer.params[p] = layer.params[p].astype(np.float64)
            layer.params[p].flags.writeable = p in layer.tunable
    x = tiny_data.images[:2].astype(np.float64)[:, :, :12, :12]
    y = tiny_data.labels[:2]
    logits, caches = model.forward(x)
    _, g = cross_entropy(logits, y)
    grads = model.backward(g, caches)

    def loss():
        for _, layer in model:
            layer.touch()
        return cross_entropy(model.predict(x), y)[0]

    for key in [("conv2", "beta"), ("conv3", "d1"), ("pw2", "B")]:
        # a small step keeps the probe away from ReLU kinks in the full network
        num = numeric_grad(loss, model[key[0]].params[key[1]], h=1e-6)
        err = rel_errors(grads[key], num)
        assert np.mean(err <= 1e-3) >= 0.99 and err.max() <= 1e-2, key


# --- optimizer -----------------------------------------------------------------------------------

def test_adam_refuses_frozen():
    model = small_decomposed()
    freeze_partition(model, AtomsOnly)
    with pytest.raises(FrozenParameterError):
        Adam().step(model, {("pw1", "A"): np.zeros_like(model["pw1"].params["A"])})


def test_adam_first_step_is_sign_times_lr():
    w = np.array([[1.0, -2.0]])
    model = Model([("head", Linear(w.copy(), None))])
    model.head.set_tunable(["weight"])
    Adam(lr=0.1).step(model, {("head", "weight"): np.array([[3.0, -0.5]])})
    np.testing.assert_allclose(model.head.params["weight"], [[0.9, -1.9]], atol=1e-6)


def test_adamw_decay_only_on_tunables(tiny_data):
    model = small_decomposed()
    snap = {k: v.tobytes() for k, v in model.params().items()}
    cfg = TrainConfig(learning_rate=1e-3, weight_decay=0.5, optimizer="adamw", epochs=1,
                      batch_size=16)
    train(model, tiny_data, AtomsOnly, cfg)
    for key, arr in model.frozen().items():
        assert arr.tobytes() == snap[key], key


def test_cosine_schedule_shape():
    lr = cosine_schedule(1.0, total_steps=100, warmup_steps=10)
    assert lr(0) == pytest.approx(0.1)
    assert lr(9) == pytest.approx(1.0)
    assert lr(10) == pytest.approx(1.0)
    assert lr(99) < 0.01
    values = [lr(s) for s in range(10, 100)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")


# --- training ------------------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", ALL_SCHEMES, ids=str)
def test_frozen_tensors_bitwise_conserved(scheme, tiny_data):
    model = model_for(scheme)
    freeze_partition(model, scheme)
    snap = {k: v.tobytes() for k, v in model.frozen().items()}
    tun = {k: v.copy() for k, v in model.tunable().items()}
    cfg = TrainConfig(learning_rate=1e-2, epochs=2, batch_size=16, schedule="cosine")
    train(model, tiny_data, scheme, cfg)
    assert {k: v.tobytes() for k, v in model.frozen().items()} == snap
    assert any(not np.array_equal(v, tun[k]) for k, v in model.tunable().items())


def test_zero_learning_rate_changes_nothing(tiny_data):
    model = small_decomposed()
    snap = {k: v.tobytes() for k, v in model.params().items()}
    cfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=48, weight_decay=0.1)
    hist = train(model, tiny_data, AtomsPlusLinear, cfg)
    losses = [r.train_loss for r in hist.records]
    assert losses == [losses[0]] * 3
    assert {k: v.tobytes() for k, v in model.params().items()} == snap


def test_training_is_deterministic(tiny_data):
    runs = []
    for _ in range(2):
        model = small_decomposed()
        hist = train(model, tiny_data, AtomsOnly, TrainConfig(epochs=2, batch_size=16, seed=3),
                     eval_data=tiny_data)
        runs.append((hist.to_jsonl(), {k: v.tobytes() for k, v in model.params().items()}))
    assert runs[0] == runs[1]


def test_history_records(tiny_data):
    model = small_decomposed()
    seen = []
    hist = train(model, tiny_data, LinearProbe, TrainConfig(epochs=3, batch_size=16, eval_every=2),
                 eval_data=tiny_data, on_epoch=lambda rec, m: seen.append(rec.epoch))
    assert seen == [1, 2, 3]
    lines = [json.loads(line) for line in hist.to_jsonl().splitlines()]
    assert [d["epoch"] for d in lines] == [1, 2, 3]
    assert lines[0]["eval_accuracy"] is None
    assert lines[1]["eval_accuracy"] is not None and lines[2]["eval_accuracy"] is not None
    assert set(lines[0]) >= {"train_loss", "train_accuracy", "lr"}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(tiny_data):
    model = small_decomposed()
    bad = Dataset(tiny_data.images.copy(), tiny_data.labels, 10)
    bad.images[5] = np.inf
    with pytest.raises(TrainingError, match="batch"):
        train(model, bad, LinearProbe, TrainConfig(epochs=1, batch_size=48))


def test_empty_dataset_rejected():
    empty = Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0), 10)
    with pytest.raises(ValueError):
        train(small_decomposed(), empty, LinearProbe, TrainConfig())
    with pytest.raises(ValueError):
        evaluate(small_decomposed(), empty)


def test_one_batch_overfit():
    data = gen_synthetic("shapes-source", 5, 32)
    model = decompose_model(build_demo_cnn(0), DecomposeOptions())[0]
    cfg = TrainConfig(learning_rate=1e-2, epochs=200, batch_size=32, weight_decay=0.0)
    hist = train(model, data, AtomsPlusLinear, cfg)
    assert hist.final.train_accuracy == 1.0
    assert evaluate(model, data)[0] == 1.0


# --- evaluate ------------------------------------------------------------------------------------

def constant_model(logits):
    w = np.zeros((3, len(logits)))
    return Model([("pool", GlobalAvgPool()), ("head", Linear(w, np.asarray(logits, float)))])


def test_constant_logits_accuracy():
    labels = np.array([0, 1, 1, 2, 2, 2, 1, 1])
    data = Dataset(np.zeros((8, 3, 4, 4)), labels, 3)
    assert evaluate(constant_model([0.0, 1.0, 0.5]), data)[0] == pytest.approx(4 / 8)
    # ties go to the lowest index
    assert evaluate(constant_model([0.3, 0.3, 0.3]), data)[0] == pytest.approx(1 / 8)


@pytest.mark.parametrize("seed", range(20))
def test_random_head_near_chance(seed, chance_data):
    model = build_demo_cnn(seed)
    reinit_head(model, seed=seed)
    acc, _ = evaluate(model, chance_data)
    assert 0.05 <= acc <= 0.2


@pytest.fixture(scope="module")
def chance_data():
    return gen_synthetic("shapes-source", 99, 1000)


# --- LoRA ----------------------------------------------------------------------------------------

def test_lora_zero_init_is_bitwise_identity(tiny_data):
    base = small_dense(1)
    adapted = prepare_model(base, LoRABaseline(2), seed=4)
    freeze_partition(adapted, LoRABaseline(2))
    x = tiny_data.images[:8]
    assert adapted.predict(x).tobytes() == base.predict(x).tobytes()
    assert isinstance(adapted["conv1"], LoRAConv2d) and isinstance(adapted["fc"], LoRALinear)
    assert adapted["head"].kind == "linear"


def test_lora_forward_formula():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((6, 5))
    a = LoRAAdapter(rng.standard_normal((6, 2)), rng.standard_normal((2, 5)), 0.5)
    x = rng.standard_normal((3, 6))
    np.testing.assert_allclose(lora_forward(w, a, x), x @ (w + 0.5 * a.down @ a.up), rtol=1e-12)
    with pytest.raises(ShapeError):
        lora_forward(w.T, a, x)


@pytest.mark.parametrize("rows,cols", [(6, 9), (9, 6), (8, 8)])
def test_full_rank_adapter_fits_any_update(rows, cols):
    rng = np.random.default_rng(rows * cols)
    target = rng.standard_normal((rows, cols))
    r = min(rows, cols)
    a = LoRAAdapter.init(rows, cols, r, rng)
    if rows <= cols:
        a.up = np.linalg.lstsq(a.down.astype(np.float64), target, rcond=None)[0]
    else:
        a.down = np.linalg.lstsq(rng.standard_normal((r, cols)).T, target.T, rcond=None)[0].T
        a.up = np.linalg.lstsq(a.down, target, rcond=None)[0]
    assert np.abs(a.delta() - target).max() <= 1e-3


def test_lora_conv_param_count():
    conv = Conv2d(np.zeros((640, 640, 3, 3), dtype=np.float32))
    layer = LoRAConv2d.wrap(conv, 8, np.random.default_rng(0))
    assert layer.num_params(["down", "up"]) == 30_720


def test_lora_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    layer = LoRAConv2d(rng.standard_normal((3, 2, 3, 3)), None, ConvGeometry(1, 1),
                       rng.standard_normal((6, 2)), rng.standard_normal((2, 9)), 0.7)
    x = rng.standard_normal((2, 2, 5, 5))
    t = rng.standard_normal((2, 3, 5, 5))

    def loss():
        layer.touch()
        return 0.5 * np.sum((layer.forward(x)[0] - t) ** 2)

    y, cache = layer.forward(x)
    _, grads = layer.backward(y - t, cache)
    for p in ("down", "up"):
        assert np.max(rel_errors(grads[p], numeric_grad(loss, layer.params[p]))) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16), r=st.integers(1, 4))
def test_lora_delta_has_requested_shape(seed, r):
    a = LoRAAdapter.init(7, 5, r, np.random.default_rng(seed))
    assert a.delta().shape == (7, 5)
    assert not a.delta().any()
