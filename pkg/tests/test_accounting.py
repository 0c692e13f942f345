import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from atomtune.accounting import (METHODS, REFERENCE_SIZES, REFERENCE_TABLE, AccountingError, LayerSpec,
                                 comparison_table, decomposition_flops, linear_flops, model_report,
                                 reference_table, param_count)
from atomtune.finetune import (AtomsOnly, AtomsPlusLinear, DecomposeOptions, LinearProbe,
                               LoRABaseline, OvercompletePlusLinear, build_demo_cnn,
                               decompose_model, prepare_model)

CONV = LayerSpec("conv", 640, 640, 3, r=8, m=9, m1=3, k_c=4)
ATTN = LayerSpec("attention", 640, 640, r=8, m=9, m1=3, k_c=4)


@pytest.fixture(scope="module")
def decomposed():
    return decompose_model(build_demo_cnn(0), DecomposeOptions())[0]


# --- reference sizes ---------------------------------------------------------------------

@pytest.mark.parametrize("method,expected", [
    ("original", 3_686_400), ("lora", 30_720), ("loha", 61_440), ("lokr", 3_904),
    ("oft", 460_800), ("ours_d", 81), ("ours_beta", 17_523)])
def test_conv_column(method, expected):
    assert param_count(CONV, method) == expected


@pytest.mark.parametrize("method,expected", [
    ("original", 1_638_400), ("lora", 40_960), ("loha", 81_920), ("oft", 207_360),
    ("ours_d", 576)])
def test_attention_column(method, expected):
    assert param_count(ATTN, method) == expected


def test_lokr_attention_formula_value():
    # 8c + 4r^2 at c = 640, r = 8; the reference table prints 5,378 for this cell
    assert param_count(ATTN, "lokr") == 8 * 640 + 4 * 8 * 8 == 5_376


def test_reference_table_differs_only_in_lokr_attention():
    ours = reference_table()
    assert len(REFERENCE_TABLE) == 13 and set(ours) == set(REFERENCE_TABLE)
    diff = {k for k in REFERENCE_TABLE if ours[k] != REFERENCE_TABLE[k]}
    assert diff == {("attention", "lokr")}
    assert REFERENCE_SIZES == dict(c=640, k=3, r=8, m=9, m1=3, k_c=4)


def test_counts_are_python_ints():
    for method in METHODS:
        assert type(param_count(CONV, method)) is int


def test_compact_beta_count():
    spec = LayerSpec("conv", 640, 640, 3, m=9, m1=3, count_faithful=False)
    assert param_count(spec, "ours_beta") == 9 * 3 * 9 + 9 * 3


def test_linear_matrix_is_quarter_attention():
    lin = LayerSpec("linear", 640, 640, r=8, m=9, k_c=4)
    for method in ("original", "lora", "loha", "oft", "ours_d"):
        assert 4 * param_count(lin, method) == param_count(ATTN, method)


def test_missing_hyperparameter():
    with pytest.raises(AccountingError):
        param_count(LayerSpec("conv", 8, 8, 3), "lora")
    with pytest.raises(AccountingError):
        param_count(LayerSpec("conv", 8, 8, 3), "ours_d")
    with pytest.raises(AccountingError):
        param_count(CONV, "bitfit")


def test_block_divisibility_enforced():
    with pytest.raises(AccountingError):
        param_count(LayerSpec("linear", 10, 8, m=9, k_c=4), "ours_d")


@given(c=st.integers(1, 64), r=st.integers(1, 16), k=st.sampled_from([1, 3, 5]))
def test_conv_formula_scaling(c, r, k):
    spec = LayerSpec("conv", c, c, k, r=r, m=9, m1=3)
    assert param_count(spec, "loha") == 2 * param_count(spec, "lora")
    assert param_count(spec, "ours_d") == 9 * k * k


# --- FLOPs ---------------------------------------------------------------------------------

def test_decomposition_flops_reference():
    assert decomposition_flops(512, 512, 4, 9, 1) == 9_700_192


def test_decomposition_flops_degenerate_and_linear_in_k():
    assert decomposition_flops(7, 5, 3, 0, 4) == 4 * 7 * 5
    assert decomposition_flops(64, 32, 3, 6, 2) == 2 * decomposition_flops(64, 32, 3, 6, 1)


def test_linear_flops_reference():
    assert linear_flops(64, 512, 512) == 101_057_024


@given(b=st.integers(0, 256), ci=st.integers(1, 64), c=st.integers(1, 64))
def test_linear_flops_structure(b, ci, c):
    assert linear_flops(0, ci, c) == ci * c + c
    # batch-dependent part is linear in the batch
    assert linear_flops(b, ci, c) - linear_flops(0, ci, c) == b * (linear_flops(1, ci, c)
                                                                  - linear_flops(0, ci, c))


def test_flop_validation():
    with pytest.raises(AccountingError):
        decomposition_flops(0, 4, 3, 9, 1)
    with pytest.raises(AccountingError):
        linear_flops(-1, 4, 4)


# --- model reports -----------------------------------------------------------------------------

def test_atoms_only_report(decomposed):
    rep = model_report(decomposed, AtomsOnly)
    convs = {n: v for n, v in rep.per_layer.items() if n.startswith("conv")}
    assert sum(convs.values()) == 4 * 81
    assert rep.total == 4 * 81 + decomposed.head.num_params()


def test_linear_probe_report(decomposed):
    rep = model_report(decomposed, LinearProbe)
    assert sum(rep.per_layer.values()) == 0
    assert rep.total == rep.head


@pytest.mark.parametrize("scheme", [AtomsPlusLinear, OvercompletePlusLinear, LoRABaseline(4)],
                         ids=str)
def test_report_agrees_with_partition(scheme, decomposed):
    base = build_demo_cnn(0) if scheme.variant.value == "lora" else decomposed
    model = prepare_model(base, scheme)
    rep = model_report(model, scheme, tune_bias=True, tune_norm=True)
    assert rep.total == sum(rep.per_layer.values()) + rep.head


def test_comparison_ordering(decomposed):
    table = comparison_table(decomposed)
    counts = [n for _, n in table]
    assert counts == sorted(counts)
    adapters = dict(table)
    adapters.pop("original")
    assert min(adapters, key=adapters.get) == "ours_d"
    assert dict(table)["ours_d"] == 324


def test_report_serialization(decomposed):
    rep = model_report(decomposed, AtomsOnly)
    d = json.loads(rep.to_json())
    assert d["backbone"] == 324 and d["scheme"] == "atoms-only"
    assert [row["params"] for row in d["comparison"]] == sorted(r["params"] for r in d["comparison"])
    text = rep.table()
    assert "total" in text and "324" in text
