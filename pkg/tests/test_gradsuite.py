import numpy as np
import pytest

from m2hx import tensor as T
from m2hx.gradsuite import BLOCKS, BlockResult, UnusedFaultError, check_block, format_table, run_suite
from m2hx.tensor import Tensor

REQUIRED = {"lora_linear", "hfa", "register_gate", "selective_scan", "rgm_block", "task_adaptor", "ctm", "msca",
            "depth_head", "sem_head", "normal_head", "edge_head", "aux_heads", "loss_depth_l1",
            "loss_cross_entropy", "loss_cosine", "loss_edge_bce", "loss_aux", "loss_depth_normal",
            "loss_edge_semantic", "uncertainty_total"}


def test_covers_every_block():
    assert REQUIRED <= set(BLOCKS)


@pytest.mark.parametrize("name", sorted(BLOCKS))
def test_block_passes_f64(name):
    assert check_block(name, seed=0) <= 1e-4


@pytest.mark.parametrize("name", ["msca", "loss_cross_entropy", "rgm_block"])
def test_block_passes_f32(name):
    assert check_block(name, seed=1, dtype="f32") <= 1e-3


def test_fault_is_caught():
    res = run_suite(seeds=1, blocks=["msca", "loss_cosine"], fault="sigmoid")
    assert not res[0].passed
    assert res[1].passed            # no sigmoid in the cosine loss


def test_fault_on_unused_op_is_an_error():
    with pytest.raises(UnusedFaultError, match="no_such_op"):
        run_suite(seeds=1, blocks=["loss_cosine"], fault="no_such_op")


def test_fault_record_counts_hits():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.inject_fault("mul") as rec:
        x * 2.0
        x * 3.0
    assert rec["hits"] == 2


def test_fault_scales_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.inject_fault("mul", 2.0):
        T.backward((x * 3.0).sum())
    assert np.allclose(x.grad, 6.0)
    y = Tensor(np.ones(3), requires_grad=True)
    T.backward((y * 3.0).sum())
    assert np.allclose(y.grad, 3.0)     # fault removed on exit


def test_table():
    text = format_table([BlockResult("demo", [1e-9, 2e-8], 1e-4, 0.5), BlockResult("bad", [1.0], 1e-4, 0.1)])
    assert "demo" in text and "FAIL" in text.splitlines()[2]
