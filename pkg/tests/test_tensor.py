import numpy as np
import pytest

from odp.tensor import MemoryLedger, NonFiniteError, Tensor, track


def test_tensor_basics():
    t = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    assert t.shape == (2, 3)
    assert t.dtype_name == "f32"
    assert t.nbytes == 24
    with pytest.raises(ValueError):
        t.data[0, 0] = 9.0  # immutable


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf, 0.0])


def test_ledger_counts_live_bytes():
    ledger = MemoryLedger()
    with track(ledger):
        t = Tensor(np.zeros((2, 3), dtype=np.float32))
    assert ledger.current_bytes == 24
    assert ledger.peak_bytes == 24
    ledger.free(t)
    assert ledger.current_bytes == 0
    assert ledger.peak_bytes == 24


def test_ledger_running_max():
    # allocate 100B, free it, allocate 60B -> peak stays 100B
    ledger = MemoryLedger()
    with track(ledger):
        a = Tensor(np.zeros(25, dtype=np.float32))
        ledger.free(a)
        Tensor(np.zeros(15, dtype=np.float32))
    assert ledger.current_bytes == 60
    assert ledger.peak_bytes == 100


def test_ledger_double_free_rejected():
    ledger = MemoryLedger()
    with track(ledger):
        t = Tensor(np.zeros(4))
    ledger.free(t)
    with pytest.raises(ValueError):
        ledger.free(t)


def test_params_not_tracked():
    ledger = MemoryLedger()
    with track(ledger):
        Tensor(np.zeros(8), is_param=True)
        t = Tensor(np.zeros(8, dtype=np.float32))
    assert ledger.current_bytes == t.nbytes


def test_peak_invariant_and_phases():
    ledger = MemoryLedger()
    with track(ledger):
        with ledger.phase("a"):
            x = Tensor(np.zeros(10, dtype=np.float32))
            assert ledger.peak_bytes >= ledger.current_bytes
        ledger.free(x)
        with ledger.phase("a"):
            Tensor(np.zeros(3, dtype=np.float32))
        with ledger.phase("b"):
            Tensor(np.zeros(100, dtype=np.float32))
    assert ledger.peak_memory("a") == 40  # running max across re-entries
    assert ledger.peak_memory("b") >= 400
    with pytest.raises(KeyError):
        ledger.peak_memory("nope")


def test_nested_phases_both_bumped():
    ledger = MemoryLedger()
    with track(ledger):
        with ledger.phase("outer"):
            with ledger.phase("inner"):
                Tensor(np.zeros(6, dtype=np.float32))
    assert ledger.peak_memory("outer") == 24
    assert ledger.peak_memory("inner") == 24
