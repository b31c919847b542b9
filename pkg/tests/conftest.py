"""Shared fixtures: scripts/ on sys.path, seeded torch, parameter gradient checks."""

import sys
from pathlib import Path

import pytest
import torch
from torch.func import functional_call

SCRIPTS_DIR = Path(__file__).resolve().parent.parent / "scripts"
if str(SCRIPTS_DIR) not in sys.path:
    sys.path.insert(0, str(SCRIPTS_DIR))


@pytest.fixture(autouse=True)
def _seed_torch(monkeypatch):
    monkeypatch.delenv("DIFFSTEREO_SEED", raising=False)
    torch.manual_seed(0)


@pytest.fixture
def param_gradcheck():
    """Compare analytic parameter gradients against central differences (float64).

    `loss_fn(call)` gets a callable running the module with the probed parameters and
    must return a scalar.
    """
    def check(module, loss_fn, eps=1e-6, atol=1e-6, rtol=1e-4):
        module = module.double()
        named = {n: p.detach().clone().requires_grad_(True) for n, p in module.named_parameters()}
        keys = list(named)

        def fn(*tensors):
            params = dict(zip(keys, tensors))
            return loss_fn(lambda *args, **kwargs: functional_call(module, params, args, kwargs))

        return torch.autograd.gradcheck(fn, tuple(named[k] for k in keys), eps=eps, atol=atol, rtol=rtol)
    return check
