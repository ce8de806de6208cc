"""Smoke test for the fvlab Python bindings.

Build first:  cargo build --release -p fvlab-py
Then run:     python3 python/smoke_test.py [path/to/libfvlab_py.so]
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile

import numpy as np

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(lib):
    # the shared library must be named after the module to be importable
    tmp = tempfile.mkdtemp()
    dst = os.path.join(tmp, "fvlab_py.so")
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("fvlab_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def as_array(img):
    shape, data = img
    return np.asarray(data, dtype=np.float32).reshape(shape)


def main():
    lib = sys.argv[1] if len(sys.argv) > 1 else os.path.join(ROOT, "target", "release", "libfvlab_py.so")
    fv = load_module(lib)

    ds = fv.Dataset("fmnist", "eval", seed=3, samples=4)
    assert len(ds) == 4
    target, contexts = ds.sample(0)
    again, _ = ds.sample(0)
    assert target == again, "samples must be deterministic"
    t = as_array(target)
    assert t.shape == (1, 32, 32) and 0.0 <= t.min() and t.max() <= 1.0
    assert len(contexts) == 3

    mu, var = fv.bayes_agg([[0.0, 1.0], [2.0, 1.0]], [[1.0, 1.0], [1.0, 3.0]])
    assert np.allclose(mu, [1.0, 1.0]) and np.allclose(var, [0.5, 0.75])
    mu_i, var_i = fv.bayes_agg([[0.0, 1.0], [2.0, 1.0]], [[1.0, 1.0], [1.0, 3.0]], closed=False)
    assert np.allclose(mu, mu_i) and np.allclose(var, var_i)

    assert fv.bpd(-1024 * math.log(256.0), 1024) == 8.0
    assert "model.prior_mode" in fv.config_help()

    model = fv.Model("fusionvae", ["model.width=8"], seed=1)
    assert model.num_params > 0 and model.kind == "fusionvae"
    outs = model.sample(contexts[:2], n=2, seed=5)
    assert len(outs) == 2 and as_array(outs[0]).shape == (1, 32, 32)
    assert outs == model.sample(contexts[:2], n=2, seed=5)
    rec = model.reconstruct(target, n=1)
    assert as_array(rec[0]).shape == (1, 32, 32)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.safetensors")
        model.save(path)
        back = fv.Model.load(path)
        assert back.num_params == model.num_params
        assert back.sample(contexts[:2], n=2, seed=5) == outs
        report = json.loads(back.evaluate(targets=2, importance_samples=2, mse_samples=2))
        assert len(report["mse_min"]) == 5 and report["nll_bpd"] is not None

    fcn = fv.Model("fcn", ["model.width=8"])
    assert fcn.group_sizes == []
    print("fvlab_py smoke test passed:", ", ".join(fv.MODEL_KINDS))


if __name__ == "__main__":
    main()
