import pickle

import numpy as np
import pytest

from tinyprune import recovery, zoo


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_resnet(seed=0, widths=(8, 16, 32), depths=(2, 2, 2), classes=10, stats=True):
    """Small cifar-style net with randomised BN statistics (so BNs are not no-ops)."""
    g = zoo.build_architecture("resnet14", "cifar", seed=seed, widths=widths, depths=depths, num_classes=classes)
    if stats:
        randomise_bn(g, seed)
    return g


def randomise_bn(g, seed=0):
    r = np.random.default_rng(seed + 99)
    for n in g.nodes.values():
        if n.kind == "BN":
            c = n.params.channels
            n.params.gamma[...] = r.uniform(0.5, 1.5, c)
            n.params.beta[...] = r.normal(0, 0.2, c)
            n.params.running_mean[...] = r.normal(0, 0.2, c)
            n.params.running_var[...] = r.uniform(0.5, 2.0, c)
    return g


def digits_32():
    """The 8x8 handwritten digits shipped with scikit-learn, upsampled to 3x32x32."""
    datasets = pytest.importorskip("sklearn.datasets")
    from scipy.ndimage import zoom

    d = datasets.load_digits()
    x = zoom(d.images.astype(np.float32) / 16.0, (1, 4, 4), order=1)
    x = (x - x.mean()) / x.std()
    x = np.repeat(x[:, None], 3, axis=1).astype(np.float32)
    y = d.target.astype(np.int64)
    perm = np.random.default_rng(0).permutation(len(y))
    tr, te = perm[:1400], perm[1400:]
    return (x[tr], y[tr]), (x[te], y[te])


@pytest.fixture(scope="session")
def digits_teacher(request):
    """resnet14 (widths 8/16/32) trained on the digits split; cached across runs."""
    (xtr, ytr), test = digits_32()
    cache = request.config.cache.mkdir("tinyprune") / "digits_teacher_v1.pkl"
    if cache.exists():
        g = pickle.loads(cache.read_bytes())
    else:
        g = zoo.build_architecture("resnet14", "cifar", seed=0, widths=(8, 16, 32))
        g, _ = recovery.train_classifier(g, xtr, ytr, epochs=15, seed=0)
        cache.write_bytes(pickle.dumps(g))
    return g, (xtr, ytr), test


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} -- {detail}")
