"""Central finite-difference verification of analytic gradients.

The numerical side is an independent oracle: it only ever calls the
forward computation, so agreement with the tape's reverse sweep checks
the backward rules themselves. All checks run in double precision with
h = 1e-4 and require max relative error <= 1e-5, where the relative error
of a coordinate is |analytic - numeric| / max(1, |analytic|).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = [
    "TOLERANCE",
    "numerical_gradient",
    "gradient_gap",
    "run_checks",
    "check_names",
]

TOLERANCE = 1e-5
STEP = 1e-4


def numerical_gradient(forward: Callable[[], float], x: np.ndarray,
                       h: float = STEP) -> np.ndarray:
    """Central differences of ``forward()`` with respect to ``x``, in place."""
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        saved = flat_x[i]
        flat_x[i] = saved + h
        f_plus = forward()
        flat_x[i] = saved - h
        f_minus = forward()
        flat_x[i] = saved
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def gradient_gap(forward: Callable[[], Tensor], leaves: Sequence[Tensor],
                 h: float = STEP) -> float:
    """Worst relative error between tape gradients and finite differences."""
    for leaf in leaves:
        leaf.grad = None
    with Tape() as tape:
        loss = forward()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in leaves]

    def scalar() -> float:
        return float(forward().data)

    worst = 0.0
    for leaf, a in zip(leaves, analytic):
        n = numerical_gradient(scalar, leaf.data, h)
        rel = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        worst = max(worst, float(rel.max()))
        leaf.grad = None
    return worst


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _leaf(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def _away_from_kink(rng, shape, margin: float = 1e-3) -> Tensor:
    """Sample values, resampling any coordinate within ``margin`` of zero."""
    values = rng.uniform(-1.0, 1.0, size=shape)
    for _ in range(100):
        near = np.abs(values) < margin
        if not near.any():
            break
        values[near] = rng.uniform(-1.0, 1.0, size=int(near.sum()))
    return Tensor(values)


def _sum_all(t: Tensor) -> Tensor:
    """Reduce any tensor to a scalar through the linear path."""
    flat = ad.flatten(t)
    n = flat.dims[0]
    ones = ad.constant(np.ones((n, 1)))
    return ad.reshape(ad.fully_connected(flat, ones, None), ())


def _check_conv2d(seed: int) -> float:
    rng = _rng(seed)
    x = _leaf(rng, (5, 6, 3))
    k = _leaf(rng, (3, 3, 3, 4))
    b = _leaf(rng, (4,))
    mix = Tensor(rng.uniform(-1, 1, size=(5, 6, 4)))
    worst = 0.0
    for padding in ("same", "valid"):
        sl = mix if padding == "same" else Tensor(mix.data[:3, :4].copy())

        def forward():
            out = ad.conv2d(x, k, b, padding)
            return _sum_all(ad.mul(out, sl))

        worst = max(worst, gradient_gap(forward, [x, k, b]))
    return worst


def _check_fully_connected(seed: int) -> float:
    rng = _rng(seed)
    x = _leaf(rng, (7,))
    w = _leaf(rng, (7, 5))
    b = _leaf(rng, (5,))
    mix = Tensor(rng.uniform(-1, 1, size=(5,)))

    def forward():
        return _sum_all(ad.mul(ad.fully_connected(x, w, b), mix))

    return gradient_gap(forward, [x, w, b])


def _check_relu(seed: int) -> float:
    rng = _rng(seed)
    x = _away_from_kink(rng, (4, 5))
    mix = Tensor(rng.uniform(-1, 1, size=(4, 5)))

    def forward():
        return _sum_all(ad.mul(ad.relu(x), mix))

    return gradient_gap(forward, [x])


def _check_softmax(seed: int) -> float:
    rng = _rng(seed)
    x = _leaf(rng, (6,))
    mix = Tensor(rng.uniform(-1, 1, size=(6,)))

    def forward():
        return _sum_all(ad.mul(ad.softmax(x), mix))

    return gradient_gap(forward, [x])


def _check_pool(seed: int) -> float:
    rng = _rng(seed)
    x = _leaf(rng, (6, 6, 3))
    worst = 0.0
    for window, stride, out_shape in (((2, 2), (2, 2), (3, 3, 3)),
                                      ((3, 3), (1, 1), (4, 4, 3))):
        mix = Tensor(rng.uniform(-1, 1, size=out_shape))

        def forward():
            return _sum_all(ad.mul(ad.maxpool2d(x, window, stride), mix))

        worst = max(worst, gradient_gap(forward, [x]))
    return worst


def _check_attention_pool(seed: int) -> float:
    rng = _rng(seed)
    feats = _leaf(rng, (4, 4, 5))
    att = _leaf(rng, (4, 4), low=-2.0, high=2.0)
    mix = Tensor(rng.uniform(-1, 1, size=(5,)))

    def forward():
        return _sum_all(ad.mul(ad.attention_weighted_pool(feats, att), mix))

    return gradient_gap(forward, [feats, att])


def _check_nll(seed: int) -> float:
    rng = _rng(seed)
    x = _leaf(rng, (4,))

    def forward():
        return ad.nll_loss(ad.softmax(x), 2)

    return gradient_gap(forward, [x])


def _tiny_setup(seed: int):
    from .modules import ModuleConfig
    from .params import ParameterStore

    config = ModuleConfig(feature_channels=5, attention_height=4,
                          attention_width=4, transform_hidden=6,
                          labels=("no", "yes"))
    store = ParameterStore(seed=seed)
    return config, store


def _randomize(store, rng, scale: float = 0.5) -> list[Tensor]:
    leaves = []
    for name in store.names():
        t = store.get(name)
        t.data = rng.uniform(-scale, scale, size=t.dims)
        leaves.append(t)
    return leaves


def _check_module(seed: int, which: str) -> float:
    from . import modules as m

    config, store = _tiny_setup(seed)
    rng = _rng(seed + 1)
    h, w, c = config.attention_height, config.attention_width, config.feature_channels
    feats = _leaf(rng, (h, w, c))
    att = _leaf(rng, (h, w))
    att2 = _leaf(rng, (h, w))

    def run() -> Tensor:
        if which == "transform":
            return _sum_all(m.transform_forward(store, "above", att, config))
        if which == "combine":
            return _sum_all(m.combine_forward(store, "and", att, att2, config))
        if which == "describe":
            return _sum_all(m.describe_forward(store, "color", feats, att, config))
        if which == "measure":
            return _sum_all(m.measure_forward(store, "is", att, config))
        return _sum_all(m.find_forward(store, "red", feats, config))

    run()  # create parameters
    leaves = _randomize(store, rng) + [feats, att, att2]
    return gradient_gap(run, leaves)


def _check_lstm(seed: int) -> float:
    from .encoders import LstmConfig, lstm_encode

    from .params import ParameterStore

    config = LstmConfig(vocabulary={"<pad>": 0, "<unk>": 1, "is": 2, "red": 3},
                        embedding_size=5, hidden_size=4)
    store = ParameterStore(seed=seed)
    rng = _rng(seed + 2)
    tokens = [2, 3, 2]
    mix = Tensor(rng.uniform(-1, 1, size=(4,)))

    def run() -> Tensor:
        return _sum_all(ad.mul(lstm_encode(tokens, store, config), mix))

    run()
    leaves = _randomize(store, rng)
    return gradient_gap(run, leaves)


def _check_fusion(seed: int) -> float:
    from .encoders import LstmConfig, fuse_and_classify

    from .modules import ModuleConfig
    from .params import ParameterStore

    config = ModuleConfig(feature_channels=5, attention_height=4,
                          attention_width=4, transform_hidden=6,
                          labels=("no", "yes"), answer_rep_size=3)
    lstm = LstmConfig(vocabulary={"<pad>": 0, "<unk>": 1}, embedding_size=5,
                      hidden_size=4)
    store = ParameterStore(seed=seed)
    rng = _rng(seed + 3)
    rep = _leaf(rng, (3,))
    question = _leaf(rng, (4,))

    def run() -> Tensor:
        dist = fuse_and_classify(rep, question, store, config, lstm)
        return ad.nll_loss(dist, 1)

    run()
    leaves = _randomize(store, rng) + [rep, question]
    return gradient_gap(run, leaves)


def _check_end_to_end(seed: int) -> float:
    """Full network for a depth-4 relation query, image pixels to loss."""
    from .encoders import ConvStackConfig, conv_features
    from .layout import assemble, layout_from_query
    from .params import ParameterStore
    from .query import parse_query

    from .modules import ModuleConfig

    config = ModuleConfig(feature_channels=4, attention_height=3,
                          attention_width=3, transform_hidden=5,
                          labels=("no", "yes"))
    stack = ConvStackConfig(channels1=3, kernel1=3, pool1=2, channels2=4,
                            kernel2=3, pool2_window=2)
    store = ParameterStore(seed=seed)
    rng = _rng(seed + 4)
    image = rng.uniform(0, 255, size=(8, 8, 3))
    layout = layout_from_query(parse_query("is(red, above(circle))"), "shapes")
    network = assemble(layout, store, config)

    def run() -> Tensor:
        feats = conv_features(image, store, stack, config)
        dist = ad.softmax(network(feats))
        return ad.nll_loss(dist, 0)

    run()
    leaves = _randomize(store, rng)
    return gradient_gap(run, leaves)


_CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d": _check_conv2d,
    "fully_connected": _check_fully_connected,
    "relu": _check_relu,
    "softmax": _check_softmax,
    "maxpool2d": _check_pool,
    "attention_weighted_pool": _check_attention_pool,
    "nll_loss": _check_nll,
    "find": lambda s: _check_module(s, "find"),
    "transform": lambda s: _check_module(s, "transform"),
    "combine": lambda s: _check_module(s, "combine"),
    "describe": lambda s: _check_module(s, "describe"),
    "measure": lambda s: _check_module(s, "measure"),
    "lstm": _check_lstm,
    "fusion": _check_fusion,
    "end_to_end": _check_end_to_end,
}


def check_names() -> list[str]:
    return list(_CHECKS)


def run_checks(names: Sequence[str] | None = None,
               seed: int = 1234) -> list[tuple[str, float, bool]]:
    """Run named checks in double precision; returns (name, error, passed)."""
    selected = list(_CHECKS) if names is None else list(names)
    results = []
    with ad.precision("float64"):
        for name in selected:
            if name not in _CHECKS:
                raise KeyError(f"unknown gradient check {name!r}; "
                               f"available: {', '.join(_CHECKS)}")
            err = _CHECKS[name](seed)
            results.append((name, err, err <= TOLERANCE))
    return results
