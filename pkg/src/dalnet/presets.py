"""Network setups compared in the experiments.

* ``baseline`` -- plain ReLU everywhere, no sparsity penalty.
* ``spatial`` -- plain ReLU with an L1 penalty on activations.
* ``input-delta`` -- the first layer integrates frame differences (a
  sigma-only Delta Activation Layer) and the rest of the network is dense.
* ``temporal`` -- every hidden layer is a full Delta Activation Layer with an
  L1 penalty on its emitted deltas.
"""

from __future__ import annotations

from .delta import ActivationFn, DeltaLayerConfig, PlainActivation, QuantMode
from .errors import ConfigurationError
from .network import NetworkSpec, toy_cnn

PRESETS = ("baseline", "spatial", "input-delta", "temporal")
PENALISED = {"baseline": False, "spatial": True, "input-delta": False, "temporal": True}


def build_network(
    preset: str,
    input_shape: tuple[int, int, int],
    n_classes: int,
    channels: tuple[int, int] = (8, 16),
    hidden: int = 32,
    quant_mode: str = "channel-wise",
    q_init: float | None = None,
) -> NetworkSpec:
    if preset not in PRESETS:
        raise ConfigurationError(f"preset must be one of {PRESETS}, got {preset!r}")
    relu = ActivationFn.RELU

    def delta(**kw) -> DeltaLayerConfig:
        return DeltaLayerConfig(relu, QuantMode(quant_mode), q_init=q_init, **kw)

    if preset in ("baseline", "spatial"):
        act = lambda i: PlainActivation(relu)  # noqa: E731
    elif preset == "input-delta":
        act = lambda i: delta(skip_differentiation=True) if i == 0 else PlainActivation(relu)  # noqa: E731
    else:
        act = lambda i: delta()  # noqa: E731
    return toy_cnn(tuple(input_shape), n_classes, act, tuple(channels), hidden)
