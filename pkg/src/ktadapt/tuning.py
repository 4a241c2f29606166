"""Retraining baselines: full fine-tuning, BitFit, bottleneck adapters.

Every routine works on a deep copy; the model passed in is never touched.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .backbone import DKT, Batch, DynamicLayerParams, TrainConfig, fit, window_loss
from .data import Window
from .generator import Generator, adapt


class TuningConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TuningConfig:
    method: str = "fft"
    epochs: int = 10
    lr: float = 1e-3
    patience: int = 3
    batch_size: int = 512
    bottleneck: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("fft", "bitfit", "adapter"):
            raise TuningConfigError(f"unknown tuning method {self.method!r}")
        if self.epochs < 0 or self.lr <= 0:
            raise TuningConfigError("epochs must be >= 0 and lr > 0")


def _tune(model: DKT, params: list, windows: Sequence[Window], config: TuningConfig, on_step=None) -> None:
    windows = [w for w in windows if w.length >= 2]
    if not windows or config.epochs == 0 or not params:
        return
    batch = Batch.from_windows(windows)

    def adapt_score() -> float:
        # early stopping watches the adapt split's own loss
        return -float(window_loss(model, batch).data)

    fit(params, lambda idx: window_loss(model, batch.select(idx)), len(batch), adapt_score,
        TrainConfig(max_epochs=config.epochs, patience=config.patience,
                    batch_size=config.batch_size, lr=config.lr, seed=config.seed),
        on_step=on_step)


def fft(model: DKT, adapt_windows: Sequence[Window], config: TuningConfig | None = None) -> DKT:
    """Fine-tune every parameter of a copy."""
    config = config or TuningConfig("fft")
    tuned = model.copy()
    _tune(tuned, tuned.parameters(), adapt_windows, config)
    return tuned


def bitfit(model: DKT, adapt_windows: Sequence[Window], config: TuningConfig | None = None) -> DKT:
    """Fine-tune only bias vectors of a copy; weight grads are zeroed every step."""
    config = config or TuningConfig("bitfit")
    tuned = model.copy()
    biases = tuned.bias_parameters()
    if not biases:
        raise TuningConfigError("model has no bias terms to tune")
    ids = {id(p) for p in biases}
    frozen = [p for p in tuned.parameters() if id(p) not in ids]

    def freeze():
        for p in frozen:
            p.zero_grad()
    _tune(tuned, biases, adapt_windows, config, on_step=freeze)
    freeze()
    return tuned


def adapter(model: DKT, adapt_windows: Sequence[Window], config: TuningConfig | None = None) -> DKT:
    """Insert a residual bottleneck adapter into a copy and train only the adapter."""
    config = config or TuningConfig("adapter")
    if not 0 < config.bottleneck < model.d_in:
        raise TuningConfigError(f"bottleneck must be in (0, {model.d_in})")
    tuned = model.copy()
    tuned.add_adapter(config.bottleneck, seed=config.seed)
    trainable = list(tuned.adapter.values())
    ids = {id(p) for p in trainable}
    frozen = [p for p in tuned.parameters() if id(p) not in ids]

    def freeze():
        for p in frozen:
            p.zero_grad()
    _tune(tuned, trainable, adapt_windows, config, on_step=freeze)
    freeze()
    return tuned


def trainable_count(model: DKT, method: str) -> int:
    if method == "fft":
        return sum(p.data.size for p in model.parameters())
    if method == "bitfit":
        return sum(p.data.size for p in model.bias_parameters())
    if method == "adapter":
        return sum(p.data.size for p in (model.adapter or {}).values())
    raise TuningConfigError(f"unknown tuning method {method!r}")


TUNERS = {"fft": fft, "bitfit": bitfit, "adapter": adapter}


def tune(model: DKT, adapt_windows: Sequence[Window], config: TuningConfig) -> DKT:
    return TUNERS[config.method](model, adapt_windows, config)


def rebase_generator(generator: Generator, original: DKT, tuned: DKT) -> Generator:
    """Copy of ``generator`` whose synthesis biases follow the tuned output layer."""
    shifted = generator.copy()
    dw = tuned.params["out.weight"].data - original.params["out.weight"].data
    db = tuned.params["out.bias"].data - original.params["out.bias"].data
    shifted.params["b_w"].data += dw.reshape(-1)
    shifted.params["b_b"].data += db
    return shifted


def cuff_plus_fft(model: DKT, generator: Generator, adapt_windows: Sequence[Window],
                  context, config: TuningConfig | None = None) -> tuple[DKT, DynamicLayerParams]:
    """Full fine-tuning on the adapt split, then generated parameters on the tuned copy.

    The generator's synthesis biases are moved by whatever fine-tuning changed
    in the output layer, so generation starts from the tuned layer rather
    than the original one.
    """
    tuned = fft(model, adapt_windows, config or TuningConfig("fft"))
    return tuned, adapt(rebase_generator(generator, model, tuned), tuned, context)
