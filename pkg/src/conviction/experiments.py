"""Desk-scale reconstruction experiment shared by the tests and the CLI."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import phantom_set, single_coil_batch
from .imaging import make_mask, psnr
from .networks import LOANet
from .training import LossSpec, TaskSpec, TrainConfig, TrainResult, conventional_train, mean_psnr


@dataclass(frozen=True)
class DeskSetup:
    """32x32 phantoms, 40% radial sampling, 2-kernel LOA network.

    Learning rate and batch size are raised from 1e-3 / 25 so
    that 200 epochs on 25 images reach a useful network within minutes.
    """

    size: int = 32
    ratio: float = 0.4
    phases: int = 3
    features: int = 2
    train_images: int = 25
    test_images: int = 4
    epochs: int = 200
    lr: float = 1e-2
    batch_size: int = 5
    seed: int = 0


@dataclass
class DeskResult:
    phases: int
    zero_filled_psnr: float
    psnr: float
    result: TrainResult
    seconds: float

    @property
    def gain(self) -> float:
        return self.psnr - self.zero_filled_psnr


def desk_task(setup: DeskSetup) -> TaskSpec:
    rng = np.random.default_rng(setup.seed)
    mask = make_mask("radial", setup.ratio, setup.size, setup.size)
    train = single_coil_batch(phantom_set(setup.train_images, setup.size, rng), mask)
    # held-out variants come from an unrelated stream
    test = single_coil_batch(phantom_set(setup.test_images, setup.size, np.random.default_rng(setup.seed + 10_000)), mask)
    return TaskSpec(0, mask, 0.0, train, test)


def zero_filled_psnr(task: TaskSpec) -> float:
    zf = np.fft.ifft2(task.val.y_dense[:, 0], norm="ortho")
    return float(np.mean([psnr(a, b) for a, b in zip(zf, task.val.ref[:, 0])]))


def run_desk(setup: DeskSetup = DeskSetup(), phases: int | None = None) -> DeskResult:
    """Train the unrolled network conventionally and score it on held-out phantoms."""
    T = setup.phases if phases is None else phases
    task = desk_task(setup)
    net = LOANet(T=T, features=setup.features)
    P = net.init_params(np.random.default_rng(setup.seed + 1))
    cfg = TrainConfig(epochs=setup.epochs, lr=setup.lr, batch_size=setup.batch_size)
    t0 = time.perf_counter()
    res = conventional_train(net, P, task, LossSpec(), cfg, np.random.default_rng(setup.seed + 2))
    dt = time.perf_counter() - t0
    return DeskResult(T, zero_filled_psnr(task), mean_psnr(res.net, res.params, task.val), res, dt)
