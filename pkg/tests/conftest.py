import numpy as np
import pytest

from mitos_rcnn.tensor import GradTape, Tensor, mul, record_switches, tsum

FD_STEP = 1e-5
FD_RTOL = 1e-4

# criterion number -> verdict line, filled by test_acceptance
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def relative_error(a: float, b: float, floor: float = 1e-10) -> float:
    """|a - b| / max(|a|, |b|); both below ``floor`` counts as agreement."""
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def directional_check(loss_fn, params: dict[str, Tensor], rng, probes: int = 20,
                      step: float = FD_STEP, hold_branches: bool = False) -> list[float]:
    """Compare analytic and central-difference derivatives along random directions.

    ``loss_fn()`` must rebuild the forward pass from the current parameter
    values and return a scalar Tensor. Each probe perturbs one parameter
    tensor (cycling through ``params``) along a random unit direction.
    Returns the relative error of every probe.

    With ``hold_branches`` the perturbed passes reuse the ReLU masks and
    max-pool winners of the unperturbed pass, so the difference quotient
    stays on the smooth piece the analytic gradient belongs to. Large maps
    need this: a 1e-5 step along a bias shifts every unit of a channel and
    almost surely flips a few near-zero ReLUs.
    """
    for t in params.values():
        t.grad = None
    with GradTape() as tape, record_switches() as branches:
        loss = loss_fn()
    tape.backward(loss)

    def evaluate() -> float:
        if not hold_branches:
            return loss_fn().item()
        with record_switches(replay=branches):
            return loss_fn().item()

    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}
    names = list(params)
    errors = []
    for p in range(probes):
        name = names[p % len(names)]
        t = params[name]
        d = rng.normal(size=t.shape)
        d /= np.linalg.norm(d)
        base = t.data.copy()
        t.data = base + step * d
        up = evaluate()
        t.data = base - step * d
        down = evaluate()
        t.data = base
        numeric = (up - down) / (2 * step)
        analytic = float(np.sum(grads[name] * d))
        errors.append(relative_error(analytic, numeric))
    return errors


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return tsum(mul(out, Tensor(weights)))


def synth_dataset(n: int, seed: int):
    """In-memory synthetic training set: ``(manifest, (uint8 images, annotations))``."""
    from mitos_rcnn.data import DatasetManifest, SynthConfig, quantize, record_from_frame, synth_generate

    records, images, anns = [], [], []
    for i in range(n):
        frame, a, _ = synth_generate(SynthConfig(), np.random.default_rng([seed, i]))
        records.append(record_from_frame(f"frame_{i:05d}.png", frame, a))
        images.append(quantize(frame.pixels))
        anns.append(a)
    return DatasetManifest(records), (images, anns)
