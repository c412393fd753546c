"""Shared numerical substrate: seeding, Adam defaults, checkpoint I/O, gradient checks.

All networks in this package are small torch modules trained on CPU in
float32. Sums/moments inside torch accumulate in higher precision where it
matters; gradient verification is done in float64 against central finite
differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import torch

CHECKPOINT_MAGIC = b"NETC"
CHECKPOINT_VERSION = 1

ADAM_LR = 2e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointError(ValueError):
    pass


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return g


def splitmix64(seed: int, index: int) -> int:
    """Derive an independent stream seed from (seed, index)."""
    z = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def init_weights(module: torch.nn.Module, seed: int) -> None:
    """Deterministic re-init: Kaiming-uniform weights, zero biases."""
    g = make_generator(seed)
    for m in module.modules():
        if isinstance(m, (torch.nn.Conv1d, torch.nn.Conv2d, torch.nn.ConvTranspose1d,
                          torch.nn.ConvTranspose2d, torch.nn.Linear)):
            torch.nn.init.kaiming_uniform_(m.weight, a=5 ** 0.5, generator=g)
            if m.bias is not None:
                torch.nn.init.zeros_(m.bias)


def make_adam(params, lr: float = ADAM_LR) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def assert_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {name}")


def save_checkpoint(state: dict[str, torch.Tensor], path) -> None:
    """Write parameters in the NETC format (f32 little-endian, bit-exact)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, tensor in state.items():
            data = tensor.detach().to(torch.float32).contiguous()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            shape = list(data.shape)
            f.write(struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
            payload = data.numpy().astype("<f4").tobytes()
            f.write(payload)


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    import numpy as np

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 8
    state: dict[str, torch.Tensor] = {}
    while off < len(blob):
        if off + 4 > len(blob):
            raise CheckpointError("truncated record header")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = 1
        for s in shape:
            count *= s
        end = off + 4 * count
        if end > len(blob):
            raise CheckpointError(f"truncated payload for {name!r}")
        arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(arr)
        off = end
    return state


def save_module(module: torch.nn.Module, path) -> None:
    save_checkpoint({k: v for k, v in module.state_dict().items()}, path)


def load_module(module: torch.nn.Module, path) -> None:
    state = load_checkpoint(path)
    module.load_state_dict(state)


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    inconclusive: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        # entries with inconclusive coordinates still contribute their
        # conclusive coordinates' errors
        vals = [e.max_rel_err for e in self.entries]
        return max(vals) if vals else 0.0

    @property
    def any_inconclusive(self) -> bool:
        return any(e.inconclusive for e in self.entries)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def grad_check(loss_fn, module: torch.nn.Module, h: float = 1e-3,
               max_params: int = 10_000) -> GradCheckReport:
    """Compare analytic gradients of loss_fn(module) against central differences.

    Runs in float64. Central differences are taken at h and h/2 and
    Richardson-extrapolated to suppress truncation error. Frozen
    parameters (requires_grad=False) are skipped.
    A coordinate is marked inconclusive when halving h changes the finite
    difference by more than 10%, or when the forward and backward one-sided
    slopes disagree (local nonsmoothness, e.g. a ReLU kink).
    """
    module = module.double()
    n_params = sum(p.numel() for p in module.parameters() if p.requires_grad)
    if n_params > max_params:
        raise ValueError(f"fragment too large for grad_check: {n_params} params")

    module.zero_grad(set_to_none=True)
    loss = loss_fn(module)
    if loss.numel() != 1:
        raise ValueError("loss must be scalar")
    assert_finite("loss", loss)
    loss.backward()

    loss0 = loss.item()
    report = GradCheckReport()
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        worst = 0.0
        inconclusive = False
        for i in range(flat.numel()):
            orig = flat[i].item()

            def fd(step: float) -> tuple[float, float, float]:
                flat[i] = orig + step
                lp = loss_fn(module).item()
                flat[i] = orig - step
                lm = loss_fn(module).item()
                flat[i] = orig
                return ((lp - lm) / (2 * step),
                        (lp - loss0) / step, (loss0 - lm) / step)

            g1, fwd, bwd = fd(h)
            g2, _, _ = fd(h / 2)
            # Richardson step cancels the O(h^2) truncation term of the
            # central difference
            rich = (4.0 * g2 - g1) / 3.0
            a = analytic.view(-1)[i].item()
            scale = max(abs(a), abs(rich), 1e-8)
            if (abs(g1 - g2) > 0.1 * scale + 1e-10
                    or abs(fwd - bwd) > 0.1 * scale + 1e-8):
                inconclusive = True
                continue
            rel = abs(a - rich) / scale
            worst = max(worst, rel)
        report.entries.append(GradCheckEntry(name, worst, inconclusive))
    return report
