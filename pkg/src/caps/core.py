"""Parameter storage, seeded randomness, Adam, and finite-difference gradient checks.

Everything learned in the package lives in a :class:`ParameterStore`: a flat,
ordered mapping from dotted names to torch leaf tensors. Layers are plain
functions that look their weights up by prefix (see :mod:`caps.ops`).
"""
from __future__ import annotations

import contextlib
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch


class ConfigurationError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class GradCheckError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class RngState:
    """Splittable seed: ``(seed, stream_id)`` names one independent stream."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def split(self, index: int) -> "RngState":
        """Child stream ``index``; children of distinct parents never collide."""
        ss = np.random.SeedSequence(entropy=(self.seed, self.stream_id, index, 0x5EED))
        return RngState(self.seed, int(ss.generate_state(1, np.uint64)[0]))

    def derive_seed(self) -> int:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Ordered ``name -> tensor`` map. Shapes are fixed once an entry exists."""

    def __init__(self, entries: dict[str, torch.Tensor] | None = None,
                 dtype: torch.dtype = torch.float32):
        self._entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.dtype = dtype
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> torch.Tensor:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(value) if not isinstance(value, torch.Tensor) else value)
        t = t.detach().to(self.dtype).clone().requires_grad_(True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def assign(self, name: str, value) -> None:
        """Overwrite values in place; the shape must match."""
        t = self._entries[name]
        v = torch.as_tensor(np.asarray(value) if not isinstance(value, torch.Tensor) else value)
        if tuple(v.shape) != tuple(t.shape):
            raise ConfigurationError(
                f"shape mismatch for {name!r}: {tuple(v.shape)} vs {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(v.to(t.dtype))

    def subset(self, prefix: str) -> "ParameterStore":
        """View sharing the same tensors for names starting with ``prefix``."""
        sub = ParameterStore(dtype=self.dtype)
        for n in self.names(prefix):
            sub._entries[n] = self._entries[n]
        return sub

    def merge(self, other: "ParameterStore") -> "ParameterStore":
        """New view containing both stores' tensors (names must be disjoint)."""
        out = ParameterStore(dtype=self.dtype)
        for src in (self, other):
            for n, t in src.items():
                if n in out._entries:
                    raise ConfigurationError(f"duplicate parameter name {n!r}")
                out._entries[n] = t
        return out

    def clone(self, dtype: torch.dtype | None = None) -> "ParameterStore":
        out = ParameterStore(dtype=dtype or self.dtype)
        for n, t in self._entries.items():
            out.add(n, t.detach())
        return out

    def zero_grad(self) -> None:
        for t in self._entries.values():
            if t.grad is not None:
                t.grad.zero_()

    def to_numpy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.detach().cpu().numpy().copy()) for n, t in self._entries.items())

    def load_numpy(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for n, a in arrays.items():
            if n in self._entries:
                self.assign(n, torch.from_numpy(np.ascontiguousarray(a)))
            elif strict:
                raise ConfigurationError(f"unknown parameter {n!r}")

    def equal(self, other: "ParameterStore") -> bool:
        if list(self) != list(other):
            return False
        return all(torch.equal(self[n].detach(), other[n].detach()) for n in self)


_RULE = re.compile(r"^normal\(([^)]+)\)$")


def init_parameters(spec: Sequence[tuple], rng: RngState,
                    dtype: torch.dtype = torch.float32) -> ParameterStore:
    """Build a store from ``(name, shape, rule)`` triples.

    Rules: ``"zeros"``, ``"uniform_fan_in"`` (U[-1/sqrt(shape[0]), +1/sqrt(shape[0])])
    and ``"normal(sigma)"`` or ``("normal", sigma)``. Each entry gets its own
    child stream so adding a parameter never shifts another's values.
    """
    seen: set[str] = set()
    for name, _, _ in spec:
        if name in seen:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        seen.add(name)

    store = ParameterStore(dtype=dtype)
    for i, (name, shape, rule) in enumerate(spec):
        shape = tuple(int(s) for s in shape)
        gen = rng.split(i).generator()
        if isinstance(rule, tuple) and rule[0] == "normal":
            sigma = float(rule[1])
            rule = "normal"
        elif isinstance(rule, str) and _RULE.match(rule):
            sigma = float(_RULE.match(rule).group(1))
            rule = "normal"
        if rule == "zeros":
            arr = np.zeros(shape)
        elif rule == "uniform_fan_in":
            bound = 1.0 / math.sqrt(shape[0])
            arr = gen.uniform(-bound, bound, size=shape)
        elif rule == "normal":
            arr = gen.normal(0.0, sigma, size=shape)
        else:
            raise ConfigurationError(f"unknown init rule {rule!r} for {name!r}")
        store.add(name, torch.from_numpy(arr))
    return store


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState) -> ParameterStore:
    """One bias-corrected Adam update; zeroes gradients afterwards.

    Missing gradients count as zero. Raises :class:`NonFiniteGradientError`
    before touching any parameter if a gradient holds NaN or inf.
    """
    for name, p in params.items():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m / c1, denom, value=-state.lr)
    params.zero_grad()
    return params


# ---------------------------------------------------------------------------
# stop-gradient with finite-difference replay


class _Tape:
    def __init__(self):
        self.values: list[torch.Tensor] = []
        self.mode = "record"
        self.cursor = 0

    def visit(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "record":
            self.values.append(x.clone())
            return x
        out = self.values[self.cursor]
        self.cursor += 1
        return out


_TAPE: _Tape | None = None


@contextlib.contextmanager
def _use_tape(tape: _Tape, mode: str):
    global _TAPE
    prev = _TAPE
    tape.mode, tape.cursor = mode, 0
    if mode == "record":
        tape.values = []
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity forward, zero backward.

    Inside :func:`grad_check` probes the value is pinned to the one seen at
    the unperturbed point, which is what a zero derivative means numerically.
    """
    x = x.detach()
    if _TAPE is None:
        return x
    return _TAPE.visit(x)


def straight_through(x: torch.Tensor, forward_value: torch.Tensor) -> torch.Tensor:
    """Returns ``forward_value`` while copying gradients to ``x`` unchanged."""
    return x + stop_gradient(forward_value - x)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple[str, int] | None
    n_checked: int
    tol: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(fn: Callable[[ParameterStore], torch.Tensor], params: ParameterStore,
               h: float = 1e-5, tol: float = 1e-4, names: Iterable[str] | None = None,
               max_coords: int | None = None, floor: float = 1e-6,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd against central differences in float64.

    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` subsamples coordinates per parameter.
    """
    p64 = params.clone(dtype=torch.float64)
    tape = _Tape()
    with _use_tape(tape, "record"):
        f0 = fn(p64)
    recorded = tape.values
    with _use_tape(_Tape(), "record"):
        f1 = fn(p64)
    if f0.dim() != 0:
        raise GradCheckError("function must return a scalar")
    if not torch.equal(f0.detach(), f1.detach()):
        raise GradCheckError("function is not deterministic across calls")
    p64.zero_grad()
    f0.backward()

    gen = np.random.default_rng(seed)
    worst, worst_at, per_param, n_checked = 0.0, None, {}, 0
    for name in (list(names) if names is not None else list(p64)):
        p = p64[name]
        analytic = (p.grad.detach().reshape(-1).clone() if p.grad is not None
                    else torch.zeros(p.numel(), dtype=torch.float64))
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_coords is not None and idx.size > max_coords:
            idx = np.sort(gen.choice(idx, size=max_coords, replace=False))
        err_p = 0.0
        for i in idx:
            orig = flat[i].item()
            tape.values = recorded
            with torch.no_grad():
                flat[i] = orig + h
                with _use_tape(tape, "replay"):
                    fp = fn(p64).item()
                flat[i] = orig - h
                with _use_tape(tape, "replay"):
                    fm = fn(p64).item()
                flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[i].item()
            err = abs(a - num) / max(abs(a), abs(num), floor)
            n_checked += 1
            err_p = max(err_p, err)
            if err > worst:
                worst, worst_at = err, (name, int(i))
        per_param[name] = err_p
    return GradCheckReport(worst, worst_at, n_checked, tol, per_param)
