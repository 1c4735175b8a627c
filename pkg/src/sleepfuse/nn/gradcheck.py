"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sleepfuse.errors import InvariantError

FD_STEP = 1e-5


@dataclass
class GradCheckResult:
    """Max relative error per parameter for one checked fragment."""

    errors: dict  # parameter name -> max relative error
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self) -> list:
        return sorted(
            (name for name, e in self.errors.items() if e > self.tolerance),
        )


def gradcheck(
    build_loss,
    params: list,
    tolerance: float = 1e-4,
    step: float = FD_STEP,
    analytic_scale: float = 1.0,
) -> GradCheckResult:
    """Compare reverse-mode gradients of a scalar loss to central differences.

    ``build_loss`` is a zero-argument callable that evaluates the fragment
    end to end (it must read the current parameter values on every call).
    The relative error denominator is floored at 1.0, so the tolerance is
    absolute for gradients far below unit scale.  ``analytic_scale`` is a
    negative-control hook: scaling the analytic side simulates a broken
    backward pass and must make the check fail.
    """
    for p in params:
        p.zero_grad()
    loss = build_loss()
    if loss.data.size != 1:
        raise InvariantError("gradcheck requires a scalar loss")
    loss.backward()
    analytic = {}
    for p in params:
        if p.grad is None:
            analytic[p.name] = np.zeros_like(p.data)
        else:
            analytic[p.name] = p.grad * analytic_scale
        if not np.all(np.isfinite(analytic[p.name])):
            raise InvariantError(f"non-finite analytic gradient for {p.name!r}")

    errors = {}
    for p in params:
        values = p.data  # perturbed in place, element by element
        numeric = np.empty_like(values)
        for idx in np.ndindex(values.shape):
            saved = values[idx]
            values[idx] = saved + step
            hi = float(build_loss().data)
            values[idx] = saved - step
            lo = float(build_loss().data)
            values[idx] = saved
            numeric[idx] = (hi - lo) / (2.0 * step)
        if not np.all(np.isfinite(numeric)):
            raise InvariantError(f"non-finite numeric gradient for {p.name!r}")
        a = analytic[p.name]
        denom = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)))
        errors[p.name] = float(np.abs(a - numeric).max(initial=0.0)) / denom
    return GradCheckResult(errors=errors, tolerance=tolerance)


def run_gradcheck_suite(
    seeds: int = 20, tolerance: float = 1e-4, corrupt: str | None = None
) -> dict:
    """Check every differentiable building block over randomized small
    shapes; returns {case name: worst relative error across seeds}.

    ``corrupt`` doubles the analytic gradients of the named case, a negative
    control that must push its error far past tolerance.
    """
    from sleepfuse.nn.layers import (
        Dense,
        FeedForward,
        LayerNorm,
        TransformerBlock,
        cross_entropy_loss,
    )
    from sleepfuse.nn.tensor import Tensor, concat

    if seeds < 1:
        raise InvariantError("need at least one seed")

    def dense_case(rng):
        layer = Dense("dense", 4, 3, rng)
        x = Tensor(rng.normal(size=(3, 4)))
        return lambda: (layer(x) * layer(x)).mean(), layer.parameters()

    def layernorm_case(rng):
        ln = LayerNorm("ln", 6)
        ln.gamma.data = rng.normal(size=6)
        ln.beta.data = rng.normal(size=6)
        x = Tensor(rng.normal(size=(4, 6)))
        return lambda: (ln(x) * ln(x)).mean(), ln.parameters()

    def attention_case(rng):
        block = TransformerBlock("blk", 8, 2, rng, ff_mult=2)
        x = Tensor(rng.normal(size=(3, 8)))
        return lambda: (block(x) * block(x)).mean(), block.parameters()

    def feedforward_case(rng):
        ff = FeedForward("ff", 5, 7, rng)
        x = Tensor(rng.normal(size=(4, 5)))
        return lambda: (ff(x) * ff(x)).mean(), ff.parameters()

    def pooling_case(rng):
        proj = Dense("pool.proj", 4, 4, rng)
        x = Tensor(rng.normal(size=(2, 6, 4)))
        return lambda: (proj(x).mean(axis=-2) ** 2).mean(), proj.parameters()

    def fusion_head_case(rng):
        head = Dense("head", 7, 5, rng)
        a = Dense("emb_a", 3, 4, rng)
        b = Dense("emb_b", 3, 3, rng)
        xa = Tensor(rng.normal(size=(4, 3)))
        xb = Tensor(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 5, size=4)
        params = head.parameters() + a.parameters() + b.parameters()
        return (
            lambda: cross_entropy_loss(head(concat([a(xa), b(xb)], axis=-1)), labels),
            params,
        )

    def cross_entropy_case(rng):
        from sleepfuse.nn.layers import Parameter

        logits = Parameter("logits", rng.normal(size=(6, 5)))
        labels = rng.integers(0, 5, size=6)
        return lambda: cross_entropy_loss(logits.tensor, labels), [logits]

    cases = {
        "dense": dense_case,
        "layernorm": layernorm_case,
        "attention_block": attention_case,
        "feed_forward": feedforward_case,
        "pooling": pooling_case,
        "fusion_head": fusion_head_case,
        "cross_entropy": cross_entropy_case,
    }
    if corrupt is not None and corrupt not in cases:
        raise InvariantError(
            f"unknown gradcheck case {corrupt!r}; choose from {sorted(cases)}"
        )

    worst = {}
    for name, factory in cases.items():
        scale = 2.0 if name == corrupt else 1.0
        errs = []
        for seed in range(seeds):
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC4EC)))
            build_loss, params = factory(rng)
            result = gradcheck(
                build_loss, params, tolerance=tolerance, analytic_scale=scale
            )
            errs.append(result.worst)
        worst[name] = max(errs)
    return worst
