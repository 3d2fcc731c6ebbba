"""Combine per-scale prediction vectors into one final score vector.

Four strategies: elementwise average, elementwise max, learned per-item
scale weights (averaged), and a one-hidden-layer sigmoid MLP over the
concatenated per-scale vectors.  Average/max outputs stay probability-like;
weighted/MLP outputs are treated as unnormalized ranking scores.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tape, Tensor

STRATEGIES = ("average", "max", "weighted", "mlp")
INIT_SCALE = 0.08


@dataclass
class JoinParams:
    strategy: str
    num_scales: int
    num_items: int
    scale_weights: list[Tensor] = field(default_factory=list)  # weighted: (|I|,) per scale
    hidden_w: Tensor | None = None  # mlp: (H, |T|*|I|)
    hidden_b: Tensor | None = None  # mlp: (H,)
    output_w: Tensor | None = None  # mlp: (|I|, H), final sigmoid, no output bias

    @classmethod
    def initialize(
        cls,
        strategy: str,
        num_scales: int,
        num_items: int,
        rng: np.random.Generator,
        hidden_width: int | None = None,
    ) -> "JoinParams":
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown join strategy {strategy!r}; use one of {STRATEGIES}")
        params = cls(strategy=strategy, num_scales=num_scales, num_items=num_items)

        def uniform(shape):
            return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

        if strategy == "weighted":
            params.scale_weights = [
                Tensor(uniform(num_items), name=f"join/weight_{c}")
                for c in range(num_scales)
            ]
        elif strategy == "mlp":
            width = num_items if hidden_width is None else hidden_width
            params.hidden_w = Tensor(
                uniform((width, num_scales * num_items)), name="join/hidden_w"
            )
            params.hidden_b = Tensor(uniform(width), name="join/hidden_b")
            params.output_w = Tensor(uniform((num_items, width)), name="join/output_w")
        return params

    def parameters(self) -> list[Tensor]:
        if self.strategy == "weighted":
            return list(self.scale_weights)
        if self.strategy == "mlp":
            return [self.hidden_w, self.hidden_b, self.output_w]
        return []

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for c, w in enumerate(self.scale_weights):
            out[f"join/weight_{c}"] = w.data
        if self.strategy == "mlp":
            out["join/hidden_w"] = self.hidden_w.data
            out["join/hidden_b"] = self.hidden_b.data
            out["join/output_w"] = self.output_w.data
        return out

    @classmethod
    def from_tensors(
        cls, strategy: str, num_scales: int, num_items: int, tensors: dict[str, np.ndarray]
    ) -> "JoinParams":
        params = cls(strategy=strategy, num_scales=num_scales, num_items=num_items)
        if strategy == "weighted":
            params.scale_weights = [
                Tensor(tensors[f"join/weight_{c}"], name=f"join/weight_{c}")
                for c in range(num_scales)
            ]
        elif strategy == "mlp":
            params.hidden_w = Tensor(tensors["join/hidden_w"], name="join/hidden_w")
            params.hidden_b = Tensor(tensors["join/hidden_b"], name="join/hidden_b")
            params.output_w = Tensor(tensors["join/output_w"], name="join/output_w")
        return params


def join(tape: Tape, scale_probs: list[Tensor], params: JoinParams) -> Tensor:
    """Final score vector from the per-scale prediction vectors."""
    if len(scale_probs) != params.num_scales:
        raise ShapeError(
            "join",
            f"expected {params.num_scales} scale vectors, got {len(scale_probs)}",
        )
    for p in scale_probs:
        if p.data.shape != (params.num_items,):
            raise ShapeError(
                "join", f"expected ({params.num_items},) vectors, got {p.data.shape}"
            )

    if params.strategy == "average":
        total = scale_probs[0]
        for p in scale_probs[1:]:
            total = tape.add(total, p)
        return tape.affine(total, 1.0 / len(scale_probs))

    if params.strategy == "max":
        best = scale_probs[0]
        for p in scale_probs[1:]:
            best = tape.maximum(best, p)
        return best

    if params.strategy == "weighted":
        total = None
        for w, p in zip(params.scale_weights, scale_probs):
            term = tape.mul(w, p)
            total = term if total is None else tape.add(total, term)
        return tape.affine(total, 1.0 / len(scale_probs))

    if params.strategy == "mlp":
        x = tape.concat(scale_probs)
        hidden = tape.sigmoid(
            tape.add(tape.matmul(params.hidden_w, x), params.hidden_b)
        )
        return tape.sigmoid(tape.matmul(params.output_w, hidden))

    raise ValueError(f"unknown join strategy {params.strategy!r}")
