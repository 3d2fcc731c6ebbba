"""One time-scale branch: attentive transaction encoding, LSTM, prediction.

A branch encodes each transaction as the concatenation of its items'
embeddings (sorted ascending, zero-padded to a fixed width), gates it with a
learned per-position attention vector, runs an LSTM over the transaction
sequence, multiplies the hidden state elementwise with the user embedding,
and scores all items by softmax over dot products with the item embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fastops
from .autodiff import Tape, Tensor, constant
from .data import TimeScale, Transaction, TransactionSequence

INIT_SCALE = 0.08
FORGET_BIAS = 1.0
GATE_ORDER = ("input", "forget", "candidate", "output")


class ModelError(ValueError):
    """Invalid ids or malformed model inputs."""


@dataclass
class ScaleModelParams:
    """All learnable parameters of one time-scale branch.

    ``gate_weights`` fuses the four LSTM gate matrices row-wise in GATE_ORDER,
    each acting on the concatenation [encoded transaction; previous hidden];
    per-gate views are exposed as properties.  Item embeddings double as the
    output scoring matrix; row 0 of both embedding tables is the padding row
    and stays exactly zero (it is never gathered, so it never gets gradient).
    """

    scale: TimeScale
    dim: int
    m_max: int
    num_users: int
    num_items: int
    item_emb: Tensor  # (|I|+1, D)
    user_emb: Tensor  # (|U|+1, D)
    attention: Tensor  # (M_max, D), flattened position-major when applied
    gate_weights: Tensor  # (4D, D*M_max + D)
    gate_bias: Tensor  # (4D,)

    @classmethod
    def initialize(
        cls,
        scale: TimeScale,
        num_users: int,
        num_items: int,
        dim: int,
        m_max: int,
        rng: np.random.Generator,
        item_emb: Tensor | None = None,
        user_emb: Tensor | None = None,
    ) -> "ScaleModelParams":
        """Fresh parameters; pass existing embedding tensors to share them."""

        def uniform(shape):
            return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)

        label = scale.label()
        if item_emb is None:
            p = uniform((num_items + 1, dim))
            p[0] = 0.0
            item_emb = Tensor(p, name=f"{label}/item_emb")
        if user_emb is None:
            w = uniform((num_users + 1, dim))
            w[0] = 0.0
            user_emb = Tensor(w, name=f"{label}/user_emb")
        # identity-centered so the input signal is not crushed at step one
        attention = Tensor(1.0 + uniform((m_max, dim)), name=f"{label}/attention")
        gate_w = Tensor(
            uniform((4 * dim, dim * m_max + dim)), name=f"{label}/gate_weights"
        )
        bias = np.zeros(4 * dim)
        bias[dim : 2 * dim] = FORGET_BIAS
        gate_b = Tensor(bias, name=f"{label}/gate_bias")
        return cls(
            scale=scale,
            dim=dim,
            m_max=m_max,
            num_users=num_users,
            num_items=num_items,
            item_emb=item_emb,
            user_emb=user_emb,
            attention=attention,
            gate_weights=gate_w,
            gate_bias=gate_b,
        )

    def _gate_slice(self, name: str) -> slice:
        k = GATE_ORDER.index(name)
        return slice(k * self.dim, (k + 1) * self.dim)

    @property
    def input_gate_w(self) -> np.ndarray:
        return self.gate_weights.data[self._gate_slice("input")]

    @property
    def forget_gate_w(self) -> np.ndarray:
        return self.gate_weights.data[self._gate_slice("forget")]

    @property
    def candidate_gate_w(self) -> np.ndarray:
        return self.gate_weights.data[self._gate_slice("candidate")]

    @property
    def output_gate_w(self) -> np.ndarray:
        return self.gate_weights.data[self._gate_slice("output")]

    @property
    def input_gate_b(self) -> np.ndarray:
        return self.gate_bias.data[self._gate_slice("input")]

    @property
    def forget_gate_b(self) -> np.ndarray:
        return self.gate_bias.data[self._gate_slice("forget")]

    @property
    def candidate_gate_b(self) -> np.ndarray:
        return self.gate_bias.data[self._gate_slice("candidate")]

    @property
    def output_gate_b(self) -> np.ndarray:
        return self.gate_bias.data[self._gate_slice("output")]

    def parameters(self) -> list[Tensor]:
        return [
            self.item_emb,
            self.user_emb,
            self.attention,
            self.gate_weights,
            self.gate_bias,
        ]

    def tensors(self) -> dict[str, np.ndarray]:
        """Checkpoint view: per-gate matrices, matching the field contract."""
        out = {
            "item_emb": self.item_emb.data,
            "user_emb": self.user_emb.data,
            "attention": self.attention.data,
        }
        for gate in GATE_ORDER:
            sl = self._gate_slice(gate)
            out[f"lstm/{gate}_w"] = self.gate_weights.data[sl]
            out[f"lstm/{gate}_b"] = self.gate_bias.data[sl]
        return out

    @classmethod
    def from_tensors(
        cls,
        scale: TimeScale,
        tensors: dict[str, np.ndarray],
        num_users: int,
        num_items: int,
    ) -> "ScaleModelParams":
        item_emb = tensors["item_emb"]
        dim = item_emb.shape[1]
        attention = tensors["attention"]
        m_max = attention.shape[0]
        label = scale.label()
        gate_w = np.concatenate([tensors[f"lstm/{g}_w"] for g in GATE_ORDER], axis=0)
        gate_b = np.concatenate([tensors[f"lstm/{g}_b"] for g in GATE_ORDER])
        return cls(
            scale=scale,
            dim=dim,
            m_max=m_max,
            num_users=num_users,
            num_items=num_items,
            item_emb=Tensor(item_emb, name=f"{label}/item_emb"),
            user_emb=Tensor(tensors["user_emb"], name=f"{label}/user_emb"),
            attention=Tensor(attention, name=f"{label}/attention"),
            gate_weights=Tensor(gate_w, name=f"{label}/gate_weights"),
            gate_bias=Tensor(gate_b, name=f"{label}/gate_bias"),
        )


@dataclass
class ScaleState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def initial(cls, dim: int) -> "ScaleState":
        return cls(
            hidden=constant(np.zeros(dim), name="h0"),
            cell=constant(np.zeros(dim), name="c0"),
        )


def _transaction_ids(transaction) -> list[int]:
    if isinstance(transaction, Transaction):
        return list(transaction.items)
    return list(transaction)


def encode_transaction(
    tape: Tape, transaction, params: ScaleModelParams, m_max: int | None = None
) -> Tensor:
    """Fixed-width encoding: sort ascending, embed, concatenate, zero-pad.

    Transactions larger than m_max keep the most recent items (the tail of
    the recency-ordered id list).  Explicit padding ids (0) are dropped, so
    appending a padded slot never changes the encoding.
    """
    m_max = params.m_max if m_max is None else m_max
    ids = [i for i in _transaction_ids(transaction) if i != 0]
    if not ids:
        raise ModelError("cannot encode an empty transaction")
    for i in ids:
        if not 1 <= i <= params.num_items:
            raise ModelError(f"unknown item id {i} (|I|={params.num_items})")
    if len(ids) > m_max:
        ids = ids[-m_max:]
    ids = sorted(ids)
    gathered = tape.rows(params.item_emb, np.asarray(ids, dtype=np.intp))
    flat = tape.flatten(gathered)
    return tape.pad1d(flat, params.dim * m_max)


def apply_attention(tape: Tape, encoded: Tensor, params: ScaleModelParams) -> Tensor:
    """Elementwise product with the flattened per-position attention."""
    return tape.mul(encoded, tape.flatten(params.attention))


def lstm_step(
    tape: Tape, inp: Tensor, state: ScaleState, params: ScaleModelParams
) -> ScaleState:
    """Standard LSTM cell update over [input; previous hidden]."""
    d = params.dim
    z = tape.concat([inp, state.hidden])
    pre = tape.add(tape.matmul(params.gate_weights, z), params.gate_bias)
    gate_i = tape.sigmoid(tape.slice1d(pre, 0, d))
    gate_f = tape.sigmoid(tape.slice1d(pre, d, 2 * d))
    cand = tape.tanh(tape.slice1d(pre, 2 * d, 3 * d))
    gate_o = tape.sigmoid(tape.slice1d(pre, 3 * d, 4 * d))
    cell = tape.add(tape.mul(gate_f, state.cell), tape.mul(gate_i, cand))
    hidden = tape.mul(gate_o, tape.tanh(cell))
    return ScaleState(hidden=hidden, cell=cell)


def user_interaction(
    tape: Tape, user_id: int, hidden: Tensor, params: ScaleModelParams
) -> Tensor:
    if not 1 <= user_id <= params.num_users:
        raise ModelError(f"unknown user id {user_id} (|U|={params.num_users})")
    return tape.mul(tape.row(params.user_emb, user_id), hidden)


def predict_scores(tape: Tape, interaction: Tensor, params: ScaleModelParams) -> Tensor:
    """Softmax over dot products with all non-padding item embeddings."""
    scoring = tape.slice_rows(params.item_emb, 1, params.num_items + 1)
    return tape.softmax(tape.matmul(scoring, interaction))


def hidden_sequence(
    tape: Tape,
    seq: TransactionSequence,
    params: ScaleModelParams,
    prepared_ids: list[np.ndarray] | None = None,
) -> list[Tensor]:
    """LSTM hidden state after each transaction, from a zero initial state.

    Runs the fused fast path (single-record encode and cell updates); the
    primitive composition in ``lstm_step``/``encode_transaction`` computes
    the same values and is pinned equivalent by tests.
    """
    if not seq.transactions:
        raise ModelError("cannot run a branch over an empty sequence")
    if prepared_ids is None:
        try:
            prepared_ids = [
                fastops.prepare_ids(t.items, params.m_max, params.num_items)
                for t in seq.transactions
            ]
        except ValueError as exc:
            raise ModelError(str(exc)) from exc
    state = ScaleState.initial(params.dim)
    hiddens: list[Tensor] = []
    for ids in prepared_ids:
        x = fastops.encode_attend(
            tape, params.item_emb, params.attention, ids, params.m_max
        )
        h, c = fastops.lstm_cell(
            tape, x, state.hidden, state.cell, params.gate_weights, params.gate_bias
        )
        state = ScaleState(hidden=h, cell=c)
        hiddens.append(h)
    return hiddens


def forward_sequence(
    tape: Tape,
    seq: TransactionSequence,
    user_id: int,
    params: ScaleModelParams,
    prepared_ids: list[np.ndarray] | None = None,
) -> Tensor:
    """Per-step item-probability vectors as the columns of an (|I|, N) tensor.

    Column j is the prediction made after transaction j (i.e. for transaction
    j+1).  Equivalent to composing the per-step operations; the prediction is
    batched across steps for speed.
    """
    if not 1 <= user_id <= params.num_users:
        raise ModelError(f"unknown user id {user_id} (|U|={params.num_users})")
    hiddens = hidden_sequence(tape, seq, params, prepared_ids)
    stacked = tape.stack_cols(hiddens)  # (D, N)
    interactions = tape.mul_colvec(stacked, tape.row(params.user_emb, user_id))
    scoring = tape.slice_rows(params.item_emb, 1, params.num_items + 1)
    return tape.softmax_cols(tape.matmul(scoring, interactions))


def pick_m_max(
    transaction_sizes, percentile: float = 95.0, cap: int = 20
) -> int:
    """Fixed encoding width: the given percentile of sizes, capped.

    Uses the ceiling-index percentile of the sorted sizes so the result is
    always one of the observed sizes.
    """
    sizes = sorted(int(s) for s in transaction_sizes)
    if not sizes:
        raise ModelError("cannot size the encoder without transactions")
    idx = max(int(np.ceil(percentile / 100.0 * len(sizes))) - 1, 0)
    return max(1, min(sizes[idx], cap))
