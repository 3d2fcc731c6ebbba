"""Joint optimization of all scale branches and the join function.

Supervision layout per user: the last train event is held out of the
bucketed input; every internal step of a scale branch is supervised by the
next transaction's item set, the final step of every branch and the joined
head by that held-out item.  The total objective is the joint weighted
cross-entropy plus ``scale_loss_weight`` times the sum of per-scale ones.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tape, Tensor, constant, load_tensor_bank, save_tensor_bank
from .data import (
    Event,
    PurchaseLog,
    TimeScale,
    TransactionSequence,
    bucket_by_scale,
    split_leave_last,
)
from .joining import JoinParams, join
from .model import (
    ScaleModelParams,
    forward_sequence,
    hidden_sequence,
    pick_m_max,
    predict_scores,
    user_interaction,
)

CLIP_LO = 1e-12
CLIP_HI = 1.0 - 1e-12

CHECKPOINT_FORMAT = "demandrec-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last checkpoint path if any."""

    def __init__(self, message: str, checkpoint_dir: str | None = None):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir


@dataclass(frozen=True)
class LossWeights:
    """Positive/negative class weights of the cross-entropy (m and n)."""

    positive: float = 500.0
    negative: float = 1.0

    def __post_init__(self):
        if self.positive <= 0 or self.negative <= 0:
            raise ValueError("class weights must be positive")


def weighted_ce(tape: Tape, probs: Tensor, targets, w: LossWeights) -> Tensor:
    """Class-weighted cross-entropy summed over all entries.

    ``targets`` is a 0/1 array shaped like ``probs``.  Probabilities are
    clipped into [1e-12, 1 - 1e-12] before the logs, so saturated inputs
    stay finite (and clipped entries contribute no gradient).
    """
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != probs.data.shape:
        raise ValueError(f"targets shape {y.shape} != probs shape {probs.data.shape}")
    clipped = tape.clip(probs, CLIP_LO, CLIP_HI)
    pos = tape.sum(tape.mul(constant(y), tape.log(clipped)))
    neg = tape.sum(
        tape.mul(constant(1.0 - y), tape.log(tape.affine(clipped, -1.0, 1.0)))
    )
    return tape.add(tape.affine(pos, -w.positive), tape.affine(neg, -w.negative))


def total_loss(
    tape: Tape, per_scale_losses: Sequence[Tensor], joint_loss: Tensor, lam: float
) -> Tensor:
    """Joint loss plus lambda times the summed per-scale losses."""
    if lam < 0:
        raise ValueError(f"scale loss weight must be >= 0, got {lam}")
    total = joint_loss
    if lam > 0 and per_scale_losses:
        acc = per_scale_losses[0]
        for term in per_scale_losses[1:]:
            acc = tape.add(acc, term)
        total = tape.add(total, tape.affine(acc, lam))
    return total


# ----- optimizers -----


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class SgdOptimizer:
    def __init__(self, params: Sequence[Tensor], lr: float, clip_norm: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self) -> None:
        clip_gradients(self.params, self.clip_norm)
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        pass


class AdamOptimizer:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros(p.data.shape) for p in self.params]
        self.v = [np.zeros(p.data.shape) for p in self.params]

    def step(self) -> None:
        clip_gradients(self.params, self.clip_norm)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else 0.0
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam/t": np.array(float(self.t))}
        for i, p in enumerate(self.params):
            name = p.name or f"param{i}"
            out[f"adam/m/{name}"] = self.m[i]
            out[f"adam/v/{name}"] = self.v[i]
        return out

    def load_state_tensors(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam/t"].item())
        for i, p in enumerate(self.params):
            name = p.name or f"param{i}"
            self.m[i] = state[f"adam/m/{name}"].copy()
            self.v[i] = state[f"adam/v/{name}"].copy()


# ----- configuration -----


@dataclass
class TrainConfig:
    scales: tuple[TimeScale, ...]
    dim: int = 50
    epochs: int = 10
    learning_rate: float = 0.001
    batch_size: int = 100
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pos_weight: float = 500.0
    neg_weight: float = 1.0
    scale_loss_weight: float = 1.0
    clip_norm: float = 5.0
    seed: int = 0
    m_max_cap: int = 20
    m_max_percentile: float = 95.0
    mlp_hidden: int | None = None
    share_embeddings: bool = False
    checkpoint_every: int = 0
    select: str = "last"  # "last" or "validation" (best validation Hit@5)

    def __post_init__(self):
        self.scales = tuple(
            TimeScale.parse(s) if isinstance(s, str) else s for s in self.scales
        )
        if not self.scales:
            raise ValueError("at least one time scale is required")
        if len(set(self.scales)) != len(self.scales):
            raise ValueError("duplicate time scales")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        # lr 0 is allowed as the degenerate "zero step" configuration
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.scale_loss_weight < 0:
            raise ValueError("scale_loss_weight must be >= 0")
        if self.select not in ("last", "validation"):
            raise ValueError(f"select must be 'last' or 'validation', got {self.select!r}")
        LossWeights(self.pos_weight, self.neg_weight)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.pos_weight, self.neg_weight)

    def to_dict(self) -> dict:
        return {
            "scales": [s.label() for s in self.scales],
            "dim": self.dim,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "pos_weight": self.pos_weight,
            "neg_weight": self.neg_weight,
            "scale_loss_weight": self.scale_loss_weight,
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "m_max_cap": self.m_max_cap,
            "m_max_percentile": self.m_max_percentile,
            "mlp_hidden": self.mlp_hidden,
            "share_embeddings": self.share_embeddings,
            "checkpoint_every": self.checkpoint_every,
            "select": self.select,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**{**raw, "scales": tuple(raw["scales"])})


# ----- trained model -----


@dataclass
class TrainedModel:
    scale_params: list[ScaleModelParams]
    join_params: JoinParams
    anchor: int  # calendar alignment epoch used for bucketing
    num_users: int
    num_items: int

    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for sp in self.scale_params:
            for t in sp.parameters():
                seen.setdefault(id(t), t)
        for t in self.join_params.parameters():
            seen.setdefault(id(t), t)
        return list(seen.values())

    def scale_prediction_columns(self, user_id: int, events: Sequence[Event]):
        """Final-step per-scale prediction vectors for a user history."""
        tape = Tape()
        cols = []
        for sp in self.scale_params:
            seq = bucket_by_scale(events, sp.scale, self.anchor)
            hid = hidden_sequence(tape, seq, sp)[-1]
            inter = user_interaction(tape, user_id, hid, sp)
            cols.append(predict_scores(tape, inter, sp))
        return tape, cols

    def score(self, user_id: int, events: Sequence[Event]) -> np.ndarray | None:
        """Joined next-item scores, or None when the user/history is unusable."""
        if not 1 <= user_id <= self.num_users or not events:
            return None
        tape, cols = self.scale_prediction_columns(user_id, events)
        return join(tape, cols, self.join_params).data.copy()


@dataclass
class EpochLoss:
    epoch: int
    total: float
    joint: float
    per_scale: dict[str, float]
    validation_hit5: float | None = None


@dataclass
class TrainResult:
    model: TrainedModel
    history: list[EpochLoss]
    skipped_users: int
    checkpoint_dir: str | None = None
    best_epoch: int = 0


# ----- training loop -----


@dataclass
class _UserSample:
    user: int
    sequences: list[TransactionSequence]  # one per scale
    targets: list[np.ndarray]  # (|I|, N) per scale
    joint_target: np.ndarray  # (|I|,)
    prepared: list[list[np.ndarray]] | None = None  # encoder ids per scale/step


def _build_samples(
    split_train: PurchaseLog, scales: Sequence[TimeScale], anchor: int
) -> tuple[list[_UserSample], int]:
    num_items = split_train.num_items
    samples: list[_UserSample] = []
    skipped = 0
    grouped = split_train.events_by_user()
    for user in sorted(grouped):
        events = grouped[user]
        if len(events) < 2:
            skipped += 1
            continue
        held = events[-1].item
        joint_target = np.zeros(num_items)
        joint_target[held - 1] = 1.0
        sequences: list[TransactionSequence] = []
        targets: list[np.ndarray] = []
        for scale in scales:
            seq = bucket_by_scale(events[:-1], scale, anchor)
            n = len(seq.transactions)
            y = np.zeros((num_items, n))
            for j in range(n - 1):
                for item in seq.transactions[j + 1].items:
                    y[item - 1, j] = 1.0
            y[held - 1, n - 1] = 1.0
            sequences.append(seq)
            targets.append(y)
        samples.append(_UserSample(user, sequences, targets, joint_target))
    return samples, skipped


def _scale_m_max(
    split_train: PurchaseLog, scale: TimeScale, anchor: int, cfg: TrainConfig
) -> int:
    sizes: list[int] = []
    grouped = split_train.events_by_user()
    for user in sorted(grouped):
        seq = bucket_by_scale(grouped[user], scale, anchor)
        sizes.extend(t.size for t in seq.transactions)
    return pick_m_max(sizes, cfg.m_max_percentile, cfg.m_max_cap)


@dataclass
class _ValSample:
    user: int
    sequences: list[TransactionSequence]
    prepared: list[list[np.ndarray]]
    target: int


def _build_val_samples(split, model: TrainedModel) -> list[_ValSample]:
    """Precomputed validation inputs: full train history per user."""
    from .fastops import prepare_ids

    grouped = split.train.events_by_user()
    out: list[_ValSample] = []
    for user in sorted(split.validation_targets):
        events = grouped.get(user, [])
        if not events:
            continue
        sequences = []
        prepared = []
        for sp in model.scale_params:
            seq = bucket_by_scale(events, sp.scale, model.anchor)
            sequences.append(seq)
            prepared.append(
                [
                    prepare_ids(t.items, sp.m_max, model.num_items)
                    for t in seq.transactions
                ]
            )
        out.append(
            _ValSample(user, sequences, prepared, split.validation_targets[user])
        )
    return out


def _validation_hit5(model: TrainedModel, val_samples: list[_ValSample]) -> float:
    """Mean validation Hit@5 with the lean precomputed forward path."""
    from .evaluation import rank_items

    hits = 0
    for s in val_samples:
        tape = Tape()
        cols = []
        for sp, seq, ids in zip(model.scale_params, s.sequences, s.prepared):
            hid = hidden_sequence(tape, seq, sp, ids)[-1]
            inter = user_interaction(tape, s.user, hid, sp)
            cols.append(predict_scores(tape, inter, sp))
        scores = join(tape, cols, model.join_params).data
        if s.target in rank_items(scores, 5):
            hits += 1
    return hits / len(val_samples) if val_samples else 0.0


def _forward_user(
    tape: Tape,
    sample: _UserSample,
    scale_params: list[ScaleModelParams],
    join_params: JoinParams,
    w: LossWeights,
    lam: float,
):
    scale_losses = []
    final_cols = []
    prepared = sample.prepared or [None] * len(scale_params)
    for sp, seq, y, ids in zip(scale_params, sample.sequences, sample.targets, prepared):
        probs = forward_sequence(tape, seq, sample.user, sp, ids)
        scale_losses.append(weighted_ce(tape, probs, y, w))
        final_cols.append(tape.col(probs, probs.data.shape[1] - 1))
    joined = join(tape, final_cols, join_params)
    joint = weighted_ce(tape, joined, sample.joint_target, w)
    return total_loss(tape, scale_losses, joint, lam), joint, scale_losses


def train(
    log: PurchaseLog,
    cfg: TrainConfig,
    join_strategy: str = "mlp",
    out_dir: str | None = None,
    resume_from: str | None = None,
) -> TrainResult:
    """Mini-batch joint training; deterministic for a fixed config seed."""
    split = split_leave_last(log)
    anchor = log.default_epoch()
    samples, skipped = _build_samples(split.train, cfg.scales, anchor)
    if not samples:
        raise ValueError("no trainable users (need >= 2 train events per user)")

    start_epoch = 0
    if resume_from is not None:
        model, manifest, opt_state = load_checkpoint(resume_from)
        if model.num_users != log.num_users or model.num_items != log.num_items:
            raise ValueError(
                "checkpoint universe mismatch: "
                f"checkpoint has |U|={model.num_users}, |I|={model.num_items}; "
                f"log has |U|={log.num_users}, |I|={log.num_items}"
            )
        start_epoch = int(manifest["epoch"])
    else:
        opt_state = None
        rng = np.random.default_rng([cfg.seed, 17])
        scale_params: list[ScaleModelParams] = []
        shared_item = shared_user = None
        for scale in cfg.scales:
            m_max = _scale_m_max(split.train, scale, anchor, cfg)
            sp = ScaleModelParams.initialize(
                scale,
                log.num_users,
                log.num_items,
                cfg.dim,
                m_max,
                rng,
                item_emb=shared_item,
                user_emb=shared_user,
            )
            if cfg.share_embeddings and shared_item is None:
                shared_item, shared_user = sp.item_emb, sp.user_emb
            scale_params.append(sp)
        join_params = JoinParams.initialize(
            join_strategy, len(cfg.scales), log.num_items, rng, cfg.mlp_hidden
        )
        model = TrainedModel(
            scale_params=scale_params,
            join_params=join_params,
            anchor=anchor,
            num_users=log.num_users,
            num_items=log.num_items,
        )

    from .fastops import prepare_ids

    for sample in samples:
        sample.prepared = [
            [prepare_ids(t.items, sp.m_max, log.num_items) for t in seq.transactions]
            for sp, seq in zip(model.scale_params, sample.sequences)
        ]

    params = model.parameters()
    if cfg.optimizer == "adam":
        optimizer = AdamOptimizer(
            params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm
        )
    else:
        optimizer = SgdOptimizer(params, cfg.learning_rate, cfg.clip_norm)
    if opt_state:
        optimizer.load_state_tensors(opt_state)

    w = cfg.loss_weights()
    lam = cfg.scale_loss_weight
    labels = [s.label() for s in cfg.scales]
    history: list[EpochLoss] = []
    last_ckpt: str | None = None
    best_val = -1.0
    best_epoch = start_epoch
    best_snapshot: list[np.ndarray] | None = None
    val_samples = (
        _build_val_samples(split, model) if cfg.select == "validation" else []
    )

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(len(samples))
        totals = 0.0
        joint_sum = 0.0
        scale_sums = dict.fromkeys(labels, 0.0)
        for batch_start in range(0, len(order), cfg.batch_size):
            for idx in order[batch_start : batch_start + cfg.batch_size]:
                sample = samples[idx]
                tape = Tape()
                loss, joint, scale_losses = _forward_user(
                    tape, sample, model.scale_params, model.join_params, w, lam
                )
                value = float(loss.data)
                if not np.isfinite(value):
                    if out_dir:
                        last_ckpt = save_checkpoint(
                            os.path.join(out_dir, "checkpoints", "diverged"),
                            model,
                            cfg,
                            epoch - 1,
                            optimizer,
                        )
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, user {sample.user}",
                        checkpoint_dir=last_ckpt,
                    )
                tape.backward(loss)
                totals += value
                joint_sum += float(joint.data)
                for label, sl in zip(labels, scale_losses):
                    scale_sums[label] += float(sl.data)
            optimizer.step()
        val_hit5 = None
        if cfg.select == "validation":
            val_hit5 = _validation_hit5(model, val_samples)
            # ties go to the later epoch: more training at equal validation score
            if val_hit5 >= best_val:
                best_val = val_hit5
                best_epoch = epoch
                best_snapshot = [p.data.copy() for p in params]
        history.append(EpochLoss(epoch, totals, joint_sum, dict(scale_sums), val_hit5))
        if out_dir and cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            last_ckpt = save_checkpoint(
                os.path.join(out_dir, "checkpoints", f"epoch_{epoch:04d}"),
                model,
                cfg,
                epoch,
                optimizer,
            )
            _write_latest(out_dir, last_ckpt)

    if out_dir:
        last_ckpt = save_checkpoint(
            os.path.join(out_dir, "checkpoints", f"epoch_{cfg.epochs:04d}"),
            model,
            cfg,
            cfg.epochs,
            optimizer,
        )
        _write_latest(out_dir, last_ckpt)
    if cfg.select == "validation" and best_snapshot is not None:
        # hand back the best-validation parameters; resume checkpoints keep
        # the final optimizer state untouched
        for p, snap in zip(params, best_snapshot):
            p.data[:] = snap
        if out_dir:
            save_checkpoint(
                os.path.join(out_dir, "checkpoints", "best"), model, cfg, best_epoch
            )
    else:
        best_epoch = cfg.epochs
    return TrainResult(
        model=model,
        history=history,
        skipped_users=skipped,
        checkpoint_dir=last_ckpt,
        best_epoch=best_epoch,
    )


# ----- checkpoints -----


def _write_latest(out_dir: str, ckpt_dir: str) -> None:
    path = os.path.join(out_dir, "checkpoints", "latest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"checkpoint": os.path.basename(ckpt_dir)}, fh, indent=2)
        fh.write("\n")


def save_checkpoint(
    ckpt_dir: str,
    model: TrainedModel,
    cfg: TrainConfig,
    epoch: int,
    optimizer=None,
) -> str:
    os.makedirs(ckpt_dir, exist_ok=True)
    bank: dict[str, np.ndarray] = {}
    for sp in model.scale_params:
        label = sp.scale.label()
        for key, arr in sp.tensors().items():
            bank[f"{label}/{key}"] = arr
    bank.update(model.join_params.tensors())
    save_tensor_bank(os.path.join(ckpt_dir, "tensors.bin"), bank)

    opt_state = optimizer.state_tensors() if optimizer is not None else {}
    if opt_state:
        save_tensor_bank(os.path.join(ckpt_dir, "optimizer.bin"), opt_state)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "dim": model.scale_params[0].dim,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "anchor": model.anchor,
        "scales": [
            {"label": sp.scale.label(), "m_max": sp.m_max} for sp in model.scale_params
        ],
        "join": {
            "strategy": model.join_params.strategy,
            "num_scales": model.join_params.num_scales,
        },
        "share_embeddings": cfg.share_embeddings,
        "optimizer_bank": "optimizer.bin" if opt_state else None,
        "train_config": cfg.to_dict(),
    }
    with open(os.path.join(ckpt_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ckpt_dir


def load_checkpoint(ckpt_dir: str):
    """Returns (model, manifest, optimizer state tensors or None)."""
    with open(os.path.join(ckpt_dir, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{ckpt_dir}: not a {CHECKPOINT_FORMAT} directory")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{ckpt_dir}: unsupported checkpoint version")
    bank = load_tensor_bank(os.path.join(ckpt_dir, "tensors.bin"))
    num_users = manifest["num_users"]
    num_items = manifest["num_items"]
    scale_params: list[ScaleModelParams] = []
    for entry in manifest["scales"]:
        label = entry["label"]
        scale = TimeScale.parse(label)
        tensors = {
            key[len(label) + 1 :]: arr
            for key, arr in bank.items()
            if key.startswith(f"{label}/")
        }
        scale_params.append(
            ScaleModelParams.from_tensors(scale, tensors, num_users, num_items)
        )
    if manifest.get("share_embeddings") and scale_params:
        for sp in scale_params[1:]:
            sp.item_emb = scale_params[0].item_emb
            sp.user_emb = scale_params[0].user_emb
    join_params = JoinParams.from_tensors(
        manifest["join"]["strategy"],
        manifest["join"]["num_scales"],
        num_items,
        {k: v for k, v in bank.items() if k.startswith("join/")},
    )
    model = TrainedModel(
        scale_params=scale_params,
        join_params=join_params,
        anchor=manifest["anchor"],
        num_users=num_users,
        num_items=num_items,
    )
    opt_state = None
    if manifest.get("optimizer_bank"):
        opt_path = os.path.join(ckpt_dir, manifest["optimizer_bank"])
        if os.path.exists(opt_path):
            opt_state = load_tensor_bank(opt_path)
    return model, manifest, opt_state
