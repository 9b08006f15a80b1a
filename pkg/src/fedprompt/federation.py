"""Federated protocol: client sampling, local training with the low-rank
payload switch, FedAvg aggregation, and exact communication accounting.

Within a round, selected clients train independently over a value snapshot
of the server state; aggregation is a barrier that averages payloads
bucketed by kind (full parameters vs LoRA factors) in ascending client-id
order with pairwise summation, so results are bit-identical regardless of
scheduling.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .autodiff import NonFiniteError, ShapeError, grad_map, sgd_momentum_step
from .data import ClientShard
from .model import FrozenEncoderBundle, batch_loss
from .objective import ScoringConfig
from .promptformer import LoRABank, PromptFormerParams, inject_lora
from .seeding import derive_seed, generator


class TrainingDiverged(RuntimeError):
    """Local training produced a non-finite loss."""

    def __init__(self, round_index: int, client_id: int, iteration: int, detail: str = ""):
        self.round_index = round_index
        self.client_id = client_id
        self.iteration = iteration
        super().__init__(
            f"non-finite loss in round {round_index}, client {client_id}, "
            f"iteration {iteration}{': ' + detail if detail else ''}")


@dataclass
class ClientPayload:
    client_id: int
    kind: str                        # "full_params" | "lora_only"
    tensors: dict[str, np.ndarray]
    param_count: int
    train_loss: float

    def __post_init__(self):
        if self.kind not in ("full_params", "lora_only"):
            raise ValueError(f"payload kind '{self.kind}'")
        actual = sum(int(t.size) for t in self.tensors.values())
        if actual != self.param_count:
            raise ValueError(
                f"payload param_count {self.param_count} but tensors hold {actual} scalars")


@dataclass
class LedgerEntry:
    round: int
    client_id: int
    kind: str
    param_count: int


@dataclass
class CommLedger:
    """Exact accounting of every client->server payload."""
    full_payload_size: int
    lora_payload_size: int
    entries: list[LedgerEntry] = field(default_factory=list)

    def record(self, round_index: int, payload: ClientPayload) -> None:
        self.entries.append(LedgerEntry(round_index, payload.client_id,
                                        payload.kind, payload.param_count))

    def round_total(self, round_index: int) -> int:
        return sum(e.param_count for e in self.entries if e.round == round_index)

    def cumulative_total(self) -> int:
        return sum(e.param_count for e in self.entries)

    def kind_total(self, kind: str) -> int:
        return sum(e.param_count for e in self.entries if e.kind == kind)

    def csv_rows(self) -> list[str]:
        rows = ["round,client_id,kind,param_count,cumulative_params"]
        running = 0
        for e in self.entries:
            running += e.param_count
            rows.append(f"{e.round},{e.client_id},{e.kind},{e.param_count},{running}")
        return rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(self.csv_rows()) + "\n")


def ledger_report(ledger: CommLedger) -> str:
    """Analytic full/LoRA payload ratio plus observed per-kind totals."""
    ratio = ledger.full_payload_size / ledger.lora_payload_size
    lines = [
        f"full payload scalars: {ledger.full_payload_size}",
        f"lora payload scalars: {ledger.lora_payload_size}",
        f"full/lora payload ratio: {ratio:.2f}x",
        f"observed full scalars sent: {ledger.kind_total('full_params')}",
        f"observed lora scalars sent: {ledger.kind_total('lora_only')}",
        f"observed total scalars sent: {ledger.cumulative_total()}",
    ]
    return "\n".join(lines)


@dataclass
class ClientRecord:
    id: int
    shard: ClientShard
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    lora_active: bool = False


@dataclass
class ServerState:
    round: int
    global_params: PromptFormerParams
    global_lora: LoRABank | None
    rng_seed: int
    lora_scale: float = 1.0
    history: list = field(default_factory=list)  # MetricsRecord per completed round


def select_clients(rng_seed: int, round_index: int, client_ids: list[int],
                   participation_rate: float) -> list[int]:
    """ceil(rate * N) distinct ids, sampled without replacement from a
    stream seeded by (rng_seed, round); returned ascending."""
    if not client_ids:
        raise ValueError("select_clients: empty client set")
    if not 0.0 < participation_rate <= 1.0:
        raise ValueError(f"participation rate must be in (0, 1], got {participation_rate}")
    n = len(client_ids)
    count = min(n, max(1, math.ceil(participation_rate * n - 1e-9)))
    rng = generator(rng_seed, "select", round_index)
    chosen = rng.choice(sorted(client_ids), size=count, replace=False)
    return sorted(int(c) for c in chosen)


@dataclass(frozen=True)
class LocalTrainSettings:
    iters: int
    lr: float
    momentum: float
    weight_decay: float
    batch_size: int
    lora_threshold: float
    lora_rank: int
    lora_scale: float


def client_local_train(bundle: FrozenEncoderBundle, snapshot_params: PromptFormerParams,
                       snapshot_lora: LoRABank | None, record: ClientRecord,
                       settings: LocalTrainSettings, scoring: ScoringConfig,
                       master_seed: int, round_index: int) -> ClientPayload:
    """Train one client for `iters` SGD iterations on seeded batches.

    The total loss on the first batch decides the payload mode: below the
    threshold the base parameters freeze and only a LoRA bank (fresh or the
    redistributed global one) trains and ships; otherwise the full
    parameter set trains and ships.
    """
    if settings.iters < 1:
        raise ValueError(f"local iterations must be >= 1, got {settings.iters}")
    shard = record.shard
    n = shard.images.shape[0]
    bsz = min(settings.batch_size, n)
    rng = generator(master_seed, "train", round_index, record.id)

    def draw_batch():
        idx = np.sort(rng.choice(n, size=bsz, replace=False))
        seeds = rng.integers(0, 2**62, size=bsz)
        return idx, [int(s) for s in seeds]

    params = snapshot_params.copy()
    lora = snapshot_lora.copy() if snapshot_lora is not None else None

    def loss_on(idx, seeds):
        images = [shard.images[i] for i in idx]
        labels = [int(shard.labels[i]) for i in idx]
        try:
            return batch_loss(bundle, params, lora, images, labels,
                              shard.class_names, scoring, seeds)
        except NonFiniteError as exc:
            raise TrainingDiverged(round_index, record.id, iteration, str(exc)) from exc

    first_idx, first_seeds = draw_batch()
    iteration = 0
    params.set_requires_grad(False)
    if lora is not None:
        lora.set_requires_grad(False)
    initial = loss_on(first_idx, first_seeds).item()
    if not math.isfinite(initial):
        raise TrainingDiverged(round_index, record.id, 0, "initial evaluation")

    record.lora_active = initial < settings.lora_threshold
    if record.lora_active:
        if lora is None:
            lora = inject_lora(params, settings.lora_rank,
                               seed=derive_seed(master_seed, "lora-init", record.id, round_index),
                               scale=settings.lora_scale)
        lora.set_requires_grad(True)
        trainables = lora.named()
    else:
        params.set_requires_grad(True)
        trainables = params.named()

    train_loss = initial
    for iteration in range(1, settings.iters + 1):
        idx, seeds = (first_idx, first_seeds) if iteration == 1 else draw_batch()
        loss = loss_on(idx, seeds)
        train_loss = loss.item()
        if not math.isfinite(train_loss):
            raise TrainingDiverged(round_index, record.id, iteration)
        grads = grad_map(loss, trainables)
        sgd_momentum_step(trainables, grads, record.velocity, settings.lr,
                          settings.momentum, settings.weight_decay)

    tensors = {name: t.data.copy() for name, t in trainables.items()}
    kind = "lora_only" if record.lora_active else "full_params"
    return ClientPayload(
        client_id=record.id,
        kind=kind,
        tensors=tensors,
        param_count=sum(int(t.size) for t in tensors.values()),
        train_loss=train_loss,
    )


def _pairwise_mean(arrays: list[np.ndarray]) -> np.ndarray:
    """Mean with pairwise summation; the fixed reduction tree keeps results
    identical no matter how payload lists were assembled."""
    items = list(arrays)
    n = len(items)
    while len(items) > 1:
        merged = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0] / items[0].dtype.type(n)


def _average_into(named, payloads: list[ClientPayload], what: str) -> None:
    expected = set(named)
    for p in payloads:
        extra = set(p.tensors) - expected
        missing = expected - set(p.tensors)
        if extra or missing:
            bad = sorted(extra | missing)[0]
            raise ShapeError(f"aggregate: client {p.client_id} {what} payload "
                             f"mismatch on tensor '{bad}'")
    for name, tensor in named.items():
        stack = []
        for p in payloads:
            arr = p.tensors[name]
            if arr.shape != tensor.data.shape:
                raise ShapeError(f"aggregate: tensor '{name}' from client {p.client_id} "
                                 f"has shape {arr.shape}, expected {tensor.data.shape}")
            stack.append(arr)
        tensor.data = _pairwise_mean(stack)


def aggregate(server: ServerState, payloads: list[ClientPayload]) -> ServerState:
    """FedAvg the payloads into the server state, bucketed by kind, and
    advance the round counter."""
    if not payloads:
        raise ValueError("aggregate: empty payload set")
    ordered = sorted(payloads, key=lambda p: p.client_id)
    full = [p for p in ordered if p.kind == "full_params"]
    lora = [p for p in ordered if p.kind == "lora_only"]
    if full:
        _average_into(server.global_params.named(), full, "full")
    if lora:
        if server.global_lora is None:
            down = next(t for n, t in lora[0].tensors.items() if n.endswith("/down"))
            bank = inject_lora(server.global_params, rank=down.shape[1],
                               seed=0, scale=server.lora_scale)
            bank.set_requires_grad(False)
            server.global_lora = bank
        _average_into(server.global_lora.named(), lora, "lora")
    server.round += 1
    return server


def training_workers() -> int:
    """Client-training parallelism cap; FMVP_THREADS overrides the logical
    core count."""
    env = os.environ.get("FMVP_THREADS", "").strip()
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ValueError(f"FMVP_THREADS must be an integer, got {env!r}") from exc
        return max(1, value)
    return os.cpu_count() or 1


def train_selected(bundle: FrozenEncoderBundle, server: ServerState,
                   clients: dict[int, ClientRecord], selected: list[int],
                   settings: LocalTrainSettings, scoring: ScoringConfig,
                   master_seed: int, workers: int | None = None) -> list[ClientPayload]:
    """Run local training for the selected clients over a shared snapshot.

    Scheduling never affects the result: every client derives its own
    randomness and the output is ordered by client id.
    """
    workers = workers if workers is not None else training_workers()

    def one(cid: int) -> ClientPayload:
        return client_local_train(bundle, server.global_params, server.global_lora,
                                  clients[cid], settings, scoring, master_seed,
                                  server.round)

    if workers > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=min(workers, len(selected))) as pool:
            payloads = list(pool.map(one, selected))
    else:
        payloads = [one(cid) for cid in selected]
    return sorted(payloads, key=lambda p: p.client_id)


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not match the configured model shapes."""


def save_checkpoint(path, server: ServerState, meta: dict[str, float] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, t in server.global_params.named().items():
        tensors[f"params/{name}"] = t.data
    if server.global_lora is not None:
        for name, t in server.global_lora.named().items():
            tensors[f"lora/{name}"] = t.data
        tensors["meta/lora_rank"] = np.array([float(server.global_lora.rank)])
        tensors["meta/lora_scale"] = np.array([float(server.global_lora.scale)])
    tensors["meta/round"] = np.array([float(server.round)])
    for key, value in (meta or {}).items():
        tensors[f"meta/{key}"] = np.array([float(value)])
    fileio.save_tensors(path, tensors)


def load_checkpoint(path, template: PromptFormerParams,
                    lora_scale: float = 1.0) -> tuple[PromptFormerParams, LoRABank | None, dict]:
    """Restore a server model into shapes given by `template` (a freshly
    initialized parameter set for the configured dimensions)."""
    stored = fileio.load_tensors(path)
    params = template.copy()
    for name, tensor in params.named().items():
        key = f"params/{name}"
        if key not in stored:
            raise CheckpointMismatch(f"{path}: missing tensor '{key}'")
        arr = stored[key]
        if tuple(arr.shape) != tensor.data.shape:
            raise CheckpointMismatch(
                f"{path}: tensor '{key}' has shape {tuple(arr.shape)}, "
                f"expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
    lora = None
    lora_names = [k for k in stored if k.startswith("lora/")]
    if lora_names:
        rank = int(stored["meta/lora_rank"][0])
        scale = float(stored.get("meta/lora_scale", np.array([lora_scale]))[0])
        lora = inject_lora(params, rank=rank, seed=0, scale=scale)
        lora.set_requires_grad(False)
        for name, tensor in lora.named().items():
            key = f"lora/{name}"
            if key not in stored:
                raise CheckpointMismatch(f"{path}: missing tensor '{key}'")
            arr = stored[key]
            if tuple(arr.shape) != tensor.data.shape:
                raise CheckpointMismatch(
                    f"{path}: tensor '{key}' has shape {tuple(arr.shape)}, "
                    f"expected {tensor.data.shape}")
            tensor.data = arr.astype(tensor.data.dtype)
    meta = {k.removeprefix("meta/"): float(v[0]) for k, v in stored.items()
            if k.startswith("meta/")}
    return params, lora, meta
