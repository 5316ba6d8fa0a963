"""Server-side round loop: sample, broadcast, train locally, aggregate, evaluate.

Only proxy-architecture parameter vectors ever cross the client/server
boundary; :func:`_upload` enforces that on every transfer.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from .data import ClientSplit, Dataset, dirichlet_partition, split_721
from .losses import cross_entropy
from .nn import AdamState, DenseNet, adam_step, backward, forward_activations, forward_logits, init_network, param_count
from .reciprocity import EpochStats, UarlConfig, accuracy_from_logits, uarl_local_train

log = logging.getLogger(__name__)

BYTES_PER_PARAM = 8

# SeedSequence tags keep every random stream independent of the others
_TAG_PARTITION, _TAG_SPLIT, _TAG_PRIVATE, _TAG_PROXY, _TAG_SAMPLE, _TAG_TRAIN = range(1, 7)


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class ClientState:
    cid: int
    private_net: DenseNet
    proxy_net: DenseNet
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    split: ClientSplit | None = None
    acc_history: list[float] = field(default_factory=list)
    private_opt: AdamState | None = None

    @classmethod
    def from_split(cls, cid: int, data: Dataset, split: ClientSplit, private_net: DenseNet,
                   proxy_net: DenseNet) -> "ClientState":
        X, y = data.features, data.labels
        return cls(
            cid, private_net, proxy_net,
            X[split.train], y[split.train], X[split.test], y[split.test],
            X[split.conformal], y[split.conformal], split=split,
        )


@dataclass
class Server:
    proxy_dims: tuple[int, ...]
    global_proxy: np.ndarray
    round: int = 0

    @property
    def n_params(self) -> int:
        return param_count(self.proxy_dims)


@dataclass
class RoundMetrics:
    round: int
    global_acc: float
    proxy_acc: float
    private_acc: float
    mean_eta: float
    mean_set_size_proxy: float
    mean_set_size_private: float
    bytes_up: int
    bytes_down: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_row(self) -> list[str]:
        # repr() of a float round-trips exactly
        return [repr(v) if isinstance(v, float) else str(v) for v in asdict(self).values()]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "RoundMetrics":
        kw = {}
        for f in fields(cls):
            kw[f.name] = int(row[f.name]) if f.type in ("int", int) else float(row[f.name])
        return cls(**kw)


@dataclass(frozen=True)
class FederationConfig:
    seed: int = 0
    sample_ratio: float = 0.2
    aggregation: str = "fedavg"
    mu: float = 0.01
    weighting: str = "samples"
    uarl: UarlConfig = field(default_factory=UarlConfig)
    parallel_clients: int = 1

    def __post_init__(self):
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ValueError("sample_ratio must be in (0, 1]")
        if self.aggregation not in ("fedavg", "fedprox"):
            raise ValueError("aggregation must be 'fedavg' or 'fedprox'")
        if self.weighting not in ("samples", "uniform"):
            raise ValueError("weighting must be 'samples' or 'uniform'")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")

    @property
    def local(self) -> UarlConfig:
        if self.aggregation == "fedprox":
            return replace(self.uarl, fedprox_mu=self.mu)
        return self.uarl


def sample_clients(n_clients: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """``max(1, round(ratio * N))`` distinct ids, sorted, drawn without replacement."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"sample ratio must be in (0, 1], got {ratio}")
    b = max(1, min(n_clients, math.floor(ratio * n_clients + 0.5)))
    if b == n_clients:
        return np.arange(n_clients)
    return np.sort(rng.choice(n_clients, size=b, replace=False))


def aggregate(proxies: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    if len(proxies) == 0:
        raise ValueError("nothing to aggregate")
    P = np.stack([np.asarray(p, dtype=np.float64) for p in proxies])
    w = np.ones(len(proxies)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(proxies),) or np.any(w < 0):
        raise ValueError("need one non-negative weight per proxy")
    total = w.sum()
    if total <= 0:
        raise ValueError("aggregation weights sum to zero")
    return (w / total) @ P


def evaluate(net: DenseNet, X, y) -> float:
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    return accuracy_from_logits(forward_logits(net, np.atleast_2d(X)), y)


def comm_ratio(proxy_params: int, private_params_total: int) -> float:
    if proxy_params <= 0 or private_params_total <= 0:
        raise ValueError("parameter counts must be positive")
    return proxy_params / private_params_total


def _upload(server: Server, vector: np.ndarray) -> np.ndarray:
    if vector.shape != (server.n_params,):
        raise RuntimeError(
            f"refusing transfer of {vector.size} parameters; only proxy vectors "
            f"({server.n_params}) may cross the client/server boundary"
        )
    return vector


def setup_federation(data: Dataset, n_clients: int, alpha: float, proxy_hidden: Sequence[int],
                     private_pool: Sequence[Sequence[int]], seed: int, assignment: str = "round_robin",
                     min_per_client: int = 10) -> tuple[Server, list[ClientState]]:
    """Partition ``data`` and build clients with heterogeneous private models."""
    if not private_pool:
        raise ValueError("private model pool is empty")
    d, C = data.dim, data.n_classes
    parts = dirichlet_partition(data.labels, n_clients, alpha, stream(seed, _TAG_PARTITION), min_per_client)
    proxy_dims = (d, *proxy_hidden, C)
    proxy0 = init_network(proxy_dims, stream(seed, _TAG_PROXY))
    if assignment == "round_robin":
        picks = [i % len(private_pool) for i in range(n_clients)]
    elif assignment == "random":
        picks = stream(seed, _TAG_PRIVATE, 10**6).integers(len(private_pool), size=n_clients).tolist()
    else:
        raise ValueError(f"unknown private model assignment {assignment!r}")
    clients = []
    for cid, idx in enumerate(parts):
        split = split_721(idx, stream(seed, _TAG_SPLIT, cid))
        private = init_network((d, *private_pool[picks[cid]], C), stream(seed, _TAG_PRIVATE, cid))
        clients.append(ClientState.from_split(cid, data, split, private, proxy0.copy()))
    return Server(proxy_dims, proxy0.params.copy()), clients


def _mean_over_samples(stats: list[list[EpochStats]], attr: str) -> float:
    n = sum(s.n_samples for ss in stats for s in ss)
    if n == 0:
        return 0.0
    return sum(getattr(s, attr) * s.n_samples for ss in stats for s in ss) / n


def _map_clients(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_round(server: Server, clients: list[ClientState], cfg: FederationConfig,
              rng: np.random.Generator | None = None) -> RoundMetrics:
    if not clients:
        raise ValueError("no clients")
    t = server.round + 1
    if rng is None:
        rng = stream(cfg.seed, _TAG_SAMPLE, t)
    chosen = [clients[i] for i in sample_clients(len(clients), cfg.sample_ratio, rng)]
    broadcast = _upload(server, server.global_proxy.copy())
    local = cfg.local

    def train(client: ClientState):
        return uarl_local_train(client, broadcast.copy(), local, stream(cfg.seed, _TAG_TRAIN, client.cid, t))[1]

    all_stats = _map_clients(train, chosen, cfg.parallel_clients)
    uploads = [_upload(server, c.proxy_net.params.copy()) for c in chosen]
    if cfg.weighting == "samples":
        weights = [len(c.y_train) for c in chosen]
    else:
        weights = [1.0] * len(chosen)
    server.global_proxy = aggregate(uploads, weights)
    server.round = t

    global_net = DenseNet(server.proxy_dims, server.global_proxy)
    nbytes = len(chosen) * server.n_params * BYTES_PER_PARAM
    return RoundMetrics(
        round=t,
        global_acc=float(np.mean([evaluate(global_net, c.X_test, c.y_test) for c in clients])),
        proxy_acc=float(np.mean([evaluate(c.proxy_net, c.X_test, c.y_test) for c in clients])),
        private_acc=float(np.mean([evaluate(c.private_net, c.X_test, c.y_test) for c in clients])),
        mean_eta=_mean_over_samples(all_stats, "mean_eta"),
        mean_set_size_proxy=_mean_over_samples(all_stats, "mean_set_size_proxy"),
        mean_set_size_private=_mean_over_samples(all_stats, "mean_set_size_private"),
        bytes_up=nbytes,
        bytes_down=nbytes,
    )


def run_federation(server: Server, clients: list[ClientState], cfg: FederationConfig, rounds: int,
                   on_round: Callable[[RoundMetrics, Server], None] | None = None) -> list[RoundMetrics]:
    history = []
    for _ in range(rounds):
        m = run_round(server, clients, cfg)
        log.info("round %d: global=%.4f proxy=%.4f private=%.4f eta=%.3f",
                 m.round, m.global_acc, m.proxy_acc, m.private_acc, m.mean_eta)
        history.append(m)
        if on_round is not None:
            on_round(m, server)
    return history


def local_only_train(client: ClientState, cfg: UarlConfig, rng: np.random.Generator) -> None:
    """Cross-entropy training of the private model alone, same epoch/batch schedule."""
    private = client.private_net
    if client.private_opt is None:
        client.private_opt = AdamState.zeros(private.n_params)
    n = len(client.y_train)
    parts = ([rng.permutation(n) for _ in range(cfg.local_epochs)] if cfg.full_pass_epochs
             else np.array_split(rng.permutation(n), cfg.local_epochs))
    for part in parts:
        for start in range(0, len(part), cfg.batch_size):
            idx = part[start : start + cfg.batch_size]
            acts = forward_activations(private, client.X_train[idx])
            ce = cross_entropy(acts[:, -private.n_classes :], client.y_train[idx])
            adam_step(private, backward(private, client.X_train[idx], ce.grad, acts), client.private_opt, cfg.lr)


def run_local_only(clients: list[ClientState], cfg: FederationConfig, rounds: int) -> list[float]:
    """Zero-communication baseline: sampled clients train their private model on CE only.

    Uses the same sampling stream as :func:`run_round`; returns the mean private
    test accuracy after every round.
    """
    out = []
    for t in range(1, rounds + 1):
        chosen = sample_clients(len(clients), cfg.sample_ratio, stream(cfg.seed, _TAG_SAMPLE, t))
        for i in chosen:
            local_only_train(clients[i], cfg.uarl, stream(cfg.seed, _TAG_TRAIN, clients[i].cid, t))
        out.append(float(np.mean([evaluate(c.private_net, c.X_test, c.y_test) for c in clients])))
    return out
