"""Episodic few-shot evaluation.

At test time only the encoder followed by L2 normalization is kept as the
feature extractor; the embedder and classifier are dropped. Each episode
draws k support and 15 query samples per way from the test split, expands
every support sample into augmented copies, and fits a small multinomial
logistic-regression head on the support features. Reported numbers are the
mean episode accuracy and its 95% confidence half-width 1.96 * sigma / sqrt(n).

Episode modes:
  five-way        5 fine classes drawn uniformly without replacement
  all-way         every fine class at once
  intra-class     all sub-classes of one randomly drawn coarse class
  coarse-all-way  every coarse class, labels are the coarse ones

The ensemble / cascade / concat combinators merge two trained models; they
fit heads on the raw support features (no augmented copies) so that they are
deterministic functions of their inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .data import AugmentStrength, Hierarchy, Sample, augment_batch, hierarchy_from_samples
from .errors import ConfigError
from .model import AncorModel, mlp_forward
from .numcore import l2_normalize_rows

MODES = ("five-way", "all-way", "intra-class", "coarse-all-way")
QUERIES_PER_WAY = 15


class EpisodeError(ConfigError):
    """Requested episode cannot be drawn from the available samples."""


@dataclass
class HeadConfig:
    iterations: int = 500
    step: float = 1.0
    l2: float = 1e-3

    def validate(self) -> "HeadConfig":
        if self.iterations < 1 or self.step <= 0 or self.l2 < 0:
            raise ConfigError("head needs iterations >= 1, step > 0, l2 >= 0")
        return self


@dataclass
class EvalConfig:
    episodes: int = 200
    mode: str = "all-way"
    shot: int = 1
    head: HeadConfig = field(default_factory=HeadConfig)
    support_copies: int = 5
    include_original: bool = True
    augment: AugmentStrength = field(default_factory=AugmentStrength)

    def validate(self) -> "EvalConfig":
        if self.episodes < 1 or self.shot < 1 or self.support_copies < 0:
            raise ConfigError("episodes >= 1, shot >= 1, support_copies >= 0 required")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.include_original and self.support_copies == 0:
            raise ConfigError("support expansion would be empty")
        self.head.validate()
        self.augment.validate()
        return self

    def echo(self) -> dict:
        return {
            "mode": self.mode,
            "episodes": self.episodes,
            "shot": self.shot,
            "head_iterations": self.head.iterations,
            "head_step": self.head.step,
            "head_l2": self.head.l2,
            "support_copies": self.support_copies,
            "include_original": self.include_original,
        }


@dataclass
class Episode:
    mode: str
    way: int
    shot: int
    class_ids: list[int]        # episode classes (fine labels, or coarse ones)
    support_x: np.ndarray       # (way * shot, d_in) raw input features
    support_y: np.ndarray       # (way * shot,) way indices
    query_x: np.ndarray         # (way * QUERIES_PER_WAY, d_in)
    query_y: np.ndarray


@dataclass
class EvalReport:
    mode: str
    mean_accuracy: float
    ci95: float
    episode_accuracies: list[float]
    config: dict

    def to_markdown(self) -> str:
        lines = [
            "| metric | value |",
            "| --- | --- |",
            f"| mode | {self.mode} |",
            f"| episodes | {len(self.episode_accuracies)} |",
            f"| mean accuracy | {self.mean_accuracy:.4f} |",
            f"| ci95 | {self.ci95:.4f} |",
        ]
        for key, val in self.config.items():
            if key not in ("mode", "episodes"):
                lines.append(f"| {key} | {val} |")
        return "\n".join(lines) + "\n"


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mode,episode,accuracy\n")
        for i, acc in enumerate(report.episode_accuracies):
            fh.write(f"{report.mode},{i},{acc:.10g}\n")


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


def extract_features(model, samples) -> np.ndarray:
    """Unit-normalized encoder outputs, (n, d). The embedder is dropped.

    ``samples`` may be an (n, d_in) array or a list of Sample records. Test
    stubs may substitute a model object exposing ``extract_features``.
    """
    X = _sample_matrix(samples)
    if hasattr(model, "extract_features"):
        return np.asarray(model.extract_features(X), dtype=np.float64)
    feats, _ = mlp_forward(model.encoder, X)
    unit, _ = l2_normalize_rows(feats)
    return unit


def _sample_matrix(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.asarray(samples, dtype=np.float64)
    return np.stack([s.features for s in samples])


def _coarse_logits(model, X: np.ndarray) -> np.ndarray:
    if hasattr(model, "coarse_logits"):
        return np.asarray(model.coarse_logits(X), dtype=np.float64)
    return model_mod.forward_logits(model, X)


# ---------------------------------------------------------------------------
# Episode sampling
# ---------------------------------------------------------------------------


def _pools(samples: list[Sample], by_coarse: bool) -> dict[int, list[Sample]]:
    pools: dict[int, list[Sample]] = {}
    for s in samples:
        pools.setdefault(s.coarse_label if by_coarse else s.fine_label, []).append(s)
    return pools


def sample_episode(
    samples: list[Sample],
    hierarchy: Hierarchy,
    mode: str,
    shot: int,
    rng: np.random.Generator,
    way: int = 5,
) -> Episode:
    """Draw one episode from the (test) samples; support and query disjoint."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    by_coarse = mode == "coarse-all-way"
    pools = _pools(samples, by_coarse)
    if mode == "five-way":
        class_ids = sorted(pools)
        if len(class_ids) < way:
            raise EpisodeError(f"need {way} fine classes, have {len(class_ids)}")
        class_ids = sorted(rng.choice(class_ids, size=way, replace=False).tolist())
    elif mode == "all-way":
        class_ids = sorted(pools)
    elif mode == "intra-class":
        coarse_ids = sorted({hierarchy.parent[f] for f in pools})
        chosen = int(rng.choice(coarse_ids))
        class_ids = [f for f in hierarchy.children(chosen) if f in pools]
        if len(class_ids) < 2:
            raise EpisodeError(f"coarse class {chosen} has {len(class_ids)} sub-classes in the pool")
    else:
        class_ids = sorted(pools)

    need = shot + QUERIES_PER_WAY
    support_rows, support_y, query_rows, query_y = [], [], [], []
    for w, cid in enumerate(class_ids):
        pool = pools[cid]
        if len(pool) < need:
            raise EpisodeError(
                f"class {cid} has {len(pool)} samples, episode needs {need} (shot+{QUERIES_PER_WAY})"
            )
        picks = rng.choice(len(pool), size=need, replace=False)
        for i in picks[:shot]:
            support_rows.append(pool[i].features)
            support_y.append(w)
        for i in picks[shot:]:
            query_rows.append(pool[i].features)
            query_y.append(w)
    return Episode(
        mode=mode,
        way=len(class_ids),
        shot=shot,
        class_ids=list(class_ids),
        support_x=np.stack(support_rows),
        support_y=np.array(support_y, dtype=np.int64),
        query_x=np.stack(query_rows),
        query_y=np.array(query_y, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Logistic-regression head
# ---------------------------------------------------------------------------


@dataclass
class LrHead:
    weights: np.ndarray  # (way, dim)
    bias: np.ndarray     # (way,)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.bias

    def probs(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def fit_lr_head(features: np.ndarray, labels: np.ndarray, cfg: HeadConfig) -> LrHead:
    """Multinomial LR by full-batch gradient descent on L2-regularized CE.

    Zero init (the objective is convex), fixed iteration budget with a
    cosine-decayed step; the L2 penalty applies to the weights only.
    """
    cfg.validate()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n, dim = X.shape
    way = int(y.max()) + 1
    onehot = np.zeros((n, way))
    onehot[np.arange(n), y] = 1.0
    W = np.zeros((way, dim))
    b = np.zeros(way)
    for t in range(cfg.iterations):
        z = X @ W.T + b
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        diff = (p - onehot) / n
        step = 0.5 * cfg.step * (1.0 + math.cos(math.pi * t / cfg.iterations))
        W -= step * (diff.T @ X + cfg.l2 * W)
        b -= step * diff.sum(axis=0)
    return LrHead(W, b)


def expand_support(
    episode: Episode,
    cfg: EvalConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Original support (optional) plus augmented copies, with repeated labels."""
    rows, ys = [], []
    for i in range(episode.support_x.shape[0]):
        x = episode.support_x[i]
        if cfg.include_original:
            rows.append(x)
            ys.append(episode.support_y[i])
        for _ in range(cfg.support_copies):
            rows.append(augment_batch(x[None, :], rng, cfg.augment)[0])
            ys.append(episode.support_y[i])
    return np.stack(rows), np.array(ys, dtype=np.int64)


def _classify_episode(model, episode: Episode, cfg: EvalConfig, rng: np.random.Generator) -> float:
    sup_x, sup_y = expand_support(episode, cfg, rng)
    head = fit_lr_head(extract_features(model, sup_x), sup_y, cfg.head)
    preds = head.predict(extract_features(model, episode.query_x))
    return float(np.mean(preds == episode.query_y))


def evaluate(
    model,
    samples: list[Sample],
    cfg: EvalConfig,
    rng: np.random.Generator,
    episode_classifier=None,
) -> EvalReport:
    """Run cfg.episodes independent episodes and summarize their accuracies.

    ``episode_classifier(model, episode, cfg, rng) -> accuracy`` may replace
    the standard LR-head pipeline (used by tests with stub classifiers).
    Episodes get independent child rng streams, so they may be evaluated in
    any order.
    """
    cfg.validate()
    classify = episode_classifier or _classify_episode
    hierarchy = hierarchy_from_samples(samples)
    streams = rng.spawn(cfg.episodes)
    accs = []
    for ep_rng in streams:
        episode = sample_episode(samples, hierarchy, cfg.mode, cfg.shot, ep_rng)
        accs.append(float(classify(model, episode, cfg, ep_rng)))
    mean = float(np.mean(accs))
    ci95 = float(1.96 * np.std(accs) / math.sqrt(len(accs)))
    return EvalReport(cfg.mode, mean, ci95, accs, cfg.echo())


# ---------------------------------------------------------------------------
# Combinators (two pre-trained models)
# ---------------------------------------------------------------------------


def _query_probs(model, episode: Episode, head_cfg: HeadConfig) -> np.ndarray:
    """Episode query probabilities from one model: LR head on raw support."""
    if hasattr(model, "query_probs"):
        return np.asarray(model.query_probs(episode), dtype=np.float64)
    head = fit_lr_head(extract_features(model, episode.support_x), episode.support_y, head_cfg)
    return head.probs(extract_features(model, episode.query_x))


def episode_accuracy(model, episode: Episode, head_cfg: HeadConfig | None = None) -> float:
    """Single-model accuracy under the same deterministic head fit the
    combinators use (raw support, no augmented copies)."""
    probs = _query_probs(model, episode, head_cfg or HeadConfig())
    return float(np.mean(np.argmax(probs, axis=1) == episode.query_y))


def combine_ensemble(model_a, model_b, episode: Episode, head_cfg: HeadConfig | None = None) -> float:
    """Average the two models' post-softmax query probabilities."""
    head_cfg = head_cfg or HeadConfig()
    pa = _query_probs(model_a, episode, head_cfg)
    pb = _query_probs(model_b, episode, head_cfg)
    if pa.shape != pb.shape:
        raise ConfigError(f"ensemble member way counts differ: {pa.shape} vs {pb.shape}")
    preds = np.argmax((pa + pb) / 2.0, axis=1)
    return float(np.mean(preds == episode.query_y))


def combine_cascade(
    coarse_model,
    fine_model,
    episode: Episode,
    hierarchy: Hierarchy,
    head_cfg: HeadConfig | None = None,
) -> float:
    """Coarse classifier routes each query to one coarse class; an LR head on
    the fine model's features then separates that class's sub-classes.

    A query routed to a coarse class with no support sub-classes in the
    episode scores 0, as does a wrong coarse branch.
    """
    head_cfg = head_cfg or HeadConfig()
    coarse_preds = np.argmax(_coarse_logits(coarse_model, episode.query_x), axis=1)
    # group episode ways by their coarse parent
    ways_of: dict[int, list[int]] = {}
    for w, cid in enumerate(episode.class_ids):
        ways_of.setdefault(hierarchy.parent[cid], []).append(w)
    sup_feats = extract_features(fine_model, episode.support_x)
    heads: dict[int, tuple[LrHead, list[int]]] = {}
    for coarse, ways in ways_of.items():
        mask = np.isin(episode.support_y, ways)
        local = {w: i for i, w in enumerate(ways)}
        labels = np.array([local[w] for w in episode.support_y[mask]], dtype=np.int64)
        heads[coarse] = (fit_lr_head(sup_feats[mask], labels, head_cfg), ways)
    query_feats = extract_features(fine_model, episode.query_x)
    correct = 0
    for i in range(query_feats.shape[0]):
        c = int(coarse_preds[i])
        if c not in heads:
            continue  # predicted coarse class has no sub-class support: scored wrong
        head, ways = heads[c]
        pred_way = ways[int(head.predict(query_feats[i : i + 1])[0])]
        correct += int(pred_way == episode.query_y[i])
    return correct / query_feats.shape[0]


def combine_concat(model_a, model_b, episode: Episode, head_cfg: HeadConfig | None = None) -> float:
    """Concatenate both models' features, re-normalize, fit a single head."""
    head_cfg = head_cfg or HeadConfig()

    def feats(X):
        f = np.concatenate([extract_features(model_a, X), extract_features(model_b, X)], axis=1)
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        return f / np.where(norms > 0, norms, 1.0)

    head = fit_lr_head(feats(episode.support_x), episode.support_y, head_cfg)
    preds = head.predict(feats(episode.query_x))
    return float(np.mean(preds == episode.query_y))
