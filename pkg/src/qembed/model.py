"""Models and their forward pass.

Three sentence classifiers over a shared |V| x n complex embedding table:

* ``ce-sup``  — sentence = normalized weighted sum of unit word states (a pure
  state); readout is the Born probability through a trainable rank-r projector.
* ``ce-mix``  — sentence = convex mixture of word-state projectors; readout is
  the same Born probability, linear in each word's contribution.
* ``real``    — conventional baseline: mean of real embedding rows into a
  sigmoid linear head.

Word states are the L2-normalized table rows; normalization is part of the
computation graph and gradients flow through it. The projector is
parameterized as P = Q (Q^H Q)^{-1} Q^H with unconstrained Q, so P is exactly
Hermitian and idempotent at every optimizer step; P is never materialized on
the evaluation path (everything goes through an r x r solve).

Parameters live in one flat float64 vector (see ParameterSet); the complex
table and Q are complex128 views into it, so the flat vector is also the
checkpoint payload, byte for byte.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Sequence

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMismatchError,
    ConfigurationError,
    DegenerateSuperpositionError,
    DegenerateVectorError,
    DimensionError,
    EmptySentenceError,
    IllConditionedProjectorError,
)

KIND_SUP = "ce-sup"
KIND_MIX = "ce-mix"
KIND_REAL = "real"
MODEL_KINDS = (KIND_SUP, KIND_MIX, KIND_REAL)
DISPLAY_NAMES = {KIND_SUP: "CE-Sup", KIND_MIX: "CE-Mix", KIND_REAL: "Real-Embed"}

# Row norms below this are degenerate (lookup refuses; the trainer re-inits).
ROW_NORM_EPS = 1e-12
# Pre-normalization norm clamp for the superposed sentence state: keeps the
# graph differentiable arbitrarily close to total destructive interference.
SUP_NORM_CLAMP = 1e-6
# Lower bound certified for the smallest eigenvalue of Q^H Q.
GRAM_MIN_EIG = 1e-8

CHECKPOINT_VERSION = 1

__all__ = [
    "MODEL_KINDS",
    "DISPLAY_NAMES",
    "ModelConfig",
    "ParameterSet",
    "SentenceRepresentation",
    "RankRProjector",
    "init_parameters",
    "lookup",
    "superpose",
    "mix",
    "real_mean",
    "project",
    "born_probability",
    "linear_head",
    "forward",
    "forward_batch",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of one model instance. r is ignored by kind='real'."""

    kind: str
    vocab_size: int
    n: int = 100
    r: int = -1  # -1 means the default floor(n / 2)
    seed: int = 42

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.n < 2:
            raise ConfigurationError(f"embedding dimension n must be >= 2, got {self.n}")
        if self.vocab_size < 1:
            raise ConfigurationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.r == -1:
            object.__setattr__(self, "r", self.n // 2)
        if not (1 <= self.r < self.n):
            raise ConfigurationError(f"projector rank must satisfy 1 <= r < n, got r={self.r}, n={self.n}")


def _layout(config: ModelConfig) -> tuple[dict[str, slice], int]:
    """Flat-coordinate slices per parameter group. Order matches the checkpoint payload."""
    groups: dict[str, slice] = {}
    pos = 0
    n_table = 2 * config.vocab_size * config.n
    groups["table"] = slice(pos, pos + n_table)
    pos += n_table
    if config.kind == KIND_REAL:
        groups["head_w"] = slice(pos, pos + config.n)
        pos += config.n
        groups["head_b"] = slice(pos, pos + 1)
        pos += 1
    else:
        n_q = 2 * config.n * config.r
        groups["q"] = slice(pos, pos + n_q)
        pos += n_q
    return groups, pos


@dataclass
class ParameterSet:
    """All trainable parameters as one flat float64 vector plus a group map.

    Complex groups are complex128 views into the flat vector (re, im
    interleaved per entry, row-major), so optimizer updates on ``data``
    and model reads through the views touch the same memory.
    """

    config: ModelConfig
    data: np.ndarray
    groups: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        expected_groups, size = _layout(self.config)
        if not self.groups:
            self.groups = expected_groups
        if self.data.shape != (size,) or self.data.dtype != np.float64:
            raise ConfigurationError(
                f"parameter vector must be float64 of length {size}, got {self.data.dtype} {self.data.shape}"
            )

    def views(self) -> SimpleNamespace:
        return param_views(self.config, self.data)

    @property
    def table(self) -> np.ndarray:
        return self.views().table

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.config, self.data.copy())


def param_views(config: ModelConfig, flat: np.ndarray) -> SimpleNamespace:
    """Complex/real group views into a flat float64 vector with this config's layout."""
    groups, size = _layout(config)
    if flat.shape != (size,):
        raise DimensionError(f"flat vector has length {flat.shape}, layout needs {size}")
    out = SimpleNamespace(groups=groups)
    out.table = flat[groups["table"]].view(np.complex128).reshape(config.vocab_size, config.n)
    if config.kind == KIND_REAL:
        out.q = None
        out.head_w = flat[groups["head_w"]]
        out.head_b = flat[groups["head_b"]]
    else:
        out.q = flat[groups["q"]].view(np.complex128).reshape(config.n, config.r)
        out.head_w = None
        out.head_b = None
    return out


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, tag)))


def draw_rows(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    """Fresh embedding rows: re and im parts i.i.d. Normal(0, 1/n)."""
    scale = n ** -0.5
    return scale * (rng.standard_normal((count, n)) + 1j * rng.standard_normal((count, n)))


def init_parameters(config: ModelConfig) -> ParameterSet:
    """Seeded deterministic initialization; identical config -> identical bits."""
    _, size = _layout(config)
    params = ParameterSet(config, np.zeros(size))
    v = params.views()
    v.table[:] = draw_rows(_rng(config.seed, 0), config.vocab_size, config.n)
    if config.kind == KIND_REAL:
        v.head_w[:] = config.n ** -0.5 * _rng(config.seed, 2).standard_normal(config.n)
        v.head_b[:] = 0.0
    else:
        scale = config.n ** -0.5
        rng = _rng(config.seed, 1)
        v.q[:] = scale * (rng.standard_normal((config.n, config.r)) + 1j * rng.standard_normal((config.n, config.r)))
    return params


# ---------------------------------------------------------------------------
# Sentence representations
# ---------------------------------------------------------------------------

PURE = "pure"
MIXTURE = "mixture"
REAL_MEAN = "real-mean"


@dataclass
class SentenceRepresentation:
    """A sentence as either a pure state, a factored mixture, or a real mean.

    The density matrix implied by the first two kinds is never materialized on
    the evaluation path; ``density()`` exists for tests and oracles.
    """

    kind: str
    pure: np.ndarray | None = None
    factors: list[tuple[float, np.ndarray]] | None = None
    mean: np.ndarray | None = None

    def density(self) -> np.ndarray:
        if self.kind == PURE:
            return np.outer(self.pure, self.pure.conj())
        if self.kind == MIXTURE:
            assert self.factors
            n = self.factors[0][1].shape[0]
            rho = np.zeros((n, n), dtype=np.complex128)
            for lam, state in self.factors:
                rho += lam * np.outer(state, state.conj())
            return rho
        raise ConfigurationError("a real-mean representation has no density matrix")


def lookup(table: np.ndarray, token_id: int) -> np.ndarray:
    """Unit word state for one token: the L2-normalized raw table row."""
    if not 0 <= token_id < table.shape[0]:
        raise IndexError(f"token id {token_id} outside table with {table.shape[0]} rows")
    row = table[token_id]
    norm = float(np.linalg.norm(row))
    if norm < ROW_NORM_EPS:
        raise DegenerateVectorError(f"embedding row for token id {token_id} has norm {norm:.3e}")
    return row / norm


def _check_weights(states: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    if len(states) == 0:
        raise EmptySentenceError("no word states to compose")
    lam = np.asarray(weights, dtype=np.float64)
    if lam.shape != (len(states),):
        raise DimensionError(f"{len(states)} states but {lam.shape} weights")
    if np.any(lam <= 0):
        raise ValueError("composition weights must be positive")
    if abs(float(lam.sum()) - 1.0) > 1e-9:
        raise ValueError(f"composition weights must sum to 1, got {float(lam.sum())!r}")
    lengths = {s.shape[0] for s in states}
    if len(lengths) != 1:
        raise DimensionError(f"word states of mixed lengths {sorted(lengths)}")
    return lam


def superpose(states: Sequence[np.ndarray], weights: Sequence[float]) -> SentenceRepresentation:
    """Pure sentence state: normalize(sum_l lambda_l |t_l>).

    Raises DegenerateSuperpositionError on (numerically) total cancellation.
    The strict op errors below 1e-12; the training graph instead clamps the
    norm at SUP_NORM_CLAMP (see forward_batch).
    """
    lam = _check_weights(states, weights)
    u = np.zeros_like(states[0])
    for w, s in zip(lam, states):
        u = u + w * s
    norm = float(np.linalg.norm(u))
    if norm < 1e-12:
        raise DegenerateSuperpositionError(f"word states cancelled: ||sum|| = {norm:.3e}")
    return SentenceRepresentation(PURE, pure=u / norm)


def mix(states: Sequence[np.ndarray], weights: Sequence[float]) -> SentenceRepresentation:
    """Mixture sentence state: factors (lambda_l, |t_l>) stored verbatim.

    The implied rho = sum_l lambda_l |t_l><t_l| is a legal density matrix by
    construction; no further normalization is applied.
    """
    lam = _check_weights(states, weights)
    return SentenceRepresentation(MIXTURE, factors=[(float(w), s) for w, s in zip(lam, states)])


def real_mean(rows: Sequence[np.ndarray]) -> SentenceRepresentation:
    """Arithmetic mean of real embedding rows (no normalization; conventional baseline)."""
    if len(rows) == 0:
        raise EmptySentenceError("no rows to average")
    stack = np.asarray(rows, dtype=np.float64)
    return SentenceRepresentation(REAL_MEAN, mean=stack.mean(axis=0))


# ---------------------------------------------------------------------------
# Rank-r projector and Born-rule measurement
# ---------------------------------------------------------------------------


@dataclass
class RankRProjector:
    """P = Q (Q^H Q)^{-1} Q^H for an unconstrained complex n x r factor Q.

    P is Hermitian and idempotent by construction; it is applied through an
    r x r solve and never formed, except by ``dense()`` for test oracles.
    """

    q: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.complex128)
        if self.q.ndim != 2 or self.q.shape[1] >= self.q.shape[0] or self.q.shape[1] < 1:
            raise ConfigurationError(f"projector factor must be n x r with 1 <= r < n, got {self.q.shape}")

    def gram(self) -> np.ndarray:
        """Q^H Q, guarded: certifies lambda_min >= GRAM_MIN_EIG via Cholesky pivots.

        Pivot-based: every Cholesky pivot L_jj^2 is >= lambda_min, so a pivot
        below the bound proves ill-conditioning; factorization failure does
        too. No eigendecomposition on the evaluation path.
        """
        m = self.q.conj().T @ self.q
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedProjectorError("Q^H Q is not numerically positive definite") from exc
        min_pivot_sq = float(np.min(np.diag(chol).real) ** 2)
        if min_pivot_sq < GRAM_MIN_EIG:
            raise IllConditionedProjectorError(
                f"smallest eigenvalue of Q^H Q certified below {GRAM_MIN_EIG:g} (pivot^2 = {min_pivot_sq:.3e})"
            )
        return m

    def dense(self) -> np.ndarray:
        """Materialized P, for tests and oracles only."""
        m = self.gram()
        return self.q @ np.linalg.solve(m, self.q.conj().T)


def project(proj: RankRProjector, v: np.ndarray) -> np.ndarray:
    """P v computed as Q solve(Q^H Q, Q^H v)."""
    if v.shape != (proj.q.shape[0],):
        raise DimensionError(f"vector of length {v.shape} incompatible with projector on n={proj.q.shape[0]}")
    m = proj.gram()
    return proj.q @ np.linalg.solve(m, proj.q.conj().T @ v)


def born_probability(proj: RankRProjector, rep: SentenceRepresentation) -> float:
    """Measurement probability Tr(P rho) through the factored forms.

    Pure state: <S|P|S>. Mixture: sum_l lambda_l <t_l|P|t_l>. The trace is
    real up to float residue; the result is clipped to [0, 1] only to absorb
    <= 1e-12 excursions.
    """
    m = proj.gram()
    if rep.kind == PURE:
        y = proj.q.conj().T @ rep.pure
        p = np.vdot(y, np.linalg.solve(m, y))
    elif rep.kind == MIXTURE:
        assert rep.factors
        states = np.stack([s for _, s in rep.factors])
        lam = np.array([w for w, _ in rep.factors])
        ys = states @ proj.q.conj()
        cs = np.linalg.solve(m, ys.T).T
        p = np.sum(lam * np.sum(ys.conj() * cs, axis=1))
    else:
        raise ConfigurationError("born_probability applies to pure/mixture states; real-mean uses linear_head")
    return float(min(max(p.real, 0.0), 1.0))


def _sigmoid(s):
    arr = np.atleast_1d(np.asarray(s, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    es = np.exp(arr[~pos])
    out[~pos] = es / (1.0 + es)
    return out if np.ndim(s) else float(out[0])


def linear_head(w: np.ndarray, b: float, mean: np.ndarray) -> float:
    """Sigmoid readout of the baseline: p = sigma(w . mean + b)."""
    if w.shape != mean.shape:
        raise DimensionError(f"head weights {w.shape} vs sentence mean {mean.shape}")
    return float(_sigmoid(np.dot(w, mean) + b))


# ---------------------------------------------------------------------------
# Batched forward pass (the exact graph the analytic gradients differentiate)
# ---------------------------------------------------------------------------


def forward_batch(params: ParameterSet, ids: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, dict]:
    """Probabilities for a padded batch plus the intermediates backward needs.

    ids: int array (B, M) padded with any id beyond each row's true length;
    lengths: int array (B,), each >= 1. Word weights are lambda = 1/length,
    so padding never dilutes a sentence.
    """
    config = params.config
    ids = np.asarray(ids)
    lengths = np.asarray(lengths)
    if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
        raise DimensionError(f"ids {ids.shape} and lengths {lengths.shape} do not form a batch")
    if np.any(lengths < 1):
        bad = int(np.argmax(lengths < 1))
        raise EmptySentenceError(f"sentence {bad} has no tokens")
    if ids.shape[1] < int(lengths.max()):
        raise DimensionError("a stated true length exceeds the padded width")
    if np.any(ids < 0) or np.any(ids >= config.vocab_size):
        raise IndexError("token id outside the vocabulary table")

    B, M = ids.shape
    mask = np.arange(M)[None, :] < lengths[:, None]
    v = params.views()
    cache: dict = {"ids": ids, "mask": mask, "lengths": lengths, "kind": config.kind}

    if config.kind == KIND_REAL:
        rows = v.table.real[ids]  # (B, M, n)
        xbar = (rows * mask[:, :, None]).sum(axis=1) / lengths[:, None]
        s = xbar @ v.head_w + v.head_b[0]
        p = _sigmoid(s)
        cache.update(xbar=xbar, p=p)
        return p, cache

    z = v.table[ids]  # (B, M, n) complex
    norms = np.sqrt(np.sum(z.real**2 + z.imag**2, axis=2))
    bad = mask & (norms < ROW_NORM_EPS)
    if np.any(bad):
        b_i, m_i = np.argwhere(bad)[0]
        raise DegenerateVectorError(
            f"embedding row for token id {int(ids[b_i, m_i])} has norm {norms[b_i, m_i]:.3e} "
            f"(sentence {int(b_i)}, position {int(m_i)})"
        )
    safe = np.where(mask, norms, 1.0)
    t = z / safe[:, :, None]  # unit states; padding rows harmless, masked below
    proj = RankRProjector(v.q)
    gram = proj.gram()
    cache.update(t=t, norms=safe, q=v.q, gram=gram)

    if config.kind == KIND_MIX:
        y = t @ v.q.conj()  # (B, M, r)
        c = np.linalg.solve(gram, y.reshape(-1, config.r).T).T.reshape(B, M, config.r)
        p_tok = np.sum(y.conj() * c, axis=2).real  # <t|P|t> per token
        p = (p_tok * mask).sum(axis=1) / lengths
        cache.update(y=y, c=c)
    else:  # KIND_SUP
        u = (t * mask[:, :, None]).sum(axis=1) / lengths[:, None]
        nu = np.linalg.norm(u, axis=1)
        nu_c = np.maximum(nu, SUP_NORM_CLAMP)
        s_state = u / nu_c[:, None]
        y = s_state @ v.q.conj()  # (B, r)
        c = np.linalg.solve(gram, y.T).T
        p = np.sum(y.conj() * c, axis=1).real
        cache.update(s=s_state, nu=nu, nu_c=nu_c, y=y, c=c)

    return np.clip(p, 0.0, 1.0), cache


def forward(params: ParameterSet, token_ids: Sequence[int]) -> float:
    """Probability for one sentence; identical path to forward_batch with B=1."""
    token_ids = list(token_ids)
    if not token_ids:
        raise EmptySentenceError("sentence has no tokens")
    ids = np.asarray([token_ids], dtype=np.int64)
    lengths = np.asarray([len(token_ids)], dtype=np.int64)
    p, _ = forward_batch(params, ids, lengths)
    return float(p[0])


# ---------------------------------------------------------------------------
# Checkpoint format (shared with the CLI)
# ---------------------------------------------------------------------------

_HEADER_KEYS = ("format_version", "model_kind", "n", "r", "vocab_size", "seed")


def save_checkpoint(path, params: ParameterSet) -> None:
    """key=value text header, one blank line, then the raw little-endian payload.

    Payload order: table rows (re, im interleaved per entry, row-major), then
    Q in the same layout, or (w, b) for the real baseline.
    """
    config = params.config
    header = (
        f"format_version={CHECKPOINT_VERSION}\n"
        f"model_kind={config.kind}\n"
        f"n={config.n}\n"
        f"r={config.r}\n"
        f"vocab_size={config.vocab_size}\n"
        f"seed={config.seed}\n"
        "\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(params.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterSet:
    """Inverse of save_checkpoint; byte-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing blank line after header")
    fields: dict[str, str] = {}
    for line in io.StringIO(blob[:sep].decode("ascii", errors="replace")):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise CheckpointError(f"{path}: header missing keys {missing}")
    if fields["format_version"] != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: unsupported format_version={fields['format_version']}")
    try:
        config = ModelConfig(
            kind=fields["model_kind"],
            vocab_size=int(fields["vocab_size"]),
            n=int(fields["n"]),
            r=int(fields["r"]),
            seed=int(fields["seed"]),
        )
    except (ValueError, ConfigurationError) as exc:
        raise CheckpointError(f"{path}: invalid header ({exc})") from exc
    payload = blob[sep + 2:]
    _, size = _layout(config)
    if len(payload) != 8 * size:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, layout needs {8 * size}")
    data = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ParameterSet(config, data)


def require_compatible(params: ParameterSet, vocab_size: int, *, path="checkpoint") -> None:
    """Raise CheckpointMismatchError when a checkpoint cannot serve the given data."""
    if params.config.vocab_size != vocab_size:
        raise CheckpointMismatchError(
            f"{path}: vocab_size={params.config.vocab_size} but the prepared data has {vocab_size} entries"
        )
