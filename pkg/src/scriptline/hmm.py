"""Character-level hidden Markov models with Gaussian-mixture emissions.

Each character is a linear chain of emitting states (self-loop and
next-state arcs only) framed by non-emitting entry/exit states, so the
transition matrix of an n-state model is (n+2) x (n+2) row-stochastic
with index 0 = entry and n+1 = exit. Training needs no segmentation:
for every utterance the character models named by its transcription are
concatenated into one composite chain (exit of one wired to the entry
of the next) and forward-backward statistics are pooled per character
across all occurrences. Decoding runs over an ergodic network in which
any character may follow any other, which is what makes the vocabulary
open.

All probability arithmetic is in log space. Observation sequences are
(T, dim) arrays; a FrameSequence is accepted anywhere via its `.frames`.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

_HMM_MAGIC = b"HMM1"

LOG_2PI = float(np.log(2.0 * np.pi))
WEIGHT_FLOOR = 1e-8
OCCUPANCY_FLOOR = 1e-12
SELF_LOOP_INIT = 0.6
SPLIT_OFFSET = 0.2
VAR_FLOOR_SCALE = 1e-4
VAR_FLOOR_MIN = 1e-8


@dataclass
class GaussianMixture:
    """Diagonal-covariance mixture: weights (M,), means/variances (M, dim)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "GaussianMixture":
        return GaussianMixture(self.weights.copy(), self.means.copy(), self.variances.copy())

    def log_likelihood(self, frames: np.ndarray) -> np.ndarray:
        """(T,) log density of each frame under the mixture."""
        frames = np.atleast_2d(frames)
        diff = frames[:, None, :] - self.means[None, :, :]  # (T, M, dim)
        expo = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        logdet = np.sum(np.log(self.variances), axis=1)  # (M,)
        dim = self.means.shape[1]
        comp = np.log(self.weights)[None, :] - 0.5 * (dim * LOG_2PI + logdet[None, :] + expo)
        return _logsumexp(comp, axis=1)

    def component_log_likelihoods(self, frames: np.ndarray) -> np.ndarray:
        """(T, M) per-component log of weight * density."""
        frames = np.atleast_2d(frames)
        diff = frames[:, None, :] - self.means[None, :, :]
        expo = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        logdet = np.sum(np.log(self.variances), axis=1)
        dim = self.means.shape[1]
        return np.log(self.weights)[None, :] - 0.5 * (dim * LOG_2PI + logdet[None, :] + expo)


@dataclass
class CharacterModel:
    """Linear HMM for one character symbol."""

    label: str
    transitions: np.ndarray  # (n_states+2, n_states+2), 0=entry, n+1=exit
    emissions: list  # GaussianMixture per emitting state

    @property
    def n_states(self) -> int:
        return len(self.emissions)

    @property
    def dim(self) -> int:
        return self.emissions[0].means.shape[1]

    def copy(self) -> "CharacterModel":
        return CharacterModel(self.label, self.transitions.copy(), [g.copy() for g in self.emissions])


@dataclass
class RecognitionNetwork:
    """Ergodic composition: uniform exit-to-entry arcs over all models."""

    models: list  # CharacterModel, fixed order
    insertion_penalty: float = 0.0  # additive log-cost per character transition


@dataclass
class DecodeResult:
    labels: str | None  # None when no path exists
    log_score: float
    boundaries: list  # (label, first_frame, last_frame_exclusive)

    @property
    def failed(self) -> bool:
        return self.labels is None


@dataclass
class CompositeModel:
    """Concatenation of character models along a transcription.

    The chain is flattened: state j has a self arc (log_self[j]) and an
    advance arc to j+1 (log_adv[j]); log_adv of the very last state is
    the final exit probability. Mixtures are shared references into the
    originating character models.
    """

    transcription: list
    offsets: np.ndarray  # start flat index of each character position
    log_self: np.ndarray  # (N,)
    log_adv: np.ndarray  # (N,), last entry = exit-to-end
    mixtures: list  # GaussianMixture per flat state
    state_char: np.ndarray  # (N,) position index of each flat state
    log_entry: float = 0.0  # first model's entry-to-first-state arc

    @property
    def n_states(self) -> int:
        return self.log_self.shape[0]


def _frames_of(obs) -> np.ndarray:
    arr = getattr(obs, "frames", obs)
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if arr.shape[0] == 0:
        raise ValueError("observation sequence is empty")
    return arr


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    hi = np.max(a, axis=axis, keepdims=True)
    hi = np.where(np.isneginf(hi), 0.0, hi)
    return np.log(np.sum(np.exp(a - hi), axis=axis)) + np.squeeze(hi, axis=axis)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def variance_floor(corpus_frames, scale: float = VAR_FLOOR_SCALE) -> np.ndarray:
    """Per-dimension floor: `scale` times the corpus-global variance.

    A small absolute backstop keeps the floor positive even for
    degenerate (constant) corpora.
    """
    stacked = np.vstack([_frames_of(f) for f in corpus_frames])
    return np.maximum(scale * stacked.var(axis=0), VAR_FLOOR_MIN)


def _linear_transitions(n_states: int) -> np.ndarray:
    a = np.zeros((n_states + 2, n_states + 2))
    a[0, 1] = 1.0  # entry feeds the first state
    for i in range(1, n_states + 1):
        a[i, i] = SELF_LOOP_INIT
        a[i, i + 1] = 1.0 - SELF_LOOP_INIT
    a[n_states + 1, n_states + 1] = 1.0  # exit is absorbing
    return a


def flat_start(corpus_frames, charset, n_states: int = 10, var_floor: np.ndarray | None = None) -> dict:
    """Initialize one model per symbol from corpus-global statistics.

    Every emitting state starts as a single Gaussian at the overall
    mean/variance of all frames (population statistics), variances
    floored; transitions start at self 0.6 / next 0.4.
    """
    frame_list = [_frames_of(f) for f in corpus_frames]
    if not frame_list:
        raise ValueError("flat start needs a non-empty feature corpus")
    stacked = np.vstack(frame_list)
    mean = stacked.mean(axis=0)
    var = stacked.var(axis=0)
    if var_floor is None:
        var_floor = np.maximum(VAR_FLOOR_SCALE * var, VAR_FLOOR_MIN)
    var = np.maximum(var, var_floor)

    models = {}
    for symbol in charset:
        emissions = [
            GaussianMixture(np.array([1.0]), mean[None, :].copy(), var[None, :].copy())
            for _ in range(n_states)
        ]
        models[symbol] = CharacterModel(symbol, _linear_transitions(n_states), emissions)
    return models


def build_composite(models: dict, transcription, utterance: str = "?") -> CompositeModel:
    """Wire the transcription's character models into one chain."""
    symbols = list(transcription)
    if not symbols:
        raise DataError(f"utterance {utterance}: empty transcription")
    for symbol in symbols:
        if symbol not in models:
            raise DataError(f"utterance {utterance}: symbol {symbol!r} has no character model")

    log_self, log_adv, mixtures, state_char, offsets = [], [], [], [], []
    total = 0
    for q, symbol in enumerate(symbols):
        model = models[symbol]
        n = model.n_states
        offsets.append(total)
        trans = _log(model.transitions)
        for i in range(1, n + 1):
            log_self.append(trans[i, i])
            adv = trans[i, i + 1]
            if i == n and q + 1 < len(symbols):
                nxt = models[symbols[q + 1]]
                adv = adv + _log(nxt.transitions[0, 1])  # entry pass-through
            log_adv.append(adv)
            mixtures.append(model.emissions[i - 1])
            state_char.append(q)
        total += n
    return CompositeModel(
        transcription=symbols,
        offsets=np.array(offsets, dtype=np.intp),
        log_self=np.array(log_self),
        log_adv=np.array(log_adv),
        mixtures=mixtures,
        state_char=np.array(state_char, dtype=np.intp),
        log_entry=float(_log(models[symbols[0]].transitions[0, 1])),
    )


def emission_table(comp: CompositeModel, obs) -> np.ndarray:
    """(T, N) log emission density of every frame under every flat state."""
    frames = _frames_of(obs)
    by_id = {}
    for gmm in comp.mixtures:
        if id(gmm) not in by_id:
            by_id[id(gmm)] = gmm.log_likelihood(frames)
    return np.column_stack([by_id[id(g)] for g in comp.mixtures])


def forward_table(comp: CompositeModel, obs, logb: np.ndarray | None = None) -> np.ndarray:
    """(T, N) log alpha, alpha[t, j] = P(o_0..o_t, state_t = j)."""
    frames = _frames_of(obs)
    if logb is None:
        logb = emission_table(comp, frames)
    t_len, n = logb.shape
    la = np.full((t_len, n), -np.inf)
    la[0, 0] = comp.log_entry + logb[0, 0]
    for t in range(1, t_len):
        stay = la[t - 1] + comp.log_self
        enter = np.full(n, -np.inf)
        enter[1:] = la[t - 1, :-1] + comp.log_adv[:-1]
        la[t] = np.logaddexp(stay, enter) + logb[t]
    return la


def log_forward(comp: CompositeModel, obs) -> float:
    """Total log-likelihood of the observations given the chain.

    -inf when no path fits (for instance fewer frames than states).
    """
    frames = _frames_of(obs)
    la = forward_table(comp, frames)
    return float(la[-1, -1] + comp.log_adv[-1])


def log_backward(comp: CompositeModel, obs, logb: np.ndarray | None = None) -> np.ndarray:
    """(T, N) log beta, beta[t, j] = P(o_{t+1}..o_T, final exit | state_t = j)."""
    frames = _frames_of(obs)
    if logb is None:
        logb = emission_table(comp, frames)
    t_len, n = logb.shape
    lb = np.full((t_len, n), -np.inf)
    lb[-1, -1] = comp.log_adv[-1]
    for t in range(t_len - 2, -1, -1):
        stay = comp.log_self + logb[t + 1] + lb[t + 1]
        leave = np.full(n, -np.inf)
        leave[:-1] = comp.log_adv[:-1] + logb[t + 1, 1:] + lb[t + 1, 1:]
        lb[t] = np.logaddexp(stay, leave)
    return lb


class _Accumulator:
    """Pooled Baum-Welch statistics for one character model."""

    def __init__(self, n_states: int, n_components: int, dim: int):
        self.den = np.zeros(n_states)
        self.self_num = np.zeros(n_states)
        self.adv_num = np.zeros(n_states)
        self.occ = np.zeros((n_states, n_components))
        self.first = np.zeros((n_states, n_components, dim))
        self.second = np.zeros((n_states, n_components, dim))

    def merge(self, other: "_Accumulator") -> None:
        self.den += other.den
        self.self_num += other.self_num
        self.adv_num += other.adv_num
        self.occ += other.occ
        self.first += other.first
        self.second += other.second


def _utterance_statistics(models: dict, frames: np.ndarray, transcription, utterance: str):
    """E-step for one utterance: (log-likelihood, {label: _Accumulator})."""
    comp = build_composite(models, transcription, utterance)
    if frames.shape[0] < comp.n_states:
        return -np.inf, {}
    logb = emission_table(comp, frames)
    la = forward_table(comp, frames, logb)
    lb = log_backward(comp, frames, logb)
    ll = float(la[-1, -1] + comp.log_adv[-1])
    if not np.isfinite(ll):
        return -np.inf, {}

    gamma = np.exp(la + lb - ll)  # (T, N)
    t_len, n = logb.shape
    # arc occupancies; the advance arc of the last flat state fires at t = T-1
    xi_self = np.exp(la[:-1] + comp.log_self[None, :] + logb[1:] + lb[1:] - ll)
    xi_adv = np.zeros((t_len - 1, n))
    xi_adv[:, :-1] = np.exp(
        la[:-1, :-1] + comp.log_adv[None, :-1] + logb[1:, 1:] + lb[1:, 1:] - ll
    )
    self_sum = xi_self.sum(axis=0)
    adv_sum = xi_adv.sum(axis=0)
    adv_sum[-1] += gamma[-1, -1]  # final exit mass

    stats = {}
    for q, symbol in enumerate(comp.transcription):
        model = models[symbol]
        n_states = model.n_states
        lo = comp.offsets[q]
        sl = slice(lo, lo + n_states)
        acc = stats.get(symbol)
        if acc is None:
            acc = stats[symbol] = _Accumulator(n_states, model.emissions[0].n_components, model.dim)
        acc.den += gamma[:, sl].sum(axis=0)
        acc.self_num += self_sum[sl]
        acc.adv_num += adv_sum[sl]
        for i in range(n_states):
            j = lo + i
            comp_ll = model.emissions[i].component_log_likelihoods(frames)  # (T, M)
            resp = np.exp(comp_ll - _logsumexp(comp_ll, axis=1)[:, None])
            weighted = resp * gamma[:, j][:, None]  # (T, M)
            acc.occ[i] += weighted.sum(axis=0)
            acc.first[i] += weighted.T @ frames
            acc.second[i] += weighted.T @ (frames * frames)
    return ll, stats


_POOL_STATE: dict = {}


def _pool_init(models):
    _POOL_STATE["models"] = models


def _pool_job(args):
    frames, transcription, utterance = args
    return _utterance_statistics(_POOL_STATE["models"], frames, transcription, utterance)


def baum_welch_epoch(models: dict, corpus, charset=None, var_floor=VAR_FLOOR_MIN, jobs: int = 1):
    """One embedded re-estimation pass over (frames, transcription) pairs.

    Statistics of all occurrences of a character are pooled before the
    single parameter update, so the update is an exact EM step and the
    returned value (the total log-likelihood of the corpus under the
    *incoming* models) never decreases across successive epochs.
    Utterances shorter than their composite's minimum duration are
    skipped with a warning and contribute nothing, consistently in
    every epoch. Parallel accumulation (jobs > 1) merges per-utterance
    statistics in corpus order, so results match the serial run bitwise.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty training corpus")
    if charset is not None:
        known = set(charset)
        for u, (_, transcription) in enumerate(corpus):
            for symbol in transcription:
                if symbol not in known:
                    raise DataError(f"utterance {u}: symbol {symbol!r} not in charset")

    tasks = [(_frames_of(frames), list(tr), str(u)) for u, (frames, tr) in enumerate(corpus)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(
            max_workers=jobs, initializer=_pool_init, initargs=(models,)
        ) as pool:
            results = list(pool.map(_pool_job, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_utterance_statistics(models, f, tr, u) for f, tr, u in tasks]

    total_ll = 0.0
    skipped = 0
    pooled: dict = {}
    for ll, stats in results:
        if not np.isfinite(ll):
            skipped += 1
            continue
        total_ll += ll
        for symbol, acc in stats.items():
            if symbol in pooled:
                pooled[symbol].merge(acc)
            else:
                pooled[symbol] = acc
    if skipped:
        log.warning("baum-welch: skipped %d utterance(s) with impossible alignments", skipped)
    if not pooled:
        raise DataError("no utterance produced a valid alignment; models cannot be re-estimated")

    floor = np.asarray(var_floor, dtype=np.float64)
    updated = {}
    for symbol, model in models.items():
        acc = pooled.get(symbol)
        new = model.copy()
        if acc is not None:
            for i in range(model.n_states):
                row_total = acc.self_num[i] + acc.adv_num[i]
                if row_total > OCCUPANCY_FLOOR:
                    new.transitions[i + 1, i + 1] = acc.self_num[i] / row_total
                    new.transitions[i + 1, i + 2] = acc.adv_num[i] / row_total
                state_occ = acc.occ[i].sum()
                if state_occ <= OCCUPANCY_FLOOR:
                    continue
                gmm = new.emissions[i]
                weights = np.maximum(acc.occ[i] / state_occ, WEIGHT_FLOOR)
                gmm.weights = weights / weights.sum()
                for m in range(gmm.n_components):
                    if acc.occ[i, m] > OCCUPANCY_FLOOR:
                        mean = acc.first[i, m] / acc.occ[i, m]
                        var = acc.second[i, m] / acc.occ[i, m] - mean * mean
                        gmm.means[m] = mean
                        gmm.variances[m] = np.maximum(var, floor)
        updated[symbol] = new
    return updated, total_ll


def split_mixtures(models: dict) -> dict:
    """Double every mixture: halve weights, nudge means by +-0.2 stddev."""
    out = {}
    for symbol, model in models.items():
        new = model.copy()
        for i, gmm in enumerate(new.emissions):
            offset = SPLIT_OFFSET * np.sqrt(gmm.variances)
            weights = np.repeat(gmm.weights / 2.0, 2)
            means = np.empty((2 * gmm.n_components, gmm.means.shape[1]))
            means[0::2] = gmm.means - offset
            means[1::2] = gmm.means + offset
            variances = np.repeat(gmm.variances, 2, axis=0)
            new.emissions[i] = GaussianMixture(weights, means, variances)
        out[symbol] = new
    return out


def build_ergodic_network(models, insertion_penalty: float = 0.0) -> RecognitionNetwork:
    """Open-vocabulary network: every exit reaches every entry uniformly."""
    model_list = list(models.values()) if isinstance(models, dict) else list(models)
    if not model_list:
        raise ValueError("network needs at least one character model")
    return RecognitionNetwork(models=model_list, insertion_penalty=float(insertion_penalty))


def viterbi_decode(network: RecognitionNetwork, obs) -> DecodeResult:
    """Best character string by max-probability path through the network.

    Ties are broken toward the lower character index, then the lower
    state index (and toward staying inside a model rather than
    re-entering it, for the degenerate equal-score case). Returns a
    failure result when no path explains the observations.
    """
    frames = _frames_of(obs)
    models = network.models
    n_models = len(models)
    log_uniform = float(np.log(1.0 / n_models)) + network.insertion_penalty

    lse, ladv, lexit, lenter, owner = [], [], [], [], []
    logb_cols = []
    for m, model in enumerate(models):
        trans = _log(model.transitions)
        n = model.n_states
        for i in range(1, n + 1):
            lse.append(trans[i, i])
            ladv.append(trans[i, i + 1] if i < n else -np.inf)
            lexit.append(trans[i, n + 1])
            lenter.append(trans[0, i])
            owner.append(m)
        blocks = [g.log_likelihood(frames) for g in model.emissions]
        logb_cols.extend(blocks)
    lse = np.array(lse)
    ladv = np.array(ladv)
    lexit = np.array(lexit)
    lenter = np.array(lenter)
    owner = np.array(owner, dtype=np.intp)
    logb = np.column_stack(logb_cols)  # (T, N)
    t_len, n = logb.shape

    first_log_uniform = float(np.log(1.0 / n_models))  # no penalty on the first character
    delta = first_log_uniform + lenter + logb[0]
    back_state = np.full((t_len, n), -1, dtype=np.intp)
    back_enter = np.zeros((t_len, n), dtype=bool)

    for t in range(1, t_len):
        stay = delta + lse  # predecessor j
        advance = np.full(n, -np.inf)
        advance[1:] = delta[:-1] + ladv[:-1]  # predecessor j-1
        exit_scores = delta + lexit
        best_exit = int(np.argmax(exit_scores))  # lowest index on ties
        enter = exit_scores[best_exit] + log_uniform + lenter

        # lower predecessor index wins ties: j-1 (advance) before j (stay)
        score = advance.copy()
        pred = np.arange(-1, n - 1)
        take = stay > score
        score[take] = stay[take]
        pred[take] = np.arange(n)[take]
        entered = np.zeros(n, dtype=bool)
        take = (enter > score) | ((enter == score) & (best_exit < pred))
        score[take] = enter[take]
        pred[take] = best_exit
        entered[take] = True

        delta = score + logb[t]
        back_state[t] = pred
        back_enter[t] = entered

    final = delta + lexit
    end = int(np.argmax(final))
    if not np.isfinite(final[end]):
        return DecodeResult(labels=None, log_score=-np.inf, boundaries=[])

    states = np.empty(t_len, dtype=np.intp)
    entered_at = np.zeros(t_len, dtype=bool)
    states[-1] = end
    for t in range(t_len - 1, 0, -1):
        entered_at[t] = back_enter[t, states[t]]
        states[t - 1] = back_state[t, states[t]]
    entered_at[0] = True

    boundaries = []
    start = 0
    for t in range(1, t_len + 1):
        if t == t_len or entered_at[t]:
            label = models[owner[states[start]]].label
            boundaries.append((label, start, t))
            start = t
    text = "".join(b[0] for b in boundaries)
    return DecodeResult(labels=text, log_score=float(final[end]), boundaries=boundaries)


def save_models(models: dict, path) -> None:
    """HMM1 model set; models are written in dict (charset) order."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _HMM_MAGIC, len(models)))
        for symbol, model in models.items():
            raw = symbol.encode("utf-8")
            n_comp = model.emissions[0].n_components
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<III", model.n_states, model.dim, n_comp))
            fh.write(np.ascontiguousarray(model.transitions, dtype="<f8").tobytes())
            for gmm in model.emissions:
                fh.write(np.ascontiguousarray(gmm.weights, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(gmm.means, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(gmm.variances, dtype="<f8").tobytes())


def load_models(path) -> dict:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8 or header[:4] != _HMM_MAGIC:
            raise FormatError(f"{path}: not an HMM1 model file")
        (n_models,) = struct.unpack("<I", header[4:])
        models = {}
        for _ in range(n_models):
            (label_len,) = struct.unpack("<I", fh.read(4))
            label = fh.read(label_len).decode("utf-8")
            n_states, dim, n_comp = struct.unpack("<III", fh.read(12))
            size = n_states + 2
            trans = np.frombuffer(fh.read(size * size * 8), dtype="<f8").reshape(size, size).copy()
            emissions = []
            for _ in range(n_states):
                weights = np.frombuffer(fh.read(n_comp * 8), dtype="<f8").copy()
                means = np.frombuffer(fh.read(n_comp * dim * 8), dtype="<f8").reshape(n_comp, dim).copy()
                variances = np.frombuffer(fh.read(n_comp * dim * 8), dtype="<f8").reshape(n_comp, dim).copy()
                emissions.append(GaussianMixture(weights, means, variances))
            models[label] = CharacterModel(label, trans, emissions)
    return models


def dump_models_text(models: dict) -> str:
    """Human-readable summary for inspection and diffing."""
    lines = []
    for symbol, model in models.items():
        lines.append(f"model {symbol!r}: {model.n_states} states, dim {model.dim}, "
                     f"{model.emissions[0].n_components} component(s)")
        for i in range(1, model.n_states + 1):
            lines.append(f"  state {i - 1}: self {model.transitions[i, i]:.6f} "
                         f"next {model.transitions[i, i + 1]:.6f}")
            gmm = model.emissions[i - 1]
            for m in range(gmm.n_components):
                lines.append(f"    comp {m}: w {gmm.weights[m]:.6f} "
                             f"mean[:3] {np.array2string(gmm.means[m][:3], precision=4)} "
                             f"var[:3] {np.array2string(gmm.variances[m][:3], precision=4)}")
    return "\n".join(lines) + "\n"
