"""Training objectives: span masking, contrastive + diversity losses, CTC.

The contrastive loss asks the context vector at each masked frame to
pick out that frame's quantized latent among distractors drawn from the
other masked frames of the same utterance. CTC is the alignment-free
finetuning loss; `ctc_brute_force` enumerates frame labelings outright
and exists purely as an oracle for the forward-algorithm implementation.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DegenerateInputError, InfeasibleTargetError

NEG_INF = -np.inf


@dataclass(frozen=True)
class MaskPlan:
    """Boolean frame mask built as a union of fixed-length spans."""
    mask: np.ndarray
    start_probability: float
    span_length: int

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def sample_mask(n_frames: int, start_probability: float, span_length: int,
                seed) -> MaskPlan:
    """Sample a span mask: each frame starts a span of `span_length` frames
    with probability `start_probability`, spans clipped at the sequence end.

    If nothing gets masked (including start_probability == 0) one span is
    forced at a random position, so a plan is always usable as a
    contrastive target set.
    """
    if not 0.0 <= start_probability <= 1.0:
        raise ContractError(f"start probability {start_probability} outside [0, 1]")
    if not 1 <= span_length <= n_frames:
        raise ContractError(
            f"span length {span_length} outside [1, {n_frames}]")
    rng = np.random.default_rng(seed)
    starts = rng.random(n_frames) < start_probability
    mask = np.zeros(n_frames, dtype=bool)
    for s in np.flatnonzero(starts):
        mask[s:s + span_length] = True
    if not mask.any():
        s = int(rng.integers(0, n_frames - span_length + 1))
        mask[s:s + span_length] = True
    return MaskPlan(mask=mask, start_probability=start_probability,
                    span_length=span_length)


def sample_distractors(n_positions: int, n_distractors: int, rng) -> np.ndarray:
    """Uniform distractor indices in [0, n_positions), never the own position.

    Sampling is with replacement, shape (n_positions, n_distractors).
    """
    if n_positions < 2:
        raise ContractError("need at least 2 masked positions to draw distractors")
    draws = rng.integers(0, n_positions - 1, size=(n_positions, n_distractors))
    own = np.arange(n_positions)[:, None]
    return draws + (draws >= own)


@dataclass
class ContrastiveBatch:
    """Inputs to the contrastive loss for the masked positions of one batch.

    context: (P, d) projected context vectors at masked positions.
    targets: (P, d) quantized latents at the same positions.
    distractor_index: (P, K) integer rows into `targets`, sampled from the
        same utterance's masked positions and never equal to the own row.
    temperature: the similarity scaling (kappa).
    """
    context: Tensor
    targets: Tensor
    distractor_index: np.ndarray
    temperature: float


def _row_norms(x: Tensor) -> Tensor:
    return ad.pow_const(ad.tensor_sum(ad.mul(x, x), axis=-1, keepdims=True) + 1e-300, 0.5)


def contrastive_loss(batch: ContrastiveBatch) -> Tensor:
    """Mean InfoNCE over masked positions with cosine-similarity logits."""
    if batch.temperature <= 0:
        raise ContractError("contrastive temperature must be positive")
    k = batch.distractor_index.shape[1]
    if k < 1:
        raise ContractError("need at least one distractor")
    p, d = batch.context.shape
    if np.any(np.linalg.norm(batch.context.values, axis=-1) == 0) or \
            np.any(np.linalg.norm(batch.targets.values, axis=-1) == 0):
        raise DegenerateInputError("zero-norm vector in cosine similarity")

    negatives = ad.gather_rows(batch.targets, batch.distractor_index)   # (P, K, d)
    candidates = ad.concat(
        [ad.reshape(batch.targets, (p, 1, d)), negatives], axis=1)      # (P, K+1, d)
    ctx = ad.reshape(batch.context, (p, 1, d))
    dots = ad.tensor_sum(ad.mul(ctx, candidates), axis=-1, keepdims=True)
    sims = ad.mul(dots, ad.pow_const(
        ad.mul(_row_norms(ctx), _row_norms(candidates)), -1.0))
    sims = ad.reshape(sims, (p, k + 1))
    logits = ad.mul(sims, Tensor(1.0 / batch.temperature))
    log_probs = ad.log_softmax(logits, axis=1)
    pick_true = np.zeros((p, k + 1))
    pick_true[:, 0] = -1.0
    return ad.tensor_mean(ad.tensor_sum(ad.mul(log_probs, Tensor(pick_true)), axis=1))


def diversity_loss(avg_code_probs: Tensor) -> Tensor:
    """Codebook usage penalty: 1 - perplexity/V averaged over groups.

    Zero when every group's mean code distribution is uniform, approaching
    1 - 1/V when a group collapses to a single entry.
    """
    if np.any(avg_code_probs.values < 0):
        raise ContractError("avg_code_probs must be nonnegative")
    if not np.allclose(avg_code_probs.values.sum(axis=-1), 1.0, atol=1e-6):
        raise ContractError("avg_code_probs rows must sum to 1")
    g, v = avg_code_probs.shape
    logp = ad.log(ad.add(avg_code_probs, Tensor(1e-12)))
    entropy = ad.mul(ad.tensor_sum(ad.mul(avg_code_probs, logp), axis=-1),
                     Tensor(-1.0))
    perplexity = ad.exp(entropy)
    return ad.tensor_mean(Tensor(np.ones(g)) - ad.mul(perplexity, Tensor(1.0 / v)))


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

BLANK = 0


def _extended_labels(target: np.ndarray) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_min_frames(target) -> int:
    """Shortest frame count that can emit `target`: one frame per label plus
    one separating blank per adjacent repeat."""
    target = np.asarray(target, dtype=np.int64)
    repeats = int(np.sum(target[1:] == target[:-1])) if len(target) > 1 else 0
    return len(target) + repeats


def _check_ctc_inputs(log_probs_values: np.ndarray, target: np.ndarray) -> None:
    if log_probs_values.ndim != 2:
        raise ContractError("ctc log_probs must be (T, vocab+1)")
    if len(target) == 0:
        raise ContractError("ctc target must be nonempty")
    if np.any(target == BLANK) or np.any(target < 0) or \
            np.any(target >= log_probs_values.shape[1]):
        raise ContractError("ctc target ids must lie in [1, vocab]")
    if log_probs_values.shape[0] < ctc_min_frames(target):
        raise InfeasibleTargetError(
            f"{log_probs_values.shape[0]} frames cannot emit target of "
            f"minimum length {ctc_min_frames(target)}")


def _ctc_alpha_beta(lp: np.ndarray, ext: np.ndarray):
    """Log-domain forward/backward lattices; both include the emission at t."""
    n_frames, _ = lp.shape
    s = len(ext)
    skip = np.zeros(s, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((n_frames, s), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if s > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, n_frames):
        stay = alpha[t - 1]
        prev = np.concatenate(([NEG_INF], alpha[t - 1, :-1]))
        prev2 = np.concatenate(([NEG_INF, NEG_INF], alpha[t - 1, :-2]))
        prev2 = np.where(skip, prev2, NEG_INF)
        alpha[t] = logsumexp(np.stack([stay, prev, prev2]), axis=0) + lp[t, ext]

    beta = np.full((n_frames, s), NEG_INF)
    beta[-1, -1] = lp[-1, ext[-1]]
    if s > 1:
        beta[-1, -2] = lp[-1, ext[-2]]
    skip_fwd = np.zeros(s, dtype=bool)
    skip_fwd[:-2] = (ext[:-2] != BLANK) & (ext[:-2] != ext[2:])
    for t in range(n_frames - 2, -1, -1):
        stay = beta[t + 1]
        nxt = np.concatenate((beta[t + 1, 1:], [NEG_INF]))
        nxt2 = np.concatenate((beta[t + 1, 2:], [NEG_INF, NEG_INF]))
        nxt2 = np.where(skip_fwd, nxt2, NEG_INF)
        beta[t] = logsumexp(np.stack([stay, nxt, nxt2]), axis=0) + lp[t, ext]
    return alpha, beta


def ctc_loss(log_probs: Tensor, target) -> Tensor:
    """Negative log probability of all frame labelings collapsing to `target`.

    log_probs: (T, vocab+1) log distributions per frame, blank at index 0.
    Computed with the forward algorithm over the blank-interleaved label
    sequence; the gradient comes from the forward-backward occupancies,
    treating every log_probs entry as an independent variable.
    """
    target = np.asarray(target, dtype=np.int64)
    lp = log_probs.values
    _check_ctc_inputs(lp, target)
    ext = _extended_labels(target)
    alpha, beta = _ctc_alpha_beta(lp, ext)
    tail = [alpha[-1, -1]] + ([alpha[-1, -2]] if len(ext) > 1 else [])
    log_total = logsumexp(tail)
    if log_total == NEG_INF:
        raise InfeasibleTargetError("no feasible alignment")  # pragma: no cover

    # occupancy[t, s] = P(path passes state s at frame t | target) in log domain
    occupancy = alpha + beta - lp[:, ext] - log_total

    def bwd(g):
        grad = np.zeros_like(lp)
        np.add.at(grad.T, ext, np.exp(occupancy).T)
        ad._accumulate(log_probs, float(g) * -grad)

    return ad._node(np.asarray(-log_total), (log_probs,), bwd)


def ctc_brute_force(log_probs, target) -> float:
    """Oracle: enumerate every frame labeling, sum those collapsing to target.

    Exponential in T; refuses anything longer than 8 frames.
    """
    lp = log_probs.values if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    target = tuple(int(t) for t in np.asarray(target, dtype=np.int64))
    _check_ctc_inputs(lp, np.asarray(target))
    n_frames, n_labels = lp.shape
    if n_frames > 8:
        raise ContractError("brute-force CTC is limited to T <= 8")
    path_log_probs = []
    for path in itertools.product(range(n_labels), repeat=n_frames):
        collapsed = tuple(k for k, _ in itertools.groupby(path) if k != BLANK)
        if collapsed == target:
            path_log_probs.append(sum(lp[t, k] for t, k in enumerate(path)))
    if not path_log_probs:
        raise InfeasibleTargetError("no path collapses to target")
    return float(-logsumexp(path_log_probs))
