"""Desk-scale trainer: a tabular softmax language model with exact losses.

The model is first-order: each next-token distribution is the softmax of
one logits row indexed by the previous token.  That is the smallest model
in which the SFT negative log-likelihood and the DPO objective are both
non-trivial, while every gradient stays exactly checkable against finite
differences.

Conventions:
  * sequences are token lists over a closed vocabulary; unknown tokens
    are errors, never a fallback bucket, so log-probabilities are exact;
  * an example (instruction x, response y) is encoded as
    x = [BOS] + tokens(x) and y = tokens(y) + [EOS]; the loss covers the
    response tokens only, with the instruction acting as context;
  * a sequence log-probability sums the per-token terms; batch losses
    average over examples.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteLossError, UnknownTokenError, VocabMismatchError
from .filtering import tokenize

log = logging.getLogger(__name__)

BOS = "<bos>"
EOS = "<eos>"

TokenPair = tuple[list[str], list[str]]
TokenTriple = tuple[list[str], list[str], list[str]]


def build_vocab(texts: Iterable[str]) -> list[str]:
    """Closed vocabulary over the given texts, with BOS and EOS prepended."""
    tokens: set[str] = set()
    for text in texts:
        tokens.update(tokenize(text))
    return [BOS, EOS] + sorted(tokens - {BOS, EOS})


def encode_pair(instruction: str, response: str) -> TokenPair:
    return [BOS] + tokenize(instruction), tokenize(response) + [EOS]


def encode_triple(instruction: str, preferred: str, dispreferred: str) -> TokenTriple:
    x, yw = encode_pair(instruction, preferred)
    yl = tokenize(dispreferred) + [EOS]
    return x, yw, yl


@dataclass
class ToyModelParams:
    """Vocabulary plus a square logits matrix (context token, next token)."""

    vocab: list[str]
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        n = len(self.vocab)
        if len(set(self.vocab)) != n:
            raise ValueError("vocabulary tokens must be unique")
        if BOS not in self.vocab or EOS not in self.vocab:
            raise ValueError("vocabulary must contain the BOS and EOS tokens")
        if self.logits.shape != (n, n):
            raise ValueError(f"logits must be {n}x{n}, got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")
        self._index = {token: i for i, token in enumerate(self.vocab)}

    def index(self, token: str, position: int = -1) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownTokenError(token, position) from None

    def copy(self) -> "ToyModelParams":
        return ToyModelParams(vocab=list(self.vocab), logits=self.logits.copy())

    def row_distribution(self, context_index: int) -> np.ndarray:
        """Softmax of one logits row; rows always normalize to 1."""
        return np.exp(_log_softmax(self.logits[context_index]))


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    learning_rate: float = 0.5
    steps: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be positive and finite")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive and finite")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


def uniform_params(vocab: Sequence[str]) -> ToyModelParams:
    """All-zero logits: every conditional distribution is uniform."""
    n = len(vocab)
    return ToyModelParams(vocab=list(vocab), logits=np.zeros((n, n)))


def random_params(vocab: Sequence[str], rng: np.random.Generator, scale: float = 1.0) -> ToyModelParams:
    n = len(vocab)
    return ToyModelParams(vocab=list(vocab), logits=rng.normal(0.0, scale, size=(n, n)))


def extend_params(params: ToyModelParams, texts: Iterable[str]) -> ToyModelParams:
    """Grow the vocabulary to cover new texts; new logits start at zero.

    Existing rows keep their values; added columns shift each row's
    normalization slightly, which is acceptable for a toy metric and
    keeps vocabulary growth deterministic.
    """
    tokens: set[str] = set()
    for text in texts:
        tokens.update(tokenize(text))
    new_tokens = sorted(tokens - set(params.vocab))
    if not new_tokens:
        return params.copy()
    vocab = list(params.vocab) + new_tokens
    n_old, n_new = len(params.vocab), len(vocab)
    logits = np.zeros((n_new, n_new))
    logits[:n_old, :n_old] = params.logits
    return ToyModelParams(vocab=vocab, logits=logits)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


def _context_indices(params: ToyModelParams, x: Sequence[str], y: Sequence[str]) -> tuple[list[int], list[int]]:
    """Index pairs (context, target) for each response token.

    The first response token conditions on the last instruction token;
    afterwards each token conditions on its predecessor.
    """
    if not y:
        raise ValueError("response token list must be non-empty")
    if not x:
        raise ValueError("instruction token list must be non-empty")
    xi = [params.index(tok, pos) for pos, tok in enumerate(x)]
    yi = [params.index(tok, len(x) + pos) for pos, tok in enumerate(y)]
    contexts = [xi[-1], *yi[:-1]]
    return contexts, yi


def sequence_logprob(params: ToyModelParams, x: Sequence[str], y: Sequence[str]) -> float:
    """log p(y | x) summed over response tokens; always <= 0."""
    contexts, targets = _context_indices(params, x, y)
    total = 0.0
    for ctx, tgt in zip(contexts, targets):
        total += _log_softmax(params.logits[ctx])[tgt]
    return float(total)


def nll_loss(params: ToyModelParams, batch: Sequence[TokenPair]) -> float:
    """Mean negative sequence log-probability over the batch; >= 0."""
    if not batch:
        raise ValueError("batch must be non-empty")
    return -sum(sequence_logprob(params, x, y) for x, y in batch) / len(batch)


def _check_shared_vocab(theta: ToyModelParams, ref: ToyModelParams) -> None:
    if theta.vocab != ref.vocab:
        raise VocabMismatchError("policy and reference must share a vocabulary")


def reward_hat(
    theta: ToyModelParams,
    ref: ToyModelParams,
    x: Sequence[str],
    y: Sequence[str],
    beta: float,
) -> float:
    """Implicit reward: beta times the policy/reference log-probability ratio."""
    _check_shared_vocab(theta, ref)
    return beta * (sequence_logprob(theta, x, y) - sequence_logprob(ref, x, y))


def reward_margin(theta: ToyModelParams, ref: ToyModelParams, pair: TokenTriple, beta: float) -> float:
    """Implicit-reward difference between the preferred and dispreferred sides."""
    x, yw, yl = pair
    return reward_hat(theta, ref, x, yw, beta) - reward_hat(theta, ref, x, yl, beta)


def _softplus(z: float) -> float:
    # log(1 + exp(z)) without overflow; -log(sigmoid(d)) == softplus(-d).
    return float(np.logaddexp(0.0, z))


def dpo_loss(theta: ToyModelParams, ref: ToyModelParams, pair: TokenTriple, beta: float) -> float:
    """Negative log-sigmoid of the implicit-reward margin for one pair; > 0."""
    x, yw, yl = pair
    if list(yw) == list(yl):
        raise ValueError("preferred and dispreferred token sequences must differ")
    return _softplus(-reward_margin(theta, ref, pair, beta))


def dpo_batch_loss(
    theta: ToyModelParams, ref: ToyModelParams, pairs: Sequence[TokenTriple], beta: float
) -> float:
    if not pairs:
        raise ValueError("pairs must be non-empty")
    return sum(dpo_loss(theta, ref, pair, beta) for pair in pairs) / len(pairs)


def _accumulate_logprob_grad(
    params: ToyModelParams, x: Sequence[str], y: Sequence[str], out: np.ndarray, weight: float
) -> None:
    """Add weight * d log p(y|x) / d logits into ``out``.

    For each visited context row the derivative is onehot(target) minus
    the row softmax; unvisited rows receive nothing.
    """
    contexts, targets = _context_indices(params, x, y)
    for ctx, tgt in zip(contexts, targets):
        probs = np.exp(_log_softmax(params.logits[ctx]))
        out[ctx] -= weight * probs
        out[ctx, tgt] += weight


def grad_nll(params: ToyModelParams, batch: Sequence[TokenPair]) -> np.ndarray:
    """Gradient of nll_loss with respect to the logits.

    Per visited row this is softmax(row) - onehot(target), accumulated
    over the batch and divided by the batch size.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    grad = np.zeros_like(params.logits)
    for x, y in batch:
        _accumulate_logprob_grad(params, x, y, grad, -1.0)
    return grad / len(batch)


def grad_dpo(
    theta: ToyModelParams, ref: ToyModelParams, pairs: Sequence[TokenTriple], beta: float
) -> np.ndarray:
    """Gradient of dpo_batch_loss with respect to the policy logits.

    Per pair: -(1 - sigmoid(margin)) * beta * (grad log p(yw) - grad log p(yl)).
    The reference model receives no gradient.
    """
    if not pairs:
        raise ValueError("pairs must be non-empty")
    _check_shared_vocab(theta, ref)
    grad = np.zeros_like(theta.logits)
    for pair in pairs:
        x, yw, yl = pair
        margin = reward_margin(theta, ref, pair, beta)
        coeff = -(1.0 - 1.0 / (1.0 + np.exp(-margin))) * beta
        _accumulate_logprob_grad(theta, x, yw, grad, coeff)
        _accumulate_logprob_grad(theta, x, yl, grad, -coeff)
    return grad / len(pairs)


def _descend(
    params: ToyModelParams,
    loss_fn: Callable[[ToyModelParams], float],
    grad_fn: Callable[[ToyModelParams], np.ndarray],
    config: TrainConfig,
    loss_log: list[float] | None,
) -> ToyModelParams:
    params = params.copy()
    # Overflow inside a diverging step is reported through the typed guard,
    # not as a numpy warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.steps):
            loss = loss_fn(params)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"loss became non-finite: {loss}")
            if loss_log is not None:
                loss_log.append(loss)
            params.logits -= config.learning_rate * grad_fn(params)
    if not np.all(np.isfinite(params.logits)):
        raise NonFiniteLossError("parameters became non-finite during training")
    return params


def train_sft(
    params: ToyModelParams,
    batch: Sequence[TokenPair],
    config: TrainConfig,
    loss_log: list[float] | None = None,
) -> ToyModelParams:
    """Full-batch gradient descent on the NLL loss; deterministic."""
    if not batch:
        raise ValueError("batch must be non-empty")
    return _descend(
        params,
        lambda p: nll_loss(p, batch),
        lambda p: grad_nll(p, batch),
        config,
        loss_log,
    )


def train_dpo(
    theta: ToyModelParams,
    ref: ToyModelParams,
    pairs: Sequence[TokenTriple],
    config: TrainConfig,
    loss_log: list[float] | None = None,
) -> ToyModelParams:
    """Full-batch gradient descent on the DPO loss against a frozen reference."""
    if not pairs:
        raise ValueError("pairs must be non-empty")
    _check_shared_vocab(theta, ref)
    return _descend(
        theta,
        lambda p: dpo_batch_loss(p, ref, pairs, config.beta),
        lambda p: grad_dpo(p, ref, pairs, config.beta),
        config,
        loss_log,
    )


def mean_reward_margin(
    theta: ToyModelParams, ref: ToyModelParams, pairs: Sequence[TokenTriple], beta: float
) -> float:
    if not pairs:
        raise ValueError("pairs must be non-empty")
    return sum(reward_margin(theta, ref, pair, beta) for pair in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# persistence


def save_params(params: ToyModelParams, path: str | os.PathLike) -> None:
    doc = {"vocab": params.vocab, "logits": params.logits.ravel().tolist()}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp, path)


def load_params(path: str | os.PathLike) -> ToyModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    n = len(doc["vocab"])
    logits = np.asarray(doc["logits"], dtype=np.float64).reshape(n, n)
    return ToyModelParams(vocab=doc["vocab"], logits=logits)


def write_loss_curve(losses: Sequence[float], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(loss)])


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_diff_grad(
    loss_fn: Callable[[ToyModelParams], float], params: ToyModelParams, eps: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of an arbitrary scalar loss."""
    probe = params.copy()
    grad = np.zeros_like(probe.logits)
    n = probe.logits.shape[0]
    for i in range(n):
        for j in range(n):
            original = probe.logits[i, j]
            probe.logits[i, j] = original + eps
            plus = loss_fn(probe)
            probe.logits[i, j] = original - eps
            minus = loss_fn(probe)
            probe.logits[i, j] = original
            grad[i, j] = (plus - minus) / (2.0 * eps)
    return grad


def _max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def _random_token_list(rng: np.random.Generator, tokens: Sequence[str], lo: int, hi: int) -> list[str]:
    length = int(rng.integers(lo, hi + 1))
    return [tokens[int(rng.integers(len(tokens)))] for _ in range(length)]


@dataclass
class GradCheckReport:
    trials: int
    max_rel_err_nll: float
    max_rel_err_dpo: float
    eps: float

    @property
    def max_rel_err(self) -> float:
        return max(self.max_rel_err_nll, self.max_rel_err_dpo)


def gradient_check(trials: int = 100, rng_seed: int = 0, eps: float = 1e-4) -> GradCheckReport:
    """Compare analytic NLL and DPO gradients against central differences.

    Runs ``trials`` random tabular instances for each loss and reports the
    maximum relative error in the sup norm, instance by instance.
    """
    rng = np.random.default_rng(rng_seed)
    worst_nll = 0.0
    worst_dpo = 0.0
    for _ in range(trials):
        size = int(rng.integers(3, 7))
        vocab = [BOS, EOS] + [f"t{i}" for i in range(size)]
        content = vocab[2:]

        params = random_params(vocab, rng)
        batch = [
            ([BOS] + _random_token_list(rng, content, 1, 3),
             _random_token_list(rng, content, 1, 4) + [EOS])
            for _ in range(int(rng.integers(1, 4)))
        ]
        numeric = finite_diff_grad(lambda p: nll_loss(p, batch), params, eps)
        worst_nll = max(worst_nll, _max_relative_error(grad_nll(params, batch), numeric))

        theta = random_params(vocab, rng)
        ref = random_params(vocab, rng)
        beta = float(rng.uniform(0.05, 2.0))
        pairs: list[TokenTriple] = []
        for _ in range(int(rng.integers(1, 3))):
            x = [BOS] + _random_token_list(rng, content, 1, 3)
            yw = _random_token_list(rng, content, 1, 4) + [EOS]
            yl = _random_token_list(rng, content, 1, 4) + [EOS]
            while yl == yw:
                yl = _random_token_list(rng, content, 1, 4) + [EOS]
            pairs.append((x, yw, yl))
        numeric = finite_diff_grad(lambda p: dpo_batch_loss(p, ref, pairs, beta), theta, eps)
        worst_dpo = max(worst_dpo, _max_relative_error(grad_dpo(theta, ref, pairs, beta), numeric))
    return GradCheckReport(trials=trials, max_rel_err_nll=worst_nll, max_rel_err_dpo=worst_dpo, eps=eps)
