"""Exact enumeration oracles and sample-based evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ENUM_GUARD, all_sequences, seq_index
from .numerics import RngState, entropy, log_softmax, one_hot
from .process import DiffusionProcess


class MetricError(ValueError):
    pass


@dataclass
class ExactDistribution:
    """Probability per sequence over all vocab^seq_len outcomes (seq_index order)."""

    vocab: int
    seq_len: int
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        n = self.vocab ** self.seq_len
        if self.probs.shape != (n,):
            raise MetricError(f"expected {n} entries, got {self.probs.shape}")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise MetricError(f"probabilities sum to {self.probs.sum():.12f}")


def kl(q: ExactDistribution, p: ExactDistribution, floor: float = 1e-12) -> float:
    """KL(q || p) with p floored at 1e-12 (distilled chains can hit exact zeros)."""
    if (q.vocab, q.seq_len) != (p.vocab, p.seq_len):
        raise MetricError("distributions live on different spaces")
    qp = q.probs
    pp = np.maximum(p.probs, floor)
    support = qp > 0
    return float(np.sum(qp[support] * (np.log(qp[support]) - np.log(pp[support]))))


def tv(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(a) - np.asarray(b))))


def _posterior_table(process: DiffusionProcess, s: float, t: float) -> np.ndarray:
    """P[z, c, j] = q(z_s=j | z_t=z, x=c) for every (current token, clean token)."""
    sched = process.schedule
    alpha_s, alpha_t = float(sched.alpha(s)), float(sched.alpha(t))
    a_ts = alpha_t / alpha_s if alpha_s > 0 else 1.0
    keff, K = process.vocab_eff, process.vocab
    pi = process.pi

    z = np.arange(keff)
    bracket1 = a_ts * np.eye(keff) + (1.0 - a_ts) * pi[z][:, None]  # (z, j)
    x_oh = one_hot(np.arange(K), keff)  # (c, j)
    bracket2 = alpha_s * x_oh + (1.0 - alpha_s) * pi  # (c, j)
    denom = alpha_t * x_oh[:, z].T + (1.0 - alpha_t) * pi[z][:, None]  # (z, c)

    table = np.zeros((keff, K, keff))
    ok = denom > 1e-30
    num = bracket1[:, None, :] * bracket2[None, :, :]
    table[ok] = num[ok] / denom[ok][:, None]
    if process.masked:
        # carry-over: revealed tokens never move, whatever x says
        for zd in range(K):
            table[zd, :, :] = 0.0
            table[zd, :, zd] = 1.0
    return table


def _joint_rows(per_pos: np.ndarray) -> np.ndarray:
    """Product over positions of per-position rows: (N, D, J) -> (N, J^D)."""
    joint = per_pos[:, 0, :]
    for d in range(1, per_pos.shape[1]):
        joint = joint[:, :, None] * per_pos[:, d, :][:, None, :]
        joint = joint.reshape(joint.shape[0], -1)
    return joint


def exact_chain_distribution(predict, process: DiffusionProcess, k: int, seq_len: int,
                             noise_draws: np.ndarray | None = None) -> ExactDistribution:
    """Exact distribution of the k-step ancestral sampler, by dynamic programming.

    `predict(z_states, t)` (or `predict(z_states, t, eps)` when `noise_draws`
    is given) returns per-position probabilities over the data vocabulary for
    a batch of states. Noise-conditioned generators are marginalized over the
    fixed `noise_draws` rows: the joint per-state transition is averaged over
    draws after the product across positions, since positions are only
    independent given the noise.
    """
    keff, K = process.vocab_eff, process.vocab
    n_states = keff ** seq_len
    if n_states > ENUM_GUARD:
        raise MetricError(f"state space {keff}^{seq_len} exceeds enumeration guard")
    states = all_sequences(seq_len, keff)

    dist = np.zeros(n_states)
    if process.masked:
        dist[seq_index(np.full(seq_len, process.mask_id), keff)] = 1.0
    else:
        dist[:] = 1.0 / n_states

    for i in range(k, 0, -1):
        t, s = i / k, (i - 1) / k
        table = _posterior_table(process, s, t)  # (z, c, j)
        active = dist > 0
        z_act = states[active]
        gathered = table[z_act]  # (N, D, c, j)

        if noise_draws is None:
            xhat = predict(z_act, t)  # (N, D, K)
            per_pos = np.einsum("ndc,ndcj->ndj", xhat, gathered)
            joint = _joint_rows(per_pos)
        else:
            joint = 0.0
            for eps in noise_draws:
                eps_b = np.tile(eps[None, :], (z_act.shape[0], 1))
                xhat = predict(z_act, t, eps_b)
                per_pos = np.einsum("ndc,ndcj->ndj", xhat, gathered)
                joint = joint + _joint_rows(per_pos)
            joint = joint / len(noise_draws)

        dist = dist[active] @ joint

    if process.masked:
        clean = all_sequences(seq_len, K)
        idx = seq_index(clean, keff)
        clean_probs = dist[idx]
        if dist.sum() - clean_probs.sum() > 1e-9:
            raise MetricError("chain left mass on MASK at s=0")
        dist = clean_probs / clean_probs.sum()
    return ExactDistribution(K, seq_len, dist)


def oracle_denoiser(q: ExactDistribution, process: DiffusionProcess):
    """The exact conditional-marginal denoiser for data distribution q.

    Returns predict(z_states, t) -> factorized probabilities q(x_d | z_t),
    computed by enumeration over the support of q.
    """
    seqs = all_sequences(q.seq_len, q.vocab)  # (M, D)
    pi = process.pi

    def predict(z_states, t):
        alpha_t = float(process.schedule.alpha(t))
        z_states = np.asarray(z_states)
        # p(z_d | x_d) for every (state, position, candidate x)
        match = seqs[None, :, :] == z_states[:, None, :]  # (N, M, D)
        lik = alpha_t * match + (1.0 - alpha_t) * pi[z_states][:, None, :]
        w = q.probs[None, :] * np.prod(lik, axis=2)  # (N, M)
        totals = w.sum(axis=1, keepdims=True)
        w = w / np.maximum(totals, 1e-300)
        out = np.zeros((z_states.shape[0], q.seq_len, q.vocab))
        for c in range(q.vocab):
            out[:, :, c] = np.einsum("nm,md->nd", w, (seqs == c).astype(np.float64))
        # states outside the support of q (a factorized sampler can produce
        # them) get a uniform prediction rather than an all-zero row
        dead = totals[:, 0] <= 0.0
        out[dead] = 1.0 / q.vocab
        return out

    return predict


def factorized_oracle_chain(q: ExactDistribution, process: DiffusionProcess, k: int) -> ExactDistribution:
    """Chain distribution of the exact factorized-marginal denoiser."""
    return exact_chain_distribution(oracle_denoiser(q, process), process, k, q.seq_len)


class ReferenceModel:
    """Position-dependent bigram autoregressive model with analytic gradients.

    Parameters are logits[d, prev, c] with prev = BOS (index K) at d = 0.
    Fitting the exact conditionals of q puts the model at its MLE, where the
    expected data log-likelihood gradient is exactly zero.
    """

    BOS_OFFSET = 1

    def __init__(self, seq_len: int, vocab: int):
        self.seq_len = seq_len
        self.vocab = vocab
        self.logits = np.zeros((seq_len, vocab + 1, vocab))
        self.fitted = False

    @property
    def n_params(self) -> int:
        return self.logits.size

    def _prev(self, x: np.ndarray) -> np.ndarray:
        prev = np.empty_like(x)
        prev[:, 0] = self.vocab  # BOS
        prev[:, 1:] = x[:, :-1]
        return prev

    def fit_exact(self, q: ExactDistribution) -> None:
        seqs = all_sequences(q.seq_len, q.vocab)
        prev = self._prev(seqs)
        cond = np.zeros_like(self.logits)
        for d in range(self.seq_len):
            np.add.at(cond[d], (prev[:, d], seqs[:, d]), q.probs)
        rows = cond.sum(axis=2, keepdims=True)
        cond = np.where(rows > 0, cond / np.maximum(rows, 1e-300), 1.0 / self.vocab)
        self.logits = np.log(np.maximum(cond, 1e-12))
        self.fitted = True

    def fit_counts(self, samples: np.ndarray, smoothing: float = 0.5) -> None:
        samples = np.asarray(samples)
        prev = self._prev(samples)
        counts = np.full_like(self.logits, smoothing)
        for d in range(self.seq_len):
            np.add.at(counts[d], (prev[:, d], samples[:, d]), 1.0)
        self.logits = np.log(counts / counts.sum(axis=2, keepdims=True))
        self.fitted = True

    def log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """Per-sequence log p(x), shape (batch,)."""
        x = np.asarray(x)
        prev = self._prev(x)
        logp = log_softmax(self.logits, axis=-1)
        out = np.zeros(x.shape[0])
        for d in range(self.seq_len):
            out += logp[d, prev[:, d], x[:, d]]
        return out

    def mean_grad_log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """Batch-mean gradient of log p(x) wrt logits, flattened."""
        x = np.asarray(x)
        prev = self._prev(x)
        p = np.exp(log_softmax(self.logits, axis=-1))
        grad = np.zeros_like(self.logits)
        for d in range(self.seq_len):
            np.add.at(grad[d], (prev[:, d], x[:, d]), 1.0)
            np.add.at(grad[d], (prev[:, d],), -p[d, prev[:, d]])
        return grad.ravel() / x.shape[0]


@dataclass
class GradientMomentResult:
    estimate: float
    stderr: float
    data_grad_norm: float
    warning: str | None = None


def gradient_moment(ref: ReferenceModel, gen_sampler, data_sampler, batch_size: int,
                    n_pairs: int, rng: RngState) -> GradientMomentResult:
    """Paired-minibatch estimator of the centered squared gradient norm.

    Each pair draws four independent batches (two generated, two data) and
    takes the inner product of the two centered batch-mean gradients, which
    is unbiased for the squared norm of the centered expectation.
    """
    if not ref.fitted:
        raise MetricError("reference model is untrained")
    vals = np.empty(n_pairs)
    data_grad = np.zeros(ref.n_params)
    for i in range(n_pairs):
        g1 = ref.mean_grad_log_likelihood(gen_sampler(batch_size, rng))
        q1 = ref.mean_grad_log_likelihood(data_sampler(batch_size, rng))
        g2 = ref.mean_grad_log_likelihood(gen_sampler(batch_size, rng))
        q2 = ref.mean_grad_log_likelihood(data_sampler(batch_size, rng))
        vals[i] = float((g1 - q1) @ (g2 - q2))
        data_grad += q1 + q2
    data_grad /= 2 * n_pairs
    norm = float(np.linalg.norm(data_grad))
    warning = None
    if norm > 0.1:
        warning = f"reference model may not be converged on data (grad norm {norm:.3g})"
    stderr = float(np.std(vals, ddof=1) / np.sqrt(n_pairs)) if n_pairs > 1 else float("inf")
    return GradientMomentResult(float(np.mean(vals)), stderr, norm, warning)


def sample_entropy(samples: np.ndarray) -> float:
    """Empirical unigram token entropy (nats), pooled over all positions."""
    samples = np.asarray(samples)
    if samples.shape[0] < 1000:
        raise MetricError("sample_entropy needs at least 1000 samples")
    counts = np.bincount(samples.ravel())
    freqs = counts / counts.sum()
    return float(entropy(freqs))


def generator_output_entropy(model, process: DiffusionProcess, n_probes: int,
                             rng: RngState) -> float:
    """Mean per-position entropy of the soft output at fully-noised inputs."""
    D = model.config.seq_len
    if process.masked:
        z = np.full((n_probes, D), process.mask_id, dtype=np.int64)
    else:
        z = rng.integers(0, process.vocab, size=(n_probes, D))
    if getattr(model.config, "n_noise", 0) > 0:
        eps = rng.normal((n_probes, model.config.n_noise))
        probs = model.probs(z, 1.0, noise=eps)
    else:
        probs = model.probs(z, 1.0)
    return float(np.mean(entropy(probs)))


def generative_perplexity(ref: ReferenceModel, samples: np.ndarray) -> float:
    """exp of mean negative reference-model log-likelihood per token."""
    if not ref.fitted:
        raise MetricError("reference model is untrained")
    samples = np.asarray(samples)
    mean_nll = -float(np.mean(ref.log_likelihood(samples))) / ref.seq_len
    return float(np.exp(mean_nll))
