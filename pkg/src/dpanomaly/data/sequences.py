"""Log-key session corpora: a synthetic workflow automaton, windowing and text IO.

The default automaton imitates the life cycle of an HDFS block: allocation,
three replica writes, packet responder acknowledgements, block-map updates and
a few optional tails (deletion, re-replication with an optional
verification). No state has more than three successors. Every session
ends with an explicit close key, so a cut-off session is detectable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORMAL, ABNORMAL = 0, 1
ANOMALY_KINDS = ("swap", "insertion", "truncation")


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticLogModel:
    """A finite automaton whose states each emit one log key.

    ``transitions[s]`` lists ``(next_state, probability)``; the session ends
    after emitting the key of a state listed in ``final``. ``fault_keys`` are
    keys used for insertion anomalies (exception messages in a real system).
    """

    vocab_size: int
    emit: tuple[int, ...]
    start: int
    transitions: dict[int, tuple[tuple[int, float], ...]]
    final: frozenset[int]
    fault_keys: tuple[int, ...] = ()
    max_len: int = 200

    def validate(self) -> None:
        n = len(self.emit)
        if any(not 0 <= k < self.vocab_size for k in self.emit + self.fault_keys):
            raise GenerationError("key outside the vocabulary")
        for s in range(n):
            if s in self.final:
                continue
            nxt = self.transitions.get(s, ())
            if not nxt:
                raise GenerationError(f"state {s} is neither final nor has successors")
            if abs(sum(p for _, p in nxt) - 1.0) > 1e-9:
                raise GenerationError(f"probabilities out of state {s} do not sum to 1")
        seen, todo = {self.start}, [self.start]
        while todo:
            for t, _ in self.transitions.get(todo.pop(), ()):
                if t not in seen:
                    seen.add(t)
                    todo.append(t)
        if len(seen) != n:
            raise GenerationError(f"unreachable states: {sorted(set(range(n)) - seen)}")

    def sample(self, rng: np.random.Generator) -> list[int]:
        s = self.start
        out = [self.emit[s]]
        while s not in self.final:
            nxt = self.transitions[s]
            j = rng.choice(len(nxt), p=[p for _, p in nxt])
            s = nxt[j][0]
            out.append(self.emit[s])
            if len(out) > self.max_len:
                raise GenerationError("session exceeded max_len; automaton may loop forever")
        return out

    def accepts(self, seq) -> bool:
        """Membership oracle: can the automaton emit exactly ``seq``?"""
        seq = list(seq)
        if not seq or self.emit[self.start] != seq[0]:
            return False
        states = {self.start}
        for key in seq[1:]:
            states = {t for s in states if s not in self.final for t, p in self.transitions[s] if p > 0 and self.emit[t] == key}
            if not states:
                return False
        return any(s in self.final for s in states)

    def successor_keys(self) -> dict[int, set[int]]:
        """Keys that may follow each key (first-order projection of the automaton)."""
        out: dict[int, set[int]] = {}
        for s, nxt in self.transitions.items():
            out.setdefault(self.emit[s], set()).update(self.emit[t] for t, p in nxt if p > 0)
        return out


def hdfs_like_model() -> SyntheticLogModel:
    """Default 29-key block life-cycle automaton (keys chosen to echo HDFS key ids)."""
    emit: list[int] = []
    trans: dict[int, list[tuple[int, float]]] = {}

    def state(key):
        emit.append(key)
        return len(emit) - 1

    def link(a, *pairs):
        trans[a] = list(pairs)

    alloc = state(22)
    recv = [state(5) for _ in range(3)]
    link(alloc, (recv[0], 1.0))
    link(recv[0], (recv[1], 1.0))
    link(recv[1], (recv[2], 1.0))
    # three responder/ack pairs; within a pair the order may flip
    ends = [recv[2]]
    for _ in range(3):
        a11, a9 = state(11), state(9)
        b9, b11 = state(9), state(11)
        for e in ends:
            link(e, (a11, 0.75), (b9, 0.25))
        link(a11, (a9, 1.0))
        link(b9, (b11, 1.0))
        ends = [a9, b11]
    stored = [state(26) for _ in range(3)]
    for e in ends:
        link(e, (stored[0], 1.0))
    link(stored[0], (stored[1], 1.0))
    link(stored[1], (stored[2], 1.0))
    prev = stored[2]
    close = state(28)
    delete = [state(21) for _ in range(3)]
    deleted = [state(23) for _ in range(3)]
    repl_ask, repl_sent, repl_recv = state(3), state(4), state(2)
    verify = state(7)
    link(prev, (close, 0.6), (delete[0], 0.25), (repl_ask, 0.15))
    link(delete[0], (delete[1], 1.0))
    link(delete[1], (delete[2], 1.0))
    link(delete[2], (deleted[0], 1.0))
    link(deleted[0], (deleted[1], 1.0))
    link(deleted[1], (deleted[2], 1.0))
    link(deleted[2], (close, 1.0))
    link(repl_ask, (repl_sent, 1.0))
    link(repl_sent, (repl_recv, 1.0))
    link(repl_recv, (close, 0.6), (verify, 0.4))
    link(verify, (close, 1.0))
    return SyntheticLogModel(
        vocab_size=29,
        emit=tuple(emit),
        start=alloc,
        transitions={k: tuple(v) for k, v in trans.items()},
        final=frozenset({close}),
        fault_keys=(6, 13, 17, 18, 20),
    )


@dataclass(frozen=True)
class SequenceCorpus:
    sessions: tuple[tuple[int, ...], ...]
    labels: np.ndarray
    vocab_size: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.sessions) != len(self.labels):
            raise ValueError("sessions and labels must align")
        for s in self.sessions:
            if any(not 0 <= k < self.vocab_size for k in s):
                raise ValueError("token outside the vocabulary")

    def __len__(self) -> int:
        return len(self.sessions)

    def subset(self, idx) -> SequenceCorpus:
        idx = np.asarray(idx, dtype=np.int64)
        meta = dict(self.meta)
        if "anomaly_kinds" in meta:
            meta["anomaly_kinds"] = [meta["anomaly_kinds"][i] for i in idx]
        return SequenceCorpus(tuple(self.sessions[i] for i in idx), self.labels[idx], self.vocab_size, meta)


def corrupt(
    model: SyntheticLogModel,
    seq: list[int],
    kind: str,
    rng: np.random.Generator,
    at: int | None = None,
    key: int | None = None,
) -> list[int]:
    """One anomalous variant of a normal session.

    ``at`` pins the position and ``key`` the inserted fault key; otherwise both
    are drawn from ``rng``. Positions are clamped so the close key stays last.
    """
    seq = list(seq)
    n = len(seq)
    if n < (2 if kind == "insertion" else 3):
        raise GenerationError(f"session of length {n} is too short for a {kind} anomaly")
    if kind == "swap":
        i = int(rng.integers(0, n - 2)) if at is None else min(at, n - 3)
        seq[i], seq[i + 1] = seq[i + 1], seq[i]
    elif kind == "insertion":
        pool = model.fault_keys or tuple(range(model.vocab_size))
        i = int(rng.integers(1, n)) if at is None else min(max(at, 1), n - 1)
        seq.insert(i, int(pool[rng.integers(0, len(pool))]) if key is None else key)
    elif kind == "truncation":
        i = int(rng.integers(1, n - 1)) if at is None else min(max(at, 1), n - 2)
        seq = seq[:i] + [seq[-1]]
    else:
        raise ValueError(f"unknown anomaly kind {kind!r}")
    return seq


@dataclass(frozen=True)
class FaultPattern:
    """A recurring anomaly: one corruption kind at a fixed position (and key)."""

    kind: str
    at: int
    key: int | None = None


def draw_patterns(
    model: SyntheticLogModel, n: int, rng: np.random.Generator, kinds: tuple[str, ...] = ANOMALY_KINDS, probes: int = 20
) -> list[FaultPattern]:
    """``n`` distinct patterns, each rejected by the automaton on most probe sessions."""
    bases = [model.sample(rng) for _ in range(probes)]
    shortest = min(len(b) for b in bases)
    if shortest < 4:
        raise GenerationError("sessions are too short to place recurring fault patterns")
    pool = model.fault_keys or tuple(range(model.vocab_size))
    out: list[FaultPattern] = []
    for _ in range(1000 * max(n, 1)):
        if len(out) == n:
            return out
        kind = kinds[int(rng.integers(0, len(kinds)))]
        at = int(rng.integers(1, shortest - 2))
        pat = FaultPattern(kind, at, int(pool[rng.integers(0, len(pool))]) if kind == "insertion" else None)
        rejected = sum(not model.accepts(corrupt(model, b, kind, rng, pat.at, pat.key)) for b in bases)
        if pat not in out and rejected * 2 > probes:
            out.append(pat)
    raise GenerationError(f"could only find {len(out)} of {n} distinct fault patterns")


def gen_sessions(
    model: SyntheticLogModel,
    n_normal: int,
    n_abnormal: int,
    seed: int,
    kinds: tuple[str, ...] = ANOMALY_KINDS,
    max_tries: int = 1000,
    n_patterns: int | None = None,
) -> SequenceCorpus:
    """``n_normal`` automaton sessions followed by ``n_abnormal`` corrupted ones.

    With ``n_patterns`` every abnormal session repeats one of that many fault
    patterns (real failures recur at the same code points); otherwise each
    corruption draws its own position. Abnormal sessions are always rejected
    by the automaton.
    """
    model.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 53]))
    sessions = [tuple(model.sample(rng)) for _ in range(n_normal)]
    patterns = draw_patterns(model, n_patterns, rng, kinds) if n_patterns else None
    kinds_used = []
    for _ in range(n_abnormal):
        for _ in range(max_tries):
            base = model.sample(rng)
            try:
                if patterns:
                    pat = patterns[int(rng.integers(0, len(patterns)))]
                    kind, bad = pat.kind, corrupt(model, base, pat.kind, rng, pat.at, pat.key)
                else:
                    kind = kinds[int(rng.integers(0, len(kinds)))]
                    bad = corrupt(model, base, kind, rng)
            except GenerationError:
                continue
            if not model.accepts(bad):
                sessions.append(tuple(bad))
                kinds_used.append(kind)
                break
        else:
            raise GenerationError("could not produce a session the automaton rejects")
    labels = np.array([NORMAL] * n_normal + [ABNORMAL] * n_abnormal, dtype=np.int8)
    meta = {"seed": seed, "kinds": list(kinds), "anomaly_kinds": [""] * n_normal + kinds_used}
    if patterns:
        meta["patterns"] = [[p.kind, p.at, p.key] for p in patterns]
    return SequenceCorpus(tuple(sessions), labels, model.vocab_size, meta)


def window_sequences(corpus_or_sessions, h: int, pad: str = "short", start_token: int | None = None):
    """Sliding ``(history, next_key)`` pairs.

    ``pad`` is ``"none"`` (only full windows), ``"short"`` (sessions shorter
    than h + 1 are left-padded to h + 1) or ``"full"`` (every session gets h
    leading start tokens, so each key is predicted once). Returns
    ``(histories, targets, session_index)``.
    """
    if h < 1:
        raise ValueError("history length must be >= 1")
    if pad not in ("none", "short", "full"):
        raise ValueError(f"unknown padding mode {pad!r}")
    if isinstance(corpus_or_sessions, SequenceCorpus):
        sessions, vocab = corpus_or_sessions.sessions, corpus_or_sessions.vocab_size
    else:
        sessions = [tuple(s) for s in corpus_or_sessions]
        vocab = max((max(s) for s in sessions if s), default=0) + 1
    start = vocab if start_token is None else start_token
    hist, tgt, owner = [], [], []
    for si, s in enumerate(sessions):
        s = list(s)
        if pad == "full":
            s = [start] * h + s
        elif pad == "short" and 0 < len(s) < h + 1:
            s = [start] * (h + 1 - len(s)) + s
        for i in range(len(s) - h):
            hist.append(s[i : i + h])
            tgt.append(s[i + h])
            owner.append(si)
    return (
        np.array(hist, dtype=np.int64).reshape(-1, h),
        np.array(tgt, dtype=np.int64),
        np.array(owner, dtype=np.int64),
    )


def load_sequences(path, labels_path=None, vocab_size: int | None = None) -> SequenceCorpus:
    """One space-separated session per line; optional label file with 0/1 per line."""
    sessions = tuple(tuple(int(t) for t in line.split()) for line in Path(path).read_text().splitlines() if line.strip())
    if labels_path is not None:
        labels = np.array([int(v) for v in Path(labels_path).read_text().split()], dtype=np.int8)
        if len(labels) != len(sessions):
            raise ValueError(f"{len(labels)} labels for {len(sessions)} sessions")
    else:
        labels = np.zeros(len(sessions), dtype=np.int8)
    vocab = vocab_size or (max((max(s) for s in sessions if s), default=0) + 1)
    return SequenceCorpus(sessions, labels, vocab, {"source": str(path)})


def write_sequences(corpus: SequenceCorpus, path, labels_path=None) -> None:
    Path(path).write_text("".join(" ".join(map(str, s)) + "\n" for s in corpus.sessions))
    if labels_path is not None:
        Path(labels_path).write_text("".join(f"{int(v)}\n" for v in corpus.labels))
