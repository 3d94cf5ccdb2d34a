"""
Synthetic tasks
Deterministic corpora standing in for pretraining data and downstream
datasets. The last three vocabulary ids are reserved: OP, SEP and BOS.
Task symbols occupy the ids below them.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ConfigError, MissingArtifactError, VocabularyError
from core.models import TaskKind, TaskSpec

logger = logging.getLogger(__name__)

DEFAULT_EXAMPLES = 2000
_KIND_INDEX = {kind: index for index, kind in enumerate(TaskKind)}
# transition table of the char-level language, shared by every corpus
_LANGUAGE_SEED = 7919
_BRANCHING = 3


@dataclass(frozen=True)
class Example:
    """Token sequence; positions >= answer_start are the answer region."""
    tokens: Tuple[int, ...]
    answer_start: int
    kind: TaskKind

    @property
    def answer(self) -> Tuple[int, ...]:
        return self.tokens[self.answer_start:]


@dataclass
class TaskSplit:
    train: List[Example]
    test: List[Example]


def specials(vocab_size: int) -> Tuple[int, int, int]:
    """(OP, SEP, BOS)"""
    return vocab_size - 3, vocab_size - 2, vocab_size - 1


def symbol_count(spec: TaskSpec) -> int:
    return spec.modulus if spec.kind == TaskKind.MOD_ADD else spec.alphabet


def _check_vocabulary(spec: TaskSpec) -> None:
    if symbol_count(spec) > spec.vocab_size - 3:
        raise VocabularyError(
            f"{spec.kind.value} needs {symbol_count(spec)} symbols + 3 specials, vocab is {spec.vocab_size}"
        )


# ========== Per-kind generators ==========

def _mod_add(spec: TaskSpec, rng: np.random.Generator) -> List[Example]:
    op, sep, bos = specials(spec.vocab_size)
    m = spec.modulus
    pairs = [(a, b) for a in range(m) for b in range(m)]
    if spec.num_examples is not None and spec.num_examples < len(pairs):
        chosen = rng.choice(len(pairs), size=spec.num_examples, replace=False)
        pairs = [pairs[i] for i in sorted(chosen)]
    return [Example((bos, a, op, b, sep, (a + b) % m), 5, TaskKind.MOD_ADD) for a, b in pairs]


def _sequences(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    count = spec.num_examples or DEFAULT_EXAMPLES
    return rng.integers(0, spec.alphabet, size=(count, spec.length))


def _copy(spec: TaskSpec, rng: np.random.Generator) -> List[Example]:
    _, sep, bos = specials(spec.vocab_size)
    out = []
    for row in _sequences(spec, rng):
        xs = tuple(int(v) for v in row)
        out.append(Example((bos, *xs, sep, *xs), len(xs) + 2, TaskKind.COPY))
    return out


def _reverse(spec: TaskSpec, rng: np.random.Generator) -> List[Example]:
    op, sep, bos = specials(spec.vocab_size)
    out = []
    for row in _sequences(spec, rng):
        xs = tuple(int(v) for v in row)
        out.append(Example((bos, *xs, op, sep, *xs[::-1]), len(xs) + 3, TaskKind.REVERSE))
    return out


def _sort(spec: TaskSpec, rng: np.random.Generator) -> List[Example]:
    op, sep, bos = specials(spec.vocab_size)
    out = []
    for row in _sequences(spec, rng):
        xs = tuple(int(v) for v in row)
        out.append(Example((bos, *xs, op, op, sep, *sorted(xs)), len(xs) + 4, TaskKind.SORT))
    return out


def language_table(alphabet: int) -> Tuple[np.ndarray, np.ndarray]:
    """Each symbol moves to one of a few successors: (successors, probabilities)."""
    rng = np.random.default_rng([_LANGUAGE_SEED, alphabet])
    successors = np.stack([rng.choice(alphabet, size=_BRANCHING, replace=False) for _ in range(alphabet)])
    probs = rng.dirichlet(np.full(_BRANCHING, 2.0), size=alphabet)
    return successors, probs


def _char_lm(spec: TaskSpec, rng: np.random.Generator) -> List[Example]:
    _, _, bos = specials(spec.vocab_size)
    successors, probs = language_table(spec.alphabet)
    steps = 2 * spec.length + 1
    out = []
    for _ in range(spec.num_examples or DEFAULT_EXAMPLES):
        state = int(rng.integers(spec.alphabet))
        chain = [state]
        for _ in range(steps - 1):
            state = int(successors[state][rng.choice(_BRANCHING, p=probs[state])])
            chain.append(state)
        out.append(Example((bos, *chain), 1, TaskKind.CHAR_LM))
    return out


_GENERATORS = {
    TaskKind.MOD_ADD: _mod_add,
    TaskKind.COPY: _copy,
    TaskKind.REVERSE: _reverse,
    TaskKind.SORT: _sort,
    TaskKind.CHAR_LM: _char_lm,
}


# ========== Public operations ==========

def generate(spec: TaskSpec, seed: Optional[int] = None) -> TaskSplit:
    """
    Disjoint train/test splits, a pure function of (spec, seed).
    `seed` defaults to spec.split_seed.
    """
    _check_vocabulary(spec)
    seed = spec.split_seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, _KIND_INDEX[spec.kind]]))
    examples = list(dict.fromkeys(_GENERATORS[spec.kind](spec, rng)))
    if len(examples) < 2:
        raise ConfigError(f"{spec.kind.value} produced {len(examples)} distinct examples, need 2")

    order = rng.permutation(len(examples))
    n_test = min(max(1, int(round(len(examples) * spec.test_fraction))), len(examples) - 1)
    test = [examples[i] for i in order[:n_test]]
    train = [examples[i] for i in order[n_test:]]

    overlap = {e.tokens for e in train} & {e.tokens for e in test}
    if overlap:
        raise ConfigError(f"{spec.kind.value}: {len(overlap)} sequences in both splits")
    logger.debug(f"Generated {spec.kind.value}: {len(train)} train / {len(test)} test (seed {seed})")
    return TaskSplit(train=train, test=test)


def _allocate(weights: Sequence[float], total: int) -> List[int]:
    """Largest-remainder rounding: counts sum to total, each within one of w·total."""
    exact = np.asarray(weights, dtype=np.float64) * total
    counts = np.floor(exact).astype(int)
    remainder = total - int(counts.sum())
    for index in np.argsort(-(exact - counts), kind="stable")[:remainder]:
        counts[index] += 1
    return counts.tolist()


def corpus_mixture(specs: Sequence[TaskSpec], weights: Sequence[float], num_sequences: int, seed: int) -> List[Example]:
    """
    Interleave train splits of several task families. The stream does not
    depend on the order in which (spec, weight) pairs are given.
    """
    if not specs:
        raise ConfigError("corpus mixture needs at least one task spec")
    if len(specs) != len(weights):
        raise ConfigError(f"{len(specs)} specs but {len(weights)} weights")
    if abs(sum(weights) - 1.0) > 1e-6 or any(w < 0 for w in weights):
        raise ConfigError(f"mixture weights {list(weights)} do not form a distribution")

    pairs = sorted(zip(specs, weights), key=lambda pair: pair[0].model_dump_json())
    counts = _allocate([w for _, w in pairs], num_sequences)
    rng = np.random.default_rng(seed)

    stream: List[Example] = []
    for (spec, _), count in zip(pairs, counts):
        if count == 0:
            continue
        pool = generate(spec).train
        draws = np.concatenate([rng.permutation(len(pool)) for _ in range(-(-count // len(pool)))])[:count]
        stream.extend(pool[i] for i in draws)
    stream = [stream[i] for i in rng.permutation(len(stream))]
    logger.debug(f"Mixed {len(stream)} sequences from {len(pairs)} families: {counts}")
    return stream


def mixture_stream(mixture, vocab_size: int, seed: int) -> List[Example]:
    """corpus_mixture driven by a MixtureSpec"""
    specs = mixture.task_specs(vocab_size)
    return corpus_mixture(specs, [mixture.weights[s.kind] for s in specs], mixture.num_sequences, seed)


# ========== Line-delimited JSON dumps ==========

def dump_jsonl(examples: Iterable[Example], path: Path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            record = {"tokens": list(example.tokens), "answer_start": example.answer_start, "kind": example.kind.value}
            handle.write(json.dumps(record, sort_keys=True) + "\n")
            count += 1
    return count


def load_jsonl(path: Path) -> List[Example]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"task dump not found: {path}")
    examples = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                record = json.loads(line)
                examples.append(Example(tuple(record["tokens"]), record["answer_start"], TaskKind(record["kind"])))
    return examples
