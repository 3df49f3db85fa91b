"""Datasets, domain splits and N-way K-shot multi-label episode sampling."""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import describe_label, tokenize
from .exceptions import CatalogError, ContractError, DataParseError, SamplingError

# Table 1 of the TourSG statistics: domain -> (classes, instances)
TOURSG_COUNTS = {
    "Itinerary": (15, 397),
    "Accommodation": (17, 1839),
    "Attraction": (18, 6162),
    "Food": (18, 2154),
    "Transportation": (17, 2493),
    "Shopping": (16, 1278),
}
TOURSG_ABBREVIATIONS = {"It": "Itinerary", "Ac": "Accommodation", "At": "Attraction",
                        "Fo": "Food", "Tr": "Transportation", "Sh": "Shopping"}


@dataclass(frozen=True)
class LabeledUtterance:
    text: str
    labels: tuple[str, ...]
    domain: str
    uid: int = 0
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.tokens:
            object.__setattr__(self, "tokens", tuple(tokenize(self.text)))
        if not self.tokens:
            raise ContractError(f"utterance {self.uid} has no tokens: {self.text!r}")
        if not self.labels:
            raise ContractError(f"utterance {self.uid} has no labels")

    def to_record(self) -> dict:
        return {"text": self.text, "labels": list(self.labels), "domain": self.domain}


@dataclass
class Dataset:
    utterances: list[LabeledUtterance]
    catalog: dict[str, str]
    domains: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.domains:
            self.domains = sorted({u.domain for u in self.utterances})
        for u in self.utterances:
            missing = [lab for lab in u.labels if lab not in self.catalog]
            if missing:
                raise CatalogError(f"label {missing[0]!r} of utterance {u.uid} is not in the catalog")
        present = Counter(u.domain for u in self.utterances)
        empty = [d for d in self.domains if not present[d]]
        if empty:
            raise ContractError(f"domain {empty[0]!r} has no utterances")
        self._desc_tokens = {lab: tuple(tokenize(desc)) or (lab,) for lab, desc in self.catalog.items()}

    def __len__(self) -> int:
        return len(self.utterances)

    def description_tokens(self, label: str) -> tuple[str, ...]:
        return self._desc_tokens[label]

    def in_domains(self, domains: Iterable[str]) -> list[LabeledUtterance]:
        domains = set(domains)
        unknown = domains - set(self.domains)
        if unknown:
            raise ContractError(f"unknown domain(s) {sorted(unknown)}")
        return [u for u in self.utterances if u.domain in domains]

    def report(self) -> dict[str, dict[str, int]]:
        """Per-domain class and instance counts."""
        out = {}
        for d in self.domains:
            items = [u for u in self.utterances if u.domain == d]
            out[d] = {"classes": len({lab for u in items for lab in u.labels}), "instances": len(items)}
        return out

    def all_tokens(self) -> list[tuple[str, ...]]:
        return [u.tokens for u in self.utterances] + list(self._desc_tokens.values())

    def save(self, path, catalog_path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for u in self.utterances:
                fh.write(json.dumps(u.to_record(), sort_keys=True) + "\n")
        Path(catalog_path).write_text(json.dumps(self.catalog, sort_keys=True, indent=1) + "\n",
                                      encoding="utf-8")


def load_dataset(path, catalog_path=None) -> Dataset:
    """Read a JSON-lines utterance file and its label catalog.

    Without a catalog, descriptions are derived from the label names.
    """
    utterances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text, labels, domain = rec["text"], rec["labels"], rec["domain"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataParseError(f"{path}:{lineno}: malformed record ({exc})") from None
            if not isinstance(text, str) or not isinstance(domain, str) \
                    or not isinstance(labels, list) or not labels \
                    or not all(isinstance(lab, str) for lab in labels):
                raise DataParseError(f"{path}:{lineno}: expected text, nonempty labels and domain")
            try:
                utterances.append(LabeledUtterance(text, tuple(dict.fromkeys(labels)), domain,
                                                   uid=len(utterances)))
            except ContractError as exc:
                raise DataParseError(f"{path}:{lineno}: {exc}") from None
    if catalog_path is None:
        catalog = {lab: describe_label(lab) for u in utterances for lab in u.labels}
    else:
        try:
            catalog = json.loads(Path(catalog_path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataParseError(f"{catalog_path}: {exc}") from None
        if not isinstance(catalog, dict) or not all(isinstance(v, str) for v in catalog.values()):
            raise DataParseError(f"{catalog_path}: catalog must map labels to description strings")
    return Dataset(utterances, dict(sorted(catalog.items())))


def check_toursg_counts(report: dict[str, dict[str, int]]) -> dict[str, bool]:
    """Match a loader report against the published TourSG statistics."""
    result = {}
    for name, counts in report.items():
        full = TOURSG_ABBREVIATIONS.get(name, name)
        if full in TOURSG_COUNTS:
            result[full] = (counts["classes"], counts["instances"]) == TOURSG_COUNTS[full]
    return result


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def default_domain_sizes(n_classes: int) -> tuple[int, ...]:
    held = n_classes // 4
    return (n_classes - 2 * held, held, held)


def generate_synthetic(n_classes: int = 20, vocab_size: int = 400, tokens_per_class: int = 2,
                       multi_label_rate: float = 0.4, n_instances: int = 4000,
                       domain_sizes: Sequence[int] | None = None, seed: int = 0,
                       length: tuple[int, int] = (8, 12), noise_rate: float = 0.1) -> Dataset:
    """Desk-scale corpus with class signature tokens over a shared noise pool.

    Each class owns a disjoint pool of signature tokens; the rest of the
    vocabulary is noise shared by all classes.  A multi-label utterance
    joins segments of two classes from the same domain and carries both
    labels.  Class descriptions are two of the class's signature tokens.
    """
    if n_classes < 4:
        raise ContractError(f"need at least 4 classes, got {n_classes}")
    if vocab_size < 2 * n_classes:
        raise ContractError(f"vocab size {vocab_size} below twice the class count")
    if tokens_per_class < 2 or n_classes * tokens_per_class >= vocab_size:
        raise ContractError(f"{n_classes} pools of {tokens_per_class} tokens leave no noise pool "
                            f"in a vocabulary of {vocab_size}")
    if not 0.0 <= multi_label_rate <= 1.0 or not 0.0 <= noise_rate < 1.0:
        raise ContractError("multi-label rate and noise rate must be probabilities")
    if n_instances < n_classes:
        raise ContractError("need at least one instance per class")
    lo, hi = length
    if not 2 <= lo <= hi:
        raise ContractError(f"bad utterance length range {length}")
    domain_sizes = tuple(default_domain_sizes(n_classes) if domain_sizes is None else domain_sizes)
    if sum(domain_sizes) != n_classes or min(domain_sizes) < 1:
        raise ContractError(f"domain sizes {domain_sizes} must partition {n_classes} classes")

    rng = np.random.default_rng(seed)
    width = len(str(vocab_size - 1))
    words = [f"t{i:0{width}d}" for i in range(vocab_size)]
    order = rng.permutation(vocab_size)
    pools = [[words[j] for j in order[k * tokens_per_class:(k + 1) * tokens_per_class]]
             for k in range(n_classes)]
    noise = [words[j] for j in order[n_classes * tokens_per_class:]]
    names = ["_".join(pool[:2]) for pool in pools]
    domain_of = []
    for d, size in enumerate(domain_sizes):
        domain_of += [f"d{d}"] * size
    members = defaultdict(list)
    for k, d in enumerate(domain_of):
        members[d].append(k)

    def segment(k: int, n: int) -> list[str]:
        toks = []
        for _ in range(n):
            src = noise if rng.random() < noise_rate else pools[k]
            toks.append(src[rng.integers(len(src))])
        return toks

    primaries = np.concatenate([np.arange(n_classes),
                                rng.integers(0, n_classes, n_instances - n_classes)])
    rng.shuffle(primaries)
    utterances = []
    for uid, k in enumerate(int(x) for x in primaries):
        n = int(rng.integers(lo, hi + 1))
        peers = [c for c in members[domain_of[k]] if c != k]
        if peers and rng.random() < multi_label_rate:
            other = peers[rng.integers(len(peers))]
            cut = max(1, n // 2)
            toks = segment(k, cut) + segment(other, max(1, n - cut))
            labels = (names[k], names[other])
        else:
            toks = segment(k, n)
            labels = (names[k],)
        utterances.append(LabeledUtterance(" ".join(toks), labels, domain_of[k], uid, tuple(toks)))
    catalog = {name: describe_label(name) for name in sorted(names)}
    return Dataset(utterances, catalog, sorted(members))


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        groups = [set(self.train), set(self.val), set(self.test)]
        if not all(groups):
            raise ContractError("train, validation and test domains must all be nonempty")
        if groups[0] & groups[1] or groups[0] & groups[2] or groups[1] & groups[2]:
            raise ContractError("train, validation and test domains overlap")


def split_domains(domains: Sequence[str], val: Sequence[str], test: Sequence[str]) -> DomainSplit:
    """Hold out validation and test domains; train on everything else."""
    missing = (set(val) | set(test)) - set(domains)
    if missing:
        raise ContractError(f"unknown domain(s) {sorted(missing)}")
    train = tuple(d for d in domains if d not in set(val) | set(test))
    return DomainSplit(train, tuple(val), tuple(test))


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 16

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1:
            raise ContractError(f"invalid episode spec N={self.n_way}, K={self.k_shot}, T={self.n_query}")


@dataclass
class EpisodeItem:
    uid: int
    tokens: tuple[str, ...]
    labels: np.ndarray  # binary over the episode's classes
    sampled_class: int = -1  # support only

    def to_dict(self, classes: Sequence[str]) -> dict:
        out = {"uid": self.uid, "text": " ".join(self.tokens),
               "labels": [c for c, y in zip(classes, self.labels) if y]}
        if self.sampled_class >= 0:
            out["sampled_class"] = classes[self.sampled_class]
        return out


@dataclass
class Episode:
    classes: list[str]
    descriptions: list[tuple[str, ...]]
    support: list[EpisodeItem]
    query: list[EpisodeItem]

    @property
    def n_way(self) -> int:
        return len(self.classes)

    @property
    def support_labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.support])

    @property
    def query_labels(self) -> np.ndarray:
        return np.stack([q.labels for q in self.query])

    @property
    def sampled_classes(self) -> np.ndarray:
        return np.array([s.sampled_class for s in self.support], dtype=np.int64)

    def permuted(self, support_order=None, query_order=None) -> "Episode":
        sup = self.support if support_order is None else [self.support[i] for i in support_order]
        qry = self.query if query_order is None else [self.query[i] for i in query_order]
        return Episode(self.classes, self.descriptions, sup, qry)

    def to_dict(self) -> dict:
        return {"classes": self.classes,
                "descriptions": [" ".join(d) for d in self.descriptions],
                "support": [s.to_dict(self.classes) for s in self.support],
                "query": [q.to_dict(self.classes) for q in self.query]}


def _restrict(u: LabeledUtterance, index: dict[str, int], n: int) -> np.ndarray:
    y = np.zeros(n, dtype=np.int8)
    for lab in u.labels:
        k = index.get(lab)
        if k is not None:
            y[k] = 1
    return y


def sample_episode(dataset: Dataset, domains: Sequence[str], spec: EpisodeSpec,
                   rng: np.random.Generator) -> Episode:
    """Draw one episode by greedy minimum-inclusion support sampling.

    N classes are chosen uniformly among those with at least K+1 instances.
    The class furthest below K support occurrences gets a random unused
    instance containing it until every class has K; multi-label supports
    count for every episode class they carry.  T queries are then drawn
    from the remaining instances that carry an episode class.
    """
    pool = dataset.in_domains(domains)
    freq = Counter(lab for u in pool for lab in u.labels)
    eligible = sorted(c for c, n in freq.items() if n >= spec.k_shot + 1)
    if len(eligible) < spec.n_way:
        raise SamplingError(f"domains {list(domains)} have {len(eligible)} classes with at least "
                            f"{spec.k_shot + 1} instances; {spec.n_way} needed")
    picked = rng.choice(len(eligible), size=spec.n_way, replace=False)
    classes = [eligible[i] for i in picked]
    index = {c: k for k, c in enumerate(classes)}
    restricted = [(u, _restrict(u, index, spec.n_way)) for u in pool]
    restricted = [(u, y) for u, y in restricted if y.any()]

    used: set[int] = set()
    counts = np.zeros(spec.n_way, dtype=np.int64)
    support = []
    while counts.min() < spec.k_shot:
        k = int(np.argmin(counts))
        candidates = [(u, y) for u, y in restricted if y[k] and u.uid not in used]
        if not candidates:
            raise SamplingError(f"class {classes[k]!r} has too few instances for {spec.k_shot} shots")
        u, y = candidates[rng.integers(len(candidates))]
        used.add(u.uid)
        counts += y
        support.append(EpisodeItem(u.uid, u.tokens, y, k))

    remaining = [(u, y) for u, y in restricted if u.uid not in used]
    if len(remaining) < spec.n_query:
        raise SamplingError(f"only {len(remaining)} instances left for {spec.n_query} queries")
    chosen = rng.choice(len(remaining), size=spec.n_query, replace=False)
    query = [EpisodeItem(remaining[i][0].uid, remaining[i][0].tokens, remaining[i][1])
             for i in chosen]
    return Episode(classes, [dataset.description_tokens(c) for c in classes], support, query)


class EpisodeSampler:
    """Seeded stream of episodes over a fixed set of domains."""

    def __init__(self, dataset: Dataset, domains: Sequence[str], spec: EpisodeSpec, seed=0):
        self.dataset = dataset
        self.domains = tuple(domains)
        self.spec = spec
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def sample(self) -> Episode:
        return sample_episode(self.dataset, self.domains, self.spec, self.rng)

    def __iter__(self):
        while True:
            yield self.sample()

    def take(self, n: int) -> list[Episode]:
        return [self.sample() for _ in range(n)]
