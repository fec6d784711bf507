"""Synthetic reviews with language shift and a rating/domain confound.

Every record mixes three token families:

* sentiment tokens ``<lang>_s<k>``: concept ``k`` belongs to one rating class;
  the surface form is namespaced by language, so the same concept looks
  different in each language;
* domain tokens ``<domain>_d<k>``: the domain vocabulary is split into one
  group per rating class. With probability ``|rho|`` the group is tied to the
  rating (same class for ``rho > 0``, mirrored class 1<->5, 2<->4 for
  ``rho < 0``), otherwise it is uniform. Train/valid use ``rho_train``,
  test uses ``rho_test``;
* noise tokens ``<lang>_w<k>``, uniform over the language vocabulary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Dataset, Domain, Language, Review, Split, VALID_RATINGS

_MIRROR = {0: 3, 1: 2, 2: 1, 3: 0}


@dataclass
class GenConfig:
    seed: int = 42
    per_cell: int = 500
    sentiment_vocab: int = 200
    language_vocab: int = 1000
    domain_vocab: int = 80
    rho_train: float = 0.9
    rho_test: float = -0.9
    mean_length: dict[str, float] = field(default_factory=lambda: {"it": 37.0, "ro": 89.0})
    length_dispersion: float = 1.0
    max_length: int = 512
    sentiment_rate: float = 0.15
    sentiment_purity: float = 0.6
    domain_rate: float = 0.15
    title_prob: float = 0.55

    def validate(self) -> None:
        sizes = {"per_cell": self.per_cell, "sentiment_vocab": self.sentiment_vocab,
                 "language_vocab": self.language_vocab, "domain_vocab": self.domain_vocab,
                 "max_length": self.max_length}
        for name, v in sizes.items():
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        for name in ("sentiment_vocab", "domain_vocab"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be at least 4 (one group per rating class)")
        for name in ("rho_train", "rho_test"):
            if abs(getattr(self, name)) > 1:
                raise ValueError(f"|{name}| must be <= 1")
        for name in ("sentiment_rate", "domain_rate", "sentiment_purity", "title_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.sentiment_rate + self.domain_rate > 1:
            raise ValueError("sentiment_rate + domain_rate must not exceed 1")
        if self.length_dispersion <= 0:
            raise ValueError("length_dispersion must be positive")
        for lang in Language:
            if self.mean_length.get(lang.value, 0) < 1:
                raise ValueError(f"mean_length[{lang.value!r}] must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _draw_length(rng: np.random.Generator, mean: float, dispersion: float, cap: int) -> int:
    # 1 + gamma-Poisson (negative binomial); dispersion 1 gives a geometric law.
    extra = mean - 1.0
    if extra <= 0:
        return 1
    lam = rng.gamma(dispersion, extra / dispersion)
    return int(min(cap, 1 + rng.poisson(lam)))


def _tokens(rng: np.random.Generator, cfg: GenConfig, n: int, lang: str, domain: str,
            cls: int, rho: float) -> list[str]:
    kinds = rng.choice(3, size=n, p=[cfg.sentiment_rate, cfg.domain_rate,
                                     1.0 - cfg.sentiment_rate - cfg.domain_rate])
    u = rng.random(n)
    any_group = rng.integers(4, size=n)
    slot = rng.random(n)
    noise = rng.integers(cfg.language_vocab, size=n)

    tied = cls if rho >= 0 else _MIRROR[cls]
    sent_group = np.where(u < cfg.sentiment_purity, cls, any_group)
    dom_group = np.where(u < abs(rho), tied, any_group)
    out = []
    for i, kind in enumerate(kinds):
        if kind == 0:
            out.append(f"{lang}_s{_pick(cfg.sentiment_vocab, sent_group[i], slot[i])}")
        elif kind == 1:
            out.append(f"{domain}_d{_pick(cfg.domain_vocab, dom_group[i], slot[i])}")
        else:
            out.append(f"{lang}_w{noise[i]}")
    return out


def _pick(vocab: int, group: int, u: float) -> int:
    # members of a group are group, group + 4, group + 8, ... below vocab
    size = len(range(group, vocab, 4))
    return int(group + 4 * int(u * size))


def generate(cfg: GenConfig) -> Dataset:
    """Balanced design: ``per_cell`` records for every (split, language, domain).

    Ratings cycle through 1, 2, 4, 5 within each cell and the cell is then
    shuffled, so each cell is exactly balanced when ``per_cell`` is a multiple
    of four. Each cell draws from its own child seed.
    """
    cfg.validate()
    cells = [(s, lang, d) for s in Split for lang in Language for d in Domain]
    children = np.random.SeedSequence(cfg.seed).spawn(len(cells))
    records: list[Review] = []
    for (split, lang, domain), child in zip(cells, children):
        rng = np.random.default_rng(child)
        rho = cfg.rho_test if split is Split.TEST else cfg.rho_train
        classes = [i % 4 for i in range(cfg.per_cell)]
        rng.shuffle(classes)
        for cls in classes:
            n = _draw_length(rng, cfg.mean_length[lang.value], cfg.length_dispersion, cfg.max_length)
            text = " ".join(_tokens(rng, cfg, n, lang.value, domain.value, cls, rho))
            title = ""
            if rng.random() < cfg.title_prob:
                title = " ".join(_tokens(rng, cfg, int(rng.integers(1, 5)), lang.value, domain.value, cls, rho))
            records.append(Review(title, text, VALID_RATINGS[cls], lang, domain, split))
    return Dataset(records, f"datagen(seed={cfg.seed})")
