"""Hard-fake / easy-real selection from detector confidences."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SampleSet
from .detector import score_set

CONF_DIGITS = 9


class Strategy(str, enum.Enum):
    HF_ER = "HF_ER"
    HF_ONLY = "HF_only"
    HF_HR = "HF_HR"
    ALL = "ALL"


@dataclass
class MiningConfig:
    k_hard_fake: int | None = None  # None -> 10% of the fake population
    k_easy_real: int | None = None  # None -> 10% of the real population
    strategy: Strategy = Strategy.HF_ER

    def resolve(self, n_fake: int, n_real: int) -> tuple[int, int]:
        k_f = self.k_hard_fake if self.k_hard_fake is not None else max(1, n_fake // 10)
        k_r = self.k_easy_real if self.k_easy_real is not None else max(1, n_real // 10)
        if k_f < 1 or k_r < 1:
            raise ValueError("selection sizes must be >= 1")
        if k_f > n_fake:
            raise ValueError(f"k_hard_fake={k_f} exceeds the fake population of {n_fake}")
        if k_r > n_real:
            raise ValueError(f"k_easy_real={k_r} exceeds the real population of {n_real}")
        return k_f, k_r


@dataclass
class ScoreTable:
    sample_ids: list[str]
    confidences: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.sample_ids)

    def to_text(self) -> str:
        lines = ["sample_id\tconfidence\tlabel\tdomain_id"]
        for sid, c, y, d in zip(self.sample_ids, self.confidences, self.labels, self.domain_ids):
            lines.append(f"{sid}\t{c:.{CONF_DIGITS}f}\t{int(y)}\t{int(d)}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "ScoreTable":
        rows = Path(path).read_text(encoding="utf-8").splitlines()[1:]
        parts = [r.split("\t") for r in rows if r]
        return cls(
            [p[0] for p in parts],
            np.array([float(p[1]) for p in parts]),
            np.array([int(p[2]) for p in parts], dtype=np.int64),
            np.array([int(p[3]) for p in parts], dtype=np.int64),
        )


def score_table(model, sset: SampleSet) -> ScoreTable:
    """Score every sample; confidences are rounded to the on-disk precision
    so that selections from a fresh table and a re-read one agree."""
    conf, _ = score_set(model, sset)
    return ScoreTable(sset.ids, np.round(conf, CONF_DIGITS), sset.labels, sset.domain_ids)


def _ranked(table: ScoreTable, label: int, descending: bool) -> list[str]:
    idx = [i for i in range(len(table)) if table.labels[i] == label]
    sign = -1.0 if descending else 1.0
    idx.sort(key=lambda i: (sign * table.confidences[i], table.sample_ids[i]))
    return [table.sample_ids[i] for i in idx]


def lowest_fakes(table: ScoreTable, k: int) -> list[str]:
    return _ranked(table, 1, descending=False)[:k]


def lowest_reals(table: ScoreTable, k: int) -> list[str]:
    return _ranked(table, 0, descending=False)[:k]


def highest_reals(table: ScoreTable, k: int) -> list[str]:
    return _ranked(table, 0, descending=True)[:k]


def select(table: ScoreTable, config: MiningConfig) -> tuple[list[str], list[str]]:
    """Ids of (hard fakes, easy reals): the ``k`` lowest-confidence fakes and
    the ``k`` lowest-confidence reals, ties broken by sample id."""
    n_fake = int((table.labels == 1).sum())
    k_f, k_r = config.resolve(n_fake, len(table) - n_fake)
    return lowest_fakes(table, k_f), lowest_reals(table, k_r)


def mine(model, train: SampleSet, config: MiningConfig | None = None) -> tuple[SampleSet, SampleSet]:
    """Hard-fake and easy-real subsets of ``train`` under ``model``."""
    config = config or MiningConfig()
    table = score_table(model, train)
    if set(table.labels.tolist()) != {0, 1}:
        raise ValueError("mining needs both classes in the training set")
    hf, er = select(table, config)
    return train.select_ids(hf, "S_HF"), train.select_ids(er, "S_ER")


def select_variant(table: ScoreTable, config: MiningConfig) -> list[str]:
    strategy = Strategy(config.strategy)
    if strategy is Strategy.ALL:
        return list(table.sample_ids)
    n_fake = int((table.labels == 1).sum())
    k_f, k_r = config.resolve(n_fake, len(table) - n_fake)
    hf = lowest_fakes(table, k_f)
    if strategy is Strategy.HF_ONLY:
        return hf
    if strategy is Strategy.HF_HR:
        return hf + highest_reals(table, k_r)
    return hf + lowest_reals(table, k_r)


def mine_variant(model, train: SampleSet, strategy: Strategy | str, config: MiningConfig | None = None) -> SampleSet:
    """Stage-1 training set for one selection strategy.

    ``ALL`` returns ``train`` unchanged.
    """
    config = MiningConfig(
        config.k_hard_fake if config else None,
        config.k_easy_real if config else None,
        Strategy(strategy),
    )
    if config.strategy is Strategy.ALL:
        return SampleSet(train.samples, "S_1")
    table = score_table(model, train)
    return train.select_ids(select_variant(table, config), "S_1")
