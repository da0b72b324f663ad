"""ATC codes, the 5-level drug hierarchy and DDD count vectorization.

A purchase of ``ddd`` units of a level-5 substance adds ``ddd`` to the leaf
and to each of its four ancestors, so every internal node holds the sum of
its children.  The schemes select which levels become features.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from importlib import resources

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import AtcParseError, ConfigError, DataError

log = logging.getLogger(__name__)

# prefix length of each ATC level
LEVEL_LENGTHS = (1, 3, 4, 5, 7)
# character class per position: L = letter, D = digit
_PATTERN = "LDDLLDD"

SCHEMES = {
    "atc5": (5,),
    "atc1_4": (1, 2, 3, 4),
    "atc1_5": (1, 2, 3, 4, 5),
}

# prefixes kept out of patient features (GLAs define the outcome)
DEFAULT_EXCLUDED = ("A10",)
MAIN_GROUPS = "ABCDGHJLMNPRSV"


@dataclass(frozen=True, order=True)
class AtcCode:
    code: str

    @classmethod
    def parse(cls, text: str) -> "AtcCode":
        if not isinstance(text, str):
            raise AtcParseError(text, 0, "not a string")
        s = text.strip().upper()
        for pos, kind in enumerate(_PATTERN):
            if pos >= len(s):
                raise AtcParseError(text, pos, f"too short, expected 7 characters, got {len(s)}")
            ch = s[pos]
            ok = ch.isdigit() if kind == "D" else ("A" <= ch <= "Z")
            if not ok:
                want = "digit" if kind == "D" else "letter"
                raise AtcParseError(text, pos, f"expected {want}, got {ch!r}")
        if len(s) > 7:
            raise AtcParseError(text, 7, f"too long, expected 7 characters, got {len(s)}")
        return cls(s)

    def __str__(self) -> str:
        return self.code

    def prefix(self, level: int) -> str:
        if not 1 <= level <= 5:
            raise ValueError(f"ATC level must be in 1..5, got {level}")
        return self.code[: LEVEL_LENGTHS[level - 1]]

    @property
    def level1(self): return self.code[0]
    @property
    def level2(self): return self.code[1:3]
    @property
    def level3(self): return self.code[3]
    @property
    def level4(self): return self.code[4]
    @property
    def level5(self): return self.code[5:7]


def expand(code: AtcCode | str) -> list[tuple[int, str]]:
    """Return the (level, prefix) chain from level 1 down to the leaf."""
    c = code if isinstance(code, AtcCode) else AtcCode.parse(code)
    return [(lvl, c.prefix(lvl)) for lvl in range(1, 6)]


def level_of(node: str) -> int:
    try:
        return LEVEL_LENGTHS.index(len(node)) + 1
    except ValueError:
        raise DataError(f"{node!r} is not an ATC node") from None


def _check_scheme(scheme: str) -> tuple[int, ...]:
    try:
        return SCHEMES[scheme]
    except KeyError:
        raise ConfigError(f"unknown ATC scheme {scheme!r}; choose from {sorted(SCHEMES)}") from None


class AtcHierarchy:
    """Known level-5 codes with their implied ancestors and a stable feature index.

    Features are ordered by level, then lexicographically by code, so the
    index depends only on the set of leaves.
    """

    def __init__(self, leaf_codes: Iterable[str | AtcCode] = ()):
        leaves = sorted({str(c) if isinstance(c, AtcCode) else str(AtcCode.parse(c)) for c in leaf_codes})
        self.leaves: tuple[str, ...] = tuple(leaves)
        self._leaf_pos = {c: i for i, c in enumerate(leaves)}
        self.nodes: dict[int, tuple[str, ...]] = {
            lvl: tuple(sorted({c[: LEVEL_LENGTHS[lvl - 1]] for c in leaves})) for lvl in range(1, 6)
        }
        self._cache: dict[str, sp.csr_matrix] = {}

    def __len__(self):
        return len(self.leaves)

    def __contains__(self, code) -> bool:
        return str(code) in self._leaf_pos

    def __eq__(self, other):
        return isinstance(other, AtcHierarchy) and self.leaves == other.leaves

    def __hash__(self):
        return hash(self.leaves)

    def __repr__(self):
        return f"AtcHierarchy({len(self.leaves)} leaves)"

    def leaf_index(self, code: str) -> int:
        return self._leaf_pos[code]

    def without_prefixes(self, prefixes: Sequence[str]) -> "AtcHierarchy":
        prefixes = tuple(prefixes)
        return AtcHierarchy(c for c in self.leaves if not c.startswith(prefixes))

    def feature_keys(self, scheme: str) -> list[tuple[int, str]]:
        return [(lvl, node) for lvl in _check_scheme(scheme) for node in self.nodes[lvl]]

    def feature_index(self, scheme: str) -> dict[tuple[int, str], int]:
        return {key: i for i, key in enumerate(self.feature_keys(scheme))}

    def feature_names(self, scheme: str) -> list[str]:
        return [f"atc{lvl}:{node}" for lvl, node in self.feature_keys(scheme)]

    def leaf_matrix(self, scheme: str) -> sp.csr_matrix:
        """0/1 matrix (leaves x features) mapping each leaf onto its selected ancestors."""
        if scheme not in self._cache:
            levels = _check_scheme(scheme)
            index = self.feature_index(scheme)
            rows, cols = [], []
            for i, leaf in enumerate(self.leaves):
                for lvl in levels:
                    rows.append(i)
                    cols.append(index[(lvl, leaf[: LEVEL_LENGTHS[lvl - 1]])])
            m = sp.csr_matrix(
                (np.ones(len(rows)), (rows, cols)), shape=(len(self.leaves), len(index))
            )
            self._cache[scheme] = m
        return self._cache[scheme]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["code"])
            for c in self.leaves:
                w.writerow([c])

    @classmethod
    def from_csv(cls, path) -> "AtcHierarchy":
        codes = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return cls()
            col = 0
            if "code" in header:
                col = header.index("code")
            else:
                # headerless file: the first row is data
                codes.append((1, header[0]))
            for lineno, row in enumerate(reader, start=2):
                if row:
                    codes.append((lineno, row[col]))
        out = []
        for lineno, c in codes:
            try:
                out.append(AtcCode.parse(c))
            except AtcParseError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        return cls(out)


def sample_hierarchy() -> AtcHierarchy:
    """Small bundled hierarchy that includes the metformin chain A10BA02."""
    ref = resources.files("glarisk") / "data" / "atc_sample.csv"
    with resources.as_file(ref) as path:
        return AtcHierarchy.from_csv(path)


def feature_count(hierarchy: AtcHierarchy, scheme: str) -> int:
    return sum(len(hierarchy.nodes[lvl]) for lvl in _check_scheme(scheme))


@dataclass(frozen=True)
class DrugVector:
    """Sparse feature-index -> accumulated DDD map, plus the number of dropped purchases."""

    values: dict
    dimension: int
    dropped: int = 0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        for i, v in self.values.items():
            out[i] = v
        return out

    def __add__(self, other: "DrugVector") -> "DrugVector":
        if self.dimension != other.dimension:
            raise ValueError("dimension mismatch")
        vals = dict(self.values)
        for i, v in other.values.items():
            vals[i] = vals.get(i, 0.0) + v
        return DrugVector(vals, self.dimension, self.dropped + other.dropped)


def _purchases(records) -> list[tuple[str, float]]:
    if isinstance(records, pd.DataFrame):
        drugs = records[records["kind"] == "drug"] if "kind" in records else records
        return list(zip(drugs["atc"], drugs["ddd"].astype(float)))
    out = []
    for r in records:
        payload = getattr(r, "payload", r)
        if hasattr(payload, "atc_code"):
            out.append((payload.atc_code, float(payload.ddd)))
        elif hasattr(payload, "provision_code"):
            continue
        else:
            out.append((str(payload[0]), float(payload[1])))
    return out


def _resolve(code: str, hierarchy: AtcHierarchy, unknown: str, exclude: tuple[str, ...]):
    """Leaf position of ``code``, or None when it should be skipped."""
    canon = str(AtcCode.parse(code))
    if exclude and canon.startswith(exclude):
        return None, False
    pos = hierarchy._leaf_pos.get(canon)
    if pos is None:
        if unknown == "reject":
            raise DataError(f"ATC code {canon} is not in the hierarchy")
        return None, True
    return pos, False


def vectorize_meds(records, hierarchy: AtcHierarchy, scheme: str, unknown: str = "drop",
                   exclude: Sequence[str] = ()) -> DrugVector:
    """DDD counts of one patient's purchases over the selected hierarchy levels.

    ``unknown`` is ``"drop"`` (skip and count) or ``"reject"``.  Codes under
    ``exclude`` prefixes are skipped silently.
    """
    if unknown not in ("drop", "reject"):
        raise ConfigError(f"unknown-code policy must be 'drop' or 'reject', got {unknown!r}")
    levels = _check_scheme(scheme)
    index = hierarchy.feature_index(scheme)
    exclude = tuple(exclude)
    values: dict[int, float] = {}
    dropped = 0
    for code, ddd in _purchases(records):
        if ddd < 0:
            raise DataError(f"negative DDD {ddd} for {code}")
        pos, was_unknown = _resolve(code, hierarchy, unknown, exclude)
        if pos is None:
            dropped += was_unknown
            continue
        leaf = hierarchy.leaves[pos]
        for lvl in levels:
            j = index[(lvl, leaf[: LEVEL_LENGTHS[lvl - 1]])]
            values[j] = values.get(j, 0.0) + ddd
    if dropped:
        log.debug("dropped %d purchases with unknown ATC codes", dropped)
    return DrugVector(values, len(index), dropped)


def med_matrix(drug_records: pd.DataFrame, patient_ids: Sequence[str], hierarchy: AtcHierarchy,
               scheme: str, unknown: str = "drop", exclude: Sequence[str] = ()):
    """Bulk version of :func:`vectorize_meds`: (patients x features) CSR and the drop count."""
    if unknown not in ("drop", "reject"):
        raise ConfigError(f"unknown-code policy must be 'drop' or 'reject', got {unknown!r}")
    leaf_map = hierarchy.leaf_matrix(scheme)
    row_of = {p: i for i, p in enumerate(patient_ids)}
    recs = drug_records
    if "kind" in recs:
        recs = recs[recs["kind"] == "drug"]
    recs = recs[recs["patient_id"].isin(row_of)]
    exclude = tuple(exclude)
    codes = recs["atc"].astype(str).str.strip().str.upper()
    keep = ~codes.str.startswith(exclude) if exclude else pd.Series(True, index=codes.index)
    codes = codes[keep]
    ddd = recs["ddd"].to_numpy(dtype=float)[keep.to_numpy()]
    if (ddd < 0).any():
        raise DataError("negative DDD in drug records")
    leaf_pos = codes.map(hierarchy._leaf_pos)
    missing = leaf_pos.isna().to_numpy()
    if missing.any():
        bad = codes[missing].iloc[0]
        AtcCode.parse(bad)  # malformed codes raise with position
        if unknown == "reject":
            raise DataError(f"ATC code {bad} is not in the hierarchy")
        log.debug("dropped %d purchases with unknown ATC codes", int(missing.sum()))
    rows = recs["patient_id"][keep].map(row_of).to_numpy()[~missing]
    cols = leaf_pos.to_numpy()[~missing].astype(np.int64)
    pl = sp.csr_matrix((ddd[~missing], (rows, cols)), shape=(len(patient_ids), len(hierarchy.leaves)))
    return (pl @ leaf_map).tocsr(), int(missing.sum())


def synthetic_hierarchy(level_counts: Sequence[int] = (14, 94, 267, 882, 4580), seed: int = 0) -> AtcHierarchy:
    """Random hierarchy with exactly ``level_counts[k]`` distinct nodes at level k+1.

    Each level's nodes are first given one child apiece (so no node is
    childless), the remaining children are assigned to uniformly random
    parents.  Raises ConfigError if the counts are infeasible.
    """
    counts = list(level_counts)
    if len(counts) != 5 or any(c < 1 for c in counts):
        raise ConfigError("level_counts needs five positive entries")
    caps = (26, 99, 26, 26, 99)  # children available per parent at each level
    if counts[0] > caps[0]:
        raise ConfigError(f"at most {caps[0]} level-1 groups")
    for lvl in range(1, 5):
        if not counts[lvl - 1] <= counts[lvl] <= counts[lvl - 1] * caps[lvl]:
            raise ConfigError(f"infeasible node count {counts[lvl]} at level {lvl + 1}")
    rng = np.random.default_rng(seed)
    letters = [chr(ord("A") + i) for i in range(26)]
    # the real anatomical main groups come first, other letters only when more are asked for
    pool = list(MAIN_GROUPS) + [c for c in letters if c not in MAIN_GROUPS]
    level = sorted(pool[: counts[0]])
    for lvl in range(1, 5):
        parents = level
        n_extra = counts[lvl] - len(parents)
        per = np.ones(len(parents), dtype=np.int64)
        while n_extra:
            extra = np.bincount(rng.integers(0, len(parents), n_extra), minlength=len(parents))
            want = np.minimum(per + extra, caps[lvl])
            n_extra -= int((want - per).sum())
            per = want
        children = []
        for parent, k in zip(parents, per):
            if caps[lvl] == 99:
                suffixes = [f"{i:02d}" for i in np.sort(rng.choice(99, size=k, replace=False) + 1)]
            else:
                suffixes = [letters[i] for i in np.sort(rng.choice(26, size=k, replace=False))]
            children.extend(parent + s for s in suffixes)
        level = children
    return AtcHierarchy(level)


def write_feature_manifest(hierarchy: AtcHierarchy, scheme: str, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "level", "code"])
        for i, (lvl, node) in enumerate(hierarchy.feature_keys(scheme)):
            w.writerow([i, lvl, node])


def read_feature_manifest(path) -> list[tuple[int, int, str]]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append((int(row["index"]), int(row["level"]), row["code"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest row") from exc
    return out
