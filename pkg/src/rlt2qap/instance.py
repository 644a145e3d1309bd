"""QAP instances: QAPLIB parsing, solution files, seeded generation, objective.

Facilities index rows of ``flow``, locations index rows of ``dist``. A
permutation ``assign`` places facility ``i`` at location ``assign[i]``.
Everything here is 0-based; the 1-based QAPLIB convention only appears at
the file boundary.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """Malformed instance or solution text."""


class ValidationError(ValueError):
    """Well-formed text describing an invalid object (e.g. not a permutation)."""


@dataclass(frozen=True, eq=False)
class QapInstance:
    n: int
    flow: np.ndarray
    dist: np.ndarray
    linear: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        n = self.n
        if n <= 0:
            raise ValueError(f"n must be positive, got {n}")
        flow = np.ascontiguousarray(self.flow, dtype=np.int64)
        dist = np.ascontiguousarray(self.dist, dtype=np.int64)
        linear = (np.zeros((n, n), dtype=np.int64) if self.linear is None
                  else np.ascontiguousarray(self.linear, dtype=np.int64))
        for label, m in (("flow", flow), ("dist", dist), ("linear", linear)):
            if m.shape != (n, n):
                raise ValueError(f"{label} has shape {m.shape}, expected {(n, n)}")
            m.setflags(write=False)
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "linear", linear)

    def __eq__(self, other):
        if not isinstance(other, QapInstance):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.flow, other.flow)
                and np.array_equal(self.dist, other.dist)
                and np.array_equal(self.linear, other.linear))

    __hash__ = None

    @property
    def nonnegative(self) -> bool:
        return bool((self.flow >= 0).all() and (self.dist >= 0).all()
                    and (self.linear >= 0).all())

    def transposed(self) -> "QapInstance":
        """Swap the roles of facilities and locations.

        A permutation ``p`` of the original has the same cost as ``argsort(p)``
        on the result.
        """
        return QapInstance(self.n, self.dist, self.flow, self.linear.T,
                           name=self.name)


@dataclass(frozen=True)
class Permutation:
    assign: tuple[int, ...] = field()

    def __post_init__(self):
        a = tuple(int(x) for x in self.assign)
        if sorted(a) != list(range(len(a))):
            raise ValidationError(f"not a bijection on 0..{len(a) - 1}: {a}")
        object.__setattr__(self, "assign", a)

    def __len__(self):
        return len(self.assign)

    def __getitem__(self, i):
        return self.assign[i]

    def __iter__(self):
        return iter(self.assign)

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.assign)
        for i, p in enumerate(self.assign):
            inv[p] = i
        return Permutation(inv)

    def to_qaplib(self) -> list[int]:
        return [p + 1 for p in self.assign]


def _tokens(text: str) -> list[str]:
    return text.split()


def parse_qaplib(text: str, name: str = "") -> QapInstance:
    """Parse a QAPLIB instance: ``n``, then two ``n x n`` integer matrices.

    The first matrix becomes ``flow`` and the second ``dist``.
    """
    toks = _tokens(text)
    if not toks:
        raise ParseError("empty instance text")
    try:
        n = int(toks[0])
    except ValueError:
        raise ParseError(f"token 0: expected integer n, got {toks[0]!r}") from None
    if n <= 0:
        raise ParseError(f"token 0: n must be positive, got {n}")
    need = 2 * n * n
    body = toks[1:]
    if len(body) < need:
        raise ParseError(f"token {len(toks)}: expected {need} matrix entries after n={n}, "
                         f"found {len(body)}")
    if len(body) > need:
        raise ParseError(f"token {need + 1}: {len(body) - need} unexpected trailing tokens")
    vals = []
    for off, t in enumerate(body, start=1):
        try:
            vals.append(int(t))
        except ValueError:
            raise ParseError(f"token {off}: expected integer, got {t!r}") from None
    arr = np.array(vals, dtype=np.int64)
    flow = arr[: n * n].reshape(n, n)
    dist = arr[n * n:].reshape(n, n)
    if np.any(np.diag(flow)) or np.any(np.diag(dist)):
        warnings.warn(f"instance {name or '<text>'}: nonzero diagonal in flow or dist",
                      stacklevel=2)
    return QapInstance(n, flow, dist, name=name)


def serialize_qaplib(inst: QapInstance) -> str:
    """Inverse of :func:`parse_qaplib`. The linear term is not representable."""
    if np.any(inst.linear):
        raise ValueError("QAPLIB format has no linear term")
    width = max(len(str(int(x))) for x in np.concatenate(
        [inst.flow.ravel(), inst.dist.ravel(), [0]]))
    out = [f"{inst.n}", ""]
    for m in (inst.flow, inst.dist):
        out.extend(" ".join(f"{int(x):>{width}}" for x in row) for row in m)
        out.append("")
    return "\n".join(out)


def parse_solution(text: str) -> tuple[Permutation, int]:
    """Parse a QAPLIB ``.sln`` file: ``n value`` then ``n`` 1-based locations."""
    toks = _tokens(text)
    if len(toks) < 2:
        raise ParseError("solution needs n and the objective value")
    try:
        n, value = int(toks[0]), int(toks[1])
        locs = [int(t) for t in toks[2:]]
    except ValueError as e:
        raise ParseError(f"non-integer token in solution: {e}") from None
    if n <= 0:
        raise ParseError(f"n must be positive, got {n}")
    if len(locs) != n:
        raise ParseError(f"expected {n} locations, found {len(locs)}")
    return Permutation([p - 1 for p in locs]), value


def serialize_solution(perm: Permutation, value: int) -> str:
    return f"{len(perm)} {value}\n" + " ".join(map(str, perm.to_qaplib())) + "\n"


def evaluate_objective(inst: QapInstance, perm) -> int:
    """Exact QAP objective ``sum b[i,p(i)] + sum f[i,j] d[p(i),p(j)]``."""
    p = np.asarray(perm.assign if isinstance(perm, Permutation) else perm, dtype=np.int64)
    if p.shape != (inst.n,):
        raise ValueError(f"permutation length {p.shape} does not match n={inst.n}")
    quad = int(np.einsum("ij,ij->", inst.flow, inst.dist[np.ix_(p, p)], dtype=np.int64))
    lin = int(inst.linear[np.arange(inst.n), p].sum())
    return lin + quad


def generate_instance(n: int, seed: int, max_value: int = 10) -> QapInstance:
    """Seeded random symmetric instance with zero diagonals and entries in [0, max_value]."""
    if n < 1 or max_value < 1:
        raise ValueError("need n >= 1 and max_value >= 1")
    rng = np.random.default_rng([n, seed])

    def sym():
        m = np.triu(rng.integers(0, max_value + 1, size=(n, n)), 1)
        return m + m.T

    flow = sym()
    dist = sym()
    return QapInstance(n, flow, dist, name=f"rand{n}s{seed}")


# ---- fixtures -------------------------------------------------------------

def fixture_dir() -> Path:
    return Path(str(resources.files("rlt2qap") / "data"))


def load_manifest(path: str | Path | None = None) -> dict[str, dict[str, bool]]:
    """Read the plain-text fixture manifest (``name swap grid`` per line)."""
    path = Path(path) if path else fixture_dir() / "manifest.txt"
    entries = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        flags = [bool(int(x)) for x in parts[1:]] + [False, False]
        entries[parts[0]] = {"swap": flags[0], "grid": flags[1]}
    return entries


def read_instance(path: str | Path, swap: bool = False) -> QapInstance:
    path = Path(path)
    inst = parse_qaplib(path.read_text(), name=path.stem)
    return inst.transposed() if swap else inst


def read_solution(path: str | Path, swap: bool = False) -> tuple[Permutation, int]:
    perm, value = parse_solution(Path(path).read_text())
    return (perm.inverse() if swap else perm), value


def load_fixture(name: str) -> tuple[QapInstance, Permutation | None, int | None]:
    """Load a shipped fixture and its solution, honouring the manifest swap flag."""
    swap = load_manifest().get(name, {}).get("swap", False)
    d = fixture_dir()
    inst = read_instance(d / f"{name}.dat", swap=swap)
    sln = d / f"{name}.sln"
    if sln.exists():
        perm, value = read_solution(sln, swap=swap)
        return inst, perm, value
    return inst, None, None


def grid_shape(dist: np.ndarray) -> tuple[int, int] | None:
    """Return ``(rows, cols)`` if ``dist`` is the Manhattan metric of a row-major grid."""
    n = dist.shape[0]
    for rows in range(1, n + 1):
        if n % rows:
            continue
        cols = n // rows
        idx = np.arange(n)
        r, c = idx // cols, idx % cols
        man = np.abs(r[:, None] - r[None, :]) + np.abs(c[:, None] - c[None, :])
        if np.array_equal(man, dist):
            return rows, cols
    return None
