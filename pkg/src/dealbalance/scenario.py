"""Scenario files: INI-style ``key = value`` text with sections.

    [scenario]
    algorithm = discrete          ; continuous|discrete|multi|diffusion|async|selfstab
    eps = 1                       ; continuous/diffusion stopping discrepancy
    alpha = 1/2                   ; diffusion step size
    max_rounds = 1000             ; synchronous engines
    max_steps = 1000000           ; asynchronous engines
    checks = monotonic, fairness  ; default: every check valid for the algorithm
    trace = out.csv               ; optional, relative to the scenario file
    stride = 100                  ; asynchronous trace row stride

    [graph]
    file = g.txt                  ; or: topology = path:3 | cycle:n | star:n | random:n:p:seed
    loads = explicit:9,0,4        ; uniform:max:seed | point:node:amount[:base]
    mode = discrete               ; defaults from the algorithm

    [async]
    policy = random               ; round_robin|random|adversarial
    seed = 0

    [selfstab]
    k = 3
    fault_seed = 0
    garbage = 0
    corrupt = false
"""

from __future__ import annotations

import configparser
import pathlib
from dataclasses import dataclass
from fractions import Fraction

from .async_engine import Policy
from .errors import DealBalanceError, ParseError
from .graph import (
    Cycle,
    Explicit,
    Graph,
    LoadMode,
    LoadVector,
    Path,
    PointMass,
    RandomConnected,
    Star,
    Uniform,
    generate,
    load_graph,
)

ALGORITHMS = ("continuous", "discrete", "multi", "diffusion", "async", "selfstab")
CHECK_BITS = {
    "monotonic": 1,
    "fairness": 2,
    "lemma2": 4,
    "lemma6": 8,
    "matching_degree": 16,
    "conservation": 32,
}
_COMMON = frozenset({"monotonic", "fairness", "conservation"})
COMPATIBLE_CHECKS = {
    "continuous": _COMMON | {"lemma2", "matching_degree"},
    "discrete": _COMMON | {"lemma6", "matching_degree"},
    "multi": _COMMON,
    "diffusion": _COMMON,
    "async": _COMMON,
    "selfstab": _COMMON,
}
SYNC_ALGORITHMS = ("continuous", "discrete", "multi", "diffusion")

_KNOWN_KEYS = {
    "scenario": {"algorithm", "eps", "alpha", "max_rounds", "max_steps", "checks", "trace", "stride"},
    "graph": {"file", "topology", "loads", "mode"},
    "async": {"policy", "seed"},
    "selfstab": {"k", "fault_seed", "garbage", "corrupt", "policy", "seed"},
}


@dataclass
class Scenario:
    name: str
    algorithm: str
    graph: Graph
    loads: LoadVector
    eps: Fraction = Fraction(1)
    alpha: Fraction = Fraction(1, 2)
    max_rounds: int = 10_000
    max_steps: int = 5_000_000
    checks: frozenset = frozenset()
    trace: str | None = None
    stride: int = 100
    policy: Policy = Policy.RANDOM
    seed: int = 0
    k: int = 3
    fault_seed: int = 0
    garbage: int = 0
    corrupt: bool = False

    @property
    def is_sync(self) -> bool:
        return self.algorithm in SYNC_ALGORITHMS


def _fraction(text: str, key: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise ParseError(f"{key}: not a number: {text!r}") from None


def _int(text: str, key: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ParseError(f"{key}: not an integer: {text!r}") from None


def parse_topology(spec: str):
    """``path:n``, ``cycle:n``, ``star:n`` or ``random:n:p:seed``."""
    parts = spec.strip().split(":")
    kind, args = parts[0], parts[1:]
    try:
        if kind in ("path", "cycle", "star") and len(args) == 1:
            return {"path": Path, "cycle": Cycle, "star": Star}[kind](int(args[0]))
        if kind == "random" and len(args) == 3:
            return RandomConnected(int(args[0]), float(args[1]), int(args[2]))
    except ValueError:
        pass
    raise ParseError(f"bad topology spec {spec!r}")


def parse_loads(spec: str):
    """``explicit:v1,v2,...``, ``uniform:max:seed`` or ``point:node:amount[:base]``."""
    kind, _, rest = spec.strip().partition(":")
    args = rest.split(":") if rest else []
    try:
        if kind == "explicit" and len(args) == 1:
            return Explicit(tuple(Fraction(v) if "/" in v else int(v) for v in args[0].split(",")))
        if kind == "uniform" and len(args) == 2:
            return Uniform(int(args[0]), int(args[1]))
        if kind == "point" and len(args) in (2, 3):
            base = int(args[2]) if len(args) == 3 else 0
            return PointMass(int(args[0]), int(args[1]), base)
    except (ValueError, ZeroDivisionError):
        pass
    raise ParseError(f"bad loads spec {spec!r}")


def parse_checks(text: str) -> frozenset:
    names = frozenset(c.strip() for c in text.replace(";", ",").split(",") if c.strip())
    unknown = names - set(CHECK_BITS)
    if unknown:
        raise ParseError(f"unknown checks: {', '.join(sorted(unknown))}")
    return names


def validate_checks(algorithm: str, checks: frozenset) -> None:
    bad = checks - COMPATIBLE_CHECKS[algorithm]
    if bad:
        raise ParseError(f"checks not applicable to {algorithm}: {', '.join(sorted(bad))}")


def parse_scenario(text: str, base_dir=".", name: str = "scenario") -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0]) from None
    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ParseError(f"unknown section [{section}]")
        extra = set(cp[section]) - _KNOWN_KEYS[section]
        if extra:
            raise ParseError(f"unknown keys in [{section}]: {', '.join(sorted(extra))}")
    if not cp.has_section("scenario") or not cp.has_section("graph"):
        raise ParseError("scenario needs [scenario] and [graph] sections")
    sc, gr = cp["scenario"], cp["graph"]
    algorithm = sc.get("algorithm", "").strip()
    if algorithm not in ALGORITHMS:
        raise ParseError(f"unknown algorithm {algorithm!r}")

    default_mode = "continuous" if algorithm in ("continuous", "diffusion") else "discrete"
    try:
        mode = LoadMode(gr.get("mode", default_mode).strip())
    except ValueError:
        raise ParseError(f"bad mode {gr.get('mode')!r}") from None
    if algorithm in ("async", "selfstab") and mode is not LoadMode.DISCRETE:
        raise ParseError(f"{algorithm} runs on discrete loads")

    try:
        if "file" in gr:
            if "topology" in gr or "loads" in gr:
                raise ParseError("[graph] takes either file or topology/loads, not both")
            graph, loads = load_graph(pathlib.Path(base_dir) / gr["file"].strip(), mode)
        else:
            if "topology" not in gr or "loads" not in gr:
                raise ParseError("[graph] needs file, or topology and loads")
            graph, loads = generate(parse_topology(gr["topology"]), parse_loads(gr["loads"]), mode)
    except ParseError:
        raise
    except (DealBalanceError, OSError) as exc:
        raise ParseError(f"graph: {exc}") from None

    checks = parse_checks(sc["checks"]) if "checks" in sc else COMPATIBLE_CHECKS[algorithm]
    validate_checks(algorithm, checks)

    scen = Scenario(name=name, algorithm=algorithm, graph=graph, loads=loads, checks=frozenset(checks))
    if "eps" in sc:
        scen.eps = _fraction(sc["eps"], "eps")
        if scen.eps <= 0:
            raise ParseError("eps must be > 0")
    if "alpha" in sc:
        scen.alpha = _fraction(sc["alpha"], "alpha")
        if not 0 < scen.alpha <= 1:
            raise ParseError("alpha must lie in (0, 1]")
    for key in ("max_rounds", "max_steps", "stride"):
        if key in sc:
            value = _int(sc[key], key)
            if value < 1:
                raise ParseError(f"{key} must be >= 1")
            setattr(scen, key, value)
    if "trace" in sc:
        scen.trace = str(pathlib.Path(base_dir) / sc["trace"].strip())

    section = "async" if algorithm == "async" else "selfstab"
    if cp.has_section(section):
        sub = cp[section]
        if "policy" in sub:
            try:
                scen.policy = Policy(sub["policy"].strip())
            except ValueError:
                raise ParseError(f"bad policy {sub['policy']!r}") from None
        if "seed" in sub:
            scen.seed = _int(sub["seed"], "seed")
    if algorithm == "selfstab" and cp.has_section("selfstab"):
        sub = cp["selfstab"]
        for key in ("k", "fault_seed", "garbage"):
            if key in sub:
                setattr(scen, key, _int(sub[key], key))
        if "corrupt" in sub:
            try:
                scen.corrupt = sub.getboolean("corrupt")
            except ValueError:
                raise ParseError(f"bad boolean {sub['corrupt']!r}") from None
        if scen.k < 0 or not 0 <= scen.garbage <= scen.k:
            raise ParseError("selfstab needs k >= 0 and 0 <= garbage <= k")
    return scen


def load_scenario(path) -> Scenario:
    path = pathlib.Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario: {exc}") from None
    return parse_scenario(text, base_dir=path.parent, name=path.stem)
