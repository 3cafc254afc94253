"""Iterative profile refinement.

The profile starts with the root alone. Each step profiles the callees of
every function waiting in the frontier, reruns the workload, rebuilds the
variance tree from that run only, and selects factors. Selected factors that
still hide unprofiled work form the next frontier; the rest are finalized.
The loop ends when the frontier empties or the iteration budget runs out.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .tracefmt import Forest, FunctionRegistry
from .vartree import Factor, SelectionParams, VarianceTree, build_tree, report, select_factors

log = logging.getLogger(__name__)

BODY_SHARE_LIMIT = 0.9


class RefineError(ValueError):
    pass


@dataclass
class RefineState:
    root: int
    callees: dict
    profile_set: set
    frontier: list  # func ids whose callees get profiled next
    finalized: list = field(default_factory=list)  # labels of factors kept as findings
    iteration: int = 0
    tree: VarianceTree | None = None
    factors: list = field(default_factory=list)
    history: list = field(default_factory=list)

    @property
    def done(self) -> bool:
        return not self.frontier


def init_refinement(root: int | str, registry: FunctionRegistry, callees: dict) -> RefineState:
    root_id = registry.id_of(root) if isinstance(root, str) else root
    if root_id not in registry:
        raise RefineError(f"unknown root function id {root_id}")
    if not registry.is_root(root_id):
        raise RefineError(f"{registry.name(root_id)} is not flagged as a root function")
    return RefineState(root_id, callees, {root_id}, [root_id])


def needs_break_down(f: Factor, state: RefineState, params: SelectionParams) -> bool:
    """Variance factor, unprofiled callees left, contribution >= d, body share < 0.9."""
    if not f.is_variance or f.func_id is None:
        return False
    if not any(c not in state.profile_set for c in state.callees.get(f.func_id, ())):
        return False
    if f.contribution < params.d:
        return False
    share = state.tree.body_share(f.func_id) if state.tree is not None else None
    return share is None or share < BODY_SHARE_LIMIT


def refine_step(state: RefineState, run: Callable[[set, int], Forest], registry: FunctionRegistry,
                params: SelectionParams) -> tuple[RefineState, list]:
    """One iteration; ``run(profile, iteration)`` executes the workload and returns its call forest."""
    if state.done:
        raise RefineError("refinement frontier is empty")
    added = set()
    for fid in state.frontier:
        added.update(c for c in state.callees.get(fid, ()) if c not in state.profile_set)
    state.profile_set |= added
    state.iteration += 1
    forest = run(set(state.profile_set), state.iteration)
    tree = build_tree(forest, state.root, registry=registry)
    state.tree = tree
    factors = select_factors(tree, params)
    state.factors = factors
    frontier = []
    for f in factors:
        if needs_break_down(f, state, params):
            frontier.append(f.func_id)
        elif f.label not in state.finalized:
            state.finalized.append(f.label)
    state.frontier = frontier
    state.history.append({
        "iteration": state.iteration,
        "profile": sorted(registry.name(i) for i in state.profile_set),
        "added": sorted(registry.name(i) for i in added),
        "frontier": [registry.name(i) for i in frontier],
        "report": report(tree, factors),
    })
    log.info("iteration %d: selected %s, frontier %s", state.iteration,
             [f.label for f in factors], [registry.name(i) for i in frontier])
    return state, factors


@dataclass
class RefineResult:
    state: RefineState
    final: dict


def run_refinement(run: Callable[[set, int], Forest], registry: FunctionRegistry, root: int | str,
                   callees: dict, params: SelectionParams, max_iterations: int = 10,
                   out_dir: str | Path | None = None) -> RefineResult:
    """Iterate until the frontier empties; writes ``iter-<n>.json`` and ``final.json`` under ``out_dir``."""
    if max_iterations < 1:
        raise RefineError("max_iterations must be >= 1")
    state = init_refinement(root, registry, callees)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while not state.done and state.iteration < max_iterations:
        refine_step(state, run, registry, params)
        if out is not None:
            _dump(out / f"iter-{state.iteration}.json", state.history[-1])
    last = state.history[-1]
    final = {
        "converged": state.done,
        "iterations": state.iteration,
        "profile": last["profile"],
        "finalized": list(state.finalized),
        "report": last["report"],
    }
    if out is not None:
        _dump(out / "final.json", final)
    return RefineResult(state, final)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
