"""Sequential multi-view editing.

Views are edited one at a time. Each view after the first is guided toward
the already edited views it shares the most matches with; the first view has
no neighbors and is therefore edited exactly like the per-image baseline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .consistency import ConsistencyConfig, ConsistencyLoss
from .diffusion import (GuidanceConfig, NumericalError, Schedule, initial_noise,
                        one_step_edit, sample)
from .matching import MatchIndex, MatchSet, match_count_index
from .scene import Scene, write_png

logger = logging.getLogger(__name__)

ENGINES = ("multistep", "onestep")
ORDERINGS = ("dataset", "greedy")


class EditError(RuntimeError):
    def __init__(self, view_id: int, message: str) -> None:
        super().__init__(f"view {view_id}: {message}")
        self.view_id = view_id


def order_views(scene: Scene, match_index: MatchIndex, mode: str = "dataset") -> list[int]:
    """Visiting order. ``greedy`` starts at the best-connected view and then
    keeps adding the view with the most matches to the views already placed."""
    ids = scene.view_ids
    if mode == "dataset":
        return list(ids)
    if mode != "greedy":
        raise ValueError(f"unknown ordering {mode!r}")
    start = min(ids, key=lambda v: (-match_index.total(v), v))
    order = [start]
    remaining = set(ids) - {start}
    while remaining:
        nxt = min(remaining, key=lambda v: (-sum(match_index.count(v, u) for u in order), v))
        order.append(nxt)
        remaining.remove(nxt)
    return order


def select_neighbors(view: int, edited, match_index: MatchIndex, k: int = 2) -> list[int]:
    ranked = sorted(edited, key=lambda n: (-match_index.count(view, n), n))
    return ranked[: max(k, 0)]


@dataclass
class EditSession:
    scene: Scene
    matchsets: dict[tuple[int, int], MatchSet]
    denoiser: object
    schedule: Schedule
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    seed: int = 0
    engine: str = "multistep"
    ordering: str = "dataset"
    edited: dict[int, np.ndarray] = field(default_factory=dict)
    order: list[int] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}")

    def matchset(self, view: int, other: int) -> MatchSet:
        """Matches between ``view`` and ``other``, with ``view`` as ``view_a``."""
        ms = self.matchsets.get((view, other))
        if ms is None:
            ms = self.matchsets.get((other, view))
        if ms is None:
            return MatchSet(view, other, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), self.scene.size)
        return ms.oriented(view)

    def view_seed(self, view_id: int) -> int:
        return self.seed + view_id


def _edit_view(session: EditSession, view_id: int, loss: ConsistencyLoss | None) -> np.ndarray:
    condition = session.scene.view(view_id).image
    g = session.guidance
    seed = session.view_seed(view_id)
    if session.engine == "multistep":
        return sample(session.denoiser, condition, session.schedule, g, seed=seed, loss_fn=loss)
    generator = session.denoiser.generator(condition, g.onestep_t)
    z = initial_noise(condition.shape, seed)
    return one_step_edit(generator, z, loss, steps=g.onestep_steps, lr=g.onestep_lr)


def edit_scene(session: EditSession) -> dict[int, np.ndarray]:
    """Edit every view of the session's scene in order; fills ``session.edited``."""
    index = match_count_index(session.matchsets)
    session.order = order_views(session.scene, index, session.ordering)
    session.edited = {}
    session.records = []
    for view_id in session.order:
        neighbors = select_neighbors(view_id, session.edited, index, session.guidance.neighbor_count)
        pairs = [(session.edited[n], session.matchset(view_id, n)) for n in neighbors]
        loss = ConsistencyLoss(pairs, session.consistency, shape=session.scene.size) if pairs else None
        try:
            image = _edit_view(session, view_id, loss)
        except NumericalError as exc:
            raise NumericalError(f"view {view_id}: {exc}") from exc
        except Exception as exc:
            raise EditError(view_id, str(exc)) from exc
        session.edited[view_id] = image
        final = loss.value(image) if loss is not None else 0.0
        session.records.append({"view_id": view_id, "neighbors": neighbors,
                                "seed": session.view_seed(view_id), "final_loss": final})
        logger.debug("edited view %d with neighbors %s, loss %.4g", view_id, neighbors, final)
    return session.edited


def write_session(session: EditSession, out_dir, extra_config: dict | None = None) -> Path:
    """Write ``edited/<view_id>.png`` and ``session.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "edited").mkdir(parents=True, exist_ok=True)
    for view_id, image in session.edited.items():
        write_png(image, out / "edited" / f"{view_id}.png")
    doc = {
        "config": {"guidance": asdict(session.guidance), "consistency": asdict(session.consistency),
                   "engine": session.engine, "ordering": session.ordering, "seed": session.seed,
                   **(extra_config or {})},
        "order": session.order,
        "views": session.records,
    }
    path = out / "session.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
