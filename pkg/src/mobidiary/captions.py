"""Caption templates for action sequences and their inverse."""

from __future__ import annotations

from typing import Sequence

from .text import normalize

ACTION_LABELS = ("walk", "run", "sit", "stand", "wave", "drink", "write", "jump")
_CONJUGATED = {label + "s": label for label in ACTION_LABELS}
MAX_ACTIONS = 6


def conjugate(verb: str) -> str:
    return verb + "s"


def render_caption(labels: Sequence[str]) -> str:
    """["walk", "sit", "drink"] -> "The user walks, then sits, and finally drinks." """
    labels = list(labels)
    if not labels:
        raise ValueError("cannot caption an empty action list")
    if len(labels) > MAX_ACTIONS:
        raise ValueError(f"at most {MAX_ACTIONS} actions per caption, got {len(labels)}")
    verbs = [conjugate(v) for v in labels]
    if len(verbs) == 1:
        return f"The user {verbs[0]}."
    if len(verbs) == 2:
        return f"The user {verbs[0]} and then {verbs[1]}."
    middle = "".join(f", then {v}" for v in verbs[1:-1])
    return f"The user {verbs[0]}{middle}, and finally {verbs[-1]}."


def parse_caption(caption: str) -> list:
    """Recover the ordered action labels mentioned in a caption."""
    return [_CONJUGATED[w] for w in normalize(caption) if w in _CONJUGATED]
