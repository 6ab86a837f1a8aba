"""Bundled benchmark domain files and loaders."""

from __future__ import annotations

from importlib import resources

from genplan.pddl import DomainDef, parse_domain

DOMAIN_NAMES = ("blocksworld", "gripper", "ferry", "satellite", "logistics")

_cache: dict[str, DomainDef] = {}


def domain_text(name: str) -> str:
    if name not in DOMAIN_NAMES:
        raise KeyError(f"unknown bundled domain {name!r}")
    return resources.files(__package__).joinpath(f"{name}.pddl").read_text()


def load_domain(name: str) -> DomainDef:
    """Parse (and cache) a bundled domain by name."""
    if name not in _cache:
        _cache[name] = parse_domain(domain_text(name))
    return _cache[name]
