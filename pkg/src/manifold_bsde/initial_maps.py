"""Built-in initial maps h : T^m -> N, vectorized over node coordinates.

Every map takes coordinates of shape (..., m) and returns values of shape
(..., L). Maps must land on (or within 1e-6 of) the target manifold; the
solver projects once to remove roundoff.
"""

from __future__ import annotations

import numpy as np

from .geometry import EmbeddedManifold


def constant_map(p0) -> callable:
    p0 = np.asarray(p0, dtype=float)

    def h(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(p0, x.shape[:-1] + p0.shape).copy()

    return h


def great_circle_map(k: int = 1, ambient_dim: int = 3) -> callable:
    """Uniform-speed circle of winding k in the (e1, e2) plane, along x_1."""

    def h(x):
        x = np.asarray(x, dtype=float)
        theta = 2.0 * np.pi * k * x[..., 0]
        out = np.zeros(x.shape[:-1] + (ambient_dim,))
        out[..., 0] = np.cos(theta)
        out[..., 1] = np.sin(theta)
        return out

    return h


def fourier_map(component_terms, ambient_dim: int) -> callable:
    """Trigonometric polynomial in x_1 per ambient component.

    ``component_terms`` is a sequence of ``ambient_dim`` dicts with optional
    keys "const", "cos" and "sin"; "cos"/"sin" hold [frequency, amplitude]
    pairs. The result must land within 1e-6 of the manifold (checked at
    initialization time, not here).
    """
    terms = list(component_terms)
    if len(terms) != ambient_dim:
        raise ValueError(f"need {ambient_dim} component term tables")

    def h(x):
        x = np.asarray(x, dtype=float)
        s = x[..., 0]
        out = np.zeros(x.shape[:-1] + (ambient_dim,))
        for c, table in enumerate(terms):
            acc = np.full(s.shape, float(table.get("const", 0.0)))
            for k, amp in table.get("cos", []):
                acc = acc + float(amp) * np.cos(2.0 * np.pi * float(k) * s)
            for k, amp in table.get("sin", []):
                acc = acc + float(amp) * np.sin(2.0 * np.pi * float(k) * s)
            out[..., c] = acc
        return out

    return h


def latitude_circle_map(z0: float) -> callable:
    """Non-geodesic circle at height z0 on S^2; evolves under the flow."""
    if not -1.0 < z0 < 1.0:
        raise ValueError("need -1 < z0 < 1")
    r = float(np.sqrt(1.0 - z0 * z0))

    def h(x):
        x = np.asarray(x, dtype=float)
        theta = 2.0 * np.pi * x[..., 0]
        out = np.empty(x.shape[:-1] + (3,))
        out[..., 0] = r * np.cos(theta)
        out[..., 1] = r * np.sin(theta)
        out[..., 2] = z0
        return out

    return h


def sphere_wrap_map() -> callable:
    """T^2 -> S^2 wrap with degenerate fibers at the poles (m=2 benchmark).

    The first coordinate drives the polar angle through a full down-and-back
    sweep, the second the azimuth, so the circles x_1 = 0 and x_1 = 1/2
    collapse to points. Energy concentrates there under the flow.
    """

    def h(x):
        x = np.asarray(x, dtype=float)
        alpha = 0.5 * np.pi * (1.0 - np.cos(2.0 * np.pi * x[..., 0]))
        beta = 2.0 * np.pi * x[..., 1]
        out = np.empty(x.shape[:-1] + (3,))
        out[..., 0] = np.sin(alpha) * np.cos(beta)
        out[..., 1] = np.sin(alpha) * np.sin(beta)
        out[..., 2] = np.cos(alpha)
        return out

    return h


INITIAL_MAP_IDS = ("constant", "great_circle", "fourier", "sphere_wrap")


def make_initial_map(map_id: str, M: EmbeddedManifold, m: int, params: dict) -> callable:
    """Resolve an initial-map id from an experiment config."""
    if map_id == "constant":
        p0 = params.get("point")
        if p0 is None:
            p0 = np.zeros(M.ambient_dim)
            p0[-1] = 1.0
            if M.name == "torus2":
                p0 = np.array([1.0, 0.0, 1.0, 0.0])
        return constant_map(M.project(np.asarray(p0, dtype=float)))
    if map_id == "great_circle":
        if M.name == "torus2":
            raise ValueError("great_circle targets the spheres")
        return great_circle_map(int(params.get("k", 1)), M.ambient_dim)
    if map_id == "fourier":
        if m != 1:
            raise ValueError("fourier maps are m=1 only")
        return fourier_map(params["components"], M.ambient_dim)
    if map_id == "sphere_wrap":
        if m != 2 or M.name != "sphere3":
            raise ValueError("sphere_wrap needs m=2 and the sphere3 target")
        return sphere_wrap_map()
    raise ValueError(f"unknown initial map id {map_id!r}; known: {INITIAL_MAP_IDS}")
