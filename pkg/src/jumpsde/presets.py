"""Built-in models and the builder that turns a JSON model spec into a Model."""

import copy

import numpy as np

from .coefficients import (AffineDiffusion, AffineJump, AffineMap, MarkLaw,
                           Model, PiecewiseDrift)
from .geometry import surface_from_spec

PRESETS = {
    # scalar sign drift, Poisson jumps with state-dependent amplitude
    "sign_1d": {
        "dim": 1,
        "surface": {"type": "hyperplane", "normal": [1.0], "offset": 0.0},
        "A_plus": [[0.0]], "b_plus": [-1.0],
        "A_minus": [[0.0]], "b_minus": [1.0],
        "sigma": 1.0,
        "jump": {"slope": [[-0.5]], "intercept": [0.5], "uses_mark": False},
        "lambda": 1.0,
        "marks": {"law": "dirac", "value": 1.0},
        "x0": [0.0], "T": 1.0, "epsilon0": 1.0,
    },
    # mean-reverting threshold control with Poisson jumps
    "poisson_1d": {
        "dim": 1,
        "surface": {"type": "hyperplane", "normal": [1.0], "offset": 0.0},
        "A_plus": [[-1.0]], "b_plus": [-0.5],
        "A_minus": [[-1.0]], "b_minus": [1.0],
        "sigma": 0.5,
        "jump": {"slope": [[0.2]], "intercept": [0.3], "uses_mark": False},
        "lambda": 2.0,
        "marks": {"law": "dirac", "value": 1.0},
        "x0": [0.2], "T": 1.0, "epsilon0": 1.0,
    },
    # two-dimensional threshold drift on an oblique hyperplane, compound Poisson jumps
    "cpp_threshold_2d": {
        "dim": 2,
        "surface": {"type": "hyperplane", "normal": [1.0, 1.0], "offset": 0.0},
        "A_plus": [[-0.5, 0.0], [0.0, -0.5]], "b_plus": [-1.0, -0.5],
        "A_minus": [[-0.5, 0.0], [0.0, -0.5]], "b_minus": [1.0, 0.5],
        "sigma": [[1.0, 0.3], [0.0, 0.8]],
        "jump": {"slope": [[-0.1, 0.0], [0.0, -0.1]], "intercept": [0.3, -0.2],
                 "uses_mark": True},
        "lambda": 1.5,
        "marks": {"law": "normal", "mean": 0.2, "std": 0.5},
        "x0": [0.1, -0.2], "T": 1.0, "epsilon0": 1.0,
    },
}

PARAM_KEYS = {"dim", "surface", "A_plus", "b_plus", "A_minus", "b_minus", "sigma",
              "sigma_slopes", "jump", "lambda", "marks", "x0", "T", "epsilon0"}
JUMP_KEYS = {"slope", "intercept", "uses_mark"}


def threshold_affine_defaults(dim=2):
    eye = np.eye(dim)
    b = np.zeros(dim)
    b_plus, b_minus = b.copy(), b.copy()
    b_plus[0], b_minus[0] = -1.0, 1.0
    normal = np.zeros(dim)
    normal[0] = 1.0
    return {
        "dim": dim,
        "surface": {"type": "hyperplane", "normal": normal.tolist(), "offset": 0.0},
        "A_plus": (-eye).tolist(), "b_plus": b_plus.tolist(),
        "A_minus": (-eye).tolist(), "b_minus": b_minus.tolist(),
        "sigma": 1.0,
        "jump": {"slope": np.zeros((dim, dim)).tolist(), "intercept": b.tolist(),
                 "uses_mark": True},
        "lambda": 0.0,
        "marks": {"law": "dirac", "value": 1.0},
        "x0": b.tolist(), "T": 1.0, "epsilon0": 1.0,
    }


PRESET_NAMES = tuple(PRESETS) + ("threshold_affine",)


def resolve_params(preset, params=None):
    """Merge user parameters over the preset defaults (unknown keys rejected)."""
    params = dict(params or {})
    unknown = set(params) - PARAM_KEYS
    if unknown:
        raise KeyError(f"unknown model parameter {sorted(unknown)[0]!r}")
    if preset == "threshold_affine":
        base = threshold_affine_defaults(int(params.get("dim", 2)))
    elif preset in PRESETS:
        base = copy.deepcopy(PRESETS[preset])
    else:
        raise KeyError(f"unknown preset {preset!r}")
    if "jump" in params:
        bad = set(params["jump"]) - JUMP_KEYS
        if bad:
            raise KeyError(f"unknown jump parameter {sorted(bad)[0]!r}")
        base["jump"] = {**base["jump"], **params.pop("jump")}
    base.update(params)
    return base


def _sigma_matrix(value, dim):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    return arr.reshape(dim, dim)


def model_from_params(p, name="custom", surface_spec=None):
    dim = int(p["dim"])
    surface = surface_from_spec(surface_spec or p["surface"], dim)
    drift = PiecewiseDrift(surface, AffineMap(p["A_plus"], p["b_plus"]),
                           AffineMap(p["A_minus"], p["b_minus"]))
    if drift.plus.b.size != dim or drift.minus.b.size != dim:
        raise ValueError("drift pieces do not match the model dimension")
    diffusion = AffineDiffusion(_sigma_matrix(p["sigma"], dim), p.get("sigma_slopes"))
    jp = p["jump"]
    jump = AffineJump(jp["slope"], jp["intercept"], jp.get("uses_mark", True))
    marks = MarkLaw.from_spec(p["marks"])
    x0 = np.asarray(p["x0"], dtype=float)
    if x0.size != dim:
        raise ValueError("x0 does not match the model dimension")
    return Model(drift, diffusion, jump, float(p["lambda"]), marks, x0, float(p["T"]),
                 name=name, extra={"epsilon0": float(p["epsilon0"])})


def build_model(preset, params=None, surface_spec=None, T=None):
    """Model for a named preset with optional parameter overrides."""
    p = resolve_params(preset, params)
    if T is not None:
        p["T"] = T
    return model_from_params(p, preset, surface_spec)
