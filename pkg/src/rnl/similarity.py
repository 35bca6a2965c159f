"""Pairwise region similarity and its normalisation.

Given flattened region embeddings ``e`` of shape ``(P, Cr)``:

========  =============================  ======================
form      raw similarity ``f(e_i, e_j)``   normalisation
========  =============================  ======================
gaussian  ``exp(e_i . e_j)``               row softmax of logits
dot       ``e_i . e_j``                    divide by ``P``
cosine    ``relu(cos(e_i, e_j))``          divide by ``P``
========  =============================  ======================

For the gaussian form the unnormalised matrix holds the logits
``e_i . e_j``; the exponential and the row sum are folded into a max-shifted
softmax. Only the cosine form is clipped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from rnl import autodiff as ad
from rnl.errors import ArgumentError, ContractError, DimensionError

FORMS = ("gaussian", "dot", "cosine")


@dataclass(frozen=True)
class AffinityMatrix:
    w: Any
    form: str
    normalized: bool = False

    @property
    def values(self):
        return ad.value(self.w)

    @property
    def positions(self):
        return self.values.shape[0]


def check_form(form):
    if form not in FORMS:
        raise ArgumentError(f"unknown similarity form {form!r}; expected one of {FORMS}")
    return form


def affinity(e, form):
    check_form(form)
    ve = ad.value(e)
    if np.ndim(ve) != 2 or ve.shape[0] < 1:
        raise DimensionError(f"embedding must have shape (P, Cr) with P >= 1, got {np.shape(ve)}")
    if not np.all(np.isfinite(ve)):
        raise ArgumentError("embedding contains non-finite values")
    if form == "cosine":
        # rounding can push a self-similarity a few ulps above 1
        w = ad.clamp(ad.gram(ad.l2_normalize_rows(e)), 0.0, 1.0)
    else:
        w = ad.gram(e)
    return AffinityMatrix(w, form)


def normalize(a):
    if a.normalized:
        raise ContractError(f"{a.form} affinity matrix is already normalized")
    if a.form == "gaussian":
        w = ad.softmax_rows(a.w)
    else:
        w = ad.divide(a.w, a.positions)
    return AffinityMatrix(w, a.form, normalized=True)


def attention_row(a, i, dims):
    """Row ``i`` of a normalised affinity, reshaped to a ``(T, H, W, 1)`` map."""
    if not a.normalized:
        raise ContractError("attention maps are read from a normalized affinity matrix")
    t, h, w = dims
    p = a.positions
    if t * h * w != p:
        raise DimensionError(f"dims {tuple(dims)} do not match {p} positions")
    if not 0 <= i < p:
        raise ArgumentError(f"reference position {i} out of range [0, {p})")
    return np.array(a.values[i]).reshape(t, h, w, 1)


def position_index(ref, dims):
    """Flat index of a ``(t, h, w)`` reference position."""
    t, h, w = ref
    T, H, W = dims
    if not (0 <= t < T and 0 <= h < H and 0 <= w < W):
        raise ArgumentError(f"reference position {tuple(ref)} outside clip extents {tuple(dims)}")
    return (t * H + h) * W + w
